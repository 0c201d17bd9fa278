#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "roe/adapters.hpp"
#include "roe/autograd.hpp"
#include "roe/data.hpp"
#include "roe/model.hpp"

namespace roe {

enum class SegmentKind { ImageRouter, Image, Router, Question, Answer };

struct Segment {
  SegmentKind kind;
  std::size_t turn;  // 0 for the image router and image block
  std::size_t start;
  std::size_t length;
};

/// [r0, I, r1, Q1, A1, ..., rq, Qq, Aq] as contiguous segments.
struct SegmentLayout {
  std::vector<Segment> segments;
  std::size_t turns = 0;

  std::size_t length() const;
  /// Position of routing slot k (0 = image router, k = turn k).
  std::size_t router_position(std::size_t slot) const;
  /// Slot index at `pos`, or -1 for ordinary tokens.
  int router_slot(std::size_t pos) const;
  /// Rows that share one routing decision: group 0 is {r0, I}, group k is {r_k, Q_k, A_k}.
  std::vector<std::size_t> group_rows(std::size_t group) const;
  /// Tokens a routing slot aggregates: I for slot 0, Q_k for slot k.
  const Segment& content_of(std::size_t slot) const;
  const Segment& find(SegmentKind kind, std::size_t turn) const;
  /// Throws MalformedSampleError on gaps, overlaps, or wrong slot counts.
  void validate() const;
};

/// A sample laid out for a routed forward pass.
struct AssembledSequence {
  SegmentLayout layout;
  std::vector<int> tokens;     // -1 at routing slots
  std::vector<int> positions;  // position ids of ordinary tokens, counting only ordinary tokens
  std::vector<int> targets;    // next-token target per row (0 where unused)
  std::vector<std::uint8_t> loss_mask;  // rows whose next token is an answer token
  std::shared_ptr<const AttentionMask> mask;

  std::size_t length() const { return tokens.size(); }
};

/// Lays out a whole conversation. With `open_last_answer` the final turn's
/// answer may be partial or empty (generation prompts).
AssembledSequence assemble_sequence(const ConversationSample& sample, const ModelConfig& cfg,
                                    bool open_last_answer = false);

/// Causal mask where ordinary tokens never see routing slots and slot k may
/// also read its content segment.
AttentionMask build_routing_mask(const SegmentLayout& layout);

/// True exactly on answer-token positions.
std::vector<std::uint8_t> answer_mask(const SegmentLayout& layout);

struct RouterParams {
  std::vector<Parameter> w_r;  // per layer [2d x 2]; column 0 = keep, 1 = skip
  Parameter tokens;            // [(q_max + 1) x d] routing-token embeddings
  double temperature = 1.0;

  RouterParams() = default;
  RouterParams(const ModelConfig& cfg, std::mt19937_64& rng);
  std::vector<Parameter*> parameters();
};

/// Backbone plus one adapter and one router per layer.
struct RoeModel {
  ModelConfig cfg;
  Backbone backbone;
  std::vector<Adapter> adapters;
  RouterParams router;

  explicit RoeModel(const ModelConfig& cfg);
  std::vector<Parameter*> parameters();
  std::vector<Parameter*> parameters(ParamGroup group);
  Parameter& find(const std::string& name);
};

enum class RouteMode { Dense, Soft, Hard };
enum class Choice { Keep, Skip };

const char* to_string(RouteMode m);
RouteMode route_mode_from_string(const std::string& s);

struct RoutingDecision {
  std::size_t layer = 0;
  std::size_t segment = 0;
  double p_keep = 0.5;
  double p_skip = 0.5;
  Choice choice = Choice::Keep;
  RouteMode mode = RouteMode::Hard;
};

/// Decisions for every (layer, segment) of one forward pass, layer-major.
/// With `shared_image_path` the image block rides with the single question,
/// so a one-turn prompt carries one decision per layer.
struct RoutingPlan {
  std::size_t layers = 0;
  std::size_t segments = 0;
  bool shared_image_path = false;
  std::vector<RoutingDecision> decisions;

  const RoutingDecision& at(std::size_t layer, std::size_t segment) const;
  std::size_t skip_count() const;
  /// Hard plan with skip[layer * segments + segment] choices and probabilities 0/1.
  static RoutingPlan forced(std::size_t layers, std::size_t segments, const std::vector<bool>& skip,
                            bool shared_image_path = false);
};

struct InvocationCounters {
  std::size_t heavy = 0;
  std::size_t adapter = 0;
  double skip_ratio() const;
  InvocationCounters& operator+=(const InvocationCounters& o);
};

struct ForwardOptions {
  RouteMode mode = RouteMode::Soft;
  /// Hard choices imposed from outside; routers are not evaluated.
  const RoutingPlan* forced_plan = nullptr;
  /// Image-segment probabilities per layer taken as given, as when the image
  /// prefix was routed earlier and cached.
  const std::vector<std::array<double, 2>>* image_probs = nullptr;
  /// Single-turn generation: image rows follow the question's decision.
  bool shared_image_path = false;
  /// Soft mode only: hard one-hot forward with gradients through the probabilities.
  bool straight_through = false;
  InvocationCounters* counters = nullptr;
  bool keep_hidden = false;
};

struct ForwardResult {
  Var logits;
  RoutingPlan plan;
  /// p_skip per (layer, segment), layer-major; empty for dense and forced runs.
  std::vector<Var> skip_probs;
  /// Per layer: [q x 2] router logits for every turn ([h_r0, h_rj] W_r, before the 1/tau scaling).
  std::vector<Tensor> turn_logits;
  std::vector<Tensor> hidden;  // x_0 .. x_n when requested
};

ForwardResult roe_forward(Tape& tape, RoeModel& model, const AssembledSequence& seq,
                          const ForwardOptions& options);

/// softmax([h_r0, h_rj] W_r / tau); index 0 keeps the layer, ties keep.
RoutingDecision route_question(const Tensor& h_r0, const Tensor& h_rj, const Tensor& w_r,
                               double temperature, std::size_t layer = 0);
/// softmax(sum_k [h_r0, h_rk] W_r / (q tau)) over all q turns.
RoutingDecision route_image(const Tensor& h_r0, const std::vector<Tensor>& h_rk, const Tensor& w_r,
                            double temperature, std::size_t layer = 0);
Choice hard_choice(double p_keep, double p_skip);

struct ExpertWeights {
  Choice choice = Choice::Keep;
  Var p_keep;  // soft mode mixture weights
  Var p_skip;
};

/// Layer-i output for `rows`: the heavy layer, the adapter, or their soft mix.
/// In hard mode the unchosen branch is not computed.
Var select_expert(Tape& tape, LayerContext& ctx, Adapter& adapter, std::span<const std::size_t> rows,
                  const ExpertWeights& weights, RouteMode mode, InvocationCounters* counters);

/// Hard plan from one prefill pass over a prompt (no answer tokens needed).
RoutingPlan plan_inference_routing(RoeModel& model, const AssembledSequence& prompt);

}  // namespace roe
