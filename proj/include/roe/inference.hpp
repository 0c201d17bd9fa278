#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "roe/data.hpp"
#include "roe/routing.hpp"

namespace roe {

struct GenerationResult {
  std::vector<int> tokens;  // generated answer, END included when produced
  RoutingPlan plan;
  InvocationCounters counters;
  std::size_t forward_passes = 0;
  double flops = 0.0;        // layer work actually executed
  double dense_flops = 0.0;  // same passes with every layer kept
};

struct GenerateOptions {
  RouteMode mode = RouteMode::Hard;
  std::size_t max_new_tokens = 8;
  bool stop_at_end = true;
  /// Imposed plan for every pass (bench); otherwise hard mode plans at prefill.
  const RoutingPlan* forced_plan = nullptr;
};

/// Greedy decoding of one single-turn prompt [r0, I, r1, Q]. In hard mode
/// the prefill pass fixes the plan, which is then imposed on every decode
/// step. No KV cache: each step recomputes the full sequence.
GenerationResult generate(RoeModel& model, const std::vector<int>& image_tokens,
                          const std::vector<int>& question, const GenerateOptions& options);

/// One question of a corpus sample, evaluated as its own single-turn prompt.
struct EvalItem {
  std::uint64_t sample_id = 0;
  std::size_t turn = 0;  // 1-based
  std::vector<int> image_tokens;
  std::vector<int> question;
  std::vector<int> answer;
  Difficulty difficulty = Difficulty::Easy;
  TaskFamily family = TaskFamily::Copy;
};

std::vector<EvalItem> eval_items(const std::vector<ConversationSample>& corpus);

struct GroupMetrics {
  std::size_t examples = 0;
  std::size_t correct = 0;
  InvocationCounters counters;
  double accuracy() const;
};

struct RunMetrics {
  double accuracy = 0.0;
  double speed = 0.0;  // examples per second
  double skip = 0.0;   // adapter / (adapter + heavy)
  std::size_t heavy_layer_invocations = 0;
  std::size_t adapter_invocations = 0;
  double flops_estimate = 0.0;
  double skip_params = 0.0;  // fraction of heavy-layer parameters left inactive
  double skip_flops = 0.0;   // 1 - flops / dense flops
  std::size_t examples = 0;
  GroupMetrics easy, hard;
  std::vector<std::pair<TaskFamily, GroupMetrics>> families;

  nlohmann::ordered_json to_json() const;
};

/// Routing path of one evaluated prompt (layer-wise shared decision).
struct RoutingRecord {
  std::uint64_t sample_id;
  std::size_t turn;
  RoutingDecision decision;
};

/// Exact-match accuracy, throughput, and skip accounting. One warm-up item
/// runs before the timed pass. With workers > 1 items are sharded and the
/// counters summed.
RunMetrics evaluate(RoeModel& model, const std::vector<EvalItem>& items, RouteMode mode,
                    unsigned workers = 1, std::vector<RoutingRecord>* routes = nullptr,
                    std::size_t max_new_tokens = 8);

void write_routing_csv(std::ostream& out, const std::vector<RoutingRecord>& routes);

struct BenchOptions {
  std::vector<double> skip_ratios{0.0, 0.25, 0.5};
  std::size_t examples = 200;
  std::size_t repeats = 5;
  std::size_t decode_steps = 8;
  std::uint64_t seed = 7;
};

struct BenchRow {
  double skip_ratio = 0.0;
  std::size_t skipped_layers = 0;
  std::vector<double> run_latency;  // mean seconds per example, per repetition
  double median_latency = 0.0;
  InvocationCounters counters;      // one repetition
  std::size_t forward_passes = 0;   // one repetition
  /// heavy invocations per routed segment per decode step.
  double heavy_per_segment_step = 0.0;
};

/// Forced plans with round(s * n) skipped layers per prompt and a fixed decode
/// budget (END ignored) so every ratio does the same number of passes.
std::vector<BenchRow> bench(RoeModel& model, const std::vector<EvalItem>& items,
                            const BenchOptions& options);

struct CostScenario {
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t n_layers = 4;
  std::size_t adapter_dim = 8;
  std::size_t seq_len = 1;
  std::size_t experts = 1;  // K
  std::size_t top_k = 1;    // informational: soft MoE runs every expert
  double skip = 0.0;
  std::size_t routed_segments = 1;
  std::size_t decode_tokens = 0;  // for the KV-cache variant

  void validate() const;
};

struct CostReport {
  double dense_flops = 0.0;
  double soft_moe_flops = 0.0;
  double roe_flops = 0.0;       // core + router overhead
  double roe_core_flops = 0.0;  // n [(1 - s) layer + s adapter]
  double moe_router_flops = 0.0;
  double roe_router_flops = 0.0;
  double adapter_layer_ratio = 0.0;
  double roe_dense_ratio = 0.0;  // core / dense
  double kv_dense_flops = 0.0;   // prefill + cached decode
  double kv_roe_flops = 0.0;

  nlohmann::ordered_json to_json() const;
};

CostReport compare_costs(const CostScenario& s);

struct ImportanceProfile {
  std::vector<std::uint64_t> sample_ids;
  std::vector<std::vector<double>> per_example;  // [example][layer]
  std::vector<double> mean;
};

ImportanceProfile profile_importance(RoeModel& model, const std::vector<ConversationSample>& corpus);
/// Columns sample_id,layer,l1; exactly n rows per example.
void write_profile_csv(std::ostream& out, const ImportanceProfile& profile);

}  // namespace roe
