#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "roe/autograd.hpp"
#include "roe/data.hpp"

namespace roe {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t max_seq_len = 128;
  std::size_t adapter_dim = 8;  // c
  std::size_t max_turns = 4;    // q_max; one routing token per turn plus the image slot
  double temperature = 1.0;     // tau
  double ln_eps = 1e-5;
  std::uint64_t seed = 1234;

  /// Throws ConfigError when d % h != 0, c >= d, or any extent is zero.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Pre-norm decoder block: x + Attn(LN1(x)), then + FFN(LN2(.)). No biases
/// outside the norms, so zero output/down projections make it an identity.
struct DecoderLayer {
  Parameter ln1_gain, ln1_bias;
  Parameter w_q, w_k, w_v, w_o;
  Parameter ln2_gain, ln2_bias;
  Parameter w_ff1, w_ff2;

  DecoderLayer() = default;
  DecoderLayer(const ModelConfig& cfg, std::size_t index, std::mt19937_64& rng);

  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
};

struct Backbone {
  Parameter tok_emb;  // [V x d]
  Parameter pos_emb;  // [max_len x d]
  std::vector<DecoderLayer> layers;
  Parameter lnf_gain, lnf_bias;
  Parameter head;  // [d x V]

  Backbone() = default;
  Backbone(const ModelConfig& cfg, std::mt19937_64& rng);

  std::vector<Parameter*> parameters();
};

/// Shares LN1/K/V of one layer across several row subsets of the same input,
/// so per-segment expert selection computes them once.
class LayerContext {
 public:
  LayerContext(Tape& tape, DecoderLayer& layer, Var x, std::shared_ptr<const AttentionMask> mask,
               const ModelConfig& cfg);

  /// Heavy layer output for sequence rows `rows` ([|rows| x d]). Queries come
  /// from those rows; keys/values from every row of the input.
  Var forward_rows(std::span<const std::size_t> rows);
  Var input() const { return x_; }
  std::size_t invocations() const { return invocations_; }

 private:
  void prepare();

  Tape& tape_;
  DecoderLayer& layer_;
  Var x_;
  std::shared_ptr<const AttentionMask> mask_;
  const ModelConfig& cfg_;
  bool prepared_ = false;
  Var ln1_g_, ln1_b_, wq_, wk_, wv_, wo_, ln2_g_, ln2_b_, w1_, w2_;
  Var h1_, k_, v_;
  std::size_t invocations_ = 0;
};

/// Full-sequence layer forward.
Var layer_forward(Tape& tape, DecoderLayer& layer, Var x, std::shared_ptr<const AttentionMask> mask,
                  const ModelConfig& cfg);

/// Token + learned absolute position embeddings for a plain token sequence.
Var embed_tokens(Tape& tape, Backbone& backbone, std::span<const int> tokens,
                 std::span<const int> positions, const ModelConfig& cfg);

/// Final norm + vocabulary projection.
Var output_head(Tape& tape, Backbone& backbone, Var x, const ModelConfig& cfg);

struct DenseResult {
  Var logits;
  std::vector<Tensor> hidden;  // x_0 .. x_n when requested
};

/// Router-free causal decoder over `tokens` (positions 0..m-1).
DenseResult dense_forward(Tape& tape, Backbone& backbone, std::span<const int> tokens,
                          const ModelConfig& cfg, bool keep_hidden = false);

/// Mean over tokens of ||x_{i+1} - x_i||_1 for every layer i of a dense pass.
std::vector<double> l1_layer_importance(Backbone& backbone, const ModelConfig& cfg,
                                        std::span<const int> tokens);
std::vector<double> l1_layer_importance(Backbone& backbone, const ModelConfig& cfg,
                                        const ConversationSample& sample);

/// Image tokens followed by every question/answer pair, no routing slots.
std::vector<int> flatten_tokens(const ConversationSample& sample);

}  // namespace roe
