#include "roe/model.hpp"

#include <cmath>
#include <numeric>

#include "roe/errors.hpp"

namespace roe {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 ||
      max_seq_len == 0 || adapter_dim == 0 || max_turns == 0) {
    throw ConfigError("model config: every extent must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (adapter_dim >= d_model) {
    throw ConfigError("model config: adapter_dim " + std::to_string(adapter_dim) +
                      " must be smaller than d_model " + std::to_string(d_model));
  }
  if (!(temperature > 0.0)) throw ConfigError("model config: temperature must be positive");
  if (!(ln_eps > 0.0)) throw ConfigError("model config: ln_eps must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["max_seq_len"] = max_seq_len;
  j["adapter_dim"] = adapter_dim;
  j["max_turns"] = max_turns;
  j["temperature"] = temperature;
  j["ln_eps"] = ln_eps;
  j["seed"] = seed;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.adapter_dim = j.at("adapter_dim").get<std::size_t>();
  c.max_turns = j.at("max_turns").get<std::size_t>();
  c.temperature = j.at("temperature").get<double>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

namespace {

Parameter matrix_param(const std::string& name, std::size_t rows, std::size_t cols, double stddev,
                       std::mt19937_64& rng) {
  return Parameter(name, Tensor::gaussian({rows, cols}, stddev, rng), ParamGroup::Backbone);
}

Parameter norm_param(const std::string& name, std::size_t d, double fill) {
  return Parameter(name, Tensor({d}, fill), ParamGroup::Backbone, /*weight_decay=*/false);
}

}  // namespace

DecoderLayer::DecoderLayer(const ModelConfig& cfg, std::size_t index, std::mt19937_64& rng) {
  const std::string p = "backbone.layers." + std::to_string(index) + ".";
  const std::size_t d = cfg.d_model;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_out = s_in / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  const double s_ff_out = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)) /
                          std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  ln1_gain = norm_param(p + "ln1.gain", d, 1.0);
  ln1_bias = norm_param(p + "ln1.bias", d, 0.0);
  w_q = matrix_param(p + "attn.w_q", d, d, s_in, rng);
  w_k = matrix_param(p + "attn.w_k", d, d, s_in, rng);
  w_v = matrix_param(p + "attn.w_v", d, d, s_in, rng);
  w_o = matrix_param(p + "attn.w_o", d, d, s_out, rng);
  ln2_gain = norm_param(p + "ln2.gain", d, 1.0);
  ln2_bias = norm_param(p + "ln2.bias", d, 0.0);
  w_ff1 = matrix_param(p + "ffn.w_1", d, cfg.d_ff, s_in, rng);
  w_ff2 = matrix_param(p + "ffn.w_2", cfg.d_ff, d, s_ff_out, rng);
}

std::vector<Parameter*> DecoderLayer::parameters() {
  return {&ln1_gain, &ln1_bias, &w_q, &w_k, &w_v, &w_o, &ln2_gain, &ln2_bias, &w_ff1, &w_ff2};
}

std::size_t DecoderLayer::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : const_cast<DecoderLayer*>(this)->parameters()) n += p->value.size();
  return n;
}

Backbone::Backbone(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  tok_emb = Parameter("backbone.tok_emb",
                      Tensor::gaussian({cfg.vocab_size, cfg.d_model}, 0.1, rng), ParamGroup::Backbone);
  pos_emb = Parameter("backbone.pos_emb",
                      Tensor::gaussian({cfg.max_seq_len, cfg.d_model}, 0.1, rng), ParamGroup::Backbone);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) layers.emplace_back(cfg, i, rng);
  lnf_gain = norm_param("backbone.lnf.gain", cfg.d_model, 1.0);
  lnf_bias = norm_param("backbone.lnf.bias", cfg.d_model, 0.0);
  head = Parameter("backbone.head",
                   Tensor::gaussian({cfg.d_model, cfg.vocab_size},
                                    1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng),
                   ParamGroup::Backbone);
}

std::vector<Parameter*> Backbone::parameters() {
  std::vector<Parameter*> out{&tok_emb, &pos_emb};
  for (auto& l : layers)
    for (Parameter* p : l.parameters()) out.push_back(p);
  out.push_back(&lnf_gain);
  out.push_back(&lnf_bias);
  out.push_back(&head);
  return out;
}

LayerContext::LayerContext(Tape& tape, DecoderLayer& layer, Var x,
                           std::shared_ptr<const AttentionMask> mask, const ModelConfig& cfg)
    : tape_(tape), layer_(layer), x_(x), mask_(std::move(mask)), cfg_(cfg) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != cfg.d_model) {
    throw DimensionError("layer input " + shape_string(xv.shape()) + " does not have width " +
                         std::to_string(cfg.d_model));
  }
  if (xv.shape()[0] > cfg.max_seq_len) {
    throw CapacityError("sequence of " + std::to_string(xv.shape()[0]) +
                        " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  if (mask_->n != xv.shape()[0]) {
    throw DimensionError("attention mask of size " + std::to_string(mask_->n) + " for " +
                         std::to_string(xv.shape()[0]) + " rows");
  }
}

void LayerContext::prepare() {
  if (prepared_) return;
  ln1_g_ = tape_.param(layer_.ln1_gain);
  ln1_b_ = tape_.param(layer_.ln1_bias);
  wq_ = tape_.param(layer_.w_q);
  wk_ = tape_.param(layer_.w_k);
  wv_ = tape_.param(layer_.w_v);
  wo_ = tape_.param(layer_.w_o);
  ln2_g_ = tape_.param(layer_.ln2_gain);
  ln2_b_ = tape_.param(layer_.ln2_bias);
  w1_ = tape_.param(layer_.w_ff1);
  w2_ = tape_.param(layer_.w_ff2);
  h1_ = layer_norm(x_, ln1_g_, ln1_b_, cfg_.ln_eps);
  k_ = matmul(h1_, wk_);
  v_ = matmul(h1_, wv_);
  prepared_ = true;
}

Var LayerContext::forward_rows(std::span<const std::size_t> rows) {
  prepare();
  ++invocations_;
  const std::size_t n = x_.value().shape()[0];
  bool all = rows.size() == n;
  for (std::size_t i = 0; all && i < rows.size(); ++i) all = rows[i] == i;
  const Var h_rows = all ? h1_ : gather_rows(h1_, rows);
  const Var x_rows = all ? x_ : gather_rows(x_, rows);
  const Var q = matmul(h_rows, wq_);
  const Var a = attention(q, k_, v_, cfg_.n_heads, mask_,
                          std::vector<std::size_t>(rows.begin(), rows.end()));
  const Var y = add(x_rows, matmul(a, wo_));
  const Var h2 = layer_norm(y, ln2_g_, ln2_b_, cfg_.ln_eps);
  const Var f = matmul(gelu(matmul(h2, w1_)), w2_);
  return add(y, f);
}

Var layer_forward(Tape& tape, DecoderLayer& layer, Var x, std::shared_ptr<const AttentionMask> mask,
                  const ModelConfig& cfg) {
  LayerContext ctx(tape, layer, x, std::move(mask), cfg);
  std::vector<std::size_t> rows(x.value().shape()[0]);
  std::iota(rows.begin(), rows.end(), 0);
  return ctx.forward_rows(rows);
}

Var embed_tokens(Tape& tape, Backbone& backbone, std::span<const int> tokens,
                 std::span<const int> positions, const ModelConfig& cfg) {
  if (tokens.size() != positions.size()) throw DimensionError("embed_tokens: tokens/positions differ");
  std::vector<std::size_t> ids(tokens.size()), pos(positions.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size) {
      throw DataError("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                      std::to_string(cfg.vocab_size));
    }
    if (positions[i] < 0 || static_cast<std::size_t>(positions[i]) >= cfg.max_seq_len) {
      throw CapacityError("position " + std::to_string(positions[i]) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    ids[i] = static_cast<std::size_t>(tokens[i]);
    pos[i] = static_cast<std::size_t>(positions[i]);
  }
  const Var tok = gather_rows(tape.param(backbone.tok_emb), ids);
  const Var p = gather_rows(tape.param(backbone.pos_emb), pos);
  return add(tok, p);
}

Var output_head(Tape& tape, Backbone& backbone, Var x, const ModelConfig& cfg) {
  const Var h = layer_norm(x, tape.param(backbone.lnf_gain), tape.param(backbone.lnf_bias), cfg.ln_eps);
  return matmul(h, tape.param(backbone.head));
}

DenseResult dense_forward(Tape& tape, Backbone& backbone, std::span<const int> tokens,
                          const ModelConfig& cfg, bool keep_hidden) {
  if (tokens.empty()) throw DimensionError("dense_forward: empty sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw CapacityError("sequence of " + std::to_string(tokens.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  DenseResult r;
  Var x = embed_tokens(tape, backbone, tokens, positions, cfg);
  auto mask = std::make_shared<const AttentionMask>(AttentionMask::causal(tokens.size()));
  if (keep_hidden) r.hidden.push_back(x.value());
  for (auto& layer : backbone.layers) {
    x = layer_forward(tape, layer, x, mask, cfg);
    if (keep_hidden) r.hidden.push_back(x.value());
  }
  r.logits = output_head(tape, backbone, x, cfg);
  return r;
}

std::vector<double> l1_layer_importance(Backbone& backbone, const ModelConfig& cfg,
                                        std::span<const int> tokens) {
  Tape tape(false);
  const DenseResult r = dense_forward(tape, backbone, tokens, cfg, true);
  std::vector<double> out;
  const std::size_t rows = tokens.size();
  for (std::size_t i = 0; i + 1 < r.hidden.size(); ++i) {
    const Tensor& a = r.hidden[i];
    const Tensor& b = r.hidden[i + 1];
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(b[k] - a[k]);
    out.push_back(s / static_cast<double>(rows));
  }
  return out;
}

std::vector<int> flatten_tokens(const ConversationSample& sample) {
  std::vector<int> t = sample.image_tokens;
  for (const auto& turn : sample.turns) {
    t.insert(t.end(), turn.question.begin(), turn.question.end());
    t.insert(t.end(), turn.answer.begin(), turn.answer.end());
  }
  return t;
}

std::vector<double> l1_layer_importance(Backbone& backbone, const ModelConfig& cfg,
                                        const ConversationSample& sample) {
  const auto tokens = flatten_tokens(sample);
  return l1_layer_importance(backbone, cfg, tokens);
}

}  // namespace roe
