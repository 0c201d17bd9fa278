#include "roe/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "roe/errors.hpp"

namespace roe {

void StageConfig::validate() const {
  if (stage < 0 || stage > 3) throw ConfigError("stage must be 0 (pretrain), 1, 2 or 3");
  if (batch_size == 0 || epochs == 0) throw ConfigError("batch_size and epochs must be positive");
  if (!(skip_target >= 0.0 && skip_target <= 1.0)) throw ConfigError("skip_target outside [0, 1]");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(lr_backbone >= 0.0 && lr_roe >= 0.0)) throw ConfigError("learning rates must be non-negative");
  auto has = [&](ParamGroup g) {
    return std::find(trainable.begin(), trainable.end(), g) != trainable.end();
  };
  switch (stage) {
    case 1:
      if (!has(ParamGroup::Adapter) || has(ParamGroup::Router) || has(ParamGroup::Backbone)) {
        throw ConfigError("stage 1 trains adapters only");
      }
      break;
    case 2:
      if (!has(ParamGroup::Adapter) || !has(ParamGroup::Router) || has(ParamGroup::Backbone)) {
        throw ConfigError("stage 2 trains adapters and routers with the backbone frozen");
      }
      break;
    case 3:
      if (!has(ParamGroup::Adapter) || !has(ParamGroup::Router) || !has(ParamGroup::Backbone)) {
        throw ConfigError("stage 3 trains every parameter group");
      }
      if (!(lr_backbone < lr_roe)) {
        throw ConfigError("stage 3 needs a backbone learning rate below the adapter/router rate");
      }
      break;
    default:
      break;
  }
}

double StageConfig::lr_scale(std::size_t step, std::size_t total) const {
  if (warmup_cosine <= 0.0 || total == 0) return 1.0;
  const double warm = std::max(1.0, warmup_cosine * static_cast<double>(total));
  const double s = static_cast<double>(step);
  if (s < warm) return (s + 1.0) / warm;
  const double progress = (s - warm) / std::max(1.0, static_cast<double>(total) - warm);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

StageConfig TrainConfig::stage(int k) const {
  StageConfig s;
  s.stage = k;
  s.skip_target = skip_target;
  s.alpha = alpha;
  s.batch_size = batch_size;
  s.seed = mix_seed(seed, 0x57A6E000u + static_cast<std::uint64_t>(k));
  s.straight_through = straight_through;
  s.lr_backbone = lr_backbone;
  s.lr_roe = lr_roe;
  s.optimizer = optimizer;
  s.turn_weights = turn_weights;
  if (k >= 1 && k <= 3) s.epochs = stage_epochs[static_cast<std::size_t>(k - 1)];
  switch (k) {
    case 0:
      s.trainable = {ParamGroup::Backbone};
      s.lr_backbone = lr_pretrain;
      s.epochs = pretrain_epochs;
      s.warmup_cosine = pretrain_warmup;
      s.mode = RouteMode::Dense;
      s.sparsity = false;
      break;
    case 1:
      s.trainable = {ParamGroup::Adapter};
      s.mode = RouteMode::Hard;
      s.sparsity = false;
      break;
    case 2:
      s.trainable = {ParamGroup::Adapter, ParamGroup::Router};
      break;
    case 3:
      s.trainable = {ParamGroup::Backbone, ParamGroup::Adapter, ParamGroup::Router};
      break;
    default:
      throw ConfigError("unknown stage " + std::to_string(k));
  }
  return s;
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model.to_json();
  j["task"] = task.to_json();
  j["corpus_size"] = corpus_size;
  j["eval_size"] = eval_size;
  j["fractions"] = fractions;
  j["stage_epochs"] = stage_epochs;
  j["turn_weights"] = turn_weights;
  j["skip_target"] = skip_target;
  j["alpha"] = alpha;
  j["batch_size"] = batch_size;
  j["pretrain_epochs"] = pretrain_epochs;
  j["lr_pretrain"] = lr_pretrain;
  j["pretrain_warmup"] = pretrain_warmup;
  j["lr_backbone"] = lr_backbone;
  j["lr_roe"] = lr_roe;
  j["straight_through"] = straight_through;
  j["adamw"] = {{"beta1", optimizer.beta1},
                {"beta2", optimizer.beta2},
                {"eps", optimizer.eps},
                {"weight_decay", optimizer.weight_decay}};
  j["seed"] = seed;
  return j;
}

std::string TrainConfig::hash() const {
  const std::string s = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::ordered_json StepMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["step"] = step;
  const auto parts = loss.to_json();
  for (auto it = parts.begin(); it != parts.end(); ++it) j[it.key()] = it.value();
  j["lr"] = {{"backbone", lr_backbone}, {"roe", lr_roe}};
  return j;
}

RoutingPlan sample_random_plan(std::size_t layers, std::size_t segments, double skip_target,
                               std::mt19937_64& rng) {
  const auto skips = static_cast<std::size_t>(std::llround(skip_target * static_cast<double>(layers)));
  std::vector<bool> skip(layers * segments, false);
  std::vector<std::size_t> idx(layers);
  for (std::size_t s = 0; s < segments; ++s) {
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t k = 0; k < skips; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, layers - 1);
      std::swap(idx[k], idx[pick(rng)]);
      skip[idx[k] * segments + s] = true;
    }
  }
  return RoutingPlan::forced(layers, segments, skip);
}

double turn_task_loss(const Tensor& logits, const AssembledSequence& seq, std::size_t turn) {
  const Segment& ans = seq.layout.find(SegmentKind::Answer, turn);
  if (ans.length == 0) throw MalformedSampleError("turn " + std::to_string(turn) + " has no answer");
  const std::size_t v = logits.cols();
  double total = 0.0;
  for (std::size_t r = ans.start - 1; r + 1 < ans.start + ans.length; ++r) {
    const auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(seq.targets[r])];
  }
  return total / static_cast<double>(ans.length);
}

SampleLoss sample_loss(Tape& tape, RoeModel& model, const AssembledSequence& seq,
                       const StageConfig& cfg, std::mt19937_64& rng) {
  ForwardOptions opt;
  opt.mode = cfg.mode;
  opt.straight_through = cfg.straight_through;
  RoutingPlan plan;
  if (cfg.stage == 1) {
    plan = sample_random_plan(model.cfg.n_layers, seq.layout.turns + 1, cfg.skip_target, rng);
    opt.forced_plan = &plan;
  }
  const ForwardResult fr = roe_forward(tape, model, seq, opt);
  const Var lt = cross_entropy(fr.logits, seq.targets, seq.loss_mask);
  if (!cfg.sparsity || fr.skip_probs.empty()) {
    return combined_loss(tape, lt, tape.constant(Tensor::scalar(0.0)), cfg.alpha);
  }
  const std::size_t segments = fr.plan.segments;
  std::vector<std::vector<Var>> per_segment(segments);
  for (std::size_t i = 0; i < fr.skip_probs.size(); ++i) {
    per_segment[i % segments].push_back(fr.skip_probs[i]);
  }
  std::vector<double> weight_losses(segments, lt.value()[0]);
  if (cfg.turn_weights && !fr.plan.shared_image_path) {
    for (std::size_t k = 1; k < segments; ++k) {
      weight_losses[k] = turn_task_loss(fr.logits.value(), seq, k);
    }
  }
  return segmented_loss(tape, lt, per_segment, weight_losses, cfg.skip_target, cfg.alpha);
}

StageRunner::StageRunner(RoeModel& model, StageConfig cfg, std::vector<ConversationSample> data)
    : model_(model), cfg_(std::move(cfg)), data_(std::move(data)), optim_(model.parameters(), cfg_.optimizer) {
  cfg_.validate();
  if (data_.empty()) {
    throw DegenerateBatchError("stage " + std::to_string(cfg_.stage) + " has no training samples");
  }
  seqs_.reserve(data_.size());
  for (const auto& s : data_) seqs_.push_back(assemble_sequence(s, model_.cfg));
  rng_.seed(cfg_.seed);
  steps_per_epoch_ = (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  total_steps_ = steps_per_epoch_ * cfg_.epochs;
  apply_freezing();
}

void StageRunner::apply_freezing() {
  for (Parameter* p : model_.parameters()) {
    p->trainable =
        std::find(cfg_.trainable.begin(), cfg_.trainable.end(), p->group) != cfg_.trainable.end();
  }
}

void StageRunner::reshuffle() {
  order_.resize(data_.size());
  std::iota(order_.begin(), order_.end(), 0);
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order_[i - 1], order_[pick(rng_)]);
  }
}

StepMetrics StageRunner::step() {
  if (done()) throw PipelineError("stage " + std::to_string(cfg_.stage) + " has already finished");
  apply_freezing();
  const std::size_t in_epoch = step_ % steps_per_epoch_;
  if (in_epoch == 0) reshuffle();
  const std::size_t begin = in_epoch * cfg_.batch_size;
  const std::size_t end = std::min(begin + cfg_.batch_size, data_.size());

  StepMetrics m;
  m.stage = cfg_.stage;
  m.step = step_;
  const double scale = cfg_.lr_scale(step_, total_steps());
  m.lr_backbone = cfg_.lr_backbone * scale;
  m.lr_roe = cfg_.lr_roe * scale;
  try {
    Tape tape(true);
    std::vector<SampleLoss> losses;
    for (std::size_t k = begin; k < end; ++k) {
      losses.push_back(sample_loss(tape, model_, seqs_[order_[k]], cfg_, rng_));
    }
    const SampleLoss batch = batch_loss(losses);
    m.loss = batch.parts;
    if (!std::isfinite(m.loss.total)) throw NumericError("non-finite batch loss");
    optim_.zero_grad();
    tape.backward(batch.total);
    optim_.step([&](const Parameter& p) {
      return p.group == ParamGroup::Backbone ? m.lr_backbone : m.lr_roe;
    });
  } catch (const NumericError& e) {
    throw DivergenceError("stage " + std::to_string(cfg_.stage) + " diverged at step " +
                          std::to_string(step_) + ": " + e.what());
  }
  ++step_;
  return m;
}

std::vector<StepMetrics> StageRunner::run(const std::function<void(const StepMetrics&)>& on_step) {
  std::vector<StepMetrics> all;
  while (!done()) {
    all.push_back(step());
    if (on_step) on_step(all.back());
  }
  return all;
}

Checkpoint StageRunner::save_state() const {
  Checkpoint ck = model_checkpoint(model_);
  ck.meta.emplace_back("stage", std::to_string(cfg_.stage));
  ck.meta.emplace_back("stage.step", std::to_string(step_));
  std::ostringstream rng;
  rng << rng_;
  ck.meta.emplace_back("stage.rng", rng.str());
  std::ostringstream ord;
  for (std::size_t i = 0; i < order_.size(); ++i) ord << (i ? " " : "") << order_[i];
  ck.meta.emplace_back("stage.order", ord.str());
  optim_.save_state(ck);
  return ck;
}

void StageRunner::load_state(const Checkpoint& ck) {
  if (ck.meta_or_throw("stage") != std::to_string(cfg_.stage)) {
    throw CheckpointError("train state belongs to stage " + ck.meta_or_throw("stage") +
                          ", not stage " + std::to_string(cfg_.stage));
  }
  load_parameters(model_, ck);
  optim_.load_state(ck);
  step_ = std::stoull(ck.meta_or_throw("stage.step"));
  std::istringstream rng(ck.meta_or_throw("stage.rng"));
  rng >> rng_;
  if (!rng) throw CheckpointError("unreadable RNG state in train state");
  order_.clear();
  std::istringstream ord(ck.meta_or_throw("stage.order"));
  for (std::size_t v; ord >> v;) order_.push_back(v);
  if (!order_.empty() && order_.size() != data_.size()) {
    throw CheckpointError("train state was saved for a different data set");
  }
  apply_freezing();
}

CorpusBundle make_corpus(const TrainConfig& cfg) {
  CorpusBundle b;
  b.corpus = generate_corpus(cfg.task, cfg.corpus_size, cfg.seed, cfg.workers);
  b.split = split_corpus(b.corpus, cfg.fractions, cfg.seed);
  b.eval = generate_corpus(cfg.task, cfg.eval_size, mix_seed(cfg.seed, 0xE7A1), cfg.workers);
  return b;
}

const std::vector<ConversationSample>& stage_data(const CorpusBundle& data, int stage) {
  switch (stage) {
    case 0: return data.corpus;
    case 1: return data.split.stage1;
    case 2: return data.split.stage2;
    case 3: return data.split.stage3;
    default: throw ConfigError("unknown stage " + std::to_string(stage));
  }
}

std::vector<StepMetrics> train_stage(RoeModel& model, const TrainConfig& cfg, int stage,
                                     const CorpusBundle& data,
                                     const std::function<void(const StepMetrics&)>& on_step) {
  StageRunner runner(model, cfg.stage(stage), stage_data(data, stage));
  return runner.run(on_step);
}

void append_metrics(const std::filesystem::path& path, const StepMetrics& m,
                    const std::string& config_hash) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  const auto fields = m.to_json();
  for (auto it = fields.begin(); it != fields.end(); ++it) j[it.key()] = it.value();
  out << j.dump() << '\n';
}

}  // namespace roe
