#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "roe/data.hpp"
#include "roe/objectives.hpp"
#include "roe/optimizer.hpp"
#include "roe/routing.hpp"

namespace roe {

/// Stage 0 pretrains the dense backbone; stages 1-3 are adapter warmup,
/// router warmup, and joint tuning.
struct StageConfig {
  int stage = 1;
  std::vector<ParamGroup> trainable;
  double lr_backbone = 5e-5;
  double lr_roe = 1e-2;
  double skip_target = 0.3;
  double alpha = 0.5;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  RouteMode mode = RouteMode::Soft;
  bool straight_through = false;
  bool sparsity = true;
  /// Weight each turn's hinge by that turn's own task loss instead of the
  /// whole conversation's.
  bool turn_weights = false;
  /// Linear warmup over this fraction of the stage, then cosine decay to 0.
  /// Zero keeps the rate constant.
  double warmup_cosine = 0.0;
  AdamWConfig optimizer;

  /// Multiplier on both learning rates at `step` out of `total` steps.
  double lr_scale(std::size_t step, std::size_t total) const;

  /// Throws ConfigError when the stage contract is broken (e.g. stage 3 with
  /// lr_backbone >= lr_roe).
  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  TaskSpec task;
  std::size_t corpus_size = 16000;
  std::size_t eval_size = 400;
  std::array<double, 3> fractions{0.15, 0.10, 0.25};
  bool turn_weights = false;
  /// Passes over each routing stage's subset.
  std::array<std::size_t, 3> stage_epochs{1, 1, 1};
  double skip_target = 0.3;
  double alpha = 0.5;
  std::size_t batch_size = 8;
  std::size_t pretrain_epochs = 4;
  double lr_pretrain = 3e-3;
  /// Warmup fraction of the pretraining schedule (cosine decay afterwards).
  double pretrain_warmup = 0.05;
  double lr_backbone = 5e-5;
  double lr_roe = 1e-2;
  /// Hard decisions forward, soft gradients backward in stages 2-3.
  bool straight_through = true;
  AdamWConfig optimizer;
  std::uint64_t seed = 1234;
  unsigned workers = 1;

  StageConfig stage(int k) const;
  nlohmann::ordered_json to_json() const;
  /// FNV-1a over the canonical JSON dump, as 16 hex digits.
  std::string hash() const;
};

struct StepMetrics {
  int stage = 0;
  std::size_t step = 0;
  LossBreakdown loss;
  double lr_backbone = 0.0;
  double lr_roe = 0.0;

  nlohmann::ordered_json to_json() const;
};

/// Exactly round(t * n) skipped layers per segment, drawn without replacement.
RoutingPlan sample_random_plan(std::size_t layers, std::size_t segments, double skip_target,
                               std::mt19937_64& rng);

/// Mean next-token loss over the answer tokens of `turn` (1-based).
double turn_task_loss(const Tensor& logits, const AssembledSequence& seq, std::size_t turn);

/// Loss for one sample on `tape` under the stage's routing mode.
SampleLoss sample_loss(Tape& tape, RoeModel& model, const AssembledSequence& seq,
                       const StageConfig& cfg, std::mt19937_64& rng);

/// One stage over its data as a resumable sequence of optimizer steps.
class StageRunner {
 public:
  StageRunner(RoeModel& model, StageConfig cfg, std::vector<ConversationSample> data);

  std::size_t total_steps() const { return total_steps_; }
  std::size_t steps_done() const { return step_; }
  bool done() const { return step_ >= total_steps_; }
  /// Runs one batch. Throws DivergenceError naming the step on non-finite loss.
  StepMetrics step();
  std::vector<StepMetrics> run(const std::function<void(const StepMetrics&)>& on_step = {});

  /// Model, optimizer moments, step counter, and RNG state.
  Checkpoint save_state() const;
  void load_state(const Checkpoint& ck);

 private:
  void apply_freezing();
  void reshuffle();

  RoeModel& model_;
  StageConfig cfg_;
  std::vector<ConversationSample> data_;
  std::vector<AssembledSequence> seqs_;
  AdamW optim_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_steps_ = 0;
  std::size_t step_ = 0;
};

/// Training corpus, its stage split, and a separately seeded evaluation set.
struct CorpusBundle {
  std::vector<ConversationSample> corpus;
  StageSplit split;
  std::vector<ConversationSample> eval;
};

CorpusBundle make_corpus(const TrainConfig& cfg);
/// Stage 0 pretrains on the full corpus; stages 1-3 use their split subsets.
const std::vector<ConversationSample>& stage_data(const CorpusBundle& data, int stage);
std::vector<StepMetrics> train_stage(RoeModel& model, const TrainConfig& cfg, int stage,
                                     const CorpusBundle& data,
                                     const std::function<void(const StepMetrics&)>& on_step = {});

void append_metrics(const std::filesystem::path& path, const StepMetrics& m,
                    const std::string& config_hash);

}  // namespace roe
