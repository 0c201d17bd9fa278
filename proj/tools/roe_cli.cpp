// roe: data generation, staged training, evaluation, benchmarking,
// profiling and cost comparison from one config file.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "roe/checkpoint.hpp"
#include "roe/config.hpp"
#include "roe/errors.hpp"
#include "roe/inference.hpp"
#include "roe/training.hpp"

namespace fs = std::filesystem;
using namespace roe;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kDivergence = 4, kCheckpoint = 5 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> skip_target;
  std::optional<double> alpha;
  std::optional<unsigned> workers;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) set_config_value(cfg, "run.seed", std::to_string(*c.seed));
  if (c.skip_target) cfg.train.skip_target = *c.skip_target;
  if (c.alpha) cfg.train.alpha = *c.alpha;
  if (c.workers) cfg.train.workers = *c.workers;
  if (c.out) cfg.out = *c.out;
  cfg.validate();
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path stage_ckpt(const RunConfig& cfg, int k) { return cfg.out / ("roe-stage" + std::to_string(k) + ".ckpt"); }
fs::path stage_state(const RunConfig& cfg, int k) { return cfg.out / ("roe-stage" + std::to_string(k) + ".state"); }
fs::path stage_metrics(const RunConfig& cfg, int k) {
  return cfg.out / ("metrics-stage" + std::to_string(k) + ".jsonl");
}

void stamp(Checkpoint& ck, const RunConfig& cfg) { ck.meta.emplace_back("config_hash", cfg.hash()); }

void warn_hash(const Checkpoint& ck, const fs::path& path, const RunConfig& cfg) {
  const std::string* h = ck.find_meta("config_hash");
  if (h && *h != cfg.hash()) {
    std::cerr << "warning: " << path.string() << " was written under config " << *h << ", now "
              << cfg.hash() << '\n';
  }
}

/// Model with the configured shapes, filled from `path`. Shape or name
/// differences raise CheckpointError naming the parameter.
RoeModel load_model(const RunConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  const Checkpoint ck = read_checkpoint(path);
  warn_hash(ck, path, cfg);
  RoeModel model(cfg.train.model);
  load_parameters(model, ck);
  return model;
}

// gen-data ---------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg) {
  ensure_dir(cfg.out);
  const CorpusBundle data = make_corpus(cfg.train);
  const fs::path corpus = cfg.out / "corpus.jsonl";
  const fs::path eval = cfg.out / "eval.jsonl";
  write_corpus_jsonl(corpus, data.corpus);
  write_corpus_jsonl(eval, data.eval);

  nlohmann::ordered_json m;
  m["config_hash"] = cfg.hash();
  m["spec_hash"] = fnv_hex(cfg.train.task.to_json().dump());
  m["seed"] = cfg.train.seed;
  m["task"] = cfg.train.task.to_json();
  m["corpus"] = {{"file", corpus.filename().string()}, {"count", data.corpus.size()}};
  m["eval"] = {{"file", eval.filename().string()}, {"count", data.eval.size()}};
  m["split"] = {{"stage1", data.split.stage1.size()},
                {"stage2", data.split.stage2.size()},
                {"stage3", data.split.stage3.size()}};
  write_json(cfg.out / "corpus.manifest.json", m);
  std::cout << "wrote " << data.corpus.size() << " training and " << data.eval.size()
            << " evaluation conversations to " << cfg.out.string() << " (config " << cfg.hash() << ")\n";
  return kOk;
}

// train --------------------------------------------------------------------

std::vector<int> parse_stages(const std::string& s) {
  if (s == "all") return {0, 1, 2, 3};
  if (s == "pretrain" || s == "0") return {0};
  if (s == "1" || s == "2" || s == "3") return {std::stoi(s)};
  throw ConfigError("--stage must be pretrain, 1, 2, 3 or all");
}

/// Keeps the metrics lines of steps before `steps_done` so a resumed stage
/// does not log a step twice.
void trim_metrics(const fs::path& path, std::size_t steps_done) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.contains("step") && j["step"].get<std::size_t>() < steps_done) {
      keep.push_back(line);
    }
  }
  in.close();
  auto out = open_out(path);
  for (const auto& l : keep) out << l << '\n';
}

void train_one(const RunConfig& cfg, const CorpusBundle& data, int k, bool resume,
               std::size_t save_every) {
  RoeModel model(cfg.train.model);
  if (k > 0) {
    const fs::path prev = stage_ckpt(cfg, k - 1);
    if (!fs::exists(prev)) {
      throw PipelineError("stage " + std::to_string(k) + " needs " + prev.string() +
                          "; run the earlier stage first");
    }
    const Checkpoint ck = read_checkpoint(prev);
    warn_hash(ck, prev, cfg);
    load_parameters(model, ck);
  }

  StageRunner runner(model, cfg.train.stage(k), stage_data(data, k));
  const fs::path state = stage_state(cfg, k);
  const fs::path metrics = stage_metrics(cfg, k);
  if (resume && fs::exists(state)) {
    const Checkpoint ck = read_checkpoint(state);
    const std::string* h = ck.find_meta("config_hash");
    if (!h || *h != cfg.hash()) {
      throw PipelineError(state.string() + " belongs to a different config; remove it or drop --resume");
    }
    runner.load_state(ck);
    trim_metrics(metrics, runner.steps_done());
    std::cout << "stage " << k << ": resuming at step " << runner.steps_done() << '/'
              << runner.total_steps() << '\n';
  } else {
    open_out(metrics);
  }

  const std::string hash = cfg.hash();
  const std::size_t report = std::max<std::size_t>(1, runner.total_steps() / 10);
  while (!runner.done()) {
    const StepMetrics m = runner.step();
    append_metrics(metrics, m, hash);
    if (m.step % report == 0 || runner.done()) {
      std::printf("stage %d step %zu/%zu  L_t %.4f  L_s %.4f  p_skip %.3f\n", k, m.step + 1,
                  runner.total_steps(), m.loss.task_loss, m.loss.sparsity_loss, m.loss.mean_skip_prob);
      std::fflush(stdout);
    }
    if (save_every > 0 && runner.steps_done() % save_every == 0 && !runner.done()) {
      Checkpoint ck = runner.save_state();
      stamp(ck, cfg);
      write_checkpoint(state, ck);
    }
  }

  Checkpoint ck = model_checkpoint(model);
  stamp(ck, cfg);
  ck.meta.emplace_back("stage", std::to_string(k));
  write_checkpoint(stage_ckpt(cfg, k), ck);
  std::error_code ec;
  fs::remove(state, ec);
  std::cout << "stage " << k << ": wrote " << stage_ckpt(cfg, k).string() << '\n';
}

int cmd_train(const RunConfig& cfg, const std::string& stage, bool resume, std::size_t save_every) {
  const std::vector<int> stages = parse_stages(stage);
  ensure_dir(cfg.out);
  const CorpusBundle data = make_corpus(cfg.train);
  for (int k : stages) train_one(cfg, data, k, resume, save_every);
  return kOk;
}

// eval ---------------------------------------------------------------------

void write_csv_header(std::ostream& out, const RunConfig& cfg) { out << "# config_hash=" << cfg.hash() << '\n'; }

int cmd_eval(const RunConfig& cfg, const fs::path& ckpt, RouteMode mode) {
  ensure_dir(cfg.out);
  RoeModel model = load_model(cfg, ckpt);
  const CorpusBundle data = make_corpus(cfg.train);
  const auto items = eval_items(data.eval);
  std::vector<RoutingRecord> routes;
  const RunMetrics rm = evaluate(model, items, mode, cfg.train.workers, &routes, cfg.max_new_tokens);

  nlohmann::ordered_json j;
  j["config_hash"] = cfg.hash();
  j["checkpoint"] = ckpt.string();
  j["mode"] = to_string(mode);
  j["metrics"] = rm.to_json();
  const std::string tag = std::string("eval-") + to_string(mode);
  write_json(cfg.out / (tag + ".json"), j);

  {
    auto out = open_out(cfg.out / (tag + ".csv"));
    write_csv_header(out, cfg);
    out << "group,Acc.,Speed,Skip,examples\n";
    auto row = [&](const std::string& name, double acc, double speed, double skip, std::size_t n) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%.4f,%.2f,%.4f,%zu\n", name.c_str(), acc, speed, skip, n);
      out << buf;
    };
    row("all", rm.accuracy, rm.speed, rm.skip, rm.examples);
    row("easy", rm.easy.accuracy(), rm.speed, rm.easy.counters.skip_ratio(), rm.easy.examples);
    row("hard", rm.hard.accuracy(), rm.speed, rm.hard.counters.skip_ratio(), rm.hard.examples);
    for (const auto& [fam, g] : rm.families) {
      row(to_string(fam), g.accuracy(), rm.speed, g.counters.skip_ratio(), g.examples);
    }
  }
  {
    auto out = open_out(cfg.out / ("routes-" + std::string(to_string(mode)) + ".csv"));
    write_csv_header(out, cfg);
    write_routing_csv(out, routes);
  }

  std::printf("mode %s  Acc. %.2f%%  Speed %.2f/s  Skip = %.2f%%  (easy %.2f%% acc, %.2f%% skip | hard %.2f%% acc, %.2f%% skip)\n",
              to_string(mode), 100.0 * rm.accuracy, rm.speed, 100.0 * rm.skip, 100.0 * rm.easy.accuracy(),
              100.0 * rm.easy.counters.skip_ratio(), 100.0 * rm.hard.accuracy(),
              100.0 * rm.hard.counters.skip_ratio());
  return kOk;
}

// bench --------------------------------------------------------------------

int cmd_bench(const RunConfig& cfg, const fs::path& ckpt) {
  ensure_dir(cfg.out);
  RoeModel model = load_model(cfg, ckpt);
  const CorpusBundle data = make_corpus(cfg.train);
  const auto rows = bench(model, eval_items(data.eval), cfg.bench);

  nlohmann::ordered_json j;
  j["config_hash"] = cfg.hash();
  j["checkpoint"] = ckpt.string();
  j["examples"] = cfg.bench.examples;
  j["repeats"] = cfg.bench.repeats;
  j["decode_steps"] = cfg.bench.decode_steps;
  auto& arr = j["rows"] = nlohmann::ordered_json::array();
  auto csv = open_out(cfg.out / "bench.csv");
  write_csv_header(csv, cfg);
  csv << "skip_ratio,skipped_layers,median_latency_s,Speed,heavy,adapter,heavy_per_segment_step\n";
  for (const auto& r : rows) {
    arr.push_back({{"skip_ratio", r.skip_ratio},
                   {"skipped_layers", r.skipped_layers},
                   {"median_latency_s", r.median_latency},
                   {"run_latency_s", r.run_latency},
                   {"heavy_layer_invocations", r.counters.heavy},
                   {"adapter_invocations", r.counters.adapter},
                   {"forward_passes", r.forward_passes},
                   {"heavy_per_segment_step", r.heavy_per_segment_step}});
    char buf[200];
    std::snprintf(buf, sizeof buf, "%.4f,%zu,%.9f,%.2f,%zu,%zu,%.4f\n", r.skip_ratio, r.skipped_layers,
                  r.median_latency, 1.0 / r.median_latency, r.counters.heavy, r.counters.adapter,
                  r.heavy_per_segment_step);
    csv << buf;
    std::printf("s=%.2f  skipped %zu/%zu  median %.3f ms/example  heavy/segment/step %.2f\n", r.skip_ratio,
                r.skipped_layers, model.cfg.n_layers, 1e3 * r.median_latency, r.heavy_per_segment_step);
  }
  write_json(cfg.out / "bench.json", j);
  return kOk;
}

// profile ------------------------------------------------------------------

int cmd_profile(const RunConfig& cfg, const fs::path& ckpt, std::size_t limit) {
  ensure_dir(cfg.out);
  RoeModel model = load_model(cfg, ckpt);
  const CorpusBundle data = make_corpus(cfg.train);
  std::vector<ConversationSample> subset(data.eval.begin(),
                                         data.eval.begin() + std::min(limit, data.eval.size()));
  const ImportanceProfile p = profile_importance(model, subset);
  {
    auto out = open_out(cfg.out / "profile.csv");
    write_csv_header(out, cfg);
    write_profile_csv(out, p);
  }
  nlohmann::ordered_json j;
  j["config_hash"] = cfg.hash();
  j["checkpoint"] = ckpt.string();
  j["examples"] = p.per_example.size();
  j["mean_l1"] = p.mean;
  write_json(cfg.out / "profile.json", j);
  std::cout << "mean l1 importance per layer:";
  for (double v : p.mean) std::printf(" %.4f", v);
  std::cout << '\n';
  return kOk;
}

// costs --------------------------------------------------------------------

int cmd_costs(const RunConfig& cfg, std::size_t experts, std::size_t top_k, double skip, std::size_t seq_len,
              std::size_t decode_tokens) {
  ensure_dir(cfg.out);
  CostScenario s;
  s.d_model = cfg.train.model.d_model;
  s.d_ff = cfg.train.model.d_ff;
  s.n_layers = cfg.train.model.n_layers;
  s.adapter_dim = cfg.train.model.adapter_dim;
  s.seq_len = seq_len;
  s.experts = experts;
  s.top_k = top_k;
  s.skip = skip;
  s.decode_tokens = decode_tokens;
  const CostReport r = compare_costs(s);
  nlohmann::ordered_json j;
  j["config_hash"] = cfg.hash();
  j["scenario"] = {{"d_model", s.d_model}, {"d_ff", s.d_ff},       {"n_layers", s.n_layers},
                   {"adapter_dim", s.adapter_dim}, {"seq_len", s.seq_len}, {"experts", s.experts},
                   {"top_k", s.top_k}, {"skip", s.skip}, {"decode_tokens", s.decode_tokens}};
  j["report"] = r.to_json();
  write_json(cfg.out / "costs.json", j);
  std::printf("dense %.0f  soft-MoE(K=%zu) %.0f  RoE(s=%.2f) %.0f  adapter/layer %.4f  RoE/dense %.4f\n",
              r.dense_flops, experts, r.soft_moe_flops, skip, r.roe_flops, r.adapter_layer_ratio,
              r.roe_dense_ratio);
  return kOk;
}

int exit_code(const Error& e) {
  const std::string k = e.kind();
  if (k == "config") return kConfig;
  if (k == "data" || k == "malformed-sample" || k == "degenerate-batch" || k == "capacity") return kData;
  if (k == "divergence") return kDivergence;
  if (k == "checkpoint" || k == "pipeline" || k == "dimension") return kCheckpoint;
  return kOther;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Routing-experts toy pipeline"};
  app.require_subcommand(1);
  Common common;
  std::string mode_name = "hard";
  std::string stage = "all";
  std::string checkpoint;
  bool resume = false;
  bool print_config = false;
  std::size_t save_every = 100;
  std::size_t profile_limit = 64;
  std::size_t experts = 4, top_k = 1, seq_len = 64, decode_tokens = 0;
  double cost_skip = 0.23;

  app.add_option("--config", common.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t v) { common.seed = v; }, "master seed");
  app.add_option_function<double>("--skip-target", [&](double v) { common.skip_target = v; },
                                  "sparsity target t");
  app.add_option_function<double>("--alpha", [&](double v) { common.alpha = v; }, "sparsity weight");
  app.add_option_function<unsigned>("--workers", [&](unsigned v) { common.workers = v; }, "worker threads");
  app.add_option_function<std::string>("--out", [&](const std::string& v) { common.out = v; },
                                       "output directory");
  app.add_option("--set", common.overrides, "override one key, section.key=value");
  app.add_option("--mode", mode_name, "routing mode for eval")->check(CLI::IsMember({"soft", "hard", "dense"}));
  app.add_flag("--print-config", print_config, "print the resolved config as INI and exit");

  auto* gen = app.add_subcommand("gen-data", "write the corpus, evaluation set and manifest");
  auto* train = app.add_subcommand("train", "run training stages");
  train->add_option("--stage", stage, "pretrain, 1, 2, 3 or all");
  train->add_flag("--resume", resume, "continue an interrupted stage from its state file");
  train->add_option("--save-every", save_every, "steps between state files (0 disables)");
  auto* eval = app.add_subcommand("eval", "accuracy, speed and skip on the evaluation set");
  auto* bench_cmd = app.add_subcommand("bench", "latency under forced skip ratios");
  auto* profile = app.add_subcommand("profile", "per-layer l1 importance");
  profile->add_option("--examples", profile_limit, "evaluation conversations to profile");
  auto* costs = app.add_subcommand("costs", "analytic dense / soft-MoE / routed cost comparison");
  costs->add_option("--experts", experts, "soft-MoE expert count K");
  costs->add_option("--top-k", top_k, "informational top-k");
  costs->add_option("--skip", cost_skip, "skip ratio s");
  costs->add_option("--seq-len", seq_len, "tokens per sequence");
  costs->add_option("--decode-tokens", decode_tokens, "decode steps for the cached variant");
  for (auto* sub : {eval, bench_cmd, profile}) {
    sub->add_option("--checkpoint", checkpoint, "model checkpoint (default: <out>/roe-stage3.ckpt)");
  }
  // Global flags are also accepted after the subcommand name.
  for (auto* sub : {gen, train, eval, bench_cmd, profile, costs}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (!train->parsed() && stage != "all") throw ConfigError("--stage applies to train only");
    const RunConfig cfg = resolve(common);
    if (print_config) {
      std::cout << "; config_hash " << cfg.hash() << '\n';
      std::cout << config_text(cfg);
      return kOk;
    }
    const fs::path ckpt = checkpoint.empty() ? stage_ckpt(cfg, 3) : fs::path(checkpoint);
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (train->parsed()) return cmd_train(cfg, stage, resume, save_every);
    if (eval->parsed()) return cmd_eval(cfg, ckpt, route_mode_from_string(mode_name));
    if (bench_cmd->parsed()) return cmd_bench(cfg, ckpt);
    if (profile->parsed()) return cmd_profile(cfg, ckpt, profile_limit);
    if (costs->parsed()) return cmd_costs(cfg, experts, top_k, cost_skip, seq_len, decode_tokens);
  } catch (const Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
