#include "roe/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "roe/errors.hpp"

namespace roe {

namespace {

std::size_t layer_parameter_count(const ModelConfig& cfg) {
  return 4 * cfg.d_model * cfg.d_model + 2 * cfg.d_model * cfg.d_ff + 4 * cfg.d_model;
}

int argmax_last_row(const Tensor& logits) {
  const std::size_t r = logits.rows() - 1;
  const auto row = logits.row(r);
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

GenerationResult generate(RoeModel& model, const std::vector<int>& image_tokens,
                          const std::vector<int>& question, const GenerateOptions& options) {
  const ModelConfig& cfg = model.cfg;
  GenerationResult out;
  ConversationSample prompt;
  prompt.image_tokens = image_tokens;
  prompt.turns.push_back(Turn{question, {}, Difficulty::Easy});

  const RoutingPlan* plan = options.forced_plan;
  for (std::size_t step = 0; step < options.max_new_tokens; ++step) {
    prompt.turns[0].answer = out.tokens;
    const AssembledSequence seq = assemble_sequence(prompt, cfg, /*open_last_answer=*/true);
    ForwardOptions fo;
    fo.counters = &out.counters;
    fo.shared_image_path = true;
    if (options.mode == RouteMode::Dense) {
      fo.mode = RouteMode::Dense;
    } else if (plan) {
      fo.forced_plan = plan;
    } else {
      fo.mode = options.mode;
    }
    Tape tape(false);
    ForwardResult fr = roe_forward(tape, model, seq, fo);
    ++out.forward_passes;

    const std::size_t len = seq.length();
    const double heavy = layer_flops(len, cfg.d_model, cfg.d_ff);
    const double light = adapter_flops(len, cfg.d_model, cfg.adapter_dim);
    out.dense_flops += static_cast<double>(cfg.n_layers) * heavy;
    if (options.mode == RouteMode::Dense) {
      out.flops += static_cast<double>(cfg.n_layers) * heavy;
    } else {
      for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const auto& d = fr.plan.at(i, 0);
        out.flops += options.mode == RouteMode::Soft ? heavy + light
                     : d.choice == Choice::Keep      ? heavy
                                                     : light;
      }
    }
    if (step == 0) {
      out.plan = fr.plan;
      if (options.mode == RouteMode::Hard && !plan) plan = &out.plan;
    }

    const int tok = argmax_last_row(fr.logits.value());
    out.tokens.push_back(tok);
    if (options.stop_at_end && tok == vocab::kEnd) break;
    if (len + 1 >= cfg.max_seq_len) break;
  }
  return out;
}

std::vector<EvalItem> eval_items(const std::vector<ConversationSample>& corpus) {
  std::vector<EvalItem> items;
  for (const auto& s : corpus) {
    for (std::size_t k = 0; k < s.turns.size(); ++k) {
      EvalItem it;
      it.sample_id = s.id;
      it.turn = k + 1;
      it.image_tokens = s.image_tokens;
      it.question = s.turns[k].question;
      it.answer = s.turns[k].answer;
      it.difficulty = s.turns[k].difficulty;
      it.family = task_family(s.turns[k]);
      items.push_back(std::move(it));
    }
  }
  return items;
}

double GroupMetrics::accuracy() const {
  return examples == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(examples);
}

nlohmann::ordered_json RunMetrics::to_json() const {
  auto group = [](const GroupMetrics& g) {
    nlohmann::ordered_json j;
    j["examples"] = g.examples;
    j["Acc."] = g.accuracy();
    j["Skip"] = g.counters.skip_ratio();
    return j;
  };
  nlohmann::ordered_json j;
  j["Acc."] = accuracy;
  j["Speed"] = speed;
  j["Skip"] = skip;
  j["examples"] = examples;
  j["heavy_layer_invocations"] = heavy_layer_invocations;
  j["adapter_invocations"] = adapter_invocations;
  j["flops_estimate"] = flops_estimate;
  j["skip_params"] = skip_params;
  j["skip_flops"] = skip_flops;
  j["easy"] = group(easy);
  j["hard"] = group(hard);
  nlohmann::ordered_json fam;
  for (const auto& [f, g] : families) fam[to_string(f)] = group(g);
  j["families"] = fam;
  return j;
}

RunMetrics evaluate(RoeModel& model, const std::vector<EvalItem>& items, RouteMode mode,
                    unsigned workers, std::vector<RoutingRecord>* routes,
                    std::size_t max_new_tokens) {
  if (items.empty()) throw DegenerateBatchError("evaluation over an empty corpus");
  GenerateOptions go;
  go.mode = mode;
  go.max_new_tokens = max_new_tokens;

  (void)generate(model, items.front().image_tokens, items.front().question, go);

  std::vector<GenerationResult> results(items.size());
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(items.size())));
  const auto t0 = std::chrono::steady_clock::now();
  if (workers == 1) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      results[i] = generate(model, items[i].image_tokens, items[i].question, go);
    }
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < items.size(); i += workers) {
            results[i] = generate(model, items[i].image_tokens, items[i].question, go);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  RunMetrics m;
  m.examples = items.size();
  double dense_flops = 0.0;
  InvocationCounters total;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const auto& r = results[i];
    const bool ok = r.tokens == it.answer;
    correct += ok ? 1 : 0;
    total += r.counters;
    m.flops_estimate += r.flops;
    dense_flops += r.dense_flops;
    GroupMetrics& g = it.difficulty == Difficulty::Easy ? m.easy : m.hard;
    ++g.examples;
    g.correct += ok ? 1 : 0;
    g.counters += r.counters;
    auto fam = std::find_if(m.families.begin(), m.families.end(),
                            [&](const auto& p) { return p.first == it.family; });
    if (fam == m.families.end()) {
      m.families.emplace_back(it.family, GroupMetrics{});
      fam = m.families.end() - 1;
    }
    ++fam->second.examples;
    fam->second.correct += ok ? 1 : 0;
    fam->second.counters += r.counters;
    if (routes && mode != RouteMode::Dense) {
      for (std::size_t l = 0; l < r.plan.layers; ++l) {
        routes->push_back({it.sample_id, it.turn, r.plan.at(l, 0)});
      }
    }
  }
  std::sort(m.families.begin(), m.families.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  m.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
  m.speed = wall > 0.0 ? static_cast<double>(items.size()) / wall : 0.0;
  m.heavy_layer_invocations = total.heavy;
  m.adapter_invocations = total.adapter;
  m.skip = total.skip_ratio();
  const double lp = static_cast<double>(layer_parameter_count(model.cfg));
  const double ap = static_cast<double>(2 * model.cfg.d_model * model.cfg.adapter_dim);
  const double inv = static_cast<double>(total.heavy + total.adapter);
  m.skip_params = inv == 0.0 || mode == RouteMode::Soft
                      ? 0.0
                      : static_cast<double>(total.adapter) * (lp - ap) / (inv * lp);
  m.skip_flops = dense_flops > 0.0 ? 1.0 - m.flops_estimate / dense_flops : 0.0;
  return m;
}

void write_routing_csv(std::ostream& out, const std::vector<RoutingRecord>& routes) {
  out << "sample_id,turn,layer,p_keep,p_skip,choice\n";
  out.precision(17);
  for (const auto& r : routes) {
    out << r.sample_id << ',' << r.turn << ',' << r.decision.layer << ',' << r.decision.p_keep << ','
        << r.decision.p_skip << ',' << (r.decision.choice == Choice::Keep ? "keep" : "skip") << '\n';
  }
}

std::vector<BenchRow> bench(RoeModel& model, const std::vector<EvalItem>& items,
                            const BenchOptions& options) {
  if (items.empty() || options.examples == 0) throw DegenerateBatchError("bench needs examples");
  if (options.repeats == 0 || options.decode_steps == 0) {
    throw ParameterError("bench needs positive repeats and decode_steps");
  }
  const std::size_t n = model.cfg.n_layers;
  const std::size_t count = std::min(options.examples, items.size());

  std::vector<BenchRow> rows;
  std::vector<std::vector<RoutingPlan>> plans;
  for (double s : options.skip_ratios) {
    if (!(s >= 0.0 && s <= 1.0)) throw ParameterError("bench skip ratio outside [0, 1]");
    BenchRow row;
    row.skip_ratio = s;
    row.skipped_layers = static_cast<std::size_t>(std::llround(s * static_cast<double>(n)));
    std::vector<RoutingPlan> ps;
    for (std::size_t i = 0; i < count; ++i) {
      std::mt19937_64 rng(mix_seed(options.seed, i));
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::vector<bool> skip(n, false);
      for (std::size_t k = 0; k < row.skipped_layers; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, n - 1);
        std::swap(idx[k], idx[pick(rng)]);
        skip[idx[k]] = true;
      }
      ps.push_back(RoutingPlan::forced(n, 1, skip, /*shared_image_path=*/true));
    }
    plans.push_back(std::move(ps));
    rows.push_back(std::move(row));
  }

  GenerateOptions go;
  go.mode = RouteMode::Hard;
  go.max_new_tokens = options.decode_steps;
  go.stop_at_end = false;

  auto run_batch = [&](std::size_t r, BenchRow* record) {
    InvocationCounters counters;
    std::size_t passes = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < count; ++i) {
      go.forced_plan = &plans[r][i];
      const auto g = generate(model, items[i].image_tokens, items[i].question, go);
      counters += g.counters;
      passes += g.forward_passes;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (record) {
      record->counters = counters;
      record->forward_passes = passes;
      record->heavy_per_segment_step = static_cast<double>(counters.heavy) / static_cast<double>(passes);
    }
    return secs / static_cast<double>(count);
  };

  for (std::size_t r = 0; r < rows.size(); ++r) run_batch(r, nullptr);
  // Interleave repetitions across ratios so slow drift in machine load hits all alike.
  for (std::size_t rep = 0; rep < options.repeats; ++rep) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      rows[r].run_latency.push_back(run_batch(r, rep == 0 ? &rows[r] : nullptr));
    }
  }
  for (auto& row : rows) {
    std::vector<double> v = row.run_latency;
    std::sort(v.begin(), v.end());
    row.median_latency = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  }
  return rows;
}

void CostScenario::validate() const {
  if (experts < 1) throw ParameterError("cost scenario needs at least one expert");
  if (!(skip >= 0.0 && skip <= 1.0)) throw ParameterError("cost scenario skip outside [0, 1]");
  if (d_model == 0 || d_ff == 0 || n_layers == 0 || seq_len == 0) {
    throw ParameterError("cost scenario extents must be positive");
  }
}

nlohmann::ordered_json CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["dense_flops"] = dense_flops;
  j["soft_moe_flops"] = soft_moe_flops;
  j["roe_flops"] = roe_flops;
  j["roe_core_flops"] = roe_core_flops;
  j["moe_router_flops"] = moe_router_flops;
  j["roe_router_flops"] = roe_router_flops;
  j["adapter_layer_ratio"] = adapter_layer_ratio;
  j["roe_dense_ratio"] = roe_dense_ratio;
  j["kv_dense_flops"] = kv_dense_flops;
  j["kv_roe_flops"] = kv_roe_flops;
  return j;
}

CostReport compare_costs(const CostScenario& s) {
  s.validate();
  const double n = static_cast<double>(s.n_layers);
  const double m = static_cast<double>(s.seq_len);
  const double d = static_cast<double>(s.d_model);
  const double ff = static_cast<double>(s.d_ff);
  const double K = static_cast<double>(s.experts);

  CostReport r;
  const double layer = layer_flops(s.seq_len, s.d_model, s.d_ff);
  const double adapter = adapter_flops(s.seq_len, s.d_model, s.adapter_dim);
  const double attention = 2.0 * (4.0 * m * d * d + 2.0 * m * m * d);
  const double expert_ffn = 2.0 * (2.0 * m * d * ff);

  r.dense_flops = n * layer;
  r.moe_router_flops = n * 2.0 * m * d * K;
  r.soft_moe_flops = n * (attention + K * expert_ffn) + r.moe_router_flops;
  r.roe_core_flops = n * ((1.0 - s.skip) * layer + s.skip * adapter);
  // One [1 x 2d] x [2d x 2] router product per routed segment and layer.
  r.roe_router_flops = n * static_cast<double>(s.routed_segments) * 2.0 * (2.0 * d) * 2.0;
  r.roe_flops = r.roe_core_flops + r.roe_router_flops;
  r.adapter_layer_ratio = adapter / layer;
  r.roe_dense_ratio = r.roe_core_flops / r.dense_flops;

  for (std::size_t t = 0; t <= s.decode_tokens; ++t) {
    const double heavy = t == 0 ? layer : layer_flops_cached(1, s.seq_len + t, s.d_model, s.d_ff);
    const double light = t == 0 ? adapter : adapter_flops(1, s.d_model, s.adapter_dim);
    r.kv_dense_flops += n * heavy;
    r.kv_roe_flops += n * ((1.0 - s.skip) * heavy + s.skip * light);
  }
  // Routers run once, at prefill.
  r.kv_roe_flops += r.roe_router_flops;
  return r;
}

ImportanceProfile profile_importance(RoeModel& model, const std::vector<ConversationSample>& corpus) {
  if (corpus.empty()) throw DegenerateBatchError("profiling an empty corpus");
  ImportanceProfile p;
  p.mean.assign(model.cfg.n_layers, 0.0);
  for (const auto& s : corpus) {
    p.sample_ids.push_back(s.id);
    p.per_example.push_back(l1_layer_importance(model.backbone, model.cfg, s));
    for (std::size_t i = 0; i < p.mean.size(); ++i) p.mean[i] += p.per_example.back()[i];
  }
  for (double& v : p.mean) v /= static_cast<double>(corpus.size());
  return p;
}

void write_profile_csv(std::ostream& out, const ImportanceProfile& profile) {
  out << "sample_id,layer,l1\n";
  out.precision(17);
  for (std::size_t e = 0; e < profile.per_example.size(); ++e) {
    for (std::size_t i = 0; i < profile.per_example[e].size(); ++i) {
      out << profile.sample_ids[e] << ',' << i << ',' << profile.per_example[e][i] << '\n';
    }
  }
}

}  // namespace roe
