#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "reference.hpp"
#include "roe/adapters.hpp"
#include "roe/errors.hpp"
#include "roe/inference.hpp"

using namespace roe;

namespace {

void randomize_routing(RoeModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& a : m.adapters) a.w_up.value = Tensor::gaussian(a.w_up.value.shape(), 0.2, rng);
  for (auto& w : m.router.w_r) w.value = Tensor::gaussian(w.value.shape(), 0.5, rng);
}

/// Greedy decode over the flat token stream [I, Q, answer...] with the loop reference.
std::vector<int> reference_decode(const RoeModel& m, const EvalItem& it, std::size_t max_new) {
  std::vector<int> out;
  for (std::size_t step = 0; step < max_new; ++step) {
    std::vector<int> flat = it.image_tokens;
    flat.insert(flat.end(), it.question.begin(), it.question.end());
    flat.insert(flat.end(), out.begin(), out.end());
    const ref::Mat logits = ref::dense_logits(m.backbone, flat, m.cfg);
    const auto& last = logits.back();
    int best = 0;
    for (std::size_t v = 1; v < last.size(); ++v)
      if (last[v] > last[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
    out.push_back(best);
    if (best == vocab::kEnd) break;
  }
  return out;
}

std::vector<EvalItem> some_items(std::size_t samples, std::uint64_t seed) {
  return eval_items(generate_corpus(TaskSpec{}, samples, seed));
}

}  // namespace

TEST_CASE("dense generation matches a reference greedy decoder without routing slots") {
  ModelConfig cfg;
  RoeModel model(cfg);
  randomize_routing(model, 1);
  const auto items = some_items(6, 11);
  GenerateOptions go;
  go.mode = RouteMode::Dense;
  for (const auto& it : items) {
    const auto g = generate(model, it.image_tokens, it.question, go);
    CHECK(g.tokens == reference_decode(model, it, go.max_new_tokens));
    CHECK(g.counters.adapter == 0);
    CHECK(g.counters.heavy == cfg.n_layers * g.forward_passes);
    CHECK(g.flops == g.dense_flops);
  }
}

TEST_CASE("an all-keep forced plan decodes exactly like the dense model") {
  ModelConfig cfg;
  RoeModel model(cfg);
  randomize_routing(model, 2);
  const auto keep = RoutingPlan::forced(cfg.n_layers, 1, std::vector<bool>(cfg.n_layers, false), true);
  for (const auto& it : some_items(5, 12)) {
    GenerateOptions dense;
    dense.mode = RouteMode::Dense;
    GenerateOptions forced;
    forced.forced_plan = &keep;
    CHECK(generate(model, it.image_tokens, it.question, forced).tokens ==
          generate(model, it.image_tokens, it.question, dense).tokens);
  }
}

TEST_CASE("hard generation fixes the plan at prefill and counts every invocation") {
  ModelConfig cfg;
  RoeModel model(cfg);
  randomize_routing(model, 3);
  std::size_t skipped_somewhere = 0;
  for (const auto& it : some_items(10, 13)) {
    GenerateOptions go;
    go.mode = RouteMode::Hard;
    go.stop_at_end = false;
    const auto g = generate(model, it.image_tokens, it.question, go);
    REQUIRE(g.plan.layers == cfg.n_layers);
    REQUIRE(g.plan.segments == 1);
    const std::size_t skips = g.plan.skip_count();
    skipped_somewhere += skips;
    CHECK(g.forward_passes == go.max_new_tokens);
    CHECK(g.counters.adapter == skips * g.forward_passes);
    CHECK(g.counters.heavy == (cfg.n_layers - skips) * g.forward_passes);
    CHECK(g.flops <= g.dense_flops);

    // Imposing the prefill plan reproduces the run.
    GenerateOptions again = go;
    again.forced_plan = &g.plan;
    const auto h = generate(model, it.image_tokens, it.question, again);
    CHECK(h.tokens == g.tokens);
    CHECK(h.counters.heavy == g.counters.heavy);
  }
  CHECK(skipped_somewhere > 0);
}

TEST_CASE("evaluation accounting") {
  ModelConfig cfg;
  RoeModel model(cfg);
  randomize_routing(model, 4);
  const auto items = some_items(8, 14);

  SUBCASE("dense runs skip nothing") {
    const auto r = evaluate(model, items, RouteMode::Dense);
    CHECK(r.skip == 0.0);
    CHECK(r.adapter_invocations == 0);
    CHECK(r.heavy_layer_invocations > 0);
    CHECK(r.skip_flops == doctest::Approx(0.0));
  }
  SUBCASE("hard runs agree with per-item generation") {
    std::vector<RoutingRecord> routes;
    const auto r = evaluate(model, items, RouteMode::Hard, 1, &routes);
    std::size_t correct = 0, heavy = 0, adapter = 0;
    for (const auto& it : items) {
      GenerateOptions go;
      const auto g = generate(model, it.image_tokens, it.question, go);
      correct += g.tokens == it.answer;
      heavy += g.counters.heavy;
      adapter += g.counters.adapter;
    }
    CHECK(r.examples == items.size());
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(correct) / items.size()));
    CHECK(r.heavy_layer_invocations == heavy);
    CHECK(r.adapter_invocations == adapter);
    CHECK(r.skip == doctest::Approx(static_cast<double>(adapter) / (heavy + adapter)));
    CHECK(r.easy.examples + r.hard.examples == items.size());
    std::size_t fam = 0;
    for (const auto& [f, g] : r.families) fam += g.examples;
    CHECK(fam == items.size());
    CHECK(routes.size() == items.size() * cfg.n_layers);
    CHECK(r.speed > 0.0);

    std::ostringstream csv;
    write_routing_csv(csv, routes);
    std::istringstream in(csv.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "sample_id,turn,layer,p_keep,p_skip,choice");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      CHECK(std::count(line.begin(), line.end(), ',') == 5);
    }
    CHECK(rows == routes.size());
  }
  SUBCASE("sharding across workers changes nothing but timing") {
    const auto a = evaluate(model, items, RouteMode::Hard, 1);
    const auto b = evaluate(model, items, RouteMode::Hard, 3);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.heavy_layer_invocations == b.heavy_layer_invocations);
    CHECK(a.adapter_invocations == b.adapter_invocations);
  }
  CHECK_THROWS_AS(evaluate(model, {}, RouteMode::Hard), DegenerateBatchError);
}

TEST_CASE("bench imposes round(s * n) skips with a fixed decode budget") {
  ModelConfig cfg;
  RoeModel model(cfg);
  const auto items = some_items(4, 15);
  BenchOptions o;
  o.skip_ratios = {0.0, 0.25, 0.5, 1.0};
  o.examples = 5;
  o.repeats = 3;
  o.decode_steps = 4;
  const auto rows = bench(model, items, o);
  REQUIRE(rows.size() == 4);
  for (const auto& row : rows) {
    const auto k = static_cast<std::size_t>(std::llround(row.skip_ratio * cfg.n_layers));
    CHECK(row.skipped_layers == k);
    CHECK(row.run_latency.size() == o.repeats);
    CHECK(row.forward_passes == o.examples * o.decode_steps);
    CHECK(row.counters.adapter == k * row.forward_passes);
    CHECK(row.counters.heavy == (cfg.n_layers - k) * row.forward_passes);
    CHECK(row.heavy_per_segment_step == doctest::Approx(static_cast<double>(cfg.n_layers - k)));
    CHECK(row.median_latency > 0.0);
  }
  o.repeats = 0;
  CHECK_THROWS_AS(bench(model, items, o), ParameterError);
  o.repeats = 1;
  o.skip_ratios = {1.5};
  CHECK_THROWS_AS(bench(model, items, o), ParameterError);
}

TEST_CASE("cost comparator") {
  CostScenario s;
  s.seq_len = 16;
  const double L = layer_flops(16, 32, 64), A = adapter_flops(16, 32, 8);

  SUBCASE("one expert and no skipping collapse onto the dense model") {
    const auto r = compare_costs(s);
    CHECK(r.roe_core_flops == doctest::Approx(r.dense_flops));
    CHECK(r.soft_moe_flops - r.moe_router_flops == doctest::Approx(r.dense_flops));
    CHECK(r.dense_flops == doctest::Approx(4 * L));
  }
  SUBCASE("soft MoE cost grows with every added expert") {
    double prev = 0.0;
    for (std::size_t k = 1; k <= 8; ++k) {
      s.experts = k;
      const double c = compare_costs(s).soft_moe_flops;
      CHECK(c > prev);
      prev = c;
    }
  }
  SUBCASE("closed form at s = 0.23") {
    s.skip = 0.23;
    const auto r = compare_costs(s);
    CHECK(r.roe_core_flops == doctest::Approx(4 * (0.77 * L + 0.23 * A)).epsilon(1e-14));
    CHECK(r.roe_dense_ratio == doctest::Approx(0.77 + 0.23 * A / L).epsilon(1e-14));
    CHECK(r.roe_dense_ratio < 1.0);
    CHECK(r.roe_flops > r.roe_core_flops);
    CHECK(r.adapter_layer_ratio == doctest::Approx(A / L));
  }
  SUBCASE("cached decoding") {
    s.decode_tokens = 3;
    s.skip = 0.5;
    const auto r = compare_costs(s);
    double dense = 4 * L;
    for (std::size_t t = 1; t <= 3; ++t) dense += 4 * layer_flops_cached(1, 16 + t, 32, 64);
    CHECK(r.kv_dense_flops == doctest::Approx(dense));
    CHECK(r.kv_roe_flops < r.kv_dense_flops);
  }
  s.experts = 0;
  CHECK_THROWS_AS(compare_costs(s), ParameterError);
  s.experts = 1;
  s.skip = -0.1;
  CHECK_THROWS_AS(compare_costs(s), ParameterError);
}

TEST_CASE("importance profile writes n rows per example") {
  ModelConfig cfg;
  RoeModel model(cfg);
  const auto corpus = generate_corpus(TaskSpec{}, 5, 16);
  const auto p = profile_importance(model, corpus);
  REQUIRE(p.per_example.size() == 5);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    double sum = 0.0;
    for (const auto& row : p.per_example) sum += row[i];
    CHECK(p.mean[i] == doctest::Approx(sum / 5));
  }
  std::ostringstream csv;
  write_profile_csv(csv, p);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "sample_id,layer,l1");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 5 * cfg.n_layers);
  CHECK_THROWS_AS(profile_importance(model, {}), DegenerateBatchError);
}
