#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "roe/errors.hpp"
#include "roe/objectives.hpp"

using namespace roe;

namespace {

std::vector<Var> leaves(Tape& tape, std::vector<Parameter>& ps) {
  std::vector<Var> out;
  for (auto& p : ps) out.push_back(tape.param(p));
  return out;
}

std::vector<Parameter> probs(std::initializer_list<double> values) {
  std::vector<Parameter> ps;
  for (double v : values) ps.emplace_back("p" + std::to_string(ps.size()), Tensor::scalar(v), ParamGroup::Router);
  return ps;
}

}  // namespace

TEST_CASE("sparsity hinge closed forms") {
  const std::vector<double> above{0.2, 0.4};  // mean 0.3
  const std::vector<double> below{0.0, 0.2};  // mean 0.1
  CHECK(sparsity_loss(above, 0.2) == 0.0);
  CHECK(sparsity_loss(below, 0.2) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(sparsity_loss(std::vector<double>{0.3}, 0.3) == 0.0);
  CHECK_THROWS_AS(sparsity_loss(std::vector<double>{}, 0.2), DegenerateBatchError);
  CHECK_THROWS_AS(sparsity_loss(below, 1.5), ParameterError);
  CHECK_THROWS_AS(sparsity_loss(std::vector<double>{1.2}, 0.5), ParameterError);
}

TEST_CASE("hinge gradient is -1/n when active and 0 when saturated") {
  for (std::size_t n : {1u, 3u, 8u}) {
    std::vector<Parameter> ps;
    for (std::size_t i = 0; i < n; ++i) ps.emplace_back("p", Tensor::scalar(0.05), ParamGroup::Router);
    Tape tape;
    const auto v = leaves(tape, ps);
    tape.backward(sparsity_loss(v, 0.3));
    for (auto& p : ps) CHECK(p.grad[0] == doctest::Approx(-1.0 / static_cast<double>(n)).epsilon(1e-15));
  }
  auto ps = probs({0.5, 0.6});
  Tape tape;
  const auto v = leaves(tape, ps);
  tape.backward(sparsity_loss(v, 0.3));
  for (auto& p : ps) CHECK(p.grad[0] == 0.0);
}

TEST_CASE("combined loss worked example") {
  // ln 4 + 0.5 * exp(-ln 4) * 0.1 = ln 4 + 0.0125
  CHECK(combined_loss(std::log(4.0), 0.1, 0.5) == doctest::Approx(1.3988).epsilon(1e-4 / 1.3988));
  CHECK(combined_loss(std::log(4.0), 0.1, 0.5) == doctest::Approx(std::log(4.0) + 0.0125).epsilon(1e-15));
  CHECK(difficulty_weight(0.0) == 1.0);
  CHECK(difficulty_weight(-2.0) == difficulty_weight(2.0));
  CHECK_THROWS_AS(combined_loss(std::numeric_limits<double>::infinity(), 0.1, 0.5), DivergenceError);
  CHECK_THROWS_AS(combined_loss(1.0, 0.1, -1.0), ParameterError);

  Parameter lt("lt", Tensor::scalar(std::log(4.0)), ParamGroup::Backbone);
  Parameter ls("ls", Tensor::scalar(0.1), ParamGroup::Router);
  Tape tape;
  const auto out = combined_loss(tape, tape.param(lt), tape.param(ls), 0.5);
  CHECK(out.parts.total == doctest::Approx(std::log(4.0) + 0.0125).epsilon(1e-15));
  CHECK(out.parts.weight == doctest::Approx(0.25));
  tape.backward(out.total);
  // The weight is detached: dL/dL_t is exactly 1.
  CHECK(lt.grad[0] == 1.0);
  CHECK(ls.grad[0] == doctest::Approx(0.125));
}

TEST_CASE("segmented loss by hand") {
  // Two segments over two layers; only the second hinge is active.
  auto s0 = probs({0.5, 0.3});  // mean 0.4 >= t
  auto s1 = probs({0.1, 0.0});  // mean 0.05 -> hinge 0.25
  Parameter lt("lt", Tensor::scalar(1.0), ParamGroup::Backbone);
  Tape tape;
  const std::vector<std::vector<Var>> segs{leaves(tape, s0), leaves(tape, s1)};
  const std::vector<double> seg_losses{1.0, 2.0};
  const auto out = segmented_loss(tape, tape.param(lt), segs, seg_losses, 0.3, 0.5);
  const double w1 = std::exp(-2.0);
  CHECK(out.parts.task_loss == 1.0);
  CHECK(out.parts.sparsity_loss == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(out.parts.weight == doctest::Approx(w1).epsilon(1e-15));
  CHECK(out.parts.mean_skip_prob == doctest::Approx(0.225).epsilon(1e-15));
  CHECK(out.parts.total == doctest::Approx(1.0 + 0.5 * (0.0 + w1 * 0.25) / 2.0).epsilon(1e-15));
  // Reported parts reconstruct the total.
  CHECK(out.parts.total ==
        doctest::Approx(out.parts.task_loss + 0.5 * out.parts.weight * out.parts.sparsity_loss).epsilon(1e-15));
  tape.backward(out.total);
  for (auto& p : s0) CHECK(p.grad[0] == 0.0);
  // d/dp = alpha * w1 / segments * (-1 / layers)
  for (auto& p : s1) CHECK(p.grad[0] == doctest::Approx(-0.5 * w1 / 2.0 / 2.0).epsilon(1e-14));
  CHECK(lt.grad[0] == 1.0);

  const std::vector<double> wrong{1.0};
  CHECK_THROWS_AS(segmented_loss(tape, tape.param(lt), segs, wrong, 0.3, 0.5), DimensionError);
}

TEST_CASE("segmented loss with every hinge saturated reports the sample weight") {
  auto s0 = probs({0.5});
  Parameter lt("lt", Tensor::scalar(0.7), ParamGroup::Backbone);
  Tape tape;
  const std::vector<std::vector<Var>> segs{leaves(tape, s0)};
  const std::vector<double> l{0.7};
  const auto out = segmented_loss(tape, tape.param(lt), segs, l, 0.3, 0.5);
  CHECK(out.parts.sparsity_loss == 0.0);
  CHECK(out.parts.weight == doctest::Approx(std::exp(-0.7)));
  CHECK(out.parts.total == doctest::Approx(0.7));
}

TEST_CASE("batch loss: total equals L_t + alpha * weight * L_s for averaged parts") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    std::vector<Parameter> keep;
    keep.reserve(16);
    std::vector<SampleLoss> samples;
    const double alpha = 0.5;
    for (int s = 0; s < 4; ++s) {
      keep.emplace_back("lt", Tensor::scalar(3.0 * u(rng)), ParamGroup::Backbone);
      Parameter& lt = keep.back();
      auto ps = probs({0.6 * u(rng), 0.6 * u(rng)});
      for (auto& p : ps) keep.push_back(p);
      std::vector<Var> v{tape.param(keep[keep.size() - 2]), tape.param(keep.back())};
      samples.push_back(combined_loss(tape, tape.param(lt), sparsity_loss(v, 0.3), alpha));
    }
    const auto b = batch_loss(samples);
    CHECK(b.parts.total == doctest::Approx(b.parts.task_loss + alpha * b.parts.weight * b.parts.sparsity_loss)
                               .epsilon(1e-12));
    double mean_total = 0.0;
    for (const auto& s : samples) mean_total += s.parts.total / 4.0;
    CHECK(b.parts.total == doctest::Approx(mean_total).epsilon(1e-14));
  }
  CHECK_THROWS_AS(batch_loss(std::vector<SampleLoss>{}), DegenerateBatchError);
}

TEST_CASE("loss breakdown JSON carries every metrics field") {
  LossBreakdown b;
  b.task_loss = 1.0;
  const auto j = b.to_json();
  for (const char* k : {"L_t", "L_s", "weight", "total", "mean_skip_prob"}) CHECK(j.contains(k));
}
