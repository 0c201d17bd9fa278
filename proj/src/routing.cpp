#include "roe/routing.hpp"

#include <cmath>
#include <numeric>

#include "roe/errors.hpp"

namespace roe {

std::size_t SegmentLayout::length() const {
  return segments.empty() ? 0 : segments.back().start + segments.back().length;
}

std::size_t SegmentLayout::router_position(std::size_t slot) const {
  const SegmentKind kind = slot == 0 ? SegmentKind::ImageRouter : SegmentKind::Router;
  return find(kind, slot).start;
}

int SegmentLayout::router_slot(std::size_t pos) const {
  for (const Segment& s : segments) {
    if (pos >= s.start && pos < s.start + s.length) {
      if (s.kind == SegmentKind::ImageRouter || s.kind == SegmentKind::Router) {
        return static_cast<int>(s.turn);
      }
      return -1;
    }
  }
  throw DimensionError("position " + std::to_string(pos) + " outside layout of length " +
                       std::to_string(length()));
}

std::vector<std::size_t> SegmentLayout::group_rows(std::size_t group) const {
  std::vector<std::size_t> rows;
  for (const Segment& s : segments) {
    if (s.turn != group) continue;
    for (std::size_t p = s.start; p < s.start + s.length; ++p) rows.push_back(p);
  }
  return rows;
}

const Segment& SegmentLayout::find(SegmentKind kind, std::size_t turn) const {
  for (const Segment& s : segments) {
    if (s.kind == kind && s.turn == turn) return s;
  }
  throw MalformedSampleError("layout has no segment of the requested kind for turn " +
                             std::to_string(turn));
}

const Segment& SegmentLayout::content_of(std::size_t slot) const {
  return slot == 0 ? find(SegmentKind::Image, 0) : find(SegmentKind::Question, slot);
}

void SegmentLayout::validate() const {
  if (turns == 0) throw MalformedSampleError("layout has no turns");
  if (segments.size() != 2 + 3 * turns) {
    throw MalformedSampleError("layout with " + std::to_string(turns) + " turns has " +
                               std::to_string(segments.size()) + " segments");
  }
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    if (s.start != cursor) throw MalformedSampleError("layout segments are not contiguous");
    cursor += s.length;
    SegmentKind want;
    std::size_t turn;
    if (i < 2) {
      want = i == 0 ? SegmentKind::ImageRouter : SegmentKind::Image;
      turn = 0;
    } else {
      const std::size_t k = (i - 2) % 3;
      want = k == 0 ? SegmentKind::Router : (k == 1 ? SegmentKind::Question : SegmentKind::Answer);
      turn = (i - 2) / 3 + 1;
    }
    if (s.kind != want || s.turn != turn) throw MalformedSampleError("layout segment out of order");
    const bool slot = want == SegmentKind::ImageRouter || want == SegmentKind::Router;
    if (slot && s.length != 1) throw MalformedSampleError("routing slot must hold one token");
  }
}

AttentionMask build_routing_mask(const SegmentLayout& layout) {
  const std::size_t n = layout.length();
  AttentionMask mask(n);
  std::vector<int> slot(n);
  for (std::size_t p = 0; p < n; ++p) slot[p] = layout.router_slot(p);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k <= q; ++k) {
      if (slot[q] >= 0 || slot[k] < 0) mask.set(q, k, true);
    }
    if (slot[q] >= 0) {
      const Segment& c = layout.content_of(static_cast<std::size_t>(slot[q]));
      for (std::size_t k = c.start; k < c.start + c.length; ++k) mask.set(q, k, true);
    }
  }
  return mask;
}

std::vector<std::uint8_t> answer_mask(const SegmentLayout& layout) {
  std::vector<std::uint8_t> m(layout.length(), 0);
  for (const Segment& s : layout.segments) {
    if (s.kind != SegmentKind::Answer) continue;
    for (std::size_t p = s.start; p < s.start + s.length; ++p) m[p] = 1;
  }
  return m;
}

AssembledSequence assemble_sequence(const ConversationSample& sample, const ModelConfig& cfg,
                                    bool open_last_answer) {
  const std::size_t q = sample.turns.size();
  if (q == 0) throw MalformedSampleError("sample " + std::to_string(sample.id) + " has no turns");
  if (q > cfg.max_turns) {
    throw MalformedSampleError("sample " + std::to_string(sample.id) + " has " + std::to_string(q) +
                               " turns, more than the " + std::to_string(cfg.max_turns) +
                               " routing slots");
  }
  if (sample.image_tokens.empty()) {
    throw MalformedSampleError("sample " + std::to_string(sample.id) + " has an empty image block");
  }
  for (std::size_t k = 0; k < q; ++k) {
    const bool last = k + 1 == q;
    if (sample.turns[k].question.empty() ||
        (sample.turns[k].answer.empty() && !(last && open_last_answer))) {
      throw MalformedSampleError("sample " + std::to_string(sample.id) + " turn " +
                                 std::to_string(k + 1) + " has an empty question or answer");
    }
  }

  AssembledSequence seq;
  SegmentLayout& lay = seq.layout;
  lay.turns = q;
  auto push = [&](SegmentKind kind, std::size_t turn, const std::vector<int>& toks) {
    lay.segments.push_back({kind, turn, seq.tokens.size(), toks.size()});
    seq.tokens.insert(seq.tokens.end(), toks.begin(), toks.end());
  };
  const std::vector<int> slot{-1};
  push(SegmentKind::ImageRouter, 0, slot);
  push(SegmentKind::Image, 0, sample.image_tokens);
  for (std::size_t k = 0; k < q; ++k) {
    push(SegmentKind::Router, k + 1, slot);
    push(SegmentKind::Question, k + 1, sample.turns[k].question);
    push(SegmentKind::Answer, k + 1, sample.turns[k].answer);
  }
  const std::size_t n = seq.tokens.size();
  if (n > cfg.max_seq_len) {
    throw CapacityError("sample " + std::to_string(sample.id) + " assembles to " + std::to_string(n) +
                        " tokens, above max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  lay.validate();

  int pos = 0;
  seq.positions.assign(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    if (seq.tokens[p] >= 0) seq.positions[p] = pos++;
  }
  const auto ans = answer_mask(lay);
  seq.targets.assign(n, 0);
  seq.loss_mask.assign(n, 0);
  for (std::size_t p = 1; p < n; ++p) {
    if (ans[p]) {
      seq.targets[p - 1] = seq.tokens[p];
      seq.loss_mask[p - 1] = 1;
    }
  }
  seq.mask = std::make_shared<const AttentionMask>(build_routing_mask(lay));
  return seq;
}

RouterParams::RouterParams(const ModelConfig& cfg, std::mt19937_64& rng)
    : temperature(cfg.temperature) {
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    w_r.emplace_back("router.layers." + std::to_string(i) + ".w_r", Tensor({2 * cfg.d_model, 2}, 0.0),
                     ParamGroup::Router);
  }
  tokens = Parameter("router.tokens", Tensor::gaussian({cfg.max_turns + 1, cfg.d_model}, 0.02, rng),
                     ParamGroup::Router, /*weight_decay=*/false);
}

std::vector<Parameter*> RouterParams::parameters() {
  std::vector<Parameter*> out;
  for (auto& w : w_r) out.push_back(&w);
  out.push_back(&tokens);
  return out;
}

RoeModel::RoeModel(const ModelConfig& c) : cfg(c) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  backbone = Backbone(cfg, rng);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) adapters.emplace_back(cfg, i, rng);
  router = RouterParams(cfg, rng);
}

std::vector<Parameter*> RoeModel::parameters() {
  std::vector<Parameter*> out = backbone.parameters();
  for (auto& a : adapters)
    for (Parameter* p : a.parameters()) out.push_back(p);
  for (Parameter* p : router.parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter*> RoeModel::parameters(ParamGroup group) {
  std::vector<Parameter*> out;
  for (Parameter* p : parameters())
    if (p->group == group) out.push_back(p);
  return out;
}

Parameter& RoeModel::find(const std::string& name) {
  for (Parameter* p : parameters())
    if (p->name == name) return *p;
  throw CheckpointError("model has no parameter named " + name);
}

const char* to_string(RouteMode m) {
  switch (m) {
    case RouteMode::Dense: return "dense";
    case RouteMode::Soft: return "soft";
    case RouteMode::Hard: return "hard";
  }
  return "?";
}

RouteMode route_mode_from_string(const std::string& s) {
  if (s == "dense") return RouteMode::Dense;
  if (s == "soft") return RouteMode::Soft;
  if (s == "hard") return RouteMode::Hard;
  throw ConfigError("unknown routing mode '" + s + "' (expected soft, hard or dense)");
}

const RoutingDecision& RoutingPlan::at(std::size_t layer, std::size_t segment) const {
  if (layer >= layers || segment >= segments) {
    throw PlanMismatchError("plan lookup (" + std::to_string(layer) + ", " + std::to_string(segment) +
                            ") outside " + std::to_string(layers) + "x" + std::to_string(segments));
  }
  return decisions[layer * segments + segment];
}

std::size_t RoutingPlan::skip_count() const {
  std::size_t n = 0;
  for (const auto& d : decisions) n += d.choice == Choice::Skip ? 1 : 0;
  return n;
}

RoutingPlan RoutingPlan::forced(std::size_t layers, std::size_t segments, const std::vector<bool>& skip,
                                bool shared_image_path) {
  if (skip.size() != layers * segments) {
    throw PlanMismatchError("forced plan needs " + std::to_string(layers * segments) +
                            " choices, got " + std::to_string(skip.size()));
  }
  RoutingPlan plan;
  plan.layers = layers;
  plan.segments = segments;
  plan.shared_image_path = shared_image_path;
  for (std::size_t i = 0; i < layers; ++i) {
    for (std::size_t s = 0; s < segments; ++s) {
      const bool sk = skip[i * segments + s];
      plan.decisions.push_back({i, s, sk ? 0.0 : 1.0, sk ? 1.0 : 0.0,
                                sk ? Choice::Skip : Choice::Keep, RouteMode::Hard});
    }
  }
  return plan;
}

double InvocationCounters::skip_ratio() const {
  const std::size_t total = heavy + adapter;
  return total == 0 ? 0.0 : static_cast<double>(adapter) / static_cast<double>(total);
}

InvocationCounters& InvocationCounters::operator+=(const InvocationCounters& o) {
  heavy += o.heavy;
  adapter += o.adapter;
  return *this;
}

Choice hard_choice(double p_keep, double p_skip) {
  return p_skip > p_keep ? Choice::Skip : Choice::Keep;
}

namespace {

RoutingDecision decision_from_logits(double z_keep, double z_skip, double temperature,
                                     std::size_t layer) {
  if (!(temperature > 0.0)) throw ParameterError("router temperature must be positive");
  Tape tape(false);
  const Var z = tape.constant(Tensor({1, 2}, std::vector<double>{z_keep, z_skip}));
  const Tensor& p = softmax(z, 1, temperature).value();
  RoutingDecision d;
  d.layer = layer;
  d.p_keep = p[0];
  d.p_skip = p[1];
  d.choice = hard_choice(p[0], p[1]);
  d.mode = RouteMode::Hard;
  return d;
}

std::array<double, 2> pair_logits(const Tensor& h_r0, const Tensor& h_rk, const Tensor& w_r) {
  const std::size_t d = h_r0.size();
  if (h_rk.size() != d || w_r.rank() != 2 || w_r.shape()[0] != 2 * d || w_r.shape()[1] != 2) {
    throw DimensionError("router inputs " + shape_string(h_r0.shape()) + ", " +
                         shape_string(h_rk.shape()) + " do not fit W_r " + shape_string(w_r.shape()));
  }
  std::array<double, 2> z{0.0, 0.0};
  for (std::size_t j = 0; j < 2; ++j) {
    for (std::size_t k = 0; k < d; ++k) z[j] += h_r0[k] * w_r.at(k, j);
    for (std::size_t k = 0; k < d; ++k) z[j] += h_rk[k] * w_r.at(d + k, j);
  }
  return z;
}

}  // namespace

RoutingDecision route_question(const Tensor& h_r0, const Tensor& h_rj, const Tensor& w_r,
                               double temperature, std::size_t layer) {
  const auto z = pair_logits(h_r0, h_rj, w_r);
  return decision_from_logits(z[0], z[1], temperature, layer);
}

RoutingDecision route_image(const Tensor& h_r0, const std::vector<Tensor>& h_rk, const Tensor& w_r,
                            double temperature, std::size_t layer) {
  if (h_rk.empty()) throw MalformedSampleError("image routing needs at least one turn");
  double z0 = 0.0, z1 = 0.0;
  for (const Tensor& h : h_rk) {
    const auto z = pair_logits(h_r0, h, w_r);
    z0 += z[0];
    z1 += z[1];
  }
  return decision_from_logits(z0, z1, temperature * static_cast<double>(h_rk.size()), layer);
}

Var select_expert(Tape& tape, LayerContext& ctx, Adapter& adapter, std::span<const std::size_t> rows,
                  const ExpertWeights& weights, RouteMode mode, InvocationCounters* counters) {
  if (mode == RouteMode::Soft) {
    if (counters) {
      ++counters->heavy;
      ++counters->adapter;
    }
    const Var g = ctx.forward_rows(rows);
    const Var a = apply_adapter(tape, adapter, gather_rows(ctx.input(), rows));
    return add(mul_scalar(g, weights.p_keep), mul_scalar(a, weights.p_skip));
  }
  if (weights.choice == Choice::Keep) {
    if (counters) ++counters->heavy;
    return ctx.forward_rows(rows);
  }
  if (counters) ++counters->adapter;
  return apply_adapter(tape, adapter, gather_rows(ctx.input(), rows));
}

namespace {

Var embed_sequence(Tape& tape, RoeModel& model, const AssembledSequence& seq) {
  std::vector<int> toks, pos;
  std::vector<std::size_t> plain_rows, slot_rows, slots;
  for (std::size_t p = 0; p < seq.length(); ++p) {
    if (seq.tokens[p] >= 0) {
      toks.push_back(seq.tokens[p]);
      pos.push_back(seq.positions[p]);
      plain_rows.push_back(p);
    } else {
      const int s = seq.layout.router_slot(p);
      if (s < 0 || static_cast<std::size_t>(s) > model.cfg.max_turns) {
        throw MalformedSampleError("routing slot at position " + std::to_string(p) +
                                   " has no routing token");
      }
      slot_rows.push_back(p);
      slots.push_back(static_cast<std::size_t>(s));
    }
  }
  const Var plain = embed_tokens(tape, model.backbone, toks, pos, model.cfg);
  const Var routed = gather_rows(tape.param(model.router.tokens), slots);
  const std::vector<RowBlock> blocks{{plain, plain_rows}, {routed, slot_rows}};
  return merge_rows(seq.length(), blocks);
}

// One routing unit: a set of rows that shares one decision.
struct Unit {
  std::vector<std::size_t> rows;
};

}  // namespace

ForwardResult roe_forward(Tape& tape, RoeModel& model, const AssembledSequence& seq,
                          const ForwardOptions& opt) {
  const ModelConfig& cfg = model.cfg;
  const SegmentLayout& lay = seq.layout;
  const std::size_t q = lay.turns;
  const std::size_t n = seq.length();
  if (q == 0) throw MalformedSampleError("sequence has no routing slots");
  if (n > cfg.max_seq_len) {
    throw CapacityError("sequence of " + std::to_string(n) + " tokens exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  const RouteMode mode = opt.forced_plan ? RouteMode::Hard : opt.mode;
  const bool shared = opt.forced_plan ? opt.forced_plan->shared_image_path : opt.shared_image_path;
  if (shared && q != 1) {
    throw PlanMismatchError("a shared image path needs a single-turn sequence, got " +
                            std::to_string(q) + " turns");
  }
  if (opt.image_probs && (shared || opt.image_probs->size() != cfg.n_layers)) {
    throw PlanMismatchError("image probability override must give one pair per layer");
  }

  std::vector<Unit> units;
  if (mode == RouteMode::Dense) {
    Unit all;
    all.rows.resize(n);
    std::iota(all.rows.begin(), all.rows.end(), 0);
    units.push_back(std::move(all));
  } else if (shared) {
    Unit u;
    u.rows = lay.group_rows(0);
    const auto r1 = lay.group_rows(1);
    u.rows.insert(u.rows.end(), r1.begin(), r1.end());
    units.push_back(std::move(u));
  } else {
    for (std::size_t g = 0; g <= q; ++g) units.push_back({lay.group_rows(g)});
  }
  if (opt.forced_plan) {
    if (opt.forced_plan->layers != cfg.n_layers || opt.forced_plan->segments != units.size()) {
      throw PlanMismatchError("plan is " + std::to_string(opt.forced_plan->layers) + "x" +
                              std::to_string(opt.forced_plan->segments) + " but the model needs " +
                              std::to_string(cfg.n_layers) + "x" + std::to_string(units.size()));
    }
  }

  ForwardResult res;
  res.plan.layers = cfg.n_layers;
  res.plan.segments = mode == RouteMode::Dense ? 0 : units.size();
  res.plan.shared_image_path = shared;

  std::vector<std::size_t> r0_rows(q), rk_rows(q);
  for (std::size_t k = 0; k < q; ++k) {
    r0_rows[k] = lay.router_position(0);
    rk_rows[k] = lay.router_position(k + 1);
  }
  const Var ones = tape.constant(Tensor({1, q}, 1.0));
  std::vector<std::size_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), 0);

  Var x = embed_sequence(tape, model, seq);
  if (opt.keep_hidden) res.hidden.push_back(x.value());

  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerContext ctx(tape, model.backbone.layers[i], x, seq.mask, cfg);
    std::vector<ExpertWeights> weights(units.size());

    if (mode == RouteMode::Dense) {
      weights[0].choice = Choice::Keep;
    } else if (opt.forced_plan) {
      for (std::size_t u = 0; u < units.size(); ++u) {
        weights[u].choice = opt.forced_plan->at(i, u).choice;
        res.plan.decisions.push_back(opt.forced_plan->at(i, u));
      }
    } else {
      const Var z = concat_cols(gather_rows(x, r0_rows), gather_rows(x, rk_rows));
      const Var logits = matmul(z, tape.param(model.router.w_r[i]));
      res.turn_logits.push_back(logits.value());
      const Var turn_p = softmax(logits, 1, model.router.temperature);

      // Probability pair for each unit as (source tensor, flat offset).
      std::vector<std::pair<Var, std::size_t>> src(units.size());
      if (shared) {
        src[0] = {turn_p, 0};
      } else {
        if (opt.image_probs) {
          const auto& ip = (*opt.image_probs)[i];
          src[0] = {tape.constant(Tensor({1, 2}, std::vector<double>{ip[0], ip[1]})), 0};
        } else {
          const Var summed = matmul(ones, logits);
          src[0] = {softmax(summed, 1, model.router.temperature * static_cast<double>(q)), 0};
        }
        for (std::size_t k = 1; k <= q; ++k) src[k] = {turn_p, 2 * (k - 1)};
      }
      for (std::size_t u = 0; u < units.size(); ++u) {
        const auto& [pv, off] = src[u];
        RoutingDecision d;
        d.layer = i;
        d.segment = u;
        d.p_keep = pv.value()[off];
        d.p_skip = pv.value()[off + 1];
        d.choice = hard_choice(d.p_keep, d.p_skip);
        d.mode = mode;
        res.plan.decisions.push_back(d);
        weights[u].choice = d.choice;
        Var pk = element(pv, off);
        Var ps = element(pv, off + 1);
        if (mode == RouteMode::Soft && opt.straight_through) {
          const bool skip = d.choice == Choice::Skip;
          pk = straight_through(pk, Tensor::scalar(skip ? 0.0 : 1.0));
          ps = straight_through(ps, Tensor::scalar(skip ? 1.0 : 0.0));
        }
        weights[u].p_keep = pk;
        weights[u].p_skip = ps;
        res.skip_probs.push_back(ps);
      }
    }

    std::vector<RowBlock> blocks;
    if (mode == RouteMode::Soft) {
      // Both branches run on every row anyway, so evaluate each once over the
      // whole sequence and mix per unit. Rows are independent in both
      // branches, so this matches select_expert unit by unit.
      const Var g_all = ctx.forward_rows(all_rows);
      const Var a_all = apply_adapter(tape, model.adapters[i], x);
      for (std::size_t u = 0; u < units.size(); ++u) {
        if (opt.counters) {
          ++opt.counters->heavy;
          ++opt.counters->adapter;
        }
        const Var g = gather_rows(g_all, units[u].rows);
        const Var a = gather_rows(a_all, units[u].rows);
        blocks.push_back({add(mul_scalar(g, weights[u].p_keep), mul_scalar(a, weights[u].p_skip)),
                          units[u].rows});
      }
    } else {
      for (std::size_t u = 0; u < units.size(); ++u) {
        blocks.push_back({select_expert(tape, ctx, model.adapters[i], units[u].rows, weights[u],
                                        RouteMode::Hard, opt.counters),
                          units[u].rows});
      }
    }
    x = blocks.size() == 1 && blocks[0].rows.size() == n && mode == RouteMode::Dense
            ? blocks[0].src
            : merge_rows(n, blocks);
    if (opt.keep_hidden) res.hidden.push_back(x.value());
  }
  res.logits = output_head(tape, model.backbone, x, cfg);
  return res;
}

RoutingPlan plan_inference_routing(RoeModel& model, const AssembledSequence& prompt) {
  if (prompt.layout.turns == 0) throw MalformedSampleError("prompt has no routing slots");
  Tape tape(false);
  ForwardOptions opt;
  opt.mode = RouteMode::Hard;
  opt.shared_image_path = prompt.layout.turns == 1;
  return roe_forward(tape, model, prompt, opt).plan;
}

}  // namespace roe
