#include "roe/optimizer.hpp"

#include <cmath>

#include "roe/errors.hpp"

namespace roe {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void AdamW::step(const LearningRate& lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    const double rate = lr(p);
    const double decay = p.weight_decay ? cfg_.weight_decay : 0.0;
    auto w = p.value.data();
    auto g = p.grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      w[k] -= rate * (mh / (std::sqrt(vh) + cfg_.eps) + decay * w[k]);
    }
    p.value.check_finite(p.name.c_str());
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void AdamW::save_state(Checkpoint& ck) const {
  ck.meta.emplace_back("optim.step", std::to_string(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ck.tensors.emplace_back("optim.m." + params_[i]->name, m_[i]);
    ck.tensors.emplace_back("optim.v." + params_[i]->name, v_[i]);
  }
}

void AdamW::load_state(const Checkpoint& ck) {
  t_ = std::stoull(ck.meta_or_throw("optim.step"));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor* m = ck.find_tensor("optim.m." + params_[i]->name);
    const Tensor* v = ck.find_tensor("optim.v." + params_[i]->name);
    if (!m || !v) throw CheckpointError("optimizer state missing for " + params_[i]->name);
    if (m->shape() != m_[i].shape() || v->shape() != v_[i].shape()) {
      throw CheckpointError("optimizer state for " + params_[i]->name + " has the wrong shape");
    }
    m_[i] = *m;
    v_[i] = *v;
  }
}

}  // namespace roe
