#pragma once

// Straightforward loop implementations of the decoder, written independently
// of the library kernels. Used as oracles by the unit and acceptance tests.

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "roe/model.hpp"
#include "roe/tensor.hpp"

namespace roe::ref {

using Mat = std::vector<std::vector<double>>;
using Allowed = std::function<bool(std::size_t, std::size_t)>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline Mat mul(const Mat& a, const Tensor& w) {
  Mat out(a.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < w.rows(); ++k) s += a[i][k] * w.at(k, j);
      out[i][j] = s;
    }
  return out;
}

inline Mat layer_norm(const Mat& x, const Tensor& g, const Tensor& b, double eps) {
  Mat out = x;
  for (auto& row : out) {
    double mu = 0.0, var = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mu) / std::sqrt(var + eps) * g[c] + b[c];
  }
  return out;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
}

/// One pre-norm decoder layer over every row of x.
inline Mat layer(const DecoderLayer& L, const Mat& x, const Allowed& allowed, const ModelConfig& cfg) {
  const std::size_t n = x.size(), d = cfg.d_model, H = cfg.n_heads, dh = d / H;
  const Mat h = layer_norm(x, L.ln1_gain.value, L.ln1_bias.value, cfg.ln_eps);
  const Mat q = mul(h, L.w_q.value), k = mul(h, L.w_k.value), v = mul(h, L.w_v.value);
  Mat att(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t hd = 0; hd < H; ++hd) {
      std::vector<double> s(n, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        if (!allowed(i, j)) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][hd * dh + c] * k[j][hd * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (allowed(i, j)) z += std::exp(s[j] - mx);
      for (std::size_t j = 0; j < n; ++j) {
        if (!allowed(i, j)) continue;
        const double w = std::exp(s[j] - mx) / z;
        for (std::size_t c = 0; c < dh; ++c) att[i][hd * dh + c] += w * v[j][hd * dh + c];
      }
    }
  Mat y = x;
  const Mat o = mul(att, L.w_o.value);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) y[i][c] += o[i][c];
  Mat f = mul(layer_norm(y, L.ln2_gain.value, L.ln2_bias.value, cfg.ln_eps), L.w_ff1.value);
  for (auto& row : f)
    for (auto& e : row) e = gelu(e);
  f = mul(f, L.w_ff2.value);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) y[i][c] += f[i][c];
  return y;
}

inline Mat embed(const Backbone& bb, const std::vector<int>& tokens, const ModelConfig& cfg) {
  Mat x(tokens.size(), std::vector<double>(cfg.d_model));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t c = 0; c < cfg.d_model; ++c)
      x[i][c] = bb.tok_emb.value.at(static_cast<std::size_t>(tokens[i]), c) + bb.pos_emb.value.at(i, c);
  return x;
}

inline Mat head(const Backbone& bb, const Mat& x, const ModelConfig& cfg) {
  return mul(layer_norm(x, bb.lnf_gain.value, bb.lnf_bias.value, cfg.ln_eps), bb.head.value);
}

/// Router-free causal decoder logits.
inline Mat dense_logits(const Backbone& bb, const std::vector<int>& tokens, const ModelConfig& cfg) {
  Mat x = embed(bb, tokens, cfg);
  const Allowed causal = [](std::size_t i, std::size_t j) { return j <= i; };
  for (const auto& L : bb.layers) x = layer(L, x, causal, cfg);
  return head(bb, x, cfg);
}

inline double max_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

}  // namespace roe::ref
