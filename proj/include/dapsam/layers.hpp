#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dapsam/params.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

// GELU with the exact Gaussian CDF.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---- linear ----------------------------------------------------------------

inline Mat linear_forward(const ParameterStore& ps, const std::string& prefix, const Mat& x) {
  return matmul(x, ps.value(prefix + ".weight"), ps.value(prefix + ".bias").data);
}

/// Accumulates weight/bias gradients (when trainable) and returns dL/dx.
inline Mat linear_backward(ParameterStore& ps, const std::string& prefix, const Mat& x,
                           const Mat& dy, bool need_input_grad = true) {
  if (auto gw = ps.grad(prefix + ".weight"); !gw.empty()) add_at_b(x, dy, gw);
  if (auto gb = ps.grad(prefix + ".bias"); !gb.empty()) add_colsum(dy, gb);
  if (!need_input_grad) return {};
  return matmul_bt(dy, ps.value(prefix + ".weight"));
}

// ---- layer norm ------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-6;

struct LayerNormCache {
  Mat xhat;
  std::vector<double> inv_std;
};

inline Mat layernorm_forward(const ParameterStore& ps, const std::string& prefix, const Mat& x,
                             LayerNormCache* cache) {
  const auto& gamma = ps.value(prefix + ".gamma").data;
  const auto& beta = ps.value(prefix + ".beta").data;
  Mat out(x.rows, x.cols);
  Mat xhat(x.rows, x.cols);
  std::vector<double> inv_std(x.rows);
  const double n = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double xh = (r[j] - mean) * is;
      xhat(i, j) = xh;
      out(i, j) = gamma[j] * xh + beta[j];
    }
  }
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

inline Mat layernorm_backward(ParameterStore& ps, const std::string& prefix,
                              const LayerNormCache& cache, const Mat& dy) {
  const auto& gamma = ps.value(prefix + ".gamma").data;
  auto ggamma = ps.grad(prefix + ".gamma");
  auto gbeta = ps.grad(prefix + ".beta");
  const std::size_t rows = dy.rows;
  const std::size_t cols = dy.cols;
  const double n = static_cast<double>(cols);
  Mat dx(rows, cols);
  std::vector<double> dxhat(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double g = dy(i, j);
      const double xh = cache.xhat(i, j);
      if (!ggamma.empty()) ggamma[j] += g * xh;
      if (!gbeta.empty()) gbeta[j] += g;
      dxhat[j] = g * gamma[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xh;
    }
    mean_d /= n;
    mean_dx /= n;
    for (std::size_t j = 0; j < cols; ++j) {
      dx(i, j) = cache.inv_std[i] * (dxhat[j] - mean_d - cache.xhat(i, j) * mean_dx);
    }
  }
  return dx;
}

// ---- multi-head self-attention --------------------------------------------

struct AttentionCache {
  Mat input;
  Mat qkv;
  std::vector<Mat> probs;  // one (tokens x tokens) matrix per head
  Mat heads_out;
};

inline Mat attention_forward(const ParameterStore& ps, const std::string& prefix, const Mat& x,
                             std::size_t num_heads, AttentionCache* cache) {
  const std::size_t t = x.rows;
  const std::size_t c = x.cols;
  const std::size_t dh = c / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat qkv = linear_forward(ps, prefix + ".qkv", x);
  Mat heads_out(t, c);
  std::vector<Mat> probs;
  probs.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t qo = h * dh;
    const std::size_t ko = c + h * dh;
    const std::size_t vo = 2 * c + h * dh;
    Mat p(t, t);
    for (std::size_t i = 0; i < t; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < t; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += qkv(i, qo + d) * qkv(j, ko + d);
        s *= scale;
        p(i, j) = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      for (std::size_t j = 0; j < t; ++j) p(i, j) /= z;
      for (std::size_t j = 0; j < t; ++j) {
        const double a = p(i, j);
        for (std::size_t d = 0; d < dh; ++d) heads_out(i, qo + d) += a * qkv(j, vo + d);
      }
    }
    probs.push_back(std::move(p));
  }
  Mat out = linear_forward(ps, prefix + ".proj", heads_out);
  if (cache != nullptr) {
    cache->input = x;
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->heads_out = std::move(heads_out);
  }
  return out;
}

inline Mat attention_backward(ParameterStore& ps, const std::string& prefix,
                              const AttentionCache& cache, const Mat& dy, std::size_t num_heads) {
  const std::size_t t = dy.rows;
  const std::size_t c = dy.cols;
  const std::size_t dh = c / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat dheads = linear_backward(ps, prefix + ".proj", cache.heads_out, dy);
  const Mat& qkv = cache.qkv;
  Mat dqkv(t, 3 * c);
  std::vector<double> dp(t);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t qo = h * dh;
    const std::size_t ko = c + h * dh;
    const std::size_t vo = 2 * c + h * dh;
    const Mat& p = cache.probs[h];
    for (std::size_t i = 0; i < t; ++i) {
      double weighted = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += dheads(i, qo + d) * qkv(j, vo + d);
        dp[j] = s;
        weighted += s * p(i, j);
        // dV_j += P_ij * dO_i
        for (std::size_t d = 0; d < dh; ++d) dqkv(j, vo + d) += p(i, j) * dheads(i, qo + d);
      }
      for (std::size_t j = 0; j < t; ++j) {
        const double ds = p(i, j) * (dp[j] - weighted) * scale;
        if (ds == 0.0) continue;
        for (std::size_t d = 0; d < dh; ++d) {
          dqkv(i, qo + d) += ds * qkv(j, ko + d);
          dqkv(j, ko + d) += ds * qkv(i, qo + d);
        }
      }
    }
  }
  return linear_backward(ps, prefix + ".qkv", cache.input, dqkv);
}

// ---- feed-forward ------------------------------------------------------------

struct MlpCache {
  Mat input;
  Mat pre;
  Mat act;
};

inline Mat mlp_forward(const ParameterStore& ps, const std::string& prefix, const Mat& x,
                       MlpCache* cache) {
  Mat pre = linear_forward(ps, prefix + ".fc1", x);
  Mat act(pre.rows, pre.cols);
  for (std::size_t i = 0; i < pre.size(); ++i) act.data[i] = gelu(pre.data[i]);
  Mat out = linear_forward(ps, prefix + ".fc2", act);
  if (cache != nullptr) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

inline Mat mlp_backward(ParameterStore& ps, const std::string& prefix, const MlpCache& cache,
                        const Mat& dy) {
  Mat dact = linear_backward(ps, prefix + ".fc2", cache.act, dy);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.data[i] *= gelu_grad(cache.pre.data[i]);
  return linear_backward(ps, prefix + ".fc1", cache.input, dact);
}

// ---- parameter registration helpers -----------------------------------------

inline void add_linear(ParameterStore& ps, const std::string& prefix, std::size_t in,
                       std::size_t out, bool frozen, double std_dev, std::uint64_t seed,
                       Init weight_init = Init::Normal) {
  ps.add(prefix + ".weight", {in, out}, frozen, weight_init, std_dev, seed);
  ps.add(prefix + ".bias", {out}, frozen, Init::Zeros, 0.0, seed);
}

inline void add_layernorm(ParameterStore& ps, const std::string& prefix, std::size_t c,
                          bool frozen, std::uint64_t seed) {
  ps.add(prefix + ".gamma", {c}, frozen, Init::Ones, 0.0, seed);
  ps.add(prefix + ".beta", {c}, frozen, Init::Zeros, 0.0, seed);
}

/// Pre-norm attention + MLP block parameters (MLP hidden width 4C).
inline void add_transformer_block(ParameterStore& ps, const std::string& prefix, std::size_t c,
                                  bool frozen, std::uint64_t seed) {
  const double sc = 1.0 / std::sqrt(static_cast<double>(c));
  const double sh = 1.0 / std::sqrt(static_cast<double>(4 * c));
  add_layernorm(ps, prefix + ".norm1", c, frozen, seed);
  add_linear(ps, prefix + ".attn.qkv", c, 3 * c, frozen, sc, seed);
  add_linear(ps, prefix + ".attn.proj", c, c, frozen, sc, seed);
  add_layernorm(ps, prefix + ".norm2", c, frozen, seed);
  add_linear(ps, prefix + ".mlp.fc1", c, 4 * c, frozen, sc, seed);
  add_linear(ps, prefix + ".mlp.fc2", 4 * c, c, frozen, sh, seed);
}

}  // namespace dapsam
