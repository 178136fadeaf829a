#pragma once

#include <cstddef>
#include <vector>

#include "dapsam/layers.hpp"
#include "dapsam/params.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

/// Bottleneck weights of one adapter. Biases are 1 x n matrices.
struct AdapterParams {
  Mat down_weight;  // C x r
  Mat down_bias;    // 1 x r
  Mat up_weight;    // r x C
  Mat up_bias;      // 1 x C

  std::size_t rank() const { return down_weight.cols; }
  std::size_t channels() const { return down_weight.rows; }

  static AdapterParams from_store(const ParameterStore& ps, const std::string& prefix) {
    return {ps.value(prefix + ".down.weight"), ps.value(prefix + ".down.bias"),
            ps.value(prefix + ".up.weight"), ps.value(prefix + ".up.bias")};
  }
};

/// Which of the generalized stages run in front of the bottleneck. With both
/// off the adapter is the vanilla residual bottleneck.
struct AdapterOptions {
  bool fuse_low_level = true;
  bool channel_filter = true;
};

inline void add_adapter(ParameterStore& ps, const std::string& prefix, std::size_t c,
                        std::size_t r, std::uint64_t seed) {
  ps.add(prefix + ".down.weight", {c, r}, false, Init::Normal, 0.02, seed);
  ps.add(prefix + ".down.bias", {r}, false, Init::Zeros, 0.0, seed);
  ps.add(prefix + ".up.weight", {r, c}, false, Init::Zeros, 0.0, seed);
  ps.add(prefix + ".up.bias", {c}, false, Init::Zeros, 0.0, seed);
}

// ---- low-level fusion --------------------------------------------------------

inline FeatureMap fuse_low_level(const FeatureMap& f, const FeatureMap& f_low) {
  require_same_shape(f, f_low, "fuse_low_level");
  FeatureMap out = f;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += f_low.data[i];
  return out;
}

// ---- channel filter ----------------------------------------------------------

struct ChannelFilterCache {
  std::vector<double> mask;
  std::vector<std::size_t> argmax;
};

/// Per-channel gate sigmoid(mean + max) over the token grid of one sample.
/// Ties in the max resolve to the first token.
inline Mat channel_filter_sample(const Mat& x, ChannelFilterCache* cache) {
  const std::size_t t = x.rows;
  const std::size_t c = x.cols;
  std::vector<double> sum(c, 0.0);
  std::vector<double> mx(c, -INFINITY);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double v = x(i, j);
      sum[j] += v;
      if (v > mx[j]) {
        mx[j] = v;
        arg[j] = i;
      }
    }
  }
  std::vector<double> mask(c);
  for (std::size_t j = 0; j < c; ++j) mask[j] = sigmoid(sum[j] / static_cast<double>(t) + mx[j]);
  Mat out(t, c);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) * mask[j];
  }
  if (cache != nullptr) {
    cache->mask = std::move(mask);
    cache->argmax = std::move(arg);
  }
  return out;
}

inline Mat channel_filter_backward_sample(const Mat& x, const ChannelFilterCache& cache,
                                          const Mat& dy) {
  const std::size_t t = x.rows;
  const std::size_t c = x.cols;
  std::vector<double> dpre(c, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < c; ++j) dpre[j] += dy(i, j) * x(i, j);
  }
  for (std::size_t j = 0; j < c; ++j) dpre[j] *= cache.mask[j] * (1.0 - cache.mask[j]);
  Mat dx(t, c);
  const double inv_t = 1.0 / static_cast<double>(t);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      dx(i, j) = dy(i, j) * cache.mask[j] + dpre[j] * inv_t;
    }
  }
  for (std::size_t j = 0; j < c; ++j) dx(cache.argmax[j], j) += dpre[j];
  return dx;
}

/// Parameter-free channel attention; each batch entry is filtered with its
/// own pooled statistics.
inline FeatureMap channel_filter(const FeatureMap& fused) {
  if (!all_finite(fused.data)) throw NumericFailure("channel_filter: non-finite input");
  FeatureMap out = fused;
  for (std::size_t b = 0; b < fused.batch; ++b) {
    out.set_sample(b, channel_filter_sample(fused.sample(b), nullptr));
  }
  return out;
}

// ---- full adapter ------------------------------------------------------------

struct AdapterCache {
  Mat filter_input;
  ChannelFilterCache filter;
  Mat bottleneck_input;
  Mat down_pre;
  Mat act;
};

/// F' = F + up(GELU(down(filter(F + F_low)))) on one sample. `f_low` may be
/// null when low-level fusion is disabled.
inline Mat adapter_forward_sample(const Mat& f, const Mat* f_low, const AdapterParams& p,
                                  const AdapterOptions& opt, AdapterCache* cache) {
  Mat fused = f;
  if (opt.fuse_low_level) {
    if (f_low == nullptr || !f_low->same_shape(f)) {
      throw InvalidInput("adapter: low-level feature missing or mis-shaped");
    }
    add_inplace(fused, *f_low);
  }
  ChannelFilterCache fc;
  Mat filtered = opt.channel_filter ? channel_filter_sample(fused, &fc) : fused;
  Mat pre = matmul(filtered, p.down_weight, p.down_bias.data);
  Mat act(pre.rows, pre.cols);
  for (std::size_t i = 0; i < pre.size(); ++i) act.data[i] = gelu(pre.data[i]);
  Mat out = matmul(act, p.up_weight, p.up_bias.data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += f.data[i];
  if (cache != nullptr) {
    cache->filter_input = std::move(fused);
    cache->filter = std::move(fc);
    cache->bottleneck_input = std::move(filtered);
    cache->down_pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

struct AdapterGrads {
  Mat d_input;      // dL/dF
  Mat d_low_level;  // dL/dF_low (empty when fusion is disabled)
  AdapterParams d_params;
};

inline AdapterGrads adapter_backward_sample(const AdapterParams& p, const AdapterOptions& opt,
                                            const AdapterCache& cache, const Mat& dy) {
  AdapterGrads g;
  g.d_params.down_weight = Mat(p.down_weight.rows, p.down_weight.cols);
  g.d_params.down_bias = Mat(1, p.down_bias.cols);
  g.d_params.up_weight = Mat(p.up_weight.rows, p.up_weight.cols);
  g.d_params.up_bias = Mat(1, p.up_bias.cols);

  add_at_b(cache.act, dy, g.d_params.up_weight.data);
  add_colsum(dy, g.d_params.up_bias.data);
  Mat dact = matmul_bt(dy, p.up_weight);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.data[i] *= gelu_grad(cache.down_pre.data[i]);
  add_at_b(cache.bottleneck_input, dact, g.d_params.down_weight.data);
  add_colsum(dact, g.d_params.down_bias.data);
  Mat dfiltered = matmul_bt(dact, p.down_weight);
  Mat dfused = opt.channel_filter
                   ? channel_filter_backward_sample(cache.filter_input, cache.filter, dfiltered)
                   : std::move(dfiltered);
  g.d_input = dy;
  add_inplace(g.d_input, dfused);
  if (opt.fuse_low_level) g.d_low_level = std::move(dfused);
  return g;
}

inline FeatureMap adapter_forward(const FeatureMap& f, const FeatureMap& f_low,
                                  const AdapterParams& p, const AdapterOptions& opt = {}) {
  if (opt.fuse_low_level) require_same_shape(f, f_low, "adapter_forward");
  if (p.channels() != f.channels || p.up_weight.cols != f.channels) {
    throw InvalidInput("adapter_forward: parameter channel count does not match features");
  }
  FeatureMap out = f;
  for (std::size_t b = 0; b < f.batch; ++b) {
    const Mat low = opt.fuse_low_level ? f_low.sample(b) : Mat{};
    out.set_sample(b, adapter_forward_sample(f.sample(b), opt.fuse_low_level ? &low : nullptr, p,
                                             opt, nullptr));
  }
  if (!all_finite(out.data)) throw NumericFailure("adapter_forward: non-finite output");
  return out;
}

/// Accumulates adapter parameter gradients into the store.
inline void accumulate_adapter_grads(ParameterStore& ps, const std::string& prefix,
                                     const AdapterParams& d) {
  auto acc = [&](const std::string& name, const Mat& g) {
    auto dst = ps.grad(prefix + name);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.data[i];
  };
  acc(".down.weight", d.down_weight);
  acc(".down.bias", d.down_bias);
  acc(".up.weight", d.up_weight);
  acc(".up.bias", d.up_bias);
}

}  // namespace dapsam
