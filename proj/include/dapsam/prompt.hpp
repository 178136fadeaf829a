#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dapsam/errors.hpp"
#include "dapsam/params.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

struct Prototype {
  std::vector<double> v;
  std::size_t size() const { return v.size(); }
};

/// N x C matrix of learnable prototypes.
struct MemoryBank {
  Mat m;
  std::size_t size() const { return m.rows; }
  std::size_t channels() const { return m.cols; }
};

/// batch x h x w cosine similarities between the adapted prototype and the
/// embedding at every token.
struct ActivationMap {
  std::size_t batch = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> a;
};

struct PromptParams {
  Mat conv_weight;  // (2C+1) x C
  Mat conv_bias;    // 1 x C
};

/// Norm floor used by the training path; the strict API refuses zero norms.
inline constexpr double kCosineNormFloor = 1e-12;

enum class Similarity { Strict, Guarded };

inline void add_prompt_generator(ParameterStore& ps, std::size_t c, std::size_t bank_size,
                                 std::uint64_t seed) {
  ps.add("prompt.bank", {bank_size, c}, false, Init::Normal,
         1.0 / std::sqrt(static_cast<double>(c)), seed);
  ps.add("prompt.conv.weight", {2 * c + 1, c}, false, Init::Normal,
         1.0 / std::sqrt(static_cast<double>(2 * c + 1)), seed);
  ps.add("prompt.conv.bias", {c}, false, Init::Zeros, 0.0, seed);
}

namespace detail {

inline double checked_norm(std::span<const double> v, Similarity mode, const char* what) {
  const double n = norm(v);
  if (mode == Similarity::Strict) {
    if (!(n > 0.0)) throw DegenerateSimilarity(std::string(what) + " has zero norm");
    return n;
  }
  return std::max(n, kCosineNormFloor);
}

}  // namespace detail

// ---- prototype extraction ---------------------------------------------------

/// GAP + GMP over the token grid of one (tokens x C) sample. `argmax` receives
/// the first token attaining each channel's maximum.
inline std::vector<double> pool_prototype(const Mat& e, std::vector<std::size_t>* argmax) {
  std::vector<double> sum(e.cols, 0.0);
  std::vector<double> mx(e.cols, -INFINITY);
  std::vector<std::size_t> arg(e.cols, 0);
  for (std::size_t t = 0; t < e.rows; ++t) {
    for (std::size_t c = 0; c < e.cols; ++c) {
      const double v = e(t, c);
      sum[c] += v;
      if (v > mx[c]) {
        mx[c] = v;
        arg[c] = t;
      }
    }
  }
  for (std::size_t c = 0; c < e.cols; ++c) sum[c] = sum[c] / static_cast<double>(e.rows) + mx[c];
  if (argmax != nullptr) *argmax = std::move(arg);
  return sum;
}

inline std::vector<Prototype> extract_prototype(const FeatureMap& e) {
  std::vector<Prototype> out;
  out.reserve(e.batch);
  for (std::size_t b = 0; b < e.batch; ++b) out.push_back({pool_prototype(e.sample(b), nullptr)});
  return out;
}

// ---- memory addressing ------------------------------------------------------

inline void check_bank(const MemoryBank& bank, std::size_t channels) {
  if (bank.size() == 0) throw InventoryError("memory bank is empty");
  if (bank.channels() != channels) {
    throw InvalidInput("memory bank has " + std::to_string(bank.channels()) +
                       " channels, prototype has " + std::to_string(channels));
  }
}

/// Bank row indices sorted by row content. Summing in this order makes the
/// results below exactly invariant to row permutations.
inline std::vector<std::size_t> canonical_rows(const MemoryBank& bank) {
  std::vector<std::size_t> order(bank.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ra = bank.m.row(a), rb = bank.m.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  return order;
}

/// Softmax over cosine similarities between `p` and every bank row.
inline std::vector<double> memory_weights(const Prototype& p, const MemoryBank& bank,
                                          Similarity mode = Similarity::Strict) {
  check_bank(bank, p.size());
  const double np = detail::checked_norm(p.v, mode, "prototype");
  std::vector<double> w(bank.size());
  double mx = -INFINITY;
  for (std::size_t j = 0; j < bank.size(); ++j) {
    const auto row = bank.m.row(j);
    const double nm = detail::checked_norm(row, mode, "memory bank row");
    w[j] = dot(p.v, row) / (np * nm);
    mx = std::max(mx, w[j]);
  }
  for (double& x : w) x = std::exp(x - mx);
  double z = 0.0;
  for (std::size_t j : canonical_rows(bank)) z += w[j];
  for (double& x : w) x /= z;
  return w;
}

/// Convex combination of bank rows weighted by `memory_weights`.
inline Prototype adapt_prototype(const Prototype& p, const MemoryBank& bank,
                                 Similarity mode = Similarity::Strict) {
  const std::vector<double> w = memory_weights(p, bank, mode);
  Prototype out{std::vector<double>(bank.channels(), 0.0)};
  for (std::size_t j : canonical_rows(bank)) {
    const auto row = bank.m.row(j);
    for (std::size_t c = 0; c < out.size(); ++c) out.v[c] += w[j] * row[c];
  }
  return out;
}

// ---- activation map and prompt --------------------------------------------------

/// Per-token cosine similarity between the broadcast prototype and `e`.
/// Zero-norm embedding vectors yield 0 in guarded mode and throw in strict mode.
inline ActivationMap activation_map(const std::vector<Prototype>& p_hat, const FeatureMap& e,
                                    Similarity mode = Similarity::Strict) {
  if (p_hat.size() != e.batch) throw InvalidInput("activation_map: one prototype per batch entry");
  ActivationMap out{e.batch, e.h, e.w, std::vector<double>(e.batch * e.tokens())};
  for (std::size_t b = 0; b < e.batch; ++b) {
    if (p_hat[b].size() != e.channels) throw InvalidInput("activation_map: channel mismatch");
    const double np = detail::checked_norm(p_hat[b].v, mode, "adapted prototype");
    const Mat s = e.sample(b);
    for (std::size_t t = 0; t < e.tokens(); ++t) {
      const auto row = s.row(t);
      const double ne = norm(row);
      double a = 0.0;
      if (ne > 0.0 || mode == Similarity::Guarded) {
        a = dot(p_hat[b].v, row) / (np * std::max(ne, kCosineNormFloor));
      } else {
        throw DegenerateSimilarity("activation_map: zero embedding vector at token " +
                                   std::to_string(t));
      }
      out.a[b * e.tokens() + t] = a;
    }
  }
  return out;
}

inline ActivationMap activation_map(const Prototype& p_hat, const FeatureMap& e,
                                    Similarity mode = Similarity::Strict) {
  return activation_map(std::vector<Prototype>(e.batch, p_hat), e, mode);
}

/// 1x1 convolution over the channel concatenation [p_hat, A, e] (2C+1 -> C).
inline FeatureMap generate_prompt(const std::vector<Prototype>& p_hat, const ActivationMap& a,
                                  const FeatureMap& e, const PromptParams& params) {
  const std::size_t c = e.channels;
  if (p_hat.size() != e.batch || a.batch != e.batch || a.h != e.h || a.w != e.w) {
    throw InvalidInput("generate_prompt: batch or grid mismatch between inputs");
  }
  if (params.conv_weight.rows != 2 * c + 1 || params.conv_bias.cols != params.conv_weight.cols) {
    throw InvalidInput("generate_prompt: convolution expects " + std::to_string(2 * c + 1) +
                       " input channels, has " + std::to_string(params.conv_weight.rows));
  }
  FeatureMap out(e.batch, e.h, e.w, params.conv_weight.cols);
  for (std::size_t b = 0; b < e.batch; ++b) {
    if (p_hat[b].size() != c) throw InvalidInput("generate_prompt: prototype channel mismatch");
    Mat z(e.tokens(), 2 * c + 1);
    const Mat s = e.sample(b);
    for (std::size_t t = 0; t < e.tokens(); ++t) {
      std::copy(p_hat[b].v.begin(), p_hat[b].v.end(), z.row(t).begin());
      z(t, c) = a.a[b * e.tokens() + t];
      std::copy(s.row(t).begin(), s.row(t).end(), z.row(t).begin() + static_cast<std::ptrdiff_t>(c + 1));
    }
    out.set_sample(b, matmul(z, params.conv_weight, params.conv_bias.data));
  }
  return out;
}

// ---- fused training path with backward -------------------------------------------

struct PromptCache {
  std::vector<double> p;
  std::vector<std::size_t> argmax;
  double p_norm = 0.0;
  bool p_clamped = false;
  std::vector<double> bank_norms;
  std::vector<char> bank_clamped;
  std::vector<double> cos;
  std::vector<double> w;
  std::vector<double> p_hat;
  double p_hat_norm = 0.0;
  bool p_hat_clamped = false;
  std::vector<double> e_norms;
  std::vector<char> e_clamped;
  std::vector<double> a;
  Mat z;
};

inline double floored_norm(std::span<const double> v, bool* clamped) {
  const double n = norm(v);
  *clamped = !(n > kCosineNormFloor);
  return std::max(n, kCosineNormFloor);
}

/// Guarded prompt generation for one (tokens x C) embedding, reading the bank
/// and convolution from the store.
inline Mat prompt_forward_sample(const ParameterStore& ps, const Mat& e, PromptCache* cache) {
  const Mat& bank = ps.value("prompt.bank");
  const std::size_t c = e.cols;
  const std::size_t n = bank.rows;
  PromptCache local;
  PromptCache& k = cache != nullptr ? *cache : local;

  k.p = pool_prototype(e, &k.argmax);
  bool clamped = false;
  k.p_norm = floored_norm(k.p, &clamped);
  k.p_clamped = clamped;
  k.bank_norms.resize(n);
  k.bank_clamped.resize(n);
  k.cos.resize(n);
  k.w.resize(n);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) {
    k.bank_norms[j] = floored_norm(bank.row(j), &clamped);
    k.bank_clamped[j] = clamped;
    k.cos[j] = dot(k.p, bank.row(j)) / (k.p_norm * k.bank_norms[j]);
    mx = std::max(mx, k.cos[j]);
  }
  double zsum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    k.w[j] = std::exp(k.cos[j] - mx);
    zsum += k.w[j];
  }
  k.p_hat.assign(c, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    k.w[j] /= zsum;
    const auto row = bank.row(j);
    for (std::size_t i = 0; i < c; ++i) k.p_hat[i] += k.w[j] * row[i];
  }
  k.p_hat_norm = floored_norm(k.p_hat, &clamped);
  k.p_hat_clamped = clamped;

  k.e_norms.resize(e.rows);
  k.e_clamped.resize(e.rows);
  k.a.resize(e.rows);
  k.z = Mat(e.rows, 2 * c + 1);
  for (std::size_t t = 0; t < e.rows; ++t) {
    k.e_norms[t] = floored_norm(e.row(t), &clamped);
    k.e_clamped[t] = clamped;
    k.a[t] = dot(k.p_hat, e.row(t)) / (k.p_hat_norm * k.e_norms[t]);
    auto zr = k.z.row(t);
    std::copy(k.p_hat.begin(), k.p_hat.end(), zr.begin());
    zr[c] = k.a[t];
    std::copy(e.row(t).begin(), e.row(t).end(), zr.begin() + static_cast<std::ptrdiff_t>(c + 1));
  }
  return matmul(k.z, ps.value("prompt.conv.weight"), ps.value("prompt.conv.bias").data);
}

/// Backward of `prompt_forward_sample`; accumulates bank/convolution gradients
/// and returns dL/de.
inline Mat prompt_backward_sample(ParameterStore& ps, const PromptCache& k, const Mat& e,
                                  const Mat& d_prompt) {
  const Mat& bank = ps.value("prompt.bank");
  const std::size_t c = e.cols;
  const std::size_t n = bank.rows;
  const std::size_t t_count = e.rows;

  if (auto g = ps.grad("prompt.conv.weight"); !g.empty()) add_at_b(k.z, d_prompt, g);
  if (auto g = ps.grad("prompt.conv.bias"); !g.empty()) add_colsum(d_prompt, g);
  const Mat dz = matmul_bt(d_prompt, ps.value("prompt.conv.weight"));

  Mat de(t_count, c);
  std::vector<double> dp_hat(c, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t i = 0; i < c; ++i) {
      dp_hat[i] += dz(t, i);
      de(t, i) = dz(t, c + 1 + i);
    }
    // A_t = <p_hat, e_t> / (|p_hat| |e_t|)
    const double da = dz(t, c);
    if (da == 0.0) continue;
    const double inv = 1.0 / (k.p_hat_norm * k.e_norms[t]);
    const double a = k.a[t];
    const double ph2 = k.p_hat_norm * k.p_hat_norm;
    const double e2 = k.e_norms[t] * k.e_norms[t];
    for (std::size_t i = 0; i < c; ++i) {
      const double ei = e(t, i);
      const double pi = k.p_hat[i];
      dp_hat[i] += da * (ei * inv - (k.p_hat_clamped ? 0.0 : a * pi / ph2));
      de(t, i) += da * (pi * inv - (k.e_clamped[t] ? 0.0 : a * ei / e2));
    }
  }

  // p_hat = sum_j w_j m_j
  auto g_bank = ps.grad("prompt.bank");
  std::vector<double> dw(n);
  double wdw = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = bank.row(j);
    dw[j] = dot(row, dp_hat);
    wdw += k.w[j] * dw[j];
    if (!g_bank.empty()) {
      for (std::size_t i = 0; i < c; ++i) g_bank[j * c + i] += k.w[j] * dp_hat[i];
    }
  }
  // softmax, then cos_j = <p, m_j> / (|p| |m_j|)
  std::vector<double> dp(c, 0.0);
  const double p2 = k.p_norm * k.p_norm;
  for (std::size_t j = 0; j < n; ++j) {
    const double dcos = k.w[j] * (dw[j] - wdw);
    if (dcos == 0.0) continue;
    const auto row = bank.row(j);
    const double inv = 1.0 / (k.p_norm * k.bank_norms[j]);
    const double m2 = k.bank_norms[j] * k.bank_norms[j];
    for (std::size_t i = 0; i < c; ++i) {
      dp[i] += dcos * (row[i] * inv - (k.p_clamped ? 0.0 : k.cos[j] * k.p[i] / p2));
      if (!g_bank.empty()) {
        g_bank[j * c + i] += dcos * (k.p[i] * inv - (k.bank_clamped[j] ? 0.0 : k.cos[j] * row[i] / m2));
      }
    }
  }
  // p = mean_t e + max_t e
  const double inv_t = 1.0 / static_cast<double>(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t i = 0; i < c; ++i) de(t, i) += dp[i] * inv_t;
  }
  for (std::size_t i = 0; i < c; ++i) de(k.argmax[i], i) += dp[i];
  return de;
}

// ---- prototype export ------------------------------------------------------------

struct PrototypeRow {
  std::string kind;  // bank | raw | adapted
  std::size_t index = 0;
  std::vector<double> values;
};

/// Rows for an external dimensionality-reduction tool: every bank prototype,
/// then the raw and adapted prototype of each embedding.
inline std::vector<PrototypeRow> export_prototypes(const MemoryBank& bank,
                                                   const std::vector<FeatureMap>& embeddings = {}) {
  if (bank.size() == 0) throw InventoryError("export_prototypes: memory bank is empty");
  std::vector<PrototypeRow> rows;
  for (std::size_t j = 0; j < bank.size(); ++j) {
    const auto r = bank.m.row(j);
    rows.push_back({"bank", j, {r.begin(), r.end()}});
  }
  std::vector<Prototype> raw;
  for (const auto& e : embeddings) {
    for (auto& p : extract_prototype(e)) raw.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < raw.size(); ++i) rows.push_back({"raw", i, raw[i].v});
  for (std::size_t i = 0; i < raw.size(); ++i) {
    rows.push_back({"adapted", i, adapt_prototype(raw[i], bank, Similarity::Guarded).v});
  }
  return rows;
}

inline void write_prototype_csv(const std::vector<PrototypeRow>& rows, std::ostream& out) {
  if (rows.empty()) throw InventoryError("write_prototype_csv: no rows");
  const std::size_t c = rows.front().values.size();
  out << "kind,index";
  for (std::size_t i = 0; i < c; ++i) out << ",c" << i;
  out << '\n';
  char buf[64];
  for (const auto& r : rows) {
    out << r.kind << ',' << r.index;
    for (double v : r.values) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline std::vector<PrototypeRow> read_prototype_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("kind,index")) {
    throw LoadError("prototype csv: missing header");
  }
  std::vector<PrototypeRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    PrototypeRow r;
    std::getline(ss, r.kind, ',');
    std::getline(ss, cell, ',');
    r.index = std::stoul(cell);
    while (std::getline(ss, cell, ',')) r.values.push_back(std::stod(cell));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dapsam
