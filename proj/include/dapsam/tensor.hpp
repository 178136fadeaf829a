#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dapsam/errors.hpp"

namespace dapsam {

/// Dense row-major matrix of doubles. Token grids are stored as
/// (tokens x channels) matrices inside the model.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  friend bool operator==(const Mat&, const Mat&) = default;
};

/// batch x h x w x channels activations on the token grid.
struct FeatureMap {
  std::size_t batch = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t b, std::size_t hh, std::size_t ww, std::size_t c, double fill = 0.0)
      : batch(b), h(hh), w(ww), channels(c), data(b * hh * ww * c, fill) {}

  std::size_t tokens() const { return h * w; }
  std::size_t sample_size() const { return h * w * channels; }

  double& at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
    return data[((b * h + y) * w + x) * channels + c];
  }
  double at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) const {
    return data[((b * h + y) * w + x) * channels + c];
  }

  bool same_shape(const FeatureMap& o) const {
    return batch == o.batch && h == o.h && w == o.w && channels == o.channels;
  }

  /// Copies batch entry `b` out as a (tokens x channels) matrix.
  Mat sample(std::size_t b) const {
    Mat m(tokens(), channels);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(b * sample_size()), sample_size(),
                m.data.begin());
    return m;
  }

  void set_sample(std::size_t b, const Mat& m) {
    std::copy(m.data.begin(), m.data.end(),
              data.begin() + static_cast<std::ptrdiff_t>(b * sample_size()));
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// batch x H x W integer labels.
struct LabelMap {
  std::size_t batch = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t b, std::size_t hh, std::size_t ww, std::uint8_t fill = 0)
      : batch(b), h(hh), w(ww), labels(b * hh * ww, fill) {}

  std::uint8_t& at(std::size_t b, std::size_t y, std::size_t x) { return labels[(b * h + y) * w + x]; }
  std::uint8_t at(std::size_t b, std::size_t y, std::size_t x) const {
    return labels[(b * h + y) * w + x];
  }
  std::size_t pixels() const { return h * w; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline std::string shape_string(const FeatureMap& f) {
  return std::to_string(f.batch) + "x" + std::to_string(f.h) + "x" + std::to_string(f.w) + "x" +
         std::to_string(f.channels);
}

inline void require_same_shape(const FeatureMap& a, const FeatureMap& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InvalidInput(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                       shape_string(b));
  }
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---- dense kernels -------------------------------------------------------

/// out = x * w (+ bias), with x (n x k), w (k x m).
inline Mat matmul(const Mat& x, const Mat& w, std::span<const double> bias = {}) {
  Mat out(x.rows, w.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    if (!bias.empty()) std::copy(bias.begin(), bias.end(), o);
    const double* xi = x.data.data() + i * x.cols;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double a = xi[k];
      const double* wk = w.data.data() + k * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) o[j] += a * wk[j];
    }
  }
  return out;
}

/// acc += a^T * b, with a (n x k), b (n x m), acc (k x m).
inline void add_at_b(const Mat& a, const Mat& b, std::span<double> acc) {
  for (std::size_t n = 0; n < a.rows; ++n) {
    const double* an = a.data.data() + n * a.cols;
    const double* bn = b.data.data() + n * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double s = an[k];
      if (s == 0.0) continue;
      double* row = acc.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) row[j] += s * bn[j];
    }
  }
}

/// out = a * b^T, with a (n x k), b (m x k).
inline Mat matmul_bt(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* bj = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      out(i, j) = s;
    }
  }
  return out;
}

inline void add_colsum(const Mat& g, std::span<double> acc) {
  for (std::size_t i = 0; i < g.rows; ++i) {
    const double* gi = g.data.data() + i * g.cols;
    for (std::size_t j = 0; j < g.cols; ++j) acc[j] += gi[j];
  }
}

inline void add_inplace(Mat& a, const Mat& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  add_inplace(out, b);
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace dapsam
