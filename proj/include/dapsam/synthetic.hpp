#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dapsam/config.hpp"
#include "dapsam/errors.hpp"
#include "dapsam/rng.hpp"
#include "dapsam/tensor.hpp"

namespace dapsam {

namespace fs = std::filesystem;

struct DomainSample {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> image;          // row-major intensities in [0,1]
  std::vector<std::uint8_t> mask;    // row-major labels in [0,K)
  std::string domain;
  std::size_t index = 0;
  std::array<double, 2> spacing{1.0, 1.0};
};

struct DomainSet {
  std::string name;
  std::vector<DomainSample> samples;
};

struct Dataset {
  std::size_t num_labels = 2;
  std::size_t image_size = 0;
  std::array<double, 2> spacing{1.0, 1.0};
  std::uint64_t seed = 0;
  std::vector<DomainSet> domains;

  const DomainSet& domain(const std::string& name) const {
    for (const auto& d : domains) {
      if (d.name == name) return d;
    }
    throw InventoryError("unknown domain: " + name);
  }
  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& d : domains) n += d.samples.size();
    return n;
  }
};

// ---- anatomy ------------------------------------------------------------------

/// Domain-independent content of one sample: clean intensities and labels.
struct Anatomy {
  std::size_t size = 0;
  std::vector<double> intensity;
  std::vector<std::uint8_t> mask;
};

namespace detail {

/// Smooth field in roughly [-1, 1] built from a few low-frequency waves.
struct SmoothField {
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves;

  SmoothField(Rng& rng, int count, double max_freq) {
    std::uniform_real_distribution<double> freq(-max_freq, max_freq);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    double total = 0.0;
    for (int i = 0; i < count; ++i) {
      Wave w{freq(rng), freq(rng), phase(rng), 1.0 / (1.0 + i)};
      total += w.amp;
      waves.push_back(w);
    }
    for (auto& w : waves) w.amp /= total;
  }

  /// u, v are normalized coordinates in [0,1].
  double operator()(double u, double v) const {
    double s = 0.0;
    for (const auto& w : waves) {
      s += w.amp * std::sin(2.0 * std::numbers::pi * (w.fy * u + w.fx * v) + w.phase);
    }
    return s;
  }
};

struct Blob {
  double cy, cx, ry, rx, angle, wobble, phase;
  int lobes;

  /// Normalized radial coordinate; the blob is where this is < 1.
  double radius(double y, double x) const {
    const double dy = y - cy;
    const double dx = x - cx;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    const double theta = std::atan2(v, u);
    return std::sqrt(u * u + v * v) / (1.0 + wobble * std::sin(lobes * theta + phase));
  }
};

inline Blob random_blob(Rng& rng, double size, double r_lo, double r_hi, double center_lo,
                        double center_hi) {
  std::uniform_real_distribution<double> center(center_lo * size, center_hi * size);
  std::uniform_real_distribution<double> radius(r_lo * size, r_hi * size);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> wobble(0.0, 0.15);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> lobes(2, 4);
  Blob b{};
  b.cy = center(rng);
  b.cx = center(rng);
  b.ry = radius(rng);
  b.rx = radius(rng);
  b.angle = angle(rng);
  b.wobble = wobble(rng);
  b.phase = phase(rng);
  b.lobes = lobes(rng);
  return b;
}

}  // namespace detail

/// Randomized smooth structures: one or two blobs (K=2), or a disc with a
/// nested cup (K=3). Depends only on `anatomy_seed`.
inline Anatomy render_anatomy(std::uint64_t anatomy_seed, std::size_t size, std::size_t num_labels) {
  Rng rng(anatomy_seed);
  Anatomy a;
  a.size = size;
  a.intensity.assign(size * size, 0.0);
  a.mask.assign(size * size, 0);
  const double s = static_cast<double>(size);
  const detail::SmoothField texture(rng, 3, 4.0);
  std::uniform_real_distribution<double> level(-0.05, 0.05);
  const double bg = 0.3 + level(rng);
  const double fg1 = 0.7 + level(rng);
  const double fg2 = 0.9 + level(rng);

  std::vector<detail::Blob> blobs;
  detail::Blob cup{};
  if (num_labels == 2) {
    blobs.push_back(detail::random_blob(rng, s, 0.12, 0.24, 0.3, 0.7));
    if (std::bernoulli_distribution(0.35)(rng)) {
      blobs.push_back(detail::random_blob(rng, s, 0.07, 0.13, 0.2, 0.8));
    }
  } else {
    detail::Blob disc = detail::random_blob(rng, s, 0.18, 0.26, 0.4, 0.6);
    disc.wobble *= 0.3;
    blobs.push_back(disc);
    std::uniform_real_distribution<double> frac(0.4, 0.7);
    cup = disc;
    cup.ry *= frac(rng);
    cup.rx *= frac(rng);
  }

  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double py = static_cast<double>(y) + 0.5;
      const double px = static_cast<double>(x) + 0.5;
      double value = bg;
      std::uint8_t label = 0;
      for (const auto& b : blobs) {
        if (b.radius(py, px) < 1.0) {
          label = 1;
          value = fg1;
        }
      }
      if (num_labels == 3 && cup.radius(py, px) < 1.0) {
        label = 2;
        value = fg2;
      }
      const std::size_t i = y * size + x;
      a.intensity[i] = value + 0.06 * texture(py / s, px / s);
      a.mask[i] = label;
    }
  }
  return a;
}

/// contrast -> gamma -> multiplicative low-frequency bias field -> additive
/// Gaussian noise -> clip to [0,1]. Masks are never touched.
inline std::vector<float> apply_domain(const Anatomy& a, const DomainSpec& d,
                                       std::uint64_t shift_seed) {
  Rng rng(shift_seed);
  const detail::SmoothField field(rng, 2, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double s = static_cast<double>(a.size);
  std::vector<float> out(a.intensity.size());
  for (std::size_t y = 0; y < a.size; ++y) {
    for (std::size_t x = 0; x < a.size; ++x) {
      const std::size_t i = y * a.size + x;
      double v = std::clamp(0.5 + d.contrast * (a.intensity[i] - 0.5), 0.0, 1.0);
      v = std::pow(v, d.gamma);
      v *= 1.0 + d.bias_amp * field((static_cast<double>(y) + 0.5) / s, (static_cast<double>(x) + 0.5) / s);
      v += d.noise_std * noise(rng);
      out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

inline std::uint64_t sample_seed(std::uint64_t seed, const std::string& domain, std::size_t index) {
  return derive_seed(seed, domain, index);
}

inline DomainSample make_sample(const SuiteConfig& cfg, const DomainSpec& d, std::uint64_t seed,
                                std::size_t index) {
  const std::uint64_t s = sample_seed(seed, d.name, index);
  const Anatomy a = render_anatomy(derive_seed(s, "anatomy"), cfg.image_size, cfg.num_labels);
  DomainSample out;
  out.h = out.w = cfg.image_size;
  out.image = apply_domain(a, d, derive_seed(s, "shift"));
  out.mask = a.mask;
  out.domain = d.name;
  out.index = index;
  out.spacing = cfg.spacing;
  return out;
}

// ---- file formats ----------------------------------------------------------------

namespace detail {

inline void put_u32(std::vector<char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::vector<char>& buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  }
  return v;
}

inline std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline constexpr std::size_t kHeaderBytes = 4 + 1 + 4 + 4;

inline std::vector<char> header(const char* magic, std::size_t h, std::size_t w) {
  std::vector<char> buf(magic, magic + 4);
  buf.push_back(1);
  put_u32(buf, static_cast<std::uint32_t>(h));
  put_u32(buf, static_cast<std::uint32_t>(w));
  return buf;
}

inline std::pair<std::size_t, std::size_t> check_header(const std::vector<char>& buf,
                                                        const char* magic, std::size_t elem,
                                                        const fs::path& p) {
  if (buf.size() < kHeaderBytes || std::memcmp(buf.data(), magic, 4) != 0) {
    throw LoadError(p.string() + ": bad header (expected magic " + std::string(magic, 4) + ")");
  }
  if (buf[4] != 1) throw LoadError(p.string() + ": unsupported version " + std::to_string(buf[4]));
  const std::size_t h = get_u32(buf, 5);
  const std::size_t w = get_u32(buf, 9);
  if (buf.size() != kHeaderBytes + h * w * elem) {
    throw LoadError(p.string() + ": truncated or oversized payload (" + std::to_string(buf.size()) +
                    " bytes for " + std::to_string(h) + "x" + std::to_string(w) + ")");
  }
  return {h, w};
}

}  // namespace detail

/// "DAPD", u8 version 1, u32 H, u32 W, then H*W little-endian float32.
inline void write_image_file(const fs::path& p, std::size_t h, std::size_t w,
                             std::span<const float> data) {
  std::vector<char> buf = detail::header("DAPD", h, w);
  for (float f : data) detail::put_u32(buf, std::bit_cast<std::uint32_t>(f));
  detail::write_file(p, buf);
}

/// "DAPM", u8 version 1, u32 H, u32 W, then H*W uint8 labels.
inline void write_mask_file(const fs::path& p, std::size_t h, std::size_t w,
                            std::span<const std::uint8_t> labels) {
  std::vector<char> buf = detail::header("DAPM", h, w);
  for (std::uint8_t v : labels) buf.push_back(static_cast<char>(v));
  detail::write_file(p, buf);
}

struct ImageFile {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> data;
};

struct MaskFile {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> labels;
};

inline ImageFile read_image_file(const fs::path& p) {
  const auto buf = detail::read_file(p);
  const auto [h, w] = detail::check_header(buf, "DAPD", 4, p);
  ImageFile out{h, w, std::vector<float>(h * w)};
  for (std::size_t i = 0; i < h * w; ++i) {
    out.data[i] = std::bit_cast<float>(detail::get_u32(buf, detail::kHeaderBytes + 4 * i));
    if (!std::isfinite(out.data[i])) throw LoadError(p.string() + ": non-finite intensity");
  }
  return out;
}

inline MaskFile read_mask_file(const fs::path& p) {
  const auto buf = detail::read_file(p);
  const auto [h, w] = detail::check_header(buf, "DAPM", 1, p);
  MaskFile out{h, w, std::vector<std::uint8_t>(h * w)};
  for (std::size_t i = 0; i < h * w; ++i) {
    out.labels[i] = static_cast<std::uint8_t>(buf[detail::kHeaderBytes + i]);
  }
  return out;
}

// ---- suite generation and loading ----------------------------------------------------

inline std::string image_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "image_%04zu.dapd", i);
  return buf;
}

inline std::string mask_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "mask_%04zu.dapm", i);
  return buf;
}

/// Writes `<out>/<domain>/{image,mask}_NNNN.*` plus `<out>/manifest.json`.
/// Refuses a non-empty `out` unless `overwrite` is set, in which case the
/// directory is cleared first.
inline void generate_domain_suite(const SuiteConfig& cfg, std::uint64_t seed, const fs::path& out,
                                  bool overwrite = false) {
  cfg.validate();
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!overwrite) {
      throw InvalidInput("output directory " + out.string() + " is not empty (use overwrite)");
    }
    fs::remove_all(out);
  }
  fs::create_directories(out);
  Json domains = Json::array();
  for (const auto& d : cfg.domains) {
    fs::create_directories(out / d.name);
    Json images = Json::array();
    Json masks = Json::array();
    for (std::size_t i = 0; i < cfg.samples_per_domain; ++i) {
      const DomainSample s = make_sample(cfg, d, seed, i);
      write_image_file(out / d.name / image_name(i), s.h, s.w, s.image);
      write_mask_file(out / d.name / mask_name(i), s.h, s.w, s.mask);
      images.push_back(d.name + "/" + image_name(i));
      masks.push_back(d.name + "/" + mask_name(i));
    }
    domains.push_back({{"name", d.name}, {"images", images}, {"masks", masks}});
  }
  const Json manifest = {{"format", "dapsam-suite"},
                         {"version", 1},
                         {"seed", seed},
                         {"num_labels", cfg.num_labels},
                         {"image_size", cfg.image_size},
                         {"spacing", {cfg.spacing[0], cfg.spacing[1]}},
                         {"config", to_json(cfg)},
                         {"domains", domains}};
  std::ofstream m(out / "manifest.json", std::ios::trunc);
  m << manifest.dump(2) << '\n';
}

inline Dataset load_dataset(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open " + manifest_path.string());
  Json m;
  try {
    m = Json::parse(in);
  } catch (const Json::exception& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (m.at("format") != "dapsam-suite") throw LoadError(manifest_path.string() + ": wrong format");
    ds.num_labels = m.at("num_labels").get<std::size_t>();
    ds.image_size = m.at("image_size").get<std::size_t>();
    ds.spacing = {m.at("spacing")[0].get<double>(), m.at("spacing")[1].get<double>()};
    ds.seed = m.at("seed").get<std::uint64_t>();
    for (const auto& d : m.at("domains")) {
      DomainSet set;
      set.name = d.at("name").get<std::string>();
      const auto& images = d.at("images");
      const auto& masks = d.at("masks");
      if (images.size() != masks.size()) {
        throw LoadError(manifest_path.string() + ": image/mask count mismatch in " + set.name);
      }
      for (std::size_t i = 0; i < images.size(); ++i) {
        const fs::path ip = root / images[i].get<std::string>();
        const fs::path mp = root / masks[i].get<std::string>();
        ImageFile img = read_image_file(ip);
        MaskFile msk = read_mask_file(mp);
        if (img.h != ds.image_size || img.w != ds.image_size) {
          throw LoadError(ip.string() + ": shape does not match manifest image_size");
        }
        if (msk.h != img.h || msk.w != img.w) {
          throw LoadError(mp.string() + ": mask shape differs from image");
        }
        for (std::uint8_t v : msk.labels) {
          if (v >= ds.num_labels) {
            throw LoadError(mp.string() + ": label " + std::to_string(v) + " outside [0, " +
                            std::to_string(ds.num_labels) + ")");
          }
        }
        DomainSample s;
        s.h = img.h;
        s.w = img.w;
        s.image = std::move(img.data);
        s.mask = std::move(msk.labels);
        s.domain = set.name;
        s.index = i;
        s.spacing = ds.spacing;
        set.samples.push_back(std::move(s));
      }
      ds.domains.push_back(std::move(set));
    }
  } catch (const Json::exception& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  return ds;
}

struct Split {
  std::vector<DomainSample> train;
  std::vector<DomainSet> tests;
};

/// Trains on one domain and tests on each other domain separately.
inline Split leave_one_out_splits(const Dataset& ds, const std::string& train_domain) {
  Split s;
  bool found = false;
  for (const auto& d : ds.domains) {
    if (d.name == train_domain) {
      s.train = d.samples;
      found = true;
    } else {
      s.tests.push_back(d);
    }
  }
  if (!found) throw InventoryError("unknown train domain: " + train_domain);
  return s;
}

/// Packs samples into an image batch (single channel) and a label batch.
inline std::pair<FeatureMap, LabelMap> make_batch(std::span<const DomainSample* const> samples) {
  const std::size_t h = samples.front()->h;
  const std::size_t w = samples.front()->w;
  FeatureMap images(samples.size(), h, w, 1);
  LabelMap labels(samples.size(), h, w);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const DomainSample& s = *samples[b];
    if (s.h != h || s.w != w) throw InvalidInput("make_batch: mixed sample sizes");
    for (std::size_t i = 0; i < h * w; ++i) {
      images.data[b * h * w + i] = static_cast<double>(s.image[i]);
      labels.labels[b * h * w + i] = s.mask[i];
    }
  }
  return {std::move(images), std::move(labels)};
}

inline std::pair<FeatureMap, LabelMap> make_batch(const DomainSample& s) {
  const DomainSample* p = &s;
  return make_batch(std::span<const DomainSample* const>(&p, 1));
}

}  // namespace dapsam
