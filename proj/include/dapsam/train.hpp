#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dapsam/checkpoint.hpp"
#include "dapsam/config.hpp"
#include "dapsam/model.hpp"
#include "dapsam/optim.hpp"
#include "dapsam/synthetic.hpp"

namespace dapsam {

/// Six significant digits, as used for logs and ablation tables.
inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Round-trip precision, used for evaluation metrics.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline LossConfig loss_config(const TrainConfig& t) { return {t.lambda, t.dice_epsilon}; }

/// Deterministic hold-out of `val_fraction` of the source domain.
struct SourceSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline SourceSplit source_split(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_val = 0;
  if (val_fraction > 0.0 && n > 1) {
    n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(val_fraction * n)), 1, n - 1);
  }
  SourceSplit s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

/// Mean over foreground labels of DSC for one predicted slice.
inline double mean_foreground_dsc(const LabelMap& pred, const LabelMap& gt, std::size_t num_labels) {
  double s = 0.0;
  for (std::size_t l = 1; l < num_labels; ++l) s += dsc(pred, gt, static_cast<std::uint8_t>(l));
  return s / static_cast<double>(num_labels - 1);
}

inline std::vector<LabelMap> predict_samples(const ParameterStore& ps, const ModelSpec& spec,
                                             const std::vector<const DomainSample*>& samples,
                                             std::size_t batch_size = 8) {
  std::vector<LabelMap> out;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - i);
    const auto [images, _] = make_batch(std::span<const DomainSample* const>(samples.data() + i, n));
    const LabelMap pred = predict(ps, spec, images);
    for (std::size_t b = 0; b < n; ++b) {
      LabelMap one(1, pred.h, pred.w);
      std::copy_n(pred.labels.begin() + static_cast<std::ptrdiff_t>(b * pred.pixels()), pred.pixels(),
                  one.labels.begin());
      out.push_back(std::move(one));
    }
  }
  return out;
}

struct EpochStats {
  double loss = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  double lr = 0.0;
};

/// Step-level training state. All randomness comes from the config seed:
/// parameter init, the source split and the data order.
class Trainer {
 public:
  Trainer(Config cfg, const Dataset& ds)
      : cfg_(std::move(cfg)), spec_(ModelSpec::from(cfg_)), ps_(build_parameters(spec_)),
        opt_(AdamWConfig{0.9, 0.999, 1e-8, cfg_.train.weight_decay}),
        order_rng_(derive_seed(cfg_.train.seed, "order")) {
    cfg_.validate();
    if (ds.num_labels != cfg_.encoder.num_labels) {
      throw InvalidInput("dataset has " + std::to_string(ds.num_labels) + " labels, model expects " +
                         std::to_string(cfg_.encoder.num_labels));
    }
    const DomainSet& src = ds.domain(cfg_.train.train_domain);
    const SourceSplit split = source_split(src.samples.size(), cfg_.train.val_fraction, cfg_.train.seed);
    for (std::size_t i : split.train) train_.push_back(&src.samples[i]);
    for (std::size_t i : split.val) val_.push_back(&src.samples[i]);
    if (train_.empty()) throw InvalidInput("training split is empty");
  }

  const Config& config() const { return cfg_; }
  const ModelSpec& spec() const { return spec_; }
  ParameterStore& params() { return ps_; }
  const ParameterStore& params() const { return ps_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  double best_val_dsc() const { return best_; }
  const std::vector<TrainLogRow>& log() const { return log_; }
  std::size_t train_size() const { return train_.size(); }
  std::size_t val_size() const { return val_.size(); }

  std::size_t steps_per_epoch() const {
    return (train_.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
  }
  std::size_t total_steps() const { return cfg_.train.max_epochs * steps_per_epoch(); }
  bool finished() const { return epoch_ >= cfg_.train.stop_epoch; }

  /// One optimizer step on the given samples. Aborts on a non-finite loss.
  LossValue train_step(std::span<const DomainSample* const> batch) {
    const auto [images, labels] = make_batch(batch);
    ps_.zero_grad();
    LossValue v;
    try {
      v = loss_and_grad(ps_, spec_, images, labels, loss_config(cfg_.train));
    } catch (const NumericFailure& e) {
      throw NumericFailure("epoch " + std::to_string(epoch_) + ", step " + std::to_string(step_) +
                           ": " + e.what());
    }
    if (!std::isfinite(v.total)) {
      throw NumericFailure("non-finite loss at epoch " + std::to_string(epoch_) + ", step " +
                           std::to_string(step_) + ": total=" + fmt6(v.total) + " ce=" + fmt6(v.ce) +
                           " dice=" + fmt6(v.dice));
    }
    last_lr_ = warmup_lr(step_, cfg_.train.base_lr, cfg_.train.warmup_steps, total_steps());
    opt_.step(ps_, last_lr_);
    ++step_;
    return v;
  }

  EpochStats run_epoch() {
    std::vector<const DomainSample*> order = train_;
    std::shuffle(order.begin(), order.end(), order_rng_);
    EpochStats s;
    std::size_t n = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg_.train.batch_size) {
      const std::size_t len = std::min(cfg_.train.batch_size, order.size() - i);
      const LossValue v = train_step(std::span<const DomainSample* const>(order.data() + i, len));
      s.loss += v.total;
      s.ce += v.ce;
      s.dice += v.dice;
      ++n;
    }
    s.loss /= static_cast<double>(n);
    s.ce /= static_cast<double>(n);
    s.dice /= static_cast<double>(n);
    s.lr = last_lr_;
    ++epoch_;
    return s;
  }

  /// Mean foreground DSC on the held-out source samples (0 if none).
  double validate() const {
    if (val_.empty()) return 0.0;
    const auto preds = predict_samples(ps_, spec_, val_, cfg_.train.batch_size);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto [_, gt] = make_batch(*val_[i]);
      s += mean_foreground_dsc(preds[i], gt, cfg_.encoder.num_labels);
    }
    return s / static_cast<double>(preds.size());
  }

  /// Runs one epoch, validates and appends a log row. Returns true if the
  /// validation DSC improved on the best so far.
  bool advance() {
    const EpochStats s = run_epoch();
    const double v = validate();
    log_.push_back({epoch_, step_, s.loss, s.ce, s.dice, s.lr, v});
    if (v > best_) {
      best_ = v;
      return true;
    }
    return false;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = cfg_;
    ck.params = ps_;
    ck.adam_steps = opt_.steps();
    ck.slots = opt_.slots();
    ck.epoch = epoch_;
    ck.step = step_;
    ck.best_val_dsc = best_;
    std::ostringstream rng;
    rng << order_rng_;
    ck.rng_state = rng.str();
    ck.log = log_;
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (to_json(ck.config) != to_json(cfg_)) throw InvalidInput("checkpoint config differs from trainer config");
    load_parameters(ps_, ck.params);
    opt_.restore(ck.adam_steps, ck.slots);
    epoch_ = ck.epoch;
    step_ = ck.step;
    best_ = ck.best_val_dsc;
    std::istringstream rng(ck.rng_state);
    rng >> order_rng_;
    if (rng.fail()) throw CorruptCheckpoint("checkpoint: unreadable rng_state");
    log_ = ck.log;
    last_lr_ = log_.empty() ? 0.0 : log_.back().lr;
  }

 private:
  Config cfg_;
  ModelSpec spec_;
  ParameterStore ps_;
  AdamW opt_;
  Rng order_rng_;
  std::vector<const DomainSample*> train_;
  std::vector<const DomainSample*> val_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  double best_ = -1.0;
  double last_lr_ = 0.0;
  std::vector<TrainLogRow> log_;
};

inline constexpr const char* kTrainLogHeader = "epoch,steps,loss,ce,dice,lr,val_dsc";

inline void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << kTrainLogHeader << '\n';
  for (const auto& r : log) {
    out << r.epoch << ',' << r.steps << ',' << fmt6(r.loss) << ',' << fmt6(r.ce) << ','
        << fmt6(r.dice) << ',' << fmt6(r.lr) << ',' << fmt6(r.val_dsc) << '\n';
  }
}

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::size_t checkpoint_every = 0;  // also write epoch_NNNN.ckpt every k epochs (0 = off)
  bool quiet = true;
};

struct TrainResult {
  Checkpoint final_state;
  std::vector<TrainLogRow> log;
  double best_val_dsc = -1.0;
  std::filesystem::path final_path;
  std::filesystem::path best_path;
};

/// Trains to `stop_epoch`, writing `train_log.csv` after every epoch,
/// `best.ckpt` on each validation improvement and `final.ckpt` at the end.
/// With `opts.resume`, the config comes from the checkpoint.
inline TrainResult train(const Config& cfg, const Dataset& ds, const std::filesystem::path& out,
                         const TrainOptions& opts = {}) {
  std::optional<Checkpoint> resumed;
  if (opts.resume) resumed = load_checkpoint(*opts.resume);
  Trainer t(resumed ? resumed->config : cfg, ds);
  if (resumed) t.restore(*resumed);
  std::filesystem::create_directories(out);
  TrainResult r;
  r.best_path = out / "best.ckpt";
  r.final_path = out / "final.ckpt";
  while (!t.finished()) {
    const bool improved = t.advance();
    write_train_log(out / "train_log.csv", t.log());
    if (improved) save_checkpoint(r.best_path, t.checkpoint());
    if (opts.checkpoint_every > 0 && t.epoch() % opts.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", t.epoch());
      save_checkpoint(out / name, t.checkpoint());
    }
    if (!opts.quiet) {
      const auto& row = t.log().back();
      std::fprintf(stderr, "epoch %zu loss %s val_dsc %s lr %s\n", row.epoch, fmt6(row.loss).c_str(),
                   fmt6(row.val_dsc).c_str(), fmt6(row.lr).c_str());
    }
  }
  write_train_log(out / "train_log.csv", t.log());
  r.final_state = t.checkpoint();
  save_checkpoint(r.final_path, r.final_state);
  r.log = t.log();
  r.best_val_dsc = t.best_val_dsc();
  return r;
}

inline TrainResult train(const Config& cfg, const std::filesystem::path& data,
                         const std::filesystem::path& out, const TrainOptions& opts = {}) {
  return train(cfg, load_dataset(data), out, opts);
}

// ---- evaluation ------------------------------------------------------------------

struct SampleMetric {
  std::string domain;
  std::string split;  // source | target
  std::size_t index = 0;
  std::size_t label = 0;
  double dsc = 0.0;
  std::optional<double> asd;
};

struct EvalReport {
  std::string train_domain;
  std::size_t num_labels = 2;
  std::vector<std::string> test_domains;
  std::vector<SampleMetric> samples;
  // domain -> label -> mean; label index 0 holds the mean over foreground labels.
  std::map<std::string, std::vector<double>> dsc_mean;
  std::map<std::string, std::vector<std::optional<double>>> asd_mean;
  std::vector<double> dsc_average;
  std::vector<std::optional<double>> asd_average;

  double average_dsc() const { return dsc_average.at(0); }
};

namespace detail {

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& x : v) {
    if (x) {
      s += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

inline std::string opt_str(const std::optional<double>& v) { return v ? fmt17(*v) : "NA"; }

}  // namespace detail

/// Per-sample, per-label DSC/ASD on every domain. Domain means are
/// unweighted over samples; the average is the unweighted mean of the
/// target-domain means. ASD means skip undefined (empty-mask) samples.
inline EvalReport evaluate(const ParameterStore& ps, const ModelSpec& spec, const Dataset& ds,
                           const std::string& train_domain) {
  ds.domain(train_domain);  // missing domain -> InventoryError
  const std::size_t k = spec.encoder.num_labels;
  if (ds.num_labels != k) throw InvalidInput("dataset label count differs from the model");
  EvalReport r;
  r.train_domain = train_domain;
  r.num_labels = k;
  for (const auto& d : ds.domains) {
    std::vector<const DomainSample*> ptrs;
    for (const auto& s : d.samples) ptrs.push_back(&s);
    const auto preds = predict_samples(ps, spec, ptrs);
    const std::string split = d.name == train_domain ? "source" : "target";
    if (split == "target") r.test_domains.push_back(d.name);
    std::vector<std::vector<double>> dscs(k);
    std::vector<std::vector<std::optional<double>>> asds(k);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto [_, gt] = make_batch(d.samples[i]);
      for (std::size_t l = 1; l < k; ++l) {
        const auto lab = static_cast<std::uint8_t>(l);
        SampleMetric m{d.name, split, d.samples[i].index, l, dsc(preds[i], gt, lab),
                       asd(preds[i], gt, lab, d.samples[i].spacing)};
        dscs[l].push_back(m.dsc);
        asds[l].push_back(m.asd);
        r.samples.push_back(std::move(m));
      }
    }
    std::vector<double> dm(k, 0.0);
    std::vector<std::optional<double>> am(k);
    std::vector<std::optional<double>> label_asd;
    for (std::size_t l = 1; l < k; ++l) {
      dm[l] = std::accumulate(dscs[l].begin(), dscs[l].end(), 0.0) / static_cast<double>(dscs[l].size());
      am[l] = detail::mean_defined(asds[l]);
      dm[0] += dm[l] / static_cast<double>(k - 1);
      label_asd.push_back(am[l]);
    }
    am[0] = detail::mean_defined(label_asd);
    r.dsc_mean[d.name] = dm;
    r.asd_mean[d.name] = am;
  }
  if (r.test_domains.empty()) throw InventoryError("no target domains besides " + train_domain);
  r.dsc_average.assign(k, 0.0);
  r.asd_average.assign(k, std::nullopt);
  for (std::size_t l = 0; l < k; ++l) {
    std::vector<std::optional<double>> per_domain;
    for (const auto& d : r.test_domains) {
      r.dsc_average[l] += r.dsc_mean[d][l] / static_cast<double>(r.test_domains.size());
      per_domain.push_back(r.asd_mean[d][l]);
    }
    r.asd_average[l] = detail::mean_defined(per_domain);
  }
  return r;
}

inline std::filesystem::path samples_path(const std::filesystem::path& report) {
  return report.parent_path() / (report.stem().string() + "_samples.csv");
}

/// Summary table: `metric,label,<target domains...>,Average,Intra` where
/// label "mean" is the mean over foreground labels and Intra is the source
/// domain itself. Per-sample rows go to `<stem>_samples.csv`.
inline void write_report(const EvalReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "metric,label";
  for (const auto& d : r.test_domains) out << ',' << d;
  out << ",Average,Intra\n";
  auto label_name = [](std::size_t l) { return l == 0 ? std::string("mean") : std::to_string(l); };
  std::vector<std::size_t> labels;
  for (std::size_t l = 1; l < r.num_labels; ++l) labels.push_back(l);
  labels.push_back(0);
  for (std::size_t l : labels) {
    out << "dsc," << label_name(l);
    for (const auto& d : r.test_domains) out << ',' << fmt17(r.dsc_mean.at(d)[l]);
    out << ',' << fmt17(r.dsc_average[l]) << ',' << fmt17(r.dsc_mean.at(r.train_domain)[l]) << '\n';
  }
  for (std::size_t l : labels) {
    out << "asd," << label_name(l);
    for (const auto& d : r.test_domains) out << ',' << detail::opt_str(r.asd_mean.at(d)[l]);
    out << ',' << detail::opt_str(r.asd_average[l]) << ','
        << detail::opt_str(r.asd_mean.at(r.train_domain)[l]) << '\n';
  }

  std::ofstream s(samples_path(path), std::ios::trunc);
  if (!s) throw LoadError("cannot write " + samples_path(path).string());
  s << "domain,split,index,label,dsc,asd\n";
  for (const auto& m : r.samples) {
    s << m.domain << ',' << m.split << ',' << m.index << ',' << m.label << ',' << fmt17(m.dsc) << ','
      << detail::opt_str(m.asd) << '\n';
  }
}

/// Loads a checkpoint and evaluates it leave-one-domain-out. The source
/// domain defaults to the one recorded in the checkpoint config.
inline EvalReport evaluate(const std::filesystem::path& ckpt, const std::filesystem::path& data,
                           const std::filesystem::path& report,
                           const std::optional<std::string>& train_domain = {}) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const ModelSpec spec = ModelSpec::from(ck.config);
  ParameterStore ps = build_parameters(spec);
  load_parameters(ps, ck.params);
  const EvalReport r = evaluate(ps, spec, load_dataset(data), train_domain.value_or(ck.config.train.train_domain));
  write_report(r, report);
  return r;
}

// ---- ablations ---------------------------------------------------------------------

struct AblationRow {
  std::string name;
  Toggles toggles;
  std::size_t bank_size = 0;
  std::size_t bank_params = 0;
  std::size_t trainable_params = 0;
  EvalReport report;
};

struct AblationTables {
  std::vector<AblationRow> table3;
  std::vector<AblationRow> table4;
};

inline const std::vector<std::size_t>& bank_size_sweep() {
  static const std::vector<std::size_t> sizes{0, 64, 128, 256, 512, 1024, 2048};
  return sizes;
}

inline std::vector<std::pair<std::string, Toggles>> component_rows() {
  return {{"baseline", {false, false, false}},   {"+LLFI", {true, false, false}},
          {"+Filter", {false, true, false}},     {"+LLFI+Filter", {true, true, false}},
          {"+PPG", {false, false, true}},        {"full", {true, true, true}}};
}

/// Trains and evaluates one variant of `base` in `dir`.
inline AblationRow run_variant(const Config& base, const Dataset& ds, const std::string& name,
                               Toggles toggles, std::size_t bank_size,
                               const std::filesystem::path& dir) {
  Config c = base;
  c.train.toggles = toggles;
  c.train.bank_size = bank_size;
  const TrainResult tr = train(c, ds, dir);
  const ModelSpec spec = ModelSpec::from(c);
  AblationRow row;
  row.name = name;
  row.toggles = toggles;
  row.bank_size = spec.prompt_enabled() ? bank_size : 0;
  row.bank_params = spec.prompt_enabled() ? tr.final_state.params.at("prompt.bank").size() : 0;
  row.trainable_params = tr.final_state.params.trainable_count();
  row.report = evaluate(tr.final_state.params, spec, ds, c.train.train_domain);
  return row;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, bool bank_table,
                               const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << (bank_table ? "bank_size,bank_params" : "row,low_level_fusion,channel_filter,prompt_generator")
      << ",trainable_params";
  for (const auto& d : rows.front().report.test_domains) out << ',' << d;
  out << ",Average\n";
  for (const auto& r : rows) {
    if (bank_table) {
      out << r.bank_size << ',' << r.bank_params;
    } else {
      out << r.name << ',' << r.toggles.low_level_fusion << ',' << r.toggles.channel_filter << ','
          << r.toggles.prompt_generator;
    }
    out << ',' << r.trainable_params;
    for (const auto& d : r.report.test_domains) out << ',' << fmt6(r.report.dsc_mean.at(d)[0]);
    out << ',' << fmt6(r.report.average_dsc()) << '\n';
  }
}

/// Component ablation (six toggle rows) and bank-size sweep on the full
/// model; N = 0 disables the prompt generator. Writes table3.csv,
/// table4.csv and one run directory per variant under `out/runs`.
inline AblationTables ablate(const Config& base, const Dataset& ds, const std::filesystem::path& out) {
  base.validate();
  std::filesystem::create_directories(out / "runs");
  AblationTables t;
  for (const auto& [name, toggles] : component_rows()) {
    std::string dir = "t3_" + name;
    std::replace(dir.begin(), dir.end(), '+', '_');
    t.table3.push_back(run_variant(base, ds, name, toggles, base.train.bank_size, out / "runs" / dir));
  }
  write_ablation_csv(t.table3, false, out / "table3.csv");
  for (std::size_t n : bank_size_sweep()) {
    const Toggles toggles{true, true, n > 0};
    t.table4.push_back(run_variant(base, ds, "N=" + std::to_string(n), toggles, n,
                                   out / "runs" / ("t4_N" + std::to_string(n))));
  }
  write_ablation_csv(t.table4, true, out / "table4.csv");
  return t;
}

}  // namespace dapsam
