#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dapsam/dapsam.hpp"

namespace fs = std::filesystem;
using namespace dapsam;

namespace {

int cmd_gen_data(const std::string& config, const std::string& out, std::uint64_t seed, bool overwrite) {
  const Config c = load_config(config);
  generate_domain_suite(c.data, seed, out, overwrite);
  std::printf("wrote %zu domains x %zu samples to %s\n", c.data.domains.size(),
              c.data.samples_per_domain, out.c_str());
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              const std::string& resume, std::size_t every) {
  TrainOptions opts;
  opts.quiet = false;
  opts.checkpoint_every = every;
  if (!resume.empty()) opts.resume = resume;
  const Config c = config.empty() ? default_config() : load_config(config);
  const TrainResult r = train(c, data, out, opts);
  std::printf("epochs %zu, best val DSC %s, final checkpoint %s\n", r.log.size(),
              fmt6(r.best_val_dsc).c_str(), r.final_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report,
             const std::string& train_domain) {
  std::optional<std::string> td;
  if (!train_domain.empty()) td = train_domain;
  const EvalReport r = evaluate(ckpt, data, report, td);
  std::printf("source %s, average DSC over %zu target domains: %s\n", r.train_domain.c_str(),
              r.test_domains.size(), fmt6(r.average_dsc()).c_str());
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& data, const std::string& out) {
  const AblationTables t = ablate(load_config(config), load_dataset(data), out);
  std::printf("table3: %zu rows, table4: %zu rows in %s\n", t.table3.size(), t.table4.size(), out.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& component, std::uint64_t seed) {
  const double err = gradcheck(parse_grad_component(component), seed);
  std::printf("%s seed %llu max_rel_error %.3e\n", component.c_str(),
              static_cast<unsigned long long>(seed), err);
  return err < 1e-4 ? 0 : 1;
}

int cmd_export(const std::string& ckpt, const std::string& out, const std::string& data,
               std::size_t limit) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const ModelSpec spec = ModelSpec::from(ck.config);
  ParameterStore ps = build_parameters(spec);
  load_parameters(ps, ck.params);
  std::vector<FeatureMap> embeddings;
  if (!data.empty()) {
    const Dataset ds = load_dataset(data);
    for (const auto& d : ds.domains) {
      for (std::size_t i = 0; i < d.samples.size() && i < limit; ++i) {
        embeddings.push_back(embed(ps, spec, make_batch(d.samples[i]).first));
      }
    }
  }
  const auto rows = export_prototypes(memory_bank(ps), embeddings);
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw LoadError("cannot write " + out);
  write_prototype_csv(rows, f);
  std::printf("wrote %zu prototype rows to %s\n", rows.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive prompting for frozen-backbone segmentation"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, report, train_domain, resume, component;
  std::uint64_t seed = 0;
  bool overwrite = false;
  std::size_t every = 0;
  std::size_t limit = 10;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain suite");
  gen->add_option("--config", config, "config JSON")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "generation seed")->required();
  gen->add_flag("--overwrite", overwrite, "replace a non-empty output directory");

  auto* tr = app.add_subcommand("train", "train on the configured source domain");
  tr->add_option("--config", config, "config JSON (defaults apply if omitted)");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "run directory")->required();
  tr->add_option("--resume", resume, "continue from a checkpoint");
  tr->add_option("--checkpoint-every", every, "also write epoch_NNNN.ckpt every N epochs");

  auto* ev = app.add_subcommand("eval", "leave-one-domain-out evaluation");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--report", report, "report CSV")->required();
  ev->add_option("--train-domain", train_domain, "source domain (default: from checkpoint)");

  auto* ab = app.add_subcommand("ablate", "component and bank-size ablations");
  ab->add_option("--config", config, "config JSON")->required();
  ab->add_option("--data", data, "dataset directory")->required();
  ab->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc->add_option("--component", component, "adapter|filter|prompt|decoder|loss|encoder")->required();
  gc->add_option("--seed", seed, "seed")->required();

  auto* ex = app.add_subcommand("export-prototypes", "dump memory-bank prototypes as CSV");
  ex->add_option("--ckpt", ckpt, "checkpoint")->required();
  ex->add_option("--out", out, "output CSV")->required();
  ex->add_option("--data", data, "also export raw/adapted prototypes of dataset samples");
  ex->add_option("--limit", limit, "samples per domain with --data");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config, out, seed, overwrite);
    if (tr->parsed()) return cmd_train(config, data, out, resume, every);
    if (ev->parsed()) return cmd_eval(ckpt, data, report, train_domain);
    if (ab->parsed()) return cmd_ablate(config, data, out);
    if (gc->parsed()) return cmd_gradcheck(component, seed);
    if (ex->parsed()) return cmd_export(ckpt, out, data, limit);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dapsam: %s\n", e.what());
    return 2;
  }
  return 0;
}
