#include "saelab/analysis.hpp"
#include "saelab/config.hpp"
#include "saelab/experiments.hpp"
#include "saelab/io.hpp"
#include "saelab/trainer.hpp"

#include <CLI11.hpp>
#include <iostream>
#include <json.hpp>

namespace fs = std::filesystem;
using namespace saelab;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 0;
};

ExperimentConfig need_config(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  return load_experiment_config(c.config);
}

std::uint64_t seed_of(const Common& c, const ExperimentConfig& cfg) {
  return c.seed.value_or(cfg.seeds.front());
}

const FeatureModelConfig& need_model(const ExperimentConfig& cfg) {
  if (!cfg.feature_model) throw ConfigError("config has no feature_model section");
  return *cfg.feature_model;
}

FeatureBasis basis_for(const FeatureModelConfig& model, std::uint64_t seed) {
  return make_basis(model.dims, static_cast<Index>(model.features.size()),
                    derive_seed(seed, seed_tag::kBasis), model.axis_aligned);
}

int cmd_gen_stream(const Common& c, std::int64_t samples, Index batch) {
  const ExperimentConfig cfg = need_config(c);
  const FeatureModelConfig& model = need_model(cfg);
  const std::uint64_t seed = seed_of(c, cfg);
  if (c.out.empty()) throw ConfigError("--out is required");
  SyntheticSource source(basis_for(model, seed), model.firing(), derive_seed(seed, seed_tag::kSamples));
  StreamWriter writer(c.out, model.dims);
  for (std::int64_t left = samples; left > 0; left -= batch) {
    writer.append(source.next(static_cast<Index>(std::min<std::int64_t>(batch, left))));
  }
  writer.close();
  std::cout << "wrote " << writer.count() << " samples of dim " << model.dims << " to " << c.out
            << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& stream) {
  const ExperimentConfig cfg = need_config(c);
  const std::uint64_t seed = seed_of(c, cfg);
  const fs::path out = c.out.empty() ? cfg.output_dir : fs::path(c.out);
  const Index width = cfg.sae.widths.front();
  TrainerState state;
  std::vector<LogRow> log;
  if (!stream.empty()) {
    StreamSource source(stream);
    SaeSpec spec{source.dims(), width, cfg.sae.activation, cfg.sae.tied, cfg.sae.matryoshka,
                 cfg.sae.init_norm, derive_seed(seed, seed_tag::kInit), std::nullopt};
    TrainConfig t = cfg.train;
    t.seed = seed;
    TrainResult r = train(source, t, spec);
    state = std::move(r.state);
    log = std::move(r.log);
  } else {
    RunRecord r = train_on_feature_model(need_model(cfg), cfg.sae, width, cfg.train, seed);
    alignment_table(r.report).write(out / "alignment.csv");
    state = std::move(r.state);
    log = std::move(r.log);
  }
  save_checkpoint(out / "sae.saec", state, CheckpointMeta{state.step, cfg.train.l1, seed});
  log_table(log).write(out / "log.csv");
  std::cout << "trained " << width << " latents for " << state.step << " steps; wrote " << out
            << "\n";
  return 0;
}

int cmd_extend(const std::string& in, const std::string& out, Index n, double init_norm,
               std::uint64_t seed) {
  Checkpoint ck = load_checkpoint(in);
  TrainerState state = ck.state ? std::move(*ck.state) : initial_state(ck.params);
  TrainerState ext = extend_state(state, n, init_norm, derive_seed(seed, seed_tag::kExtend));
  save_checkpoint(out, ext, ck.meta);
  std::cout << "extended to " << ext.params.latents() << " latents; wrote " << out << "\n";
  return 0;
}

int cmd_continue_pair(const Common& c, const std::string& in, const std::string& stream) {
  const ExperimentConfig cfg = need_config(c);
  const std::uint64_t seed = seed_of(c, cfg);
  const fs::path out = c.out.empty() ? cfg.output_dir : fs::path(c.out);
  Checkpoint ck = load_checkpoint(in);
  TrainerState state = ck.state ? std::move(*ck.state) : initial_state(ck.params);
  std::unique_ptr<BatchSource> source;
  if (!stream.empty()) {
    auto s = std::make_unique<StreamSource>(stream);
    s->reader().seek(static_cast<std::uint64_t>(state.step) *
                     static_cast<std::uint64_t>(cfg.train.batch_size));
    source = std::move(s);
  } else {
    const FeatureModelConfig& model = need_model(cfg);
    source = std::make_unique<SyntheticSource>(basis_for(model, seed), model.firing(),
                                               derive_seed(seed, seed_tag::kContinue));
  }
  TrainConfig t = cfg.train;
  t.seed = seed;
  PairResult pair = continue_train_pair(state, cfg.new_latents, t, *source, cfg.continue_samples,
                                        cfg.sae.init_norm, derive_seed(seed, seed_tag::kExtend));
  save_checkpoint(out / "base.saec", pair.base, CheckpointMeta{pair.base.step, t.l1, seed});
  save_checkpoint(out / "extended.saec", pair.extended,
                  CheckpointMeta{pair.extended.step, t.l1, seed});
  log_table(pair.base_log).write(out / "base_log.csv");
  log_table(pair.extended_log).write(out / "extended_log.csv");
  std::cout << "wrote " << out / "base.saec" << " and " << out / "extended.saec" << "\n";
  return 0;
}

int cmd_analyze(const Common& c, const std::string& in, double eps, double gap) {
  const ExperimentConfig cfg = need_config(c);
  const std::uint64_t seed = seed_of(c, cfg);
  const Checkpoint ck = load_checkpoint(in);
  const AlignmentReport report =
      alignment(ck.params, basis_for(need_model(cfg), seed), ClassifyThresholds{eps, gap});
  const CsvTable table = alignment_table(report);
  if (c.out.empty()) {
    std::cout << table.str();
  } else {
    table.write(c.out);
  }
  return 0;
}

int cmd_hedging_degree(const std::string& base, const std::string& extended, Index n,
                       std::uint64_t seed, Index draws, const std::string& out) {
  const SaeParams p0 = load_checkpoint(base).params;
  const SaeParams p1 = load_checkpoint(extended).params;
  if (n == 0) n = p1.latents() - p0.latents();
  const HedgingDegreeReport r =
      hedging_degree(p0, p1, p0.latents(), n, derive_seed(seed, seed_tag::kRandomSubspace), draws);
  if (!out.empty()) {
    CsvTable per({"latent", "new_projection", "random_projection"});
    for (Index i = 0; i < r.new_projection.size(); ++i) {
      per.add({fmt_int(i), fmt_num(r.new_projection(i)), fmt_num(r.random_projection(i))});
    }
    per.write(out);
  }
  std::cout << "h " << fmt_num(r.h) << "\n";
  return 0;
}

int cmd_loss_curve(double alone, double both, double l1, double step, const std::string& out) {
  const LossCurve curve = loss_curve(alone, both, l1, unit_grid(step));
  CsvTable table({"alpha", "total", "mse", "l1_term"});
  for (const auto& p : curve.points) {
    table.add({fmt_num(p.alpha), fmt_num(p.total), fmt_num(p.mse), fmt_num(p.l1)});
  }
  if (out.empty()) {
    std::cout << table.str();
  } else {
    table.write(out);
  }
  std::cerr << "argmin_alpha " << fmt_num(curve.argmin_alpha) << " min_total "
            << fmt_num(curve.min_total) << "\n";
  return 0;
}

int cmd_run(const Common& c, std::optional<ExperimentKind> require_kind) {
  const ExperimentConfig cfg = need_config(c);
  if (require_kind && cfg.kind != *require_kind) {
    throw ConfigError("expected a " + to_string(*require_kind) + " config, got " +
                      to_string(cfg.kind));
  }
  RunOptions opts;
  opts.keep_states = false;
  if (!c.out.empty()) opts.output_dir = c.out;
  if (c.threads > 0) opts.threads = c.threads;
  if (c.seed) opts.seeds = std::vector<std::uint64_t>{*c.seed};
  const ExperimentResult r = run_experiment(cfg, opts);
  const fs::path root = opts.output_dir.value_or(cfg.output_dir);
  if (!r.complete) {
    std::cerr << "error: " << r.error << "\n(partial outputs in " << root << ")\n";
    return 1;
  }
  std::cout << cfg.name << ": complete in " << fmt_num(r.wall_seconds) << " s, outputs in " << root
            << "\n";
  return 0;
}

int cmd_inspect(const std::string& in) {
  const auto header = nlohmann::json::parse(checkpoint_header(in));
  std::cout << header.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Sparse autoencoder hedging/absorption laboratory"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool config, bool out) {
    if (config) sub->add_option("--config", common.config, "Experiment config (JSON)");
    sub->add_option("--seed", common.seed, "Seed (overrides the config's seed list)");
    if (out) sub->add_option("--out", common.out, "Output path");
    sub->add_option("--threads", common.threads, "Worker threads");
  };

  std::int64_t samples = 100000;
  Index batch = 4096;
  auto* gen = app.add_subcommand("gen-stream", "Write synthetic samples as an activation stream");
  add_common(gen, true, true);
  gen->add_option("--samples", samples, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--batch", batch, "Rows generated per chunk")->check(CLI::PositiveNumber);

  std::string stream;
  auto* tr = app.add_subcommand("train", "Train one SAE (first width in the config)");
  add_common(tr, true, true);
  tr->add_option("--stream", stream, "Train on an activation stream instead of the toy model");

  std::string checkpoint;
  Index new_latents = 64;
  double init_norm = 0.1;
  auto* ext = app.add_subcommand("extend", "Append randomly initialized latents to a checkpoint");
  add_common(ext, false, true);
  ext->add_option("--checkpoint", checkpoint)->required();
  ext->add_option("--new-latents", new_latents)->check(CLI::NonNegativeNumber);
  ext->add_option("--init-norm", init_norm);

  auto* cp = app.add_subcommand("continue-pair", "Extend a checkpoint and train both SAEs on shared batches");
  add_common(cp, true, true);
  cp->add_option("--checkpoint", checkpoint)->required();
  cp->add_option("--stream", stream, "Continue on an activation stream");

  double eps = 0.05, gap = 0.05;
  auto* an = app.add_subcommand("analyze", "Alignment of a checkpoint against the config's features");
  add_common(an, true, true);
  an->add_option("--checkpoint", checkpoint)->required();
  an->add_option("--eps", eps);
  an->add_option("--gap", gap);

  std::string base, extended;
  Index draws = 1;
  Index hd_new = 0;
  auto* hd = app.add_subcommand("hedging-degree", "Hedging degree of a (base, extended) pair");
  add_common(hd, false, true);
  hd->add_option("--base", base)->required();
  hd->add_option("--extended", extended)->required();
  hd->add_option("--new-latents", hd_new, "Defaults to the width difference");
  hd->add_option("--random-draws", draws)->check(CLI::PositiveNumber);

  double alone = 0.3, both = 0.1, l1 = 0.0, step = 0.01;
  auto* lc = app.add_subcommand("loss-curve", "Closed-form single-latent loss curve");
  add_common(lc, false, true);
  lc->add_option("--p-alone", alone);
  lc->add_option("--p-both", both);
  lc->add_option("--l1", l1);
  lc->add_option("--step", step);

  auto* sw = app.add_subcommand("sweep", "Run a correlation_sweep config");
  add_common(sw, true, true);
  auto* run = app.add_subcommand("run", "Run any experiment config");
  add_common(run, true, true);

  auto* insp = app.add_subcommand("inspect", "Print a checkpoint header");
  insp->add_option("checkpoint", checkpoint)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_stream(common, samples, batch);
    if (*tr) return cmd_train(common, stream);
    if (*ext) {
      if (common.out.empty()) throw ConfigError("--out is required");
      return cmd_extend(checkpoint, common.out, new_latents, init_norm, common.seed.value_or(0));
    }
    if (*cp) return cmd_continue_pair(common, checkpoint, stream);
    if (*an) return cmd_analyze(common, checkpoint, eps, gap);
    if (*hd) return cmd_hedging_degree(base, extended, hd_new, common.seed.value_or(0), draws,
                                       common.out);
    if (*lc) return cmd_loss_curve(alone, both, l1, step, common.out);
    if (*sw) return cmd_run(common, ExperimentKind::kCorrelationSweep);
    if (*run) return cmd_run(common, std::nullopt);
    if (*insp) return cmd_inspect(checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FeasibilityError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
