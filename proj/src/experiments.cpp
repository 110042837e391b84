#include "saelab/experiments.hpp"

#include "saelab/io.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace saelab {

using json = nlohmann::json;
namespace fs = std::filesystem;

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 128 << 20);
#endif
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

FeatureModelConfig with_correlation(const FeatureModelConfig& model, double rho) {
  FeatureModelConfig out = model;
  out.features.at(1).correlation->rho = rho;
  return out;
}

MatryoshkaSpec balance_spec(const MatryoshkaSpec& prefixes, const BetaSetting& setting) {
  MatryoshkaSpec out;
  out.prefixes = prefixes.prefixes;
  out.betas.assign(out.prefixes.size(), setting.detached ? 1.0 : setting.beta);
  out.betas.back() = 1.0;
  out.detached_inner = setting.detached;
  return out;
}

CsvTable alignment_table(const AlignmentReport& report) {
  CsvTable table({"latent", "feature", "encoder_cos", "decoder_cos", "matched_feature", "label"});
  for (Index i = 0; i < report.latents(); ++i) {
    const auto li = static_cast<std::size_t>(i);
    for (Index j = 0; j < report.features(); ++j) {
      table.add({fmt_int(i), fmt_int(j), fmt_num(report.encoder_cos(i, j)),
                 fmt_num(report.decoder_cos(i, j)), fmt_int(report.matching[li]),
                 to_string(report.labels[li])});
    }
  }
  return table;
}

RunRecord train_on_feature_model(const FeatureModelConfig& model, const SaeConfig& sae,
                                 Index width, const TrainConfig& train_cfg, std::uint64_t seed) {
  const FiringModel firing = model.firing();
  const FeatureBasis basis =
      make_basis(model.dims, firing.count(), derive_seed(seed, seed_tag::kBasis), model.axis_aligned);
  SyntheticSource source(basis, firing, derive_seed(seed, seed_tag::kSamples));

  SaeSpec spec;
  spec.dims = model.dims;
  spec.latents = width;
  spec.activation = sae.activation;
  spec.tied = sae.tied;
  spec.matryoshka = sae.matryoshka;
  spec.init_norm = sae.init_norm;
  spec.init_seed = derive_seed(seed, seed_tag::kInit);
  if (sae.init_from_features) spec.init_rows = basis.features.topRows(std::min(width, basis.count()));

  TrainConfig cfg = train_cfg;
  cfg.seed = seed;
  TrainResult trained = train(source, cfg, spec);

  RunRecord record;
  record.seed = seed;
  record.width = width;
  record.report = alignment(trained.state.params, basis);
  record.state = std::move(trained.state);
  record.log = std::move(trained.log);
  return record;
}

namespace {

struct Stats {
  double mean = 0.0;
  double std = 0.0;
  double median = 0.0;
};

Stats stats(std::vector<double> values) {
  Stats s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  s.median = values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
  return s;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::string fmt_seed(std::uint64_t seed) { return std::to_string(seed); }

std::string run_suffix(const RunRecord& r) {
  std::string s = "w" + std::to_string(r.width);
  if (!r.variant.empty()) s += "_" + r.variant;
  return s;
}

/// Runs tasks on a small pool. Returns the first error message, if any.
std::string run_tasks(std::vector<std::function<void()>>& tasks, int threads) {
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::string first_error;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        if (first_error.empty()) first_error = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(tasks.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return first_error;
}

// Latents ordered by the feature they are judged against, so that seeds
// can be averaged position by position.
std::vector<Index> latent_order(const AlignmentReport& report) {
  std::vector<Index> order(static_cast<std::size_t>(report.latents()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return report.target_feature(a) < report.target_feature(b);
  });
  return order;
}

CsvTable alignment_aggregate(const std::vector<const RunRecord*>& runs) {
  CsvTable table({"latent", "feature", "encoder_cos_mean", "encoder_cos_std", "decoder_cos_mean",
                  "decoder_cos_std", "n"});
  if (runs.empty()) return table;
  const Index L = runs.front()->report.latents();
  const Index N = runs.front()->report.features();
  std::vector<std::vector<Index>> orders;
  for (const RunRecord* r : runs) orders.push_back(latent_order(r->report));
  for (Index pos = 0; pos < L; ++pos) {
    for (Index j = 0; j < N; ++j) {
      std::vector<double> enc, dec;
      for (std::size_t s = 0; s < runs.size(); ++s) {
        const Index i = orders[s][static_cast<std::size_t>(pos)];
        enc.push_back(runs[s]->report.encoder_cos(i, j));
        dec.push_back(runs[s]->report.decoder_cos(i, j));
      }
      const Stats e = stats(enc);
      const Stats d = stats(dec);
      table.add({fmt_int(pos), fmt_int(j), fmt_num(e.mean), fmt_num(e.std), fmt_num(d.mean),
                 fmt_num(d.std), fmt_int(static_cast<std::int64_t>(runs.size()))});
    }
  }
  return table;
}

CsvTable bias_table(const RunRecord& r) {
  CsvTable table({"feature", "bias_projection", "bias_cos"});
  const double norm = r.state.params.b_dec().norm();
  for (Index j = 0; j < r.report.features(); ++j) {
    const double proj = r.report.bias_projection(j);
    table.add({fmt_int(j), fmt_num(proj), fmt_num(norm > 0.0 ? proj / norm : 0.0)});
  }
  return table;
}

class Writer {
 public:
  explicit Writer(fs::path root) : root_(std::move(root)) {}

  void csv(const fs::path& rel, const CsvTable& table) {
    table.write(root_ / rel);
    files_.push_back(rel.generic_string());
  }
  void checkpoint(const fs::path& rel, const TrainerState& state, const CheckpointMeta& meta) {
    save_checkpoint(root_ / rel, state, meta);
    files_.push_back(rel.generic_string());
  }
  const fs::path& root() const { return root_; }
  const std::vector<std::string>& files() const { return files_; }

 private:
  fs::path root_;
  std::vector<std::string> files_;
};

void write_run(Writer& w, const RunRecord& r, const TrainConfig& train_cfg, bool with_bias) {
  const fs::path dir = seed_dir(r.seed);
  const std::string suffix = run_suffix(r);
  w.csv(dir / ("alignment_" + suffix + ".csv"), alignment_table(r.report));
  w.csv(dir / ("log_" + suffix + ".csv"), log_table(r.log));
  if (with_bias) w.csv(dir / ("bias_" + suffix + ".csv"), bias_table(r));
  if (r.state.params.latents() > 0) {
    w.checkpoint(dir / ("sae_" + suffix + ".saec"), r.state,
                 CheckpointMeta{r.state.step, train_cfg.l1, r.seed});
  }
}

void write_run_groups(Writer& w, const std::vector<RunRecord>& runs, const TrainConfig& train_cfg,
                      bool with_bias) {
  std::map<std::string, std::vector<const RunRecord*>> groups;
  std::vector<std::string> order;
  for (const RunRecord& r : runs) {
    if (r.state.params.latents() > 0 || r.report.latents() > 0) {
      write_run(w, r, train_cfg, with_bias);
    }
    const std::string key = run_suffix(r);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  for (const std::string& key : order) {
    w.csv("alignment_aggregate_" + key + ".csv", alignment_aggregate(groups[key]));
    if (with_bias) {
      CsvTable table({"feature", "bias_projection_mean", "bias_projection_std", "n"});
      const auto& group = groups[key];
      for (Index j = 0; j < group.front()->report.features(); ++j) {
        std::vector<double> v;
        for (const RunRecord* r : group) v.push_back(r->report.bias_projection(j));
        const Stats s = stats(v);
        table.add({fmt_int(j), fmt_num(s.mean), fmt_num(s.std),
                   fmt_int(static_cast<std::int64_t>(v.size()))});
      }
      w.csv("bias_aggregate_" + key + ".csv", table);
    }
  }
}

// ---- per-kind task builders ------------------------------------------------

void plan_width_runs(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                     std::vector<RunRecord>& runs, std::vector<std::function<void()>>& tasks) {
  runs.resize(seeds.size() * c.sae.widths.size());
  std::size_t slot = 0;
  for (std::uint64_t seed : seeds) {
    for (Index width : c.sae.widths) {
      RunRecord* out = &runs[slot++];
      tasks.push_back([&c, seed, width, out] {
        *out = train_on_feature_model(*c.feature_model, c.sae, width, c.train, seed);
      });
    }
  }
}

void plan_balance_runs(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                       std::vector<RunRecord>& runs, std::vector<std::function<void()>>& tasks) {
  runs.resize(seeds.size() * c.betas.size());
  std::size_t slot = 0;
  const Index width = c.sae.widths.front();
  for (std::uint64_t seed : seeds) {
    for (const BetaSetting& setting : c.betas) {
      RunRecord* out = &runs[slot++];
      tasks.push_back([&c, seed, width, setting, out] {
        SaeConfig sae = c.sae;
        sae.matryoshka = balance_spec(*c.sae.matryoshka, setting);
        *out = train_on_feature_model(*c.feature_model, sae, width, c.train, seed);
        out->beta = setting;
        out->variant = "beta_" + setting.label();
      });
    }
  }
}

void plan_sweep(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                std::vector<RunRecord>& runs, std::vector<std::function<void()>>& tasks,
                std::vector<double>& feasible) {
  const auto& f = c.feature_model->features;
  const auto [lo, hi] = correlation_bounds(f[0].prob, f[1].prob);
  for (double rho : c.rhos) {
    if (rho < lo - 1e-12 || rho > hi + 1e-12) {
      std::cerr << "warning: rho " << rho << " infeasible for the marginals (admissible [" << lo
                << ", " << hi << "]); skipped\n";
      continue;
    }
    feasible.push_back(rho);
  }
  runs.resize(seeds.size() * feasible.size());
  std::size_t slot = 0;
  const Index width = c.sae.widths.front();
  for (double rho : feasible) {
    for (std::uint64_t seed : seeds) {
      RunRecord* out = &runs[slot++];
      tasks.push_back([&c, seed, width, rho, out] {
        *out = train_on_feature_model(with_correlation(*c.feature_model, rho), c.sae, width,
                                      c.train, seed);
        out->rho = rho;
        out->variant = "rho_" + fmt_num(rho);
      });
    }
  }
}

HedgingRecord hedging_run(const ExperimentConfig& c, std::uint64_t seed, Index width,
                          RunRecord& run) {
  std::unique_ptr<BatchSource> train_source;
  std::unique_ptr<BatchSource> continue_source;
  std::optional<FeatureBasis> basis;
  Index dims = 0;
  if (c.stream) {
    auto stream = std::make_unique<StreamSource>(*c.stream);
    dims = stream->dims();
    train_source = std::move(stream);
  } else {
    const FiringModel firing = c.feature_model->firing();
    dims = c.feature_model->dims;
    basis = make_basis(dims, firing.count(), derive_seed(seed, seed_tag::kBasis),
                       c.feature_model->axis_aligned);
    train_source = std::make_unique<SyntheticSource>(*basis, firing,
                                                     derive_seed(seed, seed_tag::kSamples));
    continue_source = std::make_unique<SyntheticSource>(*basis, firing,
                                                        derive_seed(seed, seed_tag::kContinue));
  }

  SaeSpec spec;
  spec.dims = dims;
  spec.latents = width;
  spec.activation = c.sae.activation;
  spec.tied = c.sae.tied;
  spec.matryoshka = c.sae.matryoshka;
  spec.init_norm = c.sae.init_norm;
  spec.init_seed = derive_seed(seed, seed_tag::kInit);
  if (c.sae.init_from_features && basis) {
    spec.init_rows = basis->features.topRows(std::min(width, basis->count()));
  }
  TrainConfig cfg = c.train;
  cfg.seed = seed;
  TrainResult trained = train(*train_source, cfg, spec);
  // A stream continues from where initial training stopped.
  BatchSource& cont = continue_source ? *continue_source : *train_source;
  PairResult pair = continue_train_pair(trained.state, c.new_latents, cfg, cont,
                                        c.continue_samples, c.sae.init_norm,
                                        derive_seed(seed, seed_tag::kExtend));
  HedgingRecord rec;
  rec.seed = seed;
  rec.width = width;
  rec.report = hedging_degree(pair.base.params, pair.extended.params, width, c.new_latents,
                              derive_seed(seed, seed_tag::kRandomSubspace), c.random_draws);

  run.seed = seed;
  run.width = width;
  if (basis) run.report = alignment(pair.base.params, *basis);
  run.log = std::move(trained.log);
  run.state = std::move(pair.base);
  return rec;
}

void write_hedging(Writer& w, const ExperimentConfig& c, const std::vector<HedgingRecord>& recs) {
  CsvTable table({"width", "seed", "h", "mean_new_projection", "mean_random_projection",
                  "new_latents", "random_seed", "random_draws"});
  std::map<Index, std::vector<double>> by_width;
  for (const HedgingRecord& r : recs) {
    table.add({fmt_int(r.width), fmt_seed(r.seed), fmt_num(r.report.h),
               fmt_num(r.report.new_projection.mean()), fmt_num(r.report.random_projection.mean()),
               fmt_int(r.report.new_latents), std::to_string(r.report.seed),
               fmt_int(r.report.random_draws)});
    by_width[r.width].push_back(r.report.h);

    CsvTable per({"latent", "new_projection", "random_projection"});
    for (Index i = 0; i < r.report.new_projection.size(); ++i) {
      per.add({fmt_int(i), fmt_num(r.report.new_projection(i)),
               fmt_num(r.report.random_projection(i))});
    }
    w.csv(fs::path(seed_dir(r.seed)) / ("hedging_w" + std::to_string(r.width) + ".csv"), per);
  }
  w.csv("hedging.csv", table);
  CsvTable agg({"width", "h_mean", "h_std", "n"});
  for (Index width : c.sae.widths) {
    const Stats s = stats(by_width[width]);
    agg.add({fmt_int(width), fmt_num(s.mean), fmt_num(s.std),
             fmt_int(static_cast<std::int64_t>(by_width[width].size()))});
  }
  w.csv("hedging_aggregate.csv", agg);
}

void write_sweep(Writer& w, const std::vector<SweepPoint>& points, const std::vector<double>& rhos) {
  CsvTable table({"rho", "seed", "cos_l_f2"});
  std::map<double, std::vector<double>> by_rho;
  for (const SweepPoint& p : points) {
    table.add({fmt_num(p.rho), fmt_seed(p.seed), fmt_num(p.cos_l_f2)});
    by_rho[p.rho].push_back(p.cos_l_f2);
  }
  w.csv("sweep.csv", table);
  CsvTable agg({"rho", "cos_l_f2_mean", "cos_l_f2_std", "cos_l_f2_median", "n"});
  for (double rho : rhos) {
    const Stats s = stats(by_rho[rho]);
    agg.add({fmt_num(rho), fmt_num(s.mean), fmt_num(s.std), fmt_num(s.median),
             fmt_int(static_cast<std::int64_t>(by_rho[rho].size()))});
  }
  w.csv("sweep_aggregate.csv", agg);
}

void write_curves(Writer& w, const std::vector<LossCurveRecord>& curves) {
  CsvTable points({"p_alone", "p_both", "l1", "alpha", "total", "mse", "l1_term"});
  CsvTable summary({"p_alone", "p_both", "l1", "argmin_alpha", "min_total"});
  for (const LossCurveRecord& r : curves) {
    for (const LossCurvePoint& p : r.curve.points) {
      points.add({fmt_num(r.p_alone), fmt_num(r.p_both), fmt_num(r.l1), fmt_num(p.alpha),
                  fmt_num(p.total), fmt_num(p.mse), fmt_num(p.l1)});
    }
    summary.add({fmt_num(r.p_alone), fmt_num(r.p_both), fmt_num(r.l1),
                 fmt_num(r.curve.argmin_alpha), fmt_num(r.curve.min_total)});
  }
  w.csv("loss_curve.csv", points);
  w.csv("loss_curve_summary.csv", summary);
}

bool is_filled(const RunRecord& r) { return r.state.params.latents() > 0; }

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult result;
  result.config = config;
  const ExperimentConfig& c = result.config;
  const std::vector<std::uint64_t> seeds = options.seeds.value_or(c.seeds);
  const int threads = options.threads.value_or(c.threads);
  const fs::path root = options.output_dir.value_or(c.output_dir);

  std::vector<std::function<void()>> tasks;
  std::vector<double> feasible_rhos;
  std::vector<RunRecord> hedging_runs;
  std::vector<HedgingRecord> hedging;

  switch (c.kind) {
    case ExperimentKind::kToyFigure:
    case ExperimentKind::kSingleLatent:
    case ExperimentKind::kFullWidthControl:
      plan_width_runs(c, seeds, result.runs, tasks);
      break;
    case ExperimentKind::kBalanceToy:
    case ExperimentKind::kUnbalanceableToy:
    case ExperimentKind::kBalanceSweep:
      plan_balance_runs(c, seeds, result.runs, tasks);
      break;
    case ExperimentKind::kCorrelationSweep:
      plan_sweep(c, seeds, result.runs, tasks, feasible_rhos);
      break;
    case ExperimentKind::kHedgingDegree: {
      const std::size_t n = seeds.size() * c.sae.widths.size();
      hedging_runs.resize(n);
      hedging.resize(n);
      std::size_t slot = 0;
      for (std::uint64_t seed : seeds) {
        for (Index width : c.sae.widths) {
          const std::size_t s = slot++;
          tasks.push_back([&c, &hedging, &hedging_runs, seed, width, s] {
            hedging[s] = hedging_run(c, seed, width, hedging_runs[s]);
          });
        }
      }
      break;
    }
    case ExperimentKind::kLossCurve: {
      const std::vector<double> grid = unit_grid(c.grid_step);
      for (const auto& [alone, both] : c.cases) {
        for (double l1 : c.l1_values) {
          result.curves.push_back({alone, both, l1, loss_curve(alone, both, l1, grid)});
        }
      }
      break;
    }
  }

  result.error = run_tasks(tasks, threads);
  result.complete = result.error.empty();

  // Keep only finished work.
  if (c.kind == ExperimentKind::kHedgingDegree) {
    for (std::size_t i = 0; i < hedging.size(); ++i) {
      if (!is_filled(hedging_runs[i])) continue;
      result.hedging.push_back(hedging[i]);
      result.runs.push_back(std::move(hedging_runs[i]));
    }
  } else {
    std::erase_if(result.runs, [](const RunRecord& r) { return !is_filled(r); });
  }
  if (c.kind == ExperimentKind::kCorrelationSweep) {
    for (const RunRecord& r : result.runs) {
      result.sweep.push_back({r.rho, r.seed, r.report.decoder_cos(0, 1)});
    }
  }

  if (options.write_files) {
    Writer w(root);
    try {
      switch (c.kind) {
        case ExperimentKind::kToyFigure:
        case ExperimentKind::kFullWidthControl:
        case ExperimentKind::kBalanceToy:
        case ExperimentKind::kUnbalanceableToy:
        case ExperimentKind::kBalanceSweep:
          write_run_groups(w, result.runs, c.train, false);
          break;
        case ExperimentKind::kSingleLatent:
          write_run_groups(w, result.runs, c.train, true);
          break;
        case ExperimentKind::kCorrelationSweep:
          write_sweep(w, result.sweep, feasible_rhos);
          for (const RunRecord& r : result.runs) {
            w.csv(fs::path(seed_dir(r.seed)) / ("log_" + run_suffix(r) + ".csv"), log_table(r.log));
          }
          break;
        case ExperimentKind::kHedgingDegree:
          write_hedging(w, c, result.hedging);
          for (const RunRecord& r : result.runs) {
            w.csv(fs::path(seed_dir(r.seed)) / ("log_" + run_suffix(r) + ".csv"), log_table(r.log));
            if (r.report.latents() > 0) {
              w.csv(fs::path(seed_dir(r.seed)) / ("alignment_" + run_suffix(r) + ".csv"),
                    alignment_table(r.report));
            }
          }
          break;
        case ExperimentKind::kLossCurve:
          write_curves(w, result.curves);
          break;
      }
    } catch (const std::exception& e) {
      result.complete = false;
      if (result.error.empty()) result.error = e.what();
    }

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json manifest = {
        {"name", c.name},
        {"kind", to_string(c.kind)},
        {"config_hash", config_hash(c.source)},
        {"seeds", seeds},
        {"version", kVersion},
        {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." +
                              std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
        {"wall_seconds", result.wall_seconds},
        {"status", result.complete ? "complete" : "incomplete"},
        {"files", w.files()},
    };
    if (!result.error.empty()) manifest["error"] = result.error;
    write_file(root / "manifest.json", manifest.dump(2) + "\n");
  }

  if (!options.keep_states) {
    for (RunRecord& r : result.runs) r.state = TrainerState{};
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace saelab
