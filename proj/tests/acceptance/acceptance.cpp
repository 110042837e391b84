// Acceptance suite: one PASS/FAIL line per criterion. Run with a criterion id
// (see `acceptance --list`) or `all`. Training criteria run the bundled
// configs and keep their outputs under the output directory.

#include "format_fuzz.hpp"
#include "gradient_check.hpp"
#include "oracles.hpp"

#include "saelab/experiments.hpp"
#include "saelab/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace saelab;
namespace fs = std::filesystem;

namespace {

fs::path g_out = "acceptance_out";

struct Verdict {
  bool pass = false;
  std::string detail;
};

ExperimentResult run_config(const std::string& name) {
  const ExperimentConfig c = load_experiment_config(fs::path(SAELAB_CONFIG_DIR) / (name + ".json"));
  RunOptions o;
  o.output_dir = g_out / name;
  ExperimentResult r = run_experiment(c, o);
  if (!r.complete) throw std::runtime_error(name + " did not complete: " + r.error);
  return r;
}

std::string fmt(double v, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1e", v);
  return buf;
}

std::string count_str(int ok, int n) { return std::to_string(ok) + "/" + std::to_string(n); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<const RunRecord*> runs_of_width(const ExperimentResult& r, Index width) {
  std::vector<const RunRecord*> out;
  for (const RunRecord& run : r.runs) {
    if (run.width == width) out.push_back(&run);
  }
  return out;
}

// Latent matched to `feature`, or -1.
Index latent_for(const AlignmentReport& rep, Index feature) {
  for (std::size_t i = 0; i < rep.matching.size(); ++i) {
    if (rep.matching[i] == feature) return static_cast<Index>(i);
  }
  return -1;
}

double min_matched_decoder_cos(const AlignmentReport& rep) {
  double m = 1.0;
  for (Index i = 0; i < rep.latents(); ++i) {
    const Index f = rep.matching[static_cast<std::size_t>(i)];
    m = std::min(m, f < 0 ? -1.0 : rep.decoder_cos(i, f));
  }
  return m;
}

// Every latent matched with signed decoder cosine > 0.98 and nothing else
// above 0.05 in either the encoder or the decoder.
bool clean_recovery(const AlignmentReport& rep, double match = 0.98, double off = 0.05) {
  return min_matched_decoder_cos(rep) > match && rep.max_off_target() < off;
}

Verdict gradient_oracle() {
  std::ostringstream d;
  bool pass = true;
  for (const auto& [mode, name] : oracle::grad_modes()) {
    const oracle::GradStats s = oracle::run_gradient_check(mode, 100, 20240101);
    pass = pass && s.passed == s.trials;
    d << name << " " << count_str(s.passed, s.trials) << " worst " << std::scientific
      << std::setprecision(1) << s.worst << std::defaultfloat << "; ";
  }
  return {pass, "relative error < 1e-3 per mode: " + d.str()};
}

Verdict independent_toy() {
  const ExperimentResult r = run_config("toy_independent");
  std::ostringstream d;
  bool pass = true;
  for (Index w : {3, 4}) {
    int ok = 0;
    const auto runs = runs_of_width(r, w);
    for (const RunRecord* run : runs) ok += clean_recovery(run->report);
    pass = pass && ok >= 9;
    d << "w" << w << " " << count_str(ok, static_cast<int>(runs.size())) << " ";
  }
  return {pass, "matched decoder cos > 0.98, off-target < 0.05, need >= 9/10: " + d.str()};
}

// Parent feature is index 2, its child index 3 in the four-feature toys.
constexpr Index kParent = 2;
constexpr Index kChild = 3;

Verdict hierarchy_toy() {
  const ExperimentResult r = run_config("toy_hierarchy");
  int narrow = 0;
  int wide = 0;
  for (const RunRecord* run : runs_of_width(r, 3)) {
    const Index l = latent_for(run->report, kParent);
    narrow += l >= 0 && run->report.decoder_cos(l, kChild) > 0.05;
  }
  for (const RunRecord* run : runs_of_width(r, 4)) {
    const Index l = latent_for(run->report, kParent);
    wide += l >= 0 && run->report.encoder_cos(l, kChild) < -0.05 &&
            std::abs(run->report.decoder_cos(l, kChild)) < 0.05;
  }
  return {narrow >= 8 && wide >= 8, "narrow hedging (dec > +0.05) " + count_str(narrow, 10) +
                                        ", wide absorption (enc < -0.05, |dec| < 0.05) " +
                                        count_str(wide, 10) + ", need >= 8/10 each"};
}

Verdict sign_law() {
  std::ostringstream d;
  bool pass = true;
  for (const auto& [name, sign] : {std::pair{std::string("toy_correlated"), 1.0},
                                   std::pair{std::string("toy_anticorrelated"), -1.0}}) {
    const ExperimentResult r = run_config(name);
    int ok = 0;
    std::ostringstream vals;
    for (const RunRecord* run : runs_of_width(r, 3)) {
      const Index l = latent_for(run->report, kParent);
      const double c = l >= 0 ? run->report.decoder_cos(l, kChild) : 0.0;
      ok += sign * c > 0.05;
      vals << fmt(c, 2) << " ";
    }
    pass = pass && ok >= 8;
    d << name << " " << count_str(ok, 10) << " [" << vals.str() << "] ";
  }
  return {pass, "narrow parent component on the child has the correlation's sign beyond 0.05, need >= 8/10: " +
                    d.str()};
}

Verdict bias_hedging() {
  const ExperimentResult indep = run_config("single_latent_independent");
  int bias_ok = 0;
  for (const RunRecord& run : indep.runs) {
    const double norm = run.state.params.b_dec().norm();
    const double proj = run.report.bias_projection(1);
    const double cos = norm > 0.0 ? proj / norm : 0.0;
    bias_ok += cos > 0.95 && proj >= 0.16 && proj <= 0.24;
  }
  const ExperimentResult high = run_config("single_latent_correlated_high_l1");
  int latent_ok = 0;
  std::ostringstream vals;
  for (const RunRecord& run : high.runs) {
    const double c = run.report.decoder_cos(0, 1);
    latent_ok += std::abs(c) < 0.05;
    vals << fmt(c, 2) << " ";
  }
  return {bias_ok >= 8 && latent_ok >= 8,
          "bias cos(b_dec,f2) > 0.95 with projection in [0.16,0.24]: " + count_str(bias_ok, 10) +
              " (need >= 8/10); high-L1 |cos(l,f2)| < 0.05: " + count_str(latent_ok, 10) +
              " (need >= 8/10) [" + vals.str() + "]"};
}

Verdict correlation_sweep() {
  const ExperimentResult r = run_config("correlation_sweep");
  std::map<double, std::vector<double>> by_rho;
  for (const SweepPoint& p : r.sweep) by_rho[p.rho].push_back(p.cos_l_f2);
  std::vector<double> rhos;
  std::vector<double> medians;
  bool signs = true;
  std::ostringstream d;
  for (const auto& [rho, vals] : by_rho) {
    const double m = median(vals);
    rhos.push_back(rho);
    medians.push_back(m);
    if (std::abs(rho) >= 0.125 - 1e-12 && !(m * rho > 0.0)) signs = false;
    d << fmt(rho, 3) << ":" << fmt(m, 3) << " ";
  }
  const double rs = spearman(rhos, medians);
  const bool grid = rhos.size() == 9 && rhos.front() == -0.5 && rhos.back() == 0.5;
  return {grid && rs > 0.95 && signs, "Spearman " + fmt(rs, 4) + " (need > 0.95), signs " +
                                          (signs ? "match" : "MISMATCH") + " for |rho| >= 0.125; medians " +
                                          d.str()};
}

Verdict loss_curves() {
  const ExperimentResult r = run_config("loss_curve");
  double worst = 0.0;
  std::map<std::pair<double, double>, std::map<double, double>> argmins;
  for (const LossCurveRecord& c : r.curves) {
    for (const LossCurvePoint& p : c.curve.points) {
      const double mc = oracle::sampled_interpolation_loss(c.p_alone, c.p_both, c.l1, p.alpha, 100000, 99);
      const double rel = std::abs(p.total - mc) / std::max(std::abs(mc), 1e-12);
      worst = std::max(worst, std::abs(p.total - mc) < 1e-12 ? 0.0 : rel);
    }
    argmins[{c.p_alone, c.p_both}][c.l1] = c.curve.argmin_alpha;
  }
  const auto& a = argmins[{0.3, 0.1}];
  const auto& b = argmins[{0.1, 0.3}];
  auto interior = [](const std::map<double, double>& m) {
    return std::all_of(m.begin(), m.end(), [](const auto& kv) { return kv.second > 0.0 && kv.second < 1.0; });
  };
  auto stable = [](const std::map<double, double>& m) {
    return m.count(0.0) && m.count(0.1) && std::abs(m.at(0.0) - m.at(0.1)) <= 0.02 + 1e-12;
  };
  const bool ordered = !a.empty() && !b.empty() && b.at(0.0) > a.at(0.0) && b.at(0.1) > a.at(0.1);
  const bool pass = worst < 1e-2 && interior(a) && interior(b) && ordered && stable(a) && stable(b);
  return {pass, "max relative gap to 1e5-sample oracle " + sci(worst) + " (need < 0.01); argmin (0.3,0.1) " +
                    fmt(a.at(0.0), 2) + "/" + fmt(a.at(0.1), 2) + ", (0.1,0.3) " + fmt(b.at(0.0), 2) + "/" +
                    fmt(b.at(0.1), 2) + " at lambda 0/0.1"};
}

Verdict full_width_controls() {
  std::ostringstream d;
  bool pass = true;
  for (const std::string name : {"full_width_correlated", "full_width_anticorrelated"}) {
    const ExperimentResult r = run_config(name);
    int ok = 0;
    for (const RunRecord& run : r.runs) ok += min_matched_decoder_cos(run.report) > 0.98;
    pass = pass && ok >= 8;
    d << name << " " << count_str(ok, static_cast<int>(r.runs.size())) << " ";
  }
  return {pass, "both features matched with decoder cos > 0.98, need >= 8/10: " + d.str()};
}

Verdict hedging_degree_criterion() {
  // Identical-pair null on a trained SAE.
  const ExperimentConfig ci = load_experiment_config(fs::path(SAELAB_CONFIG_DIR) / "hedging_independent.json");
  RunRecord base = train_on_feature_model(*ci.feature_model, ci.sae, 8, [&] {
    TrainConfig t = ci.train;
    t.total_samples = 200000;
    t.l1_warmup_steps = std::min<std::int64_t>(t.l1_warmup_steps, t.total_samples / t.batch_size);
    return t;
  }(), 0);
  const FeatureModelConfig& fm = *ci.feature_model;
  SyntheticSource source(make_basis(fm.dims, static_cast<Index>(fm.features.size()), 0), fm.firing(), 1);
  const PairResult pair = continue_train_pair(base.state, 8, ci.train, source, 0, 0.1, 2);
  const double null_h = hedging_degree(pair.base.params, pair.extended.params, 8, 8, 3, 10).h;

  const ExperimentResult indep = run_config("hedging_independent");
  std::vector<double> hs;
  int small = 0;
  for (const HedgingRecord& h : indep.hedging) {
    hs.push_back(std::abs(h.report.h));
    small += std::abs(h.report.h) < 0.01;
  }
  const double med = median(hs);

  const ExperimentResult corr = run_config("hedging_correlated");
  std::map<std::uint64_t, std::map<Index, double>> h;
  for (const HedgingRecord& rec : corr.hedging) h[rec.seed][rec.width] = rec.report.h;
  int positive = 0;
  int narrower = 0;
  for (const auto& [seed, by_width] : h) {
    bool all_pos = by_width.size() == 4;
    for (const auto& [w, v] : by_width) all_pos = all_pos && v > 0.0;
    positive += all_pos;
    narrower += by_width.count(8) && by_width.count(48) && by_width.at(8) > by_width.at(48);
  }
  std::ostringstream means;
  for (Index w : {8, 16, 32, 48}) {
    double s = 0.0;
    for (const auto& [seed, by_width] : h) s += by_width.at(w);
    means << "w" << w << " " << fmt(s / static_cast<double>(h.size()), 3) << " ";
  }
  const bool pass = null_h == 0.0 && med < 0.01 && small >= 8 && positive == static_cast<int>(h.size()) &&
                    narrower >= 8;
  return {pass, "null h = " + fmt(null_h, 1) + "; independent control median |h| " + fmt(med, 4) + ", " +
                    count_str(small, static_cast<int>(hs.size())) + " seeds < 0.01; correlated toy h > 0 at all widths " +
                    count_str(positive, static_cast<int>(h.size())) + ", h(w8) > h(w48) " +
                    count_str(narrower, static_cast<int>(h.size())) + "; mean h " + means.str()};
}

struct BetaSummary {
  double parent_child_enc_mean = 0.0;  // mean over seeds of the mean child component
  double parent_child_enc_min = 0.0;   // per-child means, extremes
  double parent_child_enc_max = 0.0;
  double max_off_median = 0.0;
};

std::map<std::string, BetaSummary> summarize_betas(const ExperimentResult& r) {
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const RunRecord& run : r.runs) groups[run.beta->label()].push_back(&run);
  std::map<std::string, BetaSummary> out;
  for (const auto& [label, runs] : groups) {
    const Index n = runs.front()->report.features();
    Vector child_mean = Vector::Zero(n - 1);
    std::vector<double> offs;
    for (const RunRecord* run : runs) {
      const Index parent_latent = 0;
      child_mean += run->report.encoder_cos.row(parent_latent).tail(n - 1).transpose();
      offs.push_back(run->report.max_off_target());
    }
    child_mean /= static_cast<double>(runs.size());
    out[label] = {child_mean.mean(), child_mean.minCoeff(), child_mean.maxCoeff(), median(offs)};
  }
  return out;
}

Verdict balance_toy() {
  const auto s = summarize_betas(run_config("balance_toy"));
  const BetaSummary& zero = s.at("0");
  const BetaSummary& det = s.at("detached");
  std::string best_label;
  double best = 1e9;
  for (const auto& [label, b] : s) {
    if (label == "detached") continue;
    const double beta = std::stod(label);
    if (beta >= 0.15 - 1e-9 && beta <= 0.35 + 1e-9 && b.max_off_median < best) {
      best = b.max_off_median;
      best_label = label;
    }
  }
  const bool pass = zero.parent_child_enc_max < -0.1 && det.parent_child_enc_min > 0.1 && best < 0.1;
  return {pass, "beta 0 parent-encoder child components max " + fmt(zero.parent_child_enc_max) +
                    " (need < -0.1); detached min " + fmt(det.parent_child_enc_min) +
                    " (need > 0.1); best beta in [0.15,0.35] is " + best_label + " with max off-target " +
                    fmt(best) + " (need < 0.1)"};
}

Verdict unbalanceable_toy() {
  const auto s = summarize_betas(run_config("unbalanceable_toy"));
  double best = 1e9;
  std::string best_label;
  for (const auto& [label, b] : s) {
    if (b.max_off_median < best) {
      best = b.max_off_median;
      best_label = label;
    }
  }
  const double at17 = s.at("0.17").max_off_median;
  const double at0 = s.at("0").max_off_median;
  const double atd = s.at("detached").max_off_median;
  const bool pass = best >= 0.02 && at17 < at0 && at17 < atd;
  return {pass, "smallest max off-target over the grid " + fmt(best) + " at beta " + best_label +
                    " (need >= 0.02); beta 0.17 " + fmt(at17) + " vs beta 0 " + fmt(at0) + " and detached " +
                    fmt(atd)};
}

Verdict format_suite() {
  const fs::path tmp = g_out / "fuzz.acts";
  fs::create_directories(g_out);
  int ok = 0;
  int total = 0;
  std::string first_bad;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const fuzz::Case& c : fuzz::corruption_cases(seed)) {
      ++total;
      const auto kind = fuzz::raised(c, tmp);
      if (kind && *kind == c.expected) {
        ++ok;
      } else if (first_bad.empty()) {
        first_bad = c.name;
      }
    }
  }

  // Bitwise round trips.
  const SaeParams p = fuzz::sample_params(7);
  const std::string bytes = encode_checkpoint(p, {5, 0.1, 7});
  const bool ck_round = encode_checkpoint(decode_checkpoint(bytes).params, {5, 0.1, 7}) == bytes;
  const fs::path st = g_out / "round.acts";
  const FeatureBasis basis = make_basis(16, 4, 1);
  std::mt19937_64 rng(3);
  const Matrix x = sample_batch(basis, FiringModel::independent({0.3, 0.3, 0.3, 0.3}), 257, rng)
                       .x.cast<float>()
                       .cast<double>();
  write_stream(st, x);
  StreamReader reader(st);
  const auto back = reader.next_batch(1000);
  const bool st_round = back && *back == x;
  fs::remove(st);
  fs::remove(tmp);
  const bool pass = ok == total && total >= 20 && ck_round && st_round;
  return {pass, "corruptions with the expected structured error " + count_str(ok, total) +
                    (first_bad.empty() ? "" : " (first miss: " + first_bad + ")") + "; checkpoint round trip " +
                    (ck_round ? "exact" : "DIFFERS") + "; stream round trip " + (st_round ? "exact" : "DIFFERS")};
}

const std::vector<std::pair<std::string, std::function<Verdict()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Verdict()>>> list = {
      {"gradient_oracle", gradient_oracle},
      {"independent_toy", independent_toy},
      {"hierarchy_toy", hierarchy_toy},
      {"sign_law", sign_law},
      {"bias_hedging", bias_hedging},
      {"correlation_sweep", correlation_sweep},
      {"loss_curves", loss_curves},
      {"full_width_controls", full_width_controls},
      {"hedging_degree", hedging_degree_criterion},
      {"balance_toy", balance_toy},
      {"unbalanceable_toy", unbalanceable_toy},
      {"format_suite", format_suite},
  };
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  std::vector<std::string> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--list") {
      for (const auto& [id, fn] : criteria()) std::printf("%s\n", id.c_str());
      return 0;
    }
    if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
      continue;
    }
    wanted.push_back(a);
  }
  if (wanted.empty() || wanted == std::vector<std::string>{"all"}) {
    wanted.clear();
    for (const auto& [id, fn] : criteria()) wanted.push_back(id);
  }

  int failures = 0;
  for (const std::string& id : wanted) {
    const auto it = std::find_if(criteria().begin(), criteria().end(),
                                 [&](const auto& c) { return c.first == id; });
    if (it == criteria().end()) {
      std::fprintf(stderr, "unknown criterion '%s'\n", id.c_str());
      return 2;
    }
    Verdict v;
    try {
      v = it->second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", id.c_str(), v.detail.c_str());
    std::fflush(stdout);
    failures += !v.pass;
  }
  return failures == 0 ? 0 : 1;
}
