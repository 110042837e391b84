#include "doctest.h"

#include "saelab/experiments.hpp"

#include <json.hpp>

#include <filesystem>
#include <set>

using namespace saelab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("saelab_exp_" + name);
  fs::remove_all(p);
  return p;
}

json tiny_toy() {
  return json::parse(R"({
    "kind": "toy_figure",
    "name": "tiny",
    "seeds": [0, 1],
    "feature_model": {"dims": 10, "features": [{"p": 0.25}, {"p": 0.25}, {"p": 0.2}]},
    "sae": {"widths": [2, 3], "activation": "relu", "init_norm": 0.01},
    "train": {"lr": 3e-3, "batch_size": 64, "samples": 6400, "l1": 0.01, "l1_warmup_steps": 10}
  })");
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST_CASE("derived seeds differ across tags and runs") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 10; ++s) {
    for (std::uint64_t tag = 1; tag <= 6; ++tag) seen.insert(derive_seed(s, tag));
  }
  CHECK(seen.size() == 60);
  CHECK(derive_seed(3, seed_tag::kInit) == derive_seed(3, seed_tag::kInit));
}

TEST_CASE("balance settings map onto matryoshka weights") {
  const MatryoshkaSpec prefixes{{1, 3, 4}, {1, 1, 1}, false};
  const MatryoshkaSpec b = balance_spec(prefixes, BetaSetting{0.25, false});
  CHECK(b.betas == std::vector<double>{0.25, 0.25, 1.0});
  CHECK_FALSE(b.detached_inner);
  const MatryoshkaSpec d = balance_spec(prefixes, BetaSetting{0.0, true});
  CHECK(d.betas == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(d.detached_inner);
}

TEST_CASE("correlation override") {
  FeatureModelConfig m;
  m.features = {FeatureFiring{0.45, {}, {}}, FeatureFiring{0.25, {}, CorrelationRule{0, 0.0}}};
  const FeatureModelConfig r = with_correlation(m, 0.375);
  REQUIRE(r.features[1].correlation);
  CHECK(r.features[1].correlation->rho == 0.375);
}

TEST_CASE("toy run writes per-seed and aggregate outputs reproducibly") {
  const ExperimentConfig c = parse_experiment_config(tiny_toy());
  const fs::path a = fresh_dir("toy_a");
  const fs::path b = fresh_dir("toy_b");
  RunOptions oa;
  oa.output_dir = a;
  RunOptions ob;
  ob.output_dir = b;
  const ExperimentResult ra = run_experiment(c, oa);
  run_experiment(c, ob);
  CHECK(ra.complete);
  CHECK(ra.runs.size() == 4);

  for (const char* f : {"seed_0/alignment_w2.csv", "seed_1/alignment_w3.csv", "seed_0/log_w3.csv",
                        "alignment_aggregate_w3.csv"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(slurp(a / "seed_0/sae_w2.saec") == slurp(b / "seed_0/sae_w2.saec"));
  CHECK(slurp(a / "seed_0/alignment_w2.csv").rfind("latent,feature,encoder_cos,decoder_cos,matched_feature,label", 0) == 0);

  const json manifest = json::parse(slurp(a / "manifest.json"));
  CHECK(manifest.at("status") == "complete");
  CHECK(manifest.at("config_hash") == config_hash(c.source));
  CHECK(manifest.at("seeds").size() == 2);
  CHECK(manifest.at("version") == kVersion);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("seed override replaces the configured seeds") {
  const ExperimentConfig c = parse_experiment_config(tiny_toy());
  RunOptions o;
  o.write_files = false;
  o.seeds = std::vector<std::uint64_t>{5};
  const ExperimentResult r = run_experiment(c, o);
  REQUIRE(r.runs.size() == 2);
  CHECK(r.runs[0].seed == 5);
}

TEST_CASE("loss curve experiment outputs") {
  const ExperimentConfig c = parse_experiment_config(
      json::parse(R"({"kind": "loss_curve", "name": "lc", "cases": [[0.3, 0.1], [0.1, 0.3]], "l1_values": [0, 0.1]})"));
  const fs::path dir = fresh_dir("lc");
  RunOptions o;
  o.output_dir = dir;
  const ExperimentResult r = run_experiment(c, o);
  CHECK(r.curves.size() == 4);
  CHECK(fs::exists(dir / "loss_curve.csv"));
  CHECK(fs::exists(dir / "loss_curve_summary.csv"));
  fs::remove_all(dir);
}

TEST_CASE("runtime failures leave an incomplete manifest") {
  json j = json::parse(R"({
    "kind": "hedging_degree", "name": "missing_stream", "seeds": [0],
    "sae": {"widths": [2], "activation": "relu"},
    "train": {"batch_size": 16, "samples": 160},
    "stream": "/nonexistent/acts.bin", "new_latents": 1, "continue_samples": 16
  })");
  const fs::path dir = fresh_dir("fail");
  RunOptions o;
  o.output_dir = dir;
  const ExperimentResult r = run_experiment(parse_experiment_config(j), o);
  CHECK_FALSE(r.complete);
  CHECK_FALSE(r.error.empty());
  const json manifest = json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest.at("status") == "incomplete");
  fs::remove_all(dir);
}

TEST_CASE("alignment table is long form") {
  const FeatureBasis basis = make_basis(6, 2, 0);
  SaeParams p(6, 2, Activation::relu(), false);
  p.w_dec() = basis.features;
  p.w_enc() = basis.features;
  const CsvTable t = alignment_table(alignment(p, basis));
  CHECK(t.rows() == 4);
}
