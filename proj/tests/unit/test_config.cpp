#include "doctest.h"

#include "saelab/config.hpp"

#include <json.hpp>

#include <filesystem>

using namespace saelab;
using nlohmann::json;

namespace {

json toy() {
  return json::parse(R"({
    "kind": "toy_figure",
    "name": "t",
    "seeds": [0, 1],
    "feature_model": {"dims": 10, "features": [{"p": 0.25}, {"parent": 0, "p_if_parent_on": 0.2, "p_if_parent_off": 0.0}]},
    "sae": {"widths": [2], "activation": "relu"},
    "train": {"lr": 1e-3, "batch_size": 16, "samples": 1600, "l1": 0.01}
  })");
}

}  // namespace

TEST_CASE("a minimal toy config parses") {
  const ExperimentConfig c = parse_experiment_config(toy());
  CHECK(c.kind == ExperimentKind::kToyFigure);
  CHECK(c.seeds == std::vector<std::uint64_t>{0, 1});
  REQUIRE(c.feature_model);
  CHECK(c.feature_model->dims == 10);
  CHECK(c.feature_model->firing().marginals()[1] == doctest::Approx(0.05));
  CHECK(c.sae.widths == std::vector<Index>{2});
  CHECK(c.train.batch_size == 16);
  CHECK(*c.train.adam.lr == 1e-3);
}

TEST_CASE("unknown keys are rejected") {
  json j = toy();
  j["colour"] = "blue";
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  j = toy();
  j["train"]["learning_rate"] = 1.0;
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  j = toy();
  j["feature_model"]["features"][0]["q"] = 0.1;
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
}

TEST_CASE("kind specific fields are required and confined") {
  json j = toy();
  j.erase("feature_model");
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);

  j = toy();
  j["rhos"] = {0.1};
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);

  j = toy();
  j["kind"] = "correlation_sweep";
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);

  j = toy();
  j["kind"] = "balance_toy";
  j["betas"] = {0.0, "detached"};
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
  j["sae"]["matryoshka"] = {{"prefixes", {1, 2}}};
  const ExperimentConfig c = parse_experiment_config(j);
  REQUIRE(c.betas.size() == 2);
  CHECK(c.betas[1].detached);
  CHECK(c.betas[1].label() == "detached");
  CHECK(c.betas[0].label() == "0");

  j["betas"] = {0.0, "sideways"};
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
}

TEST_CASE("loss curve kind needs no model") {
  const json j = json::parse(R"({"kind": "loss_curve", "name": "lc", "cases": [[0.3, 0.1]], "l1_values": [0, 0.1]})");
  const ExperimentConfig c = parse_experiment_config(j);
  CHECK(c.cases.size() == 1);
  CHECK(c.grid_step == 0.01);
  json bad = j;
  bad["sae"] = json::object();
  CHECK_THROWS_AS(parse_experiment_config(bad), ConfigError);
}

TEST_CASE("invalid values are rejected") {
  json j = toy();
  j["sae"]["activation"] = "gelu";
  CHECK_THROWS(parse_experiment_config(j));
  j = toy();
  j["train"]["batch_size"] = 0;
  CHECK_THROWS(parse_experiment_config(j));
  j = toy();
  j["feature_model"]["features"][0]["p"] = 1.5;
  CHECK_THROWS(parse_experiment_config(j));
  j = toy();
  j["kind"] = "no_such_kind";
  CHECK_THROWS_AS(parse_experiment_config(j), ConfigError);
}

TEST_CASE("config hash is stable and content sensitive") {
  const json a = toy();
  json b = toy();
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b["seeds"] = {0, 2};
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("every bundled config parses") {
  int count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(SAELAB_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_experiment_config(entry.path()));
    ++count;
  }
  CHECK(count >= 18);
}
