#include "saelab/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace saelab {

using json = nlohmann::json;

namespace {

const std::vector<std::pair<ExperimentKind, const char*>> kKindNames = {
    {ExperimentKind::kToyFigure, "toy_figure"},
    {ExperimentKind::kSingleLatent, "single_latent"},
    {ExperimentKind::kCorrelationSweep, "correlation_sweep"},
    {ExperimentKind::kLossCurve, "loss_curve"},
    {ExperimentKind::kFullWidthControl, "full_width_control"},
    {ExperimentKind::kHedgingDegree, "hedging_degree"},
    {ExperimentKind::kBalanceToy, "balance_toy"},
    {ExperimentKind::kUnbalanceableToy, "unbalanceable_toy"},
    {ExperimentKind::kBalanceSweep, "balance_sweep"},
};

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& section) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& item : obj.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError(section + ": unknown key '" + item.key() + "'");
    }
  }
}

template <typename T>
T get(const json& obj, const char* key, const std::string& section) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& section) {
  if (!obj.contains(key)) return fallback;
  return get<T>(obj, key, section);
}

FeatureFiring parse_feature(const json& f, std::size_t index) {
  const std::string section = "feature_model.features[" + std::to_string(index) + "]";
  check_keys(f, {"p", "parent", "p_if_parent_on", "p_if_parent_off", "partner", "rho"}, section);
  FeatureFiring out;
  if (f.contains("parent")) {
    if (f.contains("p") || f.contains("partner")) {
      throw ConfigError(section + ": a conditioned feature takes only parent / p_if_parent_on / p_if_parent_off");
    }
    out.condition = ConditionRule{get<Index>(f, "parent", section),
                                  get<double>(f, "p_if_parent_on", section),
                                  get<double>(f, "p_if_parent_off", section)};
  } else if (f.contains("partner")) {
    out.prob = get<double>(f, "p", section);
    out.correlation = CorrelationRule{get<Index>(f, "partner", section), get<double>(f, "rho", section)};
  } else {
    if (f.contains("rho") || f.contains("p_if_parent_on") || f.contains("p_if_parent_off")) {
      throw ConfigError(section + ": rule fields given without parent/partner");
    }
    out.prob = get<double>(f, "p", section);
  }
  return out;
}

std::optional<MatryoshkaSpec> parse_matryoshka(const json& j) {
  if (j.is_null()) return std::nullopt;
  check_keys(j, {"prefixes", "betas", "detached_inner"}, "sae.matryoshka");
  MatryoshkaSpec spec;
  spec.prefixes = get<std::vector<Index>>(j, "prefixes", "sae.matryoshka");
  spec.betas = j.contains("betas") ? get<std::vector<double>>(j, "betas", "sae.matryoshka")
                                   : std::vector<double>(spec.prefixes.size(), 1.0);
  spec.detached_inner = get_or<bool>(j, "detached_inner", false, "sae.matryoshka");
  return spec;
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
  for (const auto& [k, n] : kKindNames) {
    if (name == n) return k;
  }
  throw ConfigError("unknown experiment kind '" + name + "'");
}

std::string BetaSetting::label() const {
  if (detached) return "detached";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", beta);
  return buf;
}

FeatureModelConfig parse_feature_model(const json& j) {
  check_keys(j, {"dims", "axis_aligned", "features"}, "feature_model");
  FeatureModelConfig out;
  out.dims = get<Index>(j, "dims", "feature_model");
  out.axis_aligned = get_or<bool>(j, "axis_aligned", false, "feature_model");
  const json& features = j.at("features");
  if (!features.is_array() || features.empty()) {
    throw ConfigError("feature_model.features: expected a non-empty list");
  }
  for (std::size_t i = 0; i < features.size(); ++i) out.features.push_back(parse_feature(features[i], i));
  if (static_cast<Index>(out.features.size()) > out.dims) {
    throw ConfigError("feature_model: more features than dims");
  }
  (void)out.firing();  // validates rules and feasibility
  return out;
}

TrainConfig parse_train_config(const json& j) {
  const std::string s = "train";
  check_keys(j, {"lr", "beta1", "beta2", "eps", "batch_size", "samples", "l1", "l1_warmup_steps",
                 "l1_min", "aux_coeff", "aux_k", "dead_window", "sparsity", "log_every"},
             s);
  TrainConfig t;
  if (j.contains("lr")) t.adam.lr = get<double>(j, "lr", s);
  t.adam.beta1 = get_or<double>(j, "beta1", t.adam.beta1, s);
  t.adam.beta2 = get_or<double>(j, "beta2", t.adam.beta2, s);
  t.adam.eps = get_or<double>(j, "eps", t.adam.eps, s);
  t.batch_size = get_or<Index>(j, "batch_size", t.batch_size, s);
  t.total_samples = get_or<std::int64_t>(j, "samples", t.total_samples, s);
  t.l1 = get_or<double>(j, "l1", t.l1, s);
  t.l1_warmup_steps = get_or<std::int64_t>(j, "l1_warmup_steps", t.l1_warmup_steps, s);
  if (j.contains("l1_min")) t.l1_min = get<double>(j, "l1_min", s);
  t.aux_coeff = get_or<double>(j, "aux_coeff", t.aux_coeff, s);
  t.aux_k = get_or<Index>(j, "aux_k", t.aux_k, s);
  t.dead_window = get_or<std::int64_t>(j, "dead_window", t.dead_window, s);
  t.log_every = get_or<std::int64_t>(j, "log_every", t.log_every, s);
  const std::string sparsity = get_or<std::string>(j, "sparsity", "decoder_norm_l1", s);
  if (sparsity == "decoder_norm_l1") {
    t.sparsity = SparsityPenalty::kDecoderNormL1;
  } else if (sparsity == "plain_l1") {
    t.sparsity = SparsityPenalty::kPlainL1;
  } else {
    throw ConfigError("train.sparsity: expected decoder_norm_l1 or plain_l1");
  }
  t.validate();
  return t;
}

SaeConfig parse_sae_config(const json& j) {
  const std::string s = "sae";
  check_keys(j, {"widths", "activation", "k", "tied", "init_norm", "matryoshka", "init_from_features"}, s);
  SaeConfig out;
  out.widths = get<std::vector<Index>>(j, "widths", s);
  if (out.widths.empty()) throw ConfigError("sae.widths: need at least one width");
  for (Index w : out.widths) {
    if (w <= 0) throw ConfigError("sae.widths: widths must be positive");
  }
  out.activation.kind = activation_kind_from_string(get_or<std::string>(j, "activation", "relu", s));
  out.activation.k = get_or<Index>(j, "k", 0, s);
  if (out.activation.is_topk_family()) {
    for (Index w : out.widths) {
      if (out.activation.k < 1 || out.activation.k > w) throw ConfigError("sae.k: need 1 <= k <= width");
    }
  }
  out.tied = get_or<bool>(j, "tied", false, s);
  out.init_norm = get_or<double>(j, "init_norm", 0.1, s);
  out.init_from_features = get_or<bool>(j, "init_from_features", false, s);
  if (j.contains("matryoshka")) out.matryoshka = parse_matryoshka(j.at("matryoshka"));
  if (out.matryoshka) {
    for (Index w : out.widths) out.matryoshka->validate(w);
  }
  return out;
}

ExperimentConfig parse_experiment_config(const json& doc) {
  check_keys(doc, {"kind", "name", "description", "output_dir", "seeds", "threads", "feature_model",
                   "sae", "train", "rhos", "cases", "l1_values", "grid_step", "new_latents",
                   "continue_samples", "random_draws", "stream", "betas"},
             "config");
  ExperimentConfig c;
  c.source = doc;
  c.kind = experiment_kind_from_string(get<std::string>(doc, "kind", "config"));
  c.name = get_or<std::string>(doc, "name", to_string(c.kind), "config");
  c.output_dir = get_or<std::string>(doc, "output_dir", "out/" + c.name, "config");
  c.seeds = get_or<std::vector<std::uint64_t>>(doc, "seeds", {0}, "config");
  if (c.seeds.empty()) throw ConfigError("config.seeds: need at least one seed");
  c.threads = get_or<int>(doc, "threads", 1, "config");

  auto require = [&](const char* key) {
    if (!doc.contains(key)) {
      throw ConfigError("config: kind '" + to_string(c.kind) + "' requires '" + key + "'");
    }
  };
  auto forbid = [&](std::initializer_list<const char*> keys) {
    for (const char* key : keys) {
      if (doc.contains(key)) {
        throw ConfigError("config: key '" + std::string(key) + "' does not apply to kind '" +
                          to_string(c.kind) + "'");
      }
    }
  };

  if (c.kind == ExperimentKind::kLossCurve) {
    forbid({"feature_model", "sae", "train", "rhos", "betas", "new_latents", "continue_samples",
            "random_draws", "stream"});
    require("cases");
    require("l1_values");
    for (const json& pair : doc.at("cases")) {
      if (!pair.is_array() || pair.size() != 2) {
        throw ConfigError("config.cases: each case is [p_parent_alone, p_both]");
      }
      c.cases.emplace_back(pair[0].get<double>(), pair[1].get<double>());
    }
    c.l1_values = get<std::vector<double>>(doc, "l1_values", "config");
    c.grid_step = get_or<double>(doc, "grid_step", c.grid_step, "config");
    if (!(c.grid_step > 0.0 && c.grid_step <= 1.0)) throw ConfigError("config.grid_step: must be in (0, 1]");
    return c;
  }

  require("sae");
  require("train");
  c.sae = parse_sae_config(doc.at("sae"));
  c.train = parse_train_config(doc.at("train"));
  if (doc.contains("feature_model")) c.feature_model = parse_feature_model(doc.at("feature_model"));

  switch (c.kind) {
    case ExperimentKind::kToyFigure:
    case ExperimentKind::kSingleLatent:
    case ExperimentKind::kFullWidthControl:
      forbid({"rhos", "betas", "cases", "l1_values", "new_latents", "continue_samples", "stream"});
      require("feature_model");
      break;
    case ExperimentKind::kCorrelationSweep: {
      forbid({"betas", "cases", "l1_values", "new_latents", "continue_samples", "stream"});
      require("feature_model");
      require("rhos");
      c.rhos = get<std::vector<double>>(doc, "rhos", "config");
      const auto& features = c.feature_model->features;
      if (features.size() != 2 || !features[1].correlation || features[1].correlation->partner != 0) {
        throw ConfigError("correlation_sweep: feature_model needs two features, the second with partner 0");
      }
      break;
    }
    case ExperimentKind::kHedgingDegree:
      forbid({"rhos", "betas", "cases", "l1_values"});
      require("new_latents");
      require("continue_samples");
      c.new_latents = get<Index>(doc, "new_latents", "config");
      c.continue_samples = get<std::int64_t>(doc, "continue_samples", "config");
      c.random_draws = get_or<Index>(doc, "random_draws", 1, "config");
      if (doc.contains("stream")) c.stream = get<std::string>(doc, "stream", "config");
      if (c.stream.has_value() == c.feature_model.has_value()) {
        throw ConfigError("hedging_degree: give exactly one of 'feature_model' or 'stream'");
      }
      if (c.new_latents <= 0 || c.continue_samples < 0 || c.random_draws < 1) {
        throw ConfigError("hedging_degree: need new_latents > 0, continue_samples >= 0, random_draws >= 1");
      }
      break;
    case ExperimentKind::kBalanceToy:
    case ExperimentKind::kUnbalanceableToy:
    case ExperimentKind::kBalanceSweep:
      forbid({"rhos", "cases", "l1_values", "new_latents", "continue_samples", "stream"});
      require("feature_model");
      require("betas");
      if (!c.sae.matryoshka || c.sae.matryoshka->prefixes.size() < 2) {
        throw ConfigError("balance experiments need sae.matryoshka with at least one inner level");
      }
      for (const json& b : doc.at("betas")) {
        if (b.is_string() && b.get<std::string>() == "detached") {
          c.betas.push_back({1.0, true});
        } else if (b.is_number() && b.get<double>() >= 0.0) {
          c.betas.push_back({b.get<double>(), false});
        } else {
          throw ConfigError("config.betas: entries are non-negative numbers or \"detached\"");
        }
      }
      break;
    case ExperimentKind::kLossCurve:
      break;
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment_config(doc);
}

std::string config_hash(const json& doc) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace saelab
