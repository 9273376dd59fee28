#include <algorithm>
#include <cmath>
#include <numeric>

#include "modnet/error.hpp"
#include "modnet/exp/experiment.hpp"

namespace modnet::exp {

namespace {

struct MethodName {
  Method method;
  const char* name;
};

constexpr MethodName kMethodNames[] = {
    {Method::erm, "ERM"},          {Method::irm, "IRM"},
    {Method::rex, "REx"},          {Method::dro, "DRO"},
    {Method::mrm, "MRM"},          {Method::mod_irm, "ModIRM"},
    {Method::mod_rex, "ModREx"},   {Method::mod_dro, "ModDRO"},
    {Method::oracle, "oracle"},    {Method::rand_whole, "rand_whole"},
    {Method::rand_layer, "rand_layer"}, {Method::magnitude, "magnitude"},
    {Method::joint_prune, "joint_prune"}, {Method::unbias, "unbias"},
};

}  // namespace

std::string to_string(Method m) {
  for (const auto& mn : kMethodNames)
    if (mn.method == m) return mn.name;
  throw ConfigError("unknown method");
}

Method method_from_string(const std::string& s) {
  for (const auto& mn : kMethodNames)
    if (s == mn.name) return mn.method;
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& mn : kMethodNames) {
    std::string n = mn.name;
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == n) return mn.method;
  }
  throw ConfigError("unknown method '" + s + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> v;
    for (const auto& mn : kMethodNames) v.push_back(mn.method);
    return v;
  }();
  return methods;
}

risk::ObjectiveKind objective_of(Method m) {
  switch (m) {
    case Method::irm:
    case Method::mod_irm:
      return risk::ObjectiveKind::irm;
    case Method::rex:
    case Method::mod_rex:
      return risk::ObjectiveKind::rex;
    case Method::dro:
    case Method::mod_dro:
      return risk::ObjectiveKind::dro;
    default:
      return risk::ObjectiveKind::erm;
  }
}

bool is_modular(Method m) {
  switch (m) {
    case Method::erm:
    case Method::irm:
    case Method::rex:
    case Method::dro:
    case Method::unbias:
      return false;
    default:
      return true;
  }
}

std::string to_string(Reporting r) { return r == Reporting::last_step ? "last_step" : "oracle_validation"; }

Reporting reporting_from_string(const std::string& s) {
  if (s == "last_step") return Reporting::last_step;
  if (s == "oracle_validation") return Reporting::oracle_validation;
  throw ConfigError("unknown reporting mode '" + s + "'");
}

std::string to_string(Preset p) { return p == Preset::desk ? "desk" : "paper"; }

Preset preset_from_string(const std::string& s) {
  if (s == "desk") return Preset::desk;
  if (s == "paper") return Preset::paper;
  throw ConfigError("unknown preset '" + s + "' (expected desk or paper)");
}

void DatasetConfig::validate() const {
  if (generator == "full_colored_mnist") {
    bias_spec().validate();
    if (num_seen >= bias_coefficients.size()) throw ConfigError("full_colored_mnist needs an out-domain environment");
  } else if (generator != "mnist") {
    throw ConfigError("unknown dataset generator '" + generator + "'");
  }
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in (0,1)");
}

io::json DatasetConfig::to_json() const {
  return {{"generator", generator}, {"bias_coefficients", bias_coefficients},
          {"mapping", mapping},     {"num_seen", num_seen},
          {"limit", limit},         {"holdout_fraction", holdout_fraction}};
}

DatasetConfig DatasetConfig::from_json(const io::json& j, DatasetConfig d) {
  try {
    d.generator = j.value("generator", d.generator);
    d.bias_coefficients = j.value("bias_coefficients", d.bias_coefficients);
    d.mapping = j.value("mapping", d.mapping);
    d.num_seen = j.value("num_seen", d.num_seen);
    d.limit = j.value("limit", d.limit);
    d.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  } catch (const io::json::exception& e) {
    throw ConfigError(std::string("dataset block: ") + e.what());
  }
  return d;
}

data::BiasSpec DatasetConfig::bias_spec() const {
  data::BiasSpec s;
  s.mapping = mapping;
  s.bias_coefficients = bias_coefficients;
  s.num_seen = num_seen;
  return s;
}

ExperimentConfig ExperimentConfig::defaults(Preset preset, Method method) {
  ExperimentConfig c;
  c.preset = preset;
  c.method = method;
  if (preset == Preset::desk) {
    // half-width network and short schedules sized for one CPU core
    c.dataset.limit = 10000;
    c.mrm.n1 = c.mrm.n2 = 500;
    c.mrm.batch_size = 64;
    c.mrm.net.widths = {32, 64, 128};
    c.mrm.model_optimizer = nn::OptimizerConfig::sgd(0.1, 0.9, 1e-4, 150, 0.1);
    c.mrm.alpha = 1e-6;
    c.mrm.logit_optimizer = nn::OptimizerConfig::adam(0.1);
    c.num_seeds = 3;
  } else {
    c.dataset.limit = 0;
    c.mrm.n1 = c.mrm.n2 = 2000;
    c.mrm.batch_size = 128;
    c.mrm.net.widths = {64, 128, 256};
    c.mrm.model_optimizer = nn::OptimizerConfig::sgd(0.1, 0.9, 1e-4, 600, 0.1);
    c.mrm.alpha = 1e-5;
    c.mrm.logit_optimizer = nn::OptimizerConfig::adam(0.1);
    c.num_seeds = 5;
  }
  c.normalize();
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const io::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  try {
    const auto preset = preset_from_string(j.value("preset", std::string("desk")));
    const auto method = method_from_string(j.value("method", std::string("MRM")));
    auto c = defaults(preset, method);
    if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"), c.dataset);
    if (j.contains("mrm")) {
      auto merged = c.mrm.to_json();
      merged.merge_patch(j.at("mrm"));
      c.mrm = mrm::MrmConfig::from_json(merged);
    }
    c.num_seeds = j.value("num_seeds", c.num_seeds);
    c.base_seed = j.value("base_seed", c.base_seed);
    if (j.contains("reporting")) c.reporting = reporting_from_string(j.at("reporting").get<std::string>());
    c.target_keep_ratio = j.value("target_keep_ratio", c.target_keep_ratio);
    c.prune_max_steps = j.value("prune_max_steps", c.prune_max_steps);
    c.retrain = j.value("retrain", c.retrain);
    c.forced_mask = j.value("forced_mask", c.forced_mask);
    c.normalize();
    c.validate();
    return c;
  } catch (const io::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

io::json ExperimentConfig::to_json() const {
  return {{"preset", exp::to_string(preset)},
          {"dataset", dataset.to_json()},
          {"method", exp::to_string(method)},
          {"mrm", mrm.to_json()},
          {"num_seeds", num_seeds},
          {"base_seed", base_seed},
          {"reporting", exp::to_string(reporting)},
          {"target_keep_ratio", target_keep_ratio},
          {"prune_max_steps", prune_max_steps},
          {"retrain", retrain},
          {"forced_mask", forced_mask}};
}

void ExperimentConfig::normalize() {
  mrm.objective.kind = objective_of(method);
  if (method == Method::unbias) std::fill(dataset.bias_coefficients.begin(), dataset.bias_coefficients.end(), 0.0);
}

void ExperimentConfig::validate() const {
  dataset.validate();
  mrm.validate();
  if (num_seeds == 0) throw ConfigError("num_seeds must be at least 1");
  if (!(target_keep_ratio > 0.0 && target_keep_ratio <= 1.0))
    throw ConfigError("target_keep_ratio must lie in (0,1]");
  if (prune_max_steps < 0) throw ConfigError("prune_max_steps must be non-negative");
  if (mrm.objective.kind != objective_of(method)) throw ConfigError("objective does not match the method");
  if (method == Method::unbias &&
      std::any_of(dataset.bias_coefficients.begin(), dataset.bias_coefficients.end(), [](double p) { return p != 0.0; }))
    throw ConfigError("unbias requires all bias coefficients to be 0");
  const bool mrm_family = method == Method::mrm || method == Method::mod_irm || method == Method::mod_rex ||
                          method == Method::mod_dro;
  if (!mrm_family && (!retrain || !forced_mask.empty()))
    throw ConfigError("retrain and forced_mask apply to MRM-family methods only");
  if (!retrain && !forced_mask.empty()) throw ConfigError("a forced mask needs the retrain stage");
  if (method == Method::oracle && dataset.generator != "full_colored_mnist")
    throw ConfigError("the oracle needs an out-domain environment");
}

io::json ExperimentConfig::identity() const {
  auto j = to_json();
  j.erase("num_seeds");
  j.erase("base_seed");
  return j;
}

std::string ExperimentConfig::hash() const { return io::fnv1a_hex(identity().dump()); }

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
  std::vector<std::uint64_t> s(num_seeds);
  std::iota(s.begin(), s.end(), base_seed);
  return s;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace modnet::exp
