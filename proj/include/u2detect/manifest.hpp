#pragma once

// Run manifest for the command-line pipeline.
//
//   {
//     "template": "builtin:bergman" | "path/to/template.json",
//     "out": "run",
//     "seed": 7,
//     "simulation": {"horizon_min": 420, "tau_min": 0.001, "substeps": 4,
//                    "noise_sd": 0, "baseline_glucose": 350, "allow_wide_inputs": false},
//     "training": {<TrainingConfig fields>, "init_perturbation": 0.2},
//     "calibration": {"alpha": 0.05, "threshold": 0.01,
//                     "reference": "builtin:bergman", "map": "bergman" | "identity"},
//     "presets": ["case-train", "case-test", "case-faults"],
//     "scenarios": [{"name": "s1", "role": "train" | "test" | "detect",
//                    "bolus": 15, "meal": 17, "fault": {...}, "seed": 3}]
//   }
//
// Relative paths resolve against the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "u2detect/bergman.hpp"
#include "u2detect/dih_rnn.hpp"
#include "u2detect/error.hpp"
#include "u2detect/io.hpp"

namespace u2d::cli {

enum class Role { train, test, detect };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::test: return "test";
    case Role::detect: return "detect";
  }
  return "?";
}

struct ScenarioSpec {
  std::string name;
  Role role = Role::detect;
  double bolus_U = 0.0;
  double meal_g = 0.0;
  bergman::FaultScenario fault;
  std::uint64_t seed = 0;
};

struct CalibrationSettings {
  double alpha = 0.05;
  double threshold = 0.01;
  std::string reference = "builtin:bergman";
  std::string map = "bergman";
};

struct RunManifest {
  std::filesystem::path source;
  std::string template_ref = "builtin:bergman";
  std::filesystem::path out_dir = "run";
  std::uint64_t seed = 0;
  bergman::ScenarioOptions simulation;
  TrainingConfig training;
  double init_perturbation = 0.0;
  CalibrationSettings calibration;
  std::vector<ScenarioSpec> scenarios;

  ModelTemplate model() const { return io::load_template(template_ref); }

  CoefficientVector reference() const { return io::load_coefficients(calibration.reference); }

  CoefficientMap coefficient_map() const {
    if (calibration.map == "bergman") return bergman::physical_map;
    return identity_map;
  }

  /// Training config for one scenario: its own seed, and the perturbed
  /// start point when init_perturbation is set.
  TrainingConfig training_for(const ScenarioSpec& s) const {
    TrainingConfig c = training;
    c.seed = mix(s.seed, 0x6d696e65ull);
    if (init_perturbation > 0.0) {
      const CoefficientVector base = c.initial ? *c.initial : c.prior ? *c.prior : CoefficientVector();
      if (base.empty()) throw ValidationError("init_perturbation needs an initial or prior coefficient vector");
      c.initial = perturbed(base, init_perturbation, c.seed);
    }
    return c;
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::vector<const ScenarioSpec*> with_role(Role r) const {
    std::vector<const ScenarioSpec*> out;
    for (const auto& s : scenarios)
      if (s.role == r) out.push_back(&s);
    return out;
  }
};

namespace detail {

inline bool valid_name(const std::string& s) {
  if (s.empty() || s.size() > 128) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) return false;
  return s.front() != '.';
}

inline std::string fault_label(const bergman::FaultScenario& f) {
  using K = bergman::FaultScenario::Kind;
  if (f.kind == K::none) return "clean";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s-%g-%g", f.kind == K::cartridge_blockage ? "blockage" : "phantom",
                f.block_fraction * 100.0, f.release_time_min);
  return buf;
}

inline std::string resolve(const std::string& ref, const std::filesystem::path& base) {
  if (ref.rfind("builtin:", 0) == 0) return ref;
  std::filesystem::path p(ref);
  if (p.is_relative()) p = base / p;
  if (!std::filesystem::exists(p)) throw ValidationError("referenced file '" + ref + "' does not exist");
  return p.string();
}

}  // namespace detail

inline RunManifest parse_manifest(const io::json& j, const std::filesystem::path& source = {}) {
  using io::detail::schema_error;
  if (!j.is_object()) schema_error("", "manifest must be a JSON object");
  static const char* const known[] = {"template", "out", "seed", "simulation", "training", "calibration", "presets", "scenarios"};
  for (const auto& [k, v] : j.items())
    if (std::find(std::begin(known), std::end(known), k) == std::end(known)) schema_error("/" + k, "unknown manifest field");

  RunManifest m;
  m.source = source;
  const auto base = source.empty() ? std::filesystem::current_path() : std::filesystem::absolute(source).parent_path();

  if (j.contains("template")) m.template_ref = io::detail::string(j["template"], "/template");
  m.template_ref = detail::resolve(m.template_ref, base);
  const ModelTemplate tpl = m.model();
  if (j.contains("out")) {
    std::filesystem::path out(io::detail::string(j["out"], "/out"));
    m.out_dir = out.is_relative() ? base / out : out;
  } else {
    m.out_dir = base / "run";
  }
  m.seed = io::detail::opt_u64(j, "seed", 0, "");

  if (j.contains("simulation")) {
    const auto& s = j["simulation"];
    if (!s.is_object()) schema_error("/simulation", "expected an object");
    auto& o = m.simulation;
    o.horizon_min = io::detail::opt_number(s, "horizon_min", o.horizon_min, "/simulation");
    o.tau_min = io::detail::opt_number(s, "tau_min", o.tau_min, "/simulation");
    o.substeps = static_cast<std::size_t>(io::detail::opt_u64(s, "substeps", o.substeps, "/simulation"));
    o.noise_sd = io::detail::opt_number(s, "noise_sd", o.noise_sd, "/simulation");
    o.baseline_glucose = io::detail::opt_number(s, "baseline_glucose", o.baseline_glucose, "/simulation");
    if (s.contains("allow_wide_inputs")) {
      if (!s["allow_wide_inputs"].is_boolean()) schema_error("/simulation/allow_wide_inputs", "expected a boolean");
      o.allow_wide_inputs = s["allow_wide_inputs"].get<bool>();
    }
    if (!(o.tau_min > 0.0) || !(o.horizon_min > o.tau_min)) schema_error("/simulation", "need 0 < tau_min < horizon_min");
    if (o.substeps < 1) schema_error("/simulation/substeps", "must be >= 1");
    if (o.noise_sd < 0.0) schema_error("/simulation/noise_sd", "must be >= 0");
  }

  const bool bergman_tpl = m.template_ref == "builtin:bergman";
  TrainingConfig base_cfg = bergman_tpl ? bergman::case_study_mining_config() : TrainingConfig{};
  if (j.contains("training")) {
    const auto& t = j["training"];
    if (t.is_object()) {
      io::json resolved = t;
      for (const char* key : {"initial", "prior"})
        if (resolved.contains(key) && resolved[key].is_string())
          resolved[key] = detail::resolve(resolved[key].get<std::string>(), base);
      m.init_perturbation = io::detail::opt_number(t, "init_perturbation", 0.0, "/training");
      if (!(m.init_perturbation >= 0.0 && m.init_perturbation < 1.0))
        schema_error("/training/init_perturbation", "must lie in [0, 1)");
      try {
        base_cfg = io::training_config_from_json(resolved, base_cfg, "/training");
      } catch (const ValidationError& e) {
        const std::string what = e.what();
        throw ValidationError(what.rfind("/training", 0) == 0 ? what : "/training: " + what);
      }
    } else {
      schema_error("/training", "expected an object");
    }
  }
  m.training = base_cfg;
  if (m.training.initial) check_binds(tpl, *m.training.initial);
  if (m.training.prior) check_binds(tpl, *m.training.prior);
  if (m.init_perturbation > 0.0 && !m.training.initial && !m.training.prior)
    schema_error("/training/init_perturbation", "needs an initial or prior coefficient vector");

  m.calibration.map = bergman_tpl ? "bergman" : "identity";
  m.calibration.reference = bergman_tpl ? "builtin:bergman" : "";
  if (j.contains("calibration")) {
    const auto& c = j["calibration"];
    if (!c.is_object()) schema_error("/calibration", "expected an object");
    m.calibration.alpha = io::detail::opt_number(c, "alpha", m.calibration.alpha, "/calibration");
    m.calibration.threshold = io::detail::opt_number(c, "threshold", m.calibration.threshold, "/calibration");
    if (c.contains("reference")) m.calibration.reference = io::detail::string(c["reference"], "/calibration/reference");
    if (c.contains("map")) m.calibration.map = io::detail::string(c["map"], "/calibration/map");
    if (!(m.calibration.alpha >= 0.0 && m.calibration.alpha < 1.0)) schema_error("/calibration/alpha", "must lie in [0, 1)");
    if (m.calibration.map != "bergman" && m.calibration.map != "identity")
      schema_error("/calibration/map", "expected 'bergman' or 'identity'");
    if (m.calibration.map == "bergman" && tpl.slot_count() != bergman::bergman_template().slot_count())
      schema_error("/calibration/map", "'bergman' map needs the Bergman template");
  }
  if (!m.calibration.reference.empty()) {
    m.calibration.reference = detail::resolve(m.calibration.reference, base);
    m.reference();  // parse now so bad references fail before any output
  }

  std::vector<ScenarioSpec> specs;
  if (j.contains("presets")) {
    if (!j["presets"].is_array()) schema_error("/presets", "expected an array");
    for (std::size_t i = 0; i < j["presets"].size(); ++i) {
      const std::string p = io::detail::string(j["presets"][i], "/presets/" + std::to_string(i));
      const auto sets = bergman::case_study_input_sets();
      if (p == "case-train" || p == "case-test") {
        const bool train = p == "case-train";
        const auto& pts = train ? sets.train : sets.test;
        for (std::size_t k = 0; k < pts.size(); ++k)
          specs.push_back({std::string(train ? "train-" : "test-") + std::to_string(k + 1), train ? Role::train : Role::test,
                           pts[k].bolus_U, pts[k].meal_g, bergman::FaultScenario::none(), 0});
      } else if (p == "case-faults") {
        for (const auto& f : bergman::case_study_fault_scenarios())
          specs.push_back({detail::fault_label(f), Role::detect, bergman::kFaultInput.bolus_U, bergman::kFaultInput.meal_g, f, 0});
      } else {
        schema_error("/presets/" + std::to_string(i), "unknown preset '" + p + "'");
      }
    }
  }
  if (j.contains("scenarios")) {
    const auto& arr = j["scenarios"];
    if (!arr.is_array()) schema_error("/scenarios", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string w = "/scenarios/" + std::to_string(i);
      const auto& s = arr[i];
      if (!s.is_object()) schema_error(w, "expected an object");
      ScenarioSpec spec;
      spec.bolus_U = io::detail::number(io::detail::member(s, "bolus", w), w + "/bolus");
      spec.meal_g = io::detail::number(io::detail::member(s, "meal", w), w + "/meal");
      if (s.contains("fault")) spec.fault = io::fault_from_json(s["fault"], w + "/fault");
      if (s.contains("role")) {
        const std::string r = io::detail::string(s["role"], w + "/role");
        if (r == "train") spec.role = Role::train;
        else if (r == "test") spec.role = Role::test;
        else if (r == "detect") spec.role = Role::detect;
        else schema_error(w + "/role", "expected train, test or detect");
      }
      spec.name = s.contains("name") ? io::detail::string(s["name"], w + "/name")
                                     : std::string(role_name(spec.role)) + "-" + detail::fault_label(spec.fault) + "-" +
                                           std::to_string(i + 1);
      if (s.contains("seed")) spec.seed = io::detail::opt_u64(s, "seed", 0, w);
      else spec.seed = RunManifest::mix(m.seed, i + 1);
      specs.push_back(spec);
    }
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& s = specs[i];
    if (s.seed == 0) s.seed = RunManifest::mix(m.seed, 0x70726573ull + i);
    if (!detail::valid_name(s.name)) schema_error("/scenarios", "invalid scenario name '" + s.name + "'");
    if (!names.insert(s.name).second) schema_error("/scenarios", "duplicate scenario name '" + s.name + "'");
    if (!(s.bolus_U >= 0.0) || !(s.meal_g >= 0.0)) schema_error("/scenarios/" + s.name, "bolus and meal must be >= 0");
    if (!m.simulation.allow_wide_inputs && (s.bolus_U > 40.0 || s.meal_g > 28.0))
      schema_error("/scenarios/" + s.name, "input outside the 0-40 U x 0-28 g box (set simulation.allow_wide_inputs)");
    if (s.fault.kind != bergman::FaultScenario::Kind::none &&
        !(s.fault.release_time_min > 0.0 && s.fault.release_time_min < m.simulation.horizon_min))
      schema_error("/scenarios/" + s.name + "/fault", "release time outside the horizon");
  }
  m.scenarios = std::move(specs);
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(io::load_json(path), path);
}

}  // namespace u2d::cli
