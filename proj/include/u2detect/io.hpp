#pragma once

// File formats.
//
// Template JSON:
//   {"variables": ["x", ...], "inputs": ["u", ...],
//    "a_pattern": [["-", "0"], ...], "b_pattern": ["+", ...],
//    "beta": [true, ...], "time_unit_s": 60}
// Slot labels: "0" structural zero, "+" positive, "-" negative, "*" any sign.
// An empty input name marks a variable with no external input.
//
// Trace CSV: header "time_s,<signal>,...", one row per sample, uniform spacing.
// Time is written in seconds; the template's time_unit_s converts it back to
// model time. Columns may appear in any order.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "u2detect/bergman.hpp"
#include "u2detect/conformance.hpp"
#include "u2detect/core_model.hpp"
#include "u2detect/dih_rnn.hpp"
#include "u2detect/error.hpp"

namespace u2d::io {

using json = nlohmann::json;

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary sibling and renames, so readers never see a half-written file.
inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out << content;
    if (!out.flush()) throw Error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Parses JSON text; syntax errors carry line:column of the offending byte.
inline json parse_json(const std::string& text, const std::string& source = "<input>") {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t upto = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < upto; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ParseError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what(), e.byte);
  }
}

inline json load_json(const std::filesystem::path& path) { return parse_json(read_text_file(path), path.string()); }

namespace detail {

[[noreturn]] inline void schema_error(const std::string& where, const std::string& what) {
  throw ValidationError(where + ": " + what);
}

inline const json& member(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object()) schema_error(where, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) schema_error(where, "missing field '" + key + "'");
  return *it;
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) schema_error(where, "expected a number");
  return j.get<double>();
}

inline std::string string(const json& j, const std::string& where) {
  if (!j.is_string()) schema_error(where, "expected a string");
  return j.get<std::string>();
}

inline std::vector<std::string> strings(const json& j, const std::string& where) {
  if (!j.is_array()) schema_error(where, "expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(string(j[i], where + "/" + std::to_string(i)));
  return out;
}

inline SlotSign sign(const json& j, const std::string& where) {
  const std::string s = string(j, where);
  try {
    return parse_slot_sign(s);
  } catch (const ValidationError& e) {
    schema_error(where, e.what());
  }
}

inline double opt_number(const json& j, const std::string& key, double fallback, const std::string& where) {
  auto it = j.find(key);
  return it == j.end() ? fallback : number(*it, where + "/" + key);
}

inline std::uint64_t opt_u64(const json& j, const std::string& key, std::uint64_t fallback, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() >= 0))
    schema_error(where + "/" + key, "expected a non-negative integer");
  return it->get<std::uint64_t>();
}

}  // namespace detail

// ---- templates ----------------------------------------------------------

inline ModelTemplate template_from_json(const json& j, const std::string& where = "") {
  using detail::member;
  const auto variables = detail::strings(member(j, "variables", where), where + "/variables");
  const auto inputs = detail::strings(member(j, "inputs", where), where + "/inputs");
  const json& a = member(j, "a_pattern", where);
  if (!a.is_array()) detail::schema_error(where + "/a_pattern", "expected an array of rows");
  std::vector<std::vector<SlotSign>> a_pattern;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::string row_where = where + "/a_pattern/" + std::to_string(i);
    if (!a[i].is_array()) detail::schema_error(row_where, "expected an array");
    std::vector<SlotSign> row;
    for (std::size_t k = 0; k < a[i].size(); ++k) row.push_back(detail::sign(a[i][k], row_where + "/" + std::to_string(k)));
    a_pattern.push_back(std::move(row));
  }
  const json& b = member(j, "b_pattern", where);
  if (!b.is_array()) detail::schema_error(where + "/b_pattern", "expected an array");
  std::vector<SlotSign> b_pattern;
  for (std::size_t i = 0; i < b.size(); ++i) b_pattern.push_back(detail::sign(b[i], where + "/b_pattern/" + std::to_string(i)));
  const json& be = member(j, "beta", where);
  if (!be.is_array()) detail::schema_error(where + "/beta", "expected an array");
  std::vector<bool> beta;
  for (std::size_t i = 0; i < be.size(); ++i) {
    if (be[i].is_boolean()) {
      beta.push_back(be[i].get<bool>());
    } else if (be[i].is_number_integer() && (be[i] == 0 || be[i] == 1)) {
      beta.push_back(be[i] == 1);
    } else {
      detail::schema_error(where + "/beta/" + std::to_string(i), "expected true/false or 0/1");
    }
  }
  const double unit = detail::opt_number(j, "time_unit_s", 1.0, where);
  return ModelTemplate(variables, inputs, a_pattern, b_pattern, beta, unit);
}

inline json template_to_json(const ModelTemplate& tpl) {
  json a = json::array();
  for (const auto& row : tpl.a_pattern()) {
    json r = json::array();
    for (auto s : row) r.push_back(std::string(1, slot_sign_code(s)));
    a.push_back(r);
  }
  json b = json::array();
  for (auto s : tpl.b_pattern()) b.push_back(std::string(1, slot_sign_code(s)));
  json beta = json::array();
  for (bool v : tpl.beta()) beta.push_back(v);
  return {{"variables", tpl.variables()}, {"inputs", tpl.inputs()}, {"a_pattern", a},
          {"b_pattern", b},               {"beta", beta},           {"time_unit_s", tpl.time_unit_s()}};
}

/// "builtin:bergman" or a path to a template JSON file.
inline ModelTemplate load_template(const std::string& ref) {
  if (ref == "builtin:bergman") return bergman::bergman_template();
  return template_from_json(load_json(ref), ref);
}

/// 64-bit FNV-1a over the canonical JSON form, as 16 hex digits.
inline std::string template_hash(const ModelTemplate& tpl) {
  const std::string s = template_to_json(tpl).dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- coefficients -------------------------------------------------------

inline json coefficients_to_json(const CoefficientVector& w) {
  json out = json::array();
  for (const auto& e : w) {
    json o = {{"name", e.name}, {"value", e.value}};
    if (!e.units.empty()) o["units"] = e.units;
    out.push_back(o);
  }
  return out;
}

inline CoefficientVector coefficients_from_json(const json& j, const std::string& where = "") {
  if (!j.is_array()) detail::schema_error(where, "expected an array of {name, value}");
  std::vector<CoefficientEntry> entries;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string w = where + "/" + std::to_string(i);
    CoefficientEntry e;
    e.name = detail::string(detail::member(j[i], "name", w), w + "/name");
    e.value = detail::number(detail::member(j[i], "value", w), w + "/value");
    if (j[i].contains("units")) e.units = detail::string(j[i]["units"], w + "/units");
    entries.push_back(std::move(e));
  }
  return CoefficientVector(std::move(entries));
}

/// "builtin:bergman" (the seven reference coefficients), "builtin:bergman-slots"
/// (the same model in template slot form), or a coefficients JSON file.
inline CoefficientVector load_coefficients(const std::string& ref) {
  if (ref == "builtin:bergman") return bergman::physical_vector(bergman::BergmanParams::reference());
  if (ref == "builtin:bergman-slots") return bergman::to_coefficients(bergman::BergmanParams::reference());
  const json j = load_json(ref);
  return coefficients_from_json(j.is_object() && j.contains("coefficients") ? j["coefficients"] : j, ref);
}

// ---- traces -------------------------------------------------------------

/// Shortest text that parses back to exactly v.
inline std::string format_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trace_to_csv(const Trace& trace, double time_unit_s = 1.0) {
  const auto names = trace.names();
  std::string out = "time_s";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  std::vector<const std::vector<double>*> cols;
  for (const auto& n : names) cols.push_back(&trace.at(n));
  for (std::size_t k = 0; k < trace.samples(); ++k) {
    out += format_number(trace.time_at(k) * time_unit_s);
    for (const auto* c : cols) {
      out += ',';
      out += format_number((*c)[k]);
    }
    out += '\n';
  }
  return out;
}

inline Trace trace_from_csv(const std::string& text, double time_unit_s = 1.0, const std::string& source = "<csv>") {
  if (!(time_unit_s > 0.0)) throw ValidationError("time_unit_s must be positive");
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur += c;
      }
    }
    f.push_back(cur);
    return f;
  };
  if (!std::getline(in, line)) throw ParseError(source + ": empty file", 0);
  const auto header = split(line);
  if (header.empty() || header[0] != "time_s") throw ParseError(source + ":1: first column must be time_s", 0);
  if (header.size() < 2) throw ParseError(source + ":1: no signal columns", 0);
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c].empty()) throw ParseError(source + ":1: empty column name", 0);
    for (std::size_t d = 1; d < c; ++d)
      if (header[d] == header[c]) throw ParseError(source + ":1: duplicate column '" + header[c] + "'", 0);
  }

  std::vector<double> times;
  std::vector<std::vector<double>> cols(header.size() - 1);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                           " fields, got " + std::to_string(f.size()),
                       lineno);
    for (std::size_t c = 0; c < f.size(); ++c) {
      const char* s = f[c].c_str();
      char* end = nullptr;
      const double v = std::strtod(s, &end);
      if (end == s || *end != '\0' || !std::isfinite(v))
        throw ParseError(source + ":" + std::to_string(lineno) + ": bad number '" + f[c] + "' in column " + header[c],
                         lineno);
      (c == 0 ? times : cols[c - 1]).push_back(v);
    }
  }
  if (times.size() < 2) throw ShapeError(source + ": a trace needs at least two samples");
  const double dt = times[1] - times[0];
  if (!(dt > 0.0)) throw ValidationError(source + ": time_s must be strictly increasing");
  for (std::size_t k = 1; k < times.size(); ++k) {
    const double expect = times[0] + static_cast<double>(k) * dt;
    if (std::abs(times[k] - expect) > 1e-6 * dt + 1e-12 * std::abs(expect))
      throw ValidationError(source + ": non-uniform sampling at row " + std::to_string(k + 2));
  }
  Trace trace(dt / time_unit_s, times[0] / time_unit_s);
  for (std::size_t c = 1; c < header.size(); ++c) trace.add(header[c], std::move(cols[c - 1]));
  return trace;
}

inline Trace load_trace(const std::filesystem::path& path, double time_unit_s = 1.0) {
  return trace_from_csv(read_text_file(path), time_unit_s, path.string());
}

// ---- configs and results ------------------------------------------------

inline json training_config_to_json(const TrainingConfig& c) {
  json j = {{"learning_rate", c.learning_rate},
            {"max_epochs", c.max_epochs},
            {"convergence_tol", c.convergence_tol},
            {"patience", c.patience},
            {"target_loss", c.target_loss},
            {"seed", c.seed},
            {"psi", c.psi},
            {"normalize_loss_per_signal", c.normalize_loss_per_signal},
            {"prior_weight", c.prior_weight},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"lr_decay", c.lr_decay},
            {"lr_patience", c.lr_patience},
            {"min_lr_fraction", c.min_lr_fraction},
            {"divergence_factor", c.divergence_factor}};
  if (c.initial) j["initial"] = coefficients_to_json(*c.initial);
  if (c.prior) j["prior"] = coefficients_to_json(*c.prior);
  return j;
}

/// Overlays the fields present in `j` onto `base`. "initial" and "prior" take a
/// coefficient list or a load_coefficients reference string.
inline TrainingConfig training_config_from_json(const json& j, TrainingConfig base = {}, const std::string& where = "") {
  if (!j.is_object()) detail::schema_error(where, "expected an object");
  static const char* const known[] = {"learning_rate", "max_epochs", "convergence_tol", "patience", "target_loss",
                                      "seed",          "psi",        "normalize_loss_per_signal", "prior_weight",
                                      "beta1",         "beta2",      "lr_decay",   "lr_patience",  "min_lr_fraction",
                                      "divergence_factor", "initial",       "prior",      "init_perturbation"};
  for (const auto& [k, v] : j.items())
    if (std::find(std::begin(known), std::end(known), k) == std::end(known))
      detail::schema_error(where + "/" + k, "unknown training option");
  auto count = [&](const char* key, std::size_t fallback) -> std::size_t {
    const auto v = detail::opt_u64(j, key, fallback, where);
    return static_cast<std::size_t>(v);
  };
  base.learning_rate = detail::opt_number(j, "learning_rate", base.learning_rate, where);
  base.max_epochs = count("max_epochs", base.max_epochs);
  base.convergence_tol = detail::opt_number(j, "convergence_tol", base.convergence_tol, where);
  base.patience = count("patience", base.patience);
  base.target_loss = detail::opt_number(j, "target_loss", base.target_loss, where);
  base.seed = detail::opt_u64(j, "seed", base.seed, where);
  base.psi = detail::opt_number(j, "psi", base.psi, where);
  if (j.contains("normalize_loss_per_signal")) {
    if (!j["normalize_loss_per_signal"].is_boolean())
      detail::schema_error(where + "/normalize_loss_per_signal", "expected a boolean");
    base.normalize_loss_per_signal = j["normalize_loss_per_signal"].get<bool>();
  }
  base.prior_weight = detail::opt_number(j, "prior_weight", base.prior_weight, where);
  base.beta1 = detail::opt_number(j, "beta1", base.beta1, where);
  base.beta2 = detail::opt_number(j, "beta2", base.beta2, where);
  base.lr_decay = detail::opt_number(j, "lr_decay", base.lr_decay, where);
  base.lr_patience = count("lr_patience", base.lr_patience);
  base.min_lr_fraction = detail::opt_number(j, "min_lr_fraction", base.min_lr_fraction, where);
  base.divergence_factor = detail::opt_number(j, "divergence_factor", base.divergence_factor, where);
  auto coeffs = [&](const char* key) -> std::optional<CoefficientVector> {
    const json& v = j[key];
    if (v.is_null()) return std::nullopt;
    if (v.is_string()) return load_coefficients(v.get<std::string>());
    return coefficients_from_json(v, where + "/" + key);
  };
  if (j.contains("initial")) base.initial = coeffs("initial");
  if (j.contains("prior")) base.prior = coeffs("prior");
  base.validate();
  return base;
}

inline json loss_curve_to_json(const LossCurve& c) {
  json pts = json::array();
  for (auto [e, l] : c.checkpoints) pts.push_back({e, l});
  return {{"initial", c.initial}, {"best", c.best}, {"last", c.last}, {"checkpoints", pts}};
}

inline json mining_result_to_json(const MiningResult& r) {
  json rep = json::object();
  for (const auto& [k, v] : r.replication_error) rep[k] = v;
  return {{"omega", coefficients_to_json(r.omega)},
          {"final_loss", r.final_loss},
          {"data_loss", r.data_loss},
          {"epochs_used", r.epochs_used},
          {"converged", r.converged},
          {"replication_error", rep},
          {"loss_curve", loss_curve_to_json(r.curve)}};
}

inline MiningResult mining_result_from_json(const json& j, const std::string& where = "") {
  MiningResult r;
  r.omega = coefficients_from_json(detail::member(j, "omega", where), where + "/omega");
  r.final_loss = detail::number(detail::member(j, "final_loss", where), where + "/final_loss");
  r.data_loss = detail::opt_number(j, "data_loss", 0.0, where);
  r.epochs_used = static_cast<std::size_t>(detail::opt_u64(j, "epochs_used", 0, where));
  const json& conv = detail::member(j, "converged", where);
  if (!conv.is_boolean()) detail::schema_error(where + "/converged", "expected a boolean");
  r.converged = conv.get<bool>();
  if (j.contains("replication_error"))
    for (const auto& [k, v] : j["replication_error"].items()) r.replication_error[k] = detail::number(v, where + "/replication_error");
  return r;
}

inline json doubles(const std::vector<double>& v) { return json(v); }

inline json calibration_to_json(const Calibration& c, const json& provenance = json::object()) {
  return {{"omega_ref", coefficients_to_json(c.omega_ref)},
          {"threshold", c.threshold},
          {"alpha", c.alpha},
          {"rho_m", c.rho_m},
          {"train_robustness", doubles(c.train_robustness)},
          {"test_robustness", doubles(c.test_robustness)},
          {"test_residues", doubles(c.test_residues)},
          {"rank", c.rank},
          {"d_raw", c.d_raw},
          {"d", c.d},
          {"interval", {c.lo, c.hi}},
          {"residue_mean", c.residue_mean},
          {"residue_sd", c.residue_sd},
          {"spread_interval", {c.spread_lo(), c.spread_hi()}},
          {"provenance", provenance}};
}

inline Calibration calibration_from_json(const json& j, const std::string& where = "") {
  using detail::member;
  using detail::number;
  Calibration c;
  c.omega_ref = coefficients_from_json(member(j, "omega_ref", where), where + "/omega_ref");
  c.threshold = number(member(j, "threshold", where), where + "/threshold");
  c.alpha = number(member(j, "alpha", where), where + "/alpha");
  c.rho_m = number(member(j, "rho_m", where), where + "/rho_m");
  auto vec = [&](const char* key) {
    std::vector<double> out;
    if (!j.contains(key)) return out;
    if (!j[key].is_array()) detail::schema_error(where + "/" + key, "expected an array");
    for (const auto& v : j[key]) out.push_back(number(v, where + "/" + key));
    return out;
  };
  c.train_robustness = vec("train_robustness");
  c.test_robustness = vec("test_robustness");
  c.test_residues = vec("test_residues");
  c.rank = static_cast<std::size_t>(detail::opt_u64(j, "rank", 0, where));
  c.d = number(member(j, "d", where), where + "/d");
  c.d_raw = detail::opt_number(j, "d_raw", c.d, where);
  const json& iv = member(j, "interval", where);
  if (!iv.is_array() || iv.size() != 2) detail::schema_error(where + "/interval", "expected [lo, hi]");
  c.lo = number(iv[0], where + "/interval/0");
  c.hi = number(iv[1], where + "/interval/1");
  if (!(c.lo <= c.hi)) detail::schema_error(where + "/interval", "lo exceeds hi");
  c.residue_mean = detail::opt_number(j, "residue_mean", 0.0, where);
  c.residue_sd = detail::opt_number(j, "residue_sd", 0.0, where);
  return c;
}

inline json verdict_to_json(const Verdict& v, const std::string& scenario = "") {
  json j = {{"robustness", v.robustness},
            {"residue", v.residue},
            {"inside_interval", v.inside_interval},
            {"flagged", v.flagged},
            {"low_confidence", v.low_confidence},
            {"omega", coefficients_to_json(v.omega)}};
  if (!scenario.empty()) j["scenario"] = scenario;
  if (!v.mined.empty()) j["mined"] = coefficients_to_json(v.mined);
  if (v.safety_evaluated) j["safety_robustness"] = v.safety_robustness;
  if (!v.note.empty()) j["note"] = v.note;
  return j;
}

// ---- fault scenarios ----------------------------------------------------

inline json fault_to_json(const bergman::FaultScenario& f) {
  json j = {{"kind", bergman::fault_kind_name(f.kind)}};
  if (f.kind != bergman::FaultScenario::Kind::none) {
    j["block_fraction"] = f.block_fraction;
    j["release_time_min"] = f.release_time_min;
  }
  if (f.phantom_bolus_U) j["phantom_bolus_U"] = *f.phantom_bolus_U;
  if (f.phantom_time_min) j["phantom_time_min"] = *f.phantom_time_min;
  return j;
}

inline bergman::FaultScenario fault_from_json(const json& j, const std::string& where = "") {
  bergman::FaultScenario f;
  if (j.is_null()) return f;
  if (!j.is_object()) detail::schema_error(where, "expected an object");
  if (j.contains("kind")) {
    try {
      f.kind = bergman::parse_fault_kind(detail::string(j["kind"], where + "/kind"));
    } catch (const ValidationError& e) {
      detail::schema_error(where + "/kind", e.what());
    }
  }
  f.block_fraction = detail::opt_number(j, "block_fraction", 0.0, where);
  f.release_time_min = detail::opt_number(j, "release_time_min", 0.0, where);
  if (j.contains("phantom_bolus_U")) f.phantom_bolus_U = detail::number(j["phantom_bolus_U"], where + "/phantom_bolus_U");
  if (j.contains("phantom_time_min")) f.phantom_time_min = detail::number(j["phantom_time_min"], where + "/phantom_time_min");
  if (f.kind != bergman::FaultScenario::Kind::none && !(f.block_fraction >= 0.0 && f.block_fraction <= 1.0))
    detail::schema_error(where + "/block_fraction", "must lie in [0, 1]");
  return f;
}

}  // namespace u2d::io
