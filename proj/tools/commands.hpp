#pragma once

// Subcommand implementations for the u2detect executable. Each command loads
// and validates everything it needs before it writes a single file.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "u2detect/u2detect.hpp"

namespace u2d::cli {

namespace fs = std::filesystem;
using io::json;

struct CommonOptions {
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
};

inline std::size_t worker_count(std::size_t jobs) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  return jobs;
}

/// Runs f(i) for i in [0, n) on at most `jobs` threads; results keep index order.
template <class T>
std::vector<T> parallel_map(std::size_t n, std::size_t jobs, const std::function<T(std::size_t)>& f) {
  std::vector<T> out(n);
  jobs = std::max<std::size_t>(1, std::min(worker_count(jobs), n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
    return out;
  }
  std::vector<std::future<void>> pending;
  std::atomic<std::size_t> next{0};
  for (std::size_t w = 0; w < jobs; ++w)
    pending.push_back(std::async(std::launch::async, [&] {
      ScopedFlushDenormals ftz;
      for (std::size_t i = next++; i < n; i = next++) out[i] = f(i);
    }));
  for (auto& p : pending) p.get();
  return out;
}

inline RunManifest load_run(const CommonOptions& opt) {
  if (opt.manifest.empty()) throw ValidationError("--manifest is required");
  io::json j = io::load_json(opt.manifest);
  if (opt.seed && j.is_object()) j["seed"] = *opt.seed;
  RunManifest m = parse_manifest(j, opt.manifest);
  if (!opt.out.empty()) m.out_dir = opt.out;
  return m;
}

struct Paths {
  fs::path root;
  fs::path traces() const { return root / "traces"; }
  fs::path logged(const std::string& n) const { return traces() / (n + ".logged.csv"); }
  fs::path truth(const std::string& n) const { return traces() / (n + ".truth.csv"); }
  fs::path mined(const std::string& n) const { return root / "mined" / (n + ".json"); }
  fs::path scenarios() const { return root / "scenarios.json"; }
  fs::path calibration() const { return root / "calibration.json"; }
  fs::path verdicts() const { return root / "verdicts.jsonl"; }
  fs::path summary() const { return root / "detect_summary.md"; }
  fs::path report() const { return root / "report.md"; }
  fs::path plots() const { return root / "plots"; }
};

inline json scenario_to_json(const ScenarioSpec& s) {
  return {{"name", s.name},       {"role", role_name(s.role)}, {"bolus", s.bolus_U},
          {"meal", s.meal_g},     {"fault", io::fault_to_json(s.fault)}, {"seed", s.seed}};
}

inline std::string fmt_num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string fmt_sig(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---- simulate -------------------------------------------------------------

inline int cmd_simulate(const CommonOptions& opt) {
  const RunManifest m = load_run(opt);
  const Paths p{m.out_dir};
  if (m.scenarios.empty()) {
    spdlog::warn("manifest lists no scenarios; nothing to simulate");
    return 0;
  }
  const double unit = m.model().time_unit_s();

  struct Out {
    std::string logged, truth, error;
  };
  auto results = parallel_map<Out>(m.scenarios.size(), opt.jobs, [&](std::size_t i) {
    const auto& s = m.scenarios[i];
    Out o;
    try {
      bergman::ScenarioOptions so = m.simulation;
      so.seed = s.seed;
      const auto tr = bergman::generate_scenario(s.bolus_U, s.meal_g, s.fault, so);
      o.logged = io::trace_to_csv(tr.logged, unit);
      o.truth = io::trace_to_csv(tr.truth, unit);
    } catch (const std::exception& e) {
      o.error = e.what();
    }
    return o;
  });

  json listing = json::array();
  int failures = 0;
  for (std::size_t i = 0; i < m.scenarios.size(); ++i) {
    const auto& s = m.scenarios[i];
    if (!results[i].error.empty()) {
      spdlog::error("scenario {}: {}", s.name, results[i].error);
      ++failures;
      continue;
    }
    io::write_text_file(p.logged(s.name), results[i].logged);
    io::write_text_file(p.truth(s.name), results[i].truth);
    listing.push_back(scenario_to_json(s));
    spdlog::info("wrote {} and {}", p.logged(s.name).string(), p.truth(s.name).string());
  }
  io::write_text_file(p.scenarios(), json{{"template", m.template_ref}, {"seed", m.seed}, {"scenarios", listing}}.dump(2) + "\n");
  std::cout << "simulated " << (m.scenarios.size() - failures) << "/" << m.scenarios.size() << " scenarios into "
            << p.traces().string() << "\n";
  return failures ? 1 : 0;
}

// ---- induce ---------------------------------------------------------------

inline std::string network_dot(const DihNetwork& net) {
  const auto& tpl = net.model();
  std::ostringstream dot;
  dot << "digraph dih_rnn {\n  rankdir=LR;\n";
  for (std::size_t i = 0; i < tpl.size(); ++i) dot << "  \"" << tpl.variables()[i] << "\" [shape=circle];\n";
  for (const auto& cell : net.cells()) {
    const auto& to = tpl.variables()[cell.variable];
    for (const auto& c : cell.connections)
      dot << "  \"" << tpl.variables()[c.from] << "\" -> \"" << to << "\" [label=\"" << tpl.slots()[c.slot].name << "\"];\n";
    if (cell.input_slot) {
      dot << "  \"" << cell.input_name << "\" [shape=box];\n";
      dot << "  \"" << cell.input_name << "\" -> \"" << to << "\" [label=\"" << tpl.slots()[*cell.input_slot].name << "\"];\n";
    }
  }
  dot << "}\n";
  return dot.str();
}

inline int cmd_induce(const CommonOptions& opt, const std::string& template_ref, double tau) {
  std::string ref = template_ref;
  fs::path out_dir = opt.out;
  if (ref.empty()) {
    if (opt.manifest.empty()) throw ValidationError("induce needs --template or --manifest");
    const RunManifest m = load_run(opt);
    ref = m.template_ref;
    if (out_dir.empty()) out_dir = m.out_dir;
  }
  const ModelTemplate tpl = io::load_template(ref);
  const DihNetwork net = induce_network(tpl, tau);
  std::cout << "template " << io::template_hash(tpl) << ": " << net.cells().size() << " cells, "
            << net.connection_count() << " connections, " << net.input_tap_count() << " input taps, "
            << net.parameter_count() << " parameters\n";
  for (const auto& cell : net.cells()) {
    std::cout << "  cell " << tpl.variables()[cell.variable] << (tpl.observable(cell.variable) ? " (observed)" : "")
              << " <-";
    for (const auto& c : cell.connections) std::cout << " " << tpl.variables()[c.from] << "[" << tpl.slots()[c.slot].name << "]";
    if (cell.input_slot) std::cout << " " << cell.input_name << "[" << tpl.slots()[*cell.input_slot].name << "]";
    std::cout << "\n";
  }
  const std::string dot = network_dot(net);
  if (!out_dir.empty()) {
    io::write_text_file(out_dir / "network.dot", dot);
    std::cout << "wrote " << (out_dir / "network.dot").string() << "\n";
  } else {
    std::cout << dot;
  }
  return 0;
}

// ---- mine -----------------------------------------------------------------

struct LoadedTrace {
  const ScenarioSpec* spec;
  Trace trace;
};

inline std::vector<LoadedTrace> load_traces(const RunManifest& m, const std::vector<const ScenarioSpec*>& specs) {
  const Paths p{m.out_dir};
  const double unit = m.model().time_unit_s();
  std::vector<LoadedTrace> out;
  for (const auto* s : specs) {
    const auto path = p.logged(s->name);
    if (!fs::exists(path)) throw ValidationError("missing trace '" + path.string() + "' (run simulate first)");
    out.push_back({s, io::load_trace(path, unit)});
  }
  return out;
}

struct MinedEntry {
  std::optional<MiningResult> result;
  std::string error;
  bool diverged = false;
};

inline MinedEntry mine_one(const RunManifest& m, const ModelTemplate& tpl, const LoadedTrace& lt) {
  MinedEntry e;
  try {
    e.result = mine_coefficients(tpl, lt.trace, m.training_for(*lt.spec));
  } catch (const TrainingDivergedError& ex) {
    e.error = std::string(ex.what()) + " at epoch " + std::to_string(ex.epoch()) +
              "; lower learning_rate or check the sampling period against the step bound";
    e.diverged = true;
  } catch (const std::exception& ex) {
    e.error = ex.what();
  }
  return e;
}

inline json mined_to_json(const RunManifest& m, const ModelTemplate& tpl, const ScenarioSpec& s, const MiningResult& r) {
  json j = io::mining_result_to_json(r);
  if (m.calibration.map == "bergman") j["physical"] = io::coefficients_to_json(bergman::physical_map(r.omega));
  j["scenario"] = scenario_to_json(s);
  j["template_hash"] = io::template_hash(tpl);
  j["training"] = io::training_config_to_json(m.training_for(s));
  return j;
}

inline int cmd_mine(const CommonOptions& opt) {
  const RunManifest m = load_run(opt);
  const ModelTemplate tpl = m.model();
  const Paths p{m.out_dir};
  std::vector<const ScenarioSpec*> specs;
  for (const auto& s : m.scenarios) specs.push_back(&s);
  if (specs.empty()) {
    spdlog::warn("manifest lists no scenarios; nothing to mine");
    return 0;
  }
  const auto traces = load_traces(m, specs);
  for (const auto* s : specs) m.training_for(*s).validate();

  const auto entries = parallel_map<MinedEntry>(traces.size(), opt.jobs, [&](std::size_t i) {
    spdlog::info("mining {}", traces[i].spec->name);
    return mine_one(m, tpl, traces[i]);
  });

  int failures = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& s = *traces[i].spec;
    if (!entries[i].result) {
      spdlog::error("scenario {}: {}", s.name, entries[i].error);
      std::cerr << "mining failed for " << s.name << ": " << entries[i].error << "\n";
      ++failures;
      continue;
    }
    const auto& r = *entries[i].result;
    io::write_text_file(p.mined(s.name), mined_to_json(m, tpl, s, r).dump(2) + "\n");
    std::cout << s.name << ": epochs " << r.epochs_used << ", loss " << fmt_sig(r.final_loss)
              << (r.converged ? ", converged" : ", NOT converged") << "\n";
  }
  return failures ? 1 : 0;
}

// ---- calibrate ------------------------------------------------------------

inline CoefficientVector load_mined_comparison(const RunManifest& m, const ScenarioSpec& s) {
  const Paths p{m.out_dir};
  const auto path = p.mined(s.name);
  if (!fs::exists(path)) throw ValidationError("missing mining result '" + path.string() + "' (run mine first)");
  const MiningResult r = io::mining_result_from_json(io::load_json(path), path.string());
  if (!r.converged) spdlog::warn("{}: mining did not converge; using its best iterate", s.name);
  return m.coefficient_map()(r.omega);
}

inline void print_calibration(const Calibration& c) {
  std::cout << "rho_m = " << fmt_num(c.rho_m, 6) << "\n";
  std::cout << "alpha = " << c.alpha << ", rank k = " << c.rank << " of " << c.test_residues.size() << "\n";
  std::cout << "d = " << fmt_num(c.d, 6);
  if (c.d_raw != c.d) std::cout << " (raw order statistic " << fmt_num(c.d_raw, 6) << ", clamped at 0)";
  std::cout << "\ninterval = [" << fmt_num(c.lo, 6) << ", " << fmt_num(c.hi, 6) << "]\n";
  std::cout << "mean +/- sd interval = [" << fmt_num(c.spread_lo(), 6) << ", " << fmt_num(c.spread_hi(), 6) << "]\n";
}

inline int cmd_calibrate(const CommonOptions& opt, const std::string& residues_file, std::optional<double> alpha_flag) {
  if (!residues_file.empty()) {
    // {"rho_m": r, "residues": [...]} with an optional "alpha".
    const json j = io::load_json(residues_file);
    if (!j.is_object()) throw ValidationError(residues_file + ": expected an object with rho_m and residues");
    const double rho_m = io::detail::number(io::detail::member(j, "rho_m", ""), "/rho_m");
    const json& arr = io::detail::member(j, "residues", "");
    if (!arr.is_array()) throw ValidationError(residues_file + ": /residues must be an array");
    std::vector<double> res;
    for (std::size_t i = 0; i < arr.size(); ++i) res.push_back(io::detail::number(arr[i], "/residues/" + std::to_string(i)));
    const double alpha = alpha_flag.value_or(io::detail::opt_number(j, "alpha", 0.05, ""));
    Calibration c = calibrate_from_residues(rho_m, res, alpha);
    if (j.contains("omega_ref")) c.omega_ref = io::coefficients_from_json(j["omega_ref"], "/omega_ref");
    print_calibration(c);
    if (!opt.out.empty()) {
      const fs::path out = fs::path(opt.out) / "calibration.json";
      io::write_text_file(out, io::calibration_to_json(c, {{"residues_file", residues_file}}).dump(2) + "\n");
      std::cout << "wrote " << out.string() << "\n";
    }
    return 0;
  }

  const RunManifest m = load_run(opt);
  const ModelTemplate tpl = m.model();
  if (m.calibration.reference.empty()) throw ValidationError("/calibration/reference is required for calibration");
  const auto train = m.with_role(Role::train);
  const auto test = m.with_role(Role::test);
  if (train.size() < 2) throw InsufficientDataError("calibration needs at least two train scenarios");
  calibration_rank(test.size(), alpha_flag.value_or(m.calibration.alpha));
  std::vector<CoefficientVector> wt, ws;
  for (const auto* s : train) wt.push_back(load_mined_comparison(m, *s));
  for (const auto* s : test) ws.push_back(load_mined_comparison(m, *s));
  const double alpha = alpha_flag.value_or(m.calibration.alpha);
  const Calibration c = calibrate(wt, ws, m.reference(), alpha, m.calibration.threshold);

  json prov = {{"manifest", m.source.string()},
               {"template", m.template_ref},
               {"template_hash", io::template_hash(tpl)},
               {"reference", m.calibration.reference},
               {"seed", m.seed}};
  json tr = json::array(), te = json::array();
  for (const auto* s : train) tr.push_back(scenario_to_json(*s));
  for (const auto* s : test) te.push_back(scenario_to_json(*s));
  prov["train"] = tr;
  prov["test"] = te;
  const Paths p{m.out_dir};
  io::write_text_file(p.calibration(), io::calibration_to_json(c, prov).dump(2) + "\n");
  print_calibration(c);
  std::cout << "wrote " << p.calibration().string() << "\n";
  return 0;
}

// ---- detect ---------------------------------------------------------------

inline std::string summary_table(const std::vector<std::pair<std::string, Verdict>>& rows) {
  std::ostringstream t;
  if (rows.empty()) return "no scenarios\n";
  t << "| scenario |";
  for (const auto& e : rows.front().second.omega) t << " " << e.name << " |";
  t << " robustness | residue | safety | flag |\n|---|";
  for (std::size_t i = 0; i < rows.front().second.omega.size(); ++i) t << "---|";
  t << "---|---|---|---|\n";
  for (const auto& [name, v] : rows) {
    t << "| " << name << " |";
    for (const auto& e : v.omega) t << " " << fmt_sig(e.value) << " |";
    t << " " << fmt_num(v.robustness) << " | " << fmt_num(v.residue) << " | "
      << (v.safety_evaluated ? fmt_num(v.safety_robustness, 2) : std::string("n/a")) << " | "
      << (v.flagged ? "(D)" : "-") << (v.low_confidence ? " low-confidence" : "") << " |\n";
  }
  return t.str();
}

inline int cmd_detect(const CommonOptions& opt, bool use_mined) {
  const RunManifest m = load_run(opt);
  const ModelTemplate tpl = m.model();
  const Paths p{m.out_dir};
  if (!fs::exists(p.calibration())) throw ValidationError("missing '" + p.calibration().string() + "' (run calibrate first)");
  const Calibration cal = io::calibration_from_json(io::load_json(p.calibration()), p.calibration().string());
  const auto specs = m.with_role(Role::detect);
  if (specs.empty()) {
    spdlog::warn("manifest lists no detect scenarios");
    return 0;
  }
  const auto traces = load_traces(m, specs);
  const bool has_glucose = std::all_of(traces.begin(), traces.end(), [](const auto& t) { return t.trace.has(bergman::kGlucose); });
  const std::optional<stl::Formula> safety =
      has_glucose ? std::optional<stl::Formula>(stl::safety_formula()) : std::nullopt;
  const CoefficientMap map = m.coefficient_map();

  struct Out {
    std::optional<Verdict> verdict;
    std::string error;
  };
  auto outs = parallel_map<Out>(traces.size(), opt.jobs, [&](std::size_t i) {
    Out o;
    try {
      const auto& lt = traces[i];
      const auto mined_path = p.mined(lt.spec->name);
      if (use_mined && fs::exists(mined_path)) {
        const MiningResult r = io::mining_result_from_json(io::load_json(mined_path), mined_path.string());
        Verdict v = judge(map(r.omega), cal);
        v.mined = r.omega;
        v.low_confidence = !r.converged;
        if (v.low_confidence) v.note = "mining did not converge";
        if (safety) {
          v.safety_robustness = stl::robustness(*safety, lt.trace);
          v.safety_evaluated = true;
        }
        o.verdict = v;
      } else {
        spdlog::info("detecting {}", lt.spec->name);
        o.verdict = detect(lt.trace, cal, tpl, m.training_for(*lt.spec), map, safety);
      }
    } catch (const std::exception& e) {
      o.error = e.what();
    }
    return o;
  });

  std::string lines;
  std::vector<std::pair<std::string, Verdict>> rows;
  int failures = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& name = traces[i].spec->name;
    if (!outs[i].verdict) {
      spdlog::error("scenario {}: {}", name, outs[i].error);
      std::cerr << "detection failed for " << name << ": " << outs[i].error << "\n";
      ++failures;
      continue;
    }
    lines += io::verdict_to_json(*outs[i].verdict, name).dump() + "\n";
    rows.emplace_back(name, *outs[i].verdict);
  }
  const std::string table = summary_table(rows);
  io::write_text_file(p.verdicts(), lines);
  io::write_text_file(p.summary(), table);
  std::size_t flagged = 0;
  for (const auto& r : rows) flagged += r.second.flagged ? 1 : 0;
  std::cout << table << "\nflagged " << flagged << "/" << rows.size() << " (interval [" << fmt_num(cal.lo, 4) << ", "
            << fmt_num(cal.hi, 4) << "] on residues)\n";
  return failures ? 1 : 0;
}

// ---- report ---------------------------------------------------------------

inline int cmd_report(const CommonOptions& opt) {
  fs::path root = opt.out;
  std::optional<RunManifest> manifest;
  if (!opt.manifest.empty()) {
    manifest = load_run(opt);
    root = manifest->out_dir;
  }
  if (root.empty()) throw ValidationError("report needs --out <run dir> or --manifest");
  const Paths p{root};
  if (!fs::is_directory(root)) throw ValidationError("run directory '" + root.string() + "' does not exist");
  if (!fs::exists(p.scenarios()) || !fs::exists(p.calibration()) || !fs::exists(p.verdicts()))
    throw ValidationError("'" + root.string() + "' is not a completed run (need scenarios.json, calibration.json, verdicts.jsonl)");

  const json listing = io::load_json(p.scenarios());
  const std::string tpl_ref = listing.value("template", std::string("builtin:bergman"));
  const ModelTemplate tpl = io::load_template(tpl_ref);
  const Calibration cal = io::calibration_from_json(io::load_json(p.calibration()), p.calibration().string());
  std::vector<json> verdicts;
  {
    std::istringstream in(io::read_text_file(p.verdicts()));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (!line.empty()) verdicts.push_back(io::parse_json(line, p.verdicts().string() + " line " + std::to_string(n)));
    }
  }
  std::map<std::string, json> specs;
  for (const auto& s : listing.at("scenarios")) specs[s.at("name").get<std::string>()] = s;

  // Plot data: logged glucose next to the reference model and the model mined
  // from the trace, both driven by the logged inputs, at one-minute spacing.
  const bool bergman_tpl = tpl_ref == "builtin:bergman";
  std::map<std::string, std::string> plots;
  for (const auto& v : verdicts) {
    const std::string name = v.value("scenario", std::string());
    if (name.empty() || !bergman_tpl || !v.contains("mined")) continue;
    const auto path = p.logged(name);
    if (!fs::exists(path)) continue;
    const Trace tr = io::load_trace(path, tpl.time_unit_s());
    const CoefficientVector mined = io::coefficients_from_json(v["mined"], "/mined");
    const CoefficientVector ref = bergman::to_coefficients(bergman::BergmanParams::reference());
    std::vector<double> x0(tpl.size(), 0.0);
    x0[2] = tr.at(bergman::kDeltaGlucose).front();
    const auto u = inputs_from_trace(tpl, tr);
    const auto steps = tr.samples() - 1;
    const Trace orig = forward_pass(DihNetwork(tpl, tr.tau(), ref), u, x0, steps);
    const Trace oper = forward_pass(DihNetwork(tpl, tr.tau(), mined), u, x0, steps);
    const auto& g = tr.at(bergman::kGlucose);
    const auto& dg = tr.at(bergman::kDeltaGlucose);
    const double baseline = g.front() - dg.front();
    const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(1.0 / tr.tau())));
    std::string csv = "time_min,G_logged,G_original_model,G_operational_model\n";
    for (std::size_t k = 0; k <= steps; k += stride)
      csv += io::format_number(tr.time_at(k)) + "," + io::format_number(g[k]) + "," +
             io::format_number(baseline + orig.at(bergman::kDeltaGlucose)[k]) + "," +
             io::format_number(baseline + oper.at(bergman::kDeltaGlucose)[k]) + "\n";
    plots[name] = csv;
  }

  std::ostringstream md;
  md << "# u2detect run report\n\n";
  md << "Template `" << tpl_ref << "` (hash " << io::template_hash(tpl) << ").\n\n";
  md << "## Calibration\n\n";
  md << "- rho_m: " << fmt_num(cal.rho_m, 6) << "\n";
  md << "- alpha: " << cal.alpha << ", rank k = " << cal.rank << " of " << cal.test_residues.size() << "\n";
  md << "- d: " << fmt_num(cal.d, 6) << " (raw " << fmt_num(cal.d_raw, 6) << ")\n";
  md << "- acceptance interval on residues: [" << fmt_num(cal.lo, 6) << ", " << fmt_num(cal.hi, 6) << "]\n";
  md << "- mean +/- sd interval: [" << fmt_num(cal.spread_lo(), 6) << ", " << fmt_num(cal.spread_hi(), 6) << "]\n\n";
  md << "| test residue |\n|---|\n";
  for (double r : cal.test_residues) md << "| " << fmt_num(r, 6) << " |\n";
  md << "\n## Detection\n\n";
  md << "| scenario | bolus (U) | meal (g) | fault | robustness | residue | safety | flag |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  std::size_t flagged = 0;
  for (const auto& v : verdicts) {
    const std::string name = v.value("scenario", std::string("?"));
    const auto it = specs.find(name);
    std::string fault = "?", bolus = "?", meal = "?";
    if (it != specs.end()) {
      const auto& f = it->second["fault"];
      fault = f.value("kind", std::string("none"));
      if (fault != "none")
        fault += " " + fmt_sig(100.0 * f.value("block_fraction", 0.0)) + "% @ " + fmt_sig(f.value("release_time_min", 0.0)) + " min";
      bolus = fmt_sig(it->second.value("bolus", 0.0));
      meal = fmt_sig(it->second.value("meal", 0.0));
    }
    const bool flag = v.value("flagged", false);
    flagged += flag ? 1 : 0;
    md << "| " << name << " | " << bolus << " | " << meal << " | " << fault << " | " << fmt_num(v.value("robustness", 0.0))
       << " | " << fmt_num(v.value("residue", 0.0)) << " | "
       << (v.contains("safety_robustness") ? fmt_num(v["safety_robustness"].get<double>(), 2) : std::string("n/a")) << " | "
       << (flag ? "(D)" : "-") << (v.value("low_confidence", false) ? " low-confidence" : "") << " |\n";
  }
  md << "\nFlagged " << flagged << " of " << verdicts.size() << " scenarios.\n";
  if (!plots.empty()) {
    md << "\n## Plot data\n\n";
    for (const auto& [name, csv] : plots) md << "- `plots/" << name << ".csv`\n";
  }

  for (const auto& [name, csv] : plots) io::write_text_file(p.plots() / (name + ".csv"), csv);
  io::write_text_file(p.report(), md.str());
  std::cout << "wrote " << p.report().string() << " (" << verdicts.size() << " verdicts, " << plots.size() << " plot files)\n";
  return 0;
}

}  // namespace u2d::cli
