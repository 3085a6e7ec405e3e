#pragma once

// Artificial-pancreas case study: the linearized Bergman minimal model
//   d(di)/dt  = -n di + p4 u1
//   d(dis)/dt = -p1 dis + p2 (di - i_b)
//   d(dG)/dt  = -G_b dis - p3 dG + u2 / VoI
// over deviations from the initial operating point, with insulin-cartridge
// blockage and phantom-bolus fault generators.
//
// Units: time in minutes; u1 in microunits of insulin per minute; u2 in mg of
// glucose per minute; dG and G in mg/dl. A bolus or meal is a one-sample
// rectangular pulse whose area is the dose.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "u2detect/core_model.hpp"
#include "u2detect/dih_rnn.hpp"
#include "u2detect/error.hpp"

namespace u2d::bergman {

inline constexpr double kMicroUnitsPerUnit = 1e6;
inline constexpr double kMgPerGram = 1e3;

inline const char* const kInsulin = "u1";
inline const char* const kMeal = "u2";
inline const char* const kGlucose = "G";
inline const char* const kDeltaGlucose = "delta_G";

struct BergmanParams {
  double p1 = 0.098;
  double p2 = 0.1406;
  double p3 = 0.028;
  double p4 = 0.05;
  double n = 199.6;
  double VoI = -80.0;
  double G_b = 0.035;
  double i_b = 0.0;

  /// Simulation settings used as the certified reference model.
  static BergmanParams reference() { return {}; }
};

inline ModelTemplate bergman_template() {
  using S = SlotSign;
  return ModelTemplate({"delta_i", "delta_i_s", kDeltaGlucose}, {kInsulin, "u_is", kMeal},
                       {{S::negative, S::zero, S::zero}, {S::positive, S::negative, S::zero}, {S::zero, S::negative, S::negative}},
                       {S::positive, S::zero, S::negative}, {false, false, true}, 60.0);
}

/// Slot values in canonical order: a00 = -n, a10 = p2, a11 = -p1, a21 = -G_b,
/// a22 = -p3, b00 = p4, b22 = 1/VoI.
inline CoefficientVector to_coefficients(const BergmanParams& p) {
  if (p.i_b != 0.0)
    throw ValidationError("non-zero basal offset i_b makes the plant affine; it must be 0 in deviation coordinates");
  if (p.VoI == 0.0) throw ValidationError("VoI must be non-zero");
  const std::vector<double> v{-p.n, p.p2, -p.p1, -p.G_b, -p.p3, p.p4, 1.0 / p.VoI};
  return bind_coefficients(bergman_template(), v);
}

inline BergmanParams from_coefficients(const CoefficientVector& w) {
  check_binds(bergman_template(), w);
  BergmanParams p;
  p.n = -w.value(0);
  p.p2 = w.value(1);
  p.p1 = -w.value(2);
  p.G_b = -w.value(3);
  p.p3 = -w.value(4);
  p.p4 = w.value(5);
  p.VoI = 1.0 / w.value(6);
  return p;
}

/// The seven physical coefficients in table order (p1, p2, p3, p4, n, VoI, G_b).
inline CoefficientVector physical_vector(const BergmanParams& p) {
  return CoefficientVector({{"p1", p.p1, "1/min"},
                            {"p2", p.p2, "1/min"},
                            {"p3", p.p3, "1e-6/(uU min^2)"},
                            {"p4", p.p4, ""},
                            {"n", p.n, "1/min"},
                            {"VoI", p.VoI, "dl"},
                            {"G_b", p.G_b, "mg/dl"}});
}

/// Mined slot coefficients -> physical vector. Usable as a CoefficientMap.
inline CoefficientVector physical_map(const CoefficientVector& slots) { return physical_vector(from_coefficients(slots)); }

struct FaultScenario {
  enum class Kind { none, cartridge_blockage, cartridge_blockage_with_phantom };
  Kind kind = Kind::none;
  double block_fraction = 0.0;
  double release_time_min = 0.0;
  std::optional<double> phantom_bolus_U;   // default: half the commanded bolus
  std::optional<double> phantom_time_min;  // default: release + 10 min

  static FaultScenario none() { return {}; }
  static FaultScenario blockage(double fraction, double release) {
    return {Kind::cartridge_blockage, fraction, release, std::nullopt, std::nullopt};
  }
  static FaultScenario blockage_with_phantom(double fraction, double release) {
    return {Kind::cartridge_blockage_with_phantom, fraction, release, std::nullopt, std::nullopt};
  }
};

inline const char* fault_kind_name(FaultScenario::Kind k) {
  switch (k) {
    case FaultScenario::Kind::none: return "none";
    case FaultScenario::Kind::cartridge_blockage: return "cartridge_blockage";
    case FaultScenario::Kind::cartridge_blockage_with_phantom: return "cartridge_blockage_with_phantom";
  }
  return "?";
}

inline FaultScenario::Kind parse_fault_kind(const std::string& s) {
  if (s == "none") return FaultScenario::Kind::none;
  if (s == "cartridge_blockage") return FaultScenario::Kind::cartridge_blockage;
  if (s == "cartridge_blockage_with_phantom") return FaultScenario::Kind::cartridge_blockage_with_phantom;
  throw ValidationError("unknown fault kind '" + s + "'");
}

struct ScenarioOptions {
  double horizon_min = 420.0;
  double tau_min = 1e-3;
  std::size_t substeps = 4;       // reference RK4 steps per sample
  double noise_sd = 0.0;          // mg/dl, on the logged glucose only
  std::uint64_t seed = 0;
  double baseline_glucose = 350.0;  // G(0), mg/dl
  bool allow_wide_inputs = false;
  BergmanParams params = BergmanParams::reference();
};

struct ScenarioTraces {
  Trace logged;  // commanded insulin, measured glucose
  Trace truth;   // delivered insulin, full state, noise-free glucose
  InputSchedule commanded;
  InputSchedule delivered;
};

/// Simulates one (bolus, meal) record under a fault. Under blockage the pump
/// delivers (1 - f) of the bolus at t = 0 and the withheld f at the release
/// time; the phantom variant adds an unlogged correction bolus. The logged
/// view always reports the full commanded bolus at t = 0.
inline ScenarioTraces generate_scenario(double bolus_U, double meal_g, const FaultScenario& fault,
                                        const ScenarioOptions& opt = {}) {
  if (!(opt.tau_min > 0.0) || !(opt.horizon_min > opt.tau_min)) throw ScenarioError("horizon must exceed tau");
  if (!(bolus_U >= 0.0) || !(meal_g >= 0.0)) throw ScenarioError("bolus and meal must be non-negative");
  if (!opt.allow_wide_inputs && (bolus_U > 40.0 || meal_g > 28.0))
    throw ScenarioError("input (" + std::to_string(bolus_U) + " U, " + std::to_string(meal_g) +
                        " g) is outside the 0-40 U x 0-28 g input box");
  if (opt.noise_sd < 0.0) throw ScenarioError("noise_sd must be non-negative");

  const double tau = opt.tau_min;
  const auto steps = static_cast<std::size_t>(std::llround(opt.horizon_min / tau));
  auto grid = [&](double t) { return static_cast<double>(std::llround(t / tau)) * tau; };

  InputSchedule commanded, delivered;
  const double dose = bolus_U * kMicroUnitsPerUnit;
  if (dose > 0.0) commanded.add_impulse(kInsulin, 0.0, dose, tau);
  if (meal_g > 0.0) {
    commanded.add_impulse(kMeal, 0.0, meal_g * kMgPerGram, tau);
    delivered.add_impulse(kMeal, 0.0, meal_g * kMgPerGram, tau);
  }

  if (fault.kind == FaultScenario::Kind::none) {
    if (dose > 0.0) delivered.add_impulse(kInsulin, 0.0, dose, tau);
  } else {
    if (!(fault.block_fraction >= 0.0 && fault.block_fraction <= 1.0))
      throw ScenarioError("block_fraction must lie in [0, 1]");
    const double release = grid(fault.release_time_min);
    if (!(release > 0.0) || !(release < opt.horizon_min))
      throw ScenarioError("release time " + std::to_string(fault.release_time_min) + " min is outside the horizon");
    const double early = (1.0 - fault.block_fraction) * dose;
    const double withheld = fault.block_fraction * dose;
    if (early > 0.0) delivered.add_impulse(kInsulin, 0.0, early, tau);
    if (withheld > 0.0) delivered.add_impulse(kInsulin, release, withheld, tau);
    if (fault.kind == FaultScenario::Kind::cartridge_blockage_with_phantom) {
      const double ph_dose = fault.phantom_bolus_U.value_or(0.5 * bolus_U) * kMicroUnitsPerUnit;
      const double ph_time = grid(fault.phantom_time_min.value_or(fault.release_time_min + 10.0));
      if (!(ph_time >= 0.0) || !(ph_time < opt.horizon_min))
        throw ScenarioError("phantom bolus time is outside the horizon");
      if (ph_dose < 0.0) throw ScenarioError("phantom bolus must be non-negative");
      if (ph_dose > 0.0) delivered.add_impulse(kInsulin, ph_time, ph_dose, tau);
    }
  }

  const ModelTemplate tpl = bergman_template();
  const CoefficientVector omega = to_coefficients(opt.params);
  const std::vector<double> x0(tpl.size(), 0.0);
  Trace reference = integrate_reference(tpl, omega, delivered, x0, tau, steps, opt.substeps);

  const auto& dG = reference.at(kDeltaGlucose);
  std::vector<double> g(dG.size());
  for (std::size_t k = 0; k < dG.size(); ++k) g[k] = opt.baseline_glucose + dG[k];

  ScenarioTraces out{Trace(tau), Trace(tau), commanded, delivered};
  for (const auto& name : reference.names()) out.truth.add(name, reference.at(name));
  out.truth.add(kGlucose, g);

  std::vector<double> g_log = g, dG_log = dG;
  if (opt.noise_sd > 0.0) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> noise(0.0, opt.noise_sd);
    for (std::size_t k = 0; k < g_log.size(); ++k) {
      const double e = noise(rng);
      g_log[k] += e;
      dG_log[k] = g_log[k] - opt.baseline_glucose;
    }
  }
  out.logged.add(kDeltaGlucose, std::move(dG_log));
  out.logged.add(kGlucose, std::move(g_log));
  out.logged.add(kInsulin, commanded.sample(kInsulin, tau, steps + 1));
  out.logged.add(kMeal, commanded.sample(kMeal, tau, steps + 1));
  return out;
}

struct InputPoint {
  double bolus_U;
  double meal_g;
};

struct InputSets {
  std::vector<InputPoint> train;
  std::vector<InputPoint> test;
};

/// The published fault-free calibration inputs, split as in the coefficient table.
inline InputSets case_study_input_sets() {
  return {{{15, 17}, {20, 20}, {10, 12}, {12, 14}, {25, 22}, {5, 12}},
          {{12, 17}, {28, 20}, {7, 6}, {14, 13}, {17, 14}, {32, 27}}};
}

/// The ten cartridge-fault configurations (block %, release min), plain then
/// with the phantom correction bolus. All were run at 7.5 U / 20 g.
inline std::vector<FaultScenario> case_study_fault_scenarios() {
  const std::pair<double, double> rows[] = {{0.20, 150}, {0.40, 120}, {0.80, 90}, {0.70, 70}, {0.60, 50}};
  std::vector<FaultScenario> out;
  for (auto [f, r] : rows) out.push_back(FaultScenario::blockage(f, r));
  for (auto [f, r] : rows) out.push_back(FaultScenario::blockage_with_phantom(f, r));
  return out;
}

inline constexpr InputPoint kFaultInput{7.5, 20.0};

/// Full-batch mining settings for the case study: Adam with relative steps,
/// anchored to the reference model by a weak relative ridge prior. Only
/// glucose is observed, so p2, p4, G_b and n enter the output mostly through
/// p2 * p4 * G_b / n; the prior picks the reference-nearest point on that
/// ridge.
inline TrainingConfig case_study_mining_config(const BergmanParams& reference = BergmanParams::reference()) {
  TrainingConfig c;
  c.learning_rate = 1e-2;
  c.max_epochs = 4000;
  c.convergence_tol = 1e-6;
  c.patience = 50;
  c.target_loss = 1e-8;
  c.psi = 0.02;
  c.normalize_loss_per_signal = true;
  c.prior = to_coefficients(reference);
  c.prior_weight = 1e-3;
  return c;
}

/// Largest "nice" step (1, 2 or 5 times a power of ten) not above tau_max.
inline double nice_step_below(double tau_max) {
  if (!(tau_max > 0.0) || !std::isfinite(tau_max)) throw ValidationError("step bound must be positive and finite");
  const double decade = std::pow(10.0, std::floor(std::log10(tau_max)));
  for (double m : {5.0, 2.0, 1.0})
    if (m * decade <= tau_max * (1.0 + 1e-12)) return m * decade;
  return decade;
}

}  // namespace u2d::bergman
