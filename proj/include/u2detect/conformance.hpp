#pragma once

// Conformal calibration over mined coefficients and unknown-unknown detection.
//
// Calibration: rho_m is the mean conformance robustness over the training
// vectors; residues are test robustness minus rho_m. With m test residues and
// miscoverage alpha, d is the k-th smallest signed residue,
//   k = ceil((m/2 + 1) * (1 - alpha)),
// and the acceptance interval is [min residue - d, max residue + d].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "u2detect/core_model.hpp"
#include "u2detect/dih_rnn.hpp"
#include "u2detect/error.hpp"
#include "u2detect/stl.hpp"

namespace u2d {

struct Calibration {
  CoefficientVector omega_ref;
  double threshold = 0.01;
  double alpha = 0.05;
  double rho_m = 0.0;
  std::vector<double> train_robustness;
  std::vector<double> test_robustness;
  std::vector<double> test_residues;
  std::size_t rank = 0;
  double d_raw = 0.0;  // k-th smallest residue before clamping at zero
  double d = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  // Mean +/- standard deviation of the residues, reported alongside.
  double residue_mean = 0.0;
  double residue_sd = 0.0;

  bool contains(double residue) const { return residue >= lo && residue <= hi; }
  double spread_lo() const { return residue_mean - residue_sd; }
  double spread_hi() const { return residue_mean + residue_sd; }
};

/// Rank position k = ceil((m/2 + 1)(1 - alpha)); throws when it falls outside [1, m].
inline std::size_t calibration_rank(std::size_t m, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in [0, 1)");
  if (m < 2) throw InsufficientDataError("calibration needs at least two test samples, got " + std::to_string(m));
  const double x = (static_cast<double>(m) / 2.0 + 1.0) * (1.0 - alpha);
  const auto k = static_cast<long long>(std::ceil(x - 1e-9));
  if (k < 1 || k > static_cast<long long>(m))
    throw InsufficientDataError("rank " + std::to_string(k) + " is outside the " + std::to_string(m) + " test residues");
  return static_cast<std::size_t>(k);
}

inline Calibration calibrate_from_residues(double rho_m, std::vector<double> residues, double alpha = 0.05) {
  Calibration c;
  c.alpha = alpha;
  c.rho_m = rho_m;
  c.rank = calibration_rank(residues.size(), alpha);
  for (double r : residues)
    if (!std::isfinite(r)) throw ValidationError("calibration residues must be finite");
  c.test_residues = residues;
  std::vector<double> sorted = residues;
  std::sort(sorted.begin(), sorted.end());
  c.d_raw = sorted[c.rank - 1];
  c.d = std::max(0.0, c.d_raw);
  c.lo = sorted.front() - c.d;
  c.hi = sorted.back() + c.d;
  double mean = 0.0;
  for (double r : residues) mean += r;
  mean /= static_cast<double>(residues.size());
  double var = 0.0;
  for (double r : residues) var += (r - mean) * (r - mean);
  var /= static_cast<double>(residues.size() - 1);
  c.residue_mean = mean;
  c.residue_sd = std::sqrt(var);
  return c;
}

inline Calibration calibrate_from_robustness(const std::vector<double>& train, const std::vector<double>& test,
                                             double alpha = 0.05) {
  if (train.size() < 2) throw InsufficientDataError("calibration needs at least two training samples");
  double rho_m = 0.0;
  for (double r : train) rho_m += r;
  rho_m /= static_cast<double>(train.size());
  std::vector<double> residues;
  for (double r : test) residues.push_back(r - rho_m);
  Calibration c = calibrate_from_residues(rho_m, std::move(residues), alpha);
  c.train_robustness = train;
  c.test_robustness = test;
  return c;
}

inline Calibration calibrate(const std::vector<CoefficientVector>& train_omegas,
                             const std::vector<CoefficientVector>& test_omegas, const CoefficientVector& omega_ref,
                             double alpha = 0.05, double threshold = 0.01) {
  std::vector<double> train, test;
  for (const auto& w : train_omegas) train.push_back(stl::conformance_robustness(w, omega_ref, threshold));
  for (const auto& w : test_omegas) test.push_back(stl::conformance_robustness(w, omega_ref, threshold));
  Calibration c = calibrate_from_robustness(train, test, alpha);
  c.omega_ref = omega_ref;
  c.threshold = threshold;
  return c;
}

/// Maps mined slot coefficients onto the vector compared against the reference.
using CoefficientMap = std::function<CoefficientVector(const CoefficientVector&)>;

inline CoefficientVector identity_map(const CoefficientVector& w) { return w; }

struct Verdict {
  double robustness = 0.0;
  double residue = 0.0;
  bool inside_interval = false;
  bool flagged = false;
  double safety_robustness = std::numeric_limits<double>::quiet_NaN();
  bool safety_evaluated = false;
  CoefficientVector omega;  // compared (mapped) coefficients
  CoefficientVector mined;  // raw slot coefficients
  bool low_confidence = false;
  std::string note;
};

/// Verdict for an already-mined coefficient vector (comparison space).
inline Verdict judge(const CoefficientVector& omega, const Calibration& cal) {
  if (cal.omega_ref.empty()) throw ValidationError("calibration has no reference coefficients");
  Verdict v;
  v.omega = omega;
  v.robustness = stl::conformance_robustness(omega, cal.omega_ref, cal.threshold);
  v.residue = v.robustness - cal.rho_m;
  v.inside_interval = cal.contains(v.residue);
  v.flagged = !v.inside_interval;
  return v;
}

/// Mines the trace, scores it against the calibration and, independently,
/// evaluates the safety formula on the raw trace.
inline Verdict detect(const Trace& trace, const Calibration& cal, const ModelTemplate& tpl,
                      const TrainingConfig& config, const CoefficientMap& map = identity_map,
                      const std::optional<stl::Formula>& safety = stl::safety_formula()) {
  const MiningResult mined = mine_coefficients(tpl, trace, config);
  Verdict v = judge(map(mined.omega), cal);
  v.mined = mined.omega;
  if (!mined.converged) {
    v.low_confidence = true;
    v.note = "mining did not converge within " + std::to_string(mined.epochs_used) + " epochs";
  }
  if (safety) {
    v.safety_robustness = stl::robustness(*safety, trace);
    v.safety_evaluated = true;
  }
  return v;
}

/// One draw from the input space: a trace and the true coefficients of the
/// model that produced it (comparison space).
struct SurrogateSample {
  Trace trace;
  CoefficientVector truth;
};

using SurrogateSampler = std::function<SurrogateSample(std::mt19937_64&)>;

struct SurrogateEstimate {
  std::size_t samples = 0;
  std::size_t within = 0;
  std::size_t failures = 0;
  double delta = 0.0;
  double probability = 0.0;  // empirical 1 - epsilon
  double epsilon = 1.0;
  double half_width = 0.0;   // 95% Wilson interval half-width
  std::vector<double> gaps;  // |rho(phi, truth) - rho(phi, mined)|, +inf for failures
};

inline double wilson_half_width(std::size_t successes, std::size_t n, double z = 1.96) {
  if (n == 0) return 1.0;
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  return z / (1.0 + z2 / nn) * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
}

/// Monte Carlo estimate of P(|rho(phi, truth) - rho(phi, mined)| <= delta).
/// Mining failures count as exceedances.
inline SurrogateEstimate validate_surrogate(const SurrogateSampler& sampler, std::size_t count,
                                            const ModelTemplate& tpl, const TrainingConfig& config,
                                            const CoefficientMap& map, const stl::Formula& phi, double delta,
                                            std::uint64_t seed) {
  if (count < 30) throw InsufficientDataError("surrogate validation needs at least 30 samples");
  if (!(delta >= 0.0)) throw ValidationError("delta must be non-negative");
  std::mt19937_64 rng(seed);
  SurrogateEstimate est;
  est.delta = delta;
  est.samples = count;
  for (std::size_t i = 0; i < count; ++i) {
    SurrogateSample sample = sampler(rng);
    double gap = std::numeric_limits<double>::infinity();
    bool ok = false;
    try {
      const MiningResult mined = mine_coefficients(tpl, sample.trace, config);
      const CoefficientVector mapped = map(mined.omega);
      const CoefficientVector truth_seq[] = {sample.truth};
      const CoefficientVector mined_seq[] = {mapped};
      const double rt = stl::robustness(phi, stl::Signal::from_coefficients(truth_seq));
      const double rm = stl::robustness(phi, stl::Signal::from_coefficients(mined_seq));
      gap = std::abs(rt - rm);
      if (!std::isfinite(rt) && rt == rm) gap = 0.0;
      ok = true;
    } catch (const Error&) {
      ++est.failures;
    }
    est.gaps.push_back(gap);
    if (ok && gap <= delta) ++est.within;
  }
  est.probability = static_cast<double>(est.within) / static_cast<double>(count);
  est.epsilon = 1.0 - est.probability;
  est.half_width = wilson_half_width(est.within, count);
  return est;
}

}  // namespace u2d
