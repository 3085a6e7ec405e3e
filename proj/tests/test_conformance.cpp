#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "published_tables.hpp"
#include "u2detect/conformance.hpp"

using namespace u2d;
using S = SlotSign;

namespace {

CoefficientVector physical(const published::Row& r) {
  static const char* names[] = {"p1", "p2", "p3", "p4", "n", "VoI", "G_b"};
  std::vector<CoefficientEntry> e;
  for (std::size_t i = 0; i < 7; ++i) e.push_back({names[i], r[i], ""});
  return CoefficientVector(e);
}

std::vector<double> published_residues() {
  std::vector<double> r;
  for (const auto& row : published::kTestRows) r.push_back(row.residue);
  return r;
}

ModelTemplate decay() { return ModelTemplate({"x"}, {"u"}, {{S::negative}}, {S::positive}, {true}); }

Trace decay_trace(double a, double b, std::size_t samples) {
  const auto t = decay();
  InputSchedule u;
  u.add_level("u", 1.0, 3.0, 1.0);
  const std::vector<double> w{a, b};
  const std::vector<double> x0{0.0};
  return integrate_reference(t, bind_coefficients(t, w), u, x0, 0.1, samples - 1);
}

// Generated by the network itself, so mining from the truth has nothing to correct.
Trace euler_trace(const CoefficientVector& w, std::size_t samples) {
  InputSchedule u;
  u.add_level("u", 1.0, 3.0, 1.0);
  auto tr = forward_pass(DihNetwork(decay(), 0.1, w), u, std::vector<double>{0.0}, samples - 1);
  tr.add("u", u.sample("u", 0.1, samples));
  return tr;
}

}  // namespace

TEST(Rank, Examples) {
  EXPECT_EQ(calibration_rank(6, 0.05), 4u);
  EXPECT_EQ(calibration_rank(4, 0.05), 3u);
  EXPECT_EQ(calibration_rank(2, 0.05), 2u);
  EXPECT_THROW(calibration_rank(1, 0.05), InsufficientDataError);
  EXPECT_THROW(calibration_rank(0, 0.05), InsufficientDataError);
  // m = 2, alpha = 0: rank 2 fits; alpha outside [0, 1) is rejected
  EXPECT_EQ(calibration_rank(2, 0.0), 2u);
  EXPECT_THROW(calibration_rank(6, 1.0), ValidationError);
  EXPECT_THROW(calibration_rank(6, -0.1), ValidationError);
}

TEST(Rank, MonotoneInAlpha) {
  for (std::size_t m = 2; m < 60; ++m) {
    std::size_t prev = calibration_rank(m, 0.0);
    EXPECT_LE(prev, m);
    for (double a = 0.01; a < 0.99; a += 0.01) {
      std::size_t k = 0;
      try {
        k = calibration_rank(m, a);
      } catch (const InsufficientDataError&) {
        break;
      }
      EXPECT_LE(k, prev);
      EXPECT_GE(k, 1u);
      prev = k;
    }
  }
}

TEST(Calibrate, PublishedResidues) {
  const auto c = calibrate_from_residues(0.0543, published_residues(), 0.05);
  EXPECT_EQ(c.rank, 4u);
  EXPECT_NEAR(c.d, published::kD, 1e-4);
  EXPECT_NEAR(c.lo, published::kLo, 1e-4);
  EXPECT_NEAR(c.hi, published::kHi, 1e-4);
  EXPECT_LE(c.lo, c.hi);
  EXPECT_GE(c.d, 0.0);
}

TEST(Calibrate, DegenerateAndHandExamples) {
  const auto z = calibrate_from_residues(0.0, {0, 0, 0, 0, 0, 0});
  EXPECT_EQ(z.d, 0.0);
  EXPECT_EQ(z.lo, 0.0);
  EXPECT_EQ(z.hi, 0.0);
  const auto h = calibrate_from_residues(0.0, {2, -1, 0, -3});
  EXPECT_EQ(h.rank, 3u);
  EXPECT_EQ(h.d, 0.0);
  EXPECT_EQ(h.lo, -3.0);
  EXPECT_EQ(h.hi, 2.0);
}

TEST(Calibrate, NegativeOrderStatisticClampsToZero) {
  const auto c = calibrate_from_residues(0.0, {-3, -2, -1, 5});
  EXPECT_EQ(c.d_raw, -1.0);
  EXPECT_EQ(c.d, 0.0);
  EXPECT_EQ(c.lo, -3.0);
  EXPECT_EQ(c.hi, 5.0);
}

TEST(Calibrate, OrderOfResiduesIsIrrelevant) {
  auto r = published_residues();
  const auto a = calibrate_from_residues(0.0, r);
  std::reverse(r.begin(), r.end());
  const auto b = calibrate_from_residues(0.0, r);
  EXPECT_EQ(a.d, b.d);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
}

TEST(Calibrate, IntervalEndpointsMoveWithD) {
  // only the 4th order statistic moves, min and max stay fixed
  std::vector<double> r{-0.02, -0.01, 0.0, 0.01, 0.02, 0.03};
  double prev_d = -1.0, prev_lo = INFINITY, prev_hi = -INFINITY;
  for (double v : {0.001, 0.005, 0.01, 0.015, 0.019}) {
    r[3] = v;
    const auto c = calibrate_from_residues(0.0, r);
    EXPECT_EQ(c.d, v);
    EXPECT_EQ(c.lo, -0.02 - c.d);
    EXPECT_EQ(c.hi, 0.03 + c.d);
    EXPECT_GT(c.d, prev_d);
    EXPECT_LT(c.lo, prev_lo);
    EXPECT_GT(c.hi, prev_hi);
    prev_d = c.d;
    prev_lo = c.lo;
    prev_hi = c.hi;
  }
}

TEST(Calibrate, SpreadVariantReportedAlongside) {
  const auto r = published_residues();
  const auto c = calibrate_from_residues(0.0543, r);
  double mean = 0.0;
  for (double v : r) mean += v;
  mean /= 6.0;
  double ss = 0.0;
  for (double v : r) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(c.residue_mean, mean, 1e-15);
  EXPECT_NEAR(c.residue_sd, std::sqrt(ss / 5.0), 1e-15);
  EXPECT_NEAR(c.spread_lo(), mean - c.residue_sd, 1e-15);
}

TEST(Calibrate, InsufficientData) {
  EXPECT_THROW(calibrate_from_residues(0.0, {0.1}), InsufficientDataError);
  EXPECT_THROW(calibrate_from_robustness({0.1}, {0.1, 0.2}), InsufficientDataError);
  const auto ref = physical(published::kSimulationSettings);
  EXPECT_THROW(calibrate({ref, ref}, {ref}, ref), InsufficientDataError);
}

TEST(Calibrate, FromCoefficientRowsMatchesPublishedResidues) {
  const auto ref = physical(published::kSimulationSettings);
  const double rho_m = stl::conformance_robustness(physical(published::kTrainMean), ref);
  EXPECT_NEAR(rho_m, 0.0543, 5e-5);
  for (const auto& row : published::kTestRows) {
    const double residue = stl::conformance_robustness(physical(row.omega), ref) - rho_m;
    EXPECT_NEAR(residue, row.residue, 0.005);
  }
}

TEST(Calibrate, FromOmegas) {
  const auto ref = physical(published::kSimulationSettings);
  std::vector<CoefficientVector> test;
  for (const auto& row : published::kTestRows) test.push_back(physical(row.omega));
  const std::vector<CoefficientVector> train{physical(published::kTrainMean), physical(published::kTrainMean)};
  const auto c = calibrate(train, test, ref);
  EXPECT_NEAR(c.rho_m, 0.0543, 5e-5);
  EXPECT_EQ(c.test_residues.size(), 6u);
  EXPECT_EQ(c.rank, 4u);
  EXPECT_EQ(c.omega_ref, ref);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_NEAR(c.test_residues[i], c.test_robustness[i] - c.rho_m, 1e-15);
}

TEST(Judge, ReferenceGivesFloorResidue) {
  const auto ref = physical(published::kSimulationSettings);
  auto c = calibrate_from_residues(0.0543, published_residues());
  c.omega_ref = ref;
  const auto v = judge(ref, c);
  EXPECT_NEAR(v.robustness, -0.01, 1e-15);
  EXPECT_NEAR(v.residue, -0.01 - 0.0543, 1e-15);
  EXPECT_EQ(v.flagged, !c.contains(v.residue));
  EXPECT_TRUE(v.flagged);  // -0.0643 lies below -0.0216
}

TEST(Judge, FlagIffOutsideInterval) {
  const auto ref = physical(published::kSimulationSettings);
  auto c = calibrate_from_residues(0.0543, published_residues());
  c.omega_ref = ref;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> scale(0.85, 1.15);
  for (int i = 0; i < 200; ++i) {
    auto w = ref.values();
    for (auto& x : w) x *= scale(rng);
    const auto v = judge(ref.with_values(w), c);
    EXPECT_EQ(v.flagged, v.residue < c.lo || v.residue > c.hi);
    EXPECT_EQ(v.inside_interval, !v.flagged);
  }
  Calibration empty;
  EXPECT_THROW(judge(ref, empty), ValidationError);
}

TEST(Detect, MinesScoresAndChecksSafetyIndependently) {
  const auto t = decay();
  const auto truth = bind_coefficients(t, std::vector<double>{-0.5, 2.0});
  const Trace tr = euler_trace(truth, 80);
  Calibration c = calibrate_from_residues(0.0, {-0.001, 0.0, 0.001, 0.002});
  c.omega_ref = truth;
  TrainingConfig cfg;
  cfg.initial = truth;
  const auto v = detect(tr, c, t, cfg, identity_map, stl::safety_formula("x", 0.5));
  EXPECT_NEAR(v.robustness, -0.01, 1e-12);
  EXPECT_TRUE(v.flagged);  // -0.01 is below the narrow interval
  EXPECT_TRUE(v.safety_evaluated);
  EXPECT_EQ(v.safety_robustness, -0.5);  // x starts at 0
  EXPECT_FALSE(v.low_confidence);

  TrainingConfig short_run;
  short_run.initial = bind_coefficients(t, std::vector<double>{-0.2, 1.0});
  short_run.max_epochs = 3;
  const auto lc = detect(tr, c, t, short_run, identity_map, std::nullopt);
  EXPECT_TRUE(lc.low_confidence);
  EXPECT_FALSE(lc.note.empty());
  EXPECT_FALSE(lc.safety_evaluated);
}

TEST(Wilson, MatchesClosedForm) {
  // independent evaluation of the Wilson score interval
  for (auto [k, n] : {std::pair{45, 50}, {50, 50}, {0, 30}, {17, 31}}) {
    const double p = static_cast<double>(k) / n, z = 1.96;
    const double centre = (p + z * z / (2.0 * n)) / (1 + z * z / n);
    const double upper = centre + z / (1 + z * z / n) * std::sqrt(p * (1 - p) / n + z * z / (4.0 * n * n));
    EXPECT_NEAR(wilson_half_width(k, n), upper - centre, 1e-15);
  }
  EXPECT_GT(wilson_half_width(50, 50), 0.0);
}

TEST(Surrogate, VacuousAndExactBounds) {
  const auto t = decay();
  const SurrogateSampler sampler = [&](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> a(-0.8, -0.2), b(0.5, 2.0);
    const double av = a(rng), bv = b(rng);
    return SurrogateSample{decay_trace(av, bv, 60), bind_coefficients(t, std::vector<double>{av, bv})};
  };
  const auto phi = stl::conformance_formula(bind_coefficients(t, std::vector<double>{-0.5, 1.0}));
  TrainingConfig cfg;
  cfg.max_epochs = 50;
  const auto inf = validate_surrogate(sampler, 30, t, cfg, identity_map, phi, INFINITY, 3);
  EXPECT_EQ(inf.probability, 1.0);
  EXPECT_EQ(inf.samples, 30u);
  EXPECT_EQ(inf.gaps.size(), 30u);

  // init at truth on a self-generated Euler trace: the start point is already optimal
  const SurrogateSampler self = [&](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> a(-0.8, -0.2), b(0.5, 2.0);
    const auto w = bind_coefficients(t, std::vector<double>{a(rng), b(rng)});
    return SurrogateSample{euler_trace(w, 60), w};
  };
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    const auto s = self(rng);
    TrainingConfig at;
    at.initial = s.truth;
    const SurrogateSampler fixed = [s](std::mt19937_64&) { return s; };
    const auto est = validate_surrogate(fixed, 30, t, at, identity_map, phi, 0.0, seed);
    hits += est.within;
  }
  EXPECT_EQ(hits, 90u);
}

TEST(Surrogate, FailuresCountAgainst) {
  const auto t = decay();
  const SurrogateSampler bad = [&](std::mt19937_64&) {
    Trace tr(0.1);
    tr.add("u", {0, 0, 0});  // no observable column: mining fails
    return SurrogateSample{tr, bind_coefficients(t, std::vector<double>{-0.5, 1.0})};
  };
  const auto phi = stl::conformance_formula(bind_coefficients(t, std::vector<double>{-0.5, 1.0}));
  const auto est = validate_surrogate(bad, 30, t, TrainingConfig{}, identity_map, phi, INFINITY, 0);
  EXPECT_EQ(est.failures, 30u);
  EXPECT_EQ(est.probability, 0.0);
  EXPECT_THROW(validate_surrogate(bad, 29, t, TrainingConfig{}, identity_map, phi, 1.0, 0), InsufficientDataError);
  EXPECT_THROW(validate_surrogate(bad, 30, t, TrainingConfig{}, identity_map, phi, -1.0, 0), ValidationError);
}
