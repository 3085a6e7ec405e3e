#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "u2detect/bergman.hpp"
#include "u2detect/dih_rnn.hpp"

using namespace u2d;
using S = SlotSign;

namespace {

ModelTemplate scalar(S a, S b) { return ModelTemplate({"x"}, {"u"}, {{a}}, {b}, {true}); }

CoefficientVector coeffs(const ModelTemplate& t, std::vector<double> v) { return bind_coefficients(t, v); }

// Dense n x n matrix power applied to x0: (I + tau A)^k x0, independent of the kernel.
std::vector<double> euler_closed_form(const std::vector<double>& a, std::size_t n, double tau, std::vector<double> x,
                                      std::size_t k) {
  std::vector<double> m(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] = (i == j ? 1.0 : 0.0) + tau * a[i * n + j];
  // binary exponentiation
  std::vector<double> r(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) r[i * n + i] = 1.0;
  auto mul = [n](const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<double> o(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < n; ++l)
        for (std::size_t j = 0; j < n; ++j) o[i * n + j] += p[i * n + l] * q[l * n + j];
    return o;
  };
  while (k) {
    if (k & 1) r = mul(r, m);
    m = mul(m, m);
    k >>= 1;
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += r[i * n + j] * x[j];
  return out;
}

struct RandomNet {
  ModelTemplate tpl;
  CoefficientVector w;
};

// 4 x 4 pattern with stable diagonal and a mix of signed off-diagonals.
RandomNet random4(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 0.6);
  std::vector<std::vector<S>> a(4, std::vector<S>(4, S::zero));
  for (int i = 0; i < 4; ++i) a[i][i] = S::negative;
  a[0][1] = S::positive;
  a[1][2] = S::any;
  a[3][0] = S::negative;
  std::vector<S> b{S::positive, S::zero, S::zero, S::negative};
  ModelTemplate tpl({"w", "x", "y", "z"}, {"u1", "", "", "u4"}, a, b, {true, false, true, true});
  std::vector<double> v;
  for (const auto& s : tpl.slots()) {
    const double m = mag(rng);
    v.push_back(s.sign == S::negative ? -m : m);
  }
  return {tpl, bind_coefficients(tpl, v)};
}

Trace random_inputs_trace(const ModelTemplate& tpl, double tau, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Trace t(tau);
  for (const auto& name : tpl.active_inputs()) {
    std::vector<double> u(samples);
    for (double& x : u) x = g(rng);
    t.add(name, u);
  }
  return t;
}

// Self-generated trace with observed signals perturbed, so gradients are non-trivial.
Trace target_trace(const DihNetwork& truth, const Trace& inputs, std::uint64_t seed) {
  const auto& tpl = truth.model();
  std::vector<double> x0(tpl.size(), 0.0);
  for (std::size_t i : tpl.observable_indices()) x0[i] = 0.3;
  const auto states = forward_pass(truth, inputs_from_trace(tpl, inputs), x0, inputs.samples() - 1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.05);
  Trace out = inputs;
  for (std::size_t i : tpl.observable_indices()) {
    auto y = states.at(tpl.variables()[i]);
    for (std::size_t k = 1; k < y.size(); ++k) y[k] += g(rng);
    out.add(tpl.variables()[i], y);
  }
  return out;
}

void expect_fd_agreement(const DihNetwork& net, const Trace& trace, const LossOptions& opt) {
  const auto lg = loss_and_gradient(net, trace, opt);
  const auto w = net.weights().values();
  for (std::size_t s = 0; s < w.size(); ++s) {
    const double h = 1e-6 * std::max(1.0, std::abs(w[s]));
    auto at = [&](double delta) {
      auto v = w;
      v[s] += delta;
      DihNetwork probe(net.model(), net.tau(), net.weights().with_values(v));
      return loss(probe, trace, opt);
    };
    const double fd = (at(h) - at(-h)) / (2.0 * h);
    const double scale = std::max(std::abs(fd), std::abs(lg.gradient[s]));
    SCOPED_TRACE(net.model().slots()[s].name);
    if (scale < 1e-12) continue;
    EXPECT_LE(std::abs(fd - lg.gradient[s]) / scale, 1e-4) << "fd " << fd << " adjoint " << lg.gradient[s];
  }
}

}  // namespace

TEST(Induction, BergmanWiring) {
  const auto net = induce_network(bergman::bergman_template(), 1.0);
  ASSERT_EQ(net.cells().size(), 3u);
  const auto& c = net.cells();
  // delta_i: self loop + u1; delta_i_s: self + from delta_i; delta_G: self + from delta_i_s + u2
  ASSERT_EQ(c[0].connections.size(), 1u);
  EXPECT_EQ(c[0].connections[0].from, 0u);
  EXPECT_TRUE(c[0].input_slot.has_value());
  EXPECT_EQ(c[0].input_name, "u1");
  ASSERT_EQ(c[1].connections.size(), 2u);
  EXPECT_FALSE(c[1].input_slot.has_value());
  ASSERT_EQ(c[2].connections.size(), 2u);
  EXPECT_EQ(c[2].input_name, "u2");
  EXPECT_EQ(net.connection_count(), 5u);
  EXPECT_EQ(net.input_tap_count(), 2u);
  EXPECT_EQ(net.parameter_count(), 7u);
}

TEST(Induction, SmallestNetwork) {
  const auto net = induce_network(scalar(S::any, S::zero), 1.0);
  ASSERT_EQ(net.cells().size(), 1u);
  EXPECT_EQ(net.connection_count(), 1u);
  EXPECT_EQ(net.input_tap_count(), 0u);
}

TEST(Induction, RandomPatternEdgeCount) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<S>> a(4, std::vector<S>(4, S::zero));
    std::size_t nz = 0;
    for (int i = 0; i < 4; ++i) {
      a[i][i] = S::negative;
      ++nz;
    }
    std::vector<std::pair<int, int>> off;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        if (i != j) off.emplace_back(i, j);
    std::shuffle(off.begin(), off.end(), rng);
    for (int k = 0; k < 3; ++k, ++nz) a[off[k].first][off[k].second] = S::any;
    std::vector<S> b(4, S::zero);
    b[rng() % 4] = S::positive;
    std::size_t bz = 1;
    for (int i = 0; i < 4 && bz < 2; ++i)
      if (b[i] == S::zero) {
        b[i] = S::negative;
        ++bz;
      }
    ModelTemplate tpl({"a", "b", "c", "d"}, {"u", "v", "w", "x"}, a, b, {true, true, true, true});
    const auto net = induce_network(tpl, 0.1);
    EXPECT_EQ(nz, 7u);
    EXPECT_EQ(net.connection_count(), 7u);
    EXPECT_EQ(net.input_tap_count(), 2u);
  }
}

TEST(ForwardPass, DiscretePureIntegrator) {
  const auto t = scalar(S::any, S::positive);
  DihNetwork net(t, 0.5, coeffs(t, {0.0, 1.0}));
  InputSchedule u;
  u.add_step("u", 0.0, 1.0);
  const std::vector<double> x0{0.0};
  const auto tr = forward_pass(net, u, x0, 4);
  EXPECT_EQ(tr.at("x"), (std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0}));
}

TEST(ForwardPass, EulerProductAndBound) {
  const auto t = scalar(S::negative, S::zero);
  DihNetwork net(t, 0.01, coeffs(t, {-0.1}));
  const std::vector<double> x0{1.0};
  const auto tr = forward_pass(net, InputSchedule{}, x0, 1000);
  EXPECT_NEAR(tr.at("x").back(), std::pow(1.0 - 0.001, 1000), 1e-12);
  EXPECT_NEAR(tr.at("x").back(), 0.3677, 5e-5);
  EXPECT_LE(std::abs(tr.at("x").back() - std::exp(-1.0)) / std::exp(-1.0), 1e-3);
}

TEST(ForwardPass, MatchesMatrixPowerOnRandomNets) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto rn = random4(seed);
    const double tau = 0.05;
    DihNetwork net(rn.tpl, tau, rn.w);
    const std::vector<double> x0{1.0, -0.5, 0.25, 2.0};
    const auto tr = forward_pass(net, InputSchedule{}, x0, 137);
    const auto sys = assemble(rn.tpl, rn.w);
    const auto expect = euler_closed_form(sys.a, 4, tau, x0, 137);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(tr.at(rn.tpl.variables()[i]).back(), expect[i], 1e-12);
  }
}

TEST(ForwardPass, GenericPathMatchesFixedPath) {
  // 7 variables takes the generic kernel; a chain with the same dynamics in
  // its first 3 states must coincide with a 3-variable (fixed kernel) run.
  std::vector<std::vector<S>> a7(7, std::vector<S>(7, S::zero)), a3(3, std::vector<S>(3, S::zero));
  for (int i = 0; i < 7; ++i) a7[i][i] = S::negative;
  for (int i = 0; i < 3; ++i) a3[i][i] = S::negative;
  a7[1][0] = a3[1][0] = S::positive;
  a7[2][1] = a3[2][1] = S::positive;
  std::vector<S> b7(7, S::zero), b3(3, S::zero);
  b7[0] = b3[0] = S::positive;
  ModelTemplate t7({"a", "b", "c", "d", "e", "f", "g"}, {"u", "", "", "", "", "", ""}, a7, b7,
                   {true, true, true, true, true, true, true});
  ModelTemplate t3({"a", "b", "c"}, {"u", "", ""}, a3, b3, {true, true, true});
  std::vector<double> v7{-0.5, 0.3, -0.2, 0.7, -0.4, -1, -1, -1, -1, 2.0};
  std::vector<double> v3{-0.5, 0.3, -0.2, 0.7, -0.4, 2.0};
  DihNetwork n7(t7, 0.1, coeffs(t7, v7)), n3(t3, 0.1, coeffs(t3, v3));
  InputSchedule u;
  u.add_level("u", 0.0, 1.0, 1.0);
  const std::vector<double> x07(7, 0.1), x03(3, 0.1);
  const auto r7 = forward_pass(n7, u, x07, 50);
  const auto r3 = forward_pass(n3, u, x03, 50);
  for (const char* v : {"a", "b", "c"})
    for (std::size_t k = 0; k < 51; ++k) EXPECT_NEAR(r7.at(v)[k], r3.at(v)[k], 1e-14);
}

TEST(ForwardPass, DivergenceIsReported) {
  const auto t = scalar(S::negative, S::zero);
  DihNetwork net(t, 1.0, coeffs(t, {-1e6}));
  const std::vector<double> x0{1.0};
  EXPECT_THROW(forward_pass(net, InputSchedule{}, x0, 5000), DivergenceError);
}

TEST(ForwardPass, BergmanTracksReference) {
  const auto tpl = bergman::bergman_template();
  const auto w = bergman::to_coefficients({});
  const double psi = 1e-3;
  const double tau = bergman::nice_step_below(validate_step_size(tpl, w, psi).tau);
  InputSchedule u;
  u.add_impulse("u1", 0.0, 7.5e6, tau);
  u.add_impulse("u2", 0.0, 20e3, tau);
  const std::vector<double> x0(3, 0.0);
  const auto steps = static_cast<std::size_t>(std::llround(60.0 / tau));
  const auto ref = integrate_reference(tpl, w, u, x0, tau, steps, 4);
  const auto fp = forward_pass(DihNetwork(tpl, tau, w), u, x0, steps);
  const auto& y = ref.at("delta_G");
  double norm = 0.0;
  for (double v : y) norm += v * v;
  norm = std::sqrt(norm / static_cast<double>(y.size()));
  EXPECT_LE(trace_distance(fp, ref, {"delta_G"}), psi * norm);
  // Un-normalized loss of the oracle trace at the true weights is within (psi * peak)^2.
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  Trace obs(tau);
  obs.add("delta_G", y);
  obs.add("u1", ref.at("u1"));
  obs.add("u2", ref.at("u2"));
  EXPECT_LE(loss(DihNetwork(tpl, tau, w), obs), (psi * peak) * (psi * peak));
}

TEST(StepSize, Examples) {
  const std::vector<double> d1{-0.1, -0.028};
  EXPECT_NEAR(validate_step_size(d1, 5e-5).tau, 0.1, 1e-12);
  const std::vector<double> d2{-1.0};
  EXPECT_NEAR(validate_step_size(d2, 0.5).tau, 1.0, 1e-12);
  const std::vector<double> d3{0.0};
  EXPECT_TRUE(validate_step_size(d3, 0.1).unbounded);
  EXPECT_THROW(validate_step_size(d2, 0.0), ValidationError);
  EXPECT_THROW(validate_step_size(d2, 1.0), ValidationError);
  double prev = validate_step_size(d1, 0.9).tau;
  for (double psi = 0.5; psi > 1e-9; psi /= 3.0) {
    const double t = validate_step_size(d1, psi).tau;
    EXPECT_LT(t, prev);
    prev = t;
  }
}

TEST(StepSize, BergmanBoundIsSetByInsulinClearance) {
  const auto b = validate_step_size(bergman::bergman_template(), bergman::to_coefficients({}), 1e-4);
  EXPECT_NEAR(b.tau, std::sqrt(2e-4) / 199.6, 1e-15);
}

TEST(Loss, ZeroOnSelfGeneratedTrace) {
  const auto rn = random4(3);
  DihNetwork net(rn.tpl, 0.05, rn.w);
  const Trace inputs = random_inputs_trace(rn.tpl, 0.05, 80, 9);
  std::vector<double> x0(4, 0.0);
  for (std::size_t i : rn.tpl.observable_indices()) x0[i] = 0.3;
  auto states = forward_pass(net, inputs_from_trace(rn.tpl, inputs), x0, 79);
  Trace tr = inputs;
  for (std::size_t i : rn.tpl.observable_indices()) tr.add(rn.tpl.variables()[i], states.at(rn.tpl.variables()[i]));
  const auto lg = loss_and_gradient(net, tr);
  EXPECT_EQ(lg.loss, 0.0);
  for (double g : lg.gradient) EXPECT_NEAR(g, 0.0, 1e-10);
}

TEST(Loss, ConstantDisagreement) {
  const auto t = scalar(S::negative, S::zero);
  DihNetwork net(t, 0.1, coeffs(t, {-0.5}));
  const std::vector<double> x0{1.0};
  auto y = forward_pass(net, InputSchedule{}, x0, 20).at("x");
  for (std::size_t k = 1; k < y.size(); ++k) y[k] += 0.3;
  Trace tr(0.1);
  tr.add("x", y);
  // sample 0 seeds the initial state, so only N of N + 1 samples disagree
  EXPECT_NEAR(loss(net, tr), 0.09 * 20.0 / 21.0, 1e-12);
  LossOptions norm;
  norm.normalize_per_signal = true;
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  EXPECT_NEAR(loss(net, tr, norm), 0.09 * 20.0 / 21.0 / (peak * peak), 1e-12);
}

TEST(Gradient, ScalarTwoStepsByHand) {
  // x1 = x0 (1 + tau a) + tau b u0, x2 = x1 (1 + tau a) + tau b u1,
  // L = ((x1 - y1)^2 + (x2 - y2)^2) / 3 with x0 = y0.
  const auto t = scalar(S::negative, S::positive);
  const double a = -0.4, b = 0.8, tau = 0.5;
  const double y0 = 1.0, y1 = 0.7, y2 = 0.9, u0 = 1.0, u1 = -2.0;
  Trace tr(tau);
  tr.add("x", {y0, y1, y2});
  tr.add("u", {u0, u1, 0.0});
  DihNetwork net(t, tau, coeffs(t, {a, b}));
  const double x1 = y0 * (1 + tau * a) + tau * b * u0;
  const double x2 = x1 * (1 + tau * a) + tau * b * u1;
  const double dx1_da = tau * y0, dx1_db = tau * u0;
  const double dx2_da = dx1_da * (1 + tau * a) + x1 * tau, dx2_db = dx1_db * (1 + tau * a) + tau * u1;
  const double gL_a = 2.0 / 3.0 * ((x1 - y1) * dx1_da + (x2 - y2) * dx2_da);
  const double gL_b = 2.0 / 3.0 * ((x1 - y1) * dx1_db + (x2 - y2) * dx2_db);
  const auto lg = loss_and_gradient(net, tr);
  EXPECT_NEAR(lg.loss, ((x1 - y1) * (x1 - y1) + (x2 - y2) * (x2 - y2)) / 3.0, 1e-15);
  EXPECT_NEAR(lg.gradient[0], gL_a, 1e-12);
  EXPECT_NEAR(lg.gradient[1], gL_b, 1e-12);
}

TEST(Gradient, FiniteDifferencesScalar) {
  const auto t = scalar(S::negative, S::positive);
  DihNetwork truth(t, 0.1, coeffs(t, {-0.3, 1.1}));
  const auto tr = target_trace(truth, random_inputs_trace(t, 0.1, 60, 2), 4);
  DihNetwork net(t, 0.1, coeffs(t, {-0.45, 0.7}));
  expect_fd_agreement(net, tr, {});
  LossOptions n;
  n.normalize_per_signal = true;
  expect_fd_agreement(net, tr, n);
}

TEST(Gradient, FiniteDifferencesRandom4x4) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto rn = random4(seed);
    DihNetwork truth(rn.tpl, 0.05, rn.w);
    const auto tr = target_trace(truth, random_inputs_trace(rn.tpl, 0.05, 120, seed + 10), seed);
    const auto start = perturbed(rn.w, 0.3, seed + 100);
    DihNetwork net(rn.tpl, 0.05, start);
    LossOptions opt;
    opt.normalize_per_signal = true;
    opt.prior = rn.w.values();
    opt.prior_weight = 0.1;
    expect_fd_agreement(net, tr, opt);
  }
}

TEST(Gradient, FiniteDifferencesBergman) {
  const auto s = bergman::generate_scenario(15, 17, bergman::FaultScenario::none(), [] {
    bergman::ScenarioOptions o;
    o.horizon_min = 60;
    return o;
  }());
  const auto tpl = bergman::bergman_template();
  const auto start = perturbed(bergman::to_coefficients({}), 0.1, 3);
  DihNetwork net(tpl, s.logged.tau(), start);
  LossOptions opt;
  opt.normalize_per_signal = true;
  expect_fd_agreement(net, s.logged, opt);
}

TEST(Mining, ScalarDecayRecoveredAgainstGridSearch) {
  const auto t = ModelTemplate({"x"}, {""}, {{S::negative}}, {S::zero}, {true});
  const auto tr = integrate_reference(t, coeffs(t, {-0.1}), InputSchedule{}, std::vector<double>{1.0}, 0.1, 300);
  Trace obs(0.1);
  obs.add("x", tr.at("x"));
  TrainingConfig c;
  c.learning_rate = 0.02;
  c.max_epochs = 20000;
  c.convergence_tol = 1e-10;
  c.patience = 200;
  c.initial = coeffs(t, {-0.5});
  const auto r = mine_coefficients(t, obs, c);
  // grid search oracle over a
  double best_a = 0.0, best_l = 1e300;
  for (double a = -0.2; a <= -0.05; a += 1e-5) {
    const double l = loss(DihNetwork(t, 0.1, coeffs(t, {a})), obs);
    if (l < best_l) {
      best_l = l;
      best_a = a;
    }
  }
  EXPECT_NEAR(r.omega.value(0), -0.1, 1e-3);
  EXPECT_NEAR(r.omega.value(0), best_a, 2e-5);
  EXPECT_TRUE(r.converged);
}

TEST(Mining, StartAtOptimumStopsImmediately) {
  const auto t = scalar(S::negative, S::positive);
  DihNetwork truth(t, 0.1, coeffs(t, {-0.3, 1.1}));
  const Trace inputs = random_inputs_trace(t, 0.1, 50, 8);
  auto st = forward_pass(truth, inputs_from_trace(t, inputs), std::vector<double>{0.3}, 49);
  Trace tr = inputs;
  tr.add("x", st.at("x"));
  TrainingConfig c;
  c.initial = truth.weights();
  const auto r = mine_coefficients(t, tr, c);
  EXPECT_LE(r.epochs_used, 2u);
  EXPECT_EQ(r.final_loss, 0.0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.omega, truth.weights());
}

TEST(Mining, RecoversRandomNetwork) {
  const auto rn = random4(2);
  DihNetwork truth(rn.tpl, 0.05, rn.w);
  Trace inputs = random_inputs_trace(rn.tpl, 0.05, 400, 21);
  std::vector<double> x0(4, 0.0);
  for (std::size_t i : rn.tpl.observable_indices()) x0[i] = 0.3;
  auto st = forward_pass(truth, inputs_from_trace(rn.tpl, inputs), x0, 399);
  Trace tr = inputs;
  for (std::size_t i : rn.tpl.observable_indices()) tr.add(rn.tpl.variables()[i], st.at(rn.tpl.variables()[i]));
  TrainingConfig c;
  c.learning_rate = 0.01;
  c.max_epochs = 20000;
  c.convergence_tol = 1e-10;
  c.patience = 200;
  c.target_loss = 1e-14;
  c.initial = perturbed(rn.w, 0.2, 77);
  const auto r = mine_coefficients(rn.tpl, tr, c);
  // x is hidden and input-free, so only the product a_w_x * a_x_y is identifiable
  const auto ridge = [](const CoefficientVector& w) { return w.value_of("a_w_x") * w.value_of("a_x_y"); };
  EXPECT_NEAR(ridge(r.omega) / ridge(rn.w), 1.0, 1e-3) << "epochs " << r.epochs_used << " loss " << r.final_loss;
  for (std::size_t s = 0; s < rn.w.size(); ++s) {
    const auto& name = rn.tpl.slots()[s].name;
    if (name == "a_w_x" || name == "a_x_y") continue;
    EXPECT_NEAR(r.omega.value(s) / rn.w.value(s), 1.0, 1e-3) << name;
  }
  EXPECT_TRUE(r.replicates_within(0.05));
}

TEST(Mining, SignProjectionHolds) {
  const auto rn = random4(4);
  DihNetwork truth(rn.tpl, 0.05, rn.w);
  const auto tr = target_trace(truth, random_inputs_trace(rn.tpl, 0.05, 100, 4), 4);
  TrainingConfig c;
  c.learning_rate = 0.2;
  c.max_epochs = 200;
  c.initial = rn.w;
  const auto r = mine_coefficients(rn.tpl, tr, c);
  for (std::size_t s = 0; s < rn.tpl.slot_count(); ++s) EXPECT_TRUE(sign_admits(rn.tpl.slots()[s].sign, r.omega.value(s)));
}

TEST(Mining, DivergenceRaisesTrainingError) {
  const auto t = scalar(S::negative, S::positive);
  DihNetwork truth(t, 0.1, coeffs(t, {-0.3, 1.1}));
  const auto tr = target_trace(truth, random_inputs_trace(t, 0.1, 2000, 2), 4);
  TrainingConfig c;
  c.learning_rate = 10.0;
  c.initial = coeffs(t, {-15.0, 1.0});
  EXPECT_THROW(mine_coefficients(t, tr, c), TrainingDivergedError);
}

TEST(Mining, LossExplosionUnderSignProjectionIsDivergence) {
  // Runaway steps are clipped to zero by the sign pattern, so the forward pass
  // stays finite; the loss still blows up against its starting value.
  bergman::ScenarioOptions o;
  o.horizon_min = 30;
  const auto s = bergman::generate_scenario(15, 17, bergman::FaultScenario::none(), o);
  TrainingConfig c = bergman::case_study_mining_config();
  c.learning_rate = 10.0;
  c.initial = perturbed(bergman::to_coefficients({}), 0.2, 3);
  try {
    mine_coefficients(bergman::bergman_template(), s.logged, c);
    ADD_FAILURE() << "expected TrainingDivergedError";
  } catch (const TrainingDivergedError& e) {
    EXPECT_GE(e.epoch(), 2u);
  }
  c.learning_rate = 1e-2;
  EXPECT_NO_THROW(mine_coefficients(bergman::bergman_template(), s.logged, c));
}

TEST(Mining, ConfigValidation) {
  TrainingConfig c;
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.prior_weight = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.psi = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.divergence_factor = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Mining, MissingObservableIsShapeError) {
  const auto t = scalar(S::negative, S::positive);
  Trace tr(0.1);
  tr.add("u", {0, 0, 0});
  EXPECT_THROW(mine_coefficients(t, tr, TrainingConfig{}), ShapeError);
}

TEST(Mining, SequenceKeepsOrderAndIsDeterministic) {
  const auto t = scalar(S::negative, S::positive);
  DihNetwork truth(t, 0.1, coeffs(t, {-0.3, 1.1}));
  const auto a = target_trace(truth, random_inputs_trace(t, 0.1, 60, 1), 1);
  const auto b = target_trace(truth, random_inputs_trace(t, 0.1, 60, 2), 2);
  Trace bad(0.1);
  bad.add("u", {0, 0, 0});
  TrainingConfig c;
  c.learning_rate = 0.02;
  c.max_epochs = 300;
  EXPECT_TRUE(mine_trace_sequence(t, {}, c).empty());
  const auto r1 = mine_trace_sequence(t, {a, b, bad, a}, c, 1);
  const auto r2 = mine_trace_sequence(t, {a, b, bad, a}, c, 3);
  ASSERT_EQ(r1.size(), 4u);
  EXPECT_TRUE(r1[0].ok());
  EXPECT_FALSE(r1[2].ok());
  EXPECT_FALSE(r1[2].error.empty());
  EXPECT_EQ(r1[0].result->omega, r1[3].result->omega);
  EXPECT_EQ(r1[0].result->omega, r2[0].result->omega);
  EXPECT_EQ(r1[1].result->omega, r2[1].result->omega);
}

TEST(Mining, InitialWeightsRespectSigns) {
  const auto rn = random4(6);
  DihNetwork truth(rn.tpl, 0.05, rn.w);
  const auto tr = target_trace(truth, random_inputs_trace(rn.tpl, 0.05, 100, 6), 6);
  const auto w1 = initial_weights(rn.tpl, tr, 1);
  const auto w2 = initial_weights(rn.tpl, tr, 1);
  EXPECT_EQ(w1, w2);
  for (std::size_t s = 0; s < rn.tpl.slot_count(); ++s) {
    EXPECT_TRUE(sign_admits(rn.tpl.slots()[s].sign, w1.value(s)));
    EXPECT_NE(w1.value(s), 0.0);
  }
}

TEST(Perturbation, BoundedAndSeeded) {
  const auto w = bergman::to_coefficients({});
  const auto p1 = perturbed(w, 0.2, 5), p2 = perturbed(w, 0.2, 5), p3 = perturbed(w, 0.2, 6);
  EXPECT_EQ(p1, p2);
  EXPECT_FALSE(p1 == p3);
  for (std::size_t s = 0; s < w.size(); ++s) EXPECT_LE(std::abs(p1.value(s) / w.value(s) - 1.0), 0.2);
  EXPECT_THROW(perturbed(w, 1.0, 0), ValidationError);
}
