#pragma once

// Dynamics-induced recurrent network: one cell per plant variable, wired by the
// template's sparsity pattern, whose weights are the physical coefficients.
// The forward pass is the explicit Euler recurrence
//   x_i[k+1] = x_i[k] + tau * (sum_j a_ij x_j[k] + b_ii u_i[k])
// and training is full-batch backpropagation through time.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "u2detect/core_model.hpp"
#include "u2detect/error.hpp"
#include "u2detect/fp_env.hpp"

namespace u2d {

/// Incoming link of a cell: the output of cell `from`, weighted by slot `slot`.
struct Connection {
  std::size_t from;
  std::size_t slot;
};

struct Cell {
  std::size_t variable;
  std::vector<Connection> connections;
  std::optional<std::size_t> input_slot;  // b_ii slot when the cell has an external input
  std::string input_name;
};

class DihNetwork {
 public:
  DihNetwork(ModelTemplate tpl, double tau, CoefficientVector weights)
      : template_(std::move(tpl)), tau_(tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("network tau must be positive");
    const auto& slots = template_.slots();
    cells_.resize(template_.size());
    for (std::size_t i = 0; i < template_.size(); ++i) cells_[i].variable = i;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (slots[s].kind == SlotKind::a) {
        cells_[slots[s].row].connections.push_back({slots[s].col, s});
      } else {
        cells_[slots[s].row].input_slot = s;
        cells_[slots[s].row].input_name = template_.inputs()[slots[s].row];
      }
    }
    set_weights(std::move(weights));
  }

  const ModelTemplate& model() const noexcept { return template_; }
  double tau() const noexcept { return tau_; }
  const std::vector<Cell>& cells() const noexcept { return cells_; }
  const CoefficientVector& weights() const noexcept { return weights_; }

  void set_weights(CoefficientVector w) {
    check_binds(template_, w);
    weights_ = std::move(w);
  }

  std::size_t parameter_count() const noexcept { return template_.slot_count(); }

  std::size_t connection_count() const noexcept {
    std::size_t c = 0;
    for (const auto& cell : cells_) c += cell.connections.size();
    return c;
  }

  std::size_t input_tap_count() const noexcept {
    std::size_t c = 0;
    for (const auto& cell : cells_) c += cell.input_slot ? 1 : 0;
    return c;
  }

 private:
  ModelTemplate template_;
  double tau_;
  std::vector<Cell> cells_;
  CoefficientVector weights_;
};

/// Placeholder weights used by induce_network: magnitude 1 with the slot's
/// sign (positive for free-any). Mining replaces them before training.
inline CoefficientVector unit_weights(const ModelTemplate& tpl) {
  std::vector<double> v;
  for (const auto& s : tpl.slots()) v.push_back(s.sign == SlotSign::negative ? -1.0 : 1.0);
  return bind_coefficients(tpl, v);
}

inline DihNetwork induce_network(const ModelTemplate& tpl, double tau) {
  return DihNetwork(tpl, tau, unit_weights(tpl));
}

inline DihNetwork induce_network(const ModelTemplate& tpl, double tau, const CoefficientVector& weights) {
  return DihNetwork(tpl, tau, weights);
}

/// Per-variable input samples u_i[k]; empty for cells without an input tap.
struct InputSeries {
  std::vector<std::vector<double>> per_variable;
};

inline InputSeries inputs_from_trace(const ModelTemplate& tpl, const Trace& trace) {
  InputSeries u;
  u.per_variable.resize(tpl.size());
  for (std::size_t i = 0; i < tpl.size(); ++i)
    if (tpl.has_input(i)) {
      const auto& name = tpl.inputs()[i];
      if (!trace.has(name)) throw ShapeError("trace is missing input signal '" + name + "'");
      u.per_variable[i] = trace.at(name);
    }
  return u;
}

inline InputSeries inputs_from_schedule(const ModelTemplate& tpl, const InputSchedule& schedule, double tau,
                                        std::size_t count) {
  InputSeries u;
  u.per_variable.resize(tpl.size());
  for (std::size_t i = 0; i < tpl.size(); ++i)
    if (tpl.has_input(i)) u.per_variable[i] = schedule.sample(tpl.inputs()[i], tau, count);
  return u;
}

namespace detail {

// Flattened wiring of a network for the hot loops.
class EulerKernel {
 public:
  explicit EulerKernel(const DihNetwork& net) : n_(net.model().size()), tau_(net.tau()) {
    for (const auto& cell : net.cells()) {
      for (const auto& c : cell.connections) edges_.push_back({cell.variable, c.from, c.slot});
      if (cell.input_slot) taps_.push_back({cell.variable, *cell.input_slot});
    }
  }

  std::size_t n() const noexcept { return n_; }

  // States are stored row-per-step: x[k*n + i].
  void forward(std::span<const double> w, const InputSeries& u, std::span<const double> x0, std::size_t steps,
               std::vector<double>& x) const {
    for (const auto& t : taps_)
      if (u.per_variable[t.target].size() < steps)
        throw ShapeError("input series shorter than the requested number of steps");
    x.resize((steps + 1) * n_);
    std::copy(x0.begin(), x0.end(), x.begin());
    switch (n_) {
      case 1: return forward_fixed<1>(w, u, steps, x);
      case 2: return forward_fixed<2>(w, u, steps, x);
      case 3: return forward_fixed<3>(w, u, steps, x);
      case 4: return forward_fixed<4>(w, u, steps, x);
      case 5: return forward_fixed<5>(w, u, steps, x);
      case 6: return forward_fixed<6>(w, u, steps, x);
      default: return forward_generic(w, u, steps, x);
    }
  }

  // d loss / d w given dl/dx[k] for every step (row-per-step, same layout as x).
  void backward(std::span<const double> w, const InputSeries& u, const std::vector<double>& x,
                const std::vector<double>& dl_dx, std::size_t steps, std::span<double> grad) const {
    backward_seeded(w, u, x, steps, grad, [&](std::size_t k, double* lam) {
      const double* d = dl_dx.data() + k * n_;
      for (std::size_t i = 0; i < n_; ++i) lam[i] += d[i];
    });
  }

  // Same adjoint sweep with dl/dx[k] supplied on the fly: seed(k, lam) adds
  // it into lam (length n) for k = steps, ..., 1.
  template <class Seed>
  void backward_seeded(std::span<const double> w, const InputSeries& u, const std::vector<double>& x,
                       std::size_t steps, std::span<double> grad, Seed&& seed) const {
    std::fill(grad.begin(), grad.end(), 0.0);
    switch (n_) {
      case 1: return backward_fixed<1>(w, u, x, steps, grad, seed);
      case 2: return backward_fixed<2>(w, u, x, steps, grad, seed);
      case 3: return backward_fixed<3>(w, u, x, steps, grad, seed);
      case 4: return backward_fixed<4>(w, u, x, steps, grad, seed);
      case 5: return backward_fixed<5>(w, u, x, steps, grad, seed);
      case 6: return backward_fixed<6>(w, u, x, steps, grad, seed);
      default: return backward_generic(w, u, x, steps, grad, seed);
    }
  }

 private:
  static constexpr std::size_t kCheckEvery = 1024;

  // Dense small-n kernels: I + tau*A and tau*B laid out in fixed arrays.
  template <std::size_t N>
  struct Dense {
    std::array<double, N * N> m{};
    std::array<double, N> b{};
    std::array<const double*, N> u{};
  };

  template <std::size_t N>
  Dense<N> dense(std::span<const double> w, const InputSeries& u) const {
    Dense<N> d;
    for (std::size_t i = 0; i < N; ++i) d.m[i * N + i] = 1.0;
    for (const auto& e : edges_) d.m[e.target * N + e.source] += tau_ * w[e.slot];
    for (const auto& t : taps_) {
      d.b[t.target] = tau_ * w[t.slot];
      d.u[t.target] = u.per_variable[t.target].data();
    }
    return d;
  }

  template <std::size_t N>
  void forward_fixed(std::span<const double> w, const InputSeries& u, std::size_t steps, std::vector<double>& x) const {
    const Dense<N> d = dense<N>(w, u);
    std::array<double, N> cur;
    std::copy_n(x.data(), N, cur.begin());
    for (std::size_t k = 0; k < steps; ++k) {
      std::array<double, N> nxt;
      for (std::size_t i = 0; i < N; ++i) {
        double a = d.u[i] ? d.b[i] * d.u[i][k] : 0.0;
        for (std::size_t j = 0; j < N; ++j) a += d.m[i * N + j] * cur[j];
        nxt[i] = a;
      }
      cur = nxt;
      std::copy_n(cur.begin(), N, x.data() + (k + 1) * N);
      if ((k + 1) % kCheckEvery == 0 || k + 1 == steps) check_finite(x, k + 1 < kCheckEvery ? 0 : k + 1 - kCheckEvery, k + 1);
    }
  }

  template <std::size_t N, class Seed>
  void backward_fixed(std::span<const double> w, const InputSeries& u, const std::vector<double>& x, std::size_t steps,
                      std::span<double> grad, Seed& seed) const {
    const Dense<N> d = dense<N>(w, u);
    std::array<double, N> lam{};
    seed(steps, lam.data());
    std::array<double, N * N> ga{};
    std::array<double, N> gb{};
    for (std::size_t kk = steps; kk-- > 0;) {
      const double* xk = x.data() + kk * N;
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < N; ++j) ga[i * N + j] += lam[i] * xk[j];
        if (d.u[i]) gb[i] += lam[i] * d.u[i][kk];
      }
      if (kk == 0) break;
      std::array<double, N> nxt{};
      seed(kk, nxt.data());
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t i = 0; i < N; ++i) nxt[j] += d.m[i * N + j] * lam[i];
      lam = nxt;
    }
    for (const auto& e : edges_) grad[e.slot] += tau_ * ga[e.target * N + e.source];
    for (const auto& t : taps_) grad[t.slot] += tau_ * gb[t.target];
  }

  void forward_generic(std::span<const double> w, const InputSeries& u, std::size_t steps, std::vector<double>& x) const {
    const auto edges = scaled_edges(w);
    const auto taps = scaled_taps(w, u);
    std::vector<double> acc(n_);
    for (std::size_t k = 0; k < steps; ++k) {
      const double* xk = x.data() + k * n_;
      double* xn = x.data() + (k + 1) * n_;
      for (std::size_t i = 0; i < n_; ++i) acc[i] = xk[i];
      for (const auto& e : edges) acc[e.target] += e.coef * xk[e.source];
      for (const auto& t : taps) acc[t.target] += t.coef * t.input[k];
      for (std::size_t i = 0; i < n_; ++i) xn[i] = acc[i];
      if ((k + 1) % kCheckEvery == 0 || k + 1 == steps) check_finite(x, k + 1 < kCheckEvery ? 0 : k + 1 - kCheckEvery, k + 1);
    }
  }

  template <class Seed>
  void backward_generic(std::span<const double> w, const InputSeries& u, const std::vector<double>& x,
                        std::size_t steps, std::span<double> grad, Seed& seed) const {
    const auto edges = scaled_edges(w);
    const auto taps = scaled_taps(w, u);
    std::vector<double> lam(n_, 0.0), next(n_);
    seed(steps, lam.data());
    // Accumulate sum_k lam[k+1] * x[k] per edge, scale by tau once at the end.
    std::vector<double> ge(edges.size(), 0.0), gt(taps.size(), 0.0);
    for (std::size_t kk = steps; kk-- > 0;) {
      const double* xk = x.data() + kk * n_;
      for (std::size_t j = 0; j < edges.size(); ++j) ge[j] += lam[edges[j].target] * xk[edges[j].source];
      for (std::size_t j = 0; j < taps.size(); ++j) gt[j] += lam[taps[j].target] * taps[j].input[kk];
      if (kk == 0) break;
      std::copy(lam.begin(), lam.end(), next.begin());
      seed(kk, next.data());
      for (const auto& e : edges) next[e.source] += e.coef * lam[e.target];
      lam.swap(next);
    }
    for (std::size_t j = 0; j < edges.size(); ++j) grad[edges_[j].slot] += tau_ * ge[j];
    for (std::size_t j = 0; j < taps.size(); ++j) grad[taps_[j].slot] += tau_ * gt[j];
  }

  struct Edge {
    std::size_t target, source, slot;
  };
  struct Tap {
    std::size_t target, slot;
  };
  struct ScaledEdge {
    std::size_t target, source;
    double coef;
  };
  struct ScaledTap {
    std::size_t target;
    double coef;
    const double* input;
  };

  std::vector<ScaledEdge> scaled_edges(std::span<const double> w) const {
    std::vector<ScaledEdge> out;
    out.reserve(edges_.size());
    for (const auto& e : edges_) out.push_back({e.target, e.source, tau_ * w[e.slot]});
    return out;
  }

  std::vector<ScaledTap> scaled_taps(std::span<const double> w, const InputSeries& u) const {
    std::vector<ScaledTap> out;
    out.reserve(taps_.size());
    for (const auto& t : taps_) out.push_back({t.target, tau_ * w[t.slot], u.per_variable[t.target].data()});
    return out;
  }

  // Throws at the first non-finite sample among steps (from, to].
  void check_finite(const std::vector<double>& x, std::size_t from, std::size_t to) const {
    double sum = 0.0;
    for (std::size_t k = (from + 1) * n_; k < (to + 1) * n_; ++k) sum += x[k] * 0.0;
    if (sum == 0.0) return;
    for (std::size_t k = from + 1; k <= to; ++k)
      for (std::size_t i = 0; i < n_; ++i)
        if (!std::isfinite(x[k * n_ + i]))
          throw DivergenceError("forward pass diverged (tau too large or unstable weights)", k);
  }

  std::size_t n_;
  double tau_;
  std::vector<Edge> edges_;
  std::vector<Tap> taps_;
};

inline Trace states_to_trace(const DihNetwork& net, const std::vector<double>& x, std::size_t steps,
                             const InputSeries& u) {
  const auto& tpl = net.model();
  const std::size_t n = tpl.size();
  Trace out(net.tau());
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> col(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k) col[k] = x[k * n + i];
    out.add(tpl.variables()[i], std::move(col));
  }
  for (std::size_t i = 0; i < n; ++i)
    if (tpl.has_input(i) && !out.has(tpl.inputs()[i])) {
      std::vector<double> col(u.per_variable[i].begin(), u.per_variable[i].end());
      col.resize(steps + 1, col.empty() ? 0.0 : col.back());
      out.add(tpl.inputs()[i], std::move(col));
    }
  return out;
}

inline void check_tau(const DihNetwork& net, const Trace& trace) {
  if (std::abs(trace.tau() - net.tau()) > 1e-9 * net.tau())
    throw ValidationError("trace sampling period " + std::to_string(trace.tau()) + " does not match network tau " +
                          std::to_string(net.tau()));
}

}  // namespace detail

/// Full-state Euler trajectory for `steps` steps (steps + 1 samples), with the
/// input channels appended.
inline Trace forward_pass(const DihNetwork& net, const InputSeries& u, std::span<const double> x0, std::size_t steps) {
  if (steps < 1) throw ValidationError("forward pass needs at least one step");
  if (x0.size() != net.model().size()) throw ShapeError("x0 has the wrong dimension");
  ScopedFlushDenormals ftz;
  detail::EulerKernel kernel(net);
  const auto w = net.weights().values();
  for (double v : w)
    if (!std::isfinite(v)) throw ValidationError("network weights must be finite");
  std::vector<double> x;
  kernel.forward(w, u, x0, steps, x);
  return detail::states_to_trace(net, x, steps, u);
}

inline Trace forward_pass(const DihNetwork& net, const InputSchedule& schedule, std::span<const double> x0,
                          std::size_t steps) {
  return forward_pass(net, inputs_from_schedule(net.model(), schedule, net.tau(), steps + 1), x0, steps);
}

/// Result of validate_step_size. `unbounded` is set when no diagonal entry is
/// non-zero, in which case tau is +inf.
struct StepBound {
  double tau;
  bool unbounded;
};

/// Largest tau with tau <= sqrt(2 psi) / |a_ii| for every non-zero diagonal entry.
inline StepBound validate_step_size(std::span<const double> diagonal, double psi) {
  if (!(psi > 0.0 && psi < 1.0)) throw ValidationError("psi must lie in (0, 1)");
  double tau = std::numeric_limits<double>::infinity();
  bool any = false;
  for (double a : diagonal) {
    if (!std::isfinite(a)) throw ValidationError("diagonal bound must be finite");
    if (a == 0.0) continue;
    any = true;
    tau = std::min(tau, std::sqrt(2.0 * psi) / std::abs(a));
  }
  return {tau, !any};
}

inline StepBound validate_step_size(const ModelTemplate& tpl, const CoefficientVector& omega, double psi) {
  const auto sys = assemble(tpl, omega);
  std::vector<double> diag(sys.n);
  for (std::size_t i = 0; i < sys.n; ++i) diag[i] = sys.a_at(i, i);
  return validate_step_size(diag, psi);
}

struct LossOptions {
  bool normalize_per_signal = false;
  // Relative ridge penalty weight * mean_s ((w_s - prior_s) / prior_s)^2.
  std::vector<double> prior;
  double prior_weight = 0.0;
};

struct LossAndGradient {
  double loss = 0.0;        // data + prior
  double data_loss = 0.0;
  double prior_loss = 0.0;
  std::vector<double> gradient;  // canonical slot order
};

namespace detail {

struct Objective {
  const DihNetwork& net;
  const Trace& trace;
  LossOptions options;
  EulerKernel kernel;
  InputSeries inputs;
  std::vector<double> x0;
  std::vector<std::size_t> observables;
  std::vector<const std::vector<double>*> targets;
  std::vector<double> weight;  // per observable: 1 / ((N + 1) * peak^2)
  std::size_t steps;
  std::vector<double> states;

  Objective(const DihNetwork& network, const Trace& tr, LossOptions opts)
      : net(network), trace(tr), options(std::move(opts)), kernel(network), steps(tr.samples() - 1) {
    check_tau(net, trace);
    const auto& tpl = net.model();
    inputs = inputs_from_trace(tpl, trace);
    x0.assign(tpl.size(), 0.0);
    observables = tpl.observable_indices();
    for (std::size_t i : observables) {
      const auto& name = tpl.variables()[i];
      if (!trace.has(name)) throw ShapeError("trace is missing observable signal '" + name + "'");
      const auto& y = trace.at(name);
      targets.push_back(&y);
      x0[i] = y.front();
      double peak = 0.0;
      for (double v : y) peak = std::max(peak, std::abs(v));
      if (!options.normalize_per_signal || peak == 0.0) peak = 1.0;
      weight.push_back(1.0 / (static_cast<double>(y.size()) * peak * peak));
    }
    if (!options.prior.empty() && options.prior.size() != tpl.slot_count())
      throw ShapeError("prior has the wrong number of coefficients");
    for (double p : options.prior)
      if (p == 0.0 && options.prior_weight > 0.0) throw DegenerateReferenceError("prior coefficient is zero");
  }

  double prior_term(std::span<const double> w, std::span<double> grad) const {
    if (options.prior.empty() || options.prior_weight == 0.0) return 0.0;
    const double scale = options.prior_weight / static_cast<double>(w.size());
    double acc = 0.0;
    for (std::size_t s = 0; s < w.size(); ++s) {
      const double p = options.prior[s];
      const double d = (w[s] - p) / p;
      acc += d * d;
      if (!grad.empty()) grad[s] += scale * 2.0 * d / p;
    }
    return scale * acc;
  }

  double data_loss(std::span<const double> w) {
    kernel.forward(w, inputs, x0, steps, states);
    const std::size_t n = kernel.n();
    double loss = 0.0;
    for (std::size_t o = 0; o < observables.size(); ++o) {
      const std::size_t i = observables[o];
      const auto& y = *targets[o];
      double ss = 0.0;
      for (std::size_t k = 0; k <= steps; ++k) {
        const double r = states[k * n + i] - y[k];
        ss += r * r;
      }
      loss += weight[o] * ss;
    }
    return loss;
  }

  // Gradient of the data term; residuals are formed inside the adjoint sweep.
  void data_gradient(std::span<const double> w, std::span<double> grad) const {
    const std::size_t n = kernel.n();
    kernel.backward_seeded(w, inputs, states, steps, grad, [&](std::size_t k, double* lam) {
      for (std::size_t o = 0; o < observables.size(); ++o) {
        const std::size_t i = observables[o];
        lam[i] += 2.0 * weight[o] * (states[k * n + i] - (*targets[o])[k]);
      }
    });
  }

  LossAndGradient evaluate(std::span<const double> w, bool want_gradient) {
    ScopedFlushDenormals ftz;
    LossAndGradient out;
    out.data_loss = data_loss(w);
    if (want_gradient) {
      out.gradient.assign(w.size(), 0.0);
      data_gradient(w, out.gradient);
    }
    out.prior_loss = prior_term(w, want_gradient ? std::span<double>(out.gradient) : std::span<double>());
    out.loss = out.data_loss + out.prior_loss;
    return out;
  }
};

}  // namespace detail

/// Loss and its exact gradient under the Euler recurrence (adjoint recursion).
/// Initial state: observables take the trace's first sample, hidden variables 0.
inline LossAndGradient loss_and_gradient(const DihNetwork& net, const Trace& trace, const LossOptions& options = {}) {
  detail::Objective obj(net, trace, options);
  const auto w = net.weights().values();
  return obj.evaluate(w, true);
}

/// Mean squared error of the forward pass against the trace, summed over
/// observable signals.
inline double loss(const DihNetwork& net, const Trace& trace, const LossOptions& options = {}) {
  detail::Objective obj(net, trace, options);
  const auto w = net.weights().values();
  return obj.evaluate(w, false).loss;
}

inline std::vector<double> gradient(const DihNetwork& net, const Trace& trace, const LossOptions& options = {}) {
  return loss_and_gradient(net, trace, options).gradient;
}

struct TrainingConfig {
  double learning_rate = 1e-3;  // relative: steps are scaled by each weight's initial magnitude
  std::size_t max_epochs = 20000;
  double convergence_tol = 1e-6;
  std::size_t patience = 50;
  double target_loss = 0.0;  // converged as soon as the loss reaches this value
  std::uint64_t seed = 0;
  double psi = 1e-3;
  bool normalize_loss_per_signal = true;

  std::optional<CoefficientVector> initial;  // start point; overrides prior and data-driven init
  std::optional<CoefficientVector> prior;    // MAP anchor for weakly identifiable directions
  double prior_weight = 0.0;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double lr_decay = 0.5;             // applied when the best loss stalls for lr_patience epochs
  std::size_t lr_patience = 25;
  double min_lr_fraction = 1e-3;
  double divergence_factor = 100.0;  // diverged once the loss exceeds this multiple of the initial loss

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be > 0");
    if (!(psi > 0.0 && psi < 1.0)) throw ValidationError("psi must lie in (0, 1)");
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (!(convergence_tol >= 0.0)) throw ValidationError("convergence_tol must be >= 0");
    if (!(target_loss >= 0.0)) throw ValidationError("target_loss must be >= 0");
    if (prior_weight < 0.0) throw ValidationError("prior_weight must be >= 0");
    if (prior_weight > 0.0 && !prior) throw ValidationError("prior_weight set without a prior");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must lie in [0, 1)");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValidationError("lr_decay must lie in (0, 1]");
    if (!(divergence_factor > 1.0)) throw ValidationError("divergence_factor must be > 1");
  }
};

struct LossCurve {
  double initial = 0.0;
  double best = 0.0;
  double last = 0.0;
  std::vector<std::pair<std::size_t, double>> checkpoints;  // (epoch, loss), roughly 20 per run
};

struct MiningResult {
  CoefficientVector omega;
  double final_loss = 0.0;  // objective at omega
  double data_loss = 0.0;
  std::size_t epochs_used = 0;
  std::map<std::string, double> replication_error;  // per observable max relative deviation
  bool converged = false;
  LossCurve curve;

  bool replicates_within(double psi) const {
    return std::all_of(replication_error.begin(), replication_error.end(),
                       [psi](const auto& kv) { return kv.second <= psi; });
  }
};

/// Max over samples with |y| > floor of |y_hat - y| / |y|, per observable.
inline std::map<std::string, double> replication_error(const DihNetwork& net, const Trace& trace, double floor = 1e-6) {
  const auto& tpl = net.model();
  std::vector<double> x0(tpl.size(), 0.0);
  for (std::size_t i : tpl.observable_indices()) x0[i] = trace.at(tpl.variables()[i]).front();
  const auto replay = forward_pass(net, inputs_from_trace(tpl, trace), x0, trace.samples() - 1);
  std::map<std::string, double> out;
  for (std::size_t i : tpl.observable_indices()) {
    const auto& name = tpl.variables()[i];
    const auto& y = trace.at(name);
    const auto& yh = replay.at(name);
    double worst = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k)
      if (std::abs(y[k]) > floor) worst = std::max(worst, std::abs(yh[k] - y[k]) / std::abs(y[k]));
    out[name] = worst;
  }
  return out;
}

/// Starting weights when neither an explicit start nor a prior is configured:
/// observable diagonals and input gains from a least-squares fit of one-step
/// differences, rounded to sign * 10^round(log10 |estimate|); all other slots
/// log-uniform in [0.01, 1] from the seed.
inline CoefficientVector initial_weights(const ModelTemplate& tpl, const Trace& trace, std::uint64_t seed) {
  const auto& slots = tpl.slots();
  std::vector<double> w(slots.size(), 0.0);
  std::vector<bool> set(slots.size(), false);
  const double tau = trace.tau();

  for (std::size_t i : tpl.observable_indices()) {
    const auto& y = trace.at(tpl.variables()[i]);
    const std::vector<double>* u = nullptr;
    if (tpl.has_input(i) && trace.has(tpl.inputs()[i])) u = &trace.at(tpl.inputs()[i]);
    // normal equations for dy = a*y + b*u
    double syy = 0, syu = 0, suu = 0, sdy = 0, sdu = 0;
    for (std::size_t k = 0; k + 1 < y.size(); ++k) {
      const double d = (y[k + 1] - y[k]) / tau;
      const double uk = u ? (*u)[k] : 0.0;
      syy += y[k] * y[k];
      syu += y[k] * uk;
      suu += uk * uk;
      sdy += d * y[k];
      sdu += d * uk;
    }
    double a = 0.0, b = 0.0;
    const double det = syy * suu - syu * syu;
    if (u && std::abs(det) > 1e-300 * std::max(1.0, syy * suu)) {
      a = (sdy * suu - sdu * syu) / det;
      b = (sdu * syy - sdy * syu) / det;
    } else if (syy > 0) {
      a = sdy / syy;
    }
    auto assign = [&](std::optional<std::size_t> s, double est) {
      if (!s || !std::isfinite(est) || est == 0.0) return;
      const double mag = std::pow(10.0, std::round(std::log10(std::abs(est))));
      const auto sign = slots[*s].sign;
      double v = sign == SlotSign::negative ? -mag : sign == SlotSign::positive ? mag : std::copysign(mag, est);
      w[*s] = v;
      set[*s] = true;
    };
    assign(tpl.slot_index(SlotKind::a, i, i), a);
    if (u) assign(tpl.slot_index(SlotKind::b, i, i), b);
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> expo(-2.0, 0.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    if (set[s]) continue;
    const double mag = std::pow(10.0, expo(rng));
    switch (slots[s].sign) {
      case SlotSign::negative: w[s] = -mag; break;
      case SlotSign::positive: w[s] = mag; break;
      default: w[s] = coin(rng) ? mag : -mag; break;
    }
  }
  return bind_coefficients(tpl, w);
}

/// Each coefficient scaled by an independent factor uniform in [1 - rel, 1 + rel].
inline CoefficientVector perturbed(const CoefficientVector& w, double rel, std::uint64_t seed) {
  if (!(rel >= 0.0 && rel < 1.0)) throw ValidationError("perturbation must lie in [0, 1)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> f(1.0 - rel, 1.0 + rel);
  std::vector<double> v = w.values();
  for (double& x : v) x *= f(rng);
  return w.with_values(v);
}

/// Mines the coefficient vector of `tpl` from one trace by Adam-scaled gradient
/// descent on the Euler forward pass, projecting onto the sign pattern after
/// every step. Returns the best iterate seen.
inline MiningResult mine_coefficients(const ModelTemplate& tpl, const Trace& trace, const TrainingConfig& config) {
  config.validate();
  for (std::size_t i : tpl.observable_indices())
    if (!trace.has(tpl.variables()[i])) throw ShapeError("trace is missing observable '" + tpl.variables()[i] + "'");

  CoefficientVector start = config.initial ? *config.initial
                            : config.prior ? *config.prior
                                           : initial_weights(tpl, trace, config.seed);
  check_binds(tpl, start);
  DihNetwork net(tpl, trace.tau(), start);

  LossOptions opts;
  opts.normalize_per_signal = config.normalize_loss_per_signal;
  if (config.prior) {
    check_binds(tpl, *config.prior);
    opts.prior = config.prior->values();
    opts.prior_weight = config.prior_weight;
  }
  detail::Objective objective(net, trace, opts);

  const auto& slots = tpl.slots();
  const std::size_t p = slots.size();
  std::vector<double> w = start.values();
  std::vector<double> scale(p);
  for (std::size_t s = 0; s < p; ++s) scale[s] = std::abs(w[s]) > 0.0 ? std::abs(w[s]) : 1.0;

  std::vector<double> m(p, 0.0), v(p, 0.0);
  std::vector<double> best_w = w;
  double best = std::numeric_limits<double>::infinity();
  double anchor = std::numeric_limits<double>::infinity();
  double lr = config.learning_rate;
  const double min_lr = config.learning_rate * config.min_lr_fraction;
  std::size_t stall = 0, since_best = 0;
  bool converged = false;
  std::size_t epoch = 0;
  LossCurve curve;
  const std::size_t every = std::max<std::size_t>(1, config.max_epochs / 20);
  double b1t = 1.0, b2t = 1.0;

  while (epoch < config.max_epochs) {
    ++epoch;
    LossAndGradient lg;
    try {
      lg = objective.evaluate(w, true);
    } catch (const DivergenceError&) {
      throw TrainingDivergedError("training diverged: forward pass became non-finite", epoch);
    }
    if (!std::isfinite(lg.loss)) throw TrainingDivergedError("training diverged: loss is not finite", epoch);
    if (epoch == 1) curve.initial = lg.loss;
    // Sign projection can clip a runaway step to zero, so a too-large learning
    // rate shows up as a loss explosion rather than a non-finite forward pass.
    if (epoch > 1 && curve.initial > 0.0 && lg.loss > config.divergence_factor * curve.initial)
      throw TrainingDivergedError("training diverged: loss grew from " + std::to_string(curve.initial) + " to " +
                                      std::to_string(lg.loss) + "; learning_rate is too large",
                                  epoch);
    curve.last = lg.loss;
    if (epoch == 1 || epoch % every == 0) curve.checkpoints.emplace_back(epoch, lg.loss);

    if (lg.loss < best) {
      if (lg.loss < best * (1.0 - 1e-12)) since_best = 0;
      best = lg.loss;
      best_w = w;
    } else if (++since_best >= config.lr_patience) {
      lr = std::max(min_lr, lr * config.lr_decay);
      since_best = 0;
    }

    if (lg.loss <= std::max(config.target_loss, 1e-30)) {
      converged = true;
      break;
    }
    // Converged once the best loss has not improved by a relative
    // convergence_tol for `patience` epochs.
    if (lg.loss < anchor * (1.0 - config.convergence_tol)) {
      anchor = lg.loss;
      stall = 0;
    } else if (++stall >= config.patience) {
      converged = true;
      break;
    }

    b1t *= config.beta1;
    b2t *= config.beta2;
    for (std::size_t s = 0; s < p; ++s) {
      const double g = lg.gradient[s] * scale[s];
      m[s] = config.beta1 * m[s] + (1.0 - config.beta1) * g;
      v[s] = config.beta2 * v[s] + (1.0 - config.beta2) * g * g;
      const double mh = m[s] / (1.0 - b1t);
      const double vh = v[s] / (1.0 - b2t);
      const double denom = std::sqrt(vh) + 1e-300;
      w[s] = project_sign(slots[s].sign, w[s] - lr * scale[s] * mh / denom);
    }
  }

  MiningResult result;
  result.omega = start.with_values(best_w);
  net.set_weights(result.omega);
  const auto final_eval = objective.evaluate(best_w, false);
  result.final_loss = final_eval.loss;
  result.data_loss = final_eval.data_loss;
  result.epochs_used = epoch;
  result.converged = converged;
  curve.best = best;
  result.curve = std::move(curve);
  result.replication_error = replication_error(net, trace);
  return result;
}

/// Outcome of mining one segment; exactly one of result / error is set.
struct MiningOutcome {
  std::optional<MiningResult> result;
  std::string error;
  bool ok() const noexcept { return result.has_value(); }
};

/// Independent mining of each trace, order preserved, errors collected per
/// segment. Up to `jobs` segments are mined concurrently.
inline std::vector<MiningOutcome> mine_trace_sequence(const ModelTemplate& tpl, const std::vector<Trace>& traces,
                                                      const TrainingConfig& config, std::size_t jobs = 1) {
  std::vector<MiningOutcome> out(traces.size());
  auto run = [&](std::size_t i) {
    try {
      out[i].result = mine_coefficients(tpl, traces[i], config);
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  };
  jobs = std::max<std::size_t>(1, jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < traces.size(); ++i) run(i);
    return out;
  }
  std::size_t next = 0;
  while (next < traces.size()) {
    std::vector<std::future<void>> batch;
    for (std::size_t j = 0; j < jobs && next < traces.size(); ++j, ++next)
      batch.push_back(std::async(std::launch::async, run, next));
    for (auto& f : batch) f.get();
  }
  return out;
}

}  // namespace u2d
