#pragma once

// Linear time-invariant plant model dX/dt = A X + B U, Y = beta X, the
// coefficient vector bound to its sparsity pattern, sampled traces, and the
// fourth-order reference integrator used as ground truth.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "u2detect/error.hpp"
#include "u2detect/fp_env.hpp"

namespace u2d {

/// Label of one coefficient slot in the A or B pattern.
enum class SlotSign { zero, positive, negative, any };

inline char slot_sign_code(SlotSign s) {
  switch (s) {
    case SlotSign::zero: return '0';
    case SlotSign::positive: return '+';
    case SlotSign::negative: return '-';
    case SlotSign::any: return '*';
  }
  return '?';
}

inline SlotSign parse_slot_sign(const std::string& code) {
  if (code == "0") return SlotSign::zero;
  if (code == "+") return SlotSign::positive;
  if (code == "-") return SlotSign::negative;
  if (code == "*") return SlotSign::any;
  throw ValidationError("unknown slot label '" + code + "' (expected one of 0 + - *)");
}

/// True when `v` is admissible under the sign label.
inline bool sign_admits(SlotSign s, double v) {
  switch (s) {
    case SlotSign::zero: return v == 0.0;
    case SlotSign::positive: return v >= 0.0;
    case SlotSign::negative: return v <= 0.0;
    case SlotSign::any: return true;
  }
  return false;
}

/// Clamp `v` onto the admissible half-line of `s`.
inline double project_sign(SlotSign s, double v) {
  switch (s) {
    case SlotSign::zero: return 0.0;
    case SlotSign::positive: return std::max(v, 0.0);
    case SlotSign::negative: return std::min(v, 0.0);
    case SlotSign::any: return v;
  }
  return v;
}

enum class SlotKind { a, b };

/// One non-zero coefficient of the template. For kind b, col == row.
struct Slot {
  SlotKind kind;
  std::size_t row;
  std::size_t col;
  SlotSign sign;
  std::string name;
};

/// Symbolic structure of the plant: variables, sparsity and sign pattern of
/// A and diagonal B, and the observability mask.
class ModelTemplate {
 public:
  ModelTemplate(std::vector<std::string> variables, std::vector<std::string> inputs,
                std::vector<std::vector<SlotSign>> a_pattern, std::vector<SlotSign> b_pattern,
                std::vector<bool> beta, double time_unit_s = 1.0)
      : variables_(std::move(variables)),
        inputs_(std::move(inputs)),
        a_pattern_(std::move(a_pattern)),
        b_pattern_(std::move(b_pattern)),
        beta_(std::move(beta)),
        time_unit_s_(time_unit_s) {
    validate();
    build_slots();
  }

  std::size_t size() const noexcept { return variables_.size(); }
  const std::vector<std::string>& variables() const noexcept { return variables_; }
  const std::vector<std::string>& inputs() const noexcept { return inputs_; }
  const std::vector<std::vector<SlotSign>>& a_pattern() const noexcept { return a_pattern_; }
  const std::vector<SlotSign>& b_pattern() const noexcept { return b_pattern_; }
  const std::vector<bool>& beta() const noexcept { return beta_; }
  /// Seconds per model time unit (60 for a model whose rates are per minute).
  double time_unit_s() const noexcept { return time_unit_s_; }

  bool observable(std::size_t i) const { return beta_.at(i); }
  bool has_input(std::size_t i) const { return b_pattern_.at(i) != SlotSign::zero; }

  std::vector<std::size_t> observable_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (beta_[i]) out.push_back(i);
    return out;
  }

  /// Names of the input channels that feed at least one cell.
  std::vector<std::string> active_inputs() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (has_input(i)) out.push_back(inputs_[i]);
    return out;
  }

  /// Canonical slot order: row-major over A, then the diagonal of B.
  const std::vector<Slot>& slots() const noexcept { return slots_; }
  std::size_t slot_count() const noexcept { return slots_.size(); }

  std::optional<std::size_t> slot_index(SlotKind kind, std::size_t row, std::size_t col) const {
    for (std::size_t s = 0; s < slots_.size(); ++s)
      if (slots_[s].kind == kind && slots_[s].row == row && slots_[s].col == col) return s;
    return std::nullopt;
  }

  std::optional<std::size_t> variable_index(const std::string& name) const {
    for (std::size_t i = 0; i < variables_.size(); ++i)
      if (variables_[i] == name) return i;
    return std::nullopt;
  }

 private:
  void validate() const {
    const std::size_t n = variables_.size();
    if (n == 0) throw ValidationError("template has no variables");
    if (inputs_.size() != n) throw ValidationError("template needs one input name per variable");
    if (a_pattern_.size() != n) throw ValidationError("a_pattern must have one row per variable");
    for (const auto& row : a_pattern_)
      if (row.size() != n) throw ValidationError("a_pattern must be square");
    if (b_pattern_.size() != n) throw ValidationError("b_pattern must have one entry per variable");
    if (beta_.size() != n) throw ValidationError("beta must have one entry per variable");
    if (std::none_of(beta_.begin(), beta_.end(), [](bool b) { return b; }))
      throw ValidationError("at least one variable must be observable");
    for (std::size_t i = 0; i < n; ++i) {
      if (std::all_of(a_pattern_[i].begin(), a_pattern_[i].end(),
                      [](SlotSign s) { return s == SlotSign::zero; }))
        throw ValidationError("variable '" + variables_[i] + "' has an all-zero row in a_pattern");
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (variables_[i] == variables_[j]) throw ValidationError("duplicate variable name '" + variables_[i] + "'");
    if (!(time_unit_s_ > 0.0) || !std::isfinite(time_unit_s_))
      throw ValidationError("time_unit_s must be positive");
  }

  void build_slots() {
    const std::size_t n = size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (a_pattern_[i][j] != SlotSign::zero)
          slots_.push_back({SlotKind::a, i, j, a_pattern_[i][j], "a_" + variables_[i] + "_" + variables_[j]});
    for (std::size_t i = 0; i < n; ++i)
      if (b_pattern_[i] != SlotSign::zero) slots_.push_back({SlotKind::b, i, i, b_pattern_[i], "b_" + variables_[i]});
  }

  std::vector<std::string> variables_;
  std::vector<std::string> inputs_;
  std::vector<std::vector<SlotSign>> a_pattern_;
  std::vector<SlotSign> b_pattern_;
  std::vector<bool> beta_;
  double time_unit_s_;
  std::vector<Slot> slots_;
};

struct CoefficientEntry {
  std::string name;
  double value = 0.0;
  std::string units;
};

/// Ordered, named coefficient values. Two vectors over the same template are
/// index-aligned.
class CoefficientVector {
 public:
  CoefficientVector() = default;
  explicit CoefficientVector(std::vector<CoefficientEntry> entries) : entries_(std::move(entries)) {}

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const CoefficientEntry& operator[](std::size_t i) const { return entries_.at(i); }
  double value(std::size_t i) const { return entries_.at(i).value; }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  std::vector<double> values() const {
    std::vector<double> v;
    v.reserve(entries_.size());
    for (const auto& e : entries_) v.push_back(e.value);
    return v;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> v;
    for (const auto& e : entries_) v.push_back(e.name);
    return v;
  }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  double value_of(const std::string& name) const {
    auto i = find(name);
    if (!i) throw ValidationError("no coefficient named '" + name + "'");
    return entries_[*i].value;
  }

  /// Same names and units, new values.
  CoefficientVector with_values(std::span<const double> values) const {
    if (values.size() != entries_.size()) throw ShapeError("coefficient count mismatch");
    CoefficientVector out = *this;
    for (std::size_t i = 0; i < values.size(); ++i) out.entries_[i].value = values[i];
    return out;
  }

  bool same_names(const CoefficientVector& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (entries_[i].name != other.entries_[i].name) return false;
    return true;
  }

  friend bool operator==(const CoefficientVector& a, const CoefficientVector& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || a.entries_[i].value != b.entries_[i].value) return false;
    return true;
  }

 private:
  std::vector<CoefficientEntry> entries_;
};

/// Throws unless `omega` has one correctly-signed value per template slot.
inline void check_binds(const ModelTemplate& tpl, const CoefficientVector& omega) {
  const auto& slots = tpl.slots();
  if (omega.size() != slots.size())
    throw ShapeError("coefficient vector has " + std::to_string(omega.size()) + " entries, template has " +
                     std::to_string(slots.size()) + " slots");
  for (std::size_t s = 0; s < slots.size(); ++s) {
    if (omega[s].name != slots[s].name)
      throw ValidationError("coefficient " + std::to_string(s) + " is '" + omega[s].name + "', template expects '" +
                            slots[s].name + "'");
    const double v = omega.value(s);
    if (!std::isfinite(v)) throw ValidationError("coefficient '" + slots[s].name + "' is not finite");
    if (!sign_admits(slots[s].sign, v))
      throw ValidationError("coefficient '" + slots[s].name + "' = " + std::to_string(v) + " violates its sign label '" +
                            std::string(1, slot_sign_code(slots[s].sign)) + "'");
  }
}

/// Binds raw slot values (canonical order) to a template.
inline CoefficientVector bind_coefficients(const ModelTemplate& tpl, std::span<const double> values) {
  std::vector<CoefficientEntry> entries;
  const auto& slots = tpl.slots();
  if (values.size() != slots.size()) throw ShapeError("coefficient count does not match template slot count");
  for (std::size_t s = 0; s < slots.size(); ++s) entries.push_back({slots[s].name, values[s], ""});
  CoefficientVector omega(std::move(entries));
  check_binds(tpl, omega);
  return omega;
}

/// Dense view of (A, diag B) assembled from a template and its coefficients.
struct LinearSystem {
  std::size_t n = 0;
  std::vector<double> a;  // row-major n*n
  std::vector<double> b;  // diagonal

  double a_at(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

inline LinearSystem assemble(const ModelTemplate& tpl, const CoefficientVector& omega) {
  check_binds(tpl, omega);
  LinearSystem sys;
  sys.n = tpl.size();
  sys.a.assign(sys.n * sys.n, 0.0);
  sys.b.assign(sys.n, 0.0);
  const auto& slots = tpl.slots();
  for (std::size_t s = 0; s < slots.size(); ++s) {
    if (slots[s].kind == SlotKind::a)
      sys.a[slots[s].row * sys.n + slots[s].col] = omega.value(s);
    else
      sys.b[slots[s].row] = omega.value(s);
  }
  return sys;
}

/// One uniformly sampled signal: value k is at time t0 + k*tau.
struct Trajectory {
  double t0 = 0.0;
  double tau = 1.0;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  double time_at(std::size_t k) const { return t0 + static_cast<double>(k) * tau; }
};

/// Named trajectories sharing t0, tau and length.
class Trace {
 public:
  explicit Trace(double tau, double t0 = 0.0) : tau_(tau), t0_(t0) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("trace sampling period must be positive");
  }

  double tau() const noexcept { return tau_; }
  double t0() const noexcept { return t0_; }
  std::size_t samples() const noexcept { return samples_; }
  double time_at(std::size_t k) const { return t0_ + static_cast<double>(k) * tau_; }

  void add(const std::string& name, std::vector<double> values) {
    if (values.size() < 2) throw ShapeError("signal '" + name + "' needs at least two samples");
    if (samples_ != 0 && values.size() != samples_)
      throw ShapeError("signal '" + name + "' has " + std::to_string(values.size()) + " samples, trace has " +
                       std::to_string(samples_));
    samples_ = values.size();
    signals_[name] = Trajectory{t0_, tau_, std::move(values)};
  }

  bool has(const std::string& name) const { return signals_.count(name) != 0; }

  const std::vector<double>& at(const std::string& name) const { return trajectory(name).values; }

  const Trajectory& trajectory(const std::string& name) const {
    auto it = signals_.find(name);
    if (it == signals_.end()) throw ShapeError("trace has no signal '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : signals_) out.push_back(k);
    return out;
  }

  void erase(const std::string& name) { signals_.erase(name); }

 private:
  double tau_;
  double t0_;
  std::size_t samples_ = 0;
  std::map<std::string, Trajectory> signals_;
};

/// Piecewise-constant input channels. Each channel is a strictly increasing
/// list of (start, level) breakpoints; the level before the first breakpoint is 0.
class InputSchedule {
 public:
  struct Breakpoint {
    double start;
    double value;
  };

  /// Adds `delta` to the channel's level on [start, end).
  void add_level(const std::string& channel, double start, double end, double delta) {
    if (!(end > start)) throw ValidationError("input segment must have positive length");
    if (!std::isfinite(delta) || !std::isfinite(start) || !std::isfinite(end))
      throw ValidationError("input segment must be finite");
    auto& bps = channels_[channel];
    ensure_breakpoint(bps, start);
    ensure_breakpoint(bps, end);
    for (auto& bp : bps)
      if (bp.start >= start - eps(start) && bp.start < end - eps(end)) bp.value += delta;
  }

  /// One-sample rectangular pulse of area `dose` starting at t.
  void add_impulse(const std::string& channel, double t, double dose, double tau) {
    if (!(tau > 0.0)) throw ValidationError("impulse width must be positive");
    add_level(channel, t, t + tau, dose / tau);
  }

  /// Constant level from `start` onward.
  void add_step(const std::string& channel, double start, double delta) {
    auto& bps = channels_[channel];
    ensure_breakpoint(bps, start);
    for (auto& bp : bps)
      if (bp.start >= start - eps(start)) bp.value += delta;
  }

  double value_at(const std::string& channel, double t) const {
    auto it = channels_.find(channel);
    if (it == channels_.end()) return 0.0;
    double level = 0.0;
    for (const auto& bp : it->second) {
      if (bp.start <= t) level = bp.value;
      else break;
    }
    return level;
  }

  bool has(const std::string& channel) const { return channels_.count(channel) != 0; }
  const std::vector<Breakpoint>& breakpoints(const std::string& channel) const { return channels_.at(channel); }

  std::vector<std::string> channels() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : channels_) out.push_back(k);
    return out;
  }

  /// Zero-order-hold samples: element k is the level on [k*tau, (k+1)*tau),
  /// read at the interval midpoint so grid-aligned breakpoints are unambiguous.
  std::vector<double> sample(const std::string& channel, double tau, std::size_t count, double t0 = 0.0) const {
    std::vector<double> out(count, 0.0);
    auto it = channels_.find(channel);
    if (it == channels_.end()) return out;
    const auto& bps = it->second;
    std::size_t cursor = 0;
    double level = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const double t = t0 + (static_cast<double>(k) + 0.5) * tau;
      while (cursor < bps.size() && bps[cursor].start <= t) level = bps[cursor++].value;
      out[k] = level;
    }
    return out;
  }

 private:
  static double eps(double t) { return 1e-12 * std::max(1.0, std::abs(t)); }

  static void ensure_breakpoint(std::vector<Breakpoint>& bps, double t) {
    auto it = std::lower_bound(bps.begin(), bps.end(), t - eps(t),
                               [](const Breakpoint& bp, double x) { return bp.start < x; });
    if (it != bps.end() && std::abs(it->start - t) <= eps(t)) return;
    const double level = (it == bps.begin()) ? 0.0 : std::prev(it)->value;
    bps.insert(it, Breakpoint{t, level});
  }

  std::map<std::string, std::vector<Breakpoint>> channels_;
};

namespace detail {

inline void lti_derivative(const LinearSystem& sys, const double* x, const double* u, double* dx) {
  const std::size_t n = sys.n;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = sys.b[i] * u[i];
    const double* row = sys.a.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
    dx[i] = acc;
  }
}

}  // namespace detail

/// Classical fourth-order Runge-Kutta step with the input held constant over
/// the step. Stateless apart from scratch buffers.
class Rk4Stepper {
 public:
  Rk4Stepper(LinearSystem sys, double h) : sys_(std::move(sys)), h_(h), k1_(sys_.n), k2_(sys_.n), k3_(sys_.n), k4_(sys_.n), tmp_(sys_.n) {}

  void step(std::span<double> x, std::span<const double> u) {
    const std::size_t n = sys_.n;
    detail::lti_derivative(sys_, x.data(), u.data(), k1_.data());
    for (std::size_t i = 0; i < n; ++i) tmp_[i] = x[i] + 0.5 * h_ * k1_[i];
    detail::lti_derivative(sys_, tmp_.data(), u.data(), k2_.data());
    for (std::size_t i = 0; i < n; ++i) tmp_[i] = x[i] + 0.5 * h_ * k2_[i];
    detail::lti_derivative(sys_, tmp_.data(), u.data(), k3_.data());
    for (std::size_t i = 0; i < n; ++i) tmp_[i] = x[i] + h_ * k3_[i];
    detail::lti_derivative(sys_, tmp_.data(), u.data(), k4_.data());
    for (std::size_t i = 0; i < n; ++i) x[i] += h_ / 6.0 * (k1_[i] + 2.0 * k2_[i] + 2.0 * k3_[i] + k4_[i]);
  }

  double h() const noexcept { return h_; }

 private:
  LinearSystem sys_;
  double h_;
  std::vector<double> k1_, k2_, k3_, k4_, tmp_;
};

/// Reference solution of dX/dt = A X + B U sampled every tau for N steps
/// (N + 1 samples). Every variable is recorded regardless of observability,
/// together with the zero-order-hold samples of each active input channel.
/// `substeps` RK4 steps of tau/substeps are taken between samples.
inline Trace integrate_reference(const ModelTemplate& tpl, const CoefficientVector& omega, const InputSchedule& u,
                                 std::span<const double> x0, double tau, std::size_t steps,
                                 std::size_t substeps = 1) {
  if (!(tau > 0.0)) throw ValidationError("tau must be positive");
  if (steps < 1) throw ValidationError("need at least one integration step");
  if (substeps < 1) throw ValidationError("substeps must be at least 1");
  const std::size_t n = tpl.size();
  if (x0.size() != n) throw ShapeError("x0 has the wrong dimension");
  for (double v : x0)
    if (!std::isfinite(v)) throw ValidationError("x0 must be finite");

  ScopedFlushDenormals ftz;
  const double h = tau / static_cast<double>(substeps);
  Rk4Stepper stepper(assemble(tpl, omega), h);

  const std::size_t fine = steps * substeps;
  std::vector<std::vector<double>> inputs(n);
  for (std::size_t i = 0; i < n; ++i)
    if (tpl.has_input(i)) inputs[i] = u.sample(tpl.inputs()[i], h, fine);

  std::vector<std::vector<double>> states(n, std::vector<double>(steps + 1));
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> uk(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) states[i][0] = x[i];
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t s = 0; s < substeps; ++s) {
      const std::size_t f = k * substeps + s;
      for (std::size_t i = 0; i < n; ++i) uk[i] = inputs[i].empty() ? 0.0 : inputs[i][f];
      stepper.step(x, uk);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(x[i])) throw DivergenceError("reference integration diverged", k + 1);
      states[i][k + 1] = x[i];
    }
  }

  Trace out(tau);
  for (std::size_t i = 0; i < n; ++i) out.add(tpl.variables()[i], std::move(states[i]));
  for (std::size_t i = 0; i < n; ++i)
    if (tpl.has_input(i) && !out.has(tpl.inputs()[i])) out.add(tpl.inputs()[i], u.sample(tpl.inputs()[i], tau, steps + 1));
  return out;
}

/// Mean over `names` of the per-signal root-mean-square difference.
inline double trace_distance(const Trace& a, const Trace& b, const std::vector<std::string>& names) {
  if (a.samples() != b.samples()) throw ShapeError("traces differ in length");
  if (std::abs(a.tau() - b.tau()) > 1e-12 * a.tau()) throw ShapeError("traces differ in sampling period");
  if (names.empty()) throw ShapeError("no signals to compare");
  double total = 0.0;
  for (const auto& name : names) {
    const auto& x = a.at(name);
    const auto& y = b.at(name);
    double ss = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) ss += (x[k] - y[k]) * (x[k] - y[k]);
    total += std::sqrt(ss / static_cast<double>(x.size()));
  }
  return total / static_cast<double>(names.size());
}

/// Distance over all signals; both traces must carry the same signal set.
inline double trace_distance(const Trace& a, const Trace& b) {
  const auto names = a.names();
  if (names != b.names()) throw ShapeError("traces carry different signal sets");
  return trace_distance(a, b, names);
}

}  // namespace u2d
