#pragma once

// Signal temporal logic over sampled signals: formulas, discrete-time
// quantitative robustness, and a small prefix text syntax.
//
// Text syntax (whitespace-insensitive):
//   formula   := disj [ 'U' interval disj ]
//   disj      := conj { '|' conj }
//   conj      := unary { '&' unary }
//   unary     := '!' unary | 'G' interval unary | 'F' interval unary | atom
//   atom      := 'true' | arith cmp arith | '(' formula ')'
//   cmp       := '>=' | '<=' | '>' | '<'
//   arith     := term { ('+' | '-') term }
//   term      := factor { ('*' | '/') factor }
//   factor    := number | '-' factor | 'sig' '(' name ')' | 'abs' '(' arith ')'
//              | 'max' '(' arith { ',' arith } ')' | 'min' '(' arith { ',' arith } ')'
//              | '(' arith ')'
//   interval  := '[' number ',' ( number | 'inf' ) ']'
// Interval bounds are in the signal's time units; 'inf' runs to the end of the
// signal. Example: G[0,inf](sig(G) - 70 >= 0).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "u2detect/core_model.hpp"
#include "u2detect/error.hpp"

namespace u2d::stl {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Real-valued feature of one sample, built from named signal values.
class Expr {
 public:
  enum class Op { constant, signal, add, sub, mul, div, neg, abs, max, min };

  static Expr constant(double v) { return Expr(Op::constant, v, {}, {}); }
  static Expr signal(std::string name) { return Expr(Op::signal, 0.0, std::move(name), {}); }
  static Expr unary(Op op, Expr a) { return Expr(op, 0.0, {}, {std::move(a)}); }
  static Expr binary(Op op, Expr a, Expr b) { return Expr(op, 0.0, {}, {std::move(a), std::move(b)}); }
  static Expr nary(Op op, std::vector<Expr> args) {
    if (args.empty()) throw ValidationError("max/min need at least one argument");
    return Expr(op, 0.0, {}, std::move(args));
  }

  Op op() const noexcept { return op_; }
  double value() const noexcept { return value_; }
  const std::string& name() const noexcept { return name_; }
  const std::vector<Expr>& args() const noexcept { return args_; }
  bool is_constant() const noexcept { return op_ == Op::constant; }

  friend Expr operator+(Expr a, Expr b) { return binary(Op::add, std::move(a), std::move(b)); }
  friend Expr operator-(Expr a, Expr b) { return binary(Op::sub, std::move(a), std::move(b)); }
  friend Expr operator*(Expr a, Expr b) { return binary(Op::mul, std::move(a), std::move(b)); }
  friend Expr operator/(Expr a, Expr b) { return binary(Op::div, std::move(a), std::move(b)); }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    switch (op_) {
      case Op::constant: os << value_; break;
      case Op::signal: os << "sig(" << name_ << ")"; break;
      case Op::add: os << "(" << args_[0].to_string() << " + " << args_[1].to_string() << ")"; break;
      case Op::sub: os << "(" << args_[0].to_string() << " - " << args_[1].to_string() << ")"; break;
      case Op::mul: os << "(" << args_[0].to_string() << " * " << args_[1].to_string() << ")"; break;
      case Op::div: os << "(" << args_[0].to_string() << " / " << args_[1].to_string() << ")"; break;
      case Op::neg: os << "-" << args_[0].to_string(); break;
      case Op::abs: os << "abs(" << args_[0].to_string() << ")"; break;
      case Op::max:
      case Op::min: {
        os << (op_ == Op::max ? "max(" : "min(");
        for (std::size_t i = 0; i < args_.size(); ++i) os << (i ? ", " : "") << args_[i].to_string();
        os << ")";
        break;
      }
    }
    return os.str();
  }

 private:
  Expr(Op op, double v, std::string name, std::vector<Expr> args)
      : op_(op), value_(v), name_(std::move(name)), args_(std::move(args)) {}

  Op op_;
  double value_;
  std::string name_;
  std::vector<Expr> args_;
};

/// Uniformly spaced multi-column signal: a time-domain trace or a coefficient
/// sequence (unit spacing, one sample per mined vector).
class Signal {
 public:
  Signal(double spacing, std::map<std::string, std::vector<double>> columns)
      : spacing_(spacing), columns_(std::move(columns)) {
    if (!(spacing_ > 0.0)) throw ValidationError("signal spacing must be positive");
    if (columns_.empty()) throw ShapeError("signal has no columns");
    length_ = columns_.begin()->second.size();
    if (length_ == 0) throw ShapeError("signal is empty");
    for (const auto& [name, col] : columns_)
      if (col.size() != length_) throw ShapeError("signal column '" + name + "' has the wrong length");
  }

  static Signal from_trace(const Trace& trace) {
    std::map<std::string, std::vector<double>> cols;
    for (const auto& name : trace.names()) cols[name] = trace.at(name);
    return Signal(trace.tau(), std::move(cols));
  }

  static Signal from_coefficients(std::span<const CoefficientVector> omegas) {
    if (omegas.empty()) throw ShapeError("coefficient sequence is empty");
    std::map<std::string, std::vector<double>> cols;
    for (const auto& e : omegas.front()) cols[e.name];
    for (const auto& w : omegas) {
      if (!w.same_names(omegas.front())) throw ShapeError("coefficient vectors in a sequence must share names");
      for (const auto& e : w) cols[e.name].push_back(e.value);
    }
    return Signal(1.0, std::move(cols));
  }

  double spacing() const noexcept { return spacing_; }
  std::size_t length() const noexcept { return length_; }

  const std::vector<double>& column(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw ShapeError("signal has no column '" + name + "'");
    return it->second;
  }

 private:
  double spacing_;
  std::size_t length_ = 0;
  std::map<std::string, std::vector<double>> columns_;
};

/// Evaluates a feature at every sample of the signal.
inline std::vector<double> evaluate(const Expr& e, const Signal& s) {
  using Op = Expr::Op;
  const std::size_t n = s.length();
  switch (e.op()) {
    case Op::constant: return std::vector<double>(n, e.value());
    case Op::signal: return s.column(e.name());
    case Op::neg:
    case Op::abs: {
      auto v = evaluate(e.args()[0], s);
      for (auto& x : v) x = e.op() == Op::neg ? -x : std::abs(x);
      return v;
    }
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      auto a = evaluate(e.args()[0], s);
      const auto b = evaluate(e.args()[1], s);
      for (std::size_t k = 0; k < n; ++k) {
        switch (e.op()) {
          case Op::add: a[k] += b[k]; break;
          case Op::sub: a[k] -= b[k]; break;
          case Op::mul: a[k] *= b[k]; break;
          default: a[k] /= b[k]; break;
        }
      }
      return a;
    }
    case Op::max:
    case Op::min: {
      auto a = evaluate(e.args()[0], s);
      for (std::size_t i = 1; i < e.args().size(); ++i) {
        const auto b = evaluate(e.args()[i], s);
        for (std::size_t k = 0; k < n; ++k) a[k] = e.op() == Op::max ? std::max(a[k], b[k]) : std::min(a[k], b[k]);
      }
      return a;
    }
  }
  return {};
}

/// Closed interval [lo, hi] in signal time units; hi may be +inf.
struct Interval {
  double lo = 0.0;
  double hi = kInf;
};

enum class Comparison { ge, le };

class Formula {
 public:
  enum class Kind { truth, predicate, negation, conjunction, disjunction, eventually, globally, until };

  static Formula truth() { return Formula(make_node(Kind::truth)); }

  static Formula predicate(Expr f, Comparison cmp, double c) {
    auto n = make_node(Kind::predicate);
    n->feature = std::make_shared<Expr>(std::move(f));
    n->cmp = cmp;
    n->c = c;
    return Formula(std::move(n));
  }

  static Formula negation(Formula a) { return unary(Kind::negation, {}, std::move(a)); }
  static Formula conjunction(Formula a, Formula b) { return binary(Kind::conjunction, {}, std::move(a), std::move(b)); }
  static Formula disjunction(Formula a, Formula b) { return binary(Kind::disjunction, {}, std::move(a), std::move(b)); }
  static Formula eventually(Interval i, Formula a) { return unary(Kind::eventually, check(i), std::move(a)); }
  static Formula globally(Interval i, Formula a) { return unary(Kind::globally, check(i), std::move(a)); }
  static Formula until(Interval i, Formula a, Formula b) { return binary(Kind::until, check(i), std::move(a), std::move(b)); }

  Kind kind() const noexcept { return node_->kind; }
  const Expr& feature() const { return *node_->feature; }
  Comparison comparison() const noexcept { return node_->cmp; }
  double threshold() const noexcept { return node_->c; }
  const Interval& interval() const noexcept { return node_->interval; }
  const Formula& lhs() const { return node_->children.at(0); }
  const Formula& rhs() const { return node_->children.at(1); }
  const Formula& child() const { return node_->children.at(0); }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    auto iv = [&](const Interval& i) {
      std::ostringstream o;
      o.precision(17);
      o << "[" << i.lo << ",";
      if (std::isinf(i.hi)) o << "inf";
      else o << i.hi;
      o << "]";
      return o.str();
    };
    switch (kind()) {
      case Kind::truth: return "true";
      case Kind::predicate:
        os << "(" << feature().to_string() << (comparison() == Comparison::ge ? " >= " : " <= ") << threshold() << ")";
        return os.str();
      case Kind::negation: return "!" + child().to_string();
      case Kind::conjunction: return "(" + lhs().to_string() + " & " + rhs().to_string() + ")";
      case Kind::disjunction: return "(" + lhs().to_string() + " | " + rhs().to_string() + ")";
      case Kind::eventually: return "F" + iv(interval()) + child().to_string();
      case Kind::globally: return "G" + iv(interval()) + child().to_string();
      case Kind::until: return "(" + lhs().to_string() + " U" + iv(interval()) + " " + rhs().to_string() + ")";
    }
    return {};
  }

 private:
  struct Node {
    Kind kind;
    std::shared_ptr<const Expr> feature;
    Comparison cmp = Comparison::ge;
    double c = 0.0;
    Interval interval;
    std::vector<Formula> children;
  };

  explicit Formula(std::shared_ptr<const Node> n) : node_(std::move(n)) {}

  static std::shared_ptr<Node> make_node(Kind k) {
    auto n = std::make_shared<Node>();
    n->kind = k;
    return n;
  }

  static Interval check(Interval i) {
    if (!(i.lo >= 0.0) || !(i.hi >= i.lo) || std::isinf(i.lo))
      throw ValidationError("temporal interval must satisfy 0 <= lo <= hi");
    return i;
  }

  static Formula unary(Kind k, Interval i, Formula a) {
    auto n = make_node(k);
    n->interval = i;
    n->children.push_back(std::move(a));
    return Formula(std::move(n));
  }

  static Formula binary(Kind k, Interval i, Formula a, Formula b) {
    auto n = make_node(k);
    n->interval = i;
    n->children.push_back(std::move(a));
    n->children.push_back(std::move(b));
    return Formula(std::move(n));
  }

  std::shared_ptr<const Node> node_;
};

namespace detail {

struct Window {
  std::size_t lo;
  std::size_t hi;  // SIZE_MAX for unbounded
  bool bounded;
};

inline Window to_window(const Interval& i, double spacing) {
  Window w;
  w.lo = static_cast<std::size_t>(std::llround(i.lo / spacing));
  w.bounded = std::isfinite(i.hi);
  w.hi = w.bounded ? static_cast<std::size_t>(std::llround(i.hi / spacing)) : std::numeric_limits<std::size_t>::max();
  return w;
}

// Number of start positions t for which [t+lo, t+hi] fits inside `len` samples.
inline std::size_t window_length(const Window& w, std::size_t len) {
  const std::size_t reach = w.bounded ? w.hi : w.lo;
  return reach >= len ? 0 : len - reach;
}

// out[t] = op over c[t+lo .. t+hi] (or to the end when unbounded).
template <typename Better>
std::vector<double> sliding(const std::vector<double>& c, const Window& w, Better better) {
  const std::size_t len = window_length(w, c.size());
  std::vector<double> out(len);
  if (len == 0) return out;
  if (!w.bounded) {
    double acc = c.back();
    std::vector<double> suffix(c.size());
    for (std::size_t k = c.size(); k-- > 0;) {
      if (better(c[k], acc)) acc = c[k];
      suffix[k] = acc;
    }
    for (std::size_t t = 0; t < len; ++t) out[t] = suffix[t + w.lo];
    return out;
  }
  // monotone deque over window positions [t+lo, t+hi]
  std::deque<std::size_t> dq;
  std::size_t pushed = w.lo;
  for (std::size_t t = 0; t < len; ++t) {
    const std::size_t right = t + w.hi;
    while (pushed <= right) {
      while (!dq.empty() && !better(c[dq.back()], c[pushed])) dq.pop_back();
      dq.push_back(pushed++);
    }
    while (dq.front() < t + w.lo) dq.pop_front();
    out[t] = c[dq.front()];
  }
  return out;
}

inline std::vector<double> robustness_signal(const Formula& phi, const Signal& s) {
  using Kind = Formula::Kind;
  switch (phi.kind()) {
    case Kind::truth: return std::vector<double>(s.length(), kInf);
    case Kind::predicate: {
      auto f = evaluate(phi.feature(), s);
      for (auto& v : f) v = phi.comparison() == Comparison::ge ? v - phi.threshold() : phi.threshold() - v;
      return f;
    }
    case Kind::negation: {
      auto r = robustness_signal(phi.child(), s);
      for (auto& v : r) v = -v;
      return r;
    }
    case Kind::conjunction:
    case Kind::disjunction: {
      auto a = robustness_signal(phi.lhs(), s);
      const auto b = robustness_signal(phi.rhs(), s);
      a.resize(std::min(a.size(), b.size()));
      for (std::size_t k = 0; k < a.size(); ++k)
        a[k] = phi.kind() == Kind::conjunction ? std::min(a[k], b[k]) : std::max(a[k], b[k]);
      return a;
    }
    case Kind::globally:
      return sliding(robustness_signal(phi.child(), s), to_window(phi.interval(), s.spacing()),
                     [](double x, double y) { return x < y; });
    case Kind::eventually:
      return sliding(robustness_signal(phi.child(), s), to_window(phi.interval(), s.spacing()),
                     [](double x, double y) { return x > y; });
    case Kind::until: {
      const auto a = robustness_signal(phi.lhs(), s);
      const auto b = robustness_signal(phi.rhs(), s);
      const std::size_t len_c = std::min(a.size(), b.size());
      const Window w = to_window(phi.interval(), s.spacing());
      const std::size_t len = window_length(w, len_c);
      std::vector<double> out(len);
      for (std::size_t t = 0; t < len; ++t) {
        double running = kInf;  // min of lhs over [t, t')
        for (std::size_t k = t; k < t + w.lo; ++k) running = std::min(running, a[k]);
        const std::size_t last = w.bounded ? t + w.hi : len_c - 1;
        double best = -kInf;
        for (std::size_t tp = t + w.lo; tp <= last; ++tp) {
          best = std::max(best, std::min(b[tp], running));
          running = std::min(running, a[tp]);
        }
        out[t] = best;
      }
      return out;
    }
  }
  return {};
}

}  // namespace detail

/// Robustness values for every start index at which the formula is fully
/// defined (formulas with bounded windows are defined on a shorter prefix).
inline std::vector<double> robustness_signal(const Formula& phi, const Signal& s) {
  return detail::robustness_signal(phi, s);
}

/// Quantitative robustness of phi at sample index t. Positive means satisfied.
inline double robustness(const Formula& phi, const Signal& s, std::size_t t = 0) {
  const auto r = detail::robustness_signal(phi, s);
  if (t >= r.size())
    throw HorizonError("formula " + phi.to_string() + " is not defined at index " + std::to_string(t) +
                       ": its temporal window exceeds the signal horizon of " + std::to_string(s.length()) + " samples");
  return r[t];
}

inline double robustness(const Formula& phi, const Trace& trace, std::size_t t = 0) {
  return robustness(phi, Signal::from_trace(trace), t);
}

/// Globally over the whole horizon: signal - threshold >= 0.
inline Formula safety_formula(const std::string& signal = "G", double threshold = 70.0) {
  return Formula::globally({0.0, kInf}, Formula::predicate(Expr::signal(signal), Comparison::ge, threshold));
}

/// Largest relative coefficient deviation from the reference minus the
/// threshold. A deviation score: larger means further from the reference.
inline double conformance_robustness(const CoefficientVector& omega, const CoefficientVector& omega_ref,
                                     double threshold = 0.01) {
  if (!omega.same_names(omega_ref)) throw ShapeError("coefficient vectors are not index-aligned");
  double worst = 0.0;
  for (std::size_t i = 0; i < omega.size(); ++i) {
    const double r = omega_ref.value(i);
    if (r == 0.0) throw DegenerateReferenceError("reference coefficient '" + omega_ref[i].name + "' is zero");
    worst = std::max(worst, std::abs((omega.value(i) - r) / r));
  }
  return worst - threshold;
}

/// The same check as an STL formula over a coefficient sequence. Its
/// robustness at a single vector is the negation of conformance_robustness.
inline Formula conformance_formula(const CoefficientVector& omega_ref, double threshold = 0.01) {
  std::vector<Expr> devs;
  for (const auto& e : omega_ref) {
    if (e.value == 0.0) throw DegenerateReferenceError("reference coefficient '" + e.name + "' is zero");
    devs.push_back(Expr::unary(Expr::Op::abs, (Expr::signal(e.name) - Expr::constant(e.value)) / Expr::constant(e.value)));
  }
  return Formula::globally({0.0, kInf},
                           Formula::predicate(Expr::nary(Expr::Op::max, std::move(devs)), Comparison::le, threshold));
}

namespace detail {

class Parser {
 public:
  explicit Parser(std::string text) : s_(std::move(text)) {}

  Formula parse() {
    Formula f = formula();
    skip();
    if (pos_ != s_.size()) fail("unexpected trailing input");
    return f;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ParseError("formula syntax error: " + msg, pos_); }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool peek(const std::string& tok) {
    skip();
    return s_.compare(pos_, tok.size(), tok) == 0;
  }

  bool accept(const std::string& tok) {
    if (!peek(tok)) return false;
    pos_ += tok.size();
    return true;
  }

  void expect(const std::string& tok) {
    if (!accept(tok)) fail("expected '" + tok + "'");
  }

  // Operator letter immediately followed (after spaces) by '['.
  bool accept_temporal(char op) {
    skip();
    if (pos_ >= s_.size() || s_[pos_] != op) return false;
    std::size_t p = pos_ + 1;
    while (p < s_.size() && std::isspace(static_cast<unsigned char>(s_[p]))) ++p;
    if (p >= s_.size() || s_[p] != '[') return false;
    pos_ = p;
    return true;
  }

  double number() {
    skip();
    const char* begin = s_.c_str() + pos_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) fail("expected a number");
    pos_ += static_cast<std::size_t>(end - begin);
    return v;
  }

  Interval interval() {
    expect("[");
    Interval i;
    i.lo = number();
    expect(",");
    if (accept("inf")) i.hi = kInf;
    else i.hi = number();
    expect("]");
    if (!(i.lo >= 0.0 && i.hi >= i.lo)) fail("interval must satisfy 0 <= lo <= hi");
    return i;
  }

  Formula formula() {
    Formula lhs = disj();
    if (accept_temporal('U')) {
      Interval i = interval();
      Formula rhs = disj();
      return Formula::until(i, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  Formula disj() {
    Formula f = conj();
    while (accept("|")) f = Formula::disjunction(std::move(f), conj());
    return f;
  }

  Formula conj() {
    Formula f = unary();
    while (accept("&")) f = Formula::conjunction(std::move(f), unary());
    return f;
  }

  Formula unary() {
    if (accept("!")) return Formula::negation(unary());
    if (accept_temporal('G')) {
      Interval i = interval();
      return Formula::globally(i, unary());
    }
    if (accept_temporal('F')) {
      Interval i = interval();
      return Formula::eventually(i, unary());
    }
    return atom();
  }

  Formula atom() {
    skip();
    const std::size_t save = pos_;
    if (accept("true")) return Formula::truth();
    try {
      Expr lhs = arith();
      Comparison cmp;
      if (accept(">=") || accept(">")) cmp = Comparison::ge;
      else if (accept("<=") || accept("<")) cmp = Comparison::le;
      else fail("expected a comparison");
      Expr rhs = arith();
      if (rhs.is_constant()) return Formula::predicate(std::move(lhs), cmp, rhs.value());
      return Formula::predicate(std::move(lhs) - std::move(rhs), cmp, 0.0);
    } catch (const ParseError&) {
      pos_ = save;
    }
    expect("(");
    Formula f = formula();
    expect(")");
    return f;
  }

  Expr arith() {
    Expr e = term();
    for (;;) {
      if (accept("+")) e = std::move(e) + term();
      else if (peek("-") && !peek("->")) {
        ++pos_;
        e = std::move(e) - term();
      } else return e;
    }
  }

  Expr term() {
    Expr e = factor();
    for (;;) {
      if (accept("*")) e = std::move(e) * factor();
      else if (accept("/")) e = std::move(e) / factor();
      else return e;
    }
  }

  std::string name() {
    skip();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '.'))
      ++pos_;
    if (pos_ == start) fail("expected a signal name");
    return s_.substr(start, pos_ - start);
  }

  std::vector<Expr> arg_list() {
    std::vector<Expr> args;
    expect("(");
    args.push_back(arith());
    while (accept(",")) args.push_back(arith());
    expect(")");
    return args;
  }

  Expr factor() {
    skip();
    if (accept("-")) {
      Expr e = factor();
      if (e.is_constant()) return Expr::constant(-e.value());
      return Expr::unary(Expr::Op::neg, std::move(e));
    }
    if (accept("sig")) {
      expect("(");
      Expr e = Expr::signal(name());
      expect(")");
      return e;
    }
    if (accept("abs")) {
      expect("(");
      Expr e = Expr::unary(Expr::Op::abs, arith());
      expect(")");
      return e;
    }
    if (accept("max")) return Expr::nary(Expr::Op::max, arg_list());
    if (accept("min")) return Expr::nary(Expr::Op::min, arg_list());
    if (accept("(")) {
      Expr e = arith();
      expect(")");
      return e;
    }
    return Expr::constant(number());
  }

  std::string s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Formula parse_formula(const std::string& text) { return detail::Parser(text).parse(); }

}  // namespace u2d::stl
