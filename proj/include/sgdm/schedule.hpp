#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgdm {

struct Stage {
  double alpha = 0.0;
  double beta = 0.0;
  std::int64_t length = 0;
};

/// Piecewise-constant stepsize and momentum plan. Stage parameters are validated on construction.
class Schedule {
 public:
  Schedule() = default;
  explicit Schedule(std::vector<Stage> stages) : stages_(std::move(stages)) {
    if (stages_.empty()) throw std::invalid_argument("schedule: need at least one stage");
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const Stage& s = stages_[i];
      const std::string at = "schedule: stage " + std::to_string(i + 1);
      if (!(s.alpha > 0.0) || !std::isfinite(s.alpha)) throw std::invalid_argument(at + ": alpha must be > 0");
      if (!(s.beta >= 0.0 && s.beta < 1.0)) throw std::invalid_argument(at + ": beta must lie in [0, 1)");
      if (s.length < 1) throw std::invalid_argument(at + ": length must be >= 1");
    }
  }

  const std::vector<Stage>& stages() const { return stages_; }
  std::size_t size() const { return stages_.size(); }
  const Stage& operator[](std::size_t i) const { return stages_[i]; }
  const Stage& front() const { return stages_.front(); }
  const Stage& back() const { return stages_.back(); }

  std::int64_t total_length() const {
    std::int64_t t = 0;
    for (const Stage& s : stages_) t += s.length;
    return t;
  }

  /// A1 of stage i, alpha_i beta_i / (1 - beta_i).
  double a1(std::size_t i) const { return stages_[i].alpha * stages_[i].beta / (1.0 - stages_[i].beta); }
  /// A2 of stage i, alpha_i T_i.
  double a2(std::size_t i) const { return stages_[i].alpha * static_cast<double>(stages_[i].length); }
  double A1() const { return a1(0); }
  double A2() const { return a2(0); }

  /// Zero-based stage holding 1-based iteration k.
  std::size_t stage_of(std::int64_t k) const {
    std::int64_t end = 0;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      end += stages_[i].length;
      if (k <= end) return i;
    }
    throw std::out_of_range("iteration " + std::to_string(k) + " is past the schedule end");
  }

  /// First 1-based iteration of stage i.
  std::int64_t stage_begin(std::size_t i) const {
    std::int64_t b = 1;
    for (std::size_t j = 0; j < i; ++j) b += stages_[j].length;
    return b;
  }

  /// beta(k) for k = 1..total_length().
  std::vector<double> beta_per_iteration() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total_length()));
    for (const Stage& s : stages_)
      for (std::int64_t t = 0; t < s.length; ++t) out.push_back(s.beta);
    return out;
  }

  std::vector<double> alpha_per_iteration() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total_length()));
    for (const Stage& s : stages_)
      for (std::int64_t t = 0; t < s.length; ++t) out.push_back(s.alpha);
    return out;
  }

  static Schedule constant(double alpha, double beta, std::int64_t K) { return Schedule({{alpha, beta, K}}); }

 private:
  std::vector<Stage> stages_;
};

/// alpha_i = A2 / T_i, beta_i = A1 / (A1 + alpha_i). Rejects lengths that make beta decrease.
inline Schedule plan_from_lengths(double A1, double A2, const std::vector<std::int64_t>& lengths) {
  if (!(A1 > 0.0) || !std::isfinite(A1)) throw std::invalid_argument("plan: A1 must be > 0");
  if (!(A2 > 0.0) || !std::isfinite(A2)) throw std::invalid_argument("plan: A2 must be > 0");
  if (lengths.empty()) throw std::invalid_argument("plan: need at least one stage length");
  std::vector<Stage> st;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw std::invalid_argument("plan: stage " + std::to_string(i + 1) + " length must be >= 1");
    const double alpha = A2 / static_cast<double>(lengths[i]);
    st.push_back({alpha, A1 / (A1 + alpha), lengths[i]});
  }
  for (std::size_t i = 1; i < st.size(); ++i)
    if (st[i].beta < st[i - 1].beta)
      throw std::invalid_argument("plan: beta decreases between stage " + std::to_string(i) + " (T=" +
                                  std::to_string(lengths[i - 1]) + ") and stage " + std::to_string(i + 1) +
                                  " (T=" + std::to_string(lengths[i]) + "); lengths must be nondecreasing");
  return Schedule(std::move(st));
}

enum class ValidationMode { practical, theoretical };

struct ValidationEntry {
  std::string name;
  bool pass = false;
  double margin = 0.0;  ///< signed distance to the boundary, negative iff violated
  bool evaluated = true;
};

struct ValidationReport {
  std::vector<ValidationEntry> entries;
  bool practical_ok = false;
  bool theoretical_ok = false;
  ValidationMode mode = ValidationMode::practical;

  const ValidationEntry& at(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw std::out_of_range("no validation entry named " + name);
  }
};

/// 1/(24 sqrt(2) L), the A1 value the multistage analysis requires.
inline double theoretical_a1(double L) { return 1.0 / (24.0 * std::sqrt(2.0) * L); }

namespace detail {
inline double rel_spread(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double scale = std::max(std::abs(*lo), std::abs(*hi));
  return scale > 0.0 ? (*hi - *lo) / scale : 0.0;
}
}  // namespace detail

inline ValidationReport validate(const Schedule& s, double L, ValidationMode mode) {
  if (!(L > 0.0)) throw std::invalid_argument("validate: L must be > 0");
  ValidationReport r;
  r.mode = mode;
  const std::size_t n = s.size();
  std::vector<double> a1(n), a2(n);
  for (std::size_t i = 0; i < n; ++i) {
    a1[i] = s.a1(i);
    a2[i] = s.a2(i);
  }
  auto add = [&](std::string name, double margin) { r.entries.push_back({std::move(name), margin >= 0.0, margin, true}); };

  add("A1_consistent", 1e-9 - detail::rel_spread(a1));
  add("A2_consistent", 1e-9 - detail::rel_spread(a2));
  double mono = 0.0;
  for (std::size_t i = 1; i < n; ++i) mono = (i == 1) ? s[i].beta - s[i - 1].beta : std::min(mono, s[i].beta - s[i - 1].beta);
  add("beta_monotone", mono);

  add("beta1_at_least_half", s.front().beta - 0.5);
  double decay = std::numeric_limits<double>::infinity();
  for (const Stage& st : s.stages()) decay = std::min(decay, 0.5 - std::pow(st.beta, 2.0 * static_cast<double>(st.length)));
  add("beta_decay", decay);
  const double b1 = s.front().beta, bn = s.back().beta;
  const double lhs = b1 > 0.0 ? (1.0 - b1) / b1 : std::numeric_limits<double>::infinity();
  const double rhs = bn > 0.0 ? 12.0 * (1.0 - bn) / std::sqrt(bn + bn * bn) : std::numeric_limits<double>::infinity();
  add("spread", std::isinf(lhs) ? -std::numeric_limits<double>::infinity() : rhs - lhs);
  const double target = theoretical_a1(L);
  // tolerance admits A1 quoted to five significant digits
  add("A1_theoretical", 1e-4 - std::abs(s.A1() - target) / target);
  if (mode == ValidationMode::practical) r.entries.back().evaluated = false;

  r.practical_ok = r.entries[0].pass && r.entries[1].pass && r.entries[2].pass;
  r.theoretical_ok = r.practical_ok;
  for (std::size_t i = 3; i < r.entries.size(); ++i)
    if (r.entries[i].evaluated) r.theoretical_ok = r.theoretical_ok && r.entries[i].pass;
  return r;
}

/// min{(1-b)/(L(4-b+2b^2)), (1-b)/(2 sqrt(2) L sqrt(b+b^2))}.
inline double max_stepsize_nonconvex(double beta, double L) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("beta must lie in [0, 1)");
  if (!(L > 0.0)) throw std::invalid_argument("L must be > 0");
  const double t1 = (1.0 - beta) / (L * (4.0 - beta + 2.0 * beta * beta));
  const double t2 = beta == 0.0 ? std::numeric_limits<double>::infinity()
                                : (1.0 - beta) / (2.0 * std::sqrt(2.0) * L * std::sqrt(beta + beta * beta));
  return std::min(t1, t2);
}

/// Same cap with the theorem-statement constant (4-b+b^2), reported alongside.
inline double max_stepsize_nonconvex_statement(double beta, double L) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("beta must lie in [0, 1)");
  if (!(L > 0.0)) throw std::invalid_argument("L must be > 0");
  const double t1 = (1.0 - beta) / (L * (4.0 - beta + beta * beta));
  const double t2 = beta == 0.0 ? std::numeric_limits<double>::infinity()
                                : (1.0 - beta) / (2.0 * std::sqrt(2.0) * L * std::sqrt(beta + beta * beta));
  return std::min(t1, t2);
}

inline double max_stepsize_strongly_convex(double beta, double L, double mu) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("beta must lie in [0, 1)");
  if (!(mu > 0.0 && mu <= L)) throw std::invalid_argument("need 0 < mu <= L");
  const double t1 = (1.0 - beta) / (5.0 * L);
  const double t2 = (1.0 - beta) /
                    (L * (3.0 - beta + 2.0 * beta * beta + (48.0 * std::sqrt(beta) / 25.0) * (2.0 * L + 18.0 * mu) / L));
  return std::min(t1, t2);
}

/// floor(ln 0.5 / ln beta); 0 for beta = 0.
inline int k0(double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("beta must lie in [0, 1)");
  if (beta == 0.0) return 0;
  return static_cast<int>(std::floor(std::log(0.5) / std::log(beta)));
}

}  // namespace sgdm
