#pragma once

#include "sgdm/diagnostics.hpp"
#include "sgdm/linalg.hpp"
#include "sgdm/optimizers.hpp"
#include "sgdm/problems.hpp"
#include "sgdm/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgdm {

// ---------------------------------------------------------------------------
// Auxiliary sequences
// ---------------------------------------------------------------------------

namespace detail {
inline void require_full(const Trajectory& tr, const char* what) {
  if (!tr.recording.complete()) throw std::invalid_argument(std::string(what) + ": full recording required");
  if (tr.records.size() != static_cast<std::size_t>(tr.steps)) throw std::invalid_argument(std::string(what) + ": record count does not match steps");
}
}  // namespace detail

/// z^1 = x^1, z^k = (x^k - beta x^{k-1}) / (1 - beta). Returns z^1..z^{K+1}.
inline std::vector<Vec> aux_z_fixed(const Trajectory& tr, double beta) {
  detail::require_full(tr, "aux_z_fixed");
  if (tr.schedule.size() != 1) throw std::invalid_argument("aux_z_fixed: fixed-parameter trajectory required");
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("aux_z_fixed: beta must lie in [0, 1)");
  const std::int64_t K = tr.steps;
  std::vector<Vec> z;
  z.reserve(static_cast<std::size_t>(K + 1));
  z.push_back(tr.x_at(1));
  for (std::int64_t k = 2; k <= K + 1; ++k) z.push_back((tr.x_at(k) - beta * tr.x_at(k - 1)) / (1.0 - beta));
  return z;
}

/// z^k = x^k - A1 m^{k-1} with m^0 = 0. Returns z^1..z^{K+1}.
inline std::vector<Vec> aux_z_multistage(const Trajectory& tr, double A1) {
  detail::require_full(tr, "aux_z_multistage");
  const Schedule& s = tr.schedule;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (std::abs(s.a1(i) - A1) > 1e-9 * std::max(std::abs(A1), std::abs(s.a1(i))))
      throw std::invalid_argument("aux_z_multistage: stage " + std::to_string(i + 1) + " has A1 = " + std::to_string(s.a1(i)) +
                                  ", expected " + std::to_string(A1));
  const std::int64_t K = tr.steps;
  std::vector<Vec> z;
  z.reserve(static_cast<std::size_t>(K + 1));
  z.push_back(tr.x_at(1));
  for (std::int64_t k = 2; k <= K + 1; ++k) z.push_back(tr.x_at(k) - A1 * tr.records[static_cast<std::size_t>(k - 2)].m);
  return z;
}

/// Relative residual |z^{k+1} - z^k + alpha(k) g~^k| / (alpha(k)|g~^k| + eps) for k = 1..K.
inline std::vector<double> z_identity_residuals(const Trajectory& tr, const std::vector<Vec>& z, double eps = 1e-300) {
  detail::require_full(tr, "z_identity_residuals");
  if (z.size() != static_cast<std::size_t>(tr.steps + 1)) throw std::invalid_argument("z_identity_residuals: z length mismatch");
  std::vector<double> out;
  out.reserve(tr.records.size());
  for (std::size_t i = 0; i < tr.records.size(); ++i) {
    const IterRecord& r = tr.records[i];
    const double num = (z[i + 1] - z[i] + r.alpha * r.gtilde).norm();
    out.push_back(num / (r.alpha * r.gtilde.norm() + eps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Momentum weights and deviation coefficients
// ---------------------------------------------------------------------------

/// b_{k,i} = (1 - beta(i)) prod_{j=i+1}^k beta(j) for i = 1..k. `betas[j-1]` is beta(j).
inline std::vector<double> multistage_weights_b(std::span<const double> betas, std::int64_t k) {
  if (k < 1 || k > static_cast<std::int64_t>(betas.size())) throw std::invalid_argument("multistage_weights_b: k outside the plan");
  std::vector<double> b(static_cast<std::size_t>(k));
  double prod = 1.0;
  for (std::int64_t i = k; i >= 1; --i) {
    const double bi = betas[static_cast<std::size_t>(i - 1)];
    b[static_cast<std::size_t>(i - 1)] = (1.0 - bi) * prod;
    prod *= bi;
  }
  return b;
}

/// prod_{j=1}^k beta(j).
inline double beta_product(std::span<const double> betas, std::int64_t k) {
  double p = 1.0;
  for (std::int64_t j = 0; j < k; ++j) p *= betas[static_cast<std::size_t>(j)];
  return p;
}

/// a_{k,i} = L^2 beta^{k-i} / (1 - beta^k) (k - i + beta/(1-beta)) for i = 1..k-1.
inline std::vector<double> dev_coeffs_a(std::int64_t k, double beta, double L) {
  if (k < 2) throw std::invalid_argument("dev_coeffs_a: k must be >= 2");
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("dev_coeffs_a: beta must lie in [0, 1)");
  std::vector<double> a(static_cast<std::size_t>(k - 1), 0.0);
  if (beta == 0.0) return a;
  const double denom = 1.0 - std::pow(beta, static_cast<double>(k));
  const double r = beta / (1.0 - beta);
  for (std::int64_t i = 1; i < k; ++i)
    a[static_cast<std::size_t>(i - 1)] = L * L * std::pow(beta, static_cast<double>(k - i)) / denom * (static_cast<double>(k - i) + r);
  return a;
}

/// The sharper intermediate coefficient a'_{k,j}, closed form.
inline double a_prime(std::int64_t k, std::int64_t j, double beta, double L) {
  if (k < 2 || j < 1 || j >= k) throw std::invalid_argument("a_prime: need 1 <= j < k");
  if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("a_prime: beta must lie in (0, 1)");
  const double denom = 1.0 - std::pow(beta, static_cast<double>(k));
  const double kk = static_cast<double>(k), jj = static_cast<double>(j);
  return L * L * std::pow(beta, kk) / denom * (-(kk - 1.0) - 1.0 / (1.0 - beta)) +
         L * L * std::pow(beta, kk - jj) / denom * (kk - jj + beta / (1.0 - beta));
}

struct MultistageDeviation {
  std::vector<double> d;  ///< d_{k,i}, i = 1..k-1
  std::vector<double> a;  ///< a_{k,i}, i = 1..k-1
};

/// d_{k,i} and the dominating a_{k,i} for a monotone beta plan.
inline MultistageDeviation multistage_dev_coeffs(std::span<const double> betas, std::int64_t k, double L) {
  if (k < 2 || k > static_cast<std::int64_t>(betas.size())) throw std::invalid_argument("multistage_dev_coeffs: k outside the plan");
  for (std::size_t j = 1; j < betas.size(); ++j)
    if (betas[j] < betas[j - 1]) throw std::invalid_argument("multistage_dev_coeffs: beta plan must be nondecreasing");
  const std::vector<double> b = multistage_weights_b(betas, k);
  const double denom = 1.0 - beta_product(betas, k);
  const double bk = betas[static_cast<std::size_t>(k - 1)];
  MultistageDeviation out;
  out.d.resize(static_cast<std::size_t>(k - 1));
  out.a.resize(static_cast<std::size_t>(k - 1));
  double acc = 0.0;
  for (std::int64_t i = 1; i < k; ++i) {
    acc += static_cast<double>(k - i) * b[static_cast<std::size_t>(i - 1)];
    out.d[static_cast<std::size_t>(i - 1)] = L * L / denom * acc;
    out.a[static_cast<std::size_t>(i - 1)] =
        bk == 0.0 ? 0.0 : L * L * std::pow(bk, static_cast<double>(k - i)) / denom * (static_cast<double>(k - i) + bk / (1.0 - bk));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lyapunov coefficients
// ---------------------------------------------------------------------------

enum class Regime { nonconvex, strongly_convex, multistage };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::nonconvex: return "nonconvex";
    case Regime::strongly_convex: return "strongly_convex";
    case Regime::multistage: return "multistage";
  }
  return "?";
}

/**
 * c_1..c_H of the Lyapunov function together with the regime's inputs.
 *
 * Nonconvex and multistage sequences are stored in long double through their closed tail
 * form D L^2 b^i (i/(1-b) + 2b/(1-b)^2); `recursion_gap` is the largest deviation of the
 * forward recursion from it, relative to c_1.
 */
struct CoefficientSet {
  Regime regime = Regime::nonconvex;
  std::vector<long double> c;
  double alpha = 0.0, beta = 0.0, L = 0.0, mu = 0.0;
  double alpha1 = 0.0, beta1 = 0.0, beta_n = 0.0;
  double B1 = 0.0, B2 = 0.0, B3 = 0.0;  ///< B2 is per unit sigma^2
  double c1_alt = 0.0;                   ///< alternative c_1 (2L^3 / 18 mu constants)
  double c1_estimate = 0.0;              ///< 6 sqrt(b) / (25 (1-b)) (2L + 18 mu)
  double denominator = 1.0;              ///< 1 - 4 a^2 (b+b^2) L^2 / (1-b)^2
  long double tail_mass = 0.0L;          ///< sum of decrements past H
  long double c_limit = 0.0L;            ///< c_1 minus all decrements
  long double recursion_gap = 0.0L;
  std::size_t H = 0;

  double c1() const { return c.empty() ? 0.0 : static_cast<double>(c.front()); }
  /// c_i, 1-based, i <= H.
  double at(std::size_t i) const { return static_cast<double>(c.at(i - 1)); }
  std::size_t horizon() const { return H; }

  bool all_positive() const {
    for (long double v : c)
      if (!(v > 0.0L)) return false;
    return !c.empty();
  }
  bool nonincreasing() const {
    for (std::size_t i = 1; i < c.size(); ++i)
      if (c[i] > c[i - 1]) return false;
    return true;
  }
  /// Upper bound on sum_{i > H} c_i, used to bound truncated Lyapunov history.
  long double tail_sum_bound() const;
};

namespace detail {

/// sum_{i >= m} b^i (i + b/(1-b)) = b^m (m/(1-b) + 2b/(1-b)^2)
inline long double decrement_tail(long double b, long double m) {
  if (b == 0.0L) return 0.0L;
  return std::pow(b, m) * (m / (1.0L - b) + 2.0L * b / ((1.0L - b) * (1.0L - b)));
}

/// sum_{i >= m} b^i (i/(1-b) + 2b/(1-b)^2)
inline long double tail_of_tail(long double b, long double m) {
  if (b == 0.0L) return 0.0L;
  const long double ob = 1.0L - b;
  const long double s_i = std::pow(b, m) * (m / ob + b / (ob * ob));  // sum i b^i
  const long double s_1 = std::pow(b, m) / ob;                          // sum b^i
  return s_i / ob + 2.0L * b / (ob * ob) * s_1;
}

inline std::size_t auto_horizon(long double scale, long double b, long double c1) {
  if (c1 <= 0.0L || b == 0.0L) return 1;
  std::size_t H = 1;
  while (scale * decrement_tail(b, static_cast<long double>(H + 1)) >= 1e-12L * c1 && H < 100000000) ++H;
  return H;
}

/// Fills c via the tail form and measures the forward-recursion gap.
inline void fill_geometric(CoefficientSet& cs, long double c1, long double scale, long double b, std::size_t H) {
  cs.H = H == 0 ? auto_horizon(scale, b, c1) : H;
  cs.c.resize(cs.H);
  const long double ob = 1.0L - b;
  long double rec = c1;
  long double gap = 0.0L;
  for (std::size_t i = 1; i <= cs.H; ++i) {
    const long double li = static_cast<long double>(i);
    const long double tail = b == 0.0L ? 0.0L : scale * std::pow(b, li) * (li / ob + 2.0L * b / (ob * ob));
    cs.c[i - 1] = i == 1 ? c1 : tail;
    if (i > 1) gap = std::max(gap, std::abs(rec - tail));
    rec -= scale * std::pow(b, li) * (li + b / ob);
  }
  cs.recursion_gap = c1 > 0.0L ? gap / c1 : gap;
  cs.tail_mass = scale * decrement_tail(b, static_cast<long double>(cs.H + 1));
  cs.c_limit = c1 - scale * (b + b * b) / (ob * ob);
}

}  // namespace detail

inline long double CoefficientSet::tail_sum_bound() const {
  if (regime == Regime::strongly_convex) {
    if (c.empty() || B1 >= 0.0) return std::numeric_limits<long double>::infinity();
    return c.back() * (1.0L + B1) / (-static_cast<long double>(B1));
  }
  const long double b = regime == Regime::multistage ? beta_n : beta;
  const long double a = regime == Regime::multistage ? alpha1 : alpha;
  const long double bb = regime == Regime::multistage ? beta1 : beta;
  const long double D = 4.0L * c.front() * a * a + static_cast<long double>(L) * a * a / (1.0L - bb);
  return D * L * L * detail::tail_of_tail(b, static_cast<long double>(H + 1));
}

/// Nonconvex sequence. Rejects alpha above (1-b)/(2 sqrt(2) L sqrt(b+b^2)). H = 0 picks the horizon automatically.
inline CoefficientSet c_sequence_nonconvex(double alpha, double beta, double L, std::size_t H = 0) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("c_sequence_nonconvex: beta must lie in [0, 1)");
  if (!(L > 0.0) || !(alpha > 0.0)) throw std::invalid_argument("c_sequence_nonconvex: need alpha > 0 and L > 0");
  if (beta > 0.0) {
    const double cap = (1.0 - beta) / (2.0 * std::sqrt(2.0) * L * std::sqrt(beta + beta * beta));
    if (alpha > cap * (1.0 + 1e-12))
      throw std::invalid_argument("c_sequence_nonconvex: alpha " + std::to_string(alpha) + " exceeds the cap " + std::to_string(cap));
  }
  CoefficientSet cs;
  cs.regime = Regime::nonconvex;
  cs.alpha = alpha;
  cs.beta = beta;
  cs.L = L;
  const long double a = alpha, b = beta, l = L, ob = 1.0L - b;
  const long double den = 1.0L - 4.0L * a * a * (b + b * b) * l * l / (ob * ob);
  cs.denominator = static_cast<double>(den);
  const long double c1 = ((b + b * b) / (ob * ob * ob) * l * l * l * a * a) / den;
  const long double D = 4.0L * c1 * a * a + l * a * a / ob;
  detail::fill_geometric(cs, c1, D * l * l, b, H);
  return cs;
}

/// Multistage sequence with beta_n in the decay factor. Rejects inputs whose c_1 denominator falls below 1/2.
inline CoefficientSet c_sequence_multistage(double alpha1, double beta1, double beta_n, double L, std::size_t H = 0) {
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta_n >= 0.0 && beta_n < 1.0)) throw std::invalid_argument("c_sequence_multistage: betas must lie in [0, 1)");
  if (beta_n < beta1) throw std::invalid_argument("c_sequence_multistage: beta_n must be >= beta_1");
  if (!(L > 0.0) || !(alpha1 > 0.0)) throw std::invalid_argument("c_sequence_multistage: need alpha1 > 0 and L > 0");
  CoefficientSet cs;
  cs.regime = Regime::multistage;
  cs.alpha1 = alpha1;
  cs.beta1 = beta1;
  cs.beta_n = beta_n;
  cs.L = L;
  const long double a = alpha1, b1 = beta1, bn = beta_n, l = L, obn = 1.0L - bn;
  const long double ratio = 4.0L * a * a * (bn + bn * bn) / (obn * obn) * l * l;
  if (ratio > 0.5L * (1.0L + 1e-12L))
    throw std::invalid_argument("c_sequence_multistage: 4 alpha1^2 (bn+bn^2) L^2 / (1-bn)^2 = " + std::to_string(static_cast<double>(ratio)) +
                                " exceeds 1/2");
  const long double den = 1.0L - ratio;
  cs.denominator = static_cast<double>(den);
  const long double c1 = (a * a / (1.0L - b1) * (bn + bn * bn) / (obn * obn) * l * l * l) / den;
  const long double D = 4.0L * c1 * a * a + l * a * a / (1.0L - b1);
  detail::fill_geometric(cs, c1, D * l * l, bn, H);
  return cs;
}

/// sqrt(b)/(1-sqrt(b))^2 + sqrt(b)/(1-sqrt(b)) * b/(1-b)
inline double scvx_geometric_factor(double beta) {
  if (beta == 0.0) return 0.0;
  const double q = std::sqrt(beta);
  return q / ((1.0 - q) * (1.0 - q)) + q / (1.0 - q) * beta / (1.0 - beta);
}

/// B3 with the 4/beta^2 factor cancelled, valid at beta = 0.
inline double scvx_B3(double alpha, double beta, double L, double mu, double c1) {
  const double ob = 1.0 - beta, kappa = 1.0 + 8.0 * mu / L;
  return 4.0 * c1 * alpha * alpha + L * alpha * alpha / ob +
         alpha * mu * (alpha * 11.0 / (2.0 * ob) + 2.0 * L * alpha * alpha / (ob * ob)) / kappa;
}

/// B1, B2 (per sigma^2), B3, c_1 and c_{i+1} = (1+B1) c_i - 2 L^2 B3 b^i (i + b/(1-b)).
inline CoefficientSet scvx_constants(double alpha, double beta, double L, double mu, std::size_t H = 0) {
  if (!(mu > 0.0 && mu <= L)) throw std::invalid_argument("scvx_constants: need 0 < mu <= L");
  if (!(alpha > 0.0)) throw std::invalid_argument("scvx_constants: alpha must be > 0");
  const double cap = max_stepsize_strongly_convex(beta, L, mu);
  if (alpha > cap * (1.0 + 1e-12))
    throw std::invalid_argument("scvx_constants: alpha " + std::to_string(alpha) + " exceeds the cap " + std::to_string(cap));
  CoefficientSet cs;
  cs.regime = Regime::strongly_convex;
  cs.alpha = alpha;
  cs.beta = beta;
  cs.L = L;
  cs.mu = mu;
  const double ob = 1.0 - beta, kappa = 1.0 + 8.0 * mu / L, a2 = alpha * alpha;
  const double G = scvx_geometric_factor(beta);
  const double c1 = G * (4.0 * L * L * L * a2 / ob + 30.0 * L * L * mu * a2 / (ob * kappa));
  cs.c1_alt = G * (2.0 * L * L * L * a2 / ob + 18.0 * L * L * mu * a2 / (ob * kappa));
  cs.c1_estimate = 6.0 * std::sqrt(beta) / (25.0 * ob) * (2.0 * L + 18.0 * mu);
  cs.B1 = -alpha * mu / kappa;
  cs.B2 = beta * beta / (2.0 * (1.0 + beta)) * L * a2 + 0.5 * L * a2 + 2.0 * c1 * ob / (1.0 + beta) * a2 +
          alpha * mu * (alpha * beta * beta / ob + 0.5 * L * a2 * (beta / ob) * (beta / ob)) * 2.0 * ob / (1.0 + beta) / kappa;
  cs.B3 = scvx_B3(alpha, beta, L, mu, c1);

  const long double b = beta, q = 1.0L + static_cast<long double>(cs.B1);
  const long double scale = 2.0L * L * L * static_cast<long double>(cs.B3);
  cs.H = H == 0 ? detail::auto_horizon(scale, b, c1) : H;
  cs.c.resize(cs.H);
  long double ci = c1;
  for (std::size_t i = 1; i <= cs.H; ++i) {
    cs.c[i - 1] = ci;
    const long double li = static_cast<long double>(i);
    ci = q * ci - (b == 0.0L ? 0.0L : scale * std::pow(b, li) * (li + b / (1.0L - b)));
  }
  cs.tail_mass = scale * detail::decrement_tail(b, static_cast<long double>(cs.H + 1));
  cs.c_limit = ci;
  return cs;
}

// ---------------------------------------------------------------------------
// Stepwise descent constants
// ---------------------------------------------------------------------------

/// Coefficients of E[L^{k+1} - L^k] <= grad * E|g^k|^2 + noise * sigma^2.
struct DescentCoefficients {
  double grad = 0.0;            ///< uses 3 - b + 2b^2
  double grad_statement = 0.0;  ///< uses 3 - b + b^2
  double noise = 0.0;           ///< per unit sigma^2
};

inline DescentCoefficients descent_coefficients(double alpha, double beta, double L, double c1) {
  const double a2 = alpha * alpha, ob = 1.0 - beta;
  DescentCoefficients dc;
  dc.grad = -alpha + (3.0 - beta + 2.0 * beta * beta) / (2.0 * ob) * L * a2 + 4.0 * c1 * a2;
  dc.grad_statement = -alpha + (3.0 - beta + beta * beta) / (2.0 * ob) * L * a2 + 4.0 * c1 * a2;
  dc.noise = beta * beta / (2.0 * (1.0 + beta)) * L * a2 + 0.5 * L * a2 + 2.0 * c1 * ob / (1.0 + beta) * a2;
  return dc;
}

// ---------------------------------------------------------------------------
// Lyapunov function and pathwise checks
// ---------------------------------------------------------------------------

struct LyapunovSeries {
  std::vector<double> value;       ///< L^k for k = 1..K+1
  std::vector<double> tail_bound;  ///< bound on the truncated history contribution
  std::size_t horizon = 0;
};

/// L^k = f(z^k) - f* + sum_{i=1}^{min(k-1,H)} c_i |x^{k+1-i} - x^{k-i}|^2.
inline LyapunovSeries lyapunov_values(const ProblemSpec& p, const Trajectory& tr, const CoefficientSet& cs, const std::vector<Vec>& z) {
  detail::require_full(tr, "lyapunov_values");
  const std::int64_t K = tr.steps;
  if (z.size() != static_cast<std::size_t>(K + 1)) throw std::invalid_argument("lyapunov_values: z length mismatch");
  std::vector<double> step(static_cast<std::size_t>(K));  // step[j-1] = |x^{j+1} - x^j|^2
  for (std::int64_t j = 1; j <= K; ++j) step[static_cast<std::size_t>(j - 1)] = (tr.x_at(j + 1) - tr.x_at(j)).squaredNorm();
  const double tail = static_cast<double>(cs.tail_sum_bound());
  LyapunovSeries out;
  out.horizon = cs.H;
  double max_step = 0.0;
  for (std::int64_t k = 1; k <= K + 1; ++k) {
    double v = objective(p, z[static_cast<std::size_t>(k - 1)]) - p.f_star;
    const std::int64_t top = std::min<std::int64_t>(k - 1, static_cast<std::int64_t>(cs.H));
    for (std::int64_t i = 1; i <= top; ++i) v += cs.at(static_cast<std::size_t>(i)) * step[static_cast<std::size_t>(k - i - 1)];
    if (k >= 2) max_step = std::max(max_step, step[static_cast<std::size_t>(k - 2)]);
    out.value.push_back(v);
    out.tail_bound.push_back(k - 1 > static_cast<std::int64_t>(cs.H) ? tail * max_step : 0.0);
  }
  return out;
}

/// Realized gradient-deviation check for a fixed-parameter run: margin = sum a_{k,i}|dx_i|^2 - |EMA_k(g) - g^k|^2.
inline std::vector<CheckResult> check_deviation_pathwise(const Trajectory& tr, double beta, double L, double rel_tol = 1e-9) {
  detail::require_full(tr, "check_deviation_pathwise");
  const std::int64_t K = tr.steps;
  std::vector<double> step(static_cast<std::size_t>(K));
  for (std::int64_t j = 1; j <= K; ++j) step[static_cast<std::size_t>(j - 1)] = (tr.x_at(j + 1) - tr.x_at(j)).squaredNorm();
  std::vector<CheckResult> out;
  const Eigen::Index d = tr.x0.size();
  Vec ema(d);
  for (std::int64_t k = 1; k <= K; ++k) {
    const Vec& gk = tr.records[static_cast<std::size_t>(k - 1)].g;
    double lhs = 0.0, rhs = 0.0;
    if (k >= 2 && beta > 0.0) {
      ema.setZero();
      for (std::int64_t i = 1; i <= k; ++i)
        ema += std::pow(beta, static_cast<double>(k - i)) * tr.records[static_cast<std::size_t>(i - 1)].g;
      ema *= (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(k)));
      lhs = (ema - gk).squaredNorm();
      const std::vector<double> a = dev_coeffs_a(k, beta, L);
      for (std::int64_t i = 1; i < k; ++i) rhs += a[static_cast<std::size_t>(i - 1)] * step[static_cast<std::size_t>(i - 1)];
    }
    const double margin = rhs - lhs;
    out.push_back({"lemma2", k, lhs, rhs, margin, margin >= -rel_tol * rhs});
  }
  return out;
}

/// Multistage chain |EMA_k(g)/(1-prod b) - g^k|^2 <= sum d_{k,i}|dx_i|^2 <= sum a_{k,i}|dx_i|^2.
inline std::vector<CheckResult> check_deviation_pathwise_multistage(const Trajectory& tr, double L, double rel_tol = 1e-9) {
  detail::require_full(tr, "check_deviation_pathwise_multistage");
  const std::int64_t K = tr.steps;
  const std::vector<double> betas = tr.schedule.beta_per_iteration();
  std::vector<double> step(static_cast<std::size_t>(K));
  for (std::int64_t j = 1; j <= K; ++j) step[static_cast<std::size_t>(j - 1)] = (tr.x_at(j + 1) - tr.x_at(j)).squaredNorm();
  std::vector<CheckResult> out;
  Vec ema(tr.x0.size());
  for (std::int64_t k = 2; k <= K; ++k) {
    const double prod = beta_product(betas, k);
    const std::vector<double> b = multistage_weights_b(betas, k);
    ema.setZero();
    for (std::int64_t i = 1; i <= k; ++i) ema += b[static_cast<std::size_t>(i - 1)] * tr.records[static_cast<std::size_t>(i - 1)].g;
    ema /= (1.0 - prod);
    const double lhs = (ema - tr.records[static_cast<std::size_t>(k - 1)].g).squaredNorm();
    const MultistageDeviation dev = multistage_dev_coeffs(betas, k, L);
    double rd = 0.0, ra = 0.0;
    for (std::int64_t i = 1; i < k; ++i) {
      rd += dev.d[static_cast<std::size_t>(i - 1)] * step[static_cast<std::size_t>(i - 1)];
      ra += dev.a[static_cast<std::size_t>(i - 1)] * step[static_cast<std::size_t>(i - 1)];
    }
    out.push_back({"lemma2_ms_d", k, lhs, rd, rd - lhs, rd - lhs >= -rel_tol * rd});
    out.push_back({"lemma2_ms_a", k, rd, ra, ra - rd, ra - rd >= -rel_tol * ra});
  }
  return out;
}

/// Relative EMA residual |m^k - sum b_{k,i} g~^i| / (sum b_{k,i}|g~^i| + eps) for k = 1..K.
inline std::vector<double> ema_residuals(const Trajectory& tr, double eps = 1e-300) {
  detail::require_full(tr, "ema_residuals");
  const std::vector<double> betas = tr.schedule.beta_per_iteration();
  std::vector<double> out;
  Vec acc(tr.x0.size());
  for (std::int64_t k = 1; k <= tr.steps; ++k) {
    const std::vector<double> b = multistage_weights_b(betas, k);
    acc.setZero();
    double scale = 0.0;
    for (std::int64_t i = 1; i <= k; ++i) {
      const Vec& gt = tr.records[static_cast<std::size_t>(i - 1)].gtilde;
      acc += b[static_cast<std::size_t>(i - 1)] * gt;
      scale += b[static_cast<std::size_t>(i - 1)] * gt.norm();
    }
    out.push_back((tr.records[static_cast<std::size_t>(k - 1)].m - acc).norm() / (scale + eps));
  }
  return out;
}

/// |sum_i b_{k,i} - (1 - prod beta(i))| / (1 - prod beta(i)) for k = 1..K.
inline std::vector<double> weight_sum_residuals(std::span<const double> betas) {
  std::vector<double> out;
  for (std::int64_t k = 1; k <= static_cast<std::int64_t>(betas.size()); ++k) {
    const std::vector<double> b = multistage_weights_b(betas, k);
    double s = 0.0;
    for (double v : b) s += v;
    const double target = 1.0 - beta_product(betas, k);
    out.push_back(target > 0.0 ? std::abs(s - target) / target : std::abs(s));
  }
  return out;
}

/// (1-b) sum_{i=2}^k b^{k-i} z^i + b^{k-1} z^1, with z[0] = z^1.
inline Vec reconstruct_x_from_z(const std::vector<Vec>& z, double beta, std::int64_t k) {
  if (k < 1 || k > static_cast<std::int64_t>(z.size())) throw std::invalid_argument("reconstruct_x_from_z: k outside the z history");
  Vec x = std::pow(beta, static_cast<double>(k - 1)) * z[0];
  for (std::int64_t i = 2; i <= k; ++i) x += (1.0 - beta) * std::pow(beta, static_cast<double>(k - i)) * z[static_cast<std::size_t>(i - 1)];
  return x;
}

/// |x^k - reconstruction| / (1 + |x^k|) for k = 1..K+1; fixed-parameter runs only.
inline std::vector<double> reconstruction_residuals(const Trajectory& tr, const std::vector<Vec>& z, double beta) {
  detail::require_full(tr, "reconstruction_residuals");
  if (tr.schedule.size() != 1) throw std::invalid_argument("reconstruct_x_from_z: fixed-parameter trajectory required");
  std::vector<double> out;
  // running form of the same convex combination keeps this O(K d)
  Vec xr = z[0];
  out.push_back((xr - tr.x_at(1)).norm() / (1.0 + tr.x_at(1).norm()));
  for (std::int64_t k = 2; k <= tr.steps + 1; ++k) {
    xr = beta * xr + (1.0 - beta) * z[static_cast<std::size_t>(k - 1)];
    out.push_back((xr - tr.x_at(k)).norm() / (1.0 + tr.x_at(k).norm()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form bounds
// ---------------------------------------------------------------------------

/// 2 gap/(k a) + ((b + 5b^2)/(8(1+b)) + 1) L a sigma^2
inline double bound_theorem1(double f1_gap, std::int64_t k, double alpha, double beta, double L, double sigma2) {
  return 2.0 * f1_gap / (static_cast<double>(k) * alpha) + ((beta + 5.0 * beta * beta) / (8.0 * (1.0 + beta)) + 1.0) * L * alpha * sigma2;
}

/// Same bound with the constant (b + 3b^2)/(2(1+b)) obtained by telescoping the stepwise descent.
inline double bound_theorem1_telescoped(double f1_gap, std::int64_t k, double alpha, double beta, double L, double sigma2) {
  return 2.0 * f1_gap / (static_cast<double>(k) * alpha) + ((beta + 3.0 * beta * beta) / (2.0 * (1.0 + beta)) + 1.0) * L * alpha * sigma2;
}

/// Contraction factor 1 - a mu / (1 + 8 mu / L).
inline double theorem2_rate(double alpha, double L, double mu) { return 1.0 - alpha * mu / (1.0 + 8.0 * mu / L); }

/// Stationary part of the strongly convex bound.
inline double theorem2_stationary(double alpha, double beta, double L, double mu, double sigma2) {
  const double kappa = 1.0 + 8.0 * mu / L;
  return kappa * ((1.0 + beta + beta * beta) / (2.0 * (1.0 + beta)) * (L / mu) * alpha * sigma2 +
                  (1.0 / (1.0 + beta)) * (12.0 * std::sqrt(beta) / 25.0) * (2.0 * L + 18.0 * mu) / mu * alpha * sigma2 +
                  (beta * beta + L * alpha * beta * beta / 10.0) / kappa * 2.0 / (1.0 + beta) * alpha * sigma2);
}

/// (1 - a mu/(1+8mu/L))^{k-k0} L^{k0} + stationary terms.
inline double bound_theorem2(double L0_at_k0, std::int64_t k, std::int64_t k0, double alpha, double beta, double L, double mu, double sigma2) {
  if (k < k0) throw std::invalid_argument("bound_theorem2: k must be >= k0");
  return std::pow(theorem2_rate(alpha, L, mu), static_cast<double>(k - k0)) * L0_at_k0 + theorem2_stationary(alpha, beta, L, mu, sigma2);
}

/// Variant keeping 2 c_1 (1-b)/((1+b) mu) a sigma^2 in place of its closed-form estimate.
inline double bound_theorem2_with_c1(double L0_at_k0, std::int64_t k, std::int64_t k0, double alpha, double beta, double L, double mu,
                                     double sigma2, double c1) {
  if (k < k0) throw std::invalid_argument("bound_theorem2: k must be >= k0");
  const double kappa = 1.0 + 8.0 * mu / L;
  const double stat = kappa * ((1.0 + beta + beta * beta) / (2.0 * (1.0 + beta)) * (L / mu) * alpha * sigma2 +
                               (1.0 - beta) / (1.0 + beta) * 2.0 * c1 / mu * alpha * sigma2 +
                               (beta * beta + L * alpha * beta * beta / 10.0) / kappa * 2.0 / (1.0 + beta) * alpha * sigma2);
  return std::pow(theorem2_rate(alpha, L, mu), static_cast<double>(k - k0)) * L0_at_k0 + stat;
}

/// r = max{1 - a mu, b}.
inline double corollary1_rate(double alpha, double beta, double mu) { return std::max(1.0 - alpha * mu, beta); }

/// 2 gap/(n A2) + (1/n) sum_l (24 b_l^2 b_1 / sqrt(b_n + b_n^2) L + 3L) a_l sigma^2
inline double bound_theorem3(double f1_gap, const Schedule& s, double L, double sigma2) {
  const double n = static_cast<double>(s.size());
  const double b1 = s.front().beta, bn = s.back().beta;
  const double spread = bn > 0.0 ? b1 / std::sqrt(bn + bn * bn) : 0.0;
  double acc = 0.0;
  for (const Stage& st : s.stages()) acc += (24.0 * st.beta * st.beta * spread * L + 3.0 * L) * st.alpha * sigma2;
  return 2.0 * f1_gap / (n * s.A2()) + acc / n;
}

/// (1/n) sum_l (1/T_l) sum_{i in stage l} |g^i|^2 from per-iteration squared gradient norms.
inline double staged_gradient_aggregate(std::span<const double> grad_norm_sq, const Schedule& s) {
  if (static_cast<std::int64_t>(grad_norm_sq.size()) < s.total_length()) throw std::invalid_argument("staged aggregate: series shorter than the schedule");
  double total = 0.0;
  std::size_t pos = 0;
  for (const Stage& st : s.stages()) {
    double acc = 0.0;
    for (std::int64_t t = 0; t < st.length; ++t) acc += grad_norm_sq[pos++];
    total += acc / static_cast<double>(st.length);
  }
  return total / static_cast<double>(s.size());
}

inline double staged_gradient_aggregate(const Trajectory& tr) {
  std::vector<double> g;
  for (const SummaryRow& r : tr.summary) g.push_back(r.grad_norm_sq);
  return staged_gradient_aggregate(g, tr.schedule);
}

}  // namespace sgdm
