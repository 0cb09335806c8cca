#pragma once

#include "sgdm/diagnostics.hpp"
#include "sgdm/optimizers.hpp"
#include "sgdm/problems.hpp"
#include "sgdm/schedule.hpp"
#include "sgdm/theory.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sgdm {

/// Per-column running mean and centered second moment.
struct MomentTable {
  std::size_t n = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  explicit MomentTable(std::size_t width = 0) : mean(width, 0.0), m2(width, 0.0) {}

  std::size_t width() const { return mean.size(); }

  void push(std::span<const double> x) {
    ++n;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double delta = x[j] - mean[j];
      mean[j] += delta * inv;
      m2[j] += delta * (x[j] - mean[j]);
    }
  }

  /// Chan et al. pairwise combination.
  void merge(const MomentTable& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double delta = o.mean[j] - mean[j];
      mean[j] += delta * nb / nt;
      m2[j] += o.m2[j] + delta * delta * na * nb / nt;
    }
    n += o.n;
  }

  double var(std::size_t j) const { return n > 1 ? m2[j] / static_cast<double>(n - 1) : 0.0; }
  double sd(std::size_t j) const { return std::sqrt(var(j)); }
  double se(std::size_t j) const { return n > 0 ? std::sqrt(var(j) / static_cast<double>(n)) : 0.0; }
};

inline constexpr std::size_t kMcBlock = 64;

inline unsigned default_workers() {
  const unsigned h = std::thread::hardware_concurrency();
  return h == 0 ? 1 : h;
}

/**
 * Runs fn(seed, row) for seeds base_seed .. base_seed + n_trials - 1 and aggregates the rows.
 * Trials are grouped in fixed blocks of 64 and blocks are merged pairwise in index order,
 * so the result does not depend on the number of workers.
 */
template <class TrialFn>
MomentTable mc_collect(std::size_t n_trials, std::uint64_t base_seed, std::size_t width, TrialFn&& fn, unsigned workers = 0) {
  const std::size_t nblocks = (n_trials + kMcBlock - 1) / kMcBlock;
  std::vector<MomentTable> blocks(nblocks, MomentTable(width));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    std::vector<double> row(width);
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= nblocks) return;
      try {
        const std::size_t lo = b * kMcBlock, hi = std::min(n_trials, lo + kMcBlock);
        for (std::size_t t = lo; t < hi; ++t) {
          std::fill(row.begin(), row.end(), 0.0);
          fn(base_seed + t, row);
          blocks[b].push(row);
        }
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next.store(nblocks);
        return;
      }
    }
  };
  if (workers == 0) workers = default_workers();
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(nblocks, 1)));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);
  while (blocks.size() > 1) {
    std::vector<MomentTable> merged;
    for (std::size_t i = 0; i + 1 < blocks.size(); i += 2) {
      blocks[i].merge(blocks[i + 1]);
      merged.push_back(std::move(blocks[i]));
    }
    if (blocks.size() % 2 == 1) merged.push_back(std::move(blocks.back()));
    blocks = std::move(merged);
  }
  return blocks.empty() ? MomentTable(width) : std::move(blocks.front());
}

struct McOptions {
  std::size_t n_mc = 2000;
  std::uint64_t seed = 1;
  unsigned workers = 0;
  double slack_se = 4.0;
};

namespace detail {
inline void require_completed(RunStatus s, std::uint64_t seed) {
  if (s != RunStatus::completed)
    throw std::runtime_error(std::string("Monte Carlo trial with seed ") + std::to_string(seed) + " stopped early: " + to_string(s));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Momentum variance
// ---------------------------------------------------------------------------

struct MomentumVarianceResult {
  std::vector<double> estimate;  ///< E|m^k - sum b_{k,i} g^i|^2, k = 1..K
  std::vector<double> se;
  std::vector<double> bound;           ///< fixed beta: (1-b)/(1+b)(1-b^{2k}) sigma^2; multistage: 2(1-b_1) sigma^2
  std::vector<double> bound_previous;  ///< multistage only: 24 b_1/sqrt(b_n+b_n^2) sigma^2 (1 - beta(k)) for m^{k-1}
  double sigma2 = 0.0;
  std::size_t n_mc = 0;
  bool exact_noise = false;  ///< additive noise: the fixed-beta bound is attained

  /// estimate <= bound (1 + 4/sqrt(n)) and, under exact noise, estimate >= bound (1 - 4/sqrt(n)).
  std::vector<CheckResult> rows(const std::string& name = "lemma1") const {
    std::vector<CheckResult> out;
    const double rel = 4.0 / std::sqrt(static_cast<double>(n_mc));
    const bool fixed = bound_previous.empty();
    for (std::size_t i = 0; i < estimate.size(); ++i) {
      const auto k = static_cast<std::int64_t>(i + 1);
      const double hi = bound[i] * (1.0 + rel);
      bool pass = estimate[i] <= hi;
      if (fixed && exact_noise) pass = pass && estimate[i] >= bound[i] * (1.0 - rel);
      out.push_back({name, k, estimate[i], bound[i], bound[i] - estimate[i], pass});
      if (!fixed && i >= 1) {
        const double prev = estimate[i - 1];
        const double b5 = bound_previous[i];
        out.push_back({name + "_prev", k, prev, b5, b5 - prev, prev <= b5 * (1.0 + rel)});
      }
    }
    return out;
  }
};

/// MC estimate of the momentum deviation from the EMA of true gradients along the schedule.
inline MomentumVarianceResult mc_momentum_variance(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, const Schedule& sched,
                                                   const McOptions& opt) {
  if (opt.n_mc < 2) throw std::invalid_argument("mc_momentum_variance: n_mc must be >= 2");
  const auto K = static_cast<std::size_t>(sched.total_length());
  auto trial = [&](std::uint64_t seed, std::vector<double>& row) {
    GradientOracle oracle(p, nm);
    Rng rng(seed);
    Vec e = Vec::Zero(p.d);
    auto obs = [&](const StepView& s) {
      e *= s.beta;
      e.noalias() += (1.0 - s.beta) * s.g;
      row[static_cast<std::size_t>(s.k - 1)] = (s.m - e).squaredNorm();
    };
    std::int64_t steps = 0;
    detail::require_completed(simulate(p, oracle, sched, x0, rng, obs, {false}, &steps), seed);
  };
  const MomentTable t = mc_collect(opt.n_mc, opt.seed, K, trial, opt.workers);
  MomentumVarianceResult r;
  r.sigma2 = nm.sigma2_certificate;
  r.n_mc = opt.n_mc;
  r.exact_noise = nm.kind == NoiseKind::additive_gaussian;
  const bool fixed = sched.size() == 1;
  const double b1 = sched.front().beta, bn = sched.back().beta;
  const std::vector<double> betas = sched.beta_per_iteration();
  for (std::size_t i = 0; i < K; ++i) {
    r.estimate.push_back(t.mean[i]);
    r.se.push_back(t.se(i));
    if (fixed) {
      const double b = b1;
      r.bound.push_back((1.0 - b) / (1.0 + b) * (1.0 - std::pow(b, 2.0 * static_cast<double>(i + 1))) * r.sigma2);
    } else {
      r.bound.push_back(2.0 * (1.0 - b1) * r.sigma2);
      const double spread = bn > 0.0 ? b1 / std::sqrt(bn + bn * bn) : 0.0;
      r.bound_previous.push_back(24.0 * spread * r.sigma2 * (1.0 - betas[i]));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Stepwise descent and the nonconvex bound
// ---------------------------------------------------------------------------

struct DescentResult {
  CoefficientSet coeffs;
  DescentCoefficients dc;
  double sigma2 = 0.0;
  double f1_gap = 0.0;
  std::size_t n_mc = 0;
  double slack_se = 4.0;
  std::vector<double> dL, dL_se, gsq, rhs, margin, margin_se;  ///< per k = 1..K
  std::vector<double> avg_gsq, avg_gsq_se, thm1, thm1_telescoped;

  std::vector<CheckResult> descent_rows() const {
    std::vector<CheckResult> out;
    for (std::size_t i = 0; i < dL.size(); ++i)
      out.push_back({"descent", static_cast<std::int64_t>(i + 1), dL[i], rhs[i], margin[i], margin[i] + slack_se * margin_se[i] >= 0.0});
    return out;
  }
  std::vector<CheckResult> thm1_rows(const std::vector<std::int64_t>& ks) const {
    std::vector<CheckResult> out;
    for (std::int64_t k : ks) {
      const auto i = static_cast<std::size_t>(k - 1);
      const double m = thm1[i] - avg_gsq[i];
      out.push_back({"thm1", k, avg_gsq[i], thm1[i], m, m + slack_se * avg_gsq_se[i] >= 0.0});
    }
    return out;
  }
};

/// MC check of E[L^{k+1} - L^k] against the stepwise descent bound, plus running gradient averages.
inline DescentResult mc_descent_check(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, double alpha, double beta, std::int64_t K,
                                      const McOptions& opt) {
  if (K < 1) throw std::invalid_argument("mc_descent_check: K must be >= 1");
  const double cap = max_stepsize_nonconvex(beta, p.L);
  if (alpha > cap * (1.0 + 1e-12)) throw std::invalid_argument("mc_descent_check: alpha exceeds the nonconvex cap");
  DescentResult r;
  r.coeffs = c_sequence_nonconvex(alpha, beta, p.L);
  r.dc = descent_coefficients(alpha, beta, p.L, r.coeffs.c1());
  r.sigma2 = nm.sigma2_certificate;
  r.f1_gap = objective(p, x0) - p.f_star;
  r.n_mc = opt.n_mc;
  r.slack_se = opt.slack_se;
  const auto Ks = static_cast<std::size_t>(K);
  const Schedule sched = Schedule::constant(alpha, beta, K);
  std::vector<double> c(r.coeffs.c.begin(), r.coeffs.c.end());
  const std::size_t H = c.size();
  const double gc = r.dc.grad, nc = r.dc.noise * r.sigma2;

  auto trial = [&](std::uint64_t seed, std::vector<double>& row) {
    GradientOracle oracle(p, nm);
    Rng rng(seed);
    std::vector<Vec> xs(Ks + 1);
    std::vector<double> gsq(Ks);
    xs[0] = x0;
    auto obs = [&](const StepView& s) {
      xs[static_cast<std::size_t>(s.k)] = s.x_next;
      gsq[static_cast<std::size_t>(s.k - 1)] = s.g.squaredNorm();
    };
    detail::require_completed(simulate(p, oracle, sched, x0, rng, obs, {false}), seed);
    std::vector<double> step(Ks), Lk(Ks + 1);
    for (std::size_t j = 0; j < Ks; ++j) step[j] = (xs[j + 1] - xs[j]).squaredNorm();
    for (std::size_t k = 1; k <= Ks + 1; ++k) {
      const Vec z = k == 1 ? xs[0] : Vec((xs[k - 1] - beta * xs[k - 2]) / (1.0 - beta));
      double v = objective(p, z) - p.f_star;
      const std::size_t top = std::min(k - 1, H);
      for (std::size_t i = 1; i <= top; ++i) v += c[i - 1] * step[k - i - 1];
      Lk[k - 1] = v;
    }
    double run = 0.0;
    for (std::size_t i = 0; i < Ks; ++i) {
      const double dl = Lk[i + 1] - Lk[i];
      run += gsq[i];
      row[i] = dl;
      row[Ks + i] = gsq[i];
      row[2 * Ks + i] = gc * gsq[i] + nc - dl;
      row[3 * Ks + i] = run / static_cast<double>(i + 1);
    }
  };
  const MomentTable t = mc_collect(opt.n_mc, opt.seed, 4 * Ks, trial, opt.workers);
  for (std::size_t i = 0; i < Ks; ++i) {
    r.dL.push_back(t.mean[i]);
    r.dL_se.push_back(t.se(i));
    r.gsq.push_back(t.mean[Ks + i]);
    r.rhs.push_back(gc * t.mean[Ks + i] + nc);
    r.margin.push_back(t.mean[2 * Ks + i]);
    r.margin_se.push_back(t.se(2 * Ks + i));
    r.avg_gsq.push_back(t.mean[3 * Ks + i]);
    r.avg_gsq_se.push_back(t.se(3 * Ks + i));
    const auto k = static_cast<std::int64_t>(i + 1);
    r.thm1.push_back(bound_theorem1(r.f1_gap, k, alpha, beta, p.L, r.sigma2));
    r.thm1_telescoped.push_back(bound_theorem1_telescoped(r.f1_gap, k, alpha, beta, p.L, r.sigma2));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Strongly convex bound
// ---------------------------------------------------------------------------

struct StronglyConvexResult {
  CoefficientSet coeffs;
  std::int64_t k0 = 0;
  double sigma2 = 0.0;
  double stationary = 0.0;
  double L_k0 = 0.0;  ///< MC mean of L^{k0}
  double L_k0_se = 0.0;
  std::size_t n_mc = 0;
  double slack_se = 4.0;
  std::vector<double> fz_gap, fz_se;  ///< E[f(z^k) - f*], k = 1..K
  std::vector<double> fx_gap, fx_se;  ///< E[f(x^k) - f*]
  std::vector<double> bound;          ///< evaluated at the MC mean of L^{k0}, k >= k0
  std::vector<double> margin, margin_se;
  double corollary_rate = 0.0;
  double fitted_slope = 0.0;
  double plateau = 0.0;
  std::int64_t fit_begin = 0, fit_end = 0;

  std::vector<CheckResult> rows() const {
    std::vector<CheckResult> out;
    for (std::size_t i = static_cast<std::size_t>(k0 - 1); i < fz_gap.size(); ++i)
      out.push_back({"thm2", static_cast<std::int64_t>(i + 1), fz_gap[i], bound[i], margin[i], margin[i] + slack_se * margin_se[i] >= 0.0});
    return out;
  }
  CheckResult corollary_row() const {
    const double lr = std::log(corollary_rate);
    return {"thm2_rate", fit_end, fitted_slope, lr, lr - fitted_slope, fitted_slope <= lr && fit_end > fit_begin + 1};
  }
};

/// Least-squares slope of log(e_k - plateau) over the transient where e_k - plateau >= 10 plateau.
inline void fit_transient(StronglyConvexResult& r) {
  const std::size_t K = r.fx_gap.size();
  const std::size_t tail = std::max<std::size_t>(1, K / 10);
  double plateau = 0.0;
  for (std::size_t i = K - tail; i < K; ++i) plateau += r.fx_gap[i];
  plateau /= static_cast<double>(tail);
  r.plateau = plateau;
  const std::size_t begin = static_cast<std::size_t>(std::max<std::int64_t>(r.k0, 1)) - 1;
  std::size_t end = begin;
  while (end < K && r.fx_gap[end] - plateau >= 10.0 * plateau) ++end;
  r.fit_begin = static_cast<std::int64_t>(begin + 1);
  r.fit_end = static_cast<std::int64_t>(end);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    const double x = static_cast<double>(i + 1), y = std::log(r.fx_gap[i] - plateau);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  r.fitted_slope = n >= 2 ? (n * sxy - sx * sy) / (n * sxx - sx * sx) : 0.0;
}

inline StronglyConvexResult mc_theorem2(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, double alpha, double beta, std::int64_t K,
                                  const McOptions& opt) {
  if (!(p.mu > 0.0)) throw std::invalid_argument("mc_theorem2: strongly convex problem required");
  StronglyConvexResult r;
  r.coeffs = scvx_constants(alpha, beta, p.L, p.mu);
  r.k0 = std::max(k0(beta), 1);
  if (K < r.k0) throw std::invalid_argument("mc_theorem2: K must be >= k0");
  r.sigma2 = nm.sigma2_certificate;
  r.stationary = theorem2_stationary(alpha, beta, p.L, p.mu, r.sigma2);
  r.n_mc = opt.n_mc;
  r.slack_se = opt.slack_se;
  r.corollary_rate = corollary1_rate(alpha, beta, p.mu);
  const double q = theorem2_rate(alpha, p.L, p.mu);
  const auto Ks = static_cast<std::size_t>(K);
  const auto k0s = static_cast<std::size_t>(r.k0);
  const double A1 = alpha * beta / (1.0 - beta);
  const Schedule sched = Schedule::constant(alpha, beta, K);
  std::vector<double> c(r.coeffs.c.begin(), r.coeffs.c.begin() + static_cast<std::ptrdiff_t>(std::min(k0s, r.coeffs.c.size())));
  std::vector<double> decay(Ks, 0.0);
  for (std::size_t k = k0s; k <= Ks; ++k) decay[k - 1] = std::pow(q, static_cast<double>(k - k0s));

  auto trial = [&](std::uint64_t seed, std::vector<double>& row) {
    GradientOracle oracle(p, nm);
    Rng rng(seed);
    std::vector<double> step;
    double Lk0 = 0.0;
    Vec z(p.d);
    auto obs = [&](const StepView& s) {
      const auto i = static_cast<std::size_t>(s.k - 1);
      z = s.x;
      z.noalias() -= A1 * s.m_prev;
      const double fz = objective(p, z) - p.f_star;
      row[i] = fz;
      row[Ks + i] = s.f - p.f_star;
      if (i + 1 == k0s) {
        Lk0 = fz;
        for (std::size_t j = 1; j < k0s && j <= c.size(); ++j) Lk0 += c[j - 1] * step[k0s - j - 1];
      }
      if (step.size() < k0s) step.push_back((s.x_next - s.x).squaredNorm());
    };
    detail::require_completed(simulate(p, oracle, sched, x0, rng, obs, {true}), seed);
    for (std::size_t i = k0s - 1; i < Ks; ++i) row[2 * Ks + i] = decay[i] * Lk0 + r.stationary - row[i];
    row[3 * Ks] = Lk0;
  };
  const MomentTable t = mc_collect(opt.n_mc, opt.seed, 3 * Ks + 1, trial, opt.workers);
  r.L_k0 = t.mean[3 * Ks];
  r.L_k0_se = t.se(3 * Ks);
  for (std::size_t i = 0; i < Ks; ++i) {
    r.fz_gap.push_back(t.mean[i]);
    r.fz_se.push_back(t.se(i));
    r.fx_gap.push_back(t.mean[Ks + i]);
    r.fx_se.push_back(t.se(Ks + i));
    r.bound.push_back(i + 1 >= k0s ? decay[i] * r.L_k0 + r.stationary : 0.0);
    r.margin.push_back(t.mean[2 * Ks + i]);
    r.margin_se.push_back(t.se(2 * Ks + i));
  }
  fit_transient(r);
  return r;
}

// ---------------------------------------------------------------------------
// Multistage bound
// ---------------------------------------------------------------------------

struct MultistageBoundResult {
  double aggregate = 0.0;  ///< MC mean of (1/n) sum_l (1/T_l) sum_{stage l} |g^i|^2
  double aggregate_se = 0.0;
  double bound = 0.0;
  std::vector<double> stage_means;
  std::size_t n_mc = 0;
  double slack_se = 4.0;

  CheckResult row() const {
    const double m = bound - aggregate;
    return {"thm3", 0, aggregate, bound, m, m + slack_se * aggregate_se >= 0.0};
  }
};

inline MultistageBoundResult mc_theorem3(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, const Schedule& sched, const McOptions& opt) {
  const std::size_t n = sched.size();
  const auto K = static_cast<std::size_t>(sched.total_length());
  auto trial = [&](std::uint64_t seed, std::vector<double>& row) {
    GradientOracle oracle(p, nm);
    Rng rng(seed);
    std::vector<double> gsq(K);
    auto obs = [&](const StepView& s) { gsq[static_cast<std::size_t>(s.k - 1)] = s.g.squaredNorm(); };
    detail::require_completed(simulate(p, oracle, sched, x0, rng, obs, {false}), seed);
    row[0] = staged_gradient_aggregate(gsq, sched);
    std::size_t pos = 0;
    for (std::size_t l = 0; l < n; ++l) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < sched[l].length; ++t) acc += gsq[pos++];
      row[1 + l] = acc / static_cast<double>(sched[l].length);
    }
  };
  const MomentTable t = mc_collect(opt.n_mc, opt.seed, 1 + n, trial, opt.workers);
  MultistageBoundResult r;
  r.aggregate = t.mean[0];
  r.aggregate_se = t.se(0);
  r.bound = bound_theorem3(objective(p, x0) - p.f_star, sched, p.L, nm.sigma2_certificate);
  for (std::size_t l = 0; l < n; ++l) r.stage_means.push_back(t.mean[1 + l]);
  r.n_mc = opt.n_mc;
  r.slack_se = opt.slack_se;
  return r;
}

}  // namespace sgdm
