#pragma once

#include "sgdm/diagnostics.hpp"
#include "sgdm/harness.hpp"
#include "sgdm/montecarlo.hpp"
#include "sgdm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace sgdm {

inline const std::vector<std::string>& verify_check_ids() {
  static const std::vector<std::string> ids{"identity_z", "ema",      "weights",   "lemma1",   "lemma2", "dominance_da", "coeffs_nc",
                                            "coeffs_ms",  "coeffs_sc", "descent", "thm1",     "thm2",   "thm3",         "reconstruct_x"};
  return ids;
}

/// Splits a comma list of check ids; "all" expands to every id. Unknown ids throw ConfigError.
inline std::vector<std::string> parse_check_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string tok;
  const auto& ids = verify_check_ids();
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    if (tok == "all") {
      for (const auto& id : ids)
        if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
      continue;
    }
    if (std::find(ids.begin(), ids.end(), tok) == ids.end()) throw ConfigError("--check", "unknown check '" + tok + "'");
    if (std::find(out.begin(), out.end(), tok) == out.end()) out.push_back(tok);
  }
  if (out.empty()) throw ConfigError("--check", "no checks given");
  return out;
}

/// diag(1, 10) quadratic, additive noise sigma^2 = 1, x1 = (1, 1).
inline json default_verify_json() {
  return {{"name", "verify"}, {"problem", {{"kind", "quadratic"}, {"diag", {1.0, 10.0}}}}, {"noise", {{"kind", "additive_gaussian"}, {"sigma2", 1.0}}}};
}

inline ExperimentConfig default_verify_config() { return parse_config(default_verify_json()); }

/// Everything the suite derives from a config once.
struct VerifySetup {
  ProblemSpec p;
  NoiseModel nm;
  Vec x0;
  VerifyConfig v;
  double alpha = 0.0;     ///< nonconvex-regime step
  double alpha_sc = 0.0;  ///< strongly convex step (0 when mu = 0)
  Schedule ms;            ///< theoretical-regime multistage plan
};

inline VerifySetup make_verify_setup(const ExperimentConfig& cfg) {
  VerifySetup s;
  s.p = build_problem(cfg.problem);
  s.x0 = initial_point(cfg, s.p);
  s.nm = build_noise(cfg.noise, s.p, s.x0);
  s.v = cfg.verify;
  const double beta = s.v.beta;
  s.alpha = s.v.alpha ? *s.v.alpha : 0.5 * max_stepsize_nonconvex(beta, s.p.L);
  if (s.p.mu > 0.0) s.alpha_sc = s.v.alpha_sc ? *s.v.alpha_sc : 0.5 * max_stepsize_strongly_convex(beta, s.p.L, s.p.mu);
  const double A1 = theoretical_a1(s.p.L);
  s.ms = plan_from_lengths(A1, s.v.a2_over_a1 * A1, s.v.lengths);
  return s;
}

namespace detail {

inline double max_or_zero(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }

/// Adds one row per run holding the worst residual against `tol`.
inline void add_residual_row(DiagnosticsReport& r, const std::string& name, std::int64_t id, double worst, double tol) {
  r.add({name, id, worst, tol, tol - worst, worst <= tol});
}

struct IdentityRuns {
  std::vector<Trajectory> fixed, staged;
};

inline IdentityRuns identity_runs(const VerifySetup& s) {
  IdentityRuns out;
  for (std::uint64_t t = 0; t < 5; ++t) {
    out.fixed.push_back(run_sgdm(s.p, s.nm, s.x0, s.alpha, s.v.beta, s.v.K_identity, s.v.seed + t));
    out.staged.push_back(run_multistage(s.p, s.nm, s.x0, s.ms, s.v.seed + t));
  }
  return out;
}

/// Random monotone plan: 1-4 stages, lengths 1-10, sorted betas in [0, 0.95).
inline std::vector<double> random_monotone_betas(Rng& rng) {
  std::uniform_int_distribution<int> ns(1, 4), len(1, 10);
  std::uniform_real_distribution<double> ub(0.0, 0.95);
  const int n = ns(rng);
  std::vector<double> b(static_cast<std::size_t>(n));
  for (double& x : b) x = ub(rng);
  std::sort(b.begin(), b.end());
  std::vector<double> per;
  for (double x : b)
    for (int t = len(rng); t > 0; --t) per.push_back(x);
  return per;
}

}  // namespace detail

/// Runs the requested checks; each contributes per-k or per-run rows and one summary.
inline DiagnosticsReport run_verify(const ExperimentConfig& cfg, const std::vector<std::string>& checks, unsigned workers = 0) {
  const VerifySetup s = make_verify_setup(cfg);
  const VerifyConfig& v = s.v;
  const double beta = v.beta, L = s.p.L, mu = s.p.mu;
  auto wants = [&](const char* id) { return std::find(checks.begin(), checks.end(), id) != checks.end(); };
  McOptions mc;
  mc.n_mc = v.n_mc;
  mc.seed = v.seed;
  mc.workers = workers;

  DiagnosticsReport rep;
  rep.info["L"] = L;
  rep.info["mu"] = mu;
  rep.info["sigma2"] = s.nm.sigma2_certificate;
  rep.info["beta"] = beta;
  rep.info["alpha"] = s.alpha;
  rep.info["alpha_cap_nonconvex"] = max_stepsize_nonconvex(beta, L);
  rep.info["alpha_cap_nonconvex_statement"] = max_stepsize_nonconvex_statement(beta, L);
  if (mu > 0.0) {
    rep.info["alpha_sc"] = s.alpha_sc;
    rep.info["alpha_cap_strongly_convex"] = max_stepsize_strongly_convex(beta, L, mu);
  }
  rep.info["k0"] = k0(beta);
  rep.info["ms_A1"] = s.ms.A1();
  rep.info["ms_A2"] = s.ms.A2();
  for (std::size_t i = 0; i < s.ms.size(); ++i) rep.info["ms_beta_" + std::to_string(i + 1)] = s.ms[i].beta;
  {
    const ValidationReport vr = validate(s.ms, L, ValidationMode::theoretical);
    rep.info["ms_theoretical_ok"] = vr.theoretical_ok ? 1.0 : 0.0;
  }
  const CoefficientSet nc = c_sequence_nonconvex(s.alpha, beta, L);
  rep.horizon = nc.horizon();

  const bool need_paths = wants("identity_z") || wants("ema") || wants("reconstruct_x");
  detail::IdentityRuns runs;
  if (need_paths) runs = detail::identity_runs(s);

  if (wants("identity_z")) {
    for (const auto& tr : runs.fixed)
      detail::add_residual_row(rep, "identity_z", static_cast<std::int64_t>(tr.seed), detail::max_or_zero(z_identity_residuals(tr, aux_z_fixed(tr, beta))), 1e-10);
    for (const auto& tr : runs.staged)
      detail::add_residual_row(rep, "identity_z", static_cast<std::int64_t>(tr.seed), detail::max_or_zero(z_identity_residuals(tr, aux_z_multistage(tr, s.ms.A1()))),
                               1e-10);
    rep.summarize("identity_z", "rows are runs (k = seed); fixed-beta runs first, then multistage");
  }
  if (wants("ema")) {
    for (const auto* set : {&runs.fixed, &runs.staged})
      for (const auto& tr : *set) detail::add_residual_row(rep, "ema", static_cast<std::int64_t>(tr.seed), detail::max_or_zero(ema_residuals(tr)), 1e-10);
    rep.summarize("ema", "rows are runs (k = seed)");
  }
  if (wants("weights")) {
    const std::vector<double> fixed(static_cast<std::size_t>(v.K_identity), beta);
    const std::vector<double> staged = s.ms.beta_per_iteration();
    detail::add_residual_row(rep, "weights", 1, detail::max_or_zero(weight_sum_residuals(fixed)), 1e-12);
    detail::add_residual_row(rep, "weights", 2, detail::max_or_zero(weight_sum_residuals(staged)), 1e-12);
    rep.summarize("weights", "row 1: fixed beta, row 2: multistage plan");
  }
  if (wants("reconstruct_x")) {
    for (const auto& tr : runs.fixed)
      detail::add_residual_row(rep, "reconstruct_x", static_cast<std::int64_t>(tr.seed),
                               detail::max_or_zero(reconstruction_residuals(tr, aux_z_fixed(tr, beta), beta)), 1e-8);
    rep.summarize("reconstruct_x", "rows are fixed-beta runs (k = seed)");
  }
  if (wants("lemma1")) {
    McOptions m1 = mc;
    m1.n_mc = v.n_mc_lemma1;
    const auto fixed = mc_momentum_variance(s.p, s.nm, s.x0, Schedule::constant(s.alpha, beta, v.K), m1);
    for (auto& row : fixed.rows("lemma1")) rep.add(row);
    rep.summarize("lemma1", s.nm.kind == NoiseKind::additive_gaussian ? "two-sided within 4/sqrt(n_mc)" : "upper bound only");
    const auto staged = mc_momentum_variance(s.p, s.nm, s.x0, s.ms, mc);
    for (auto& row : staged.rows("lemma1_ms")) rep.add(row);
    rep.summarize("lemma1_ms", "multistage: 2(1-beta_1) sigma^2");
    rep.summarize("lemma1_ms_prev", "multistage m^{k-1} bound");
  }
  if (wants("lemma2")) {
    for (std::size_t t = 0; t < v.n_paths; ++t) {
      const Trajectory tr = run_sgdm(s.p, s.nm, s.x0, s.alpha, beta, v.K, v.seed + t);
      for (auto& row : check_deviation_pathwise(tr, beta, L)) rep.add(row);
    }
    rep.summarize("lemma2", std::to_string(v.n_paths) + " fixed-beta runs");
    for (std::size_t t = 0; t < std::min<std::size_t>(v.n_paths, 10); ++t) {
      const Trajectory tr = run_multistage(s.p, s.nm, s.x0, s.ms, v.seed + t);
      for (auto& row : check_deviation_pathwise_multistage(tr, L)) rep.add(row);
    }
    rep.summarize("lemma2_ms_d", "multistage deviation against d");
    rep.summarize("lemma2_ms_a", "d against a");
  }
  if (wants("dominance_da")) {
    Rng rng(v.seed);
    for (std::size_t t = 0; t < v.n_plans; ++t) {
      const std::vector<double> betas = detail::random_monotone_betas(rng);
      const auto K = std::min<std::int64_t>(30, static_cast<std::int64_t>(betas.size()));
      double worst = std::numeric_limits<double>::infinity();
      double wl = 0.0, wr = 0.0;
      bool pass = true;
      for (std::int64_t k = 2; k <= K; ++k) {
        const MultistageDeviation dev = multistage_dev_coeffs(betas, k, L);
        for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(k); ++i) {
          const double m = dev.a[i] - dev.d[i];
          pass = pass && m >= -1e-12 * dev.a[i];
          if (m < worst) {
            worst = m;
            wl = dev.d[i];
            wr = dev.a[i];
          }
        }
      }
      if (K >= 2) rep.add({"dominance_da", static_cast<std::int64_t>(t + 1), wl, wr, worst, pass});
    }
    rep.summarize("dominance_da", std::to_string(v.n_plans) + " random monotone plans, k <= 30; row = worst (k, i) per plan");
    // a' < a: the gap is L^2 b^k/(1-b^k)(k-1+1/(1-b)) > 0, below double resolution for large k-j
    for (int bi = 1; bi <= 9; ++bi) {
      const double b = 0.1 * bi;
      for (std::int64_t k = 2; k <= 21; ++k) {
        const std::vector<double> a = dev_coeffs_a(k, b, L);
        for (std::int64_t j = 1; j < k && j <= 20; ++j) {
          const double ap = a_prime(k, j, b, L), aa = a[static_cast<std::size_t>(j - 1)];
          const double gap = L * L * std::pow(b, static_cast<double>(k)) / (1.0 - std::pow(b, static_cast<double>(k))) *
                             (static_cast<double>(k) - 1.0 + 1.0 / (1.0 - b));
          rep.add({"dominance_ap", k, ap, aa, aa - ap, ap <= aa && gap > 0.0});
        }
      }
    }
    rep.summarize("dominance_ap", "a'_{k,j} <= a_{k,j} on k 2..21, j < k, beta 0.1..0.9, with positive exact gap");
  }
  if (wants("coeffs_nc")) {
    const double cap = max_stepsize_nonconvex(beta, L);
    for (double a : {cap, s.alpha}) {
      const CoefficientSet cs = c_sequence_nonconvex(a, beta, L, 10000);
      const std::int64_t id = a == cap ? 1 : 2;
      if (beta == 0.0) {
        rep.add({"coeffs_nc_positive", id, cs.c1(), 0.0, 0.0, cs.c1() == 0.0});
      } else {
        const long double mn = *std::min_element(cs.c.begin(), cs.c.end());
        rep.add({"coeffs_nc_positive", id, static_cast<double>(mn), 0.0, static_cast<double>(mn), cs.all_positive()});
        const double lim = std::abs(static_cast<double>(cs.c_limit)), tol = 1e-9 * cs.c1();
        rep.add({"coeffs_nc_limit", id, lim, tol, tol - lim, lim <= tol});
        const double gap = static_cast<double>(cs.recursion_gap);
        rep.add({"coeffs_nc_recursion", id, gap, 1e-9, 1e-9 - gap, gap <= 1e-9});
      }
      rep.add({"coeffs_nc_denominator", id, cs.denominator, 0.5, cs.denominator - 0.5, cs.denominator >= 0.5 * (1.0 - 1e-12)});
    }
    rep.summarize("coeffs_nc_positive", "row 1: alpha at cap, row 2: configured alpha; H = 10000");
    if (beta > 0.0) {
      rep.summarize("coeffs_nc_limit", "|c_inf| <= 1e-9 c_1");
      rep.summarize("coeffs_nc_recursion", "forward recursion against the tail form, relative to c_1");
    }
    rep.summarize("coeffs_nc_denominator", "c_1 denominator >= 1/2");
  }
  if (wants("coeffs_ms")) {
    const CoefficientSet cs = c_sequence_multistage(s.ms.front().alpha, s.ms.front().beta, s.ms.back().beta, L);
    const long double mn = *std::min_element(cs.c.begin(), cs.c.end());
    rep.add({"coeffs_ms_positive", 1, static_cast<double>(mn), 0.0, static_cast<double>(mn), cs.all_positive()});
    const double cb = L / (4.0 * (1.0 - s.ms.front().beta));
    rep.add({"coeffs_ms_c1_bound", 1, cs.c1(), cb, cb - cs.c1(), cs.c1() <= cb});
    rep.add({"coeffs_ms_denominator", 1, cs.denominator, 0.5, cs.denominator - 0.5, cs.denominator >= 0.5 * (1.0 - 1e-12)});
    rep.summarize("coeffs_ms_positive", "theoretical multistage plan, H = " + std::to_string(cs.horizon()));
    rep.summarize("coeffs_ms_c1_bound", "c_1 <= L/(4(1-beta_1))");
    rep.summarize("coeffs_ms_denominator", "c_1 denominator >= 1/2");
  }
  if (wants("coeffs_sc")) {
    if (!(mu > 0.0)) throw std::invalid_argument("verify coeffs_sc: strongly convex problem required (mu > 0)");
    const double cap = max_stepsize_strongly_convex(beta, L, mu);
    for (double a : {cap, s.alpha_sc}) {
      const std::int64_t id = a == cap ? 1 : 2;
      const CoefficientSet cs = scvx_constants(a, beta, L, mu);
      const long double mn = *std::min_element(cs.c.begin(), cs.c.end());
      rep.add({"coeffs_sc_positive", id, static_cast<double>(mn), 0.0, static_cast<double>(mn), cs.all_positive() || beta == 0.0});
      rep.add({"coeffs_sc_c1_estimate", id, cs.c1(), cs.c1_estimate, cs.c1_estimate - cs.c1(), cs.c1() <= cs.c1_estimate * (1.0 + 1e-12)});
      rep.add({"coeffs_sc_B1", id, cs.B1, 0.0, -cs.B1, cs.B1 < 0.0});
      const double q = 1.0 + cs.B1;
      rep.add({"coeffs_sc_contraction", id, std::sqrt(beta), q, q - std::sqrt(beta), std::sqrt(beta) <= q && q < 1.0});
    }
    rep.summarize("coeffs_sc_positive", "row 1: alpha at cap, row 2: configured alpha");
    rep.summarize("coeffs_sc_c1_estimate", "c_1 <= 6 sqrt(b)/(25(1-b)) (2L + 18 mu)");
    rep.summarize("coeffs_sc_B1", "B1 < 0");
    rep.summarize("coeffs_sc_contraction", "sqrt(beta) <= 1 + B1 < 1");
  }
  if (wants("descent") || wants("thm1")) {
    const DescentResult d = mc_descent_check(s.p, s.nm, s.x0, s.alpha, beta, v.K, mc);
    rep.info["descent_grad_coeff"] = d.dc.grad;
    rep.info["descent_grad_coeff_statement"] = d.dc.grad_statement;
    rep.info["descent_noise_coeff"] = d.dc.noise;
    if (wants("descent")) {
      for (auto& row : d.descent_rows()) rep.add(row);
      rep.summarize("descent", "MC, pass iff paired margin + 4 SE >= 0");
    }
    if (wants("thm1")) {
      std::vector<std::int64_t> ks;
      for (std::int64_t k : {v.K / 4, v.K / 2, v.K})
        if (k >= 1 && std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
      for (auto& row : d.thm1_rows(ks)) rep.add(row);
      const auto i = static_cast<std::size_t>(v.K - 1);
      rep.info["thm1_telescoped_at_K"] = d.thm1_telescoped[i];
      rep.summarize("thm1", "running mean of E|g|^2 against the bound, 4 SE slack");
    }
  }
  if (wants("thm2")) {
    if (!(mu > 0.0)) throw std::invalid_argument("verify thm2: strongly convex problem required (mu > 0)");
    const StronglyConvexResult t = mc_theorem2(s.p, s.nm, s.x0, s.alpha_sc, beta, v.K_thm2, mc);
    for (auto& row : t.rows()) rep.add(row);
    rep.add(t.corollary_row());
    rep.info["thm2_L_k0"] = t.L_k0;
    rep.info["thm2_stationary"] = t.stationary;
    rep.info["thm2_plateau"] = t.plateau;
    rep.info["thm2_fitted_slope"] = t.fitted_slope;
    rep.info["thm2_fit_begin"] = static_cast<double>(t.fit_begin);
    rep.info["thm2_fit_end"] = static_cast<double>(t.fit_end);
    rep.summarize("thm2", "E[f(z^k) - f*] for k >= k0, 4 SE slack");
    rep.summarize("thm2_rate", "log-linear slope of the transient against ln max{1 - alpha mu, beta}");
  }
  if (wants("thm3")) {
    const MultistageBoundResult t = mc_theorem3(s.p, s.nm, s.x0, s.ms, mc);
    rep.add(t.row());
    for (std::size_t l = 0; l < t.stage_means.size(); ++l) rep.info["thm3_stage_mean_" + std::to_string(l + 1)] = t.stage_means[l];
    rep.summarize("thm3", "staged aggregate against the bound, 4 SE slack");
  }
  return rep;
}

}  // namespace sgdm
