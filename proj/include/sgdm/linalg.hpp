#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace sgdm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
/// `apply(v, out)` must write A v into out.
template <class Apply>
double power_iteration(Apply&& apply, Eigen::Index d, double rel_tol = 1e-10,
                       int max_iter = 200000, std::uint64_t seed = 0x5eed) {
  Rng rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  Vec v(d), w(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * N(rng);
  v.normalize();
  double lam = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    apply(v, w);
    const double rq = v.dot(w);
    if (rq < 0.0) throw std::invalid_argument("operator is not positive semidefinite");
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    // residual of the eigen-equation keeps the stopping rule honest near clustered spectra
    const double res = (w - rq * v).norm();
    v = w / nw;
    if (it > 2 && std::abs(rq - lam) <= rel_tol * std::abs(rq) && res <= std::sqrt(rel_tol) * nw) return rq;
    lam = rq;
  }
  return lam;
}

/// Smallest eigenvalue of an SPD matrix by inverse power iteration.
inline double inverse_power_iteration(const Mat& A, double rel_tol = 1e-10, int max_iter = 200000) {
  Eigen::LLT<Mat> llt(A);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("matrix is not positive definite");
  auto solve = [&](const Vec& v, Vec& out) { out = llt.solve(v); };
  const double inv = power_iteration(solve, A.rows(), rel_tol, max_iter, 0xbeef);
  if (!(inv > 0.0)) throw std::invalid_argument("matrix is not positive definite");
  return 1.0 / inv;
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace sgdm
