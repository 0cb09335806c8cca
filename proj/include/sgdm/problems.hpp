#pragma once

#include "sgdm/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgdm {

/// Training data: one sample per row of `X`.
struct Dataset {
  Mat X;
  Vec y;
  bool classification = true;

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index d() const { return X.cols(); }

  void validate() const {
    if (n() < 1 || d() < 1) throw std::invalid_argument("dataset must have n >= 1 and d >= 1");
    if (y.size() != n()) throw std::invalid_argument("dataset label count does not match rows");
    if (!X.allFinite() || !y.allFinite()) throw std::invalid_argument("dataset contains non-finite values");
    if (classification)
      for (Eigen::Index i = 0; i < n(); ++i)
        if (y[i] != 1.0 && y[i] != -1.0) throw std::invalid_argument("classification labels must be -1 or +1");
  }
};

enum class ProblemKind { quadratic, least_squares, logistic_l2 };

inline const char* to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::quadratic: return "quadratic";
    case ProblemKind::least_squares: return "least_squares";
    case ProblemKind::logistic_l2: return "logistic_l2";
  }
  return "?";
}

/**
 * An objective with exact value and gradient plus certified constants.
 *
 * quadratic:     f(x) = 0.5 x'Ax - b'x
 * least_squares: f(x) = (1/2n) |Xx - y|^2
 * logistic_l2:   f(x) = (1/n) sum log(1 + exp(-y_i x'q_i)) + (lambda/2) |x|^2
 */
struct ProblemSpec {
  ProblemKind kind = ProblemKind::quadratic;
  Eigen::Index d = 0;
  Mat A;
  Vec b;
  std::shared_ptr<const Dataset> data;
  double lambda = 0.0;
  double L = 0.0;
  double mu = 0.0;
  double f_star = 0.0;
  std::optional<Vec> x_star;
};

namespace detail {

inline void check_dim(const ProblemSpec& p, const Vec& x) {
  if (x.size() != p.d) throw std::invalid_argument("dimension mismatch: expected " + std::to_string(p.d) + ", got " + std::to_string(x.size()));
}

/// log(1 + exp(-t)) without overflow.
inline double softplus_neg(double t) {
  return t > 0.0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
}

/// 1 / (1 + exp(t)), the derivative magnitude of softplus_neg.
inline double sigmoid_neg(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(t));
}

}  // namespace detail

inline double objective(const ProblemSpec& p, const Vec& x) {
  detail::check_dim(p, x);
  switch (p.kind) {
    case ProblemKind::quadratic: return 0.5 * x.dot(p.A * x) - p.b.dot(x);
    case ProblemKind::least_squares: {
      const double n = static_cast<double>(p.data->n());
      return 0.5 * (p.data->X * x - p.data->y).squaredNorm() / n;
    }
    case ProblemKind::logistic_l2: {
      const Dataset& D = *p.data;
      const Vec t = (D.X * x).cwiseProduct(D.y);
      double s = 0.0;
      for (Eigen::Index i = 0; i < D.n(); ++i) s += detail::softplus_neg(t[i]);
      return s / static_cast<double>(D.n()) + 0.5 * p.lambda * x.squaredNorm();
    }
  }
  throw std::logic_error("unknown problem kind");
}

/// Writes grad f(x) into `g` without reallocating when sizes match.
inline void full_gradient_into(const ProblemSpec& p, const Vec& x, Vec& g) {
  detail::check_dim(p, x);
  switch (p.kind) {
    case ProblemKind::quadratic:
      g.noalias() = p.A * x;
      g -= p.b;
      return;
    case ProblemKind::least_squares: {
      const Dataset& D = *p.data;
      const Vec r = D.X * x - D.y;
      g.noalias() = D.X.transpose() * r;
      g /= static_cast<double>(D.n());
      return;
    }
    case ProblemKind::logistic_l2: {
      const Dataset& D = *p.data;
      Vec w = (D.X * x).cwiseProduct(D.y);
      for (Eigen::Index i = 0; i < D.n(); ++i) w[i] = -D.y[i] * detail::sigmoid_neg(w[i]);
      g.noalias() = D.X.transpose() * w;
      g /= static_cast<double>(D.n());
      g += p.lambda * x;
      return;
    }
  }
}

inline Vec full_gradient(const ProblemSpec& p, const Vec& x) {
  Vec g(p.d);
  full_gradient_into(p, x, g);
  return g;
}

/// Rejects A that is not symmetric within 1e-10 or not positive definite.
inline ProblemSpec make_quadratic(const Mat& A, const Vec& b) {
  if (A.rows() != A.cols() || A.rows() < 1) throw std::invalid_argument("quadratic: A must be square and nonempty");
  if (b.size() != A.rows()) throw std::invalid_argument("quadratic: b has the wrong length");
  if (!A.allFinite() || !b.allFinite()) throw std::invalid_argument("quadratic: non-finite entries");
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw std::invalid_argument("quadratic: A is not symmetric");
  const Mat S = 0.5 * (A + A.transpose());
  Eigen::LLT<Mat> llt(S);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("quadratic: A is not positive definite");

  ProblemSpec p;
  p.kind = ProblemKind::quadratic;
  p.d = S.rows();
  p.A = S;
  p.b = b;
  p.L = power_iteration([&](const Vec& v, Vec& out) { out.noalias() = S * v; }, p.d);
  p.mu = inverse_power_iteration(S);
  if (!(p.mu > 0.0)) throw std::invalid_argument("quadratic: A is not positive definite");
  p.mu = std::min(p.mu, p.L);
  p.x_star = llt.solve(b);
  p.f_star = objective(p, *p.x_star);
  return p;
}

/// f = (1/2n)|Xx - y|^2. mu is 0 when X'X is singular.
inline ProblemSpec make_least_squares(std::shared_ptr<const Dataset> data) {
  if (!data) throw std::invalid_argument("least_squares: missing dataset");
  data->validate();
  ProblemSpec p;
  p.kind = ProblemKind::least_squares;
  p.d = data->d();
  p.data = data;
  const double n = static_cast<double>(data->n());
  const Mat H = data->X.transpose() * data->X / n;
  p.L = power_iteration([&](const Vec& v, Vec& out) { out.noalias() = H * v; }, p.d);
  Eigen::LLT<Mat> llt(H);
  if (llt.info() == Eigen::Success) {
    p.mu = std::min(inverse_power_iteration(H), p.L);
    p.x_star = llt.solve(data->X.transpose() * data->y / n);
  } else {
    p.mu = 0.0;
    p.x_star = data->X.completeOrthogonalDecomposition().solve(data->y);
  }
  p.f_star = objective(p, *p.x_star);
  return p;
}

/// Damped Newton on the logistic objective until |grad| <= tol.
inline Vec solve_logistic(const ProblemSpec& p, Vec x, double tol = 1e-10, int max_iter = 200) {
  const Dataset& D = *p.data;
  const double n = static_cast<double>(D.n());
  Vec g(p.d);
  for (int it = 0; it < max_iter; ++it) {
    full_gradient_into(p, x, g);
    if (g.norm() <= tol) return x;
    const Vec t = (D.X * x).cwiseProduct(D.y);
    Vec w(D.n());
    for (Eigen::Index i = 0; i < D.n(); ++i) {
      const double s = detail::sigmoid_neg(t[i]);
      w[i] = s * (1.0 - s);
    }
    Mat H = D.X.transpose() * w.asDiagonal() * D.X / n;
    H.diagonal().array() += p.lambda;
    const Vec step = H.llt().solve(g);
    const double f0 = objective(p, x);
    const double slope = g.dot(step);
    double s = 1.0;
    Vec trial = x - step;
    while (objective(p, trial) > f0 - 1e-4 * s * slope && s > 1e-12) {
      s *= 0.5;
      trial = x - s * step;
    }
    x = trial;
  }
  full_gradient_into(p, x, g);
  if (g.norm() > tol) throw std::runtime_error("logistic solve did not reach the gradient tolerance");
  return x;
}

inline ProblemSpec make_logistic(std::shared_ptr<const Dataset> data, double lambda) {
  if (!data) throw std::invalid_argument("logistic: missing dataset");
  if (!(lambda > 0.0)) throw std::invalid_argument("logistic: lambda must be > 0");
  if (!data->classification) throw std::invalid_argument("logistic: dataset must have classification labels");
  data->validate();
  ProblemSpec p;
  p.kind = ProblemKind::logistic_l2;
  p.d = data->d();
  p.data = data;
  p.lambda = lambda;
  const double n4 = 4.0 * static_cast<double>(data->n());
  const Mat& X = data->X;
  const double top = power_iteration(
      [&](const Vec& v, Vec& out) {
        const Vec Xv = X * v;
        out.noalias() = X.transpose() * Xv;
      },
      p.d);
  p.L = top / n4 + lambda;
  p.mu = lambda;
  p.x_star = solve_logistic(p, Vec::Zero(p.d));
  p.f_star = objective(p, *p.x_star);
  return p;
}

inline ProblemSpec make_logistic(const Dataset& data, double lambda) {
  return make_logistic(std::make_shared<const Dataset>(data), lambda);
}

/// Two Gaussian clusters N(y * separation * u, I) with exactly balanced shuffled labels.
inline Dataset make_synthetic_classification(int n, int d, double separation, std::uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("synthetic classification: n and d must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  Vec u(d);
  do {
    for (int j = 0; j < d; ++j) u[j] = N(rng);
  } while (u.norm() == 0.0);
  u.normalize();

  Dataset D;
  D.classification = true;
  D.y.resize(n);
  for (int i = 0; i < n; ++i) D.y[i] = i < (n + 1) / 2 ? 1.0 : -1.0;
  std::shuffle(D.y.data(), D.y.data() + n, rng);
  D.X.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) D.X(i, j) = D.y[i] * separation * u[j] + N(rng);
  return D;
}

/// Linear model y = X w + noise with standard normal features.
inline Dataset make_synthetic_regression(int n, int d, double noise, std::uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("synthetic regression: n and d must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  Vec w(d);
  for (int j = 0; j < d; ++j) w[j] = N(rng);
  Dataset D;
  D.classification = false;
  D.X.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) D.X(i, j) = N(rng);
  D.y = D.X * w;
  for (int i = 0; i < n; ++i) D.y[i] += noise * N(rng);
  return D;
}

/// Dense CSV, one sample per line, label in the last column. A non-numeric first line is a header.
inline Dataset load_csv_dataset(const std::string& path, bool classification) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open dataset: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        row.push_back(std::stod(cell, &pos));
        if (cell.find_first_not_of(" \t", pos) != std::string::npos) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (rows.empty() && lineno == 1) continue;
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": non-numeric value");
    }
    if (row.size() < 2) throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": need at least one feature and a label");
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::invalid_argument("dataset is empty: " + path);
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size() - 1);
  Dataset D;
  D.classification = classification;
  D.X.resize(n, d);
  D.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) D.X(i, j) = rows[i][j];
    D.y[i] = rows[i][d];
  }
  D.validate();
  return D;
}

enum class NoiseKind { additive_gaussian, minibatch };

/**
 * How stochastic gradients are produced.
 *
 * additive_gaussian adds N(0, sigma2/d I), so E|g~ - g|^2 = sigma2 exactly.
 * minibatch averages sample gradients over batch_size distinct indices.
 */
struct NoiseModel {
  NoiseKind kind = NoiseKind::additive_gaussian;
  double sigma2 = 0.0;
  int batch_size = 0;
  double sigma2_certificate = 0.0;

  static NoiseModel additive(double sigma2) {
    if (!(sigma2 >= 0.0) || !std::isfinite(sigma2)) throw std::invalid_argument("noise: sigma2 must be finite and >= 0");
    return {NoiseKind::additive_gaussian, sigma2, 0, sigma2};
  }
  static NoiseModel minibatch(int batch_size, double certificate = 0.0) {
    if (batch_size < 1) throw std::invalid_argument("noise: batch_size must be >= 1");
    return {NoiseKind::minibatch, 0.0, batch_size, certificate};
  }
  double sigma() const { return std::sqrt(sigma2); }
};

/// Per-sample gradient of the data term, accumulated into g with weight w.
inline void add_sample_gradient(const ProblemSpec& p, Eigen::Index i, const Vec& x, double w, Vec& g) {
  const Dataset& D = *p.data;
  const auto q = D.X.row(i);
  if (p.kind == ProblemKind::logistic_l2) {
    const double t = D.y[i] * q.dot(x);
    g.noalias() += (-w * D.y[i] * detail::sigmoid_neg(t)) * q.transpose();
  } else {
    g.noalias() += (w * (q.dot(x) - D.y[i])) * q.transpose();
  }
}

/**
 * Stochastic gradient source bound to one problem and noise model.
 * Owns scratch buffers, so keep one per worker.
 */
class GradientOracle {
 public:
  GradientOracle(const ProblemSpec& p, const NoiseModel& nm) : p_(&p), nm_(nm), xi_(p.d) {
    if (nm.kind == NoiseKind::minibatch) {
      if (!p.data) throw std::invalid_argument("minibatch noise requires a dataset-backed problem");
      if (nm.batch_size > p.data->n())
        throw std::invalid_argument("batch_size " + std::to_string(nm.batch_size) + " exceeds n = " + std::to_string(p.data->n()));
      perm_.resize(static_cast<std::size_t>(p.data->n()));
      std::iota(perm_.begin(), perm_.end(), Eigen::Index{0});
    }
  }

  const ProblemSpec& problem() const { return *p_; }
  const NoiseModel& noise() const { return nm_; }

  /// g~ at x given the exact gradient g already evaluated at x.
  void sample(const Vec& x, const Vec& g, Rng& rng, Vec& out) {
    if (nm_.kind == NoiseKind::additive_gaussian) {
      out = g;
      if (nm_.sigma2 > 0.0) {
        const double s = std::sqrt(nm_.sigma2 / static_cast<double>(p_->d));
        for (Eigen::Index j = 0; j < p_->d; ++j) xi_[j] = normal_(rng);
        out.noalias() += s * xi_;
      }
      return;
    }
    const Eigen::Index n = p_->data->n();
    const Eigen::Index s = nm_.batch_size;
    if (s == n) {
      out = g;
      return;
    }
    // partial Fisher-Yates: positions [0, s) become a uniform draw without replacement
    out.setZero(p_->d);
    const double w = 1.0 / static_cast<double>(s);
    for (Eigen::Index j = 0; j < s; ++j) {
      std::uniform_int_distribution<Eigen::Index> U(j, n - 1);
      std::swap(perm_[static_cast<std::size_t>(j)], perm_[static_cast<std::size_t>(U(rng))]);
      add_sample_gradient(*p_, perm_[static_cast<std::size_t>(j)], x, w, out);
    }
    if (p_->kind == ProblemKind::logistic_l2) out.noalias() += p_->lambda * x;
  }

 private:
  const ProblemSpec* p_;
  NoiseModel nm_;
  Vec xi_;
  std::vector<Eigen::Index> perm_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline Vec stochastic_gradient(const ProblemSpec& p, const NoiseModel& nm, const Vec& x, Rng& rng) {
  if (!x.allFinite()) throw std::invalid_argument("stochastic_gradient: non-finite x");
  GradientOracle oracle(p, nm);
  const Vec g = full_gradient(p, x);
  Vec out(p.d);
  oracle.sample(x, g, rng, out);
  return out;
}

/// Max over probes of the MC estimate of E|g~ - g|^2, inflated by (1 + 3/sqrt(n_mc)).
inline double estimate_sigma2(const ProblemSpec& p, const NoiseModel& nm, const std::vector<Vec>& probes, int n_mc, Rng& rng) {
  if (n_mc < 100) throw std::invalid_argument("estimate_sigma2: n_mc must be >= 100");
  if (probes.empty()) throw std::invalid_argument("estimate_sigma2: need at least one probe point");
  GradientOracle oracle(p, nm);
  Vec gt(p.d);
  double worst = 0.0;
  for (const Vec& x : probes) {
    const Vec g = full_gradient(p, x);
    double acc = 0.0;
    for (int t = 0; t < n_mc; ++t) {
      oracle.sample(x, g, rng, gt);
      acc += (gt - g).squaredNorm();
    }
    worst = std::max(worst, acc / n_mc);
  }
  return worst * (1.0 + 3.0 / std::sqrt(static_cast<double>(n_mc)));
}

}  // namespace sgdm
