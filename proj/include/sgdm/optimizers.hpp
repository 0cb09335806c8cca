#pragma once

#include "sgdm/linalg.hpp"
#include "sgdm/problems.hpp"
#include "sgdm/schedule.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace sgdm {

/// Iterate x^k, momentum buffer m^{k-1} and the 1-based counter k of the next update.
struct OptState {
  Vec x;
  Vec m;
  std::int64_t k = 1;
  std::size_t stage_index = 0;

  static OptState at(const Vec& x0) { return {x0, Vec::Zero(x0.size()), 1, 0}; }
};

/// m <- beta m + (1 - beta) g~, x <- x - alpha m, k <- k + 1.
inline void sgdm_step_inplace(OptState& s, double alpha, double beta, const Vec& gtilde) {
  if (gtilde.size() != s.x.size() || s.m.size() != s.x.size()) throw std::invalid_argument("sgdm_step: dimension mismatch");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("sgdm_step: alpha must be finite and >= 0");
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("sgdm_step: beta must lie in [0, 1)");
  if (!gtilde.allFinite()) throw std::domain_error("sgdm_step: non-finite stochastic gradient at k = " + std::to_string(s.k));
  s.m *= beta;
  s.m.noalias() += (1.0 - beta) * gtilde;
  s.x.noalias() -= alpha * s.m;
  ++s.k;
}

inline OptState sgdm_step(OptState s, double alpha, double beta, const Vec& gtilde) {
  sgdm_step_inplace(s, alpha, beta, gtilde);
  return s;
}

struct Recording {
  enum class Kind { full, thinned, summary };
  Kind kind = Kind::full;
  std::int64_t stride = 1;

  static Recording full() { return {Kind::full, 1}; }
  static Recording thinned(std::int64_t stride) {
    if (stride < 1) throw std::invalid_argument("recording stride must be >= 1");
    return stride == 1 ? full() : Recording{Kind::thinned, stride};
  }
  static Recording summary() { return {Kind::summary, 0}; }
  bool has_iterates() const { return kind != Kind::summary; }
  bool complete() const { return kind == Kind::full; }
};

enum class RunStatus { completed, diverged, non_finite };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::diverged: return "diverged";
    case RunStatus::non_finite: return "non_finite";
  }
  return "?";
}

/// Values at iteration k: x^k, m^k, g~^k, g^k = grad f(x^k), f(x^k).
struct IterRecord {
  std::int64_t k = 0;
  std::size_t stage = 1;  ///< 1-based
  double alpha = 0.0;
  double beta = 0.0;
  Vec x;
  Vec m;
  Vec gtilde;
  Vec g;
  double f = 0.0;
};

struct SummaryRow {
  std::int64_t k = 0;
  std::size_t stage = 1;
  double alpha = 0.0;
  double beta = 0.0;
  double f = 0.0;
  double grad_norm_sq = 0.0;
  double m_norm = 0.0;
};

struct Trajectory {
  std::vector<IterRecord> records;
  std::vector<SummaryRow> summary;  ///< every k, whatever the recording policy
  Vec x_final;                      ///< x^{K+1}, or the last finite iterate
  Vec x0;
  Recording recording;
  Schedule schedule;
  std::uint64_t seed = 0;
  std::string problem_id;
  std::string noise_id;
  RunStatus status = RunStatus::completed;
  std::int64_t steps = 0;  ///< updates actually performed
  std::string message;

  bool ok() const { return status == RunStatus::completed; }
  std::size_t d() const { return static_cast<std::size_t>(x0.size()); }

  /// x^k for k = 1..steps+1 (requires full recording).
  const Vec& x_at(std::int64_t k) const {
    if (!recording.complete()) throw std::logic_error("trajectory: full recording required");
    if (k == steps + 1) return x_final;
    return records.at(static_cast<std::size_t>(k - 1)).x;
  }
};

/// Everything one update touched. m_prev is m^{k-1}, m is m^k, x_next is x^{k+1}.
struct StepView {
  std::int64_t k;
  std::size_t stage;  ///< 1-based
  double alpha;
  double beta;
  const Vec& x;
  const Vec& m_prev;
  const Vec& m;
  const Vec& gtilde;
  const Vec& g;
  double f;
  const Vec& x_next;
};

inline constexpr double kDivergenceNorm = 1e12;

struct SimOptions {
  bool eval_f = true;
};

/**
 * Runs the schedule from x0, calling obs(StepView) after every update.
 * Stops early on a non-finite stochastic gradient or when |x| exceeds 1e12.
 */
template <class Observer>
RunStatus simulate(const ProblemSpec& p, GradientOracle& oracle, const Schedule& sched, const Vec& x0, Rng& rng,
                   Observer&& obs, SimOptions opt = {}, std::int64_t* steps_done = nullptr, Vec* x_last = nullptr) {
  if (x0.size() != p.d) throw std::invalid_argument("simulate: x0 has the wrong dimension");
  const Eigen::Index d = p.d;
  Vec x = x0, x_next(d), m = Vec::Zero(d), m_prev(d), g(d), gt(d);
  std::int64_t k = 1;
  RunStatus status = RunStatus::completed;
  for (std::size_t si = 0; si < sched.size() && status == RunStatus::completed; ++si) {
    const Stage& st = sched[si];
    for (std::int64_t t = 0; t < st.length; ++t, ++k) {
      full_gradient_into(p, x, g);
      const double f = opt.eval_f ? objective(p, x) : 0.0;
      oracle.sample(x, g, rng, gt);
      if (!gt.allFinite()) {
        status = RunStatus::non_finite;
        break;
      }
      m_prev = m;
      m *= st.beta;
      m.noalias() += (1.0 - st.beta) * gt;
      x_next = x;
      x_next.noalias() -= st.alpha * m;
      obs(StepView{k, si + 1, st.alpha, st.beta, x, m_prev, m, gt, g, f, x_next});
      x.swap(x_next);
      if (!x.allFinite()) {
        status = RunStatus::non_finite;
        ++k;
        break;
      }
      if (x.norm() > kDivergenceNorm) {
        status = RunStatus::diverged;
        ++k;
        break;
      }
    }
  }
  if (steps_done) *steps_done = k - 1;
  if (x_last) *x_last = x;
  return status;
}

namespace detail {

inline Trajectory run_schedule(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, const Schedule& sched,
                               std::uint64_t seed, Recording rec) {
  Trajectory tr;
  tr.x0 = x0;
  tr.recording = rec;
  tr.schedule = sched;
  tr.seed = seed;
  tr.problem_id = to_string(p.kind);
  tr.noise_id = nm.kind == NoiseKind::additive_gaussian ? "additive_gaussian" : "minibatch";
  const auto K = static_cast<std::size_t>(sched.total_length());
  tr.summary.reserve(K);
  if (rec.complete()) tr.records.reserve(K);
  GradientOracle oracle(p, nm);
  Rng rng(seed);
  auto obs = [&](const StepView& s) {
    tr.summary.push_back({s.k, s.stage, s.alpha, s.beta, s.f, s.g.squaredNorm(), s.m.norm()});
    if (rec.has_iterates() && ((s.k - 1) % rec.stride == 0))
      tr.records.push_back({s.k, s.stage, s.alpha, s.beta, s.x, s.m, s.gtilde, s.g, s.f});
  };
  tr.status = simulate(p, oracle, sched, x0, rng, obs, {}, &tr.steps, &tr.x_final);
  if (tr.status == RunStatus::diverged)
    tr.message = "diverged: |x| > 1e12 after " + std::to_string(tr.steps) + " steps";
  else if (tr.status == RunStatus::non_finite)
    tr.message = "non-finite value after " + std::to_string(tr.steps) + " steps";
  return tr;
}

}  // namespace detail

inline Trajectory run_sgdm(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, double alpha, double beta,
                           std::int64_t K, std::uint64_t seed, Recording rec = Recording::full()) {
  if (K < 1) throw std::invalid_argument("run_sgdm: K must be >= 1");
  return detail::run_schedule(p, nm, x0, Schedule::constant(alpha, beta, K), seed, rec);
}

inline Trajectory run_multistage(const ProblemSpec& p, const NoiseModel& nm, const Vec& x0, const Schedule& sched,
                                 std::uint64_t seed, Recording rec = Recording::full()) {
  for (std::size_t i = 1; i < sched.size(); ++i)
    if (sched[i].beta < sched[i - 1].beta) throw std::invalid_argument("run_multistage: beta must be nondecreasing across stages");
  return detail::run_schedule(p, nm, x0, sched, seed, rec);
}

struct OutputSelection {
  std::size_t stage = 1;        ///< l, 1-based
  std::int64_t index = 1;       ///< position inside stage l, 1-based
  std::int64_t k = 1;           ///< global iteration
  Vec x;
};

/// Draws l uniformly from the stages, then an iterate uniformly inside stage l.
inline OutputSelection select_output(const Trajectory& tr, const Schedule& sched, Rng& rng) {
  if (!tr.recording.complete()) throw std::invalid_argument("select_output: full recording required");
  if (!tr.ok()) throw std::invalid_argument("select_output: run stopped early; the output rule is undefined");
  if (tr.steps != sched.total_length()) throw std::invalid_argument("select_output: trajectory does not cover all stages");
  std::uniform_int_distribution<std::size_t> pick_stage(0, sched.size() - 1);
  const std::size_t l = pick_stage(rng);
  std::uniform_int_distribution<std::int64_t> pick_iter(1, sched[l].length);
  const std::int64_t idx = pick_iter(rng);
  const std::int64_t k = sched.stage_begin(l) + idx - 1;
  return {l + 1, idx, k, tr.x_at(k)};
}

/// Per-iteration CSV. loss_epoch_avg is filled on rows closing an epoch of `batches_per_epoch` steps.
inline void write_trajectory_csv(const Trajectory& tr, std::ostream& out, std::int64_t batches_per_epoch = 0) {
  out << "k,stage,alpha,beta,f_x,grad_norm_sq,m_norm,loss_epoch_avg\n";
  out << std::setprecision(17);
  double window = 0.0;
  for (const SummaryRow& r : tr.summary) {
    window += r.f;
    out << r.k << ',' << r.stage << ',' << r.alpha << ',' << r.beta << ',' << r.f << ',' << r.grad_norm_sq << ','
        << r.m_norm << ',';
    if (batches_per_epoch > 0 && r.k % batches_per_epoch == 0) {
      out << window / static_cast<double>(batches_per_epoch);
      window = 0.0;
    }
    out << '\n';
  }
}

inline constexpr char kTrajectoryMagic[8] = {'S', 'G', 'D', 'M', 'T', 'R', 'J', '1'};

/// Binary dump: magic, int64 count, int64 d, then per record int64 k, int64 stage, alpha, beta, f, x, m, g~, g.
inline void write_trajectory_binary(const Trajectory& tr, const std::string& path) {
  if (!tr.recording.has_iterates()) throw std::invalid_argument("binary dump needs recorded iterates");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  auto put_i = [&](std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  auto put_d = [&](double v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  auto put_v = [&](const Vec& v) { out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size())); };
  out.write(kTrajectoryMagic, 8);
  put_i(static_cast<std::int64_t>(tr.records.size()));
  put_i(static_cast<std::int64_t>(tr.d()));
  for (const IterRecord& r : tr.records) {
    put_i(r.k);
    put_i(static_cast<std::int64_t>(r.stage));
    put_d(r.alpha);
    put_d(r.beta);
    put_d(r.f);
    put_v(r.x);
    put_v(r.m);
    put_v(r.gtilde);
    put_v(r.g);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<IterRecord> read_trajectory_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTrajectoryMagic, 8) != 0) throw std::runtime_error("not a trajectory dump: " + path);
  auto get_i = [&] { std::int64_t v; in.read(reinterpret_cast<char*>(&v), sizeof v); return v; };
  auto get_d = [&] { double v; in.read(reinterpret_cast<char*>(&v), sizeof v); return v; };
  const std::int64_t n = get_i(), d = get_i();
  auto get_v = [&] { Vec v(d); in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * d)); return v; };
  std::vector<IterRecord> out;
  for (std::int64_t i = 0; i < n; ++i) {
    IterRecord r;
    r.k = get_i();
    r.stage = static_cast<std::size_t>(get_i());
    r.alpha = get_d();
    r.beta = get_d();
    r.f = get_d();
    r.x = get_v();
    r.m = get_v();
    r.gtilde = get_v();
    r.g = get_v();
    out.push_back(std::move(r));
  }
  if (!in) throw std::runtime_error("truncated trajectory dump: " + path);
  return out;
}

}  // namespace sgdm
