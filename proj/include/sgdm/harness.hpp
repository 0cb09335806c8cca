#pragma once

#include "sgdm/diagnostics.hpp"
#include "sgdm/optimizers.hpp"
#include "sgdm/problems.hpp"
#include "sgdm/schedule.hpp"
#include "sgdm/theory.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sgdm {

using json = nlohmann::json;

/// Schema violation; `path` names the offending key, e.g. "algorithm.alpha".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& msg)
      : std::invalid_argument(path.empty() ? msg : path + ": " + msg), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct ProblemConfig {
  std::string kind = "quadratic";
  std::vector<double> diag;                 ///< quadratic: A = diag(...)
  std::vector<std::vector<double>> matrix;  ///< quadratic: dense A
  std::vector<double> b;                    ///< quadratic: linear term (default 0)
  int n = 4096;
  int d = 20;
  double separation = 2.0;
  double lambda = 5e-4;
  double label_noise = 0.1;  ///< least_squares synthetic targets
  std::uint64_t seed = 1;
  std::string dataset;  ///< CSV path; replaces the synthetic generator
};

struct NoiseConfig {
  std::string kind = "additive_gaussian";
  double sigma2 = 1.0;
  int batch_size = 64;
  std::optional<double> sigma2_certificate;
  int certificate_n_mc = 1000;
};

struct AlgorithmConfig {
  std::string kind = "sgdm";
  double alpha = 0.1;
  double beta = 0.9;
  double a1 = 1.0;
  double a2 = 2.0;
  std::vector<std::int64_t> lengths;
  std::string length_unit = "epochs";
  std::vector<Stage> stages;
};

struct RunConfig {
  std::int64_t epochs = 0;
  std::int64_t batches_per_epoch = 0;
  std::int64_t iterations = 0;
};

/// Parameters of the theory suite run by `verify`.
struct VerifyConfig {
  double beta = 0.9;
  std::optional<double> alpha;     ///< default: half the nonconvex cap
  std::optional<double> alpha_sc;  ///< default: half the strongly convex cap
  std::int64_t K = 200;
  std::int64_t K_identity = 500;
  std::int64_t K_thm2 = 10000;
  std::size_t n_mc = 2000;
  std::size_t n_mc_lemma1 = 10000;
  std::size_t n_paths = 100;
  std::size_t n_plans = 1000;
  std::vector<std::int64_t> lengths{30, 60, 210};
  double a2_over_a1 = 20.0;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ProblemConfig problem;
  std::optional<std::vector<double>> x0;
  NoiseConfig noise;
  AlgorithmConfig algorithm;
  RunConfig run;
  std::vector<std::uint64_t> seeds{1};
  std::string recording = "summary";
  std::vector<std::string> checks;
  std::string output_dir = "out";
  VerifyConfig verify;
};

/// Check ids accepted in a config's "checks" list (pathwise checks on each run).
inline const std::vector<std::string>& run_check_ids() {
  static const std::vector<std::string> ids{"identity_z", "ema", "weights", "reconstruct_x", "lemma2"};
  return ids;
}

namespace detail {

/// Walks a JSON object, records which keys were read and rejects the rest.
class ObjReader {
 public:
  ObjReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    out = convert<T>(j_.at(key), at(key));
  }
  template <class T>
  void get(const std::string& key, std::optional<T>& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    out = convert<T>(j_.at(key), at(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
  }

  template <class T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path, "expected a number");
      const double x = v.get<double>();
      if (!std::isfinite(x)) throw ConfigError(path, "must be finite");
      return static_cast<T>(x);
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(path, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw ConfigError(path, "must be >= 0");
      }
      return v.get<T>();
    } else {
      // vectors
      using E = typename T::value_type;
      if (!v.is_array()) throw ConfigError(path, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<E>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& path, const std::string& msg) {
  if (!ok) throw ConfigError(path, msg);
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  using detail::ObjReader;
  using detail::require;
  ExperimentConfig c;
  ObjReader top(j, "");
  top.get("name", c.name);

  require(top.has("problem"), "problem", "required");
  {
    ObjReader r(top.raw("problem"), "problem");
    ProblemConfig& p = c.problem;
    r.get("kind", p.kind);
    r.get("diag", p.diag);
    r.get("matrix", p.matrix);
    r.get("b", p.b);
    r.get("n", p.n);
    r.get("d", p.d);
    r.get("separation", p.separation);
    r.get("lambda", p.lambda);
    r.get("label_noise", p.label_noise);
    r.get("seed", p.seed);
    r.get("dataset", p.dataset);
    r.finish();
    require(p.kind == "quadratic" || p.kind == "least_squares" || p.kind == "logistic_l2", "problem.kind",
            "must be one of quadratic, least_squares, logistic_l2");
    if (p.kind == "quadratic") {
      require(!p.diag.empty() || !p.matrix.empty(), "problem.diag", "quadratic needs diag or matrix");
      require(p.diag.empty() || p.matrix.empty(), "problem.matrix", "give either diag or matrix, not both");
      for (std::size_t i = 0; i < p.diag.size(); ++i) require(p.diag[i] > 0.0, "problem.diag[" + std::to_string(i) + "]", "must be > 0");
      const std::size_t d = p.diag.empty() ? p.matrix.size() : p.diag.size();
      for (std::size_t i = 0; i < p.matrix.size(); ++i)
        require(p.matrix[i].size() == d, "problem.matrix[" + std::to_string(i) + "]", "matrix must be square");
      require(p.b.empty() || p.b.size() == d, "problem.b", "length must match the dimension");
    } else {
      require(p.n >= 1, "problem.n", "must be >= 1");
      require(p.d >= 1, "problem.d", "must be >= 1");
    }
    if (p.kind == "logistic_l2") require(p.lambda > 0.0, "problem.lambda", "must be > 0");
  }

  if (top.has("x0")) c.x0 = ObjReader::convert<std::vector<double>>(top.raw("x0"), "x0");

  if (top.has("noise")) {
    ObjReader r(top.raw("noise"), "noise");
    NoiseConfig& n = c.noise;
    r.get("kind", n.kind);
    r.get("sigma2", n.sigma2);
    r.get("batch_size", n.batch_size);
    r.get("sigma2_certificate", n.sigma2_certificate);
    r.get("certificate_n_mc", n.certificate_n_mc);
    r.finish();
    require(n.kind == "additive_gaussian" || n.kind == "minibatch", "noise.kind", "must be additive_gaussian or minibatch");
    require(n.sigma2 >= 0.0, "noise.sigma2", "must be >= 0");
    require(n.batch_size >= 1, "noise.batch_size", "must be >= 1");
    require(n.certificate_n_mc >= 100, "noise.certificate_n_mc", "must be >= 100");
    if (n.sigma2_certificate) require(*n.sigma2_certificate >= 0.0, "noise.sigma2_certificate", "must be >= 0");
    if (n.kind == "minibatch") require(c.problem.kind != "quadratic", "noise.kind", "minibatch noise needs a dataset-backed problem");
  }

  if (top.has("algorithm")) {
    ObjReader r(top.raw("algorithm"), "algorithm");
    AlgorithmConfig& a = c.algorithm;
    r.get("kind", a.kind);
    r.get("alpha", a.alpha);
    r.get("beta", a.beta);
    r.get("a1", a.a1);
    r.get("a2", a.a2);
    r.get("lengths", a.lengths);
    r.get("length_unit", a.length_unit);
    if (r.has("stages")) {
      const json& st = r.raw("stages");
      require(st.is_array(), "algorithm.stages", "expected an array");
      for (std::size_t i = 0; i < st.size(); ++i) {
        const std::string path = "algorithm.stages[" + std::to_string(i) + "]";
        ObjReader s(st[i], path);
        Stage x;
        s.get("alpha", x.alpha);
        s.get("beta", x.beta);
        s.get("length", x.length);
        s.finish();
        require(x.alpha > 0.0, path + ".alpha", "must be > 0");
        require(x.beta >= 0.0 && x.beta < 1.0, path + ".beta", "must lie in [0, 1)");
        require(x.length >= 1, path + ".length", "must be >= 1");
        a.stages.push_back(x);
      }
    }
    r.finish();
    require(a.kind == "sgd" || a.kind == "sgdm" || a.kind == "multistage" || a.kind == "stages", "algorithm.kind",
            "must be one of sgd, sgdm, multistage, stages");
    require(a.length_unit == "epochs" || a.length_unit == "iterations", "algorithm.length_unit", "must be epochs or iterations");
    if (a.kind == "sgd" || a.kind == "sgdm") require(a.alpha > 0.0, "algorithm.alpha", "must be > 0");
    if (a.kind == "sgdm") require(a.beta >= 0.0 && a.beta < 1.0, "algorithm.beta", "must lie in [0, 1)");
    if (a.kind == "multistage") {
      require(a.a1 > 0.0, "algorithm.a1", "must be > 0");
      require(a.a2 > 0.0, "algorithm.a2", "must be > 0");
      require(!a.lengths.empty(), "algorithm.lengths", "must be nonempty");
      for (std::size_t i = 0; i < a.lengths.size(); ++i) require(a.lengths[i] >= 1, "algorithm.lengths[" + std::to_string(i) + "]", "must be >= 1");
    }
    if (a.kind == "stages") require(!a.stages.empty(), "algorithm.stages", "must be nonempty");
  }

  if (top.has("run")) {
    ObjReader r(top.raw("run"), "run");
    r.get("epochs", c.run.epochs);
    r.get("batches_per_epoch", c.run.batches_per_epoch);
    r.get("iterations", c.run.iterations);
    r.finish();
    require(c.run.epochs >= 0, "run.epochs", "must be >= 0");
    require(c.run.batches_per_epoch >= 0, "run.batches_per_epoch", "must be >= 0");
    require(c.run.iterations >= 0, "run.iterations", "must be >= 0");
    require(c.run.epochs == 0 || c.run.iterations == 0, "run.iterations", "give epochs or iterations, not both");
    if (c.run.epochs > 0) require(c.run.batches_per_epoch >= 1, "run.batches_per_epoch", "required when epochs is set");
  }

  top.get("seeds", c.seeds);
  require(!c.seeds.empty(), "seeds", "must be nonempty");
  top.get("recording", c.recording);
  require(c.recording == "full" || c.recording == "summary" || c.recording.rfind("thinned:", 0) == 0, "recording",
          "must be full, summary or thinned:<stride>");
  if (c.recording.rfind("thinned:", 0) == 0) {
    try {
      require(std::stoll(c.recording.substr(8)) >= 1, "recording", "stride must be >= 1");
    } catch (const std::logic_error&) {
      throw ConfigError("recording", "stride must be an integer");
    }
  }
  top.get("checks", c.checks);
  for (std::size_t i = 0; i < c.checks.size(); ++i) {
    const auto& ids = run_check_ids();
    require(std::find(ids.begin(), ids.end(), c.checks[i]) != ids.end(), "checks[" + std::to_string(i) + "]",
            "unknown run check '" + c.checks[i] + "'");
  }
  top.get("output_dir", c.output_dir);

  if (top.has("verify")) {
    ObjReader r(top.raw("verify"), "verify");
    VerifyConfig& v = c.verify;
    r.get("beta", v.beta);
    r.get("alpha", v.alpha);
    r.get("alpha_sc", v.alpha_sc);
    r.get("K", v.K);
    r.get("K_identity", v.K_identity);
    r.get("K_thm2", v.K_thm2);
    r.get("n_mc", v.n_mc);
    r.get("n_mc_lemma1", v.n_mc_lemma1);
    r.get("n_paths", v.n_paths);
    r.get("n_plans", v.n_plans);
    r.get("lengths", v.lengths);
    r.get("a2_over_a1", v.a2_over_a1);
    r.get("seed", v.seed);
    r.finish();
    require(v.beta >= 0.0 && v.beta < 1.0, "verify.beta", "must lie in [0, 1)");
    if (v.alpha) require(*v.alpha > 0.0, "verify.alpha", "must be > 0");
    if (v.alpha_sc) require(*v.alpha_sc > 0.0, "verify.alpha_sc", "must be > 0");
    require(v.K >= 1, "verify.K", "must be >= 1");
    require(v.K_identity >= 1, "verify.K_identity", "must be >= 1");
    require(v.K_thm2 >= 10, "verify.K_thm2", "must be >= 10");
    require(v.n_mc >= 2, "verify.n_mc", "must be >= 2");
    require(v.n_mc_lemma1 >= 2, "verify.n_mc_lemma1", "must be >= 2");
    require(!v.lengths.empty(), "verify.lengths", "must be nonempty");
    require(v.a2_over_a1 > 0.0, "verify.a2_over_a1", "must be > 0");
  }
  top.finish();

  // cross-field checks
  const AlgorithmConfig& a = c.algorithm;
  const bool staged = a.kind == "multistage" || a.kind == "stages";
  if (staged && a.length_unit == "epochs") require(c.run.batches_per_epoch >= 1, "run.batches_per_epoch", "required for lengths in epochs");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", "invalid JSON in " + path + ": " + e.what());
  }
  return parse_config(j);
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  const ProblemConfig& p = c.problem;
  j["problem"] = {{"kind", p.kind}, {"diag", p.diag}, {"matrix", p.matrix}, {"b", p.b}, {"n", p.n}, {"d", p.d}, {"separation", p.separation},
                  {"lambda", p.lambda}, {"label_noise", p.label_noise}, {"seed", p.seed}, {"dataset", p.dataset}};
  j["x0"] = c.x0 ? json(*c.x0) : json(nullptr);
  j["noise"] = {{"kind", c.noise.kind}, {"sigma2", c.noise.sigma2}, {"batch_size", c.noise.batch_size},
                {"sigma2_certificate", c.noise.sigma2_certificate ? json(*c.noise.sigma2_certificate) : json(nullptr)},
                {"certificate_n_mc", c.noise.certificate_n_mc}};
  json stages = json::array();
  for (const Stage& s : c.algorithm.stages) stages.push_back({{"alpha", s.alpha}, {"beta", s.beta}, {"length", s.length}});
  j["algorithm"] = {{"kind", c.algorithm.kind}, {"alpha", c.algorithm.alpha}, {"beta", c.algorithm.beta}, {"a1", c.algorithm.a1},
                    {"a2", c.algorithm.a2}, {"lengths", c.algorithm.lengths}, {"length_unit", c.algorithm.length_unit}, {"stages", stages}};
  j["run"] = {{"epochs", c.run.epochs}, {"batches_per_epoch", c.run.batches_per_epoch}, {"iterations", c.run.iterations}};
  j["seeds"] = c.seeds;
  j["recording"] = c.recording;
  j["checks"] = c.checks;
  return j;
}

/// FNV-1a over the canonical JSON of the run-relevant fields.
inline std::string config_hash(const ExperimentConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

/// Identifier of the problem and noise part only, used to refuse cross-problem comparisons.
inline std::string problem_key(const ExperimentConfig& c) {
  json j = to_json(c);
  return json{{"problem", j["problem"]}, {"noise", j["noise"]}, {"x0", j["x0"]}}.dump();
}

// ---------------------------------------------------------------------------
// Building problems and schedules from a config
// ---------------------------------------------------------------------------

inline ProblemSpec build_problem(const ProblemConfig& pc) {
  if (pc.kind == "quadratic") {
    const std::size_t d = pc.diag.empty() ? pc.matrix.size() : pc.diag.size();
    Mat A = Mat::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    if (!pc.diag.empty())
      for (std::size_t i = 0; i < d; ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = pc.diag[i];
    else
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pc.matrix[i][j];
    Vec b = Vec::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < pc.b.size(); ++i) b[static_cast<Eigen::Index>(i)] = pc.b[i];
    return make_quadratic(A, b);
  }
  const bool cls = pc.kind == "logistic_l2";
  Dataset D = !pc.dataset.empty() ? load_csv_dataset(pc.dataset, cls)
              : cls              ? make_synthetic_classification(pc.n, pc.d, pc.separation, pc.seed)
                                 : make_synthetic_regression(pc.n, pc.d, pc.label_noise, pc.seed);
  auto data = std::make_shared<const Dataset>(std::move(D));
  return cls ? make_logistic(data, pc.lambda) : make_least_squares(data);
}

inline Vec initial_point(const ExperimentConfig& c, const ProblemSpec& p) {
  if (c.x0) {
    if (static_cast<Eigen::Index>(c.x0->size()) != p.d)
      throw ConfigError("x0", "length " + std::to_string(c.x0->size()) + " does not match dimension " + std::to_string(p.d));
    return Eigen::Map<const Vec>(c.x0->data(), static_cast<Eigen::Index>(c.x0->size()));
  }
  return p.kind == ProblemKind::logistic_l2 ? Vec::Zero(p.d) : Vec::Ones(p.d);
}

/// Noise model with its certificate; minibatch certificates are estimated at x0 and x*.
inline NoiseModel build_noise(const NoiseConfig& nc, const ProblemSpec& p, const Vec& x0) {
  if (nc.kind == "additive_gaussian") return NoiseModel::additive(nc.sigma2);
  if (nc.batch_size > p.data->n())
    throw ConfigError("noise.batch_size", "exceeds the dataset size " + std::to_string(p.data->n()));
  NoiseModel nm = NoiseModel::minibatch(nc.batch_size);
  if (nc.sigma2_certificate) {
    nm.sigma2_certificate = *nc.sigma2_certificate;
  } else {
    std::vector<Vec> probes{x0};
    if (p.x_star) probes.push_back(*p.x_star);
    Rng rng(0xce27);
    nm.sigma2_certificate = estimate_sigma2(p, nm, probes, nc.certificate_n_mc, rng);
  }
  return nm;
}

/// Total iteration count and the schedule in iterations.
inline Schedule build_schedule(const ExperimentConfig& c) {
  const AlgorithmConfig& a = c.algorithm;
  const std::int64_t m = c.run.batches_per_epoch;
  const std::int64_t K = c.run.epochs > 0 ? c.run.epochs * m : c.run.iterations;
  if ((a.kind == "sgd" || a.kind == "sgdm") && K < 1) throw ConfigError("run", "set epochs (with batches_per_epoch) or iterations");
  if (a.kind == "sgd") return Schedule::constant(a.alpha, 0.0, K);
  if (a.kind == "sgdm") return Schedule::constant(a.alpha, a.beta, K);
  const std::int64_t unit = a.length_unit == "epochs" ? m : 1;
  Schedule s;
  if (a.kind == "multistage") {
    // alpha_i = A2 / T_i with T_i in the configured unit; stages then run T_i * unit batches
    try {
      std::vector<Stage> st = plan_from_lengths(a.a1, a.a2, a.lengths).stages();
      for (Stage& x : st) x.length *= unit;
      s = Schedule(st);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("algorithm.lengths", e.what());
    }
  } else {
    std::vector<Stage> st = a.stages;
    for (Stage& x : st) x.length *= unit;
    for (std::size_t i = 1; i < st.size(); ++i)
      if (st[i].beta < st[i - 1].beta) throw ConfigError("algorithm.stages[" + std::to_string(i) + "].beta", "beta must be nondecreasing");
    s = Schedule(st);
  }
  if (K > 0 && K != s.total_length())
    throw ConfigError("run", "run length " + std::to_string(K) + " does not match the schedule length " + std::to_string(s.total_length()));
  return s;
}

inline Recording parse_recording(const std::string& r) {
  if (r == "full") return Recording::full();
  if (r == "summary") return Recording::summary();
  return Recording::thinned(std::stoll(r.substr(8)));
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct EpochRow {
  std::int64_t epoch = 0;
  std::int64_t k_end = 0;
  double loss_epoch_avg = 0.0;
  double grad_norm_sq_mean = 0.0;
  std::size_t stage = 1;
};

struct CheckOutcome {
  std::string check;
  bool pass = true;
  double worst = 0.0;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EpochRow> series;
  RunStatus status = RunStatus::completed;
  std::int64_t steps = 0;
  std::string message;
  double final_loss = 0.0;  ///< last epoch average
  double final_gap = 0.0;   ///< f(x^{K+1}) - f*
  double wall_seconds = 0.0;
  std::vector<CheckOutcome> checks;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::string hash;
  std::string problem_key;
  double L = 0.0, mu = 0.0, f_star = 0.0, sigma2_certificate = 0.0;
  std::int64_t batches_per_epoch = 1;
  std::vector<RunRecord> records;  ///< in config seed order

  const RunRecord& for_seed(std::uint64_t s) const {
    for (const RunRecord& r : records)
      if (r.seed == s) return r;
    throw std::out_of_range("no record for seed " + std::to_string(s));
  }
};

/// Epoch windows of exactly m steps; the grad-norm column is the running mean up to k_end.
inline std::vector<EpochRow> epoch_series(const Trajectory& tr, std::int64_t m) {
  std::vector<EpochRow> out;
  if (m < 1) m = 1;
  double window = 0.0, gsum = 0.0;
  for (const SummaryRow& r : tr.summary) {
    window += r.f;
    gsum += r.grad_norm_sq;
    if (r.k % m == 0) {
      out.push_back({r.k / m, r.k, window / static_cast<double>(m), gsum / static_cast<double>(r.k), r.stage});
      window = 0.0;
    }
  }
  return out;
}

namespace detail {

inline std::vector<CheckOutcome> run_pathwise_checks(const ExperimentConfig& c, const ProblemSpec& p, const Trajectory& tr) {
  std::vector<CheckOutcome> out;
  if (c.checks.empty() || !tr.ok()) return out;
  const Schedule& s = tr.schedule;
  const bool fixed = s.size() == 1;
  auto max_of = [](const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); };
  for (const std::string& id : c.checks) {
    if (id == "identity_z") {
      const auto z = fixed ? aux_z_fixed(tr, s[0].beta) : aux_z_multistage(tr, s.A1());
      const double w = max_of(z_identity_residuals(tr, z));
      out.push_back({id, w <= 1e-10, w});
    } else if (id == "ema") {
      const double w = max_of(ema_residuals(tr));
      out.push_back({id, w <= 1e-10, w});
    } else if (id == "weights") {
      const auto betas = s.beta_per_iteration();
      const double w = max_of(weight_sum_residuals(betas));
      out.push_back({id, w <= 1e-12, w});
    } else if (id == "reconstruct_x") {
      if (!fixed) {
        out.push_back({id, true, 0.0});
        continue;
      }
      const double w = max_of(reconstruction_residuals(tr, aux_z_fixed(tr, s[0].beta), s[0].beta));
      out.push_back({id, w <= 1e-8, w});
    } else if (id == "lemma2") {
      const auto rows = fixed ? check_deviation_pathwise(tr, s[0].beta, p.L) : check_deviation_pathwise_multistage(tr, p.L);
      bool pass = true;
      double worst = 0.0;
      for (const auto& r : rows) {
        pass = pass && r.pass;
        const double rel = r.rhs > 0.0 ? r.margin / r.rhs : r.margin;
        worst = std::min(worst, rel);
      }
      out.push_back({id, pass, worst});
    }
  }
  return out;
}

}  // namespace detail

/// Runs every seed of the config (seeds in parallel) without touching the filesystem.
inline ExperimentResult execute(const ExperimentConfig& cfg, unsigned workers = 0) {
  ExperimentResult res;
  res.config = cfg;
  res.hash = config_hash(cfg);
  res.problem_key = problem_key(cfg);
  const ProblemSpec p = build_problem(cfg.problem);
  const Vec x0 = initial_point(cfg, p);
  const NoiseModel nm = build_noise(cfg.noise, p, x0);
  const Schedule sched = build_schedule(cfg);
  res.L = p.L;
  res.mu = p.mu;
  res.f_star = p.f_star;
  res.sigma2_certificate = nm.sigma2_certificate;
  res.batches_per_epoch = cfg.run.batches_per_epoch > 0 ? cfg.run.batches_per_epoch : 1;
  Recording rec = parse_recording(cfg.recording);
  if (!cfg.checks.empty()) rec = Recording::full();

  res.records.resize(cfg.seeds.size());
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  auto one = [&](std::size_t i) {
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const Trajectory tr = run_multistage(p, nm, x0, sched, cfg.seeds[i], rec);
      RunRecord& r = res.records[i];
      r.config_hash = res.hash;
      r.seed = cfg.seeds[i];
      r.series = epoch_series(tr, res.batches_per_epoch);
      r.status = tr.status;
      r.steps = tr.steps;
      r.message = tr.message;
      r.final_loss = r.series.empty() ? std::numeric_limits<double>::quiet_NaN() : r.series.back().loss_epoch_avg;
      r.final_gap = tr.x_final.allFinite() ? objective(p, tr.x_final) - p.f_star : std::numeric_limits<double>::infinity();
      r.checks = detail::run_pathwise_checks(cfg, p, tr);
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    const unsigned nw = static_cast<unsigned>(std::min<std::size_t>(workers, cfg.seeds.size()));
    for (unsigned w = 0; w < nw; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < cfg.seeds.size();) one(i);
      });
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return res;
}

inline void write_series_csv(const RunRecord& r, std::ostream& out) {
  out << "epoch,k_end,loss_epoch_avg,grad_norm_sq_mean,stage\n" << std::setprecision(17);
  for (const EpochRow& e : r.series)
    out << e.epoch << ',' << e.k_end << ',' << e.loss_epoch_avg << ',' << e.grad_norm_sq_mean << ',' << e.stage << '\n';
}

namespace detail {
inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}
inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
}  // namespace detail

/// Seed-mean of a metric per epoch ("loss_epoch_avg" or "grad_norm_sq_mean").
inline std::vector<double> seed_mean_series(const ExperimentResult& res, const std::string& metric) {
  std::vector<double> out;
  if (res.records.empty()) return out;
  std::size_t E = res.records.front().series.size();
  for (const RunRecord& r : res.records) E = std::min(E, r.series.size());
  for (std::size_t e = 0; e < E; ++e) {
    std::vector<double> v;
    for (const RunRecord& r : res.records) v.push_back(metric == "grad_norm_sq_mean" ? r.series[e].grad_norm_sq_mean : r.series[e].loss_epoch_avg);
    std::sort(v.begin(), v.end());  // order-independent summation
    out.push_back(detail::mean_of(v));
  }
  return out;
}

inline json summary_json(const ExperimentResult& res) {
  json j;
  j["name"] = res.config.name;
  j["config_hash"] = res.hash;
  j["config"] = to_json(res.config);
  j["problem"] = {{"L", res.L}, {"mu", res.mu}, {"f_star", res.f_star}, {"sigma2_certificate", res.sigma2_certificate}};
  j["batches_per_epoch"] = res.batches_per_epoch;
  j["seeds"] = json::array();
  std::vector<double> finals, gaps;
  for (const RunRecord& r : res.records) {
    json checks = json::array();
    for (const CheckOutcome& c : r.checks) checks.push_back({{"check", c.check}, {"pass", c.pass}, {"worst", detail::num(c.worst)}});
    j["seeds"].push_back({{"seed", r.seed}, {"status", to_string(r.status)}, {"steps", r.steps}, {"message", r.message},
                          {"final_loss", detail::num(r.final_loss)}, {"final_gap", detail::num(r.final_gap)}, {"checks", checks}});
    if (r.status == RunStatus::completed) {
      finals.push_back(r.final_loss);
      gaps.push_back(r.final_gap);
    }
  }
  std::sort(finals.begin(), finals.end());
  std::sort(gaps.begin(), gaps.end());
  j["final_loss"] = {{"mean", detail::num(detail::mean_of(finals))}, {"std", detail::num(detail::std_of(finals))}, {"n", finals.size()}};
  j["final_gap"] = {{"mean", detail::num(detail::mean_of(gaps))}, {"std", detail::num(detail::std_of(gaps))}, {"n", gaps.size()}};
  json epochs = json::array();
  if (!res.records.empty()) {
    std::size_t E = res.records.front().series.size();
    for (const RunRecord& r : res.records) E = std::min(E, r.series.size());
    for (std::size_t e = 0; e < E; ++e) {
      std::vector<double> v;
      for (const RunRecord& r : res.records) v.push_back(r.series[e].loss_epoch_avg);
      std::sort(v.begin(), v.end());
      epochs.push_back({{"epoch", e + 1}, {"loss_mean", detail::num(detail::mean_of(v))}, {"loss_std", detail::num(detail::std_of(v))}});
    }
  }
  j["epochs"] = epochs;
  return j;
}

/// Writes seed_<s>.csv per seed and summary.json into dir.
inline void write_experiment(const ExperimentResult& res, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const RunRecord& r : res.records) {
    std::ofstream out(dir / ("seed_" + std::to_string(r.seed) + ".csv"));
    if (!out) throw std::runtime_error("cannot write into " + dir.string());
    write_series_csv(r, out);
  }
  std::ofstream s(dir / "summary.json");
  s << summary_json(res).dump(2) << '\n';
}

/// Executes the config and writes its files under out_dir (the config's output_dir when empty).
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir = {}, unsigned workers = 0) {
  ExperimentResult res = execute(cfg, workers);
  write_experiment(res, out_dir.empty() ? cfg.output_dir : out_dir);
  return res;
}

// ---------------------------------------------------------------------------
// Comparisons
// ---------------------------------------------------------------------------

enum class Phase { initial, final_ };

/// Epoch compared in a phase: max(1, round(E/10)) initially, E at the end.
inline std::int64_t phase_epoch(Phase ph, std::int64_t epochs) {
  return ph == Phase::initial ? std::max<std::int64_t>(1, std::llround(0.1 * static_cast<double>(epochs))) : epochs;
}

struct Comparison {
  std::string metric;
  std::int64_t epoch = 0;
  std::vector<double> diffs;  ///< a - b per seed
  double mean_diff = 0.0;
  int sign = 0;  ///< sign of mean_diff
  bool confident = false;
  std::string better;  ///< "a", "b" or "tie" (lower metric wins)
};

/// Paired comparison of two experiments on the same problem and seeds at one epoch.
inline Comparison compare_at_epoch(const ExperimentResult& a, const ExperimentResult& b, const std::string& metric, std::int64_t epoch) {
  if (a.problem_key != b.problem_key) throw std::invalid_argument("compare_runs: records are on different problems");
  if (metric != "loss_epoch_avg" && metric != "grad_norm_sq_mean") throw std::invalid_argument("compare_runs: unknown metric " + metric);
  std::vector<std::uint64_t> sa, sb;
  for (const auto& r : a.records) sa.push_back(r.seed);
  for (const auto& r : b.records) sb.push_back(r.seed);
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  if (sa != sb) throw std::invalid_argument("compare_runs: records use different seeds");
  if (sa.empty()) throw std::invalid_argument("compare_runs: no records");
  Comparison c;
  c.metric = metric;
  c.epoch = epoch;
  for (std::uint64_t s : sa) {
    const RunRecord& ra = a.for_seed(s);
    const RunRecord& rb = b.for_seed(s);
    if (epoch < 1 || static_cast<std::size_t>(epoch) > ra.series.size() || static_cast<std::size_t>(epoch) > rb.series.size())
      throw std::invalid_argument("compare_runs: epoch " + std::to_string(epoch) + " not available for seed " + std::to_string(s));
    const EpochRow& ea = ra.series[static_cast<std::size_t>(epoch - 1)];
    const EpochRow& eb = rb.series[static_cast<std::size_t>(epoch - 1)];
    c.diffs.push_back(metric == "loss_epoch_avg" ? ea.loss_epoch_avg - eb.loss_epoch_avg : ea.grad_norm_sq_mean - eb.grad_norm_sq_mean);
  }
  std::vector<double> sorted = c.diffs;
  std::sort(sorted.begin(), sorted.end());
  c.mean_diff = detail::mean_of(sorted);
  c.sign = c.mean_diff > 0.0 ? 1 : (c.mean_diff < 0.0 ? -1 : 0);
  c.confident = c.sign != 0;
  for (double d : c.diffs) c.confident = c.confident && ((d > 0.0 ? 1 : (d < 0.0 ? -1 : 0)) == c.sign);
  c.better = c.sign < 0 ? "a" : (c.sign > 0 ? "b" : "tie");
  return c;
}

inline Comparison compare_runs(const ExperimentResult& a, const ExperimentResult& b, const std::string& metric, Phase ph) {
  std::size_t E = std::numeric_limits<std::size_t>::max();
  for (const auto& r : a.records) E = std::min(E, r.series.size());
  for (const auto& r : b.records) E = std::min(E, r.series.size());
  if (E == 0 || E == std::numeric_limits<std::size_t>::max()) throw std::invalid_argument("compare_runs: empty series");
  return compare_at_epoch(a, b, metric, phase_epoch(ph, static_cast<std::int64_t>(E)));
}

// ---------------------------------------------------------------------------
// Plot data
// ---------------------------------------------------------------------------

struct PlotSeries {
  std::string label;
  std::vector<double> values;  ///< index e holds epoch e+1
};

inline std::vector<PlotSeries> plot_series(const std::vector<std::pair<std::string, const ExperimentResult*>>& runs, const std::string& metric) {
  std::vector<PlotSeries> out;
  for (const auto& [label, r] : runs) out.push_back({label, seed_mean_series(*r, metric)});
  return out;
}

inline void write_plot_csv(const std::vector<PlotSeries>& series, std::ostream& out) {
  out << "series,epoch,value\n" << std::setprecision(17);
  for (const PlotSeries& s : series)
    for (std::size_t e = 0; e < s.values.size(); ++e) out << s.label << ',' << e + 1 << ',' << s.values[e] << '\n';
}

/// Static line chart; the axes span exactly the data range.
inline void write_plot_svg(const std::vector<PlotSeries>& series, const std::string& title, std::ostream& out) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const PlotSeries& s : series)
    for (std::size_t e = 0; e < s.values.size(); ++e) {
      if (!std::isfinite(s.values[e])) continue;
      xmin = std::min(xmin, static_cast<double>(e + 1));
      xmax = std::max(xmax, static_cast<double>(e + 1));
      ymin = std::min(ymin, s.values[e]);
      ymax = std::max(ymax, s.values[e]);
    }
  if (!std::isfinite(xmin)) xmin = xmax = ymin = ymax = 0.0;
  const double W = 640, Hh = 400, ml = 70, mr = 150, mt = 30, mb = 40;
  const double pw = W - ml - mr, ph = Hh - mt - mb;
  auto sx = [&](double x) { return xmax > xmin ? ml + (x - xmin) / (xmax - xmin) * pw : ml + pw / 2; };
  auto sy = [&](double y) { return ymax > ymin ? mt + (ymax - y) / (ymax - ymin) * ph : mt + ph / 2; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream o;
  o << std::setprecision(10);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << Hh << "\" data-x-min=\"" << xmin << "\" data-x-max=\""
    << xmax << "\" data-y-min=\"" << ymin << "\" data-y-max=\"" << ymax << "\">\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << Hh << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << ml << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << ml << "\" y=\"" << Hh - 10 << "\" font-size=\"11\">" << xmin << "</text>\n";
  o << "<text x=\"" << ml + pw << "\" y=\"" << Hh - 10 << "\" font-size=\"11\" text-anchor=\"end\">" << xmax << "</text>\n";
  o << "<text x=\"" << ml - 5 << "\" y=\"" << mt + ph << "\" font-size=\"11\" text-anchor=\"end\">" << ymin << "</text>\n";
  o << "<text x=\"" << ml - 5 << "\" y=\"" << mt + 10 << "\" font-size=\"11\" text-anchor=\"end\">" << ymax << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* col = colors[i % 8];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (std::size_t e = 0; e < series[i].values.size(); ++e) {
      if (!std::isfinite(series[i].values[e])) continue;
      o << (first ? "" : " ") << sx(static_cast<double>(e + 1)) << ',' << sy(series[i].values[e]);
      first = false;
    }
    o << "\"/>\n";
    o << "<text x=\"" << ml + pw + 10 << "\" y=\"" << mt + 15 * (i + 1) << "\" font-size=\"11\" fill=\"" << col << "\">" << series[i].label << "</text>\n";
  }
  o << "</svg>\n";
  out << o.str();
}

/// plot_<metric>.csv and plot_<metric>.svg under dir for each metric.
inline void emit_plotdata(const std::vector<std::pair<std::string, const ExperimentResult*>>& runs, const std::filesystem::path& dir,
                          const std::vector<std::string>& metrics = {"loss_epoch_avg", "grad_norm_sq_mean"}) {
  std::filesystem::create_directories(dir);
  for (const std::string& m : metrics) {
    const auto series = plot_series(runs, m);
    std::ofstream csv(dir / ("plot_" + m + ".csv"));
    write_plot_csv(series, csv);
    std::ofstream svg(dir / ("plot_" + m + ".svg"));
    write_plot_svg(series, m, svg);
  }
}

}  // namespace sgdm
