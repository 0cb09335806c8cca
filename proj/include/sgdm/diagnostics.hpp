#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace sgdm {

/// One evaluated inequality or identity. margin = rhs - lhs, so failure means a negative margin past tolerance.
struct CheckResult {
  std::string check;
  std::int64_t k = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  double margin = 0.0;
  bool pass = true;
};

struct CheckSummary {
  std::string check;
  bool pass = true;
  std::size_t rows = 0;
  std::size_t failed = 0;
  double worst_margin = std::numeric_limits<double>::infinity();
  std::int64_t worst_k = 0;
  std::string detail;
};

/// Per-k rows plus one summary per named check.
struct DiagnosticsReport {
  std::vector<CheckResult> rows;
  std::vector<CheckSummary> checks;
  std::size_t horizon = 0;
  std::map<std::string, double> info;

  void add(CheckResult r) { rows.push_back(std::move(r)); }

  /// Summarize every row named `check` added so far.
  CheckSummary& summarize(const std::string& check, std::string detail = {}) {
    CheckSummary s;
    s.check = check;
    s.detail = std::move(detail);
    for (const CheckResult& r : rows) {
      if (r.check != check) continue;
      ++s.rows;
      if (!r.pass) ++s.failed;
      if (r.margin < s.worst_margin || s.rows == 1) {
        s.worst_margin = r.margin;
        s.worst_k = r.k;
      }
    }
    s.pass = s.failed == 0;
    checks.push_back(std::move(s));
    return checks.back();
  }

  bool pass() const {
    for (const CheckSummary& s : checks)
      if (!s.pass) return false;
    return true;
  }

  const CheckSummary* find(const std::string& check) const {
    for (const CheckSummary& s : checks)
      if (s.check == check) return &s;
    return nullptr;
  }
};

namespace detail {
inline nlohmann::json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}
}  // namespace detail

inline nlohmann::json to_json(const CheckSummary& s) {
  return {{"check", s.check},       {"pass", s.pass},          {"rows", s.rows},
          {"failed", s.failed},     {"worst_margin", detail::finite_or_null(s.worst_margin)},
          {"worst_k", s.worst_k},   {"detail", s.detail}};
}

inline nlohmann::json to_json(const DiagnosticsReport& r) {
  nlohmann::json j;
  j["pass"] = r.pass();
  j["horizon"] = r.horizon;
  j["checks"] = nlohmann::json::array();
  for (const CheckSummary& s : r.checks) j["checks"].push_back(to_json(s));
  nlohmann::json info = nlohmann::json::object();
  for (const auto& [k, v] : r.info) info[k] = detail::finite_or_null(v);
  j["info"] = info;
  return j;
}

inline void write_csv(const DiagnosticsReport& r, std::ostream& out) {
  out << "k,check_name,lhs,rhs,margin,pass\n" << std::setprecision(17);
  for (const CheckResult& c : r.rows)
    out << c.k << ',' << c.check << ',' << c.lhs << ',' << c.rhs << ',' << c.margin << ',' << (c.pass ? 1 : 0) << '\n';
}

}  // namespace sgdm
