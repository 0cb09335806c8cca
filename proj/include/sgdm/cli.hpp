#pragma once

#include "sgdm/harness.hpp"
#include "sgdm/schedule.hpp"
#include "sgdm/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace sgdm {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2 };

namespace cli_detail {

inline std::vector<std::int64_t> parse_int_list(const std::string& csv, const std::string& flag) {
  std::vector<std::int64_t> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::logic_error&) {
      throw ConfigError(flag, "'" + tok + "' is not an integer");
    }
    if (used != tok.size()) throw ConfigError(flag, "'" + tok + "' is not an integer");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(flag, "empty list");
  return out;
}

inline std::vector<std::string> split(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", "invalid JSON in " + path + ": " + e.what());
  }
}

/// Sets a dotted path such as "algorithm.alpha" inside j.
inline void set_path(json& j, const std::string& dotted, const json& value) {
  json* cur = &j;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("--param", "empty parameter path");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->is_object()) throw ConfigError(dotted, "not an object path");
    cur = &(*cur)[parts[i]];
    if (cur->is_null()) *cur = json::object();
  }
  (*cur)[parts.back()] = value;
}

inline json parse_value(const std::string& s) {
  try {
    return json::parse(s);
  } catch (const json::parse_error&) {
    return json(s);
  }
}

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

inline json plan_json(const Schedule& s, const ValidationReport& vr, double L) {
  json stages = json::array();
  for (std::size_t i = 0; i < s.size(); ++i)
    stages.push_back({{"stage", i + 1}, {"alpha", s[i].alpha}, {"beta", s[i].beta}, {"length", s[i].length}, {"k0", k0(s[i].beta)}});
  json checks = json::array();
  for (const auto& e : vr.entries) checks.push_back({{"name", e.name}, {"pass", e.pass}, {"margin", e.margin}, {"evaluated", e.evaluated}});
  return {{"stages", stages},
          {"A1", s.A1()},
          {"A2", s.A2()},
          {"L", L},
          {"mode", vr.mode == ValidationMode::theoretical ? "theoretical" : "practical"},
          {"practical_ok", vr.practical_ok},
          {"theoretical_ok", vr.theoretical_ok},
          {"validation", checks}};
}

inline void plan_table(const Schedule& s, const ValidationReport& vr, std::ostream& out) {
  out << "stage  alpha        beta         length  k0\n";
  for (std::size_t i = 0; i < s.size(); ++i)
    out << std::left << std::setw(7) << i + 1 << std::setw(13) << fmt(s[i].alpha) << std::setw(13) << fmt(s[i].beta) << std::setw(8)
        << s[i].length << k0(s[i].beta) << '\n';
  out << "A1 = " << fmt(s.A1()) << ", A2 = " << fmt(s.A2()) << '\n';
  for (const auto& e : vr.entries)
    out << std::setw(22) << e.name << (e.evaluated ? (e.pass ? "pass" : "FAIL") : "skip") << "  margin " << fmt(e.margin) << '\n';
  out << std::right;
}

inline void report_table(const DiagnosticsReport& r, std::ostream& out) {
  for (const auto& c : r.checks)
    out << (c.pass ? "PASS " : "FAIL ") << std::left << std::setw(24) << c.check << std::right << " rows " << c.rows << ", failed "
        << c.failed << ", worst margin " << fmt(c.worst_margin) << " at k=" << c.worst_k << (c.detail.empty() ? "" : "  (" + c.detail + ")")
        << '\n';
  out << (r.pass() ? "all checks passed" : "some checks failed") << " (horizon H = " << r.horizon << ")\n";
}

inline json run_summary_json(const ExperimentResult& res) {
  json j = summary_json(res);
  j.erase("epochs");
  j.erase("config");
  return j;
}

}  // namespace cli_detail

/// Entry point of sgdm_lab; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"SGDM and multistage SGDM laboratory", "sgdm_lab"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all");

  std::string format = "table", out_dir, config_path, lengths_csv, mode = "practical", checks_csv = "all", param, values_csv;
  double a1 = 0.0, a2 = 0.0, L = 1.0;
  std::uint64_t seed = 0;
  std::int64_t epochs = 0, batches = 0;

  auto add_format = [&](CLI::App* s) { s->add_option("--format", format, "json or table")->check(CLI::IsMember({"json", "table"})); };

  CLI::App* plan = app.add_subcommand("plan", "Derive (alpha_i, beta_i) from A1, A2 and stage lengths");
  plan->add_option("--a1", a1, "A1 = alpha_i beta_i / (1 - beta_i)")->required();
  plan->add_option("--a2", a2, "A2 = alpha_i T_i")->required();
  plan->add_option("--lengths", lengths_csv, "stage lengths, comma separated")->required();
  plan->add_option("--L", L, "smoothness constant for the theoretical checks");
  plan->add_option("--mode", mode, "practical or theoretical")->check(CLI::IsMember({"practical", "theoretical"}));
  plan->add_option("--out", out_dir, "directory for plan.json");
  add_format(plan);

  CLI::App* run = app.add_subcommand("run", "Run an experiment config");
  CLI::Option* seed_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* batches_opt = nullptr;
  run->add_option("--config", config_path, "experiment JSON")->required();
  run->add_option("--out", out_dir, "output directory (overrides output_dir)");
  seed_opt = run->add_option("--seed", seed, "run this single seed instead of the config's list");
  epochs_opt = run->add_option("--epochs", epochs, "override run.epochs");
  batches_opt = run->add_option("--batches-per-epoch", batches, "override run.batches_per_epoch");
  add_format(run);

  CLI::App* verify = app.add_subcommand("verify", "Run the theory check suite");
  CLI::Option* vseed_opt = nullptr;
  verify->add_option("--config", config_path, "config with problem, noise and verify sections");
  verify->add_option("--check", checks_csv, "check ids, comma separated, or all");
  verify->add_option("--out", out_dir, "directory for report.json and report.csv");
  vseed_opt = verify->add_option("--seed", seed, "base seed of the suite");
  add_format(verify);

  CLI::App* sweep = app.add_subcommand("sweep", "Run a config over a grid of one parameter");
  CLI::Option* sseed_opt = nullptr;
  CLI::Option* sepochs_opt = nullptr;
  CLI::Option* sbatches_opt = nullptr;
  sweep->add_option("--config", config_path, "experiment JSON")->required();
  sweep->add_option("--param", param, "dotted key, e.g. algorithm.alpha")->required();
  sweep->add_option("--values", values_csv, "comma separated values")->required();
  sweep->add_option("--out", out_dir, "output directory (overrides output_dir)");
  sseed_opt = sweep->add_option("--seed", seed, "run this single seed instead of the config's list");
  sepochs_opt = sweep->add_option("--epochs", epochs, "override run.epochs");
  sbatches_opt = sweep->add_option("--batches-per-epoch", batches, "override run.batches_per_epoch");
  add_format(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  const bool as_json = format == "json";
  try {
    if (*plan) {
      const auto lengths = cli_detail::parse_int_list(lengths_csv, "--lengths");
      if (!(L > 0.0)) throw ConfigError("--L", "must be > 0");
      Schedule s;
      try {
        s = plan_from_lengths(a1, a2, lengths);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("--lengths", e.what());
      }
      const ValidationReport vr = validate(s, L, mode == "theoretical" ? ValidationMode::theoretical : ValidationMode::practical);
      const json j = cli_detail::plan_json(s, vr, L);
      if (as_json)
        out << j.dump(2) << '\n';
      else
        cli_detail::plan_table(s, vr, out);
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream(std::filesystem::path(out_dir) / "plan.json") << j.dump(2) << '\n';
      }
      const bool ok = mode == "theoretical" ? vr.theoretical_ok : vr.practical_ok;
      return ok ? kExitOk : kExitCheckFailed;
    }

    auto load_with_overrides = [&](bool seed_set, bool epochs_set, bool batches_set) {
      json j = cli_detail::read_json_file(config_path);
      if (!j.is_object()) throw ConfigError("", "config must be a JSON object");
      if (seed_set) j["seeds"] = json::array({seed});
      if (epochs_set) cli_detail::set_path(j, "run.epochs", epochs);
      if (batches_set) cli_detail::set_path(j, "run.batches_per_epoch", batches);
      return j;
    };

    if (*run) {
      const json j = load_with_overrides(seed_opt->count() > 0, epochs_opt->count() > 0, batches_opt->count() > 0);
      const ExperimentConfig cfg = parse_config(j);
      const std::string dir = out_dir.empty() ? cfg.output_dir : out_dir;
      const ExperimentResult res = run_experiment(cfg, dir);
      if (as_json) {
        out << cli_detail::run_summary_json(res).dump(2) << '\n';
      } else {
        out << "config " << res.hash << " -> " << dir << '\n';
        for (const auto& r : res.records) {
          out << "seed " << r.seed << ": " << to_string(r.status) << ", final epoch loss " << cli_detail::fmt(r.final_loss) << ", final gap "
              << cli_detail::fmt(r.final_gap);
          for (const auto& c : r.checks) out << ", " << c.check << (c.pass ? " pass" : " FAIL");
          out << '\n';
          if (!r.message.empty()) out << "  " << r.message << '\n';
        }
      }
      for (const auto& r : res.records)
        for (const auto& c : r.checks)
          if (!c.pass) return kExitCheckFailed;
      return kExitOk;
    }

    if (*verify) {
      json j = config_path.empty() ? default_verify_json() : cli_detail::read_json_file(config_path);
      if (vseed_opt->count() > 0) cli_detail::set_path(j, "verify.seed", seed);
      const ExperimentConfig cfg = parse_config(j);
      const std::vector<std::string> checks = parse_check_list(checks_csv);
      const DiagnosticsReport rep = run_verify(cfg, checks);
      if (as_json)
        out << to_json(rep).dump(2) << '\n';
      else
        cli_detail::report_table(rep, out);
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream(std::filesystem::path(out_dir) / "report.json") << to_json(rep).dump(2) << '\n';
        std::ofstream csv(std::filesystem::path(out_dir) / "report.csv");
        write_csv(rep, csv);
      }
      return rep.pass() ? kExitOk : kExitCheckFailed;
    }

    if (*sweep) {
      const std::vector<std::string> values = cli_detail::split(values_csv);
      if (values.empty()) throw ConfigError("--values", "no values given");
      const json base = load_with_overrides(sseed_opt->count() > 0, sepochs_opt->count() > 0, sbatches_opt->count() > 0);
      std::vector<ExperimentResult> results;
      std::string dir;
      for (const std::string& v : values) {
        json j = base;
        cli_detail::set_path(j, param, cli_detail::parse_value(v));
        ExperimentConfig cfg = parse_config(j);
        if (dir.empty()) dir = out_dir.empty() ? cfg.output_dir : out_dir;
        ExperimentResult res = execute(cfg);
        write_experiment(res, std::filesystem::path(dir) / (param + "=" + v));
        results.push_back(std::move(res));
      }
      std::vector<std::pair<std::string, const ExperimentResult*>> series;
      for (std::size_t i = 0; i < values.size(); ++i) series.emplace_back(param + "=" + values[i], &results[i]);
      emit_plotdata(series, dir);

      json table = json::array();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto mean = seed_mean_series(results[i], "loss_epoch_avg");
        const auto E = static_cast<std::int64_t>(mean.size());
        json row = {{"value", cli_detail::parse_value(values[i])}, {"config_hash", results[i].hash}};
        std::string status = "completed";
        for (const auto& r : results[i].records)
          if (r.status != RunStatus::completed) status = to_string(r.status);
        row["status"] = status;
        if (E > 0) {
          row["initial_epoch"] = phase_epoch(Phase::initial, E);
          row["initial_loss"] = detail::num(mean[static_cast<std::size_t>(phase_epoch(Phase::initial, E) - 1)]);
          row["final_loss"] = detail::num(mean.back());
        }
        if (i > 0 && E > 0 && status == "completed" && results[i].problem_key == results[0].problem_key) {
          for (Phase ph : {Phase::initial, Phase::final_}) {
            const Comparison c = compare_runs(results[i], results[0], "loss_epoch_avg", ph);
            row[ph == Phase::initial ? "vs_first_initial" : "vs_first_final"] = {
                {"mean_diff", c.mean_diff}, {"better", c.better == "a" ? "this" : (c.better == "b" ? "first" : "tie")}, {"confident", c.confident}};
          }
        }
        table.push_back(row);
      }
      std::ofstream(std::filesystem::path(dir) / "sweep.json") << json{{"param", param}, {"rows", table}}.dump(2) << '\n';
      if (as_json) {
        out << json{{"param", param}, {"rows", table}}.dump(2) << '\n';
      } else {
        out << std::left << std::setw(14) << "value" << std::setw(12) << "status" << std::setw(16) << "initial_loss" << std::setw(16) << "final_loss"
            << "vs first (initial / final)\n";
        for (const auto& row : table) {
          auto cell = [&](const char* k) { return row.contains(k) && row[k].is_number() ? cli_detail::fmt(row[k].get<double>()) : std::string("-"); };
          std::string cmp = "-";
          if (row.contains("vs_first_initial")) {
            auto one = [&](const json& c) { return c["better"].get<std::string>() + (c["confident"].get<bool>() ? "" : "?"); };
            cmp = one(row["vs_first_initial"]) + " / " + one(row["vs_first_final"]);
          }
          out << std::setw(14) << row["value"].dump() << std::setw(12) << row["status"].get<std::string>() << std::setw(16) << cell("initial_loss")
              << std::setw(16) << cell("final_loss") << cmp << '\n';
        }
        out << std::right << "('?' marks comparisons where seeds disagree in sign)\n";
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace sgdm
