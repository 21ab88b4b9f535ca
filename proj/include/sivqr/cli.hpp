#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>

#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"
#include "sivqr/estimator.hpp"
#include "sivqr/normal.hpp"
#include "sivqr/parallel.hpp"

namespace sivqr::cli {

struct CliConfig {
  std::string input_path;
  std::string depvar;
  std::vector<std::string> exog;
  std::vector<std::string> endog;
  std::vector<std::string> instruments;
  std::optional<std::string> weight_col;
  double quantile = 0.0;
  std::optional<double> bandwidth;
  double level = 95.0;
  int reps = 0;
  std::uint64_t seed = 112358;
  bool noconstant = false;
  bool nodots = false;
  bool log_iterations = false;
  std::optional<std::vector<double>> initial;
  std::optional<std::string> json_out;
  unsigned workers = 1;
};

enum ExitCode : int { kSuccess = 0, kInputError = 2, kNumericalError = 3 };

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t\r");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

// Raw strings for options that need post-processing.
struct CliBinding {
  std::string exog, endog, iv, initial;
  std::optional<double> bandwidth;
  std::optional<std::string> weight, json;
};

/// Registers every command-line flag on `app`, writing into `cfg`. Comma
/// lists are split after parsing by finalize_config().
inline void bind_options(CLI::App& app, CliConfig& cfg, CliBinding& raw) {
  app.add_option("--data", cfg.input_path, "CSV file with a header row")->required();
  app.add_option("--y", cfg.depvar, "Dependent variable")->required();
  app.add_option("--exog", raw.exog, "Exogenous regressors (comma list)");
  app.add_option("--endog", raw.endog, "Endogenous regressors (comma list)")->required();
  app.add_option("--iv", raw.iv, "Excluded instruments (comma list)")->required();
  app.add_option("--weight", raw.weight, "Observation weight column");
  app.add_option("--quantile", cfg.quantile,
                 "Quantile level in (0,1), or percentile in [1,100)")
      ->required();
  app.add_option("--bandwidth", raw.bandwidth,
                 "Smoothing bandwidth (default: plug-in; 0 = smallest feasible)");
  app.add_option("--level", cfg.level, "Confidence level in percent")->capture_default_str();
  app.add_option("--reps", cfg.reps, "Bayesian bootstrap replications (0 = analytic SEs)")
      ->capture_default_str();
  app.add_option("--seed", cfg.seed, "Random-number seed")->capture_default_str();
  app.add_flag("--noconstant", cfg.noconstant, "Omit the intercept");
  app.add_flag("--nodots", cfg.nodots, "Suppress replication dots");
  app.add_flag("--log-iterations", cfg.log_iterations, "Print each solver iteration");
  app.add_option("--initial", raw.initial, "Initial coefficients (comma list)");
  app.add_option("--json", raw.json, "Write results as JSON to this path");
}

inline void finalize_config(CliConfig& cfg, const CliBinding& raw) {
  cfg.exog = split_list(raw.exog);
  cfg.endog = split_list(raw.endog);
  cfg.instruments = split_list(raw.iv);
  cfg.weight_col = raw.weight;
  cfg.json_out = raw.json;
  cfg.bandwidth = raw.bandwidth;
  if (!raw.initial.empty()) {
    std::vector<double> vals;
    for (const auto& tok : split_list(raw.initial)) {
      double v = 0.0;
      const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
        throw InputError("--initial: cannot parse '" + tok + "' as a number");
      vals.push_back(v);
    }
    cfg.initial = vals;
  }
  if (cfg.endog.empty() || cfg.instruments.empty())
    throw InputError("at least one endogenous regressor and one excluded instrument are required");
  if (cfg.bandwidth && !(*cfg.bandwidth >= 0.0)) throw InputError("--bandwidth must be >= 0");
  if (!(cfg.level > 0.0 && cfg.level < 100.0)) throw InputError("--level must lie in (0,100)");
  if (cfg.reps < 0) throw InputError("--reps must be >= 0");
  if (cfg.reps == 1) throw InputError("--reps must be 0 or at least 2");
  normalize_quantile(cfg.quantile);
}

/// Parses argv into a validated configuration. CLI11 parse errors propagate
/// as CLI::ParseError.
inline CliConfig parse_args(const std::vector<std::string>& args) {
  CLI::App app{"Smoothed IV quantile regression", "sivqr"};
  CliConfig cfg;
  CliBinding raw;
  bind_options(app, cfg, raw);
  std::vector<std::string> rev(args.rbegin(), args.rend());
  app.parse(rev);
  finalize_config(cfg, raw);
  return cfg;
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open data file '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw InputError("data file '" + path + "' is empty");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    t.rows.push_back(split_csv_line(line));
  }
  return t;
}

struct Dataset {
  EstimationProblem problem;
  std::vector<std::string> coef_names;  // X-column order
  std::size_t dropped_rows = 0;
};

inline bool is_missing_token(std::string_view s) { return s.empty() || s == "." || s == "NA"; }

/// Loads the named columns, drops rows with missing cells and builds the
/// problem. Exogenous regressors are instruments for themselves, so an
/// instrument that is also listed as exogenous is used once.
inline Dataset ingest_csv(const std::string& path, const CliConfig& cfg) {
  const CsvTable t = read_csv(path);
  auto column_of = [&](const std::string& name) {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) throw InputError("column '" + name + "' not found in " + path);
    return static_cast<std::size_t>(it - t.header.begin());
  };
  std::vector<std::string> instruments;
  for (const auto& v : cfg.instruments) {
    if (std::find(cfg.endog.begin(), cfg.endog.end(), v) != cfg.endog.end())
      throw InputError("'" + v + "' is listed both as endogenous and as an instrument");
    if (std::find(cfg.exog.begin(), cfg.exog.end(), v) == cfg.exog.end()) instruments.push_back(v);
  }

  const auto nrow = static_cast<Index>(t.rows.size());
  if (nrow == 0) throw InputError("no observations in " + path);
  auto load = [&](const std::vector<std::string>& names) {
    Matrix M(nrow, static_cast<Index>(names.size()));
    for (std::size_t j = 0; j < names.size(); ++j) {
      const std::size_t c = column_of(names[j]);
      for (Index i = 0; i < nrow; ++i) {
        const auto& row = t.rows[static_cast<std::size_t>(i)];
        const std::string cell = c < row.size() ? row[c] : std::string();
        if (is_missing_token(cell)) {
          M(i, static_cast<Index>(j)) = std::nan("");
          continue;
        }
        double v = 0.0;
        const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
          throw InputError("cannot parse '" + cell + "' in row " + std::to_string(i + 2) +
                           ", column '" + names[j] + "'");
        M(i, static_cast<Index>(j)) = v;
      }
    }
    return M;
  };

  const Vector y = load({cfg.depvar}).col(0);
  const Matrix exog = load(cfg.exog);
  const Matrix endog = load(cfg.endog);
  const Matrix instr = load(instruments);
  std::optional<Vector> w;
  if (cfg.weight_col) w = load({*cfg.weight_col}).col(0);

  std::size_t usable = 0;
  for (Index i = 0; i < nrow; ++i) {
    bool bad = std::isnan(y(i)) || (w && std::isnan((*w)(i)));
    bad = bad || exog.row(i).hasNaN() || endog.row(i).hasNaN() || instr.row(i).hasNaN();
    usable += bad ? 0 : 1;
  }
  const std::size_t p = cfg.endog.size() + cfg.exog.size() + (cfg.noconstant ? 0 : 1);
  if (usable == 0) throw InputError("no observations remain after removing rows with missing values");
  if (usable < p)
    throw InputError("only " + std::to_string(usable) + " usable rows for " + std::to_string(p) +
                     " coefficients");

  EstimationProblem prob =
      build_problem(y, exog, endog, instr, w, cfg.quantile, !cfg.noconstant);
  std::vector<std::string> names = cfg.endog;
  names.insert(names.end(), cfg.exog.begin(), cfg.exog.end());
  if (!cfg.noconstant) names.emplace_back("_cons");
  const auto dropped = t.rows.size() - static_cast<std::size_t>(prob.n());
  return {std::move(prob), std::move(names), dropped};
}

// ---------------------------------------------------------------------------
// Output

inline std::string json_number(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string json_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out + "\"";
}

inline std::string json_array(const Vector& v) {
  std::string out = "[";
  for (Index i = 0; i < v.size(); ++i) out += (i ? "," : "") + json_number(v(i));
  return out + "]";
}

/// Machine-readable results. Keys follow the stored-result names of the
/// original command (b, V, bwidth, bwidth_req, bwidth_max, N, reps, q).
inline std::string to_json(const FitResult& fit, const std::vector<std::string>& names,
                           const CliConfig& cfg) {
  std::ostringstream os;
  os << "{\n";
  os << "  \"cmd\": \"sivqr\",\n";
  os << "  \"depvar\": " << json_string(cfg.depvar) << ",\n";
  os << "  \"names\": [";
  for (std::size_t i = 0; i < names.size(); ++i) os << (i ? ", " : "") << json_string(names[i]);
  os << "],\n";
  os << "  \"q\": " << json_number(fit.tau) << ",\n";
  os << "  \"N\": " << fit.n_obs << ",\n";
  os << "  \"reps\": " << fit.reps << ",\n";
  os << "  \"level\": " << json_number(fit.level) << ",\n";
  os << "  \"vcetype\": " << json_string(vcetype_name(fit.vcov_kind)) << ",\n";
  os << "  \"b\": " << json_array(fit.beta) << ",\n";
  os << "  \"V\": [";
  for (Index i = 0; i < fit.cov.rows(); ++i)
    os << (i ? ", " : "") << json_array(fit.cov.row(i).transpose());
  os << "],\n";
  os << "  \"se\": " << json_array(fit.se) << ",\n";
  os << "  \"ci\": [";
  for (std::size_t i = 0; i < fit.ci.size(); ++i)
    os << (i ? ", " : "") << "[" << json_number(fit.ci[i].first) << ","
       << json_number(fit.ci[i].second) << "]";
  os << "],\n";
  const auto& bw = fit.bandwidth;
  os << "  \"bwidth\": " << json_number(bw.h_used) << ",\n";
  os << "  \"bwidth_req\": " << json_number(bw.h_requested) << ",\n";
  os << "  \"bwidth_max\": " << json_number(bw.candidates ? bw.h_max : NAN) << ",\n";
  if (bw.candidates) {
    os << "  \"bwidth_candidates\": {\"nonparametric\": "
       << json_number(bw.candidates->h_nonparametric)
       << ", \"gaussian_ref\": " << json_number(bw.candidates->h_gaussian_ref)
       << ", \"silverman\": " << json_number(bw.candidates->h_silverman) << "},\n";
  } else {
    os << "  \"bwidth_candidates\": null,\n";
  }
  os << "  \"bwidth_refined\": " << (bw.refined ? "true" : "false") << ",\n";
  os << "  \"bwidth_warning\": " << (bw.exceeds_max() ? "true" : "false") << ",\n";
  os << "  \"solver\": {\"iterations\": " << fit.solver.iterations
     << ", \"residual_inf_norm\": " << json_number(fit.solver.final_residual_inf_norm)
     << ", \"escalations\": " << fit.solver.bandwidth_escalations
     << ", \"homotopy_stages\": " << fit.solver.homotopy_stages
     << ", \"converged\": " << (fit.solver.converged ? "true" : "false") << "}\n";
  os << "}\n";
  return os.str();
}

// Right-aligned in `width`, always with at least one leading space so
// adjacent columns never run together.
inline std::string fmt_num(double v, int width, int prec, bool fixed = false) {
  std::ostringstream os;
  os << std::setprecision(prec);
  if (fixed) os << std::fixed;
  os << v;
  const std::string s = os.str();
  return std::string(static_cast<std::size_t>(std::max<int>(1, width - static_cast<int>(s.size()))), ' ') + s;
}

inline void render_table(std::ostream& os, const FitResult& fit,
                         const std::vector<std::string>& names, const CliConfig& cfg) {
  const auto& bw = fit.bandwidth;
  const std::string rule(78, '-');
  os << "Smoothed IV quantile regression" << std::string(17, ' ')
     << "Number of obs = " << std::setw(12) << fit.n_obs << '\n';
  os << "Quantile = " << std::setw(8) << std::setprecision(6) << fit.tau << std::string(29, ' ')
     << "Bandwidth     = " << std::setw(12) << std::setprecision(6) << bw.h_used << '\n';
  os << std::string(48, ' ') << "Requested bw  = " << std::setw(12) << std::setprecision(6)
     << bw.h_requested << '\n';
  if (bw.candidates)
    os << std::string(48, ' ') << "Max plug-in bw= " << std::setw(12) << std::setprecision(6)
       << bw.h_max << '\n';
  if (fit.vcov_kind == VcovKind::Bootstrap)
    os << std::string(48, ' ') << "Replications  = " << std::setw(12) << fit.reps << '\n';
  os << rule << '\n';
  const std::string vce = vcetype_name(fit.vcov_kind);
  os << std::setw(13) << "" << "|" << std::setw(24) << vce << '\n';
  std::ostringstream lvl;
  lvl << std::setprecision(4) << fit.level;
  os << std::setw(13) << cfg.depvar.substr(0, 12) << "|      Coef.   Std. Err.      z    P>|z|     ["
     << lvl.str() << "% Conf. Interval]\n";
  os << std::string(13, '-') << '+' << std::string(64, '-') << '\n';
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto i = static_cast<Index>(j);
    const double z = fit.beta(i) / fit.se(i);
    const double pval = 2.0 * normal::cdf(-std::abs(z));
    os << std::setw(13) << names[j].substr(0, 12) << "|" << fmt_num(fit.beta(i), 11, 7)
       << fmt_num(fit.se(i), 11, 7) << fmt_num(z, 9, 2, true) << fmt_num(pval, 8, 3, true)
       << fmt_num(fit.ci[j].first, 13, 7) << fmt_num(fit.ci[j].second, 12, 7) << '\n';
  }
  os << rule << '\n';
  os << "Instrumented: ";
  for (const auto& v : cfg.endog) os << v << ' ';
  os << "\nInstruments:  ";
  for (const auto& v : cfg.exog) os << v << ' ';
  for (const auto& v : cfg.instruments)
    if (std::find(cfg.exog.begin(), cfg.exog.end(), v) == cfg.exog.end()) os << v << ' ';
  os << '\n';
}

struct RunOutput {
  FitResult fit;
  std::vector<std::string> names;
  std::string json;
  std::size_t dropped_rows = 0;
  bool warning = false;
};

/// ingest -> estimate -> table on `out`; notices, dots and the iteration log
/// go to `err`; JSON is written to cfg.json_out when set.
inline RunOutput run_estimation(const CliConfig& cfg, std::ostream& out, std::ostream& err) {
  Dataset data = ingest_csv(cfg.input_path, cfg);
  if (data.dropped_rows > 0)
    err << "(" << data.dropped_rows << (data.dropped_rows == 1 ? " row" : " rows")
        << " dropped because of missing values)\n";

  EstimatorConfig ec;
  ec.bandwidth = cfg.bandwidth;
  ec.reps = cfg.reps;
  ec.seed = cfg.seed;
  ec.level = cfg.level;
  ec.workers = cfg.workers;
  if (cfg.initial) ec.initial = Eigen::Map<const Vector>(cfg.initial->data(),
                                                         static_cast<Index>(cfg.initial->size()));
  if (cfg.log_iterations) {
    ec.log = [&err](const IterationRecord& r) {
      err << "stage " << r.stage << "  h = " << std::setprecision(6) << r.h << "  iteration "
          << r.iteration << ":  |g|inf = " << std::scientific << std::setprecision(4)
          << r.residual_inf_norm << "  step = " << r.step_norm << std::defaultfloat << '\n';
    };
  }
  std::mutex dots_mu;
  int dots = 0;
  if (cfg.reps > 0 && !cfg.nodots) {
    err << "Bootstrap replications (" << cfg.reps << ")\n";
    ec.on_replication = [&] {
      std::lock_guard lock(dots_mu);
      err << '.';
      if (++dots % 50 == 0) err << std::setw(6) << dots << '\n';
      err.flush();
    };
  }

  RunOutput res;
  res.fit = estimate(data.problem, ec);
  if (cfg.reps > 0 && !cfg.nodots && dots % 50 != 0) err << '\n';
  res.names = std::move(data.coef_names);
  res.dropped_rows = data.dropped_rows;
  res.warning = res.fit.bandwidth.exceeds_max();
  res.json = to_json(res.fit, res.names, cfg);

  render_table(out, res.fit, res.names, cfg);
  if (res.warning)
    out << "Warning: bandwidth used exceeds the largest plug-in bandwidth; there may be deeper\n"
           "problems such as weak instruments (check instrument strength with a first-stage\n"
           "regression).\n";
  else if (res.fit.bandwidth.h_used > res.fit.bandwidth.h_requested && res.fit.bandwidth.candidates)
    out << "Note: bandwidth was increased above the plug-in value to find a numerical solution.\n";

  if (cfg.json_out) {
    std::ofstream js(*cfg.json_out, std::ios::binary);
    if (!js) throw InputError("cannot write JSON output to '" + *cfg.json_out + "'");
    js << res.json;
  }
  return res;
}

/// Entry point shared by the executable and the tests. Returns the exit code.
inline int main_with_args(const std::vector<std::string>& args, std::ostream& out,
                          std::ostream& err) {
  CliConfig cfg;
  try {
    cfg = parse_args(args);
  } catch (const CLI::CallForHelp&) {
    CLI::App app{"Smoothed IV quantile regression", "sivqr"};
    CliConfig tmp;
    CliBinding raw;
    bind_options(app, tmp, raw);
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  }
  cfg.workers = default_workers();
  try {
    run_estimation(cfg, out, err);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumericalError;
  }
  return kSuccess;
}

}  // namespace sivqr::cli
