// Batch entry points: estimate bounds on a CSV sample, invert to QTE bounds,
// run the simulation study, run inference, run solver diagnostics.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qtbounds/bounds.hpp"
#include "qtbounds/dataset.hpp"
#include "qtbounds/estimators.hpp"
#include "qtbounds/inference.hpp"
#include "qtbounds/serialize.hpp"
#include "qtbounds/silp.hpp"
#include "qtbounds/sim.hpp"

namespace fs = std::filesystem;
using qtb::Json;

namespace {

void err_line(const std::string& msg) {
  std::cerr << Json{{"level", "error"}, {"msg", msg}}.dump() << "\n";
}

void warn_line(const std::string& msg) {
  std::cerr << Json{{"level", "warning"}, {"msg", msg}}.dump() << "\n";
}

std::vector<double> parse_grid_spec(const std::string& spec) {
  // "lo:hi:count"
  double lo, hi;
  int count;
  if (std::sscanf(spec.c_str(), "%lf:%lf:%d", &lo, &hi, &count) != 3 || count < 2 || !(hi > lo))
    throw qtb::Error("bad grid spec '" + spec + "', expected lo:hi:count");
  std::vector<double> g;
  for (int i = 0; i < count; ++i)
    g.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1));
  return g;
}

struct DataArgs {
  std::string input;
  qtb::ColumnMap cols;
  std::string x_cols_raw;
  int reference_index = -1;

  void attach(CLI::App* app) {
    app->add_option("--input", input, "input CSV path")->required();
    app->add_option("--y-col", cols.y_col, "outcome column name");
    app->add_option("--d-col", cols.d_col, "treatment column name");
    app->add_option("--z-col", cols.z_col, "instrument column name");
    app->add_option("--x-cols", x_cols_raw, "comma-separated covariate columns");
    app->add_option("--reference-index", reference_index, "reference z index (default: largest)");
  }

  qtb::Dataset load() {
    if (!x_cols_raw.empty()) {
      std::string cur;
      for (char c : x_cols_raw) {
        if (c == ',') {
          cols.x_cols.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      cols.x_cols.push_back(cur);
    }
    return qtb::load_csv(input, cols, reference_index);
  }
};

struct BoundArgs {
  double tau = 100.0;
  bool smoothed = false;
  double margin_min = 0.05;
  std::string y0_spec = "-6:6:49";
  double trusted_lo = 0.0, trusted_hi = 0.0;
  bool has_trusted = false;
  bool no_fallback = false;
  int grid_cap = 2048;
  int threads = 0;

  void attach(CLI::App* app) {
    app->add_option("--tau", tau, "L2 ball radius squared (study value 100)");
    app->add_flag("--smoothed", smoothed, "use normal-smoothed CDF estimators");
    app->add_option("--margin-min", margin_min, "recession-margin gate for trusted points");
    app->add_option("--y0-grid", y0_spec, "evaluation grid lo:hi:count");
    app->add_option("--trusted-lo", trusted_lo, "study-mode trusted interval lower end");
    app->add_option("--trusted-hi", trusted_hi, "study-mode trusted interval upper end");
    app->add_flag("--no-fallback", no_fallback, "solve the SILP outside the trusted set too");
    app->add_option("--grid-cap", grid_cap, "constraint grid size cap");
    app->add_option("--threads", threads, "parallelism degree (0 = hardware)");
  }

  qtb::BoundConfig config() const {
    qtb::BoundConfig cfg;
    cfg.tau = tau;
    cfg.smoothed = smoothed;
    cfg.margin_min = margin_min;
    cfg.grid_cap = grid_cap;
    cfg.threads = threads;
    cfg.use_fallback_outside = !no_fallback;
    if (has_trusted) cfg.trusted_interval = {trusted_lo, trusted_hi};
    return cfg;
  }

  Json config_json(const std::string& cmd) const {
    Json cj;
    cj["command"] = cmd;
    cj["tau"] = tau;
    cj["smoothed"] = smoothed;
    cj["margin_min"] = margin_min;
    cj["y0_grid"] = y0_spec;
    cj["use_fallback_outside"] = !no_fallback;
    cj["grid_cap"] = grid_cap;
    if (has_trusted) cj["trusted_interval"] = {trusted_lo, trusted_hi};
    return cj;
  }
};

int write_bounds_artifacts(const qtb::BoundCurve& curve, const Json& header, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "bounds.csv");
    qtb::write_curve_csv(curve, header, out);
  }
  {
    Json j = header;
    j["curve"] = qtb::to_json(curve);
    qtb::write_json_file((out_dir / "bounds.json").string(), j);
  }
  {
    std::ofstream out(out_dir / "plotdata.csv");
    qtb::write_plotdata_csv(curve, out);
  }
  int failed = 0;
  for (std::size_t i = 0; i < curve.y0_grid.size(); ++i)
    if (curve.upper_code[i] == static_cast<int>(qtb::PointCode::failed) ||
        curve.lower_code[i] == static_cast<int>(qtb::PointCode::failed))
      ++failed;
  if (failed > 0) {
    warn_line(std::to_string(failed) + " grid points failed; see status codes");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributional/quantile treatment-effect bounds via semi-infinite LP"};
  app.require_subcommand(1);

  // ---- bounds ----
  auto* cmd_bounds = app.add_subcommand("bounds", "estimate CDF bound curves from a CSV sample");
  DataArgs b_data;
  BoundArgs b_cfg;
  std::string b_out = ".";
  b_data.attach(cmd_bounds);
  b_cfg.attach(cmd_bounds);
  cmd_bounds->add_option("--out", b_out, "output directory");
  auto* b_tl = cmd_bounds->get_option("--trusted-lo");
  auto* b_th = cmd_bounds->get_option("--trusted-hi");

  // ---- qte ----
  auto* cmd_qte = app.add_subcommand("qte", "quantile treatment effect bounds");
  DataArgs q_data;
  BoundArgs q_cfg;
  std::vector<double> q_levels{0.5};
  std::string q_out = ".";
  q_data.attach(cmd_qte);
  q_cfg.attach(cmd_qte);
  cmd_qte->add_option("--tau-q", q_levels, "quantile levels");
  cmd_qte->add_option("--out", q_out, "output directory");

  // ---- simulate ----
  auto* cmd_sim = app.add_subcommand("simulate", "Monte Carlo study");
  std::string sim_config_path, sim_out = ".";
  std::uint64_t sim_seed = 0;
  std::size_t sim_n = 100000;
  int sim_L = 2, sim_R = 200;
  std::vector<std::size_t> sim_Nlist{1000, 2000, 4000};
  double sim_level = 0.95, sim_tau = 100.0;
  std::string sim_y0_spec = "-6:6:49";
  bool figure_mode = false, smoke = false;
  int sim_threads = 0;
  cmd_sim->add_option("--config", sim_config_path, "SimParams JSON file");
  cmd_sim->add_option("--seed", sim_seed, "study seed")->required();
  cmd_sim->add_option("--n", sim_n, "large-sample size for figure mode");
  cmd_sim->add_option("--L", sim_L, "instrument support size");
  cmd_sim->add_option("--R", sim_R, "replications");
  cmd_sim->add_option("--N-list", sim_Nlist, "replication sample sizes");
  cmd_sim->add_option("--level", sim_level, "CI level");
  cmd_sim->add_option("--tau", sim_tau, "ball radius squared");
  cmd_sim->add_option("--y0-grid", sim_y0_spec, "y0 grid lo:hi:count");
  cmd_sim->add_flag("--figure-mode", figure_mode, "emit the four-panel figure file layout");
  cmd_sim->add_flag("--smoke", smoke, "small smoke profile (R=2, N=200)");
  cmd_sim->add_option("--threads", sim_threads, "parallelism degree");
  cmd_sim->add_option("--out", sim_out, "output directory");

  // ---- inference ----
  auto* cmd_inf = app.add_subcommand("inference", "numerical-delta confidence intervals");
  DataArgs i_data;
  double i_y0 = 1.0, i_level = 0.95, i_tn = 0.0, i_kappa = 0.5, i_tau = 100.0;
  int i_B = 200, i_threads = 0;
  std::uint64_t i_seed = 1;
  bool i_lower = false, i_exact = false, i_smoothed = false;
  std::string i_out = ".";
  i_data.attach(cmd_inf);
  cmd_inf->add_option("--y0", i_y0, "evaluation point")->required();
  cmd_inf->add_option("--level", i_level, "CI level");
  cmd_inf->add_option("--B", i_B, "resample draws");
  cmd_inf->add_option("--t-n", i_tn, "numerical-delta step (0 = n^{-kappa/2})");
  cmd_inf->add_option("--kappa", i_kappa, "first-stage rate exponent");
  cmd_inf->add_option("--tau", i_tau, "ball radius squared");
  cmd_inf->add_option("--seed", i_seed, "resampling seed")->required();
  cmd_inf->add_flag("--lower", i_lower, "target the lower bound (default upper)");
  cmd_inf->add_flag("--exact-resolve", i_exact, "re-solve perturbed SILPs per draw");
  cmd_inf->add_flag("--smoothed", i_smoothed, "smoothed estimators");
  cmd_inf->add_option("--threads", i_threads, "parallelism degree");
  cmd_inf->add_option("--out", i_out, "output directory");

  // ---- check ----
  auto* cmd_check = app.add_subcommand("check", "Slater / recession / Assumption R diagnostics");
  DataArgs c_data;
  BoundArgs c_cfg;
  std::vector<double> c_y0s{1.0};
  std::string c_out = ".";
  int c_probes = 200;
  c_data.attach(cmd_check);
  c_cfg.attach(cmd_check);
  cmd_check->add_option("--y0", c_y0s, "evaluation points");
  cmd_check->add_option("--saddle-probes", c_probes, "random probes for the saddle check");
  cmd_check->add_option("--out", c_out, "output directory");

  // ---- dataset-dump ----
  auto* cmd_dump = app.add_subcommand("dataset-dump", "validate and re-emit a dataset");
  DataArgs d_data;
  std::string d_out_file = "dataset.csv";
  d_data.attach(cmd_dump);
  cmd_dump->add_option("--out-file", d_out_file, "output CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_bounds->parsed()) {
      b_cfg.has_trusted = b_tl->count() > 0 && b_th->count() > 0;
      auto ds = b_data.load();
      auto rep = qtb::validate_for_estimation(ds);
      for (const auto& issue : rep.issues) warn_line(issue);
      if (!rep.estimable) {
        err_line("dataset has cells too thin for estimation");
        return 1;
      }
      auto y0s = parse_grid_spec(b_cfg.y0_spec);
      qtb::SolutionBank bank;
      auto curve = qtb::bound_curve(ds, std::nullopt, y0s, b_cfg.config(), &bank);
      Json header = qtb::artifact_header(b_cfg.config_json("bounds"));
      int rc = write_bounds_artifacts(curve, header, b_out);
      Json diag;
      diag["n"] = ds.n();
      diag["L"] = ds.L();
      diag["bank_upper"] = bank.upper.size();
      diag["bank_lower"] = bank.lower.size();
      qtb::write_json_file((fs::path(b_out) / "diagnostics.json").string(), diag);
      std::cout << "wrote bounds artifacts to " << b_out << "\n";
      return rc;
    }

    if (cmd_qte->parsed()) {
      auto ds = q_data.load();
      auto y0s = parse_grid_spec(q_cfg.y0_spec);
      auto cfg = q_cfg.config();
      auto curve = qtb::bound_curve(ds, std::nullopt, y0s, cfg);
      fs::create_directories(q_out);
      Json rows = Json::array();
      std::ofstream csv(fs::path(q_out) / "qte.csv");
      csv << "# " << qtb::artifact_header(q_cfg.config_json("qte")).dump() << "\n";
      csv << "tau_q,q1,q0_lb,q0_ub,qte_lb,qte_ub\n";
      for (double tq : q_levels) {
        auto qb = qtb::qte_bounds(ds, std::nullopt, tq, y0s, cfg, &curve);
        rows.push_back(qtb::to_json(qb));
        csv << qtb::fmt_double(qb.tau_q) << "," << qtb::fmt_double(qb.q1) << ","
            << qtb::fmt_double(qb.q0_lb) << "," << qtb::fmt_double(qb.q0_ub) << ","
            << qtb::fmt_double(qb.qte_lb) << "," << qtb::fmt_double(qb.qte_ub) << "\n";
      }
      Json j = qtb::artifact_header(q_cfg.config_json("qte"));
      j["qte"] = rows;
      qtb::write_json_file((fs::path(q_out) / "qte.json").string(), j);
      std::cout << "wrote qte artifacts to " << q_out << "\n";
      return 0;
    }

    if (cmd_sim->parsed()) {
      qtb::SimParams base;
      if (!sim_config_path.empty()) {
        std::ifstream in(sim_config_path);
        if (!in) throw qtb::Error("cannot open " + sim_config_path);
        Json j = Json::parse(in);
        base = qtb::sim_params_from_json(j);
      }
      base.seed = sim_seed;
      base.L = sim_L;
      if (smoke) {
        sim_R = 2;
        sim_Nlist = {200};
        sim_y0_spec = "-2:2:9";
      }
      auto y0s = parse_grid_spec(sim_y0_spec);
      qtb::BoundConfig cfg;
      cfg.tau = sim_tau;
      cfg.threads = 1;
      fs::create_directories(sim_out);
      Json cj;
      cj["command"] = "simulate";
      cj["seed"] = sim_seed;
      cj["L"] = sim_L;
      cj["R"] = sim_R;
      cj["N_list"] = sim_Nlist;
      cj["level"] = sim_level;
      cj["tau"] = sim_tau;
      cj["y0_grid"] = sim_y0_spec;
      cj["figure_mode"] = figure_mode;
      cj["params"] = qtb::to_json(base);
      Json header = qtb::artifact_header(cj);

      if (figure_mode) {
        // Figure-1 family: one panel per L in {2,3,4,5}, large-n single draw.
        auto rows = qtb::tighten_report(base, {2, 3, 4, 5}, sim_n, y0s, cfg, sim_threads);
        for (const auto& row : rows) {
          std::ofstream out(fs::path(sim_out) / ("fig_bounds_L" + std::to_string(row.L) + ".csv"));
          qtb::write_plotdata_csv(row.curve, out, &row.truth);
        }
        Json widths = Json::array();
        for (const auto& row : rows) widths.push_back(Json{{"L", row.L}, {"mean_width", row.mean_width}});
        Json j = header;
        j["tighten"] = widths;
        qtb::write_json_file((fs::path(sim_out) / "tighten.json").string(), j);
      }

      auto result = qtb::replicate(base, sim_R, sim_Nlist, y0s, sim_level, cfg, sim_threads);
      Json j = header;
      j["result"] = qtb::to_json(result);
      qtb::write_json_file((fs::path(sim_out) / "study.json").string(), j);
      for (const auto& byn : result.by_n) {
        // Figure-2/3 family: per-N band files for both bound families.
        std::ofstream out(fs::path(sim_out) / ("fig_band_N" + std::to_string(byn.N) + ".csv"));
        out << "x,lower_mean,lower_lo,lower_hi,upper_mean,upper_lo,upper_hi,truth\n";
        for (std::size_t i = 0; i < result.y0_grid.size(); ++i) {
          out << qtb::fmt_double(result.y0_grid[i]) << "," << qtb::fmt_double(byn.lower_band.mean[i])
              << "," << qtb::fmt_double(byn.lower_band.lo[i]) << ","
              << qtb::fmt_double(byn.lower_band.hi[i]) << "," << qtb::fmt_double(byn.upper_band.mean[i])
              << "," << qtb::fmt_double(byn.upper_band.lo[i]) << ","
              << qtb::fmt_double(byn.upper_band.hi[i]) << "," << qtb::fmt_double(result.truth[i]) << "\n";
        }
        std::ofstream reps(fs::path(sim_out) / ("replications_N" + std::to_string(byn.N) + ".csv"));
        reps << "rep,y0,lower,upper\n";
        for (std::size_t r = 0; r < byn.curves.size(); ++r)
          for (std::size_t i = 0; i < byn.curves[r].y0_grid.size(); ++i)
            reps << r << "," << qtb::fmt_double(byn.curves[r].y0_grid[i]) << ","
                 << qtb::fmt_double(byn.curves[r].lower[i]) << ","
                 << qtb::fmt_double(byn.curves[r].upper[i]) << "\n";
      }
      int failures = 0;
      for (const auto& byn : result.by_n) failures += byn.failures;
      if (failures > 0) warn_line(std::to_string(failures) + " replications failed");
      std::cout << "wrote study artifacts to " << sim_out << "\n";
      return failures > 0 ? 2 : 0;
    }

    if (cmd_inf->parsed()) {
      auto ds = i_data.load();
      qtb::CiConfig cfg;
      cfg.kappa = i_kappa;
      cfg.t_n = i_tn;
      cfg.exact_resolve = i_exact;
      cfg.upper_side = !i_lower;
      cfg.tau = i_tau;
      cfg.smoothed = i_smoothed;
      cfg.threads = i_threads;
      auto ci = qtb::numerical_delta_ci(ds, std::nullopt, i_y0, i_level, i_B, i_seed, cfg);
      fs::create_directories(i_out);
      Json cj;
      cj["command"] = "inference";
      cj["y0"] = i_y0;
      cj["level"] = i_level;
      cj["B"] = i_B;
      cj["kappa"] = i_kappa;
      cj["seed"] = i_seed;
      cj["side"] = i_lower ? "lower" : "upper";
      Json j = qtb::artifact_header(cj);
      j["ci"] = qtb::to_json(ci);
      qtb::write_json_file((fs::path(i_out) / "ci.json").string(), j);
      std::ofstream csv(fs::path(i_out) / "ci.csv");
      csv << "y0,point,ci_lo,ci_hi,level,method,n_draws\n";
      csv << qtb::fmt_double(ci.y0) << "," << qtb::fmt_double(ci.point) << ","
          << qtb::fmt_double(ci.ci_lo) << "," << qtb::fmt_double(ci.ci_hi) << ","
          << qtb::fmt_double(ci.level) << "," << ci.method << "," << ci.n_draws << "\n";
      if (!ci.solution_set_unique)
        warn_line("solution set not unique; standard bootstrap may be invalid (numerical delta used)");
      std::cout << "wrote inference artifacts to " << i_out << "\n";
      return 0;
    }

    if (cmd_check->parsed()) {
      auto ds = c_data.load();
      auto bw = qtb::default_bandwidths(ds, c_cfg.smoothed);
      auto grid = qtb::default_grid(ds, c_cfg.grid_cap);
      qtb::CoefficientTable table(ds, std::nullopt, grid, bw, c_cfg.smoothed);
      Json reports = Json::array();
      for (double y0 : c_y0s) {
        auto xi = table.triple_at(y0);
        Json r;
        r["y0"] = y0;
        r["slater"] = qtb::slater_check(xi);
        r["recession_margin"] = qtb::recession_margin(xi);
        auto prob = qtb::build_upper(xi, c_cfg.tau);
        auto sol = qtb::solve(prob);
        r["solve"] = qtb::to_json(sol);
        if (sol.status == qtb::SolveStatus::optimal) {
          auto act = qtb::active_set(sol, prob);
          r["active_set"] = qtb::to_json(act);
          auto dm = qtb::extract_dual(sol, prob);
          r["dual"] = qtb::to_json(dm);
          auto saddle = qtb::saddle_check(xi, sol.gamma, dm, c_probes, c_cfg.tau);
          r["saddle_worst_left"] = saddle.worst_left;
          r["saddle_worst_right"] = saddle.worst_right;
          // KKT stationarity: Delta_0 + sum_k lambda_k Delta_1(y*_k) = 0
          Eigen::VectorXd kkt = xi.delta0_at_y0;
          for (const auto& ap : act.points)
            kkt += ap.multiplier * xi.delta1.row(static_cast<Eigen::Index>(ap.grid_index)).transpose();
          r["kkt_stationarity"] = kkt.cwiseAbs().maxCoeff();
        }
        reports.push_back(r);
      }
      Json cj;
      cj["command"] = "check";
      Json j = qtb::artifact_header(cj);
      j["reports"] = reports;
      fs::create_directories(c_out);
      qtb::write_json_file((fs::path(c_out) / "check.json").string(), j);
      std::cout << "wrote check report to " << c_out << "\n";
      return 0;
    }

    if (cmd_dump->parsed()) {
      auto ds = d_data.load();
      std::ofstream out(d_out_file);
      if (!out) throw qtb::Error("cannot write " + d_out_file);
      qtb::dump_csv(ds, out, d_data.cols);
      auto cc = qtb::cell_counts(ds);
      Json counts = Json::array();
      for (int d = 0; d < 2; ++d)
        for (int z = 0; z < cc.L; ++z)
          counts.push_back(Json{{"d", d}, {"z", z}, {"count", cc.at(d, z)}});
      std::cerr << Json{{"level", "info"}, {"cells", counts}}.dump() << "\n";
      std::cout << "wrote " << d_out_file << " (" << ds.n() << " rows, L=" << ds.L() << ")\n";
      return 0;
    }
  } catch (const qtb::Error& e) {
    err_line(e.what());
    return 1;
  } catch (const std::exception& e) {
    err_line(std::string("unexpected: ") + e.what());
    return 1;
  }
  return 0;
}
