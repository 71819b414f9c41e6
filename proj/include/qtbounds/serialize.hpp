#pragma once

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "qtbounds/bounds.hpp"
#include "qtbounds/common.hpp"
#include "qtbounds/estimators.hpp"
#include "qtbounds/inference.hpp"
#include "qtbounds/silp.hpp"
#include "qtbounds/sim.hpp"

namespace qtb {

using Json = nlohmann::ordered_json;

//! Every artifact carries the resolved config and library version; no
//! timestamps, so repeated runs are byte-identical.
inline Json artifact_header(const Json& config) {
  Json h;
  h["schema_version"] = kSchemaVersion;
  h["library_version"] = kLibraryVersion;
  h["config"] = config;
  return h;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline Json to_json(const EvalGrid& g) { return Json{{"points", g.points}}; }

inline EvalGrid grid_from_json(const Json& j) {
  EvalGrid g;
  g.points = j.at("points").get<std::vector<double>>();
  g.validate();
  return g;
}

inline Json to_json(const CoefficientTriple& xi) {
  Json j;
  j["grid"] = xi.grid.points;
  j["y0"] = xi.y0;
  j["L"] = xi.L;
  j["smoothed"] = xi.smoothed;
  j["x"] = xi.x;
  j["delta0_at_y0"] = std::vector<double>(xi.delta0_at_y0.data(), xi.delta0_at_y0.data() + xi.delta0_at_y0.size());
  j["f_treated"] = std::vector<double>(xi.f_treated.data(), xi.f_treated.data() + xi.f_treated.size());
  std::vector<std::vector<double>> d1;
  for (Eigen::Index c = 0; c < xi.delta1.cols(); ++c)
    d1.emplace_back(xi.delta1.col(c).data(), xi.delta1.col(c).data() + xi.delta1.rows());
  j["delta1_columns"] = d1;
  return j;
}

inline CoefficientTriple triple_from_json(const Json& j) {
  CoefficientTriple xi;
  xi.grid.points = j.at("grid").get<std::vector<double>>();
  xi.y0 = j.at("y0").get<double>();
  xi.L = j.at("L").get<int>();
  xi.smoothed = j.at("smoothed").get<bool>();
  xi.x = j.at("x").get<std::vector<double>>();
  auto d0 = j.at("delta0_at_y0").get<std::vector<double>>();
  xi.delta0_at_y0 = Eigen::Map<const Eigen::VectorXd>(d0.data(), static_cast<Eigen::Index>(d0.size()));
  auto ft = j.at("f_treated").get<std::vector<double>>();
  xi.f_treated = Eigen::Map<const Eigen::VectorXd>(ft.data(), static_cast<Eigen::Index>(ft.size()));
  auto cols = j.at("delta1_columns").get<std::vector<std::vector<double>>>();
  xi.delta1.resize(static_cast<Eigen::Index>(ft.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c)
    xi.delta1.col(static_cast<Eigen::Index>(c)) =
        Eigen::Map<const Eigen::VectorXd>(cols[c].data(), static_cast<Eigen::Index>(cols[c].size()));
  xi.validate();
  return xi;
}

inline Json to_json(const SilpProblem& p) {
  Json j;
  j["sense"] = p.sense == Sense::minimize ? "minimize" : "maximize";
  j["dir"] = p.dir == RowDir::ge ? "ge" : "le";
  j["obj0"] = p.obj0;
  j["obj1"] = std::vector<double>(p.obj1.data(), p.obj1.data() + p.obj1.size());
  j["tau"] = p.tau;
  j["grid"] = p.grid.points;
  j["rhs"] = std::vector<double>(p.rhs.data(), p.rhs.data() + p.rhs.size());
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < p.rows.rows(); ++i)
    rows.emplace_back(p.rows.row(i).data(), p.rows.row(i).data() + p.rows.cols());
  j["rows"] = rows;
  return j;
}

inline SilpProblem problem_from_json(const Json& j) {
  SilpProblem p;
  p.sense = j.at("sense").get<std::string>() == "minimize" ? Sense::minimize : Sense::maximize;
  p.dir = j.at("dir").get<std::string>() == "ge" ? RowDir::ge : RowDir::le;
  p.obj0 = j.at("obj0").get<double>();
  auto o1 = j.at("obj1").get<std::vector<double>>();
  p.obj1 = Eigen::Map<const Eigen::VectorXd>(o1.data(), static_cast<Eigen::Index>(o1.size()));
  p.tau = j.at("tau").get<double>();
  p.grid.points = j.at("grid").get<std::vector<double>>();
  auto rhs = j.at("rhs").get<std::vector<double>>();
  p.rhs = Eigen::Map<const Eigen::VectorXd>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));
  auto rows = j.at("rows").get<std::vector<std::vector<double>>>();
  p.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.empty() ? 0 : rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    p.rows.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), static_cast<Eigen::Index>(rows[i].size()));
  return p;
}

inline Json to_json(const LPSolution& s) {
  Json j;
  j["status"] = to_string(s.status);
  j["value"] = s.value;
  j["gamma"] = s.gamma.size() > 0
                   ? std::vector<double>(s.gamma.data(), s.gamma.data() + s.gamma.size())
                   : std::vector<double>{};
  j["duality_gap"] = s.duality_gap;
  j["iterations"] = s.iterations;
  j["n_cuts"] = s.n_cuts;
  j["ball_active"] = s.ball_active;
  j["max_violation"] = s.max_violation;
  j["alt_optima_hint"] = s.alt_optima_hint;
  j["norm_sq"] = s.norm_sq;
  Json atoms = Json::array();
  for (std::size_t i = 0; i < s.row_multipliers.size(); ++i)
    if (s.row_multipliers[i] > 0.0) atoms.push_back(Json{{"row", i}, {"mass", s.row_multipliers[i]}});
  j["dual_atoms"] = atoms;
  j["cut_multipliers"] = s.cut_multipliers;
  return j;
}

//! MPS-like text dump of the finite reduction, for cross-checks with external
//! LP tools.
inline void dump_mps_like(const SilpProblem& p, std::ostream& out) {
  out << "NAME silp\n";
  out << (p.sense == Sense::minimize ? "* sense: MIN\n" : "* sense: MAX\n");
  out << "OBJ g0 " << fmt_double(p.obj0);
  for (Eigen::Index k = 0; k < p.obj1.size(); ++k) out << " g" << (k + 1) << " " << fmt_double(p.obj1(k));
  out << "\n";
  const char* rel = p.dir == RowDir::ge ? ">=" : "<=";
  for (Eigen::Index i = 0; i < p.n_rows(); ++i) {
    out << "ROW y=" << fmt_double(p.grid.points[static_cast<std::size_t>(i)]);
    for (Eigen::Index k = 0; k < p.rows.cols(); ++k) out << " " << fmt_double(p.rows(i, k));
    out << " " << rel << " " << fmt_double(p.rhs(i)) << "\n";
  }
  out << "BALL norm2(gamma) <= " << fmt_double(p.tau) << "\n";
  out << "ENDATA\n";
}

inline Json to_json(const DualMeasure& dm) {
  Json atoms = Json::array();
  for (const auto& a : dm.atoms)
    atoms.push_back(Json{{"y", a.y}, {"mass", a.mass}, {"grid_index", a.grid_index}});
  return Json{{"atoms", atoms}, {"total_mass", dm.total_mass()}};
}

inline Json to_json(const ActiveSet& as) {
  Json pts = Json::array();
  for (const auto& ap : as.points)
    pts.push_back(Json{{"y", ap.y},
                       {"multiplier", ap.multiplier},
                       {"grid_index", ap.grid_index},
                       {"residual", ap.residual},
                       {"at_grid_boundary", ap.at_grid_boundary}});
  return Json{{"K", as.K},
              {"points", pts},
              {"k_at_most_L", as.k_at_most_L},
              {"multipliers_positive", as.multipliers_positive},
              {"leading_block_rank", as.leading_block_rank},
              {"full_matrix_rank", as.full_matrix_rank},
              {"leading_block_rcond", as.leading_block_rcond},
              {"assumption_r_ok", as.assumption_r_ok}};
}

inline Json to_json(const BoundCurve& c) {
  Json j;
  j["y0_grid"] = c.y0_grid;
  j["upper_raw"] = c.upper_raw;
  j["lower_raw"] = c.lower_raw;
  j["upper"] = c.upper;
  j["lower"] = c.lower;
  j["upper_code"] = c.upper_code;
  j["lower_code"] = c.lower_code;
  j["trusted"] = c.trusted;
  j["margins"] = c.margins;
  j["reconciled"] = c.reconciled;
  return j;
}

inline void write_curve_csv(const BoundCurve& c, const Json& header, std::ostream& out,
                            const std::vector<double>* truth = nullptr) {
  out << "# " << header.dump() << "\n";
  out << "y0,lower_raw,upper_raw,lower,upper,lower_code,upper_code,trusted,margin,reconciled";
  if (truth) out << ",truth";
  out << "\n";
  for (std::size_t i = 0; i < c.y0_grid.size(); ++i) {
    out << fmt_double(c.y0_grid[i]) << "," << fmt_double(c.lower_raw[i]) << ","
        << fmt_double(c.upper_raw[i]) << "," << fmt_double(c.lower[i]) << "," << fmt_double(c.upper[i])
        << "," << c.lower_code[i] << "," << c.upper_code[i] << "," << (c.trusted[i] ? 1 : 0) << ","
        << fmt_double(c.margins[i]) << "," << (c.reconciled[i] ? 1 : 0);
    if (truth) out << "," << fmt_double((*truth)[i]);
    out << "\n";
  }
}

//! Plot-data file: x, lower, upper, truth-if-known. One per figure panel.
inline void write_plotdata_csv(const BoundCurve& c, std::ostream& out,
                               const std::vector<double>* truth = nullptr) {
  out << "x,lower,upper" << (truth ? ",truth" : "") << "\n";
  for (std::size_t i = 0; i < c.y0_grid.size(); ++i) {
    out << fmt_double(c.y0_grid[i]) << "," << fmt_double(c.lower[i]) << "," << fmt_double(c.upper[i]);
    if (truth) out << "," << fmt_double((*truth)[i]);
    out << "\n";
  }
}

inline Json to_json(const QteBounds& q) {
  return Json{{"tau_q", q.tau_q}, {"q1", q.q1},         {"q0_lb", q.q0_lb},
              {"q0_ub", q.q0_ub}, {"qte_lb", q.qte_lb}, {"qte_ub", q.qte_ub}};
}

inline Json to_json(const CiResult& ci) {
  return Json{{"y0", ci.y0},
              {"point", ci.point},
              {"ci_lo", ci.ci_lo},
              {"ci_hi", ci.ci_hi},
              {"level", ci.level},
              {"method", ci.method},
              {"n_draws", ci.n_draws},
              {"n_failed_draws", ci.n_failed_draws},
              {"solution_set_unique", ci.solution_set_unique},
              {"point_in_ci", ci.point_in_ci}};
}

inline Json to_json(const SimParams& sp) {
  return Json{{"n", sp.n},     {"L", sp.L},     {"p", sp.p},
              {"pi0", sp.pi0}, {"pi1", sp.pi1}, {"rho", sp.rho},
              {"sigma_xi1", sp.sigma_xi1},      {"sigma_nu", sp.sigma_nu},
              {"seed", sp.seed}};
}

inline SimParams sim_params_from_json(const Json& j) {
  SimParams sp;
  if (j.contains("n")) sp.n = j.at("n").get<std::size_t>();
  if (j.contains("L")) sp.L = j.at("L").get<int>();
  if (j.contains("p")) sp.p = j.at("p").get<double>();
  if (j.contains("pi0")) sp.pi0 = j.at("pi0").get<double>();
  if (j.contains("pi1")) sp.pi1 = j.at("pi1").get<double>();
  if (j.contains("rho")) sp.rho = j.at("rho").get<double>();
  if (j.contains("sigma_xi1")) sp.sigma_xi1 = j.at("sigma_xi1").get<double>();
  if (j.contains("sigma_nu")) sp.sigma_nu = j.at("sigma_nu").get<double>();
  if (j.contains("seed")) sp.seed = j.at("seed").get<std::uint64_t>();
  sp.validate();
  return sp;
}

inline Json to_json(const SimResult& r) {
  Json j;
  j["params"] = to_json(r.params);
  j["level"] = r.level;
  j["y0_grid"] = r.y0_grid;
  j["truth"] = r.truth;
  j["trusted_interval"] = std::vector<double>{r.trusted_interval.first, r.trusted_interval.second};
  Json byn = Json::array();
  for (const auto& res : r.by_n) {
    Json e;
    e["N"] = res.N;
    e["R_requested"] = res.R_requested;
    e["R_done"] = res.R_done;
    e["failures"] = res.failures;
    e["upper_mean"] = res.upper_band.mean;
    e["upper_lo"] = res.upper_band.lo;
    e["upper_hi"] = res.upper_band.hi;
    e["lower_mean"] = res.lower_band.mean;
    e["lower_lo"] = res.lower_band.lo;
    e["lower_hi"] = res.lower_band.hi;
    e["coverage"] = res.coverage;
    byn.push_back(e);
  }
  j["by_n"] = byn;
  return j;
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace qtb
