#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qtbounds/common.hpp"
#include "qtbounds/estimators.hpp"
#include "qtbounds/simplex.hpp"

namespace qtb {

struct ToleranceSet {
  double feas_tol = 1e-9;
  double gap_tol = 1e-8;
  double act_tol = 1e-7;
  double mass_tol = 1e-9;
  double ball_tol = 1e-8;
  double dual_tol = 1e-8;
  double rank_tol = 1e-9;
  double value_tol = 1e-7;
  int max_cuts = 100;
};

enum class Sense { minimize, maximize };
enum class RowDir { ge, le };

enum class SolveStatus { optimal, infeasible, unbounded, ball_active, max_iter };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::infeasible: return "infeasible";
    case SolveStatus::unbounded: return "unbounded";
    case SolveStatus::ball_active: return "ball_active";
    case SolveStatus::max_iter: return "max_iter";
  }
  return "?";
}

//! Finite reduction of the semi-infinite program: one linear row per grid
//! point, an L2 ball of radius sqrt(tau), and a linear objective over
//! gamma = (gamma_0, gamma_1).
struct SilpProblem {
  Sense sense = Sense::minimize;
  double obj0 = 1.0;       // coefficient on gamma_0
  Eigen::VectorXd obj1;    // coefficients on gamma_1 (length L-1)
  RowDir dir = RowDir::ge; // direction of every grid row
  Eigen::MatrixXd rows;    // m x L, row = (1, Delta1(y_m)')
  Eigen::VectorXd rhs;     // m, F(y_m)
  EvalGrid grid;
  double tau = 100.0;

  Eigen::Index n_vars() const { return rows.cols(); }
  Eigen::Index n_rows() const { return rows.rows(); }

  double objective(const Eigen::VectorXd& gamma) const {
    return obj0 * gamma(0) + obj1.dot(gamma.tail(gamma.size() - 1));
  }

  //! Signed slack of grid row m at gamma; >= 0 means feasible for that row.
  double row_slack(Eigen::Index m, const Eigen::VectorXd& gamma) const {
    double lhs = rows.row(m).dot(gamma);
    return dir == RowDir::ge ? lhs - rhs(m) : rhs(m) - lhs;
  }
};

//! min(gamma_0 - gamma_1'Delta_0) s.t. gamma_0 + gamma_1'Delta_1(y_m) >= F(y_m).
inline SilpProblem build_upper(const CoefficientTriple& xi, double tau) {
  xi.validate();
  if (!(tau > 0.0)) throw Error("tau must be positive");
  SilpProblem p;
  p.sense = Sense::minimize;
  p.obj0 = 1.0;
  p.obj1 = -xi.delta0_at_y0;
  p.dir = RowDir::ge;
  const auto m = static_cast<Eigen::Index>(xi.grid.size());
  p.rows.resize(m, xi.L);
  p.rows.col(0).setOnes();
  p.rows.rightCols(xi.L - 1) = xi.delta1;
  p.rhs = xi.f_treated;
  p.grid = xi.grid;
  p.tau = tau;
  return p;
}

//! Mirrored program: max(gamma_0 - gamma_1'Delta_0) s.t. rows <= F. The paper
//! states this construction only implicitly; flagged as paper-analogous.
inline SilpProblem build_lower(const CoefficientTriple& xi, double tau) {
  SilpProblem p = build_upper(xi, tau);
  p.sense = Sense::maximize;
  p.dir = RowDir::le;
  return p;
}

struct DualAtom {
  double y = 0.0;
  double mass = 0.0;
  std::size_t grid_index = 0;
};

//! Probability measure on the grid solving the dual program.
struct DualMeasure {
  std::vector<DualAtom> atoms;

  double total_mass() const {
    double s = 0.0;
    for (const auto& a : atoms) s += a.mass;
    return s;
  }
};

struct ActivePoint {
  double y = 0.0;
  double multiplier = 0.0;
  std::size_t grid_index = 0;
  double residual = 0.0;
  bool at_grid_boundary = false;
};

//! Binding constraints with positive multipliers, plus the Assumption R
//! diagnostics (counts, positivity, rank of the leading K x K block).
struct ActiveSet {
  std::vector<ActivePoint> points;
  int K = 0;
  bool k_at_most_L = true;
  bool multipliers_positive = true;
  int leading_block_rank = 0;
  int full_matrix_rank = 0;
  bool assumption_r_ok = false;
  double leading_block_rcond = 0.0;
};

struct LPSolution {
  Eigen::VectorXd gamma;
  double value = std::numeric_limits<double>::quiet_NaN();  // in the problem's sense
  SolveStatus status = SolveStatus::max_iter;
  double duality_gap = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  int n_cuts = 0;
  bool ball_active = false;
  std::vector<double> row_multipliers;  // per grid row, >= 0
  std::vector<double> cut_multipliers;  // per accumulated cut
  double max_violation = 0.0;           // worst primal infeasibility over grid rows
  int alt_optima_hint = 0;
  double norm_sq = 0.0;                 // ||gamma||^2 at the solution
};

namespace detail {

//! Generic primal LP: min c'g s.t. A g >= b, g free. Solved through its dual
//! max b'mu, A'mu = c, mu >= 0 so that vertex multipliers come out directly.
struct PrimalLpResult {
  LpStatus status = LpStatus::max_iter;
  Eigen::VectorXd gamma;
  double value = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd multipliers;  // per row of A
  Eigen::VectorXd ray;          // for status==unbounded... see note below
  int iterations = 0;
  int alt_optima_hint = 0;
};

inline PrimalLpResult solve_primal_lp(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                                      const Eigen::VectorXd& c, int max_iter = 50000) {
  StandardForm sf;
  sf.eq = A.transpose();
  sf.rhs = c;
  sf.obj = -b;
  DenseSimplex engine(1e-11, 1e-10, max_iter);
  StandardResult sr = engine.solve(sf);
  PrimalLpResult out;
  out.iterations = sr.iterations;
  out.alt_optima_hint = sr.alt_optima_hint;
  switch (sr.status) {
    case LpStatus::optimal:
      out.status = LpStatus::optimal;
      out.gamma = -sr.y;
      out.value = c.dot(out.gamma);
      out.multipliers = sr.x;
      break;
    case LpStatus::infeasible:
      // dual infeasible => primal unbounded; -farkas_y is an improving recession ray
      out.status = LpStatus::unbounded;
      out.ray = -sr.farkas_y;
      break;
    case LpStatus::unbounded:
      out.status = LpStatus::infeasible;
      break;
    default:
      out.status = LpStatus::max_iter;
  }
  return out;
}

//! Canonical min/ge form of a SilpProblem: minimize cmin'g s.t. Amin g >= bmin.
struct CanonicalSilp {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd c;
  double sense_flip = 1.0;  // reported value = sense_flip * canonical value
};

inline CanonicalSilp canonicalize(const SilpProblem& p) {
  CanonicalSilp c;
  const auto L = p.n_vars();
  c.c.resize(L);
  c.c(0) = p.obj0;
  c.c.tail(L - 1) = p.obj1;
  c.A = p.rows;
  c.b = p.rhs;
  if (p.dir == RowDir::le) {
    c.A = -c.A;
    c.b = -c.b;
  }
  if (p.sense == Sense::maximize) {
    c.c = -c.c;
    c.sense_flip = -1.0;
  }
  return c;
}

}  // namespace detail

//! Solve the finite reduction. The L2 ball is enforced by cutting planes:
//! whenever the LP optimum (or an unbounded ray) leaves the ball, the cut
//! u'gamma <= sqrt(tau) with u the unit direction is appended and the LP
//! re-solved. Lemma-style regularity makes cuts rare for tau large enough.
inline LPSolution solve(const SilpProblem& p, const ToleranceSet& tol = ToleranceSet()) {
  auto can = detail::canonicalize(p);
  const auto L = p.n_vars();
  const auto m = p.n_rows();
  const double radius = std::sqrt(p.tau);

  std::vector<Eigen::VectorXd> cuts;
  LPSolution sol;
  int total_iters = 0;

  for (int round = 0; round <= tol.max_cuts; ++round) {
    Eigen::MatrixXd A(m + static_cast<Eigen::Index>(cuts.size()), L);
    Eigen::VectorXd b(A.rows());
    A.topRows(m) = can.A;
    b.head(m) = can.b;
    for (std::size_t k = 0; k < cuts.size(); ++k) {
      A.row(m + static_cast<Eigen::Index>(k)) = -cuts[k].transpose();
      b(m + static_cast<Eigen::Index>(k)) = -radius;
    }
    auto res = detail::solve_primal_lp(A, b, can.c);
    total_iters += res.iterations;

    if (res.status == LpStatus::infeasible) {
      sol.status = SolveStatus::infeasible;
      sol.iterations = total_iters;
      return sol;
    }
    if (res.status == LpStatus::max_iter) {
      sol.status = SolveStatus::max_iter;
      sol.iterations = total_iters;
      return sol;
    }
    if (res.status == LpStatus::unbounded) {
      Eigen::VectorXd d = res.ray;
      double nrm = d.norm();
      if (!(nrm > 0.0)) {
        sol.status = SolveStatus::max_iter;
        sol.iterations = total_iters;
        return sol;
      }
      cuts.push_back(d / nrm);
      continue;
    }

    // optimal for the current cut set
    double nsq = res.gamma.squaredNorm();
    if (nsq > p.tau * (1.0 + tol.ball_tol)) {
      cuts.push_back(res.gamma / res.gamma.norm());
      continue;
    }

    sol.gamma = res.gamma;
    sol.value = can.sense_flip * res.value;
    sol.iterations = total_iters;
    sol.n_cuts = static_cast<int>(cuts.size());
    sol.norm_sq = nsq;
    sol.alt_optima_hint = res.alt_optima_hint;
    sol.row_multipliers.assign(static_cast<std::size_t>(m), 0.0);
    for (Eigen::Index i = 0; i < m; ++i) sol.row_multipliers[static_cast<std::size_t>(i)] = res.multipliers(i);
    sol.cut_multipliers.clear();
    bool any_cut_active = false;
    for (std::size_t k = 0; k < cuts.size(); ++k) {
      double mu = res.multipliers(m + static_cast<Eigen::Index>(k));
      sol.cut_multipliers.push_back(mu);
      if (mu > tol.mass_tol) any_cut_active = true;
    }
    sol.ball_active = any_cut_active;
    sol.status = any_cut_active ? SolveStatus::ball_active : SolveStatus::optimal;

    double worst = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) worst = std::max(worst, -(can.A.row(i).dot(sol.gamma) - can.b(i)));
    sol.max_violation = worst;
    if (worst > tol.feas_tol * std::max(1.0, can.b.cwiseAbs().maxCoeff()))
      throw Error("solver returned infeasible point (residual " + std::to_string(worst) + ")");

    // duality gap against the dual value b'mu over all rows including cuts
    double dual_value = b.dot(res.multipliers);
    sol.duality_gap = std::abs(res.value - dual_value);
    return sol;
  }
  sol.status = SolveStatus::max_iter;
  sol.iterations = total_iters;
  return sol;
}

//! Dual probability measure on the grid. Requires an optimal solve with the
//! ball slack; with cuts active the grid multipliers no longer form the
//! probability measure of the strong-duality lemma.
inline DualMeasure extract_dual(const LPSolution& sol, const SilpProblem& p,
                                const ToleranceSet& tol = ToleranceSet()) {
  if (sol.status != SolveStatus::optimal)
    throw Error(std::string("extract_dual requires an optimal, ball-inactive solution (status=") +
                to_string(sol.status) + ")");
  DualMeasure dm;
  for (std::size_t i = 0; i < sol.row_multipliers.size(); ++i) {
    double mass = sol.row_multipliers[i];
    if (mass > tol.mass_tol)
      dm.atoms.push_back({p.grid.points[i], mass, i});
  }
  // tie-break: among exactly duplicated rows, push mass to the largest grid index
  for (auto& atom : dm.atoms) {
    for (std::size_t j = p.n_rows() == 0 ? 0 : static_cast<std::size_t>(p.n_rows()) - 1; j > atom.grid_index; --j) {
      if ((p.rows.row(static_cast<Eigen::Index>(j)) - p.rows.row(static_cast<Eigen::Index>(atom.grid_index))).cwiseAbs().maxCoeff() < 1e-14 &&
          std::abs(p.rhs(static_cast<Eigen::Index>(j)) - p.rhs(static_cast<Eigen::Index>(atom.grid_index))) < 1e-14) {
        atom.grid_index = j;
        atom.y = p.grid.points[j];
        break;
      }
    }
  }
  // merge atoms that landed on the same index
  std::sort(dm.atoms.begin(), dm.atoms.end(),
            [](const DualAtom& a, const DualAtom& b) { return a.grid_index < b.grid_index; });
  std::vector<DualAtom> merged;
  for (const auto& a : dm.atoms) {
    if (!merged.empty() && merged.back().grid_index == a.grid_index)
      merged.back().mass += a.mass;
    else
      merged.push_back(a);
  }
  dm.atoms = std::move(merged);

  double total = dm.total_mass();
  if (std::abs(total - 1.0) > tol.dual_tol)
    throw Error("dual masses sum to " + std::to_string(total) + ", expected 1");
  // moment constraint of the dual: sum_m lambda_m Delta_1(y_m) = -Delta_0(y_0),
  // and obj1 already stores -Delta_0 (same condition for both problem senses)
  Eigen::VectorXd lhs = Eigen::VectorXd::Zero(p.n_vars() - 1);
  for (const auto& a : dm.atoms)
    lhs += a.mass * p.rows.row(static_cast<Eigen::Index>(a.grid_index)).tail(p.n_vars() - 1).transpose();
  if ((lhs - p.obj1).cwiseAbs().maxCoeff() > tol.dual_tol * 10.0)
    throw Error("dual measure violates the moment constraint");
  return dm;
}

//! Grid points with |residual| <= act_tol and multiplier > mass_tol. Adjacent
//! grid indices are merged into one touching point (mass-weighted, max-mass
//! representative); with smoothed coefficients one continuum touching point
//! otherwise shows up as a bracketing pair.
inline ActiveSet active_set(const LPSolution& sol, const SilpProblem& p,
                            const ToleranceSet& tol = ToleranceSet(), bool cluster_adjacent = true) {
  if (!(sol.status == SolveStatus::optimal || sol.status == SolveStatus::ball_active))
    throw Error("active_set requires a solved problem");
  struct Raw {
    std::size_t idx;
    double mass;
    double resid;
  };
  std::vector<Raw> raw;
  for (std::size_t i = 0; i < sol.row_multipliers.size(); ++i) {
    double resid = p.row_slack(static_cast<Eigen::Index>(i), sol.gamma);
    if (sol.row_multipliers[i] > tol.mass_tol && std::abs(resid) <= tol.act_tol)
      raw.push_back({i, sol.row_multipliers[i], resid});
  }
  ActiveSet as;
  std::vector<std::vector<Raw>> clusters;
  for (const auto& r : raw) {
    if (cluster_adjacent && !clusters.empty() && r.idx - clusters.back().back().idx <= 1)
      clusters.back().push_back(r);
    else
      clusters.push_back({r});
  }
  for (const auto& cl : clusters) {
    const Raw* rep = &cl.front();
    double mass = 0.0;
    for (const auto& r : cl) {
      mass += r.mass;
      if (r.mass > rep->mass) rep = &r;
    }
    ActivePoint ap;
    ap.grid_index = rep->idx;
    ap.y = p.grid.points[rep->idx];
    ap.multiplier = mass;
    ap.residual = rep->resid;
    ap.at_grid_boundary = rep->idx == 0 || rep->idx + 1 == p.grid.size();
    as.points.push_back(ap);
  }
  as.K = static_cast<int>(as.points.size());
  as.k_at_most_L = as.K <= static_cast<int>(p.n_vars());
  as.multipliers_positive = true;
  for (const auto& ap : as.points)
    if (!(ap.multiplier > 0.0)) as.multipliers_positive = false;

  // rank diagnostics on the active-constraint matrix [1, Delta_1(y*)]
  const int K = as.K;
  const int L = static_cast<int>(p.n_vars());
  if (K > 0) {
    Eigen::MatrixXd full(K, L);
    for (int k = 0; k < K; ++k) full.row(k) = p.rows.row(static_cast<Eigen::Index>(as.points[static_cast<std::size_t>(k)].grid_index));
    Eigen::MatrixXd lead = full.leftCols(std::min(K, L));
    Eigen::FullPivLU<Eigen::MatrixXd> lu_lead(lead);
    lu_lead.setThreshold(tol.rank_tol);
    as.leading_block_rank = static_cast<int>(lu_lead.rank());
    Eigen::FullPivLU<Eigen::MatrixXd> lu_full(full);
    lu_full.setThreshold(tol.rank_tol);
    as.full_matrix_rank = static_cast<int>(lu_full.rank());
    if (K <= L && K == static_cast<int>(lead.rows()) && lead.rows() == lead.cols()) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(lead);
      double smax = svd.singularValues()(0);
      double smin = svd.singularValues()(svd.singularValues().size() - 1);
      as.leading_block_rcond = smax > 0.0 ? smin / smax : 0.0;
    }
  }
  as.assumption_r_ok = as.K >= 1 && as.k_at_most_L && as.multipliers_positive &&
                       as.full_matrix_rank == std::min(K, L) && !sol.ball_active;
  return as;
}

//! Assumption D margin: minimum of the objective direction over unit-l1
//! recession directions of the feasible cone, computed exactly by one LP per
//! orthant facet of the l1 sphere (2^L facets).
inline double recession_margin(const CoefficientTriple& xi, double y0_unused = 0.0) {
  (void)y0_unused;
  const int L = xi.L;
  if (L > 16) throw Error("recession_margin: L too large for facet enumeration");
  const auto m = static_cast<Eigen::Index>(xi.grid.size());
  Eigen::MatrixXd cone(m, L);
  cone.col(0).setOnes();
  cone.rightCols(L - 1) = xi.delta1;
  Eigen::VectorXd c(L);
  c(0) = 1.0;
  c.tail(L - 1) = -xi.delta0_at_y0;

  double best = std::numeric_limits<double>::infinity();
  const int n_orthants = 1 << L;
  for (int mask = 0; mask < n_orthants; ++mask) {
    Eigen::VectorXd sign(L);
    for (int j = 0; j < L; ++j) sign(j) = (mask >> j) & 1 ? -1.0 : 1.0;
    // rows: cone >= 0; sign_j * delta_j >= 0; sign'delta = 1 (two inequalities)
    Eigen::MatrixXd A(m + L + 2, L);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(m + L + 2);
    A.topRows(m) = cone;
    A.block(m, 0, L, L) = sign.asDiagonal();
    A.row(m + L) = sign.transpose();
    b(m + L) = 1.0;
    A.row(m + L + 1) = -sign.transpose();
    b(m + L + 1) = -1.0;
    auto res = detail::solve_primal_lp(A, b, c);
    if (res.status == LpStatus::optimal) best = std::min(best, res.value);
  }
  if (!std::isfinite(best)) throw Error("recession margin: all facets infeasible");
  return best;
}

//! Slater check: gamma = (1 + margin, 0, ..., 0) strictly satisfies the grid
//! constraints. True whenever F <= 1; false only on corrupted inputs.
inline bool slater_check(const CoefficientTriple& xi, double margin = 0.5) {
  for (Eigen::Index i = 0; i < xi.f_treated.size(); ++i)
    if (!(xi.f_treated(i) < 1.0 + margin)) return false;
  return true;
}

}  // namespace qtb
