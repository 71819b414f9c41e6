#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "qtbounds/common.hpp"
#include "qtbounds/estimators.hpp"
#include "qtbounds/rng.hpp"
#include "qtbounds/silp.hpp"

namespace qtb {

//! Perturbation of the coefficient triple: (delta_0, delta_1, delta_F) on the
//! same grid as the triple it perturbs.
struct PerturbationDirection {
  Eigen::VectorXd delta0;  // L-1
  Eigen::MatrixXd delta1;  // m x (L-1)
  Eigen::VectorXd deltaF;  // m
};

//! Lagrangian gamma_0 - gamma_1'Delta_0(y0) + sum over atoms of
//! mass * [F(y) - gamma_0 - gamma_1'Delta_1(y)], evaluated exactly on the grid.
inline double lagrangian(const CoefficientTriple& xi, const Eigen::VectorXd& gamma,
                         const DualMeasure& lambda) {
  const auto L = gamma.size();
  double val = gamma(0) - gamma.tail(L - 1).dot(xi.delta0_at_y0);
  for (const auto& a : lambda.atoms) {
    auto i = static_cast<Eigen::Index>(a.grid_index);
    if (i < 0 || i >= static_cast<Eigen::Index>(xi.grid.size()))
      throw Error("dual atom off the grid");
    double resid = xi.f_treated(i) - gamma(0) - gamma.tail(L - 1).dot(xi.delta1.row(i));
    val += a.mass * resid;
  }
  return val;
}

struct SaddleReport {
  double worst_left = 0.0;   // max over lambda probes of L(g*, l) - L(g*, l*)
  double worst_right = 0.0;  // max over gamma probes of L(g*, l*) - L(g, l*)
  int probes = 0;
};

//! Verify L(g*, l) <= L(g*, l*) <= L(g, l*) over random probes: gamma uniform
//! in the tau-ball, lambda random discrete measures on the grid.
inline SaddleReport saddle_check(const CoefficientTriple& xi, const Eigen::VectorXd& gamma_star,
                                 const DualMeasure& lambda_star, int probes, double tau,
                                 std::uint64_t seed = 12345) {
  SaddleReport rep;
  rep.probes = probes;
  Rng rng(seed);
  const auto L = gamma_star.size();
  const double base = lagrangian(xi, gamma_star, lambda_star);
  const double radius = std::sqrt(tau);
  for (int t = 0; t < probes; ++t) {
    // random gamma in the ball
    Eigen::VectorXd g(L);
    for (Eigen::Index j = 0; j < L; ++j) g(j) = rng.normal();
    double scale = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(L)) / g.norm();
    g *= scale;
    rep.worst_right = std::max(rep.worst_right, base - lagrangian(xi, g, lambda_star));

    // random sparse probability measure
    DualMeasure lam;
    int atoms = 1 + static_cast<int>(rng.uniform_index(4));
    double total = 0.0;
    for (int a = 0; a < atoms; ++a) {
      std::size_t idx = rng.uniform_index(xi.grid.size());
      double w = -std::log(std::max(rng.uniform(), 1e-300));
      lam.atoms.push_back({xi.grid.points[idx], w, idx});
      total += w;
    }
    for (auto& a : lam.atoms) a.mass /= total;
    rep.worst_left = std::max(rep.worst_left, lagrangian(xi, gamma_star, lam) - base);
  }
  return rep;
}

//! Estimated primal/dual solution sets for the min-max derivative.
struct SolutionSets {
  std::vector<Eigen::VectorXd> gammas;
  std::vector<std::vector<DualMeasure>> lambda_sets;  // aligned with gammas
  bool unique = true;
};

//! Exact min-max of the derivative functional over the supplied finite sets
//! (Hadamard directional derivative of the value functional).
inline double hadamard_derivative(const SolutionSets& sets, const PerturbationDirection& dir,
                                  const CoefficientTriple& xi) {
  if (sets.gammas.empty()) throw Error("hadamard_derivative needs a nonempty solution set");
  double outer = std::numeric_limits<double>::infinity();
  for (std::size_t gi = 0; gi < sets.gammas.size(); ++gi) {
    const auto& g = sets.gammas[gi];
    const auto L = g.size();
    double lin0 = -g.tail(L - 1).dot(dir.delta0);
    double inner = -std::numeric_limits<double>::infinity();
    if (sets.lambda_sets[gi].empty()) throw Error("empty dual set for a primal vertex");
    for (const auto& lam : sets.lambda_sets[gi]) {
      double v = lin0;
      for (const auto& a : lam.atoms) {
        auto i = static_cast<Eigen::Index>(a.grid_index);
        v += a.mass * (dir.deltaF(i) - g.tail(L - 1).dot(dir.delta1.row(i)));
      }
      inner = std::max(inner, v);
    }
    outer = std::min(outer, inner);
  }
  return outer;
}

//! Estimate the primal optimal-vertex set (within value_tol of the optimum)
//! and, per vertex, the dual optimal vertices supported on its active rows.
//! Random-objective probes over the optimal faces, deduplicated and capped.
inline SolutionSets solution_sets(const SilpProblem& p, const LPSolution& sol,
                                  const ToleranceSet& tol = ToleranceSet(), int cap = 50,
                                  int n_probes = 24, std::uint64_t seed = 777) {
  if (sol.status != SolveStatus::optimal)
    throw Error("solution_sets requires an optimal, ball-inactive solve");
  auto can = detail::canonicalize(p);
  const auto L = p.n_vars();
  const auto m = p.n_rows();
  const double vstar = can.sense_flip * sol.value;  // canonical optimal value

  SolutionSets sets;
  Rng rng(seed);
  auto push_gamma = [&](const Eigen::VectorXd& g) {
    for (const auto& have : sets.gammas)
      if ((have - g).cwiseAbs().maxCoeff() <= 1e-8 * std::max(1.0, have.cwiseAbs().maxCoeff())) return;
    if (static_cast<int>(sets.gammas.size()) < cap) sets.gammas.push_back(g);
  };
  push_gamma(sol.gamma);

  // Optimal face probed through a machine-thin value sliver: an inflated face
  // (thickness value_tol) would cut the edges leaving gamma* and report those
  // cut points as spurious extra vertices. Exact ties survive the thin sliver;
  // near-ties inside (sliver, value_tol] are treated as noise, not multiplicity.
  const double sliver = 1e-11 * std::max(1.0, std::abs(vstar));
  Eigen::MatrixXd Aface(m + 2, L);
  Eigen::VectorXd bface(m + 2);
  Aface.topRows(m) = can.A;
  bface.head(m) = can.b;
  Aface.row(m) = -can.c.transpose();
  bface(m) = -(vstar + sliver);
  Aface.row(m + 1) = can.c.transpose();
  bface(m + 1) = vstar - sliver;
  for (int t = 0; t < n_probes && static_cast<int>(sets.gammas.size()) < cap; ++t) {
    Eigen::VectorXd u(L);
    for (Eigen::Index j = 0; j < L; ++j) u(j) = rng.normal();
    auto res = detail::solve_primal_lp(Aface, bface, u);
    if (res.status == LpStatus::optimal && can.c.dot(res.gamma) <= vstar + tol.value_tol)
      push_gamma(res.gamma);
  }

  // per gamma: dual vertices supported on its active rows
  for (const auto& g : sets.gammas) {
    std::vector<Eigen::Index> act;
    for (Eigen::Index i = 0; i < m; ++i)
      if (std::abs(can.A.row(i).dot(g) - can.b(i)) <= tol.act_tol) act.push_back(i);
    std::vector<DualMeasure> duals;
    auto push_dual = [&](const Eigen::VectorXd& lam) {
      DualMeasure dm;
      for (std::size_t k = 0; k < act.size(); ++k)
        if (lam(static_cast<Eigen::Index>(k)) > tol.mass_tol)
          dm.atoms.push_back({p.grid.points[static_cast<std::size_t>(act[k])],
                              lam(static_cast<Eigen::Index>(k)), static_cast<std::size_t>(act[k])});
      for (const auto& have : duals) {
        if (have.atoms.size() != dm.atoms.size()) continue;
        double diff = 0.0;
        for (std::size_t q = 0; q < dm.atoms.size(); ++q)
          diff = std::max({diff, std::abs(have.atoms[q].mass - dm.atoms[q].mass),
                           static_cast<double>(have.atoms[q].grid_index != dm.atoms[q].grid_index)});
        if (diff <= 1e-8) return;
      }
      if (static_cast<int>(duals.size()) < cap) duals.push_back(dm);
    };

    if (!act.empty()) {
      Eigen::MatrixXd Eq(L, static_cast<Eigen::Index>(act.size()));
      for (std::size_t k = 0; k < act.size(); ++k) Eq.col(static_cast<Eigen::Index>(k)) = can.A.row(act[k]).transpose();
      for (int t = 0; t < n_probes && static_cast<int>(duals.size()) < cap; ++t) {
        StandardForm sf;
        sf.eq = Eq;
        sf.rhs = can.c;
        sf.obj.resize(static_cast<Eigen::Index>(act.size()));
        for (Eigen::Index j = 0; j < sf.obj.size(); ++j) sf.obj(j) = rng.normal();
        DenseSimplex engine;
        auto sr = engine.solve(sf);
        if (sr.status == LpStatus::optimal) push_dual(sr.x);
      }
    }
    if (duals.empty()) {
      // fall back to the solver's multipliers restricted to this gamma
      DualMeasure dm;
      for (std::size_t i = 0; i < sol.row_multipliers.size(); ++i)
        if (sol.row_multipliers[i] > tol.mass_tol) dm.atoms.push_back({p.grid.points[i], sol.row_multipliers[i], i});
      duals.push_back(dm);
    }
    sets.lambda_sets.push_back(std::move(duals));
  }
  sets.unique = sets.gammas.size() == 1 && sets.lambda_sets.front().size() == 1;
  return sets;
}

//! Reparametrized inner/outer decomposition at the optimum: theta_1 holds
//! gamma_0 plus K-1 instrument coefficients chosen so the active-constraint
//! Jacobian A11 is invertible; theta_2 holds the rest.
struct InnerOuterSplit {
  int K = 0;
  int L = 0;
  std::vector<int> perm;           // order of the L-1 delta columns; first K-1 go to theta_1
  Eigen::VectorXd theta1;          // K
  Eigen::VectorXd theta2;          // L-K
  Eigen::VectorXd multipliers;     // K, inner KKT multipliers
  std::vector<std::size_t> active; // grid indices of the K active points
  std::vector<bool> pinned;        // active point sits on the grid boundary
  Eigen::MatrixXd A11;             // K x K, columns Psi_11(y*_k)
  Eigen::MatrixXd A12;             // (L-K) x K, columns Psi_12(y*_k)
  Eigen::VectorXd psi01;           // K
  Eigen::VectorXd psi02;           // L-K
  double rcond_A11 = 0.0;
  double kkt_multiplier_gap = 0.0; // || solver multipliers - (-A11^{-1} psi01) ||_inf
};

namespace detail {

inline Eigen::VectorXd psi11_at(const CoefficientTriple& xi, const std::vector<int>& perm, int K,
                                Eigen::Index row) {
  Eigen::VectorXd v(K);
  v(0) = 1.0;
  for (int j = 0; j < K - 1; ++j) v(j + 1) = xi.delta1(row, perm[static_cast<std::size_t>(j)]);
  return v;
}

inline Eigen::VectorXd psi12_at(const CoefficientTriple& xi, const std::vector<int>& perm, int K,
                                Eigen::Index row) {
  const int L = xi.L;
  Eigen::VectorXd v(L - K);
  for (int j = K - 1; j < L - 1; ++j) v(j - (K - 1)) = xi.delta1(row, perm[static_cast<std::size_t>(j)]);
  return v;
}

}  // namespace detail

inline InnerOuterSplit split_inner_outer(const CoefficientTriple& xi, const LPSolution& sol,
                                         const ActiveSet& act, const ToleranceSet& tol = ToleranceSet()) {
  if (!(act.K >= 1)) throw Error("split requires a nonempty active set");
  if (!act.assumption_r_ok) throw Error("Assumption R diagnostics fail; split not defined");
  const int K = act.K;
  const int L = xi.L;

  // Greedy pivoted selection of K-1 delta columns spanning, with the ones
  // column, the active-constraint space; permutation recorded.
  Eigen::MatrixXd cand(K, L - 1);
  for (int k = 0; k < K; ++k)
    cand.row(k) = xi.delta1.row(static_cast<Eigen::Index>(act.points[static_cast<std::size_t>(k)].grid_index));
  std::vector<int> chosen;
  std::vector<Eigen::VectorXd> basis_vecs;
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(K) / std::sqrt(static_cast<double>(K));
  basis_vecs.push_back(ones);
  std::vector<bool> used(static_cast<std::size_t>(L - 1), false);
  for (int pick = 0; pick < K - 1; ++pick) {
    int best = -1;
    double best_norm = tol.rank_tol;
    Eigen::VectorXd best_res;
    for (int j = 0; j < L - 1; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      Eigen::VectorXd v = cand.col(j);
      for (const auto& q : basis_vecs) v -= q.dot(v) * q;
      if (v.norm() > best_norm) {
        best_norm = v.norm();
        best = j;
        best_res = v;
      }
    }
    if (best < 0) throw Error("Assumption R violated: no invertible K x K active block");
    used[static_cast<std::size_t>(best)] = true;
    chosen.push_back(best);
    basis_vecs.push_back(best_res / best_res.norm());
  }

  InnerOuterSplit sp;
  sp.K = K;
  sp.L = L;
  sp.perm = chosen;
  for (int j = 0; j < L - 1; ++j)
    if (!used[static_cast<std::size_t>(j)]) sp.perm.push_back(j);

  sp.theta1.resize(K);
  sp.theta1(0) = sol.gamma(0);
  for (int j = 0; j < K - 1; ++j) sp.theta1(j + 1) = sol.gamma(1 + sp.perm[static_cast<std::size_t>(j)]);
  sp.theta2.resize(L - K);
  for (int j = K - 1; j < L - 1; ++j) sp.theta2(j - (K - 1)) = sol.gamma(1 + sp.perm[static_cast<std::size_t>(j)]);

  sp.A11.resize(K, K);
  sp.A12.resize(L - K, K);
  sp.multipliers.resize(K);
  for (int k = 0; k < K; ++k) {
    auto row = static_cast<Eigen::Index>(act.points[static_cast<std::size_t>(k)].grid_index);
    sp.A11.col(k) = detail::psi11_at(xi, sp.perm, K, row);
    sp.A12.col(k) = detail::psi12_at(xi, sp.perm, K, row);
    sp.active.push_back(act.points[static_cast<std::size_t>(k)].grid_index);
    sp.pinned.push_back(act.points[static_cast<std::size_t>(k)].at_grid_boundary);
    sp.multipliers(k) = act.points[static_cast<std::size_t>(k)].multiplier;
  }
  sp.psi01.resize(K);
  sp.psi01(0) = -1.0;
  for (int j = 0; j < K - 1; ++j) sp.psi01(j + 1) = xi.delta0_at_y0(sp.perm[static_cast<std::size_t>(j)]);
  sp.psi02.resize(L - K);
  for (int j = K - 1; j < L - 1; ++j) sp.psi02(j - (K - 1)) = xi.delta0_at_y0(sp.perm[static_cast<std::size_t>(j)]);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sp.A11);
  double smax = svd.singularValues()(0);
  double smin = svd.singularValues()(svd.singularValues().size() - 1);
  if (!(smin > tol.rank_tol)) throw Error("Assumption R violated: active block singular");
  sp.rcond_A11 = smin / smax;

  Eigen::VectorXd lam_kkt = -sp.A11.partialPivLu().solve(sp.psi01);
  sp.kkt_multiplier_gap = (lam_kkt - sp.multipliers).cwiseAbs().maxCoeff();
  return sp;
}

//! Inner problem at a fixed theta_2: min over theta_1 of -theta_1'psi01 -
//! theta_2'psi02 subject to the grid constraints. Returns the value Q(theta_2)
//! and the inner optimum's active structure.
struct InnerSolution {
  double Q = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd theta1;
  std::vector<std::size_t> active;
  std::vector<bool> pinned;
  Eigen::VectorXd multipliers;  // over active points
  SolveStatus status = SolveStatus::max_iter;
};

inline InnerSolution inner_solve(const CoefficientTriple& xi, const std::vector<int>& perm, int K,
                                 const Eigen::VectorXd& theta2, const ToleranceSet& tol = ToleranceSet()) {
  const auto m = static_cast<Eigen::Index>(xi.grid.size());
  const int L = xi.L;
  Eigen::MatrixXd A(m, K);
  Eigen::VectorXd b(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    A.row(i) = detail::psi11_at(xi, perm, K, i).transpose();
    b(i) = xi.f_treated(i) - detail::psi12_at(xi, perm, K, i).dot(theta2);
  }
  Eigen::VectorXd c(K);  // objective -theta1'psi01 = gamma_0 - sum Delta_0 gamma_1j
  c(0) = 1.0;
  for (int j = 0; j < K - 1; ++j) c(j + 1) = -xi.delta0_at_y0(perm[static_cast<std::size_t>(j)]);

  InnerSolution out;
  auto res = detail::solve_primal_lp(A, b, c);
  if (res.status != LpStatus::optimal) {
    out.status = res.status == LpStatus::unbounded ? SolveStatus::unbounded : SolveStatus::infeasible;
    return out;
  }
  out.status = SolveStatus::optimal;
  out.theta1 = res.gamma;
  Eigen::VectorXd psi02(L - K);
  for (int j = K - 1; j < L - 1; ++j) psi02(j - (K - 1)) = xi.delta0_at_y0(perm[static_cast<std::size_t>(j)]);
  out.Q = res.value - theta2.dot(psi02);

  // clustered active set, as in active_set()
  struct Raw {
    std::size_t idx;
    double mass;
  };
  std::vector<std::vector<Raw>> clusters;
  for (Eigen::Index i = 0; i < m; ++i) {
    double resid = A.row(i).dot(res.gamma) - b(i);
    if (res.multipliers(i) > tol.mass_tol && std::abs(resid) <= tol.act_tol) {
      Raw r{static_cast<std::size_t>(i), res.multipliers(i)};
      if (!clusters.empty() && r.idx - clusters.back().back().idx <= 1)
        clusters.back().push_back(r);
      else
        clusters.push_back({r});
    }
  }
  for (const auto& cl : clusters) {
    const Raw* rep = &cl.front();
    double mass = 0.0;
    for (const auto& r : cl) {
      mass += r.mass;
      if (r.mass > rep->mass) rep = &r;
    }
    out.active.push_back(rep->idx);
    out.pinned.push_back(rep->idx == 0 || rep->idx + 1 == static_cast<std::size_t>(m));
    out.multipliers.conservativeResize(static_cast<Eigen::Index>(out.active.size()));
    out.multipliers(static_cast<Eigen::Index>(out.active.size()) - 1) = mass;
  }
  return out;
}

struct EnvelopeGradient {
  Eigen::VectorXd multiplier_form;  // -psi02 - A12 lambda
  Eigen::VectorXd kkt_form;         // -psi02 + A12 A11^{-1} psi01
  double discrepancy = 0.0;
};

inline EnvelopeGradient envelope_gradient(const InnerOuterSplit& sp) {
  EnvelopeGradient g;
  g.multiplier_form = -sp.psi02 - sp.A12 * sp.multipliers;
  g.kkt_form = -sp.psi02 + sp.A12 * sp.A11.partialPivLu().solve(sp.psi01);
  g.discrepancy = sp.theta2.size() == 0
                      ? 0.0
                      : (g.multiplier_form - g.kkt_form).cwiseAbs().maxCoeff();
  return g;
}

//! Local quadratic through three tabulation points around index i; supplies
//! value/first/second derivatives off the grid (stencil width: 2 grid steps).
struct LocalQuad {
  double x0, x1, x2;
  double f0, f1, f2;

  double d2() const {
    double h1 = x1 - x0, h2 = x2 - x1;
    return 2.0 * (h1 * f2 - (h1 + h2) * f1 + h2 * f0) / (h1 * h2 * (h1 + h2));
  }
  double d1_at(double y) const {
    // derivative of the Lagrange quadratic
    double c = 0.5 * d2();
    double bcoef = (f1 - f0) / (x1 - x0) - c * (x0 + x1);
    return bcoef + 2.0 * c * y;
  }
  double at(double y) const {
    double c = 0.5 * d2();
    double bcoef = (f1 - f0) / (x1 - x0) - c * (x0 + x1);
    double a = f0 - bcoef * x0 - c * x0 * x0;
    return a + bcoef * y + c * y * y;
  }
};

namespace detail {

inline LocalQuad quad_at(const EvalGrid& grid, const Eigen::VectorXd& tab, std::size_t i) {
  if (i == 0) i = 1;
  if (i + 1 >= grid.size()) i = grid.size() - 2;
  return LocalQuad{grid.points[i - 1], grid.points[i], grid.points[i + 1],
                   tab(static_cast<Eigen::Index>(i - 1)), tab(static_cast<Eigen::Index>(i)),
                   tab(static_cast<Eigen::Index>(i + 1))};
}

}  // namespace detail

struct EnvelopeHessian {
  Eigen::MatrixXd H;                 // (L-K) x (L-K), symmetrized
  std::vector<double> slack_curvature;  // -r''(y*_k) per interior active point, > 0 required
  std::vector<bool> pinned;          // boundary-pinned points contribute no curvature
  std::vector<Eigen::VectorXd> dy_dtheta2;  // active-point velocities, zero rows for pinned points
  double min_eigenvalue = 0.0;
  bool psd = true;
};

//! Appendix-style Hessian of the outer criterion: sum over interior active
//! points of d[A12 A11^{-1}]/dy_k psi01 times dy_k/dtheta2', with
//! dy_k/dtheta2 = V_k / Xi_k from the implicit function theorem on the KKT
//! system. Active points pinned at the grid boundary do not move, so they
//! contribute nothing. Requires smoothed coefficients.
inline EnvelopeHessian envelope_hessian(const InnerOuterSplit& sp, const CoefficientTriple& xi,
                                        bool refine_active = true, double curv_tol = 1e-12) {
  if (!xi.smoothed) throw Error("envelope_hessian requires smoothed estimators");
  const int K = sp.K;
  const int L = sp.L;
  EnvelopeHessian out;
  out.H = Eigen::MatrixXd::Zero(L - K, L - K);
  out.pinned = sp.pinned;
  if (L == K) return out;

  Eigen::PartialPivLU<Eigen::MatrixXd> luA11(sp.A11);
  Eigen::MatrixXd A12A11inv = sp.A12 * luA11.inverse();

  for (int k = 0; k < K; ++k) {
    if (sp.pinned[static_cast<std::size_t>(k)]) {
      out.slack_curvature.push_back(std::numeric_limits<double>::quiet_NaN());
      out.dy_dtheta2.push_back(Eigen::VectorXd::Zero(L - K));
      continue;
    }
    std::size_t idx = sp.active[static_cast<std::size_t>(k)];

    // residual r(y) = F(y) - theta1'Psi11(y) - theta2'Psi12(y) near the touch
    auto resid_at = [&](std::size_t i) {
      auto row = static_cast<Eigen::Index>(i);
      return xi.f_treated(row) - sp.theta1.dot(detail::psi11_at(xi, sp.perm, K, row)) -
             sp.theta2.dot(detail::psi12_at(xi, sp.perm, K, row));
    };
    double ystar = xi.grid.points[idx];
    if (refine_active && idx > 0 && idx + 1 < xi.grid.size()) {
      LocalQuad rq{xi.grid.points[idx - 1], xi.grid.points[idx], xi.grid.points[idx + 1],
                   resid_at(idx - 1), resid_at(idx), resid_at(idx + 1)};
      double curv = rq.d2();
      if (curv < -curv_tol) {
        // vertex of the residual parabola, clamped to the stencil
        double yv = ystar - rq.d1_at(ystar) / curv;
        ystar = std::clamp(yv, xi.grid.points[idx - 1], xi.grid.points[idx + 1]);
      }
    }

    Eigen::VectorXd dpsi11 = Eigen::VectorXd::Zero(K);
    Eigen::VectorXd d2psi11 = Eigen::VectorXd::Zero(K);
    for (int j = 0; j < K - 1; ++j) {
      auto q = detail::quad_at(xi.grid, xi.delta1.col(sp.perm[static_cast<std::size_t>(j)]), idx);
      dpsi11(j + 1) = q.d1_at(ystar);
      d2psi11(j + 1) = q.d2();
    }
    Eigen::VectorXd dpsi12(L - K), d2psi12(L - K);
    for (int j = K - 1; j < L - 1; ++j) {
      auto q = detail::quad_at(xi.grid, xi.delta1.col(sp.perm[static_cast<std::size_t>(j)]), idx);
      dpsi12(j - (K - 1)) = q.d1_at(ystar);
      d2psi12(j - (K - 1)) = q.d2();
    }
    auto qF = detail::quad_at(xi.grid, xi.f_treated, idx);
    double Fpp = qF.d2();

    double Xi = Fpp - sp.theta1.dot(d2psi11) - sp.theta2.dot(d2psi12);  // r''(y*)
    out.slack_curvature.push_back(-Xi);
    if (!(-Xi > curv_tol)) throw Error("degenerate tangency: slack curvature not positive at an active point");

    Eigen::VectorXd V = -A12A11inv * dpsi11 + dpsi12;
    Eigen::VectorXd dy_dtheta2 = V / Xi;
    out.dy_dtheta2.push_back(dy_dtheta2);

    Eigen::MatrixXd dA11 = Eigen::MatrixXd::Zero(K, K);
    dA11.col(k) = dpsi11;
    Eigen::MatrixXd dA12 = Eigen::MatrixXd::Zero(L - K, K);
    dA12.col(k) = dpsi12;
    Eigen::MatrixXd dM = dA12 * luA11.inverse() - A12A11inv * dA11 * luA11.inverse();
    out.H += (dM * sp.psi01) * dy_dtheta2.transpose();
  }
  out.H = 0.5 * (out.H + out.H.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.H);
  out.min_eigenvalue = es.eigenvalues().minCoeff();
  out.psd = out.min_eigenvalue >= -1e-8;
  return out;
}

struct CiResult {
  double y0 = 0.0;
  double point = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double level = 0.95;
  std::string method = "numerical_delta";
  int n_draws = 0;
  int n_failed_draws = 0;
  bool solution_set_unique = true;  // Fang-Santos caveat surfaced when false
  bool point_in_ci = true;
};

struct CiConfig {
  double kappa = 0.5;
  double t_n = 0.0;  // 0 => n^{-kappa/2}
  bool exact_resolve = false;
  bool upper_side = true;
  double tau = 100.0;
  ToleranceSet tol;
  bool smoothed = false;
  int grid_cap = 2048;
  int threads = 0;
};

//! Numerical-delta CI: nonparametric pair resamples feed perturbation
//! directions delta_b = n^kappa (xi*_b - xi_hat); derivative draws go through
//! the estimated solution sets (or exact re-solves of the perturbed SILP when
//! exact_resolve is set); the CI inverts the draw distribution at rate n^kappa.
inline CiResult numerical_delta_ci(const Dataset& ds, const std::optional<std::vector<double>>& x,
                                   double y0, double level, int B, std::uint64_t seed,
                                   const CiConfig& cfg = CiConfig()) {
  if (B < 100) throw Error("numerical delta method needs B >= 100");
  Bandwidths bw = default_bandwidths(ds, cfg.smoothed);
  EvalGrid grid = default_grid(ds, cfg.grid_cap);
  CoefficientTable table(ds, x, grid, bw, cfg.smoothed);
  CoefficientTriple xi = table.triple_at(y0);
  SilpProblem prob = cfg.upper_side ? build_upper(xi, cfg.tau) : build_lower(xi, cfg.tau);
  LPSolution sol = solve(prob, cfg.tol);
  if (sol.status != SolveStatus::optimal)
    throw Error(std::string("base SILP solve failed: ") + to_string(sol.status));

  SolutionSets sets = solution_sets(prob, sol, cfg.tol);
  const double n = static_cast<double>(ds.n());
  const double nk = std::pow(n, cfg.kappa);
  const double t_n = cfg.t_n > 0.0 ? cfg.t_n : std::pow(n, -cfg.kappa / 2.0);

  const auto m = static_cast<Eigen::Index>(grid.size());
  std::vector<double> draws(static_cast<std::size_t>(B), 0.0);
  std::vector<char> ok(static_cast<std::size_t>(B), 0);
  parallel_for(static_cast<std::size_t>(B), cfg.threads, [&](std::size_t b) {
    Rng rng(derive_seed(seed, b));
    std::vector<Observation> res_obs;
    res_obs.reserve(ds.n());
    for (std::size_t i = 0; i < ds.n(); ++i)
      res_obs.push_back(ds.observations()[rng.uniform_index(ds.n())]);
    try {
      Dataset rds(std::move(res_obs), ds.support());
      CoefficientTable rtable(rds, x, grid, bw, cfg.smoothed);
      PerturbationDirection dir;
      dir.delta0 = nk * (rtable.delta0_at(y0) - table.delta0_at(y0));
      dir.delta1 = nk * (rtable.delta1() - table.delta1());
      dir.deltaF = nk * (rtable.f_treated() - table.f_treated());
      if (cfg.exact_resolve) {
        CoefficientTriple pert = xi;
        pert.delta0_at_y0 += t_n * dir.delta0;
        pert.delta1 += t_n * dir.delta1;
        pert.f_treated += t_n * dir.deltaF;
        SilpProblem pprob = cfg.upper_side ? build_upper(pert, cfg.tau) : build_lower(pert, cfg.tau);
        LPSolution psol = solve(pprob, cfg.tol);
        if (psol.status != SolveStatus::optimal && psol.status != SolveStatus::ball_active)
          throw Error("perturbed solve failed");
        draws[b] = (psol.value - sol.value) / t_n;
      } else if (cfg.upper_side) {
        draws[b] = hadamard_derivative(sets, dir, xi);
      } else {
        // the lower program's derivative is a max-min of the same functional:
        // max-min e(delta) = -min-max e(-delta)
        PerturbationDirection neg;
        neg.delta0 = -dir.delta0;
        neg.delta1 = -dir.delta1;
        neg.deltaF = -dir.deltaF;
        draws[b] = -hadamard_derivative(sets, neg, xi);
      }
      ok[b] = 1;
    } catch (const Error&) {
      ok[b] = 0;
    }
  });

  std::vector<double> good;
  for (std::size_t b = 0; b < draws.size(); ++b)
    if (ok[b]) good.push_back(draws[b]);
  if (good.size() < 10) throw Error("too few successful resample draws");
  std::sort(good.begin(), good.end());

  CiResult ci;
  ci.y0 = y0;
  ci.point = sol.value;
  ci.level = level;
  ci.method = "numerical_delta";
  ci.n_draws = static_cast<int>(good.size());
  ci.n_failed_draws = B - ci.n_draws;
  ci.solution_set_unique = sets.unique;
  double alpha = 1.0 - level;
  double qlo = quantile_lerp(good, alpha / 2.0);
  double qhi = quantile_lerp(good, 1.0 - alpha / 2.0);
  ci.ci_lo = sol.value - qhi / nk;
  ci.ci_hi = sol.value - qlo / nk;
  ci.point_in_ci = ci.ci_lo <= ci.point && ci.point <= ci.ci_hi;
  return ci;
}

struct ThetaLimitReport {
  Eigen::MatrixXd var_term1;  // K x K empirical covariance of the residual term
  Eigen::MatrixXd var_term2;  // K x K, zero when theta_2 is empty or Hessian singular
  Eigen::MatrixXd var_sum;
  int n_draws = 0;
  bool term2_present = false;
  bool hessian_singular = false;
};

//! The two linear-representation terms for n^kappa (theta1_hat - theta1*):
//! [A11']^{-1} times the residual-process draws at the active points, plus
//! [A11']^{-1} A12' H^{-1} times the outer-gradient draws.
inline ThetaLimitReport theta_limit_terms(const InnerOuterSplit& sp, const CoefficientTriple& xi,
                                          const std::vector<PerturbationDirection>& draws,
                                          const std::optional<Eigen::MatrixXd>& hessian) {
  const int K = sp.K;
  const int L = sp.L;
  ThetaLimitReport rep;
  rep.var_term1 = Eigen::MatrixXd::Zero(K, K);
  rep.var_term2 = Eigen::MatrixXd::Zero(K, K);
  rep.var_sum = Eigen::MatrixXd::Zero(K, K);
  rep.n_draws = static_cast<int>(draws.size());
  rep.term2_present = L > K && hessian.has_value();
  if (draws.empty()) return rep;

  Eigen::VectorXd gamma1(L - 1);
  for (int j = 0; j < K - 1; ++j) gamma1(sp.perm[static_cast<std::size_t>(j)]) = sp.theta1(j + 1);
  for (int j = K - 1; j < L - 1; ++j) gamma1(sp.perm[static_cast<std::size_t>(j)]) = sp.theta2(j - (K - 1));

  Eigen::PartialPivLU<Eigen::MatrixXd> luA11T(Eigen::MatrixXd(sp.A11.transpose()));
  Eigen::MatrixXd Hinv;
  if (rep.term2_present) {
    Eigen::FullPivLU<Eigen::MatrixXd> luH(*hessian);
    if (luH.isInvertible())
      Hinv = luH.inverse();
    else {
      rep.term2_present = false;
      rep.hessian_singular = true;
    }
  }

  std::vector<Eigen::VectorXd> t1s, t2s;
  for (const auto& d : draws) {
    Eigen::VectorXd v(K);
    for (int k = 0; k < K; ++k) {
      auto row = static_cast<Eigen::Index>(sp.active[static_cast<std::size_t>(k)]);
      v(k) = d.deltaF(row) - gamma1.dot(d.delta1.row(row));
    }
    Eigen::VectorXd t1 = luA11T.solve(v);
    Eigen::VectorXd t2 = Eigen::VectorXd::Zero(K);
    if (rep.term2_present) {
      Eigen::VectorXd g(L - K);
      for (int j = K - 1; j < L - 1; ++j) {
        int col = sp.perm[static_cast<std::size_t>(j)];
        double acc = -d.delta0(col);
        for (int k = 0; k < K; ++k) {
          auto row = static_cast<Eigen::Index>(sp.active[static_cast<std::size_t>(k)]);
          acc -= sp.multipliers(k) * d.delta1(row, col);
        }
        g(j - (K - 1)) = acc;
      }
      t2 = luA11T.solve(sp.A12.transpose() * (Hinv * g));
    }
    t1s.push_back(t1);
    t2s.push_back(t2);
  }
  auto cov = [&](const std::vector<Eigen::VectorXd>& vs) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(K);
    for (const auto& v : vs) mean += v;
    mean /= static_cast<double>(vs.size());
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(K, K);
    for (const auto& v : vs) c += (v - mean) * (v - mean).transpose();
    return Eigen::MatrixXd(c / std::max<double>(1.0, static_cast<double>(vs.size()) - 1.0));
  };
  rep.var_term1 = cov(t1s);
  rep.var_term2 = cov(t2s);
  std::vector<Eigen::VectorXd> sums;
  for (std::size_t i = 0; i < t1s.size(); ++i) sums.push_back(t1s[i] + t2s[i]);
  rep.var_sum = cov(sums);
  return rep;
}

}  // namespace qtb
