#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "qtbounds/common.hpp"

namespace qtb {

enum class LpStatus { optimal, infeasible, unbounded, max_iter };

//! min obj'x  s.t.  eq x = rhs, x >= 0.
struct StandardForm {
  Eigen::MatrixXd eq;   // m x n, m small (number of primal variables), n large
  Eigen::VectorXd rhs;  // m
  Eigen::VectorXd obj;  // n
};

struct StandardResult {
  LpStatus status = LpStatus::max_iter;
  Eigen::VectorXd x;         // n, basic entries filled
  Eigen::VectorXd y;         // m, row duals at optimality
  Eigen::VectorXd farkas_y;  // m, infeasibility certificate: farkas_y'eq <= 0, farkas_y'rhs > 0
  std::vector<int> basis;
  double value = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  int alt_optima_hint = 0;  // nonbasic columns with near-zero reduced cost
  double phase1_residual = 0.0;
};

// Dense revised simplex, two-phase, Dantzig pricing with a Bland fallback once
// the objective stalls (anti-cycling). The basis inverse is recomputed every
// iteration; bases here have at most a few dozen rows.
class DenseSimplex {
public:
  explicit DenseSimplex(double pivot_tol = 1e-11, double opt_tol = 1e-10, int max_iter = 50000)
    : pivot_tol_(pivot_tol), opt_tol_(opt_tol), max_iter_(max_iter) {}

  StandardResult solve(const StandardForm& lp) const {
    const Eigen::Index m = lp.eq.rows();
    const Eigen::Index n = lp.eq.cols();
    if (lp.rhs.size() != m || lp.obj.size() != n) throw Error("standard form dimension mismatch");

    // Working copy with rows flipped so rhs >= 0, plus artificial columns.
    Eigen::MatrixXd A(m, n + m);
    Eigen::VectorXd b = lp.rhs;
    Eigen::VectorXd row_sign = Eigen::VectorXd::Ones(m);
    for (Eigen::Index i = 0; i < m; ++i)
      if (b(i) < 0.0) {
        b(i) = -b(i);
        row_sign(i) = -1.0;
      }
    for (Eigen::Index i = 0; i < m; ++i) A.row(i).head(n) = row_sign(i) * lp.eq.row(i);
    A.block(0, n, m, m) = Eigen::MatrixXd::Identity(m, m);

    std::vector<int> basis(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) basis[static_cast<std::size_t>(i)] = static_cast<int>(n + i);

    StandardResult res;
    int iters = 0;

    // Phase 1: minimize the artificial mass.
    Eigen::VectorXd obj1 = Eigen::VectorXd::Zero(n + m);
    obj1.tail(m).setOnes();
    Eigen::MatrixXd Binv = Eigen::MatrixXd::Identity(m, m);
    LpStatus st = run(A, b, obj1, n + m, basis, Binv, iters, /*phase1=*/true);
    if (st == LpStatus::max_iter) {
      res.status = LpStatus::max_iter;
      res.iterations = iters;
      return res;
    }
    Eigen::VectorXd xB = Binv * b;
    double art_mass = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
      if (basis[static_cast<std::size_t>(i)] >= n) art_mass += std::max(0.0, xB(i));
    if (art_mass > feas_tol_) {
      res.status = LpStatus::infeasible;
      res.iterations = iters;
      res.phase1_residual = art_mass;
      Eigen::VectorXd cB(m);
      for (Eigen::Index i = 0; i < m; ++i) cB(i) = obj1(basis[static_cast<std::size_t>(i)]);
      Eigen::VectorXd y1 = Binv.transpose() * cB;
      // undo the row flips so the certificate applies to the original rows
      res.farkas_y = row_sign.asDiagonal() * y1;
      return res;
    }

    // Drive leftover artificials out of the basis; drop redundant rows.
    std::vector<Eigen::Index> keep_rows;
    {
      std::vector<bool> drop(static_cast<std::size_t>(m), false);
      for (Eigen::Index i = 0; i < m; ++i) {
        if (basis[static_cast<std::size_t>(i)] < n) continue;
        Eigen::RowVectorXd tab_row = Binv.row(i) * A.leftCols(n);
        Eigen::Index enter = -1;
        double best = pivot_tol_;
        for (Eigen::Index j = 0; j < n; ++j)
          if (std::abs(tab_row(j)) > best) {
            best = std::abs(tab_row(j));
            enter = j;
          }
        if (enter >= 0) {
          basis[static_cast<std::size_t>(i)] = static_cast<int>(enter);
          refactor(A, basis, Binv);
        } else {
          drop[static_cast<std::size_t>(i)] = true;  // redundant constraint
        }
      }
      for (Eigen::Index i = 0; i < m; ++i)
        if (!drop[static_cast<std::size_t>(i)]) keep_rows.push_back(i);
    }

    Eigen::Index m2 = static_cast<Eigen::Index>(keep_rows.size());
    Eigen::MatrixXd A2(m2, n);
    Eigen::VectorXd b2(m2);
    std::vector<int> basis2;
    for (Eigen::Index r = 0; r < m2; ++r) {
      A2.row(r) = A.row(keep_rows[static_cast<std::size_t>(r)]).head(n);
      b2(r) = b(keep_rows[static_cast<std::size_t>(r)]);
      basis2.push_back(basis[static_cast<std::size_t>(keep_rows[static_cast<std::size_t>(r)])]);
    }
    Eigen::MatrixXd Binv2(m2, m2);
    refactor(A2, basis2, Binv2);

    // Phase 2.
    st = run(A2, b2, lp.obj, n, basis2, Binv2, iters, /*phase1=*/false);
    res.iterations = iters;
    if (st == LpStatus::unbounded || st == LpStatus::max_iter) {
      res.status = st;
      return res;
    }

    res.status = LpStatus::optimal;
    res.x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd xB2 = Binv2 * b2;
    for (Eigen::Index i = 0; i < m2; ++i)
      res.x(basis2[static_cast<std::size_t>(i)]) = std::max(0.0, xB2(i));
    Eigen::VectorXd cB(m2);
    for (Eigen::Index i = 0; i < m2; ++i) cB(i) = lp.obj(basis2[static_cast<std::size_t>(i)]);
    Eigen::VectorXd y2 = Binv2.transpose() * cB;
    // expand duals to the original rows (dropped redundant rows get dual 0)
    res.y = Eigen::VectorXd::Zero(m);
    for (Eigen::Index r = 0; r < m2; ++r)
      res.y(keep_rows[static_cast<std::size_t>(r)]) = row_sign(keep_rows[static_cast<std::size_t>(r)]) * y2(r);
    res.basis = basis2;
    res.value = lp.obj.dot(res.x);

    Eigen::VectorXd rc = lp.obj - A2.transpose() * y2;
    for (int j : basis2) rc(j) = 1.0;  // exclude basics from the count
    res.alt_optima_hint = static_cast<int>((rc.array().abs() < opt_tol_).count());
    return res;
  }

private:
  static void refactor(const Eigen::MatrixXd& A, const std::vector<int>& basis, Eigen::MatrixXd& Binv) {
    const Eigen::Index m = A.rows();
    Eigen::MatrixXd B(m, m);
    for (Eigen::Index i = 0; i < m; ++i) B.col(i) = A.col(basis[static_cast<std::size_t>(i)]);
    Binv = B.partialPivLu().inverse();
  }

  //! One simplex phase over the first n_price columns. Returns optimal (meaning
  //! phase converged), unbounded, or max_iter.
  LpStatus run(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const Eigen::VectorXd& obj,
               Eigen::Index n_price, std::vector<int>& basis, Eigen::MatrixXd& Binv, int& iters,
               bool phase1) const {
    const Eigen::Index m = A.rows();
    refactor(A, basis, Binv);
    double last_value = std::numeric_limits<double>::infinity();
    int stall = 0;
    const int stall_limit = 2 * static_cast<int>(m) + 20;
    bool bland = false;

    for (; iters < max_iter_; ++iters) {
      Eigen::VectorXd cB(m);
      for (Eigen::Index i = 0; i < m; ++i) cB(i) = pick_obj(obj, basis[static_cast<std::size_t>(i)], n_price);
      Eigen::VectorXd y = Binv.transpose() * cB;
      Eigen::VectorXd xB = Binv * b;

      // pricing
      Eigen::Index enter = -1;
      double best_rc = -opt_tol_;
      for (Eigen::Index j = 0; j < n_price; ++j) {
        if (is_basic(basis, static_cast<int>(j))) continue;
        double rc = obj(j) - y.dot(A.col(j));
        if (bland) {
          if (rc < -opt_tol_) {
            enter = j;
            break;
          }
        } else if (rc < best_rc) {
          best_rc = rc;
          enter = j;
        }
      }
      if (enter < 0) return LpStatus::optimal;

      Eigen::VectorXd d = Binv * A.col(enter);
      Eigen::Index leave = -1;
      double best_ratio = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < m; ++i) {
        if (d(i) > pivot_tol_) {
          double ratio = std::max(0.0, xB(i)) / d(i);
          if (ratio < best_ratio - 1e-13) {
            best_ratio = ratio;
            leave = i;
          } else if (ratio < best_ratio + 1e-13 && leave >= 0) {
            // tie: Bland picks the lowest basis index, Dantzig the biggest pivot
            if (bland) {
              if (basis[static_cast<std::size_t>(i)] < basis[static_cast<std::size_t>(leave)]) leave = i;
            } else if (std::abs(d(i)) > std::abs(d(leave))) {
              leave = i;
            }
          }
        }
      }
      if (leave < 0) return LpStatus::unbounded;

      basis[static_cast<std::size_t>(leave)] = static_cast<int>(enter);
      refactor(A, basis, Binv);

      double value = 0.0;
      {
        Eigen::VectorXd xB_new = Binv * b;
        for (Eigen::Index i = 0; i < m; ++i)
          value += pick_obj(obj, basis[static_cast<std::size_t>(i)], n_price) * xB_new(i);
      }
      if (value < last_value - 1e-12) {
        stall = 0;
        last_value = value;
      } else if (!bland && ++stall > stall_limit) {
        bland = true;  // anti-cycling fallback
      }
      (void)phase1;
    }
    return LpStatus::max_iter;
  }

  static double pick_obj(const Eigen::VectorXd& obj, int j, Eigen::Index n_price) {
    return j < n_price ? obj(j) : 0.0;
  }

  static bool is_basic(const std::vector<int>& basis, int j) {
    return std::find(basis.begin(), basis.end(), j) != basis.end();
  }

  double pivot_tol_;
  double opt_tol_;
  double feas_tol_ = 1e-9;
  int max_iter_;
};

}  // namespace qtb
