#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "qtbounds/common.hpp"
#include "qtbounds/dataset.hpp"
#include "qtbounds/estimators.hpp"
#include "qtbounds/silp.hpp"

namespace qtb {

constexpr double kQuantileUnattained = std::numeric_limits<double>::infinity();

struct BoundConfig {
  double tau = 100.0;
  ToleranceSet tol;
  bool smoothed = false;
  std::optional<Bandwidths> bandwidths;
  std::optional<EvalGrid> grid;
  int grid_cap = 2048;
  double margin_min = 0.05;
  //! Study mode: trust exactly this y0 interval instead of the margin gate.
  std::optional<std::pair<double, double>> trusted_interval;
  bool use_fallback_outside = true;
  bool compute_margins = true;
  int threads = 0;
};

//! Per-point outcome of the curve assembly.
enum class PointCode : int {
  ok = 0,
  ball_active = 1,
  fallback = 2,
  failed = 3,
};

struct BoundCurve {
  std::vector<double> y0_grid;
  std::vector<double> upper_raw, lower_raw;  // pointwise SILP (or fallback) values
  std::vector<double> upper, lower;          // clipped to [0,1] and monotonized
  std::vector<int> upper_code, lower_code;   // PointCode per point
  std::vector<bool> trusted;
  std::vector<double> margins;               // recession margins (NaN if skipped)
  std::vector<bool> reconciled;              // lower pulled down to upper after crossing
};

//! Optimal vertices banked over the trusted interval, kept separately for the
//! two programs: an upper-feasible gamma certifies an upper bound at every y0,
//! and symmetrically for the lower program.
struct SolutionBank {
  struct Entry {
    double y0;
    Eigen::VectorXd gamma;
  };
  std::vector<Entry> upper;
  std::vector<Entry> lower;
};

struct QteBounds {
  double tau_q = 0.5;
  double q1 = 0.0;
  double q0_lb = 0.0;
  double q0_ub = 0.0;
  double qte_lb = 0.0;
  double qte_ub = 0.0;
};

//! Surrogate bounds at one y0 from banked solutions: min over the upper bank
//! of the objective, max over the lower bank.
inline std::pair<double, double> fallback_outside(const SolutionBank& bank,
                                                  const Eigen::VectorXd& delta0_at_y0) {
  if (bank.upper.empty() && bank.lower.empty()) throw Error("fallback over an empty solution bank");
  auto objective = [&](const Eigen::VectorXd& g) {
    return g(0) - g.tail(g.size() - 1).dot(delta0_at_y0);
  };
  double up = std::numeric_limits<double>::infinity();
  for (const auto& e : bank.upper) up = std::min(up, objective(e.gamma));
  double lo = -std::numeric_limits<double>::infinity();
  for (const auto& e : bank.lower) lo = std::max(lo, objective(e.gamma));
  return {lo, up};
}

namespace detail {

//! Clip to [0,1], then monotonize preserving validity: the upper curve is
//! replaced by its running minimum from the right (min over y >= y0 of an
//! upper bound still dominates the nondecreasing F at y0), the lower curve by
//! its running maximum from the left. Crossings are reconciled by pulling the
//! lower curve down, which keeps it a valid lower bound.
inline void finalize_curve(BoundCurve& c) {
  const std::size_t n = c.y0_grid.size();
  c.upper.assign(n, 1.0);
  c.lower.assign(n, 0.0);
  c.reconciled.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    double u = c.upper_raw[i];
    double l = c.lower_raw[i];
    c.upper[i] = std::isfinite(u) ? std::clamp(u, 0.0, 1.0) : 1.0;
    c.lower[i] = std::isfinite(l) ? std::clamp(l, 0.0, 1.0) : 0.0;
  }
  for (std::size_t i = n - 1; i-- > 0;) c.upper[i] = std::min(c.upper[i], c.upper[i + 1]);
  for (std::size_t i = 1; i < n; ++i) c.lower[i] = std::max(c.lower[i], c.lower[i - 1]);
  for (std::size_t i = 0; i < n; ++i)
    if (c.lower[i] > c.upper[i]) {
      c.lower[i] = c.upper[i];
      c.reconciled[i] = true;
    }
}

}  // namespace detail

//! Pointwise bound curve for the counterfactual CDF on y0_grid. Points whose
//! recession margin fails the gate (or that fall outside a study-mode trusted
//! interval) are filled from the solution bank instead of their own SILP.
inline BoundCurve bound_curve(const Dataset& ds, const std::optional<std::vector<double>>& x,
                              const std::vector<double>& y0_grid, const BoundConfig& cfg,
                              SolutionBank* bank_out = nullptr) {
  Bandwidths bw = cfg.bandwidths ? *cfg.bandwidths : default_bandwidths(ds, cfg.smoothed);
  EvalGrid grid = cfg.grid ? *cfg.grid : default_grid(ds, cfg.grid_cap);
  CoefficientTable table(ds, x, grid, bw, cfg.smoothed);

  const std::size_t n = y0_grid.size();
  BoundCurve curve;
  curve.y0_grid = y0_grid;
  curve.upper_raw.assign(n, std::numeric_limits<double>::quiet_NaN());
  curve.lower_raw.assign(n, std::numeric_limits<double>::quiet_NaN());
  curve.upper_code.assign(n, static_cast<int>(PointCode::failed));
  curve.lower_code.assign(n, static_cast<int>(PointCode::failed));
  curve.trusted.assign(n, false);
  curve.margins.assign(n, std::numeric_limits<double>::quiet_NaN());

  // pass 1: trust determination
  std::vector<CoefficientTriple> triples(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    triples[i] = table.triple_at(y0_grid[i]);
    bool trusted = false;
    if (cfg.trusted_interval) {
      trusted = y0_grid[i] >= cfg.trusted_interval->first && y0_grid[i] <= cfg.trusted_interval->second;
      if (cfg.compute_margins) curve.margins[i] = recession_margin(triples[i]);
    } else {
      curve.margins[i] = recession_margin(triples[i]);
      trusted = curve.margins[i] >= cfg.margin_min;
    }
    curve.trusted[i] = trusted;
  });

  // pass 2: SILP solves on trusted points (and everywhere if no fallback)
  SolutionBank bank;
  std::vector<std::optional<Eigen::VectorXd>> up_gamma(n), lo_gamma(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    if (!curve.trusted[i] && cfg.use_fallback_outside) return;
    try {
      auto pu = build_upper(triples[i], cfg.tau);
      auto su = solve(pu, cfg.tol);
      if (su.status == SolveStatus::optimal || su.status == SolveStatus::ball_active) {
        curve.upper_raw[i] = su.value;
        curve.upper_code[i] = static_cast<int>(su.status == SolveStatus::ball_active ? PointCode::ball_active : PointCode::ok);
        if (su.status == SolveStatus::optimal) up_gamma[i] = su.gamma;
      }
    } catch (const Error&) {
    }
    try {
      auto pl = build_lower(triples[i], cfg.tau);
      auto sl = solve(pl, cfg.tol);
      if (sl.status == SolveStatus::optimal || sl.status == SolveStatus::ball_active) {
        curve.lower_raw[i] = sl.value;
        curve.lower_code[i] = static_cast<int>(sl.status == SolveStatus::ball_active ? PointCode::ball_active : PointCode::ok);
        if (sl.status == SolveStatus::optimal) lo_gamma[i] = sl.gamma;
      }
    } catch (const Error&) {
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (curve.trusted[i] && up_gamma[i]) bank.upper.push_back({y0_grid[i], *up_gamma[i]});
    if (curve.trusted[i] && lo_gamma[i]) bank.lower.push_back({y0_grid[i], *lo_gamma[i]});
  }

  // pass 3: fallback surrogates outside the trusted set
  if (cfg.use_fallback_outside && (!bank.upper.empty() || !bank.lower.empty())) {
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      if (curve.trusted[i]) return;
      auto [lo, up] = fallback_outside(bank, triples[i].delta0_at_y0);
      if (std::isfinite(up)) {
        curve.upper_raw[i] = up;
        curve.upper_code[i] = static_cast<int>(PointCode::fallback);
      }
      if (std::isfinite(lo)) {
        curve.lower_raw[i] = lo;
        curve.lower_code[i] = static_cast<int>(PointCode::fallback);
      }
    });
  }

  detail::finalize_curve(curve);
  if (bank_out) *bank_out = std::move(bank);
  return curve;
}

//! Q^LB = inf{y in grid : upper(y) >= tau_q}; q0_ub analogously from the lower
//! curve. Returns +inf sentinels when a curve never attains tau_q.
inline std::pair<double, double> quantile_invert(const BoundCurve& curve, double tau_q) {
  if (!(tau_q > 0.0 && tau_q < 1.0)) throw Error("quantile level must be in (0,1)");
  double q0_lb = kQuantileUnattained;
  double q0_ub = kQuantileUnattained;
  for (std::size_t i = 0; i < curve.y0_grid.size(); ++i) {
    if (q0_lb == kQuantileUnattained && curve.upper[i] >= tau_q) q0_lb = curve.y0_grid[i];
    if (q0_ub == kQuantileUnattained && curve.lower[i] >= tau_q) q0_ub = curve.y0_grid[i];
  }
  return {q0_lb, q0_ub};
}

//! QTE bounds at level tau_q: the treated quantile is identified directly, the
//! counterfactual quantile is bracketed by inverting the bound curve.
inline QteBounds qte_bounds(const Dataset& ds, const std::optional<std::vector<double>>& x, double tau_q,
                            const std::vector<double>& y0_grid, const BoundConfig& cfg,
                            const BoundCurve* precomputed = nullptr) {
  if (!(tau_q > 0.0 && tau_q < 1.0)) throw Error("quantile level must be in (0,1)");
  BoundCurve curve = precomputed ? *precomputed : bound_curve(ds, x, y0_grid, cfg);

  Bandwidths bw = cfg.bandwidths ? *cfg.bandwidths : default_bandwidths(ds, cfg.smoothed);
  auto ws = detail::collect_cell(ds, 1, std::nullopt, x, bw.h_d[1]);
  detail::require_nonempty(ws, 1, -1);
  double q1 = kQuantileUnattained;
  for (std::size_t i = 0; i < ws.y.size(); ++i)
    if (ws.cumw[i] / ws.total >= tau_q) {
      q1 = ws.y[i];
      break;
    }

  auto [q0_lb, q0_ub] = quantile_invert(curve, tau_q);
  QteBounds qb;
  qb.tau_q = tau_q;
  qb.q1 = q1;
  qb.q0_lb = q0_lb;
  qb.q0_ub = q0_ub;
  qb.qte_ub = q1 - q0_lb;
  qb.qte_lb = q0_ub == kQuantileUnattained ? -std::numeric_limits<double>::infinity() : q1 - q0_ub;
  return qb;
}

}  // namespace qtb
