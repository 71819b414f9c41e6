#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "qtbounds/common.hpp"
#include "qtbounds/dataset.hpp"

namespace qtb {

//! Strictly increasing evaluation grid spanning [y_lo, y_hi].
struct EvalGrid {
  std::vector<double> points;

  std::size_t size() const { return points.size(); }
  double lo() const { return points.front(); }
  double hi() const { return points.back(); }

  void validate() const {
    if (points.size() < 2) throw Error("grid needs at least 2 points");
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!std::isfinite(points[i])) throw Error("non-finite grid point");
      if (i > 0 && !(points[i - 1] < points[i])) throw Error("grid points must be strictly increasing");
    }
  }

  //! Index of the grid point closest to y.
  std::size_t nearest_index(double y) const {
    auto it = std::lower_bound(points.begin(), points.end(), y);
    if (it == points.end()) return points.size() - 1;
    if (it == points.begin()) return 0;
    std::size_t hi_idx = static_cast<std::size_t>(it - points.begin());
    return (y - points[hi_idx - 1] <= points[hi_idx] - y) ? hi_idx - 1 : hi_idx;
  }
};

enum class CdfKind { step, smoothed };

struct CdfEstimate {
  EvalGrid grid;
  std::vector<double> values;
  CdfKind kind = CdfKind::step;
  double b_n = 0.0;  // outcome smoothing bandwidth actually used (0 for step)

  void validate() const {
    grid.validate();
    if (values.size() != grid.size()) throw Error("cdf tabulation length mismatch");
    const double tol = kind == CdfKind::smoothed ? 1e-12 : 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] < -tol || values[i] > 1.0 + tol) throw Error("cdf value outside [0,1]");
      if (i > 0 && values[i] + tol < values[i - 1]) throw Error("cdf tabulation not nondecreasing");
    }
  }
};

//! Covariate kernel bandwidths per conditioning cell plus the outcome
//! smoothing bandwidth b_n (0 when step estimators are in force).
struct Bandwidths {
  std::array<std::vector<double>, 2> h_d;                // cell {D=d}, one per covariate dim
  std::array<std::vector<std::vector<double>>, 2> h_dz;  // cell {D=d, Z=z}: [d][z][dim]
  std::vector<std::vector<double>> h_z;                  // cell {Z=z} (propensity): [z][dim]
  double b_n = 0.0;

  bool smoothing() const { return b_n > 0.0; }
};

//! Silverman-rule bandwidths: 1.06 sigma n_cell^(-1/5) per covariate dimension
//! and cell; b_n = 1.06 sigma_Y n^(-1/3) when smoothing is requested.
inline Bandwidths default_bandwidths(const Dataset& ds, bool smoothing = false) {
  Bandwidths bw;
  const int L = ds.L();
  const int dim = ds.x_dim();
  auto silverman = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> h(static_cast<std::size_t>(dim), 1.0);
    if (idx.empty()) return h;
    double nc = static_cast<double>(idx.size());
    for (int k = 0; k < dim; ++k) {
      std::vector<double> col;
      col.reserve(idx.size());
      for (auto i : idx) col.push_back(ds.observations()[i].x[static_cast<std::size_t>(k)]);
      double sd = sample_sd(col);
      if (sd <= 0.0) sd = 1.0;
      h[static_cast<std::size_t>(k)] = 1.06 * sd * std::pow(nc, -0.2);
    }
    return h;
  };

  std::array<std::vector<std::size_t>, 2> by_d;
  std::array<std::vector<std::vector<std::size_t>>, 2> by_dz;
  std::vector<std::vector<std::size_t>> by_z(static_cast<std::size_t>(L));
  by_dz[0].resize(static_cast<std::size_t>(L));
  by_dz[1].resize(static_cast<std::size_t>(L));
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto& o = ds.observations()[i];
    by_d[static_cast<std::size_t>(o.d)].push_back(i);
    by_dz[static_cast<std::size_t>(o.d)][static_cast<std::size_t>(o.z_index)].push_back(i);
    by_z[static_cast<std::size_t>(o.z_index)].push_back(i);
  }
  if (dim > 0) {
    for (int d = 0; d < 2; ++d) {
      bw.h_d[static_cast<std::size_t>(d)] = silverman(by_d[static_cast<std::size_t>(d)]);
      for (int z = 0; z < L; ++z)
        bw.h_dz[static_cast<std::size_t>(d)].push_back(silverman(by_dz[static_cast<std::size_t>(d)][static_cast<std::size_t>(z)]));
    }
    for (int z = 0; z < L; ++z) bw.h_z.push_back(silverman(by_z[static_cast<std::size_t>(z)]));
  } else {
    bw.h_dz[0].resize(static_cast<std::size_t>(L));
    bw.h_dz[1].resize(static_cast<std::size_t>(L));
    bw.h_z.resize(static_cast<std::size_t>(L));
  }
  if (smoothing) {
    std::vector<double> ally;
    ally.reserve(ds.n());
    for (const auto& o : ds.observations()) ally.push_back(o.y);
    double sd = sample_sd(ally);
    if (sd <= 0.0) sd = 1.0;
    bw.b_n = 1.06 * sd * std::pow(static_cast<double>(ds.n()), -1.0 / 3.0);
  }
  return bw;
}

namespace detail {

//! (y, weight) pairs sorted by y with prefix weight sums; shared backbone of
//! every conditional-CDF evaluation.
struct WeightedSample {
  std::vector<double> y;       // sorted
  std::vector<double> cumw;    // prefix sums of weights, cumw[i] = w_0 + ... + w_i
  double total = 0.0;

  double weight_leq(double point) const {
    auto it = std::upper_bound(y.begin(), y.end(), point);
    if (it == y.begin()) return 0.0;
    return cumw[static_cast<std::size_t>(it - y.begin()) - 1];
  }

  //! Sum of w_i * Phi((point - y_i) / b). Contributions outside +-9b are 0/1.
  double smoothed_leq(double point, double b) const {
    const double span = 9.0 * b;
    auto lo = std::lower_bound(y.begin(), y.end(), point - span);
    auto hi = std::upper_bound(y.begin(), y.end(), point + span);
    double acc = 0.0;
    if (lo != y.begin()) acc = cumw[static_cast<std::size_t>(lo - y.begin()) - 1];
    for (auto it = lo; it != hi; ++it) {
      std::size_t i = static_cast<std::size_t>(it - y.begin());
      double w = cumw[i] - (i == 0 ? 0.0 : cumw[i - 1]);
      acc += w * norm_cdf((point - *it) / b);
    }
    return acc;
  }
};

inline double product_kernel(const std::vector<double>& x_eval, const std::vector<double>& x_obs,
                             const std::vector<double>& h) {
  double w = 1.0;
  for (std::size_t k = 0; k < x_eval.size(); ++k)
    w *= epanechnikov((x_eval[k] - x_obs[k]) / h[k]) / h[k];
  return w;
}

//! Collect the cell {D=d or any, Z=z or any}, with product-kernel weights when
//! a covariate point is given.
inline WeightedSample collect_cell(const Dataset& ds, std::optional<int> d, std::optional<int> z,
                                   const std::optional<std::vector<double>>& x,
                                   const std::vector<double>& h) {
  std::vector<std::pair<double, double>> yw;
  for (const auto& o : ds.observations()) {
    if (d && o.d != *d) continue;
    if (z && o.z_index != *z) continue;
    double w = 1.0;
    if (x) w = product_kernel(*x, o.x, h);
    if (w > 0.0) yw.emplace_back(o.y, w);
  }
  std::sort(yw.begin(), yw.end());
  WeightedSample ws;
  ws.y.reserve(yw.size());
  ws.cumw.reserve(yw.size());
  double acc = 0.0;
  for (const auto& [yy, ww] : yw) {
    ws.y.push_back(yy);
    acc += ww;
    ws.cumw.push_back(acc);
  }
  ws.total = acc;
  return ws;
}

inline void require_nonempty(const WeightedSample& ws, int d, int z) {
  if (ws.y.empty()) throw EmptyCellError(d, z);
  if (!(ws.total > 0.0)) throw EmptyCellError(d, z, ": zero total kernel weight");
}

inline const std::vector<double>& bw_or_empty(const std::vector<std::vector<double>>& table, int z) {
  static const std::vector<double> none;
  if (static_cast<std::size_t>(z) < table.size()) return table[static_cast<std::size_t>(z)];
  return none;
}

}  // namespace detail

//! Default grid: unique treated-arm outcomes plus padded endpoints, thinned to
//! at most `cap` points. With step estimators the SILP constraints are
//! piecewise constant between these points, so the finite reduction is exact.
inline EvalGrid default_grid(const Dataset& ds, int cap = 2048) {
  std::vector<double> treated;
  for (const auto& o : ds.observations())
    if (o.d == 1) treated.push_back(o.y);
  if (treated.empty()) throw EmptyCellError(1, -1);
  std::sort(treated.begin(), treated.end());
  treated.erase(std::unique(treated.begin(), treated.end()), treated.end());

  std::vector<double> ally;
  ally.reserve(ds.n());
  for (const auto& o : ds.observations()) ally.push_back(o.y);
  double sd = sample_sd(ally);
  if (sd <= 0.0) sd = 1.0;
  double pad = 1.06 * sd * std::pow(static_cast<double>(ds.n()), -1.0 / 3.0);

  EvalGrid g;
  double lo = ds.y_min() - pad;
  double hi = ds.y_max() + pad;
  if (static_cast<int>(treated.size()) + 2 <= cap) {
    g.points.push_back(lo);
    for (double v : treated)
      if (v > lo && v < hi) g.points.push_back(v);
    g.points.push_back(hi);
  } else {
    // quantile thinning: keep cap-2 evenly-ranked interior values
    g.points.push_back(lo);
    std::size_t m = static_cast<std::size_t>(cap) - 2;
    for (std::size_t k = 0; k < m; ++k) {
      std::size_t idx = (k * (treated.size() - 1)) / (m - 1);
      double v = treated[idx];
      if (v > lo && v < hi && (g.points.empty() || v > g.points.back())) g.points.push_back(v);
    }
    g.points.push_back(hi);
  }
  g.points.erase(std::unique(g.points.begin(), g.points.end()), g.points.end());
  g.validate();
  return g;
}

inline CdfEstimate cdf_step(const Dataset& ds, int d, std::optional<int> z,
                            const std::optional<std::vector<double>>& x, const Bandwidths& bw,
                            const EvalGrid& grid) {
  const std::vector<double>& h =
      z ? detail::bw_or_empty(bw.h_dz[static_cast<std::size_t>(d)], *z) : bw.h_d[static_cast<std::size_t>(d)];
  auto ws = detail::collect_cell(ds, d, z, x, h);
  detail::require_nonempty(ws, d, z ? *z : -1);
  CdfEstimate est;
  est.grid = grid;
  est.kind = CdfKind::step;
  est.values.reserve(grid.size());
  for (double g : grid.points) est.values.push_back(ws.weight_leq(g) / ws.total);
  return est;
}

inline CdfEstimate cdf_smoothed(const Dataset& ds, int d, std::optional<int> z,
                                const std::optional<std::vector<double>>& x, const Bandwidths& bw,
                                const EvalGrid& grid) {
  if (!(bw.b_n > 0.0)) throw Error("cdf_smoothed requires b_n > 0");
  const std::vector<double>& h =
      z ? detail::bw_or_empty(bw.h_dz[static_cast<std::size_t>(d)], *z) : bw.h_d[static_cast<std::size_t>(d)];
  auto ws = detail::collect_cell(ds, d, z, x, h);
  detail::require_nonempty(ws, d, z ? *z : -1);
  CdfEstimate est;
  est.grid = grid;
  est.kind = CdfKind::smoothed;
  est.b_n = bw.b_n;
  est.values.reserve(grid.size());
  for (double g : grid.points) est.values.push_back(ws.smoothed_leq(g, bw.b_n) / ws.total);
  return est;
}

//! Kernel estimate of the propensity score p(z, x) = Pr(D=1 | Z=z, X=x).
inline double propensity(const Dataset& ds, int z, const std::optional<std::vector<double>>& x,
                         const Bandwidths& bw) {
  const std::vector<double>& h = detail::bw_or_empty(bw.h_z, z);
  double num = 0.0, den = 0.0;
  for (const auto& o : ds.observations()) {
    if (o.z_index != z) continue;
    double w = x ? detail::product_kernel(*x, o.x, h) : 1.0;
    den += w;
    if (o.d == 1) num += w;
  }
  if (!(den > 0.0)) throw EmptyCellError(-1, z, ": empty instrument cell");
  return num / den;
}

namespace detail {

//! Joint sub-distribution estimate Pr(Y <= y, D = d | Z = z, X = x) as the
//! product F_hat(y | d, z, x) * p_hat(z,x)^d * (1 - p_hat(z,x))^(1-d).
struct JointCdf {
  WeightedSample cell;  // {D=d, Z=z}
  double p_factor = 0.0;
  double b_n = 0.0;  // 0 => step

  double at(double y) const {
    if (cell.y.empty() || !(cell.total > 0.0)) return 0.0;
    double f = b_n > 0.0 ? cell.smoothed_leq(y, b_n) / cell.total : cell.weight_leq(y) / cell.total;
    return f * p_factor;
  }
};

inline JointCdf make_joint(const Dataset& ds, int d, int z, const std::optional<std::vector<double>>& x,
                           const Bandwidths& bw, bool smoothed) {
  JointCdf jc;
  jc.cell = collect_cell(ds, d, z, x, bw_or_empty(bw.h_dz[static_cast<std::size_t>(d)], z));
  require_nonempty(jc.cell, d, z);
  double p = propensity(ds, z, x, bw);
  jc.p_factor = d == 1 ? p : 1.0 - p;
  jc.b_n = smoothed ? bw.b_n : 0.0;
  return jc;
}

}  // namespace detail

//! Tabulated instrument contrast Delta_dz(. | x) on the grid; identically zero
//! when z is the reference category.
inline std::vector<double> delta_dz(const Dataset& ds, int d, int z,
                                    const std::optional<std::vector<double>>& x, const Bandwidths& bw,
                                    const EvalGrid& grid, bool smoothed) {
  if (z == ds.reference_index()) return std::vector<double>(grid.size(), 0.0);
  auto jz = detail::make_joint(ds, d, z, x, bw, smoothed);
  auto jr = detail::make_joint(ds, d, ds.reference_index(), x, bw, smoothed);
  std::vector<double> out;
  out.reserve(grid.size());
  for (double g : grid.points) out.push_back(jz.at(g) - jr.at(g));
  return out;
}

//! The SILP coefficient functions at a covariate point and objective location y0.
struct CoefficientTriple {
  EvalGrid grid;
  Eigen::VectorXd delta0_at_y0;  // length L-1
  Eigen::MatrixXd delta1;        // grid.size() x (L-1)
  Eigen::VectorXd f_treated;     // F_hat(grid | D=1, x)
  double y0 = 0.0;
  std::vector<double> x;
  bool smoothed = false;
  int L = 0;

  void validate() const {
    grid.validate();
    const auto m = static_cast<Eigen::Index>(grid.size());
    if (delta1.rows() != m || f_treated.size() != m) throw Error("coefficient tabulations misaligned with grid");
    if (delta1.cols() != delta0_at_y0.size() || delta1.cols() != L - 1)
      throw Error("coefficient triple has wrong instrument dimension");
    if (delta1.size() > 0 && delta1.cwiseAbs().maxCoeff() > 1.0 + 1e-9)
      throw Error("instrument contrast exceeds 1 in absolute value");
  }
};

//! Reusable tabulations for one (dataset, x, grid): everything except
//! delta0, which is re-evaluated per y0. Backs bound curves and resampling.
class CoefficientTable {
public:
  CoefficientTable(const Dataset& ds, const std::optional<std::vector<double>>& x, const EvalGrid& grid,
                   const Bandwidths& bw, bool smoothed)
    : grid_(grid), smoothed_(smoothed), L_(ds.L()) {
    grid_.validate();
    const auto m = static_cast<Eigen::Index>(grid_.size());
    const int Lm1 = L_ - 1;
    delta1_.resize(m, Lm1);
    int col = 0;
    for (int z = 0; z < L_; ++z) {
      if (z == ds.reference_index()) continue;
      auto vals = delta_dz(ds, 1, z, x, bw, grid_, smoothed);
      for (Eigen::Index i = 0; i < m; ++i) delta1_(i, col) = vals[static_cast<std::size_t>(i)];
      ++col;
    }
    auto ft = smoothed ? cdf_smoothed(ds, 1, std::nullopt, x, bw, grid_)
                       : cdf_step(ds, 1, std::nullopt, x, bw, grid_);
    f_treated_ = Eigen::Map<const Eigen::VectorXd>(ft.values.data(), m);

    // untreated joints, kept as evaluable objects for delta0(y0)
    for (int z = 0; z < L_; ++z)
      joints0_.push_back(detail::make_joint(ds, 0, z, x, bw, smoothed));
    ref_ = ds.reference_index();
    zorder_.clear();
    for (int z = 0; z < L_; ++z)
      if (z != ref_) zorder_.push_back(z);
    if (x) x_ = *x;
  }

  const EvalGrid& grid() const { return grid_; }
  const Eigen::MatrixXd& delta1() const { return delta1_; }
  const Eigen::VectorXd& f_treated() const { return f_treated_; }
  bool smoothed() const { return smoothed_; }
  int L() const { return L_; }

  Eigen::VectorXd delta0_at(double y0) const {
    Eigen::VectorXd d0(L_ - 1);
    double ref_val = joints0_[static_cast<std::size_t>(ref_)].at(y0);
    for (std::size_t k = 0; k < zorder_.size(); ++k)
      d0(static_cast<Eigen::Index>(k)) = joints0_[static_cast<std::size_t>(zorder_[k])].at(y0) - ref_val;
    return d0;
  }

  CoefficientTriple triple_at(double y0) const {
    CoefficientTriple t;
    t.grid = grid_;
    t.delta0_at_y0 = delta0_at(y0);
    t.delta1 = delta1_;
    t.f_treated = f_treated_;
    t.y0 = y0;
    t.x = x_;
    t.smoothed = smoothed_;
    t.L = L_;
    return t;
  }

private:
  EvalGrid grid_;
  Eigen::MatrixXd delta1_;
  Eigen::VectorXd f_treated_;
  std::vector<detail::JointCdf> joints0_;
  std::vector<int> zorder_;
  int ref_ = 0;
  bool smoothed_ = false;
  int L_ = 0;
  std::vector<double> x_;
};

inline CoefficientTriple coefficient_triple(const Dataset& ds, const std::optional<std::vector<double>>& x,
                                            double y0, const EvalGrid& grid, const Bandwidths& bw,
                                            bool smoothed) {
  CoefficientTable tab(ds, x, grid, bw, smoothed);
  auto t = tab.triple_at(y0);
  t.validate();
  return t;
}

}  // namespace qtb
