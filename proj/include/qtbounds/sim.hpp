#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "qtbounds/bounds.hpp"
#include "qtbounds/common.hpp"
#include "qtbounds/dataset.hpp"
#include "qtbounds/rng.hpp"

namespace qtb {

//! Monte Carlo design: Y = 1 - D + (1+D) U_D, D = 1(eta <= pi0 + pi1 Z),
//! U_1 = U + xi_1, U_0 = U_1 + nu, (U, eta) bivariate normal with corr rho,
//! Z ~ Bin(L-1, p)/(L-1) so the support endpoints are {0, 1} for every L.
struct SimParams {
  std::size_t n = 100000;
  int L = 2;
  double p = 0.5;
  double pi0 = 0.2;
  double pi1 = 0.5;
  double rho = 0.8;
  double sigma_xi1 = 1.0;
  double sigma_nu = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n < 1) throw Error("n must be >= 1");
    if (L < 2) throw Error("L must be >= 2");
    if (!(p > 0.0 && p < 1.0)) throw Error("p must be in (0,1)");
    if (!(std::abs(rho) < 1.0)) throw Error("|rho| must be < 1");
    if (!(sigma_xi1 > 0.0 && sigma_nu > 0.0)) throw Error("shock sds must be positive");
  }

  double z_value(int j) const { return static_cast<double>(j) / static_cast<double>(L - 1); }
  double threshold(int j) const { return pi0 + pi1 * z_value(j); }
  //! Binomial(L-1, p) pmf at j: weight of the Z atom j/(L-1).
  double z_weight(int j) const {
    double logw = std::lgamma(static_cast<double>(L)) - std::lgamma(static_cast<double>(j + 1)) -
                  std::lgamma(static_cast<double>(L - j));
    logw += j * std::log(p) + (L - 1 - j) * std::log(1.0 - p);
    return std::exp(logw);
  }
};

inline Dataset dgp_sample(const SimParams& sp) {
  sp.validate();
  Rng rng(sp.seed);
  std::vector<Observation> obs;
  obs.reserve(sp.n);
  const double root = std::sqrt(1.0 - sp.rho * sp.rho);
  for (std::size_t i = 0; i < sp.n; ++i) {
    double eta = rng.normal();
    double u = sp.rho * eta + root * rng.normal();
    double xi1 = sp.sigma_xi1 * rng.normal();
    double nu = sp.sigma_nu * rng.normal();
    int j = rng.binomial(sp.L - 1, sp.p);
    double u1 = u + xi1;
    double u0 = u1 + nu;
    Observation o;
    o.z_index = j;
    o.d = eta <= sp.threshold(j) ? 1 : 0;
    o.y = o.d == 1 ? 2.0 * u1 : 1.0 + u0;
    obs.push_back(o);
  }
  InstrumentSupport support;
  for (int j = 0; j < sp.L; ++j) support.values.push_back(sp.z_value(j));
  support.reference_index = sp.L - 1;
  return Dataset(std::move(obs), std::move(support));
}

namespace detail {

//! integral_{-inf}^{a} Phi((t - rho e)/s) phi(e) de via adaptive Gauss-Kronrod.
inline double truncated_normal_mix(double t, double a, double rho, double s, double abs_tol) {
  auto f = [&](double e) { return norm_cdf((t - rho * e) / s) * norm_pdf(e); };
  double err = 0.0;
  double lo = std::min(a, 0.0) - 40.0;
  double v = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, lo, a, 12, abs_tol, &err);
  if (err > 100.0 * abs_tol) throw Error("quadrature did not reach the requested tolerance");
  return v;
}

}  // namespace detail

//! Oracle F_{Y_0 | D}(y0 | 1): the mixture over Z atoms of truncated-normal
//! probabilities, by quadrature, independent of the sampling code path.
inline double truth_cdf(double y0, const SimParams& sp, double abs_tol = 1e-10) {
  sp.validate();
  const double s0 = std::sqrt(1.0 - sp.rho * sp.rho + sp.sigma_xi1 * sp.sigma_xi1 + sp.sigma_nu * sp.sigma_nu);
  double num = 0.0, den = 0.0;
  for (int j = 0; j < sp.L; ++j) {
    double w = sp.z_weight(j);
    double a = sp.threshold(j);
    num += w * detail::truncated_normal_mix(y0 - 1.0, a, sp.rho, s0, abs_tol);
    den += w * norm_cdf(a);
  }
  return num / den;
}

//! Oracle F_{Y_1 | D, Z}(y | 1, z_j) (or F_{Y_1 | D}(y | 1) with j absent).
inline double truth_cdf_treated(double y, const SimParams& sp, std::optional<int> j = std::nullopt,
                                double abs_tol = 1e-10) {
  sp.validate();
  const double s1 = std::sqrt(1.0 - sp.rho * sp.rho + sp.sigma_xi1 * sp.sigma_xi1);
  double num = 0.0, den = 0.0;
  for (int jj = 0; jj < sp.L; ++jj) {
    if (j && *j != jj) continue;
    double w = j ? 1.0 : sp.z_weight(jj);
    double a = sp.threshold(jj);
    num += w * detail::truncated_normal_mix(y / 2.0, a, sp.rho, s1, abs_tol);
    den += w * norm_cdf(a);
  }
  return num / den;
}

//! Oracle propensity p(z_j) = Phi(pi0 + pi1 z_j).
inline double truth_propensity(int j, const SimParams& sp) { return norm_cdf(sp.threshold(j)); }

//! Invert an oracle CDF by bisection.
inline double truth_quantile(double tau, const SimParams& sp, bool treated_outcome = false) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error("quantile level must be in (0,1)");
  auto f = [&](double y) { return treated_outcome ? truth_cdf_treated(y, sp) : truth_cdf(y, sp); };
  double lo = -50.0, hi = 50.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (f(mid) < tau)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

struct CurveBand {
  std::vector<double> mean, lo, hi;
};

struct SimResultForN {
  std::size_t N = 0;
  int R_requested = 0;
  int R_done = 0;
  int failures = 0;
  std::vector<BoundCurve> curves;  // per replication, index = replication id
  CurveBand upper_band, lower_band;
  std::vector<double> coverage;  // per y0: share of reps with truth in [lower, upper]
};

struct SimResult {
  SimParams params;
  double level = 0.95;
  std::vector<double> y0_grid;
  std::vector<double> truth;
  std::pair<double, double> trusted_interval{0.0, 0.0};
  std::vector<SimResultForN> by_n;
};

namespace detail {

inline CurveBand band_over_reps(const std::vector<BoundCurve>& curves, bool upper, double level) {
  CurveBand band;
  if (curves.empty()) return band;
  std::size_t m = curves.front().y0_grid.size();
  band.mean.assign(m, 0.0);
  band.lo.assign(m, 0.0);
  band.hi.assign(m, 0.0);
  double alpha = 1.0 - level;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> vals;
    vals.reserve(curves.size());
    for (const auto& c : curves) vals.push_back(upper ? c.upper[i] : c.lower[i]);
    std::sort(vals.begin(), vals.end());
    double mean = 0.0;
    for (double v : vals) mean += v;
    band.mean[i] = mean / static_cast<double>(vals.size());
    band.lo[i] = quantile_lerp(vals, alpha / 2.0);
    band.hi[i] = quantile_lerp(vals, 1.0 - alpha / 2.0);
  }
  return band;
}

}  // namespace detail

//! Replication study: for each N, R fresh draws with per-replication seeds
//! derived from (seed, N, r); pointwise means, percentile bands, and coverage
//! of the truth oracle. Failed replications are flagged, not fatal.
inline SimResult replicate(const SimParams& base, int R, const std::vector<std::size_t>& N_list,
                           const std::vector<double>& y0_grid, double level,
                           BoundConfig cfg = BoundConfig(), int threads = 0) {
  if (R < 2) throw Error("replication study needs R >= 2");
  SimResult out;
  out.params = base;
  out.level = level;
  out.y0_grid = y0_grid;
  out.trusted_interval = {truth_quantile(0.25, base), truth_quantile(0.75, base)};
  cfg.trusted_interval = out.trusted_interval;
  cfg.compute_margins = false;
  for (double y0 : y0_grid) out.truth.push_back(truth_cdf(y0, base));

  for (std::size_t N : N_list) {
    SimResultForN res;
    res.N = N;
    res.R_requested = R;
    res.curves.assign(static_cast<std::size_t>(R), BoundCurve{});
    std::vector<char> ok(static_cast<std::size_t>(R), 0);
    parallel_for(static_cast<std::size_t>(R), threads, [&](std::size_t r) {
      SimParams sp = base;
      sp.n = N;
      sp.seed = derive_seed(base.seed, N, r);
      try {
        Dataset ds = dgp_sample(sp);
        BoundConfig local = cfg;
        local.threads = 1;
        res.curves[r] = bound_curve(ds, std::nullopt, y0_grid, local);
        ok[r] = 1;
      } catch (const Error&) {
        ok[r] = 0;
      }
    });
    std::vector<BoundCurve> done;
    for (std::size_t r = 0; r < ok.size(); ++r)
      if (ok[r]) done.push_back(res.curves[r]);
    res.R_done = static_cast<int>(done.size());
    res.failures = R - res.R_done;
    res.upper_band = detail::band_over_reps(done, true, level);
    res.lower_band = detail::band_over_reps(done, false, level);
    res.coverage.assign(y0_grid.size(), 0.0);
    for (std::size_t i = 0; i < y0_grid.size(); ++i) {
      int cover = 0;
      for (const auto& c : done)
        if (c.lower[i] <= out.truth[i] && out.truth[i] <= c.upper[i]) ++cover;
      res.coverage[i] = done.empty() ? 0.0 : static_cast<double>(cover) / static_cast<double>(done.size());
    }
    res.curves = std::move(done);
    out.by_n.push_back(std::move(res));
  }
  return out;
}

struct TightenRow {
  int L = 0;
  double mean_width = 0.0;
  BoundCurve curve;
  std::vector<double> truth;
};

//! Single large-n draw per L; mean trusted-interval band width should weakly
//! decrease as the instrument support grows.
inline std::vector<TightenRow> tighten_report(const SimParams& base, const std::vector<int>& L_list,
                                              std::size_t n_large, const std::vector<double>& y0_grid,
                                              BoundConfig cfg = BoundConfig(), int threads = 0) {
  std::vector<TightenRow> rows(L_list.size());
  parallel_for(L_list.size(), threads, [&](std::size_t i) {
    SimParams sp = base;
    sp.L = L_list[i];
    sp.n = n_large;
    sp.seed = derive_seed(base.seed, static_cast<std::uint64_t>(sp.L), n_large);
    Dataset ds = dgp_sample(sp);
    BoundConfig local = cfg;
    local.trusted_interval = {truth_quantile(0.25, sp), truth_quantile(0.75, sp)};
    local.compute_margins = false;
    TightenRow row;
    row.L = sp.L;
    row.curve = bound_curve(ds, std::nullopt, y0_grid, local);
    double acc = 0.0;
    int cnt = 0;
    for (std::size_t k = 0; k < y0_grid.size(); ++k) {
      if (!row.curve.trusted[k]) continue;
      acc += row.curve.upper[k] - row.curve.lower[k];
      ++cnt;
    }
    row.mean_width = cnt > 0 ? acc / cnt : 0.0;
    for (double y0 : y0_grid) row.truth.push_back(truth_cdf(y0, sp));
    rows[i] = std::move(row);
  });
  return rows;
}

}  // namespace qtb
