#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace qtb {

constexpr const char* kLibraryVersion = "0.1.0";
constexpr int kSchemaVersion = 1;

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

//! Thrown when a conditioning cell required by an estimator is empty or too thin.
class EmptyCellError : public Error {
public:
  EmptyCellError(int d, int z_index, const std::string& what_extra = "")
    : Error("empty or degenerate cell (d=" + std::to_string(d) +
            ", z_index=" + std::to_string(z_index) + ")" + what_extra),
      d_(d), z_index_(z_index) {}
  int d() const { return d_; }
  int z_index() const { return z_index_; }

private:
  int d_;
  int z_index_;
};

inline double norm_pdf(double x) {
  static const double inv_sqrt_2pi = 0.3989422804014326779;
  return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double norm_cdf(double x) {
  return 0.5 * std::erfc(-x * 0.70710678118654752440);
}

//! Epanechnikov kernel, support [-1, 1].
inline double epanechnikov(double u) {
  double a = std::abs(u);
  return a >= 1.0 ? 0.0 : 0.75 * (1.0 - a * a);
}

inline bool approx_eq(double a, double b, double tol) { return std::abs(a - b) <= tol; }

//! inf{v : empirical cdf >= tau} over a sorted sample.
inline double quantile_inf(const std::vector<double>& sorted, double tau) {
  if (sorted.empty()) throw Error("quantile of empty sample");
  if (tau <= 0.0) return sorted.front();
  if (tau >= 1.0) return sorted.back();
  std::size_t k = static_cast<std::size_t>(std::ceil(tau * static_cast<double>(sorted.size())));
  if (k == 0) k = 1;
  return sorted[k - 1];
}

//! Linear-interpolation quantile (type 7) over a sorted sample.
inline double quantile_lerp(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw Error("quantile of empty sample");
  if (p <= 0.0) return sorted.front();
  if (p >= 1.0) return sorted.back();
  double h = p * (static_cast<double>(sorted.size()) - 1.0);
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  double w = h - static_cast<double>(lo);
  return (1.0 - w) * sorted[lo] + w * sorted[hi];
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (static_cast<double>(v.size()) - 1.0));
}

//! Run fn(i) for i in [0, n) on up to `degree` threads. Results must be written
//! to disjoint, pre-sized slots so the outcome is independent of scheduling.
inline void parallel_for(std::size_t n, int degree, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (degree <= 0) degree = hw > 0 ? hw : 1;
  degree = std::min<int>(degree, static_cast<int>(n));
  if (degree <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(degree));
  std::exception_ptr first_error = nullptr;
  std::mutex err_mutex;
  for (int t = 0; t < degree; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(degree)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace qtb
