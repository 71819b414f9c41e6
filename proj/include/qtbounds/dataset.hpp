#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qtbounds/common.hpp"

namespace qtb {

struct Observation {
  double y = 0.0;
  int d = 0;        // treatment flag, 0 or 1
  int z_index = 0;  // position in the instrument support, 0..L-1
  std::vector<double> x;
};

//! Ordered instrument support z_1 < ... < z_L with a reference category.
struct InstrumentSupport {
  std::vector<double> values;
  int reference_index = -1;  // defaults to L-1 (largest support point)

  int size() const { return static_cast<int>(values.size()); }

  void validate() const {
    if (values.size() < 2) throw Error("instrument support needs at least 2 distinct values");
    for (std::size_t i = 1; i < values.size(); ++i)
      if (!(values[i - 1] < values[i])) throw Error("instrument support values must be strictly increasing");
    if (reference_index < 0 || reference_index >= size())
      throw Error("reference_index out of range");
  }
};

struct CellCounts {
  int L = 0;
  std::array<std::vector<std::int64_t>, 2> n_dz;  // [d][z]
  std::int64_t total = 0;

  std::int64_t at(int d, int z) const { return n_dz[static_cast<std::size_t>(d)][static_cast<std::size_t>(z)]; }
  bool has_empty_cell() const {
    for (int d = 0; d < 2; ++d)
      for (const auto c : n_dz[static_cast<std::size_t>(d)])
        if (c == 0) return true;
    return false;
  }
};

//! Immutable after construction; shared read-only across parallel workers.
class Dataset {
public:
  Dataset(std::vector<Observation> obs, InstrumentSupport support)
    : obs_(std::move(obs)), support_(std::move(support)) {
    validate();
  }

  const std::vector<Observation>& observations() const { return obs_; }
  const InstrumentSupport& support() const { return support_; }
  std::size_t n() const { return obs_.size(); }
  int L() const { return support_.size(); }
  int x_dim() const { return x_dim_; }
  int reference_index() const { return support_.reference_index; }

  std::vector<double> y_in_cell(int d, int z_index) const {
    std::vector<double> out;
    for (const auto& o : obs_)
      if (o.d == d && o.z_index == z_index) out.push_back(o.y);
    return out;
  }

  double y_min() const { return y_min_; }
  double y_max() const { return y_max_; }

private:
  void validate() {
    if (obs_.empty()) throw Error("dataset is empty");
    support_.validate();
    x_dim_ = static_cast<int>(obs_.front().x.size());
    y_min_ = obs_.front().y;
    y_max_ = obs_.front().y;
    for (const auto& o : obs_) {
      if (!std::isfinite(o.y)) throw Error("non-finite outcome value");
      if (o.d != 0 && o.d != 1) throw Error("non-binary treatment");
      if (o.z_index < 0 || o.z_index >= L()) throw Error("z_index out of support range");
      if (static_cast<int>(o.x.size()) != x_dim_) throw Error("inconsistent covariate dimension");
      for (double xv : o.x)
        if (!std::isfinite(xv)) throw Error("non-finite covariate value");
      y_min_ = std::min(y_min_, o.y);
      y_max_ = std::max(y_max_, o.y);
    }
  }

  std::vector<Observation> obs_;
  InstrumentSupport support_;
  int x_dim_ = 0;
  double y_min_ = 0.0, y_max_ = 0.0;
};

inline CellCounts cell_counts(const Dataset& ds) {
  CellCounts cc;
  cc.L = ds.L();
  cc.n_dz[0].assign(static_cast<std::size_t>(cc.L), 0);
  cc.n_dz[1].assign(static_cast<std::size_t>(cc.L), 0);
  for (const auto& o : ds.observations())
    ++cc.n_dz[static_cast<std::size_t>(o.d)][static_cast<std::size_t>(o.z_index)];
  cc.total = static_cast<std::int64_t>(ds.n());
  return cc;
}

//! Column-name map for CSV ingestion.
struct ColumnMap {
  std::string y_col = "y";
  std::string d_col = "d";
  std::string z_col = "z";
  std::vector<std::string> x_cols;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_real(const std::string& s, std::size_t row, const std::string& col) {
  if (s.empty()) throw Error("missing value in column '" + col + "' at data row " + std::to_string(row));
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw Error("unparseable value '" + s + "' in column '" + col + "' at data row " + std::to_string(row));
  }
  if (pos != s.size())
    throw Error("unparseable value '" + s + "' in column '" + col + "' at data row " + std::to_string(row));
  return v;
}

}  // namespace detail

//! Load a header-first CSV. Instrument values are mapped to indices by sorted
//! distinct value; rows with any missing field are rejected.
inline Dataset load_csv(const std::string& path, const ColumnMap& cols = ColumnMap(),
                        int reference_index = -1) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open file: " + path);
  std::string header;
  if (!std::getline(in, header)) throw Error("empty file: " + path);
  auto names = detail::split_csv_line(header);
  auto find_col = [&](const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw Error("missing column '" + name + "' in " + path);
  };
  int iy = find_col(cols.y_col);
  int id = find_col(cols.d_col);
  int iz = find_col(cols.z_col);
  std::vector<int> ix;
  for (const auto& xc : cols.x_cols) ix.push_back(find_col(xc));

  struct RawRow {
    double y;
    int d;
    double z;
    std::vector<double> x;
  };
  std::vector<RawRow> raw;
  std::set<double> z_values;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != names.size())
      throw Error("row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                  " fields, expected " + std::to_string(names.size()));
    RawRow r;
    r.y = detail::parse_real(f[static_cast<std::size_t>(iy)], row, cols.y_col);
    if (!std::isfinite(r.y)) throw Error("non-finite outcome at data row " + std::to_string(row));
    double dv = detail::parse_real(f[static_cast<std::size_t>(id)], row, cols.d_col);
    if (dv != 0.0 && dv != 1.0) throw Error("non-binary treatment at data row " + std::to_string(row));
    r.d = static_cast<int>(dv);
    r.z = detail::parse_real(f[static_cast<std::size_t>(iz)], row, cols.z_col);
    if (!std::isfinite(r.z)) throw Error("non-finite instrument at data row " + std::to_string(row));
    for (int c : ix) r.x.push_back(detail::parse_real(f[static_cast<std::size_t>(c)], row, names[static_cast<std::size_t>(c)]));
    z_values.insert(r.z);
    raw.push_back(std::move(r));
  }
  if (raw.empty()) throw Error("no data rows in " + path);
  if (z_values.size() < 2) throw Error("fewer than 2 distinct instrument values in " + path);

  InstrumentSupport support;
  support.values.assign(z_values.begin(), z_values.end());
  support.reference_index = reference_index < 0 ? support.size() - 1 : reference_index;

  std::map<double, int> z_to_index;
  for (std::size_t i = 0; i < support.values.size(); ++i)
    z_to_index[support.values[i]] = static_cast<int>(i);

  std::vector<Observation> obs;
  obs.reserve(raw.size());
  for (auto& r : raw) {
    Observation o;
    o.y = r.y;
    o.d = r.d;
    o.z_index = z_to_index.at(r.z);
    o.x = std::move(r.x);
    obs.push_back(std::move(o));
  }
  return Dataset(std::move(obs), std::move(support));
}

//! Write the dataset back out in the same CSV schema load_csv reads.
inline void dump_csv(const Dataset& ds, std::ostream& out, const ColumnMap& cols = ColumnMap()) {
  out << cols.y_col << "," << cols.d_col << "," << cols.z_col;
  for (std::size_t j = 0; j < static_cast<std::size_t>(ds.x_dim()); ++j) {
    if (j < cols.x_cols.size())
      out << "," << cols.x_cols[j];
    else
      out << ",x" << j;
  }
  out << "\n";
  out.precision(17);
  for (const auto& o : ds.observations()) {
    out << o.y << "," << o.d << "," << ds.support().values[static_cast<std::size_t>(o.z_index)];
    for (double xv : o.x) out << "," << xv;
    out << "\n";
  }
}

//! Validation report used to gate estimation: every (d, z) cell needs >= 2 rows.
struct ValidationReport {
  bool estimable = true;
  std::vector<std::string> issues;
};

inline ValidationReport validate_for_estimation(const Dataset& ds) {
  ValidationReport rep;
  auto cc = cell_counts(ds);
  for (int d = 0; d < 2; ++d)
    for (int z = 0; z < cc.L; ++z)
      if (cc.at(d, z) < 2) {
        rep.estimable = false;
        rep.issues.push_back("cell (d=" + std::to_string(d) + ", z=" + std::to_string(z) +
                             ") has " + std::to_string(cc.at(d, z)) + " observations");
      }
  return rep;
}

}  // namespace qtb
