#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qtbounds/dataset.hpp"
#include "qtbounds/sim.hpp"

using namespace qtb;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path.string();
}

}  // namespace

TEST_CASE("load_csv: minimal well-formed file") {
  auto p = write_temp("qtb_min.csv", "y,d,z\n1.0,0,0\n2.0,1,0\n3.0,0,1\n4.0,1,1\n");
  auto ds = load_csv(p);
  CHECK(ds.n() == 4);
  CHECK(ds.L() == 2);
  CHECK(ds.x_dim() == 0);
  CHECK(ds.reference_index() == 1);
}

TEST_CASE("load_csv: sorted distinct instrument mapping") {
  auto p = write_temp("qtb_z3.csv", "y,d,z\n1,0,1\n2,1,0.5\n3,0,0\n4,1,1\n5,0,0.5\n6,1,0\n");
  auto ds = load_csv(p);
  REQUIRE(ds.L() == 3);
  CHECK(ds.support().values == std::vector<double>{0.0, 0.5, 1.0});
  // order-preserving: raw z 0 -> index 0, 0.5 -> 1, 1 -> 2
  CHECK(ds.observations()[0].z_index == 2);
  CHECK(ds.observations()[1].z_index == 1);
  CHECK(ds.observations()[2].z_index == 0);
}

TEST_CASE("load_csv: validation errors") {
  auto p = write_temp("qtb_bad_d.csv", "y,d,z\n1,2,0\n2,1,1\n");
  CHECK_THROWS_WITH(load_csv(p), Catch::Matchers::ContainsSubstring("non-binary treatment"));

  auto p2 = write_temp("qtb_miss.csv", "y,d,z\n1,0,0\n,1,1\n");
  CHECK_THROWS_WITH(load_csv(p2), Catch::Matchers::ContainsSubstring("missing value"));

  auto p3 = write_temp("qtb_onez.csv", "y,d,z\n1,0,0\n2,1,0\n");
  CHECK_THROWS_WITH(load_csv(p3), Catch::Matchers::ContainsSubstring("fewer than 2 distinct"));

  auto p4 = write_temp("qtb_nocol.csv", "a,d,z\n1,0,0\n");
  CHECK_THROWS_WITH(load_csv(p4), Catch::Matchers::ContainsSubstring("missing column"));
}

TEST_CASE("cell_counts: even split and empty cell report") {
  auto p = write_temp("qtb_cells.csv", "y,d,z\n1,0,0\n2,1,0\n3,0,1\n4,1,1\n");
  auto ds = load_csv(p);
  auto cc = cell_counts(ds);
  CHECK(cc.total == 4);
  for (int d = 0; d < 2; ++d)
    for (int z = 0; z < 2; ++z) CHECK(cc.at(d, z) == 1);
  CHECK_FALSE(cc.has_empty_cell());

  auto p2 = write_temp("qtb_empty.csv", "y,d,z\n1,0,0\n2,1,0\n3,0,1\n4,0,1\n");
  auto ds2 = load_csv(p2);
  CHECK(cell_counts(ds2).at(1, 1) == 0);
  CHECK(cell_counts(ds2).has_empty_cell());
  auto rep = validate_for_estimation(ds2);
  CHECK_FALSE(rep.estimable);
  CHECK_FALSE(rep.issues.empty());
}

TEST_CASE("cell_counts: binomial balance in the simulation design") {
  SimParams sp;
  sp.n = 4000;
  sp.L = 2;
  sp.seed = 99;
  auto ds = dgp_sample(sp);
  auto cc = cell_counts(ds);
  double half_sd = 3.0 * std::sqrt(1000.0);  // 3 sd of Bin(4000, 1/2)
  for (int z = 0; z < 2; ++z) {
    double nz = static_cast<double>(cc.at(0, z) + cc.at(1, z));
    CHECK(std::abs(nz - 2000.0) <= half_sd);
  }
}

TEST_CASE("dataset dump/load round trip") {
  SimParams sp;
  sp.n = 500;
  sp.L = 3;
  sp.seed = 7;
  auto ds = dgp_sample(sp);
  auto path = std::filesystem::temp_directory_path() / "qtb_roundtrip.csv";
  {
    std::ofstream out(path);
    dump_csv(ds, out);
  }
  auto ds2 = load_csv(path.string());
  REQUIRE(ds2.n() == ds.n());
  REQUIRE(ds2.L() == ds.L());
  CHECK(ds2.support().values == ds.support().values);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    CHECK(ds2.observations()[i].y == ds.observations()[i].y);
    CHECK(ds2.observations()[i].d == ds.observations()[i].d);
    CHECK(ds2.observations()[i].z_index == ds.observations()[i].z_index);
  }
}

TEST_CASE("dataset rejects inconsistent observations") {
  std::vector<Observation> obs{{1.0, 0, 0, {}}, {2.0, 1, 1, {}}};
  InstrumentSupport sup{{0.0, 1.0}, 1};
  CHECK_NOTHROW(Dataset(obs, sup));
  obs[1].z_index = 5;
  CHECK_THROWS(Dataset(obs, sup));
  obs[1].z_index = 1;
  obs[1].y = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(Dataset(obs, sup));
}
