/*
 Copyright 2026 The hkoop Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "hkoop/datagen.hpp"
#include "hkoop/errors.hpp"
#include "hkoop/koopman.hpp"

using namespace hkoop;

namespace {

HybridSystemSpec identity_system() {
  HybridSystemSpec spec;
  spec.name = "identity";
  spec.dims = {2, 1, 1, 0};
  spec.y_domain = {{0, 3}};
  spec.f = [](const Vector& x, const Discrete&, const Vector&, const Discrete&) { return x; };
  spec.g = [](const Vector&, const Discrete& y, const Vector&, const Discrete&) { return y; };
  spec.state_box = {Vector::Constant(2, -1.0), Vector::Constant(2, 1.0)};
  spec.control_box = {Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)};
  return spec;
}

double at(const PairDataset& ds, Eigen::Index row, const std::string& col) {
  return ds.data(row, static_cast<Eigen::Index>(ds.column(col)));
}

} // namespace

TEST(Generate, ToyGridSize) {
  GridSpec g;
  g.x = {{-3.0, 3.0, 500}};
  g.y = {{0, 1}};
  auto ds = generate_pairs(toy_system(), g);
  EXPECT_EQ(ds.size(), 1000u);
  EXPECT_EQ(ds.system, "toy");
  EXPECT_EQ(ds.formulation, "switched");
  EXPECT_FALSE(ds.grid_hash.empty());
}

TEST(Generate, IdentityGridIsRowMajor) {
  GridSpec g;
  g.x = {{-1.0, 1.0, 2}, {-1.0, 1.0, 2}};
  g.y = {{0, 3}};
  g.u = {{-1.0, 1.0, 2}};
  auto ds = generate_pairs(identity_system(), g);
  ASSERT_EQ(ds.size(), 16u);
  std::vector<std::string> cols{"x0", "x1", "y0", "u0", "x0_next", "x1_next", "y0_next"};
  EXPECT_EQ(ds.columns, cols);
  // Last axis (u) varies fastest.
  EXPECT_EQ(at(ds, 0, "u0"), -1.0);
  EXPECT_EQ(at(ds, 1, "u0"), 1.0);
  EXPECT_EQ(at(ds, 2, "y0"), 3.0);
  EXPECT_EQ(at(ds, 4, "x1"), 1.0);
  EXPECT_EQ(at(ds, 8, "x0"), 1.0);
  for (Eigen::Index r = 0; r < 16; ++r) {
    EXPECT_EQ(at(ds, r, "x0_next"), at(ds, r, "x0"));
    EXPECT_EQ(at(ds, r, "x1_next"), at(ds, r, "x1"));
    EXPECT_EQ(at(ds, r, "y0_next"), at(ds, r, "y0"));
  }
}

TEST(Generate, EveryGridPointAppearsOnce) {
  auto g = hkoop::testing::transmission_grid("switched");
  auto ds = generate_pairs(transmission_system(), g);
  EXPECT_EQ(ds.size(), g.point_count());
  std::set<std::vector<double>> seen;
  for (Eigen::Index r = 0; r < ds.data.rows(); ++r)
    seen.insert({at(ds, r, "x0"), at(ds, r, "x1"), at(ds, r, "y0"), at(ds, r, "u0")});
  EXPECT_EQ(seen.size(), ds.size());
}

TEST(Generate, RowsMatchTheOracle) {
  auto spec = transmission_system();
  GridSpec g;
  g.x = {{-50.0, 550.0, 7}, {1.0, 45.0, 9}};
  g.y = {{1, 2, 3, 4, 5}};
  g.u = {{0.0, 30.0, 4}};
  g.two_step = true;
  auto ds = generate_pairs(spec, g);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Eigen::Index> pick(0, static_cast<Eigen::Index>(ds.size()) - 1);
  for (int i = 0; i < 100; ++i) {
    auto r = pick(rng);
    Vector x(2), u(1);
    x << at(ds, r, "x0"), at(ds, r, "x1");
    u << at(ds, r, "u0");
    Discrete y{static_cast<std::int64_t>(at(ds, r, "y0"))};
    auto s1 = step(spec, {x, y}, {u, {}});
    EXPECT_EQ(at(ds, r, "x0_next"), s1.x[0]);
    EXPECT_EQ(at(ds, r, "x1_next"), s1.x[1]);
    EXPECT_EQ(at(ds, r, "y0_next"), static_cast<double>(s1.y[0]));
    auto s2 = step(spec, s1, {u, {}});
    EXPECT_EQ(at(ds, r, "x1_next2"), s2.x[1]);
    EXPECT_EQ(at(ds, r, "u0_next"), u[0]);
  }
}

TEST(Generate, TransformedLayout) {
  auto spec = transmission_system();
  auto g = hkoop::testing::transmission_grid("transformed", true);
  auto ds = generate_pairs(spec, g);
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(ds.size()); r += 7) {
    Vector x(2), u(1);
    x << at(ds, r, "x0"), at(ds, r, "x1");
    u << at(ds, r, "u0");
    Discrete y{static_cast<std::int64_t>(at(ds, r, "y0"))};
    const double phi = at(ds, r, "phi0");
    auto s1 = step(spec, {x, y}, {u, {}});
    EXPECT_EQ(at(ds, r, "v0"), s1.x[0] - x[0]);
    EXPECT_EQ(at(ds, r, "v1"), s1.x[1] - x[1]);
    EXPECT_EQ(at(ds, r, "u0_next"), u[0] + phi);
    Vector u1 = Vector::Constant(1, u[0] + phi);
    auto s2 = step(spec, s1, {u1, {}});
    EXPECT_EQ(at(ds, r, "v1_next"), s2.x[1] - s1.x[1]);
    EXPECT_EQ(at(ds, r, "phi0_next"), 0.0);
    EXPECT_EQ(at(ds, r, "u0_next2"), u1[0]);
  }
}

TEST(Generate, ThreadCountDoesNotChangeData) {
  auto spec = transmission_system();
  GridSpec g;
  g.x = {{-50.0, 550.0, 9}, {1.0, 45.0, 11}};
  g.y = {{1, 2, 3, 4, 5}};
  g.u = {{0.0, 30.0, 5}};
  auto a = generate_pairs(spec, g, 1);
  auto b = generate_pairs(spec, g, 4);
  EXPECT_EQ(a.data, b.data);
}

TEST(Generate, RejectsBadGrids) {
  auto spec = toy_system();
  GridSpec g;
  g.x = {{-9.0, 3.0, 5}};
  g.y = {{0, 1}};
  EXPECT_THROW(generate_pairs(spec, g), InvalidInput);
  g.x = {{-3.0, 3.0, 1}};
  EXPECT_THROW(generate_pairs(spec, g), InvalidInput);
  g.x = {{-3.0, 3.0, 5}};
  g.y = {{0, 2}};
  EXPECT_THROW(generate_pairs(spec, g), InvalidInput);
  g.y = {{0, 1}};
  g.formulation = "koopman";
  EXPECT_THROW(generate_pairs(spec, g), InvalidInput);
  g.formulation = "switched";
  g.max_points = 9;
  EXPECT_THROW(generate_pairs(spec, g), DomainTooLarge);
}

TEST(Persistence, RoundTripIsExact) {
  for (const char* f : {"switched", "hybrid", "transformed"}) {
    auto ds = generate_pairs(transmission_system(), hkoop::testing::transmission_grid(f, true));
    ds.config_hash = "0123";
    std::stringstream ss;
    write_dataset(ss, ds);
    auto back = read_dataset(ss);
    EXPECT_EQ(back.formulation, ds.formulation);
    EXPECT_EQ(back.dims, ds.dims);
    EXPECT_EQ(back.two_step, ds.two_step);
    EXPECT_EQ(back.grid_hash, ds.grid_hash);
    EXPECT_EQ(back.config_hash, "0123");
    EXPECT_EQ(back.columns, ds.columns);
    EXPECT_EQ(back.data, ds.data);
  }
}

TEST(Persistence, MissingColumnIsNamed) {
  auto ds = generate_pairs(toy_system(), hkoop::testing::toy_grid("transformed", 5));
  std::stringstream ss;
  write_dataset(ss, ds);
  std::string text = ss.str();
  auto pos = text.find(",v0,");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 4, ",w0,");
  std::istringstream in(text);
  try {
    read_dataset(in);
    FAIL() << "expected a schema error";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("'v0'"), std::string::npos);
  }
}

TEST(Persistence, RequiresMetadataAndNumbers) {
  std::istringstream untagged("x0,y0,x0_next,y0_next\n0,0,1,0\n");
  EXPECT_THROW(read_dataset(untagged), SchemaError);
  std::istringstream bad(
      "# hkoop-dataset formulation=switched system=toy n=1 m=0 p=1 q=0 two_step=0\nx0,y0,x0_next,y0_next\n0,0,abc,0\n");
  try {
    read_dataset(bad);
    FAIL() << "expected a schema error";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("x0_next"), std::string::npos);
  }
}

TEST(Persistence, EmptyDatasetCannotTrain) {
  std::istringstream empty("# hkoop-dataset formulation=switched system=toy n=1 m=0 p=1 q=0 two_step=0\n"
                           "x0,y0,x0_next,y0_next\n");
  auto ds = read_dataset(empty);
  EXPECT_EQ(ds.size(), 0u);
  auto model = make_model(Formulation::Switched, toy_system(), {}, 1);
  EXPECT_THROW(train(model, ds, {}), InvalidInput);
}
