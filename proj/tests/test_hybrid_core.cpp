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

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "hkoop/errors.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/systems.hpp"

using namespace hkoop;

namespace {

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

// x' = x, y' = y with two continuous and one discrete component.
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

} // namespace

TEST(Step, ToyHandEvaluations) {
  auto spec = toy_system();
  auto s = step(spec, {vec({0.0}), {1}}, empty_control(spec.dims));
  EXPECT_EQ(s.x[0], 1.0);
  EXPECT_EQ(s.y, Discrete{1});

  s = step(spec, {vec({1.0}), {1}}, empty_control(spec.dims));
  EXPECT_NEAR(s.x[0], 1.9090909090909092, 1e-12);
  EXPECT_EQ(s.y, Discrete{1}); // x = 1 is not > 1
}

TEST(Step, IdentityDynamicsLeaveStateUnchanged) {
  auto spec = identity_system();
  HybridState s{vec({0.25, -0.5}), {2}};
  auto next = step(spec, s, {vec({0.3}), {}});
  EXPECT_EQ(next.x, s.x);
  EXPECT_EQ(next.y, s.y);
}

TEST(Step, RejectsDimensionMismatch) {
  auto spec = toy_system();
  EXPECT_THROW(step(spec, {vec({0.0, 1.0}), {1}}, empty_control(spec.dims)), InvalidInput);
  EXPECT_THROW(step(spec, {vec({0.0}), {1, 0}}, empty_control(spec.dims)), InvalidInput);
  EXPECT_THROW(step(spec, {vec({0.0}), {2}}, empty_control(spec.dims)), InvalidInput);
  EXPECT_THROW(step(spec, {vec({std::nan("")}), {1}}, empty_control(spec.dims)), InvalidInput);
}

TEST(Step, NonFiniteResultNamesComponent) {
  HybridSystemSpec spec = identity_system();
  spec.f = [](const Vector& x, const Discrete&, const Vector&, const Discrete&) {
    Vector out = x;
    out[1] = std::numeric_limits<double>::infinity();
    return out;
  };
  try {
    step(spec, {vec({0.0, 0.0}), {0}}, {vec({0.0}), {}});
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("x[1]"), std::string::npos);
  }
}

TEST(Simulate, ToyThreeSteps) {
  auto spec = toy_system();
  auto traj = simulate(spec, {vec({0.0}), {1}}, {}, 3);
  ASSERT_EQ(traj.size(), 4u);
  const double expected_x[] = {0.0, 1.0, 1.9090909090909092, 2.6419800671769176};
  const std::int64_t expected_y[] = {1, 1, 1, 0};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(traj.x[k][0], expected_x[k], 1e-12) << "k=" << k;
    EXPECT_EQ(traj.y[k][0], expected_y[k]) << "k=" << k;
  }
}

TEST(Simulate, ZeroStepsReturnsInit) {
  auto spec = toy_system();
  auto traj = simulate(spec, {vec({0.3}), {0}}, {}, 0);
  ASSERT_EQ(traj.size(), 1u);
  EXPECT_EQ(traj.x[0][0], 0.3);
}

TEST(Simulate, IdentityIsConstant) {
  auto spec = identity_system();
  std::vector<HybridControl> controls(20, {vec({0.5}), {}});
  auto traj = simulate(spec, {vec({0.1, 0.2}), {3}}, controls, 20);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_EQ(traj.x[k], traj.x[0]);
    EXPECT_EQ(traj.y[k], traj.y[0]);
  }
}

TEST(Simulate, ControlledSystemNeedsControls) {
  auto spec = transmission_system();
  EXPECT_THROW(simulate(spec, default_initial_state("transmission"), {}, 5), InvalidInput);
}

TEST(Simulate, ErrorsCarryStepIndex) {
  HybridSystemSpec spec = identity_system();
  spec.f = [](const Vector& x, const Discrete&, const Vector&, const Discrete&) { return (x * 1e300).eval(); };
  try {
    simulate(spec, {vec({1.0, 1.0}), {0}}, std::vector<HybridControl>(5, {vec({0.0}), {}}), 5);
    FAIL() << "expected overflow";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Simulate, DeterministicAndComposable) {
  auto spec = transmission_system();
  auto controls = transmission_torque_profile(TransmissionParams{}, 80);
  auto init = default_initial_state("transmission");
  auto a = simulate(spec, init, controls, 80);
  auto b = simulate(spec, init, controls, 80);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.x[k], b.x[k]);
    EXPECT_EQ(a.y[k], b.y[k]);
  }
  // First 30 steps, then continue from sample 30 with the tail controls.
  auto head = simulate(spec, init, controls, 30);
  std::vector<HybridControl> tail(controls.begin() + 30, controls.end());
  auto rest = simulate(spec, head.state(30), tail, 50);
  for (std::size_t k = 0; k <= 50; ++k) {
    EXPECT_EQ(rest.x[k], a.x[30 + k]);
    EXPECT_EQ(rest.y[k], a.y[30 + k]);
  }
}

TEST(Simulate, DiscreteClosureOverRandomStarts) {
  auto toy = toy_system();
  auto trans = transmission_system();
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> tx(-5.0, 5.0), pos(-50.0, 550.0), vel(1.0, 45.0), torque(0.0, 30.0);
  std::uniform_int_distribution<std::int64_t> bit(0, 1), gear(1, 5);
  for (int i = 0; i < 200; ++i) {
    auto a = simulate(toy, {vec({tx(rng)}), {bit(rng)}}, {}, 50);
    for (const auto& y : a.y) EXPECT_TRUE(in_domain(y, toy.y_domain));
    std::vector<HybridControl> controls;
    for (int k = 0; k < 50; ++k) controls.push_back({vec({torque(rng)}), {}});
    auto b = simulate(trans, {vec({pos(rng), vel(rng)}), {gear(rng)}}, controls, 50);
    for (const auto& y : b.y) EXPECT_TRUE(in_domain(y, trans.y_domain));
  }
}

TEST(TrajectoryCsv, RoundTripIsExact) {
  auto spec = transmission_system();
  auto traj = simulate(spec, default_initial_state("transmission"), transmission_torque_profile({}, 40), 40);
  std::stringstream ss;
  write_trajectory_csv(ss, traj, {"note"});
  auto back = read_trajectory_csv(ss);
  EXPECT_EQ(back.dims, traj.dims);
  ASSERT_EQ(back.size(), traj.size());
  for (std::size_t k = 0; k < traj.size(); ++k) {
    EXPECT_EQ(back.x[k], traj.x[k]);
    EXPECT_EQ(back.y[k], traj.y[k]);
    EXPECT_EQ(back.u[k], traj.u[k]);
  }
}

TEST(TrajectoryCsv, HeaderLayout) {
  auto h = trajectory_header({2, 1, 1, 0}, false);
  std::vector<std::string> want{"k", "x0", "x1", "y0", "u0"};
  EXPECT_EQ(h, want);
}

TEST(TrajectoryCsv, RejectsGapsInIndex) {
  std::istringstream in("k,x0,y0\n0,1.0,1\n2,1.5,1\n");
  EXPECT_THROW(read_trajectory_csv(in), SchemaError);
}
