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

#ifndef HKOOP_TESTS_FIXTURES_HPP
#define HKOOP_TESTS_FIXTURES_HPP

#include <algorithm>
#include <cmath>
#include <string>

#include "hkoop/datagen.hpp"
#include "hkoop/koopman.hpp"
#include "hkoop/systems.hpp"

namespace hkoop::testing {

/// x' = a x with a single (trivial) discrete value, uncontrolled.
inline HybridSystemSpec linear_system(double a) {
  HybridSystemSpec spec;
  spec.name = "linear";
  spec.dims = {1, 0, 1, 0};
  spec.y_domain = {{0, 0}};
  spec.f = [a](const Vector& x, const Discrete&, const Vector&, const Discrete&) { return (a * x).eval(); };
  spec.g = [](const Vector&, const Discrete& y, const Vector&, const Discrete&) { return y; };
  spec.state_box = {Vector::Constant(1, -2.0), Vector::Constant(1, 2.0)};
  spec.control_box = {Vector(0), Vector(0)};
  return spec;
}

inline GridSpec toy_grid(const std::string& formulation, std::size_t count = 25, bool two_step = false) {
  GridSpec g;
  g.formulation = formulation;
  g.x = {{-3.0, 3.0, count}};
  g.y = {{0, 1}};
  g.two_step = two_step;
  return g;
}

inline GridSpec transmission_grid(const std::string& formulation, bool two_step = false) {
  GridSpec g;
  g.formulation = formulation;
  g.x = {{0.0, 500.0, 3}, {2.0, 40.0, 4}};
  g.y = {{1, 2, 3, 4, 5}};
  g.u = {{0.0, 30.0, 3}};
  if (formulation == "transformed") g.phi = {{-5.0, 5.0, 2}};
  g.two_step = two_step;
  return g;
}

inline ModelOptions small_options(EmbeddingKind embedding = EmbeddingKind::TanhInteger) {
  ModelOptions o;
  o.phi_x_dim = 3;
  o.phi_xu_dim = 2;
  o.hidden_width = 6;
  o.hidden_depth = 2;
  o.embedding = embedding;
  return o;
}

/// Per-pair loop over the single-sample observable functions: the
/// reference value for the vectorized losses.
inline double brute_force_one_step(const KoopmanModel& model, const PairBatch& b) {
  double total = 0.0;
  const auto n = static_cast<Eigen::Index>(model.dims.n);
  for (Eigen::Index i = 0; i < b.s0.cols(); ++i) {
    const auto mode = b.mode0[static_cast<std::size_t>(i)];
    Vector s0 = b.s0.col(i), s1 = b.s1.col(i);
    Vector pred = model.kx[mode] * psi_x(model, s0);
    if (model.controlled()) pred += model.kxu[mode] * psi_xu(model, s0, Vector(b.c0.col(i)));
    const double den = std::max((s1.head(n) - s0.head(n)).squaredNorm(), 1e-8);
    total += b.weight[i] * (psi_x(model, s1) - pred).squaredNorm() / den;
  }
  return total / static_cast<double>(b.s0.cols());
}

inline double brute_force_two_step(const KoopmanModel& model, const PairBatch& b) {
  double total = 0.0;
  const auto n = static_cast<Eigen::Index>(model.dims.n);
  for (Eigen::Index i = 0; i < b.s0.cols(); ++i) {
    const auto ma = b.mode0[static_cast<std::size_t>(i)], mb = b.mode1[static_cast<std::size_t>(i)];
    Vector s0 = b.s0.col(i), s1 = b.s1.col(i), s2 = b.s2.col(i);
    Vector mid = model.kx[ma] * psi_x(model, s0);
    if (model.controlled()) mid += model.kxu[ma] * psi_xu(model, s0, Vector(b.c0.col(i)));
    Vector pred = model.kx[mb] * mid;
    if (model.controlled()) pred += model.kxu[mb] * psi_xu(model, s1, Vector(b.c1.col(i)));
    const double den = std::max((s2.head(n) - s0.head(n)).squaredNorm(), 1e-8);
    total += b.weight[i] * (psi_x(model, s2) - pred).squaredNorm() / den;
  }
  return total / static_cast<double>(b.s0.cols());
}

inline double relative_difference(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

} // namespace hkoop::testing

#endif // HKOOP_TESTS_FIXTURES_HPP
