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

#ifndef HKOOP_TRANSFORM_HPP
#define HKOOP_TRANSFORM_HPP

#include <limits>
#include <vector>

#include "hkoop/errors.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/systems.hpp"

namespace hkoop {

// Velocity lift: a hybrid trajectory (x, y, u, z) becomes the continuous
// trajectory s = (x, u, v) with v_k = x_{k+1} - x_k, driven by phi = du and
// omega = dz. Discrete values come back through the nearest feasible velocity.

inline constexpr std::size_t kDefaultCandidateCap = 4096;

struct Candidate {
  Discrete sigma; // [y z]
  Vector v;       // f(x, y, u, z) - x
};

/// Feasible velocities V(x, u), one per sigma in lexicographic order.
struct CandidateSet {
  std::vector<Candidate> candidates;

  std::size_t size() const { return candidates.size(); }
};

inline CandidateSet candidate_set(const HybridSystemSpec& spec, const Vector& x, const Vector& u,
                                  std::size_t cap = kDefaultCandidateCap) {
  std::size_t total = 1;
  for (const auto& r : spec.y_domain) total = checked_product({total, r.size()});
  for (const auto& r : spec.z_domain) total = checked_product({total, r.size()});
  if (total > cap)
    throw DomainTooLarge("discrete domain has " + std::to_string(total) + " values, cap is " +
                         std::to_string(cap));
  CandidateSet set;
  set.candidates.reserve(total);
  const std::size_t p = spec.dims.p;
  for (auto& sigma : discrete_domain(spec)) {
    auto [y, z] = detail::split_sigma(sigma, p);
    Vector v = spec.f(x, y, u, z) - x;
    set.candidates.push_back({std::move(sigma), std::move(v)});
  }
  return set;
}

struct Recovery {
  Discrete y;
  Discrete z;
  Vector v; // the nearest feasible velocity
};

/// Nearest-candidate projection; ties go to the lexicographically smallest sigma.
inline Recovery recover_discrete(const HybridSystemSpec& spec, const Vector& v, const Vector& x,
                                 const Vector& u, std::size_t cap = kDefaultCandidateCap) {
  if (!v.allFinite()) throw RecoveryError("cannot recover discrete state from a non-finite velocity");
  auto set = candidate_set(spec, x, u, cap);
  const Candidate* best = nullptr;
  double best_dist = std::numeric_limits<double>::infinity();
  for (const auto& c : set.candidates) {
    double d = (c.v - v).squaredNorm();
    if (best == nullptr || d < best_dist) {
      best = &c;
      best_dist = d;
    }
  }
  auto [y, z] = detail::split_sigma(best->sigma, spec.dims.p);
  return {std::move(y), std::move(z), best->v};
}

inline Trajectory lift_trajectory(const HybridSystemSpec& spec, const Trajectory& traj) {
  if (traj.size() < 2) throw InvalidInput("lifting needs at least two samples");
  if (traj.dims != spec.dims) throw InvalidInput("trajectory dimensions do not match the system");
  Trajectory out = traj;
  const std::size_t last = traj.size() - 1;
  out.v.resize(traj.size());
  out.phi.resize(traj.size());
  out.omega.resize(traj.size());
  for (std::size_t k = 0; k < last; ++k) {
    out.v[k] = traj.x[k + 1] - traj.x[k];
    out.phi[k] = traj.u[k + 1] - traj.u[k];
    out.omega[k] = Discrete(spec.dims.q);
    for (std::size_t i = 0; i < spec.dims.q; ++i) out.omega[k][i] = traj.z[k + 1][i] - traj.z[k][i];
  }
  out.v[last] = spec.f(traj.x[last], traj.y[last], traj.u[last], traj.z[last]) - traj.x[last];
  out.phi[last] = Vector::Zero(static_cast<Eigen::Index>(spec.dims.m));
  out.omega[last] = Discrete(spec.dims.q, 0);
  return out;
}

inline Trajectory unlift_trajectory(const HybridSystemSpec& spec, const Trajectory& lifted,
                                    std::size_t cap = kDefaultCandidateCap) {
  if (!lifted.lifted()) throw InvalidInput("trajectory carries no velocity channel");
  Trajectory out;
  out.dims = lifted.dims;
  for (std::size_t k = 0; k < lifted.size(); ++k) {
    auto rec = recover_discrete(spec, lifted.v[k], lifted.x[k], lifted.u[k], cap);
    out.x.push_back(lifted.x[k]);
    out.u.push_back(lifted.u[k]);
    out.y.push_back(std::move(rec.y));
    out.z.push_back(std::move(rec.z));
  }
  return out;
}

} // namespace hkoop

#endif // HKOOP_TRANSFORM_HPP
