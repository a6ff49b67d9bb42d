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

#ifndef HKOOP_SYSTEMS_HPP
#define HKOOP_SYSTEMS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hkoop/errors.hpp"
#include "hkoop/grid.hpp"
#include "hkoop/hybrid_core.hpp"

namespace hkoop {

// ---------------------------------------------------------------------------
// Toy switched system: x' = x + (2y-1)/(1+0.1x^2), y flips outside [-1, 1].

struct ToyStep {
  double x;
  std::int64_t y;
};

inline ToyStep toy_step(double x, std::int64_t y) {
  double next_x = x + static_cast<double>(2 * y - 1) / (1.0 + 0.1 * x * x);
  std::int64_t next_y = y;
  if (x < -1.0)
    next_y = 1;
  else if (x > 1.0)
    next_y = 0;
  return {next_x, next_y};
}

inline HybridSystemSpec toy_system() {
  HybridSystemSpec spec;
  spec.name = "toy";
  spec.dims = {1, 0, 1, 0};
  spec.y_domain = {{0, 1}};
  spec.f = [](const Vector& x, const Discrete& y, const Vector&, const Discrete&) {
    Vector out(1);
    out[0] = toy_step(x[0], y[0]).x;
    return out;
  };
  spec.g = [](const Vector& x, const Discrete& y, const Vector&, const Discrete&) {
    return Discrete{toy_step(x[0], y[0]).y};
  };
  spec.state_box = {Vector::Constant(1, -5.0), Vector::Constant(1, 5.0)};
  spec.control_box = {Vector(0), Vector(0)};
  return spec;
}

// ---------------------------------------------------------------------------
// Automatic transmission: position, velocity, gear 1..5, engine torque input.

struct TransmissionParams {
  double dt = 0.1;
  double alpha = 0.005;      // air drag
  double gravity = 9.81;
  double gamma = 0.02;       // engine friction
  std::array<double, 5> gear_ratios{40.0, 25.0, 16.0, 12.0, 9.0};
  double omega_low = 120.0;
  double omega_high = 300.0;
  double omega_peak = 250.0; // torque curve is flat below, falls off quadratically above
  double slope_amplitude = 0.05;
  double slope_wavelength = 500.0;
  double torque_min = 0.0;
  double torque_max = 30.0;
  double position_min = -50.0;
  double position_max = 550.0;
  double velocity_min = 1.0;
  double velocity_max = 45.0;

  double ratio(std::int64_t gear) const { return gear_ratios[static_cast<std::size_t>(gear - 1)]; }

  double efficiency(double omega) const {
    if (omega <= omega_peak) return 1.0;
    double r = (omega - omega_peak) / omega_peak;
    return std::max(0.0, 1.0 - r * r);
  }

  double slope(double position) const {
    return slope_amplitude * std::sin(2.0 * std::numbers::pi * position / slope_wavelength);
  }

  void validate() const {
    if (!(dt > 0.0)) throw InvalidInput("transmission dt must be positive");
    for (std::size_t i = 1; i < gear_ratios.size(); ++i)
      if (!(gear_ratios[i] < gear_ratios[i - 1]))
        throw InvalidInput("gear ratios must be strictly decreasing");
    if (!(omega_low > 0.0 && omega_low < omega_high))
      throw InvalidInput("need 0 < omega_low < omega_high");
    if (!(omega_peak > 0.0)) throw InvalidInput("omega_peak must be positive");
    if (!(torque_min <= torque_max)) throw InvalidInput("torque range is empty");
    if (!(position_min < position_max && velocity_min < velocity_max))
      throw InvalidInput("transmission state box is empty");
  }
};

inline void to_json(nlohmann::json& j, const TransmissionParams& p) {
  j = {{"dt", p.dt},
       {"alpha", p.alpha},
       {"gravity", p.gravity},
       {"gamma", p.gamma},
       {"gear_ratios", p.gear_ratios},
       {"omega_low", p.omega_low},
       {"omega_high", p.omega_high},
       {"omega_peak", p.omega_peak},
       {"slope_amplitude", p.slope_amplitude},
       {"slope_wavelength", p.slope_wavelength},
       {"torque_min", p.torque_min},
       {"torque_max", p.torque_max},
       {"position_min", p.position_min},
       {"position_max", p.position_max},
       {"velocity_min", p.velocity_min},
       {"velocity_max", p.velocity_max}};
}

inline void from_json(const nlohmann::json& j, TransmissionParams& p) {
  static const TransmissionParams defaults{};
  p = defaults;
  auto take = [&](const char* key, double& field) {
    if (j.contains(key)) field = j.at(key).get<double>();
  };
  take("dt", p.dt);
  take("alpha", p.alpha);
  take("gravity", p.gravity);
  take("gamma", p.gamma);
  if (j.contains("gear_ratios")) {
    auto g = j.at("gear_ratios").get<std::vector<double>>();
    if (g.size() != 5) throw SchemaError("gear_ratios must have 5 entries");
    std::copy(g.begin(), g.end(), p.gear_ratios.begin());
  }
  take("omega_low", p.omega_low);
  take("omega_high", p.omega_high);
  take("omega_peak", p.omega_peak);
  take("slope_amplitude", p.slope_amplitude);
  take("slope_wavelength", p.slope_wavelength);
  take("torque_min", p.torque_min);
  take("torque_max", p.torque_max);
  take("position_min", p.position_min);
  take("position_max", p.position_max);
  take("velocity_min", p.velocity_min);
  take("velocity_max", p.velocity_max);
}

struct TransmissionStep {
  double x;
  double v;
  std::int64_t gear;
  bool saturated; // gear had to be clamped into 1..5
};

inline TransmissionStep transmission_step(const TransmissionParams& p, double x, double v,
                                          std::int64_t gear, double torque) {
  bool saturated = false;
  if (gear < 1 || gear > 5) {
    gear = std::clamp<std::int64_t>(gear, 1, 5);
    saturated = true;
  }
  const double omega = v * p.ratio(gear);
  const double sign = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  const double accel = -p.alpha * v * v * sign - p.gravity * std::sin(p.slope(x)) -
                       p.gamma * omega + torque * p.efficiency(omega);
  std::int64_t next_gear = gear;
  if (omega > p.omega_high && gear < 5)
    next_gear = gear + 1;
  else if (omega < p.omega_low && gear > 1)
    next_gear = gear - 1;
  return {x + v * p.dt, v + accel * p.dt, next_gear, saturated};
}

inline HybridSystemSpec transmission_system(const TransmissionParams& params = {}) {
  params.validate();
  HybridSystemSpec spec;
  spec.name = "transmission";
  spec.dims = {2, 1, 1, 0};
  spec.y_domain = {{1, 5}};
  spec.f = [params](const Vector& x, const Discrete& y, const Vector& u, const Discrete&) {
    auto s = transmission_step(params, x[0], x[1], y[0], u[0]);
    Vector out(2);
    out << s.x, s.v;
    return out;
  };
  spec.g = [params](const Vector& x, const Discrete& y, const Vector& u, const Discrete&) {
    return Discrete{transmission_step(params, x[0], x[1], y[0], u[0]).gear};
  };
  spec.state_box = {Vector(2), Vector(2)};
  spec.state_box.lo << params.position_min, params.velocity_min;
  spec.state_box.hi << params.position_max, params.velocity_max;
  spec.control_box = {Vector::Constant(1, params.torque_min), Vector::Constant(1, params.torque_max)};
  return spec;
}

/// Fixed torque series used for transmission rollouts: accelerate, ease off, accelerate.
inline std::vector<HybridControl> transmission_torque_profile(const TransmissionParams& p,
                                                              std::size_t steps) {
  std::vector<HybridControl> out;
  out.reserve(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) {
    double torque = 20.0;
    if (k >= 30 && k < 60)
      torque = 0.0;
    else if (k >= 60)
      torque = 12.0;
    torque = std::clamp(torque, p.torque_min, p.torque_max);
    out.push_back({Vector::Constant(1, torque), {}});
  }
  return out;
}

/// Builds a system by name; `params` may be null for defaults.
inline HybridSystemSpec make_system(const std::string& name, const nlohmann::json& params = {}) {
  if (name == "toy") return toy_system();
  if (name == "transmission") {
    TransmissionParams p;
    if (!params.is_null()) p = params.get<TransmissionParams>();
    return transmission_system(p);
  }
  throw InvalidInput("unknown system '" + name + "'");
}

/// Default control sequence for rollouts of a named system (empty when uncontrolled).
inline std::vector<HybridControl> default_controls(const std::string& name, const nlohmann::json& params,
                                                   std::size_t steps) {
  if (name == "transmission") {
    TransmissionParams p;
    if (!params.is_null()) p = params.get<TransmissionParams>();
    return transmission_torque_profile(p, steps);
  }
  return {};
}

/// Initial state used by rollouts when none is given.
inline HybridState default_initial_state(const std::string& name) {
  if (name == "transmission") {
    Vector x(2);
    x << 0.0, 2.0;
    return {x, Discrete{1}};
  }
  if (name == "toy") return {Vector::Constant(1, 0.65), Discrete{0}};
  throw InvalidInput("unknown system '" + name + "'");
}

// ---------------------------------------------------------------------------
// Identifiability certification

struct IdentifiabilityGrid {
  std::vector<Axis> x;
  std::vector<Axis> u;
};

struct IdentifiabilityWitness {
  Vector x;
  Vector u;
  Discrete sigma1;
  Discrete sigma2;
};

/// Minimum separation between step images of distinct discrete values.
struct IdentifiabilityReport {
  int order = 1;
  IdentifiabilityGrid grid;
  std::size_t points_checked = 0;
  double min_gap = std::numeric_limits<double>::infinity();
  std::optional<IdentifiabilityWitness> witness;
  double tolerance = 1e-9;
  bool pass = true;
};

namespace detail {

inline bool lex_less(const Vector& a, const Vector& b) {
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

struct GapCandidate {
  double gap = std::numeric_limits<double>::infinity();
  std::optional<IdentifiabilityWitness> witness;
};

// Total order: smaller gap first, ties by lexicographically smallest witness.
inline bool better(const GapCandidate& a, const GapCandidate& b) {
  if (!a.witness) return false;
  if (!b.witness) return true;
  if (a.gap != b.gap) return a.gap < b.gap;
  const auto& wa = *a.witness;
  const auto& wb = *b.witness;
  if (lex_less(wa.x, wb.x)) return true;
  if (lex_less(wb.x, wa.x)) return false;
  if (lex_less(wa.u, wb.u)) return true;
  if (lex_less(wb.u, wa.u)) return false;
  if (wa.sigma1 != wb.sigma1) return wa.sigma1 < wb.sigma1;
  return wa.sigma2 < wb.sigma2;
}

inline std::pair<Discrete, Discrete> split_sigma(const Discrete& sigma, std::size_t p) {
  return {Discrete(sigma.begin(), sigma.begin() + static_cast<std::ptrdiff_t>(p)),
          Discrete(sigma.begin() + static_cast<std::ptrdiff_t>(p), sigma.end())};
}

} // namespace detail

/// All sigma = [y z] in the system's discrete domain, lexicographic.
inline std::vector<Discrete> discrete_domain(const HybridSystemSpec& spec) {
  auto values = domain_values(spec.y_domain);
  auto zvals = domain_values(spec.z_domain);
  values.insert(values.end(), zvals.begin(), zvals.end());
  return enumerate_discrete(values);
}

inline IdentifiabilityReport check_identifiability(const HybridSystemSpec& spec, int order,
                                                   const IdentifiabilityGrid& grid, double tolerance = 1e-9,
                                                   unsigned threads = 1) {
  if (order != 1 && order != 2) throw InvalidInput("identifiability order must be 1 or 2");
  if (order == 2 && spec.controlled())
    throw InvalidInput("the two-step criterion is defined for uncontrolled systems only");
  if (grid.x.size() != spec.dims.n || grid.u.size() != spec.dims.m)
    throw InvalidInput("identifiability grid dimensions do not match the system");

  std::vector<std::size_t> sizes;
  std::vector<const Axis*> axes;
  for (const auto& a : grid.x) axes.push_back(&a);
  for (const auto& a : grid.u) axes.push_back(&a);
  for (std::size_t d = 0; d < axes.size(); ++d) {
    const Axis& a = *axes[d];
    sizes.push_back(a.count);
    const bool is_x = d < spec.dims.n;
    const Box& box = is_x ? spec.state_box : spec.control_box;
    const auto i = static_cast<Eigen::Index>(is_x ? d : d - spec.dims.n);
    if (a.min < box.lo[i] || a.max > box.hi[i] || a.min > a.max)
      throw InvalidInput("identifiability grid leaves the system's bounding box");
  }
  const std::size_t total = checked_product(sizes);
  if (total == 0) throw InvalidInput("identifiability grid is empty");

  const auto sigmas = discrete_domain(spec);
  const std::size_t p = spec.dims.p;

  auto scan = [&](std::size_t begin, std::size_t end) {
    detail::GapCandidate best;
    for (std::size_t flat = begin; flat < end; ++flat) {
      auto idx = unravel(flat, sizes);
      Vector x(static_cast<Eigen::Index>(spec.dims.n));
      Vector u(static_cast<Eigen::Index>(spec.dims.m));
      for (std::size_t d = 0; d < axes.size(); ++d) {
        double val = axes[d]->at(idx[d]);
        if (d < spec.dims.n)
          x[static_cast<Eigen::Index>(d)] = val;
        else
          u[static_cast<Eigen::Index>(d - spec.dims.n)] = val;
      }
      std::vector<Vector> one(sigmas.size()), two;
      for (std::size_t s = 0; s < sigmas.size(); ++s) {
        auto [y, z] = detail::split_sigma(sigmas[s], p);
        one[s] = spec.f(x, y, u, z);
      }
      if (order == 2) {
        two.resize(sigmas.size());
        for (std::size_t s = 0; s < sigmas.size(); ++s) {
          const Discrete& y = sigmas[s];
          two[s] = spec.f(one[s], spec.g(x, y, u, {}), u, {});
        }
      }
      for (std::size_t a = 0; a < sigmas.size(); ++a) {
        for (std::size_t b = a + 1; b < sigmas.size(); ++b) {
          double gap = (one[a] - one[b]).norm();
          if (order == 2) gap = std::max(gap, (two[a] - two[b]).norm());
          detail::GapCandidate cand{gap, IdentifiabilityWitness{x, u, sigmas[a], sigmas[b]}};
          if (detail::better(cand, best)) best = std::move(cand);
        }
      }
    }
    return best;
  };

  threads = std::max(1u, threads);
  std::vector<detail::GapCandidate> partial(threads);
  if (threads == 1) {
    partial[0] = scan(0, total);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (total + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = std::min(total, t * chunk);
      const std::size_t e = std::min(total, b + chunk);
      pool.emplace_back([&, t, b, e] { partial[t] = scan(b, e); });
    }
    for (auto& th : pool) th.join();
  }
  detail::GapCandidate best;
  for (auto& c : partial)
    if (detail::better(c, best)) best = std::move(c);

  IdentifiabilityReport report;
  report.order = order;
  report.grid = grid;
  report.points_checked = total;
  report.min_gap = best.gap;
  report.witness = best.witness;
  report.tolerance = tolerance;
  report.pass = report.min_gap > tolerance;
  return report;
}

inline nlohmann::json report_json(const IdentifiabilityReport& r) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["order"] = r.order;
  j["grid"] = {{"x", r.grid.x}, {"u", r.grid.u}};
  j["points_checked"] = r.points_checked;
  j["min_gap"] = std::isfinite(r.min_gap) ? nlohmann::json(r.min_gap) : nlohmann::json(nullptr);
  if (r.witness)
    j["witness"] = {{"x", vec(r.witness->x)},
                    {"u", vec(r.witness->u)},
                    {"sigma1", r.witness->sigma1},
                    {"sigma2", r.witness->sigma2}};
  else
    j["witness"] = nullptr;
  j["tolerance"] = r.tolerance;
  j["pass"] = r.pass;
  return j;
}

} // namespace hkoop

#endif // HKOOP_SYSTEMS_HPP
