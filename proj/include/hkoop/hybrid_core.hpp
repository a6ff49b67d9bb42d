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

#ifndef HKOOP_HYBRID_CORE_HPP
#define HKOOP_HYBRID_CORE_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "hkoop/errors.hpp"
#include "hkoop/io.hpp"

namespace hkoop {

using Vector = Eigen::VectorXd;
using Discrete = std::vector<std::int64_t>;

/// Dimensions of a hybrid system: continuous state n, continuous control m,
/// discrete state p, discrete control q.
struct Dims {
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t p = 0;
  std::size_t q = 0;

  bool operator==(const Dims&) const = default;
};

/// Inclusive integer range for one discrete component.
struct DiscreteRange {
  std::int64_t lo = 0;
  std::int64_t hi = 0;

  bool contains(std::int64_t v) const { return v >= lo && v <= hi; }
  std::size_t size() const { return static_cast<std::size_t>(hi - lo + 1); }
  bool binary() const { return lo == 0 && hi == 1; }
};

/// Axis-aligned box over a real vector space.
struct Box {
  Vector lo;
  Vector hi;

  bool contains(const Vector& v) const {
    if (v.size() != lo.size()) return false;
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (v[i] < lo[i] || v[i] > hi[i]) return false;
    return true;
  }
};

struct HybridState {
  Vector x;
  Discrete y;
};

struct HybridControl {
  Vector u;
  Discrete z;
};

using ContinuousMap =
    std::function<Vector(const Vector&, const Discrete&, const Vector&, const Discrete&)>;
using DiscreteMap =
    std::function<Discrete(const Vector&, const Discrete&, const Vector&, const Discrete&)>;

/// A discrete-time hybrid system x' = f(x,y,u,z), y' = g(x,y,u,z).
///
/// Uncontrolled systems use m = q = 0 with empty control vectors.
struct HybridSystemSpec {
  std::string name;
  Dims dims;
  std::vector<DiscreteRange> y_domain; // one per discrete state component
  std::vector<DiscreteRange> z_domain; // one per discrete control component
  ContinuousMap f;
  DiscreteMap g;
  Box state_box;   // sampling box for x
  Box control_box; // sampling box for u

  bool controlled() const { return dims.m + dims.q > 0; }
};

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline bool in_domain(const Discrete& values, const std::vector<DiscreteRange>& domain) {
  if (values.size() != domain.size()) return false;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!domain[i].contains(values[i])) return false;
  return true;
}

namespace detail {

inline void check_len(std::size_t got, std::size_t want, const char* what) {
  if (got != want)
    throw InvalidInput(std::string(what) + " has length " + std::to_string(got) +
                       ", expected " + std::to_string(want));
}

inline void check_state(const HybridSystemSpec& spec, const HybridState& s) {
  check_len(static_cast<std::size_t>(s.x.size()), spec.dims.n, "x");
  check_len(s.y.size(), spec.dims.p, "y");
  if (!all_finite(s.x)) throw InvalidInput("x contains non-finite components");
  if (!in_domain(s.y, spec.y_domain)) throw InvalidInput("y outside the discrete domain");
}

inline void check_control(const HybridSystemSpec& spec, const HybridControl& c) {
  check_len(static_cast<std::size_t>(c.u.size()), spec.dims.m, "u");
  check_len(c.z.size(), spec.dims.q, "z");
  if (!all_finite(c.u)) throw InvalidInput("u contains non-finite components");
  if (!in_domain(c.z, spec.z_domain)) throw InvalidInput("z outside the discrete domain");
}

} // namespace detail

inline HybridControl empty_control(const Dims& dims) {
  return {Vector::Zero(static_cast<Eigen::Index>(dims.m)), Discrete(dims.q, 0)};
}

/// One step of the oracle dynamics.
inline HybridState step(const HybridSystemSpec& spec, const HybridState& s, const HybridControl& c) {
  detail::check_state(spec, s);
  detail::check_control(spec, c);
  HybridState next{spec.f(s.x, s.y, c.u, c.z), spec.g(s.x, s.y, c.u, c.z)};
  detail::check_len(static_cast<std::size_t>(next.x.size()), spec.dims.n, "f(x,y,u,z)");
  for (Eigen::Index i = 0; i < next.x.size(); ++i)
    if (!std::isfinite(next.x[i]))
      throw NumericError("non-finite result in component x[" + std::to_string(i) + "]");
  if (!in_domain(next.y, spec.y_domain))
    throw NumericError("g(x,y,u,z) left the discrete domain");
  return next;
}

/// Ordered samples k = 0..size()-1, with optional lifted channels (v, phi, omega).
struct Trajectory {
  Dims dims;
  std::vector<Vector> x;
  std::vector<Discrete> y;
  std::vector<Vector> u;
  std::vector<Discrete> z;
  std::vector<Vector> v;
  std::vector<Vector> phi;
  std::vector<Discrete> omega;

  std::size_t size() const { return x.size(); }
  bool lifted() const { return !v.empty(); }

  HybridState state(std::size_t k) const { return {x[k], y[k]}; }
  HybridControl control(std::size_t k) const { return {u[k], z[k]}; }

  void push_back(const HybridState& s, const HybridControl& c) {
    x.push_back(s.x);
    y.push_back(s.y);
    u.push_back(c.u);
    z.push_back(c.z);
  }
};

/// Runs the oracle for `steps` steps. The control of the final sample repeats
/// the last supplied control when no further entry is available.
inline Trajectory simulate(const HybridSystemSpec& spec, const HybridState& init,
                           const std::vector<HybridControl>& controls, std::size_t steps) {
  if (spec.controlled() && controls.size() < steps)
    throw InvalidInput("simulate needs " + std::to_string(steps) + " controls, got " +
                       std::to_string(controls.size()));
  detail::check_state(spec, init);
  auto control_at = [&](std::size_t k) {
    if (!spec.controlled()) return empty_control(spec.dims);
    if (controls.empty()) throw InvalidInput("controlled system needs at least one control");
    return controls[std::min(k, controls.size() - 1)];
  };

  Trajectory traj;
  traj.dims = spec.dims;
  HybridState s = init;
  for (std::size_t k = 0; k < steps; ++k) {
    HybridControl c = control_at(k);
    traj.push_back(s, c);
    try {
      s = step(spec, s, c);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(k) + ": " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput("step " + std::to_string(k) + ": " + e.what());
    }
  }
  traj.push_back(s, control_at(steps));
  return traj;
}

// ---------------------------------------------------------------------------
// Trajectory CSV: k,x0..,y0..,u0..,z0.. and, when lifted, v0..,phi0..,omega0..

namespace detail {

inline void append_names(std::vector<std::string>& out, const std::string& prefix, std::size_t count,
                         const std::string& suffix = "") {
  for (std::size_t i = 0; i < count; ++i) out.push_back(prefix + std::to_string(i) + suffix);
}

inline void append_values(std::vector<std::string>& out, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(io::format_double(v[i]));
}

inline void append_values(std::vector<std::string>& out, const Discrete& v) {
  for (auto value : v) out.push_back(io::format_int(value));
}

/// Number of consecutive header columns named prefix0, prefix1, ... starting at `at`.
inline std::size_t count_group(const std::vector<std::string>& header, std::size_t at,
                               const std::string& prefix) {
  std::size_t count = 0;
  while (at + count < header.size() && header[at + count] == prefix + std::to_string(count)) ++count;
  return count;
}

} // namespace detail

inline std::vector<std::string> trajectory_header(const Dims& d, bool lifted) {
  std::vector<std::string> h{"k"};
  detail::append_names(h, "x", d.n);
  detail::append_names(h, "y", d.p);
  detail::append_names(h, "u", d.m);
  detail::append_names(h, "z", d.q);
  if (lifted) {
    detail::append_names(h, "v", d.n);
    detail::append_names(h, "phi", d.m);
    detail::append_names(h, "omega", d.q);
  }
  return h;
}

inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj,
                                 const std::vector<std::string>& comments = {}) {
  for (const auto& c : comments) out << "# " << c << '\n';
  out << io::join(trajectory_header(traj.dims, traj.lifted()), ',') << '\n';
  for (std::size_t k = 0; k < traj.size(); ++k) {
    std::vector<std::string> row{io::format_int(static_cast<std::int64_t>(k))};
    detail::append_values(row, traj.x[k]);
    detail::append_values(row, traj.y[k]);
    detail::append_values(row, traj.u[k]);
    detail::append_values(row, traj.z[k]);
    if (traj.lifted()) {
      detail::append_values(row, traj.v[k]);
      detail::append_values(row, traj.phi[k]);
      detail::append_values(row, traj.omega[k]);
    }
    out << io::join(row, ',') << '\n';
  }
}

inline Trajectory read_trajectory_csv(std::istream& in) {
  auto csv = io::read_csv(in);
  const auto& h = csv.header;
  if (h.empty() || h[0] != "k") throw SchemaError("trajectory CSV must start with column 'k'");
  Trajectory traj;
  std::size_t at = 1;
  auto group = [&](const std::string& prefix) {
    auto c = detail::count_group(h, at, prefix);
    at += c;
    return c;
  };
  traj.dims.n = group("x");
  traj.dims.p = group("y");
  traj.dims.m = group("u");
  traj.dims.q = group("z");
  bool lifted = false;
  if (at < h.size()) {
    auto nv = group("v");
    auto nphi = group("phi");
    auto nomega = group("omega");
    if (nv != traj.dims.n || nphi != traj.dims.m || nomega != traj.dims.q)
      throw SchemaError("lifted trajectory columns do not match x/u/z dimensions");
    lifted = true;
  }
  if (at != h.size()) throw SchemaError("unexpected trajectory column '" + h[at] + "'");

  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto& row = csv.rows[r];
    auto where = [&] { return "line " + std::to_string(csv.line_numbers[r]) + ": "; };
    try {
      if (io::parse_int(row[0]) != static_cast<std::int64_t>(r))
        throw SchemaError("non-consecutive sample index");
      std::size_t col = 1;
      auto real = [&](std::size_t count) {
        Vector v(static_cast<Eigen::Index>(count));
        for (std::size_t i = 0; i < count; ++i) v[static_cast<Eigen::Index>(i)] = io::parse_double(row[col++]);
        return v;
      };
      auto integer = [&](std::size_t count) {
        Discrete v(count);
        for (std::size_t i = 0; i < count; ++i) v[i] = io::parse_int(row[col++]);
        return v;
      };
      traj.x.push_back(real(traj.dims.n));
      traj.y.push_back(integer(traj.dims.p));
      traj.u.push_back(real(traj.dims.m));
      traj.z.push_back(integer(traj.dims.q));
      if (lifted) {
        traj.v.push_back(real(traj.dims.n));
        traj.phi.push_back(real(traj.dims.m));
        traj.omega.push_back(integer(traj.dims.q));
      }
    } catch (const SchemaError& e) {
      throw SchemaError(where() + e.what());
    }
  }
  return traj;
}

} // namespace hkoop

#endif // HKOOP_HYBRID_CORE_HPP
