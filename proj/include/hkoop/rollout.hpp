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

#ifndef HKOOP_ROLLOUT_HPP
#define HKOOP_ROLLOUT_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hkoop/errors.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/io.hpp"
#include "hkoop/koopman.hpp"
#include "hkoop/systems.hpp"
#include "hkoop/transform.hpp"

namespace hkoop {

/// Multiplied iterates the lifted state; Evaluated re-extracts the raw state
/// and rebuilds ψ_x before every multiply.
enum class RolloutMode { Multiplied, Evaluated };

inline std::string to_string(RolloutMode m) { return m == RolloutMode::Multiplied ? "multiplied" : "evaluated"; }

inline RolloutMode parse_rollout_mode(const std::string& s) {
  if (s == "multiplied") return RolloutMode::Multiplied;
  if (s == "evaluated") return RolloutMode::Evaluated;
  throw InvalidInput("unknown rollout mode '" + s + "' (expected multiplied or evaluated)");
}

struct RolloutConfig {
  RolloutMode mode = RolloutMode::Evaluated;
  std::size_t steps = 100;
  HybridState init;
  std::vector<HybridControl> controls; // at least `steps` entries for controlled systems
  bool project_velocity = true;        // transformed models, evaluated mode only
  std::optional<double> threshold;     // default: 10% of the oracle x range
};

struct RolloutReport {
  Trajectory predicted;
  Trajectory truth;
  std::vector<double> error;        // ||x̂_k - x_k||, infinite after a failure
  std::vector<bool> discrete_match; // ŷ_k == y_k
  std::size_t valid_horizon = 0;
  double transition_accuracy = 1.0;
  double threshold = 0.0;
  std::optional<std::size_t> failure_index;
  std::string failure_message;
};

/// 10% of the Euclidean norm of the per-component x range.
inline double default_threshold(const Trajectory& truth) {
  if (truth.size() == 0) return 0.0;
  Vector lo = truth.x[0], hi = truth.x[0];
  for (const auto& x : truth.x) {
    lo = lo.cwiseMin(x);
    hi = hi.cwiseMax(x);
  }
  return 0.1 * (hi - lo).norm();
}

namespace detail {

inline void fill_metrics(RolloutReport& r) {
  const std::size_t len = r.truth.size();
  r.error.assign(len, std::numeric_limits<double>::infinity());
  r.discrete_match.assign(len, false);
  const std::size_t have = std::min(len, r.predicted.size());
  for (std::size_t k = 0; k < have; ++k) {
    r.error[k] = (r.predicted.x[k] - r.truth.x[k]).norm();
    r.discrete_match[k] = r.predicted.y[k] == r.truth.y[k];
  }
  r.valid_horizon = 0;
  for (std::size_t k = 0; k < len; ++k) {
    if (!(r.error[k] <= r.threshold)) break;
    r.valid_horizon = k;
  }
  std::size_t transitions = 0, matched = 0;
  for (std::size_t k = 1; k < len; ++k) {
    if (r.truth.y[k] == r.truth.y[k - 1]) continue;
    ++transitions;
    for (std::size_t j = k - 1; j <= k + 1; ++j) {
      if (j < 1 || j >= have) continue;
      if (r.predicted.y[j - 1] == r.truth.y[k - 1] && r.predicted.y[j] == r.truth.y[k]) {
        ++matched;
        break;
      }
    }
  }
  r.transition_accuracy = transitions == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(transitions);
}

} // namespace detail

/// Compares a predicted trajectory against the oracle one.
inline RolloutReport score(const Trajectory& predicted, const Trajectory& truth,
                           std::optional<double> threshold = std::nullopt) {
  if (predicted.size() != truth.size())
    throw InvalidInput("trajectory lengths differ (" + std::to_string(predicted.size()) + " vs " +
                       std::to_string(truth.size()) + ")");
  RolloutReport r;
  r.predicted = predicted;
  r.truth = truth;
  r.threshold = threshold.value_or(default_threshold(truth));
  detail::fill_metrics(r);
  return r;
}

namespace detail {

struct Extracted {
  Vector x;
  Discrete y;
  Vector u;
  Discrete z;
  Vector v; // transformed only, possibly projected
};

} // namespace detail

/// Rolls `model` forward from config.init and scores it against the oracle.
inline RolloutReport rollout(const KoopmanModel& model, const HybridSystemSpec& spec, const RolloutConfig& config) {
  check_compatible(model, spec);
  const auto& d = model.dims;
  const auto n = static_cast<Eigen::Index>(d.n), m = static_cast<Eigen::Index>(d.m);
  RolloutReport report;
  report.truth = simulate(spec, config.init, config.controls, config.steps);
  const Trajectory& truth = report.truth;
  report.threshold = config.threshold.value_or(default_threshold(truth));
  const bool evaluated = config.mode == RolloutMode::Evaluated;

  Trajectory& pred = report.predicted;
  pred.dims = d;

  // Encodes an extracted state into formulation coordinates.
  auto encode = [&](const detail::Extracted& e) { return state_coords(model, e.x, e.y, e.u, e.v); };

  // Reads the raw state back out of ψ_x at step k.
  auto extract = [&](const Vector& psi, std::size_t k, const Discrete& previous_y, const detail::Extracted* prev,
                     bool project) {
    detail::Extracted e;
    e.x = psi.head(n);
    switch (model.formulation) {
    case Formulation::Switched:
      e.u = truth.u[k];
      e.z = truth.z[k];
      // Mode update through the oracle, from the previous extracted state.
      e.y = prev ? spec.g(prev->x, prev->y, prev->u, prev->z) : previous_y;
      break;
    case Formulation::GeneralHybrid:
      e.u = truth.u[k];
      e.z = truth.z[k];
      e.y = recover_from_embedding(model.embedding(), Vector(psi.segment(n, static_cast<Eigen::Index>(d.p))));
      break;
    case Formulation::Transformed: {
      e.u = psi.segment(n, m);
      e.v = psi.segment(n + m, n);
      auto rec = recover_discrete(spec, e.v, e.x, e.u);
      e.y = std::move(rec.y);
      e.z = std::move(rec.z);
      if (project) e.v = rec.v;
      break;
    }
    }
    if (!e.x.allFinite()) throw RecoveryError("non-finite continuous state");
    return e;
  };

  auto control = [&](const detail::Extracted& e, std::size_t k) {
    if (model.formulation != Formulation::Transformed) return control_coords(model, e.u, e.z);
    Vector phi = truth.u[k + 1] - truth.u[k];
    Discrete omega(d.q);
    for (std::size_t i = 0; i < d.q; ++i) omega[i] = truth.z[k + 1][i] - truth.z[k][i];
    return control_coords(model, e.u, e.z, phi, omega);
  };

  detail::Extracted cur;
  cur.x = config.init.x;
  cur.y = config.init.y;
  cur.u = truth.u[0];
  cur.z = truth.z[0];
  if (model.formulation == Formulation::Transformed) cur.v = spec.f(cur.x, cur.y, cur.u, cur.z) - cur.x;
  Vector psi = psi_x(model, encode(cur));
  pred.push_back({cur.x, cur.y}, {cur.u, cur.z});

  for (std::size_t k = 0; k < config.steps; ++k) {
    try {
      const std::size_t mode = model.mode_index(cur.y, cur.z);
      Vector next = model.kx[mode] * psi;
      if (model.controlled()) next += model.kxu[mode] * psi_xu(model, encode(cur), control(cur, k));
      if (!next.allFinite()) throw RecoveryError("lifted state became non-finite");
      const bool project = evaluated && config.project_velocity;
      detail::Extracted e = extract(next, k + 1, cur.y,
                                    model.formulation == Formulation::Switched ? &cur : nullptr, project);
      psi = evaluated ? psi_x(model, encode(e)) : next;
      cur = std::move(e);
      pred.push_back({cur.x, cur.y}, {cur.u, cur.z});
    } catch (const NumericError& err) {
      report.failure_index = k + 1;
      report.failure_message = err.what();
      break;
    } catch (const InvalidInput& err) {
      report.failure_index = k + 1;
      report.failure_message = err.what();
      break;
    }
  }
  detail::fill_metrics(report);
  return report;
}

/// Rollout against the system recorded in the model.
inline RolloutReport rollout(const KoopmanModel& model, const RolloutConfig& config) {
  return rollout(model, make_system(model.system_name, model.system_params), config);
}

inline std::vector<std::string> rollout_header(const Dims& d) {
  std::vector<std::string> h{"k"};
  detail::append_names(h, "x", d.n, "_true");
  detail::append_names(h, "y", d.p, "_true");
  detail::append_names(h, "x", d.n, "_pred");
  detail::append_names(h, "y", d.p, "_pred");
  h.push_back("err");
  return h;
}

/// Side-by-side oracle and predicted trajectories; samples after a failure are nan.
inline void write_rollout_csv(std::ostream& out, const RolloutReport& r, const std::vector<std::string>& comments = {}) {
  for (const auto& c : comments) out << "# " << c << '\n';
  const Dims& d = r.truth.dims;
  out << io::join(rollout_header(d), ',') << '\n';
  for (std::size_t k = 0; k < r.truth.size(); ++k) {
    std::vector<std::string> row{io::format_int(static_cast<std::int64_t>(k))};
    detail::append_values(row, r.truth.x[k]);
    detail::append_values(row, r.truth.y[k]);
    if (k < r.predicted.size()) {
      detail::append_values(row, r.predicted.x[k]);
      detail::append_values(row, r.predicted.y[k]);
    } else {
      row.insert(row.end(), d.n + d.p, "nan");
    }
    row.push_back(io::format_double(r.error[k]));
    out << io::join(row, ',') << '\n';
  }
}

} // namespace hkoop

#endif // HKOOP_ROLLOUT_HPP
