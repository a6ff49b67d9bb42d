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

#ifndef HKOOP_GRID_HPP
#define HKOOP_GRID_HPP

#include <cstdint>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "hkoop/errors.hpp"
#include "hkoop/hybrid_core.hpp"

namespace hkoop {

/// Uniform samples min..max (inclusive) on one continuous dimension.
struct Axis {
  double min = 0.0;
  double max = 0.0;
  std::size_t count = 2;

  double at(std::size_t i) const {
    if (count == 1) return min;
    if (i + 1 == count) return max;
    return min + (max - min) * static_cast<double>(i) / static_cast<double>(count - 1);
  }
};

inline void to_json(nlohmann::json& j, const Axis& a) { j = nlohmann::json::array({a.min, a.max, a.count}); }

inline void from_json(const nlohmann::json& j, Axis& a) {
  if (!j.is_array() || j.size() != 3) throw SchemaError("axis must be [min, max, count]");
  a.min = j[0].get<double>();
  a.max = j[1].get<double>();
  a.count = j[2].get<std::size_t>();
}

/// Saturating product of sizes; used to estimate grid sizes before enumerating.
inline std::size_t checked_product(const std::vector<std::size_t>& sizes) {
  std::size_t total = 1;
  for (auto s : sizes) {
    if (s == 0) return 0;
    if (total > std::numeric_limits<std::size_t>::max() / s) return std::numeric_limits<std::size_t>::max();
    total *= s;
  }
  return total;
}

/// Row-major multi-index: the last dimension varies fastest.
inline std::vector<std::size_t> unravel(std::size_t flat, const std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> idx(sizes.size());
  for (std::size_t d = sizes.size(); d-- > 0;) {
    idx[d] = flat % sizes[d];
    flat /= sizes[d];
  }
  return idx;
}

/// All tuples of a per-component discrete domain, lexicographic order.
inline std::vector<Discrete> enumerate_discrete(const std::vector<std::vector<std::int64_t>>& values) {
  std::vector<std::size_t> sizes;
  for (const auto& v : values) sizes.push_back(v.size());
  std::vector<Discrete> out;
  auto total = checked_product(sizes);
  out.reserve(total);
  for (std::size_t f = 0; f < total; ++f) {
    auto idx = unravel(f, sizes);
    Discrete d(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = values[i][idx[i]];
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<std::vector<std::int64_t>> domain_values(const std::vector<DiscreteRange>& domain) {
  std::vector<std::vector<std::int64_t>> out;
  for (const auto& r : domain) {
    std::vector<std::int64_t> vals;
    for (auto v = r.lo; v <= r.hi; ++v) vals.push_back(v);
    out.push_back(std::move(vals));
  }
  return out;
}

} // namespace hkoop

#endif // HKOOP_GRID_HPP
