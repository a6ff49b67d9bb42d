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

#ifndef HKOOP_DATAGEN_HPP
#define HKOOP_DATAGEN_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hkoop/errors.hpp"
#include "hkoop/grid.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/io.hpp"
#include "hkoop/systems.hpp"

namespace hkoop {

// Dataset formulation tags. "switched" and "hybrid" share a column layout;
// "transformed" records the velocity-lifted coordinates.
inline bool valid_formulation_tag(const std::string& tag) {
  return tag == "switched" || tag == "hybrid" || tag == "transformed";
}

/// Cartesian sampling grid over the variables a formulation needs.
struct GridSpec {
  std::string formulation = "switched";
  std::vector<Axis> x;
  std::vector<std::vector<std::int64_t>> y;
  std::vector<Axis> u;
  std::vector<std::vector<std::int64_t>> z;
  std::vector<Axis> phi;                        // transformed only
  std::vector<std::vector<std::int64_t>> omega; // transformed only
  bool two_step = false;
  std::size_t max_points = 10'000'000;

  bool transformed() const { return formulation == "transformed"; }

  std::vector<std::size_t> shape() const {
    std::vector<std::size_t> s;
    for (const auto& a : x) s.push_back(a.count);
    for (const auto& v : y) s.push_back(v.size());
    for (const auto& a : u) s.push_back(a.count);
    for (const auto& v : z) s.push_back(v.size());
    if (transformed()) {
      for (const auto& a : phi) s.push_back(a.count);
      for (const auto& v : omega) s.push_back(v.size());
    }
    return s;
  }

  std::size_t point_count() const { return checked_product(shape()); }
};

inline void to_json(nlohmann::json& j, const GridSpec& g) {
  j = {{"formulation", g.formulation}, {"x", g.x},         {"y", g.y},
       {"u", g.u},                     {"z", g.z},         {"phi", g.phi},
       {"omega", g.omega},             {"two_step", g.two_step}, {"max_points", g.max_points}};
}

inline void from_json(const nlohmann::json& j, GridSpec& g) {
  g = GridSpec{};
  g.formulation = j.value("formulation", g.formulation);
  if (j.contains("x")) g.x = j.at("x").get<std::vector<Axis>>();
  if (j.contains("y")) g.y = j.at("y").get<std::vector<std::vector<std::int64_t>>>();
  if (j.contains("u")) g.u = j.at("u").get<std::vector<Axis>>();
  if (j.contains("z")) g.z = j.at("z").get<std::vector<std::vector<std::int64_t>>>();
  if (j.contains("phi")) g.phi = j.at("phi").get<std::vector<Axis>>();
  if (j.contains("omega")) g.omega = j.at("omega").get<std::vector<std::vector<std::int64_t>>>();
  g.two_step = j.value("two_step", false);
  g.max_points = j.value("max_points", g.max_points);
}

inline std::string grid_hash(const GridSpec& g) { return io::fnv1a_hex(nlohmann::json(g).dump()); }

/// Single-step training pairs stored column-wise (rows are records).
struct PairDataset {
  std::string formulation;
  std::string system;
  Dims dims;
  bool two_step = false;
  std::string grid_hash;
  std::string config_hash;
  std::vector<std::string> columns;
  Eigen::MatrixXd data; // records x columns

  std::size_t size() const { return static_cast<std::size_t>(data.rows()); }

  std::size_t column(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw SchemaError("dataset has no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }

  /// Columns prefix0<suffix> .. prefix{count-1}<suffix>, returned as count x records.
  Eigen::MatrixXd group(const std::string& prefix, std::size_t count, const std::string& suffix = "") const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(count), data.rows());
    for (std::size_t i = 0; i < count; ++i)
      out.row(static_cast<Eigen::Index>(i)) =
          data.col(static_cast<Eigen::Index>(column(prefix + std::to_string(i) + suffix))).transpose();
    return out;
  }
};

inline std::vector<std::string> dataset_columns(const std::string& formulation, const Dims& d, bool two_step) {
  if (!valid_formulation_tag(formulation)) throw SchemaError("unknown formulation '" + formulation + "'");
  std::vector<std::string> c;
  auto add = [&](const char* prefix, std::size_t count, const char* suffix) {
    detail::append_names(c, prefix, count, suffix);
  };
  if (formulation != "transformed") {
    add("x", d.n, "");
    add("y", d.p, "");
    add("u", d.m, "");
    add("z", d.q, "");
    add("x", d.n, "_next");
    add("y", d.p, "_next");
    if (two_step) {
      add("u", d.m, "_next");
      add("z", d.q, "_next");
      add("x", d.n, "_next2");
      add("y", d.p, "_next2");
    }
  } else {
    add("x", d.n, "");
    add("u", d.m, "");
    add("v", d.n, "");
    add("phi", d.m, "");
    add("omega", d.q, "");
    add("y", d.p, "");
    add("z", d.q, "");
    add("x", d.n, "_next");
    add("u", d.m, "_next");
    add("v", d.n, "_next");
    add("y", d.p, "_next");
    add("z", d.q, "_next");
    if (two_step) {
      add("phi", d.m, "_next");
      add("omega", d.q, "_next");
      add("x", d.n, "_next2");
      add("u", d.m, "_next2");
      add("v", d.n, "_next2");
      add("y", d.p, "_next2");
      add("z", d.q, "_next2");
    }
  }
  return c;
}

namespace detail {

inline void check_grid(const HybridSystemSpec& spec, const GridSpec& g) {
  if (!valid_formulation_tag(g.formulation)) throw InvalidInput("unknown formulation '" + g.formulation + "'");
  const auto& d = spec.dims;
  if (g.x.size() != d.n || g.y.size() != d.p || g.u.size() != d.m || g.z.size() != d.q)
    throw InvalidInput("grid dimensions do not match the system");
  if (g.transformed() && (g.phi.size() != d.m || g.omega.size() != d.q))
    throw InvalidInput("transformed grid needs one phi axis per u and one omega list per z");
  auto check_axes = [](const std::vector<Axis>& axes, const Box* box, const char* what) {
    for (std::size_t i = 0; i < axes.size(); ++i) {
      const auto& a = axes[i];
      if (a.count < 2) throw InvalidInput(std::string(what) + " axis needs at least 2 points");
      if (!(a.min < a.max)) throw InvalidInput(std::string(what) + " axis has min >= max");
      const auto ii = static_cast<Eigen::Index>(i);
      if (box && (a.min < box->lo[ii] || a.max > box->hi[ii]))
        throw InvalidInput(std::string(what) + " axis leaves the system's bounding box");
    }
  };
  check_axes(g.x, &spec.state_box, "x");
  check_axes(g.u, &spec.control_box, "u");
  if (g.transformed()) check_axes(g.phi, nullptr, "phi");
  auto check_lists = [](const std::vector<std::vector<std::int64_t>>& lists,
                        const std::vector<DiscreteRange>* domain, const char* what) {
    for (std::size_t i = 0; i < lists.size(); ++i) {
      if (lists[i].empty()) throw InvalidInput(std::string(what) + " value list is empty");
      if (domain)
        for (auto v : lists[i])
          if (!(*domain)[i].contains(v)) throw InvalidInput(std::string(what) + " value outside its domain");
    }
  };
  check_lists(g.y, &spec.y_domain, "y");
  check_lists(g.z, &spec.z_domain, "z");
  if (g.transformed()) check_lists(g.omega, nullptr, "omega");
}

inline void put(Eigen::MatrixXd& data, Eigen::Index row, Eigen::Index& col, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) data(row, col++) = v[i];
}

inline void put(Eigen::MatrixXd& data, Eigen::Index row, Eigen::Index& col, const Discrete& v) {
  for (auto value : v) data(row, col++) = static_cast<double>(value);
}

inline Discrete add(const Discrete& a, const Discrete& b) {
  Discrete out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

} // namespace detail

/// Advances every grid point one oracle step (two when the formulation or the
/// two-step flag needs it). Rows follow row-major grid order.
inline PairDataset generate_pairs(const HybridSystemSpec& spec, const GridSpec& grid, unsigned threads = 1) {
  detail::check_grid(spec, grid);
  const auto shape = grid.shape();
  const std::size_t total = checked_product(shape);
  if (total > grid.max_points)
    throw DomainTooLarge("grid would produce " + std::to_string(total) + " pairs, cap is " +
                         std::to_string(grid.max_points));

  const auto& d = spec.dims;
  PairDataset ds;
  ds.formulation = grid.formulation;
  ds.system = spec.name;
  ds.dims = d;
  ds.two_step = grid.two_step;
  ds.grid_hash = grid_hash(grid);
  ds.columns = dataset_columns(grid.formulation, d, grid.two_step);
  ds.data.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(ds.columns.size()));

  auto fill = [&](std::size_t begin, std::size_t end) {
    for (std::size_t flat = begin; flat < end; ++flat) {
      auto idx = unravel(flat, shape);
      std::size_t k = 0;
      HybridState s0{Vector(static_cast<Eigen::Index>(d.n)), Discrete(d.p)};
      HybridControl c0{Vector(static_cast<Eigen::Index>(d.m)), Discrete(d.q)};
      Vector phi(static_cast<Eigen::Index>(grid.transformed() ? d.m : 0));
      Discrete omega(grid.transformed() ? d.q : 0);
      for (std::size_t i = 0; i < d.n; ++i, ++k) s0.x[static_cast<Eigen::Index>(i)] = grid.x[i].at(idx[k]);
      for (std::size_t i = 0; i < d.p; ++i, ++k) s0.y[i] = grid.y[i][idx[k]];
      for (std::size_t i = 0; i < d.m; ++i, ++k) c0.u[static_cast<Eigen::Index>(i)] = grid.u[i].at(idx[k]);
      for (std::size_t i = 0; i < d.q; ++i, ++k) c0.z[i] = grid.z[i][idx[k]];
      if (grid.transformed()) {
        for (std::size_t i = 0; i < d.m; ++i, ++k) phi[static_cast<Eigen::Index>(i)] = grid.phi[i].at(idx[k]);
        for (std::size_t i = 0; i < d.q; ++i, ++k) omega[i] = grid.omega[i][idx[k]];
      }

      const auto row = static_cast<Eigen::Index>(flat);
      Eigen::Index col = 0;
      HybridState s1 = step(spec, s0, c0);
      if (!grid.transformed()) {
        detail::put(ds.data, row, col, s0.x);
        detail::put(ds.data, row, col, s0.y);
        detail::put(ds.data, row, col, c0.u);
        detail::put(ds.data, row, col, c0.z);
        detail::put(ds.data, row, col, s1.x);
        detail::put(ds.data, row, col, s1.y);
        if (grid.two_step) {
          HybridState s2 = step(spec, s1, c0);
          detail::put(ds.data, row, col, c0.u);
          detail::put(ds.data, row, col, c0.z);
          detail::put(ds.data, row, col, s2.x);
          detail::put(ds.data, row, col, s2.y);
        }
        continue;
      }

      // Lifted coordinates: v_k = x_{k+1} - x_k and v_{k+1} needs the step after.
      const Vector v0 = s1.x - s0.x;
      HybridControl c1{c0.u + phi, detail::add(c0.z, omega)};
      if (!in_domain(c1.z, spec.z_domain)) throw InvalidInput("z + omega leaves the discrete control domain");
      HybridState s2 = step(spec, s1, c1);
      const Vector v1 = s2.x - s1.x;
      detail::put(ds.data, row, col, s0.x);
      detail::put(ds.data, row, col, c0.u);
      detail::put(ds.data, row, col, v0);
      detail::put(ds.data, row, col, phi);
      detail::put(ds.data, row, col, omega);
      detail::put(ds.data, row, col, s0.y);
      detail::put(ds.data, row, col, c0.z);
      detail::put(ds.data, row, col, s1.x);
      detail::put(ds.data, row, col, c1.u);
      detail::put(ds.data, row, col, v1);
      detail::put(ds.data, row, col, s1.y);
      detail::put(ds.data, row, col, c1.z);
      if (grid.two_step) {
        // Increments are zero on the second step.
        HybridState s3 = step(spec, s2, c1);
        detail::put(ds.data, row, col, Vector::Zero(static_cast<Eigen::Index>(d.m)).eval());
        detail::put(ds.data, row, col, Discrete(d.q, 0));
        detail::put(ds.data, row, col, s2.x);
        detail::put(ds.data, row, col, c1.u);
        detail::put(ds.data, row, col, (s3.x - s2.x).eval());
        detail::put(ds.data, row, col, s2.y);
        detail::put(ds.data, row, col, c1.z);
      }
    }
  };

  threads = std::max(1u, threads);
  if (threads == 1 || total < 2 * threads) {
    fill(0, total);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (total + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = std::min(total, t * chunk), e = std::min(total, b + chunk);
      pool.emplace_back([&, t, b, e] {
        try {
          fill(b, e);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV persistence. The first line is a '#' comment carrying the metadata.

inline void write_dataset(std::ostream& out, const PairDataset& ds) {
  out << "# hkoop-dataset formulation=" << ds.formulation << " system=" << ds.system << " n=" << ds.dims.n
      << " m=" << ds.dims.m << " p=" << ds.dims.p << " q=" << ds.dims.q << " two_step=" << (ds.two_step ? 1 : 0)
      << " grid_hash=" << (ds.grid_hash.empty() ? "-" : ds.grid_hash)
      << " config_hash=" << (ds.config_hash.empty() ? "-" : ds.config_hash) << '\n';
  out << io::join(ds.columns, ',') << '\n';
  std::string line;
  for (Eigen::Index r = 0; r < ds.data.rows(); ++r) {
    line.clear();
    for (Eigen::Index c = 0; c < ds.data.cols(); ++c) {
      if (c) line.push_back(',');
      line += io::format_double(ds.data(r, c));
    }
    out << line << '\n';
  }
}

inline PairDataset read_dataset(std::istream& in) {
  auto csv = io::read_csv(in);
  std::map<std::string, std::string> meta;
  bool tagged = false;
  for (const auto& c : csv.comments) {
    std::istringstream ss(c);
    std::string word;
    ss >> word;
    if (word != "hkoop-dataset") continue;
    tagged = true;
    while (ss >> word) {
      auto eq = word.find('=');
      if (eq != std::string::npos) meta[word.substr(0, eq)] = word.substr(eq + 1);
    }
  }
  if (!tagged) throw SchemaError("dataset is missing its '# hkoop-dataset' metadata line");
  auto need = [&](const char* key) {
    auto it = meta.find(key);
    if (it == meta.end()) throw SchemaError(std::string("dataset metadata lacks '") + key + "'");
    return it->second;
  };
  PairDataset ds;
  ds.formulation = need("formulation");
  ds.system = need("system");
  ds.dims = {static_cast<std::size_t>(io::parse_int(need("n"))), static_cast<std::size_t>(io::parse_int(need("m"))),
             static_cast<std::size_t>(io::parse_int(need("p"))), static_cast<std::size_t>(io::parse_int(need("q")))};
  ds.two_step = need("two_step") == "1";
  ds.grid_hash = meta.count("grid_hash") && meta["grid_hash"] != "-" ? meta["grid_hash"] : "";
  ds.config_hash = meta.count("config_hash") && meta["config_hash"] != "-" ? meta["config_hash"] : "";
  ds.columns = dataset_columns(ds.formulation, ds.dims, ds.two_step);

  for (const auto& name : ds.columns)
    if (std::find(csv.header.begin(), csv.header.end(), name) == csv.header.end())
      throw SchemaError("dataset for formulation '" + ds.formulation + "' is missing column '" + name + "'");
  if (csv.header != ds.columns)
    throw SchemaError("dataset columns do not match the '" + ds.formulation + "' layout");

  ds.data.resize(static_cast<Eigen::Index>(csv.rows.size()), static_cast<Eigen::Index>(ds.columns.size()));
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    for (std::size_t c = 0; c < ds.columns.size(); ++c) {
      try {
        ds.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = io::parse_double(csv.rows[r][c]);
      } catch (const SchemaError& e) {
        throw SchemaError("line " + std::to_string(csv.line_numbers[r]) + ", column '" + ds.columns[c] +
                          "': " + e.what());
      }
    }
  }
  return ds;
}

} // namespace hkoop

#endif // HKOOP_DATAGEN_HPP
