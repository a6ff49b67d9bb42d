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

#ifndef HKOOP_CONFIG_HPP
#define HKOOP_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "hkoop/datagen.hpp"
#include "hkoop/errors.hpp"
#include "hkoop/io.hpp"
#include "hkoop/koopman.hpp"
#include "hkoop/systems.hpp"

namespace hkoop {

/// One experiment: system, formulation, network shape, sampling grid and
/// training schedule. Shared by every CLI subcommand.
struct ExperimentConfig {
  std::string name;
  std::string system = "toy";
  nlohmann::json system_params;
  Formulation formulation = Formulation::Switched;
  ModelOptions network;
  GridSpec grid;
  TrainSchedule training;
  std::optional<IdentifiabilityGrid> identifiability;
  std::uint64_t seed = 0;
  std::string hash; // FNV-1a of the canonical config text

  HybridSystemSpec system_spec() const { return make_system(system, system_params); }

  IdentifiabilityGrid identifiability_grid() const {
    if (identifiability) return *identifiability;
    return {grid.x, grid.u};
  }
};

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw SchemaError("config must be a JSON object");
    if (!j.contains("seed")) throw SchemaError("config is missing the mandatory 'seed'");
    ExperimentConfig c;
    c.name = j.value("name", std::string{});
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& sys = j.at("system");
    if (sys.is_string()) {
      c.system = sys.get<std::string>();
    } else {
      c.system = sys.at("name").get<std::string>();
      c.system_params = sys.value("params", nlohmann::json(nullptr));
    }
    c.formulation = parse_formulation(j.at("formulation").get<std::string>());
    if (j.contains("network")) {
      const auto& n = j.at("network");
      c.network.phi_x_dim = n.value("phi_x_dim", c.network.phi_x_dim);
      c.network.phi_xu_dim = n.value("phi_xu_dim", c.network.phi_xu_dim);
      c.network.hidden_width = n.value("hidden_width", c.network.hidden_width);
      c.network.hidden_depth = n.value("hidden_depth", c.network.hidden_depth);
    }
    c.network.embedding = parse_embedding(j.value("embedding", std::string("tanh")));
    c.grid = j.at("grid").get<GridSpec>();
    if (c.grid.formulation != to_string(c.formulation))
      throw SchemaError("grid formulation '" + c.grid.formulation + "' does not match '" + to_string(c.formulation) +
                        "'");
    if (j.contains("training")) c.training = j.at("training").get<TrainSchedule>();
    if (j.contains("identifiability")) {
      const auto& g = j.at("identifiability");
      IdentifiabilityGrid grid;
      if (g.contains("x")) grid.x = g.at("x").get<std::vector<Axis>>();
      if (g.contains("u")) grid.u = g.at("u").get<std::vector<Axis>>();
      c.identifiability = grid;
    }
    nlohmann::json canonical = j;
    canonical.erase("outputs");
    c.hash = io::fnv1a_hex(canonical.dump());
    c.system_spec(); // rejects unknown systems and invalid parameters early
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("invalid config: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Fresh model for a config, normalized to the dataset's coordinate ranges.
inline KoopmanModel model_for(const ExperimentConfig& c, const PairDataset& dataset) {
  KoopmanModel model = make_model(c.formulation, c.system_spec(), c.network, c.seed, c.system_params);
  model.config_hash = c.hash;
  model.train_config = {{"network",
                         {{"phi_x_dim", c.network.phi_x_dim},
                          {"phi_xu_dim", c.network.phi_xu_dim},
                          {"hidden_width", c.network.hidden_width},
                          {"hidden_depth", c.network.hidden_depth}}},
                        {"embedding", to_string(c.network.embedding)}};
  fit_normalization(model, make_batch(model, dataset));
  return model;
}

} // namespace hkoop

#endif // HKOOP_CONFIG_HPP
