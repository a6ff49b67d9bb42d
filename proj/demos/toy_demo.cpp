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

// Trains a Koopman model of the toy system and compares both rollout modes.
//
//   toy_demo [switched|hybrid|transformed] [epochs]
#include <iostream>
#include <string>

#include "hkoop/hkoop.hpp"

int main(int argc, char** argv) {
  using namespace hkoop;
  const std::string form = argc > 1 ? argv[1] : "switched";
  const std::size_t epochs = argc > 2 ? std::stoul(argv[2]) : 2000;

  auto spec = toy_system();
  GridSpec grid;
  grid.formulation = form;
  grid.x = {{-3.0, 3.0, 500}};
  grid.y = {{0, 1}};
  auto data = generate_pairs(spec, grid);

  auto model = make_model(parse_formulation(form), spec, ModelOptions{}, 7);
  fit_normalization(model, make_batch(model, data));
  TrainSchedule schedule;
  schedule.epochs = epochs;
  schedule.log_every = std::max<std::size_t>(1, epochs / 10);
  schedule.warm_start = form == "hybrid";
  schedule.warm_start_epochs = epochs / 2;
  auto result = train(model, data, schedule, &std::cout);
  std::cout << "final relative MSE " << result.final_loss << '\n';

  for (auto mode : {RolloutMode::Multiplied, RolloutMode::Evaluated}) {
    RolloutConfig rc;
    rc.mode = mode;
    rc.steps = 100;
    rc.init = default_initial_state("toy");
    auto r = rollout(model, spec, rc);
    std::cout << to_string(mode) << ": valid horizon " << r.valid_horizon << "/100, transition accuracy "
              << r.transition_accuracy << '\n';
  }
}
