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

#ifndef HKOOP_CLI_HPP
#define HKOOP_CLI_HPP

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hkoop/config.hpp"
#include "hkoop/datagen.hpp"
#include "hkoop/errors.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/io.hpp"
#include "hkoop/koopman.hpp"
#include "hkoop/rollout.hpp"
#include "hkoop/systems.hpp"

namespace hkoop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

/// --threads wins, then HK_THREADS, then the hardware count.
inline unsigned resolve_threads(int flag) {
  if (flag > 0) return static_cast<unsigned>(flag);
  if (const char* env = std::getenv("HK_THREADS")) {
    std::int64_t v = io::parse_int(env);
    if (v < 1) throw InvalidInput("HK_THREADS must be a positive integer");
    return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open '" + path + "'");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write '" + path + "'");
  return out;
}

/// Parses "x0,x1,...,y0,..." (commas or spaces) into a hybrid state.
inline HybridState parse_state(const std::string& text, const Dims& d) {
  std::string cleaned = text;
  for (char& ch : cleaned)
    if (ch == ';' || ch == ' ') ch = ',';
  std::vector<std::string> parts;
  for (auto& p : io::split(cleaned, ','))
    if (!io::trim(p).empty()) parts.emplace_back(io::trim(p));
  if (parts.size() != d.n + d.p)
    throw InvalidInput("--init needs " + std::to_string(d.n) + " continuous and " + std::to_string(d.p) +
                       " discrete values, got " + std::to_string(parts.size()));
  HybridState s{Vector(static_cast<Eigen::Index>(d.n)), Discrete(d.p)};
  for (std::size_t i = 0; i < d.n; ++i) s.x[static_cast<Eigen::Index>(i)] = io::parse_double(parts[i]);
  for (std::size_t i = 0; i < d.p; ++i) s.y[i] = io::parse_int(parts[d.n + i]);
  return s;
}

struct Options {
  std::string config, data, out, model, traj, init, mode = "evaluated";
  std::size_t steps = 100;
  int order = 1;
  int threads = 0;
  double threshold = -1.0;
  bool no_projection = false;
  bool verbose = false;
};

inline int gen_data(const Options& o, std::ostream& out) {
  auto cfg = load_config(o.config);
  auto spec = cfg.system_spec();
  auto ds = generate_pairs(spec, cfg.grid, resolve_threads(o.threads));
  ds.config_hash = cfg.hash;
  auto file = open_out(o.out);
  write_dataset(file, ds);
  out << "pairs " << ds.size() << '\n';
  return kExitOk;
}

inline int train_cmd(const Options& o, std::ostream& out, std::ostream& log) {
  auto cfg = load_config(o.config);
  auto in = open_in(o.data);
  auto ds = read_dataset(in);
  if (ds.system != cfg.system)
    throw SchemaError("dataset was generated for system '" + ds.system + "', config names '" + cfg.system + "'");
  auto model = model_for(cfg, ds);
  auto result = train(model, ds, cfg.training, o.verbose ? &log : nullptr);
  auto file = open_out(o.out);
  save_model(model, file);
  out << "epochs " << result.epochs_run << '\n';
  out << "final_loss " << io::format_double(result.final_loss) << '\n';
  if (result.aborted) {
    log << result.message << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

inline int rollout_cmd(const Options& o, std::ostream& out) {
  auto in = open_in(o.model);
  auto model = load_model(in);
  auto spec = make_system(model.system_name, model.system_params);
  check_compatible(model, spec);
  RolloutConfig rc;
  rc.mode = parse_rollout_mode(o.mode);
  rc.steps = o.steps;
  rc.init = o.init.empty() ? default_initial_state(model.system_name) : parse_state(o.init, model.dims);
  rc.controls = default_controls(model.system_name, model.system_params, o.steps);
  rc.project_velocity = !o.no_projection;
  if (o.threshold >= 0.0) rc.threshold = o.threshold;
  auto report = rollout(model, spec, rc);
  auto file = open_out(o.out);
  write_rollout_csv(file, report,
                    {"hkoop-rollout formulation=" + to_string(model.formulation) + " mode=" + to_string(rc.mode) +
                     " steps=" + std::to_string(rc.steps) + " config_hash=" +
                     (model.config_hash.empty() ? "-" : model.config_hash)});
  out << "valid_horizon " << report.valid_horizon << '\n';
  out << "transition_accuracy " << io::format_double(report.transition_accuracy) << '\n';
  out << "threshold " << io::format_double(report.threshold) << '\n';
  if (report.failure_index) out << "failure_step " << *report.failure_index << ": " << report.failure_message << '\n';
  return kExitOk;
}

inline int eval_cmd(const Options& o, std::ostream& out) {
  auto min = open_in(o.model);
  auto model = load_model(min);
  auto din = open_in(o.data);
  auto ds = read_dataset(din);
  auto r = evaluate(model, ds);
  out << "pairs " << r.pairs << '\n';
  out << "relative_mse " << io::format_double(r.relative_mse) << '\n';
  out << "transition_pairs " << r.transition_pairs << '\n';
  out << "transition_mse " << io::format_double(r.transition_mse) << '\n';
  out << "steady_mse " << io::format_double(r.steady_mse) << '\n';
  out << "variable,p50,p90,p99,max\n";
  for (const auto& v : r.variables)
    out << v.name << ',' << io::format_double(v.p50) << ',' << io::format_double(v.p90) << ','
        << io::format_double(v.p99) << ',' << io::format_double(v.max) << '\n';
  return kExitOk;
}

inline int identifiability_cmd(const Options& o, std::ostream& out) {
  auto cfg = load_config(o.config);
  auto report = check_identifiability(cfg.system_spec(), o.order, cfg.identifiability_grid(), 1e-9,
                                      resolve_threads(o.threads));
  auto j = report_json(report);
  j["config_hash"] = cfg.hash;
  if (!o.out.empty()) {
    auto file = open_out(o.out);
    file << j.dump(1) << '\n';
  }
  out << j.dump(1) << '\n';
  return report.pass ? kExitOk : kExitRuntime;
}

inline int export_plot(const Options& o, std::ostream& out) {
  auto in = open_in(o.traj);
  auto csv = io::read_csv(in);
  if (csv.header.empty() || csv.header.front() != "k") throw SchemaError("trajectory file must start with a 'k' column");
  auto file = open_out(o.out);
  for (const auto& c : csv.comments) file << "# " << c << '\n';
  file << "series,k,value\n";
  std::size_t rows = 0;
  for (std::size_t c = 1; c < csv.header.size(); ++c)
    for (const auto& row : csv.rows) {
      file << csv.header[c] << ',' << row[0] << ',' << row[c] << '\n';
      ++rows;
    }
  out << "rows " << rows << '\n';
  return kExitOk;
}

inline int simulate_cmd(const Options& o, std::ostream& out) {
  auto cfg = load_config(o.config);
  auto spec = cfg.system_spec();
  auto init = o.init.empty() ? default_initial_state(cfg.system) : parse_state(o.init, spec.dims);
  auto traj = simulate(spec, init, default_controls(cfg.system, cfg.system_params, o.steps), o.steps);
  auto file = open_out(o.out);
  write_trajectory_csv(file, traj, {"hkoop-trajectory system=" + cfg.system + " config_hash=" + cfg.hash});
  out << "samples " << traj.size() << '\n';
  return kExitOk;
}

/// Runs one command line. Exit codes: 0 success, 1 invalid input, 2 runtime failure.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Koopman surrogate models for hybrid systems", "hkoop"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Sample single-step training pairs on a grid");
  gen->add_option("--config", o.config)->required();
  gen->add_option("--out", o.out)->required();
  gen->add_option("--threads", o.threads);

  auto* tr = app.add_subcommand("train", "Train a Koopman model");
  tr->add_option("--config", o.config)->required();
  tr->add_option("--data", o.data)->required();
  tr->add_option("--out", o.out)->required();
  tr->add_option("--threads", o.threads);
  tr->add_flag("--verbose", o.verbose, "Log training progress to stderr");

  auto* ro = app.add_subcommand("rollout", "Roll a trained model out against the oracle");
  ro->add_option("--model", o.model)->required();
  ro->add_option("--mode", o.mode)->check(CLI::IsMember({"multiplied", "evaluated"}));
  ro->add_option("--steps", o.steps);
  ro->add_option("--init", o.init, "Initial state: continuous values then discrete values");
  ro->add_option("--out", o.out)->required();
  ro->add_option("--threshold", o.threshold, "Valid-horizon error threshold");
  ro->add_flag("--no-projection", o.no_projection, "Skip velocity projection for transformed models");
  ro->add_option("--threads", o.threads);

  auto* ev = app.add_subcommand("eval", "Single-step error statistics of a model on a dataset");
  ev->add_option("--model", o.model)->required();
  ev->add_option("--data", o.data)->required();
  ev->add_option("--threads", o.threads);

  auto* id = app.add_subcommand("check-identifiability", "Certify discrete-state recoverability on a grid");
  id->add_option("--config", o.config)->required();
  id->add_option("--order", o.order)->check(CLI::IsMember({1, 2}));
  id->add_option("--out", o.out);
  id->add_option("--threads", o.threads);

  auto* ex = app.add_subcommand("export-plot", "Convert a trajectory CSV into a long-format table");
  ex->add_option("--traj", o.traj)->required();
  ex->add_option("--out", o.out)->required();

  auto* sim = app.add_subcommand("simulate", "Simulate the oracle system");
  sim->add_option("--config", o.config)->required();
  sim->add_option("--steps", o.steps);
  sim->add_option("--init", o.init);
  sim->add_option("--out", o.out)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return kExitInvalid;
  }

  try {
    if (gen->parsed()) return gen_data(o, out);
    if (tr->parsed()) return train_cmd(o, out, err);
    if (ro->parsed()) return rollout_cmd(o, out);
    if (ev->parsed()) return eval_cmd(o, out);
    if (id->parsed()) return identifiability_cmd(o, out);
    if (ex->parsed()) return export_plot(o, out);
    if (sim->parsed()) return simulate_cmd(o, out);
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitInvalid;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), out, err);
}

} // namespace hkoop::cli

#endif // HKOOP_CLI_HPP
