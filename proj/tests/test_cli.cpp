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

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hkoop/cli.hpp"

namespace fs = std::filesystem;
using namespace hkoop;

namespace {

class CliTest : public ::testing::Test {
protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("hkoop_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    unsetenv("HK_THREADS");
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  int run(std::vector<std::string> args) {
    out.str("");
    err.str("");
    return cli::run(std::move(args), out, err);
  }

  std::string slurp(const std::string& name) const {
    std::ifstream in(path(name));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir;
  std::ostringstream out, err;
};

const char* kToyConfig = R"({
  "name": "toy-small", "system": "toy", "formulation": "hybrid", "seed": 3,
  "network": {"phi_x_dim": 2, "phi_xu_dim": 2, "hidden_width": 4, "hidden_depth": 1},
  "grid": {"formulation": "hybrid", "x": [[-3, 3, 20]], "y": [[0, 1]]},
  "training": {"epochs": 20, "batch_size": 8, "learning_rate": 0.01},
  "identifiability": {"x": [[-5, 5, 101]]}
})";

const char* kTransConfig = R"({
  "system": {"name": "transmission", "params": {}}, "formulation": "transformed", "seed": 4,
  "network": {"phi_x_dim": 2, "phi_xu_dim": 2, "hidden_width": 4, "hidden_depth": 1},
  "grid": {"formulation": "transformed", "x": [[0, 500, 3], [2, 40, 3]], "y": [[1, 2, 3]],
           "u": [[0, 30, 2]], "phi": [[-5, 5, 2]]},
  "training": {"epochs": 5, "batch_size": 0}
})";

} // namespace

TEST_F(CliTest, ToyPipeline) {
  auto cfg = write("toy.json", kToyConfig);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("data.csv")}), 0) << err.str();
  EXPECT_EQ(out.str(), "pairs 40\n");
  ASSERT_EQ(run({"train", "--config", cfg, "--data", path("data.csv"), "--out", path("model.json")}), 0) << err.str();
  EXPECT_NE(out.str().find("epochs 20"), std::string::npos);
  ASSERT_EQ(run({"eval", "--model", path("model.json"), "--data", path("data.csv")}), 0) << err.str();
  EXPECT_NE(out.str().find("pairs 40"), std::string::npos);
  EXPECT_NE(out.str().find("variable,p50,p90,p99,max"), std::string::npos);
  ASSERT_EQ(run({"rollout", "--model", path("model.json"), "--mode", "multiplied", "--steps", "12", "--out",
                 path("roll.csv")}),
            0)
      << err.str();
  EXPECT_NE(out.str().find("valid_horizon"), std::string::npos);
  auto roll = slurp("roll.csv");
  EXPECT_EQ(roll.rfind("# hkoop-rollout formulation=hybrid mode=multiplied steps=12 config_hash=", 0), 0u);
  ASSERT_EQ(run({"export-plot", "--traj", path("roll.csv"), "--out", path("plot.csv")}), 0) << err.str();
  EXPECT_EQ(out.str(), "rows 65\n");
  auto plot = slurp("plot.csv");
  EXPECT_NE(plot.find("series,k,value\nx0_true,0,0.65\n"), std::string::npos);
}

TEST_F(CliTest, TransformedPipelineWithInit) {
  auto cfg = write("trans.json", kTransConfig);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("data.csv"), "--threads", "2"}), 0) << err.str();
  ASSERT_EQ(run({"train", "--config", cfg, "--data", path("data.csv"), "--out", path("model.json")}), 0) << err.str();
  ASSERT_EQ(run({"rollout", "--model", path("model.json"), "--steps", "8", "--init", "10,5,2", "--out",
                 path("roll.csv"), "--threshold", "3"}),
            0)
      << err.str();
  EXPECT_NE(out.str().find("threshold 3\n"), std::string::npos);
  ASSERT_EQ(run({"rollout", "--model", path("model.json"), "--steps", "8", "--init", "10,5", "--out",
                 path("roll.csv")}),
            1);
}

TEST_F(CliTest, ZeroStepRolloutWritesOneRow) {
  auto cfg = write("toy.json", kToyConfig);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("data.csv")}), 0);
  ASSERT_EQ(run({"train", "--config", cfg, "--data", path("data.csv"), "--out", path("model.json")}), 0);
  ASSERT_EQ(run({"rollout", "--model", path("model.json"), "--steps", "0", "--out", path("roll.csv")}), 0)
      << err.str();
  std::ifstream in(path("roll.csv"));
  auto table = io::read_csv(in);
  EXPECT_EQ(table.rows.size(), 1u);
  EXPECT_NE(out.str().find("valid_horizon 0"), std::string::npos);
}

TEST_F(CliTest, DatasetSystemMismatchIsInvalidInput) {
  auto toy = write("toy.json", kToyConfig);
  auto trans = write("trans.json", kTransConfig);
  ASSERT_EQ(run({"gen-data", "--config", toy, "--out", path("data.csv")}), 0);
  EXPECT_EQ(run({"train", "--config", trans, "--data", path("data.csv"), "--out", path("model.json")}), 1);
  EXPECT_NE(err.str().find("error:"), std::string::npos);
}

TEST_F(CliTest, ParseErrorsAndMissingFiles) {
  EXPECT_EQ(run({"gen-data", "--config", "x.json", "--out", "y.csv", "--bogus"}), 1);
  EXPECT_EQ(run({"frobnicate"}), 1);
  EXPECT_EQ(run({}), 1);
  EXPECT_EQ(run({"--help"}), 0);
  EXPECT_NE(out.str().find("gen-data"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--config", path("missing.json"), "--out", path("d.csv")}), 1);
  EXPECT_EQ(run({"rollout", "--model", path("missing.json"), "--out", path("r.csv"), "--mode", "sideways"}), 1);
  auto broken = write("broken.json", "{\"system\": \"toy\"");
  EXPECT_EQ(run({"gen-data", "--config", broken, "--out", path("d.csv")}), 1);
  auto noseed = write("noseed.json", R"({"system": "toy", "formulation": "switched",
    "grid": {"formulation": "switched", "x": [[-1, 1, 3]], "y": [[0, 1]]}})");
  EXPECT_EQ(run({"gen-data", "--config", noseed, "--out", path("d.csv")}), 1);
  EXPECT_NE(err.str().find("seed"), std::string::npos);
}

TEST_F(CliTest, IdentifiabilityReport) {
  auto cfg = write("toy.json", kToyConfig);
  ASSERT_EQ(run({"check-identifiability", "--config", cfg, "--out", path("id.json")}), 0) << err.str();
  auto j = nlohmann::json::parse(slurp("id.json"));
  EXPECT_EQ(j["pass"], true);
  EXPECT_NEAR(j["min_gap"].get<double>(), 0.5714285714285714, 1e-9);
  EXPECT_EQ(j["points_checked"], 101);
  EXPECT_EQ(run({"check-identifiability", "--config", cfg, "--order", "2"}), 0);
  EXPECT_EQ(run({"check-identifiability", "--config", cfg, "--order", "3"}), 1);
}

TEST_F(CliTest, ThreadSettingPrecedence) {
  EXPECT_EQ(cli::resolve_threads(3), 3u);
  setenv("HK_THREADS", "5", 1);
  EXPECT_EQ(cli::resolve_threads(0), 5u);
  EXPECT_EQ(cli::resolve_threads(2), 2u);
  setenv("HK_THREADS", "zero", 1);
  EXPECT_THROW(cli::resolve_threads(0), SchemaError);
  auto cfg = write("toy.json", kToyConfig);
  EXPECT_EQ(run({"gen-data", "--config", cfg, "--out", path("d.csv")}), 1);
  unsetenv("HK_THREADS");
  EXPECT_GE(cli::resolve_threads(0), 1u);
}

TEST_F(CliTest, GeneratedDataIsByteIdenticalAcrossThreadCounts) {
  auto cfg = write("trans.json", kTransConfig);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("a.csv"), "--threads", "1"}), 0);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("b.csv"), "--threads", "3"}), 0);
  EXPECT_EQ(slurp("a.csv"), slurp("b.csv"));
}

TEST_F(CliTest, SimulateWritesTrajectory) {
  auto cfg = write("trans.json", kTransConfig);
  ASSERT_EQ(run({"simulate", "--config", cfg, "--steps", "30", "--out", path("t.csv")}), 0) << err.str();
  EXPECT_EQ(out.str(), "samples 31\n");
  std::ifstream in(path("t.csv"));
  auto traj = read_trajectory_csv(in);
  EXPECT_EQ(traj.size(), 31u);
}
