#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("psl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args, const std::string& env = "") {
    const std::string cmd = "cd \"" + dir_.string() + "\" && " + env + " \"" PSL_CLI_PATH "\" " + args +
                            " > out.txt 2> err.txt";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "out.txt");
    r.err = slurp(dir_ / "err.txt");
    return r;
  }

  fs::path dir_;
};

const char* kData = " --data-seed 1 --classes 4 --per-class 50 --test-per-class 10 --dim 4";

TEST_F(Cli, NoArgumentsIsUsageError) {
  const auto r = run("");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST_F(Cli, UnknownFlagIsUsageErrorWithHelp) {
  const auto r = run("bound --eps 0.1 --batch 10 --pool 100 --classes 2 --bogus");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  EXPECT_NE(r.err.find("--pool"), std::string::npos);
}

TEST_F(Cli, HelpListsFlags) {
  const auto r = run("schedule --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--global-batch"), std::string::npos);
}

TEST_F(Cli, BoundExample) {
  auto r = run("bound --eps 0.1 --batch 1024 --pool 50000 --classes 10");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "1.66e-08\n");
  r = run("bound --eps 0.1 --batch 1024 --pool 50000 --classes 10 --json");
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j.at("bound").get<double>(), 1.66302790699124e-8, 1e-20);
}

TEST_F(Cli, BoundInvalidInputIsRuntimeError) {
  const auto r = run("bound --eps 0.1 --batch 10 --pool 5 --classes 3");
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(Cli, ScheduleSingleClientExample) {
  auto r = run("schedule --strategy gpsl --global-batch 4 --sizes 10 --seed 1");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("T=3\n", 0), 0u);
  r = run("schedule --strategy gpsl --global-batch 4 --sizes 10 --seed 1 --json");
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("steps"), nlohmann::json::parse("[[4],[4],[2]]"));
}

TEST_F(Cli, SeedIsMandatory) {
  EXPECT_EQ(run("schedule --strategy gpsl --global-batch 4 --sizes 10").code, 1);
  EXPECT_EQ(run(std::string("partition") + kData + " -K 2").code, 1);
  EXPECT_EQ(run("partition --seed 1 -K 2").code, 1);
}

TEST_F(Cli, PartitionScheduleAnalyzePipeline) {
  ASSERT_EQ(run(std::string("partition") + kData + " --kind dirichlet -K 4 -C 2 --alpha 3 --seed 2 --out p.json").code, 0);
  const auto p = nlohmann::json::parse(slurp(dir_ / "p.json"));
  EXPECT_EQ(p.at("client_indices").size(), 4u);
  ASSERT_EQ(run("schedule --strategy fls -B 16 --partition p.json --seed 3 --out s.json").code, 0);
  const auto r = run("analyze --schedule s.json --partition p.json --trials 500 --seed 4 --out r.json --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir_ / "r.json"));
  EXPECT_EQ(nlohmann::json::parse(r.out), j);
  EXPECT_TRUE(fs::exists(dir_ / "r.csv"));
}

TEST_F(Cli, OutputDirectoryFromEnvironment) {
  const auto r = run(std::string("partition") + kData + " -K 2 --seed 1", "PSL_OUTPUT_DIR=env");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "env" / "partition.json"));
}

TEST_F(Cli, TrainWithConfigAndOverrides) {
  {
    std::ofstream cfg(dir_ / "cfg.json");
    cfg << R"({"dataset": {"classes": 3, "per_class_count": 30, "test_per_class_count": 5, "feature_dim": 4, "seed": 1},
               "partition": {"kind": "iid", "K": 3, "seed": 2}, "global_batch": 16, "epochs": 5, "seeds": [0],
               "model": {"client_hidden": 8, "server_hidden": 8}})";
  }
  const auto r = run("train --config cfg.json -E 2 --strategy fpls --out rep --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = nlohmann::json::parse(slurp(dir_ / "rep" / "config.json"));
  EXPECT_EQ(cfg.at("epochs"), 2);
  EXPECT_EQ(cfg.at("strategy"), "fpls");
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "curves" / "seed_0.csv"));
  EXPECT_EQ(run("train --config cfg.json --epochs 0 --out rep").code, 2);
}

TEST_F(Cli, CompareIncludesCentralizedOnNonIidPartition) {
  const auto r = run(std::string("compare") + kData +
                     " --kind dirichlet -K 4 -C 2 --alpha 3 --partition-seed 1 --seeds 0 -E 1 -B 16 --out cmp --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = nlohmann::json::parse(slurp(dir_ / "cmp" / "comparison.json"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows.back().at("strategy"), "cl");
  EXPECT_EQ(rows.back().at("K"), 1);
}

TEST_F(Cli, ConfigWithUnknownKeyFails) {
  {
    std::ofstream cfg(dir_ / "bad.json");
    cfg << R"({"epochz": 3})";
  }
  const auto r = run("train --config bad.json --out rep");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("epochz"), std::string::npos);
}

}  // namespace
