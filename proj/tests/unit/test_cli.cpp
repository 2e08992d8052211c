#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            (std::string("freeatm_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  CliResult run(const std::string& args) const {
    const fs::path log = root_ / "stdout.txt";
    const std::string cmd = std::string(FREEATM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1,
            {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}};
  }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  fs::path root_;
};

}  // namespace

TEST_F(CliTest, GenValidateOverlay) {
  ASSERT_EQ(run("gen --count 4 --seed 3 -j 2 -o " + path("s")).code, 0);
  const CliResult ok = run("validate " + path("s"));
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("4 records"), std::string::npos);
  EXPECT_EQ(run("overlay " + path("s") + " " + path("o")).code, 0);
  EXPECT_TRUE(fs::exists(root_ / "o" / "000003.png"));
}

TEST_F(CliTest, ConfigFileAndFlagsCombine) {
  std::ofstream(root_ / "cfg.json") << R"({"count": 2, "noise_level": 0.1, "seed": 9})";
  ASSERT_EQ(run("gen --config " + path("cfg.json") + " --count 3 -o " + path("s")).code, 0);
  const auto manifest = nlohmann::json::parse(std::ifstream(root_ / "s" / "manifest.json"));
  EXPECT_EQ(manifest["config"]["count"], 3);
  EXPECT_EQ(manifest["config"]["noise_level"], 0.1);
  EXPECT_EQ(manifest["config"]["seed"], 9);
}

TEST_F(CliTest, DamagedShardExitsOne) {
  ASSERT_EQ(run("gen --count 2 -o " + path("s")).code, 0);
  fs::remove(root_ / "s" / "images" / "000000.png");
  const CliResult v = run("validate " + path("s"));
  EXPECT_EQ(v.code, 1);
  EXPECT_NE(v.out.find("1 violation"), std::string::npos);
  EXPECT_EQ(run("overlay " + path("s") + " " + path("o")).code, 1);
  EXPECT_EQ(run("validate " + path("missing")).code, 1);
}

TEST_F(CliTest, ConfigProblemsExitTwo) {
  EXPECT_EQ(run("gen --noise-level 1.5 -o " + path("s")).code, 2);
  EXPECT_EQ(run("gen --no-such-flag").code, 2);
  EXPECT_EQ(run("gen --config " + path("absent.json")).code, 2);
  std::ofstream(root_ / "bad.json") << R"({"cuont": 2})";
  EXPECT_EQ(run("gen --config " + path("bad.json")).code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("prompts --class dog --template nope").code, 2);
  EXPECT_FALSE(fs::exists(root_ / "s"));
}

TEST_F(CliTest, PromptsAndPlans) {
  const CliResult p = run("prompts --noun dog --block 4");
  EXPECT_EQ(p.code, 0);
  EXPECT_EQ(p.out, "The dog is in block 4.\n");
  const CliResult parsed = run("prompts --parse 'a dog The dog is in block 4.'");
  EXPECT_EQ(nlohmann::json::parse(parsed.out)["prompts"][0]["block"], 4);

  ASSERT_EQ(run("gen --count 1 -o " + path("s")).code, 0);
  const CliResult plan = run("plan-masks --shard " + path("s") + " --record 0 --beta 0.8 --seed 1");
  ASSERT_EQ(plan.code, 0) << plan.out;
  const auto j = nlohmann::json::parse(plan.out);
  EXPECT_EQ(j["P"], 196);
  EXPECT_EQ(j["attn_indices"].size(), 117u);
}

TEST_F(CliTest, MaskingScheduleExperiment) {
  const CliResult r = run("train-toy --kind masking_schedule --schedule-epochs 3 -o " + path("m.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(std::ifstream(root_ / "m.json"));
  EXPECT_EQ(j["schedules"][0]["epochs"].size(), 4u);
  EXPECT_EQ(run("train-toy --kind nope").code, 2);
}
