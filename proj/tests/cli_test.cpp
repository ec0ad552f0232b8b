// Config serialization/validation unit tests plus end-to-end invocations of
// the command-line binary (exit codes, artifacts, determinism).
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cmc/config.hpp"

namespace fs = std::filesystem;
using namespace cmc;

namespace {

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  EXPECT_TRUE(f.good()) << "missing file " << p;
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// config plumbing

TEST(Config, JsonRoundTripPreservesEveryField) {
  ExperimentConfig c;
  c.preset = "SAR+EO";
  c.tau = 0.25f;
  c.seed = 42;
  c.data.extent = 96;
  c.data.patch = 48;
  c.data.stride = 24;
  c.data.resize = 32;
  c.data.fraction = 0.4;
  c.data.split_ratio = 0.7;
  c.data.split_seed = 9;
  c.data.dir = "some/where";
  c.encoder.widths = {4, 8, 16};
  c.encoder.proj_dim = 24;
  c.pretrain = {0.02, 1e-4, 8, 7, 2};
  c.finetune = {0.01, 2e-4, 4, 3, 1};

  ExperimentConfig d = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(d), config_to_json(c));
  EXPECT_EQ(config_hash(d), config_hash(c));
}

TEST(Config, SaveLoadRoundTripThroughDisk) {
  fs::path p = fs::path(::testing::TempDir()) / "cfg_roundtrip.json";
  ExperimentConfig c;
  c.preset = "SAR+GT";
  c.pretrain.epochs = 11;
  save_config(p, c);
  ExperimentConfig d = load_config(p);
  EXPECT_EQ(d.preset, "SAR+GT");
  EXPECT_EQ(d.pretrain.epochs, 11);
  EXPECT_EQ(config_hash(d), config_hash(c));
}

TEST(Config, OverridesFollowDottedPaths) {
  nlohmann::json j = config_to_json(ExperimentConfig{});
  apply_override(j, "pretrain.epochs=9");
  apply_override(j, "tau=0.5");
  apply_override(j, "preset=SAR+EO");
  apply_override(j, "encoder.widths=[4,8]");
  apply_override(j, "data.dir=/tmp/ds");
  ExperimentConfig c = config_from_json(j);
  EXPECT_EQ(c.pretrain.epochs, 9);
  EXPECT_FLOAT_EQ(c.tau, 0.5f);
  EXPECT_EQ(c.preset, "SAR+EO");
  EXPECT_EQ(c.encoder.widths, (std::vector<int>{4, 8}));
  EXPECT_EQ(c.data.dir, "/tmp/ds");
  EXPECT_THROW(apply_override(j, "no-equals-sign"), ConfigError);
}

TEST(Config, ValidateRejectsBadValues) {
  auto broken = [](auto mutate) {
    ExperimentConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(broken([](auto& c) { c.tau = 0.0f; }).validate(), ConfigError);
  EXPECT_THROW(broken([](auto& c) { c.preset = "EO-only"; }).validate(), ConfigError);
  EXPECT_THROW(broken([](auto& c) { c.data.fraction = 0.0; }).validate(), ConfigError);
  EXPECT_THROW(broken([](auto& c) { c.data.split_ratio = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(broken([](auto& c) { c.pretrain.base_lr = -0.1; }).validate(), ConfigError);
  // 64 is not divisible by the 2^3 downsample of a three-block encoder? It is;
  // use a resize that is not.
  EXPECT_THROW(broken([](auto& c) { c.data.resize = 20; }).validate(), ConfigError);
  ExperimentConfig ok;
  EXPECT_NO_THROW(ok.validate());
}

TEST(Config, HashIsStableAndSensitive) {
  ExperimentConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.tau = 0.2f;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, FullScalePublishedNumbers) {
  ExperimentConfig c = full_scale_config();
  EXPECT_EQ(c.data.extent, 900);
  EXPECT_EQ(c.data.patch, 300);
  EXPECT_EQ(c.data.stride, 150);
  EXPECT_EQ(c.data.resize, 448);
  EXPECT_DOUBLE_EQ(c.pretrain.base_lr, 0.1);
  EXPECT_DOUBLE_EQ(c.pretrain.weight_decay, 5e-4);
  EXPECT_EQ(c.pretrain.batch, 126);
  EXPECT_EQ(c.pretrain.epochs, 500);
  EXPECT_EQ(c.pretrain.warmup, 10);
  EXPECT_DOUBLE_EQ(c.finetune.base_lr, 0.0075);
  EXPECT_EQ(c.finetune.batch, 72);
  EXPECT_EQ(c.finetune.epochs, 25);
  EXPECT_EQ(c.encoder.proj_dim, 128);
  EXPECT_NO_THROW(c.validate());
}

// ---------------------------------------------------------------------------
// binary invocations

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    scratch_ = fs::path(::testing::TempDir()) /
               ("cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(scratch_);
    fs::create_directories(scratch_);
  }

  // Runs the binary with `args`, returns the process exit code.
  int run(const std::string& args) const {
    std::string cmd = std::string(CMC_CLI_PATH) + " " + args + " >" +
                      (scratch_ / "stdout.log").string() + " 2>" +
                      (scratch_ / "stderr.log").string();
    int status = std::system(cmd.c_str());
    EXPECT_NE(status, -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
  }

  std::string out_log() const { return file_bytes(scratch_ / "stdout.log"); }

  fs::path write_tiny_config() const {
    ExperimentConfig c;
    c.preset = "SAR+GT+EO";
    c.seed = 1;
    c.data.extent = 48;
    c.data.patch = 32;
    c.data.stride = 16;
    c.data.resize = 16;
    c.data.split_seed = 1;
    c.encoder.widths = {4, 8};
    c.encoder.proj_dim = 8;
    c.pretrain = {0.05, 5e-4, 4, 2, 1};
    c.finetune = {0.05, 5e-4, 4, 2, 1};
    fs::path p = scratch_ / "tiny.json";
    save_config(p, c);
    return p;
  }

  std::string q(const fs::path& p) const { return p.string(); }

  fs::path scratch_;
};

TEST_F(Cli, GenerateWritesDatasetDeterministically) {
  ASSERT_EQ(run("generate --scenes 6 --extent 48 --seed 3 --out " + q(scratch_ / "a")), 0);
  EXPECT_TRUE(fs::exists(scratch_ / "a" / "manifest.json"));
  EXPECT_TRUE(fs::exists(scratch_ / "a" / "scenes" / "0.cmct"));
  EXPECT_TRUE(fs::exists(scratch_ / "a" / "scenes" / "5.cmct"));
  ASSERT_EQ(run("generate --scenes 6 --extent 48 --seed 3 --out " + q(scratch_ / "b")), 0);
  EXPECT_EQ(file_bytes(scratch_ / "a" / "manifest.json"), file_bytes(scratch_ / "b" / "manifest.json"));
  EXPECT_EQ(file_bytes(scratch_ / "a" / "scenes" / "2.cmct"),
            file_bytes(scratch_ / "b" / "scenes" / "2.cmct"));
}

TEST_F(Cli, GenerateUsageAndOverwriteGuards) {
  EXPECT_EQ(run("generate --scenes 1 --out " + q(scratch_ / "one")), 2);
  ASSERT_EQ(run("generate --scenes 2 --extent 32 --out " + q(scratch_ / "d")), 0);
  EXPECT_EQ(run("generate --scenes 2 --extent 32 --out " + q(scratch_ / "d")), 3);
  EXPECT_EQ(run("generate --scenes 2 --extent 32 --force --out " + q(scratch_ / "d")), 0);
}

TEST_F(Cli, PipelineProducesArtifactsAndSnapshot) {
  fs::path cfg = write_tiny_config();
  ASSERT_EQ(run("generate --scenes 6 --extent 48 --seed 3 --out " + q(scratch_ / "ds")), 0);
  ASSERT_EQ(run("pretrain --config " + q(cfg) + " --data " + q(scratch_ / "ds") + " --out " +
                q(scratch_ / "pre")),
            0);
  EXPECT_TRUE(fs::exists(scratch_ / "pre" / "pretrain.cmct"));
  EXPECT_TRUE(fs::exists(scratch_ / "pre" / "history.csv"));
  EXPECT_TRUE(fs::exists(scratch_ / "pre" / "config.json"));  // resolved snapshot

  ASSERT_EQ(run("finetune --config " + q(cfg) + " --data " + q(scratch_ / "ds") + " --out " +
                q(scratch_ / "fin") + " --weights " + q(scratch_ / "pre" / "pretrain.cmct")),
            0);
  EXPECT_TRUE(fs::exists(scratch_ / "fin" / "model.cmct"));
  EXPECT_TRUE(fs::exists(scratch_ / "fin" / "report.csv"));
  EXPECT_TRUE(fs::exists(scratch_ / "fin" / "report.json"));

  // The snapshot written beside the outputs is a loadable config equal to the
  // resolved one.
  ExperimentConfig snap = load_config(scratch_ / "pre" / "config.json");
  ExperimentConfig orig = load_config(cfg);
  orig.data.dir = (scratch_ / "ds").string();
  EXPECT_EQ(config_hash(snap), config_hash(orig));
}

TEST_F(Cli, RepeatedEvaluationIsByteIdentical) {
  fs::path cfg = write_tiny_config();
  ASSERT_EQ(run("generate --scenes 6 --extent 48 --seed 3 --out " + q(scratch_ / "ds")), 0);
  ASSERT_EQ(run("finetune --config " + q(cfg) + " --data " + q(scratch_ / "ds") + " --out " +
                q(scratch_ / "fin")),
            0);
  for (const char* out : {"e1", "e2"}) {
    ASSERT_EQ(run("evaluate --config " + q(cfg) + " --data " + q(scratch_ / "ds") + " --out " +
                  q(scratch_ / out) + " --weights " + q(scratch_ / "fin" / "model.cmct")),
              0);
  }
  EXPECT_EQ(file_bytes(scratch_ / "e1" / "report.json"), file_bytes(scratch_ / "e2" / "report.json"));
  EXPECT_EQ(file_bytes(scratch_ / "e1" / "report.csv"), file_bytes(scratch_ / "e2" / "report.csv"));
}

TEST_F(Cli, FractionOverrideAndRandomArmLabel) {
  fs::path cfg = write_tiny_config();
  ASSERT_EQ(run("generate --scenes 8 --extent 48 --seed 3 --out " + q(scratch_ / "ds")), 0);
  ASSERT_EQ(run("finetune --config " + q(cfg) + " --data " + q(scratch_ / "ds") + " --out " +
                q(scratch_ / "fin") + " --fraction 0.5"),
            0);
  std::string csv = file_bytes(scratch_ / "fin" / "report.csv");
  EXPECT_NE(csv.find("fraction,0.5,Random,1,"), std::string::npos) << csv;
}

TEST_F(Cli, VerifySuitePassesAndChecksConfigFirst) {
  EXPECT_EQ(run("verify"), 0);
  std::string out = out_log();
  EXPECT_NE(out.find("loss-oracle agreement"), std::string::npos);
  EXPECT_NE(out.find("all checks passed"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run("verify --set tau=-1"), 2);
}

TEST_F(Cli, BadInvocationsMapToDocumentedCodes) {
  EXPECT_EQ(run("--definitely-not-a-flag"), 2);
  EXPECT_EQ(run("pretrain --data " + q(scratch_ / "missing") + " --out " + q(scratch_ / "o")), 3);
  fs::path cfg = write_tiny_config();
  // Dataset extent mismatch is a data error: generate at 32, config says 48.
  ASSERT_EQ(run("generate --scenes 4 --extent 32 --out " + q(scratch_ / "ds32")), 0);
  EXPECT_EQ(run("pretrain --config " + q(cfg) + " --data " + q(scratch_ / "ds32") + " --out " +
                q(scratch_ / "o2")),
            3);
  EXPECT_EQ(run("evaluate --config " + q(cfg) + " --data " + q(scratch_ / "ds32") +
                " --out " + q(scratch_ / "o3") + " --weights nowhere.cmct --split test"),
            2);
}

TEST_F(Cli, ThreadCapEnvironmentIsValidated) {
  std::string cmd = std::string("CMC_THREADS=0 ") + CMC_CLI_PATH + " verify >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 2);
  cmd = std::string("CMC_THREADS=2 ") + CMC_CLI_PATH + " verify >/dev/null 2>&1";
  status = std::system(cmd.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 0);
}
