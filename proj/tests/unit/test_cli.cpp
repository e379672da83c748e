#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "deepnorm/cli.hpp"
#include "deepnorm/errors.hpp"

namespace deepnorm {
namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("deepnorm_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  // Runs the executable; returns its exit status. stderr goes to err.txt.
  int run(const std::string& args) const {
    const std::string cmd = std::string(DEEPNORM_EXE) + " " + args + " > " + path("out.txt").string() + " 2> " +
                            path("err.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

  fs::path dir_;
};

TEST_F(CliTest, PrecedenceDefaultsFileFlags) {
  write("cfg.json", R"({"seed": 9, "model": {"d_model": 32, "n_heads": 2, "enc_layers": 3},
                       "train": {"steps": 17}, "analysis": {"probe_len": 8}})");
  SharedFlags flags;
  flags.config_path = path("cfg.json").string();
  auto cfg = resolve_config(flags);
  EXPECT_EQ(cfg.model.d_model, 32u);
  EXPECT_EQ(cfg.model.enc_layers, 3u);
  EXPECT_EQ(cfg.model.dec_layers, ModelConfig{}.dec_layers);
  EXPECT_EQ(cfg.train.steps, 17u);
  EXPECT_EQ(cfg.train.seed, 9u);
  EXPECT_EQ(cfg.task.seed, 9u);
  EXPECT_EQ(cfg.analysis.probe_len, 8u);

  flags.seed = 4;
  flags.enc = 5;
  flags.order = "v1";
  flags.init = "lipschitz";
  flags.task = "sort";
  cfg = resolve_config(flags);
  EXPECT_EQ(cfg.model.enc_layers, 5u);
  EXPECT_EQ(cfg.model.d_model, 32u);
  EXPECT_EQ(cfg.train.seed, 4u);
  EXPECT_EQ(cfg.task.seed, 4u);
  EXPECT_EQ(cfg.model.norm_order, NormOrder::V1);
  EXPECT_EQ(cfg.model.init_family, InitFamily::Lipschitz);
  EXPECT_EQ(cfg.task.kind, TaskKind::Sort);
}

TEST_F(CliTest, UnknownKeysAndBadFilesRejected) {
  EXPECT_THROW(cli_config_from_json({{"modle", nlohmann::json::object()}}), ConfigError);
  EXPECT_THROW(cli_config_from_json({{"model", {{"depth", 3}}}}), ConfigError);
  EXPECT_THROW(cli_config_from_json({{"analysis", {{"probe", 3}}}}), ConfigError);
  write("bad.json", "{ not json");
  EXPECT_THROW(load_cli_config_file(path("bad.json").string()), ConfigError);
  EXPECT_THROW(load_cli_config_file(path("missing.json").string()), ConfigError);
  const auto round = cli_config_from_json(to_json(CliConfig{}));
  EXPECT_EQ(to_json(round), to_json(CliConfig{}));
}

TEST_F(CliTest, OutDirFromFlagEnvOrDefault) {
  EXPECT_EQ(resolve_out_dir(std::string("x")), "x");
  ::setenv("DEEPNORM_OUT", "from-env", 1);
  EXPECT_EQ(resolve_out_dir(std::nullopt), "from-env");
  ::unsetenv("DEEPNORM_OUT");
  EXPECT_EQ(resolve_out_dir(std::nullopt), "deepnorm-out");
}

TEST_F(CliTest, ZeroLayersExitsTwoNamingField) {
  EXPECT_EQ(run("init-stats --enc 0 --out " + path("o").string()), kExitConfigError);
  EXPECT_NE(slurp(path("err.txt")).find("enc_layers"), std::string::npos) << slurp(path("err.txt"));
  EXPECT_EQ(run("init-stats --bogus"), kExitConfigError);
  write("bad.json", "[1, 2]");
  EXPECT_EQ(run("init-stats --config " + path("bad.json").string()), kExitConfigError);
}

TEST_F(CliTest, InitStatsDeterministicAndEchoesConfig) {
  const auto a = path("a").string(), b = path("b").string();
  const std::string args = " --order v1 --init lipschitz --enc 3 --dec 2 --seed 11";
  ASSERT_EQ(run("init-stats" + args + " --out " + a), kExitOk);
  ASSERT_EQ(run("init-stats" + args + " --out " + b), kExitOk);
  EXPECT_EQ(slurp(fs::path(a) / "stats.csv"), slurp(fs::path(b) / "stats.csv"));
  EXPECT_EQ(slurp(fs::path(a) / "stats.json"), slurp(fs::path(b) / "stats.json"));
  const auto j = nlohmann::json::parse(slurp(fs::path(a) / "stats.json"));
  EXPECT_EQ(j["config"]["model"]["enc_layers"], 3);
  EXPECT_EQ(j["config"]["train"]["seed"], 11);
  EXPECT_TRUE(j.contains("version"));
  EXPECT_EQ(j["stats"].size(), 3u * 2u + 2u * 3u);
  // A bound no sublayer can satisfy fails the assertion.
  EXPECT_EQ(run("init-stats" + args + " --assert-bound --sigma-bound 0.01 --out " + a), kExitCheckFailed);
}

TEST_F(CliTest, BoundCheckSuiteSingleAndValidation) {
  const auto out = path("o");
  ASSERT_EQ(run("bound-check --suite default --out " + out.string()), kExitOk);
  std::istringstream csv(slurp(out / "bound_check.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "distribution,a,b,n,empirical_std,exact_std,bound,margin,holds");
  std::size_t rows = 0;
  while (std::getline(csv, line)) rows += line.empty() ? 0 : 1;
  EXPECT_GE(rows, 20u);

  EXPECT_EQ(run("bound-check --a 1 --b 0 --out " + out.string()), kExitConfigError);

  ASSERT_EQ(run("bound-check --dist uniform --a 0 --b 1 --out " + out.string()), kExitOk);
  const auto j = nlohmann::json::parse(slurp(out / "bound_check.json"));
  ASSERT_EQ(j["rows"].size(), 1u);
  EXPECT_NEAR(j["rows"][0]["empirical_std"].get<double>(), 0.2887, 0.003);
}

TEST_F(CliTest, GradCheckPassesAndCatchesCorruption) {
  const auto out = path("o");
  ASSERT_EQ(run("grad-check --out " + out.string()), kExitOk);
  const auto j = nlohmann::json::parse(slurp(out / "grad_check.json"));
  EXPECT_LE(j["result"]["max_rel_error"].get<double>(), 1e-4);
  EXPECT_TRUE(j["result"]["passed"].get<bool>());
  EXPECT_EQ(run("grad-check --corrupt-grad enc.0.ffn.inner.weight --out " + out.string()), kExitCheckFailed);
  const auto bad = nlohmann::json::parse(slurp(out / "grad_check.json"));
  EXPECT_EQ(bad["result"]["worst_parameter"], "enc.0.ffn.inner.weight");
  EXPECT_FALSE(bad["result"]["passed"].get<bool>());
}

const char* kTinyTrain = " --enc 1 --dec 1 --d-model 16 --heads 2 --steps 6 --eval-every 3 --batch-tokens 256 --seed 5";

TEST_F(CliTest, TrainReportsAreByteIdenticalAndDecodeRuns) {
  const auto a = path("a"), b = path("b");
  // Not converged after a handful of steps: exit 3 with full reports.
  ASSERT_EQ(run(std::string("train") + kTinyTrain + " --out " + a.string()), kExitCheckFailed);
  ASSERT_EQ(run(std::string("train") + kTinyTrain + " --out " + b.string()), kExitCheckFailed);
  for (const char* f : {"run.json", "evals.csv", "stats.csv", "model.bin"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_TRUE(fs::exists(a / "timing.json"));
  const auto run_json = nlohmann::json::parse(slurp(a / "run.json"));
  EXPECT_EQ(run_json["verdict"], "undetermined");
  EXPECT_EQ(run_json["steps_completed"], 6);
  EXPECT_EQ(run_json["evals"].size(), 2u);
  EXPECT_EQ(run_json["config"]["model"]["d_model"], 16);

  write("inputs.txt", "5 6 7\t5 6 7\n9 8 10 11\n");
  ASSERT_EQ(run("decode --checkpoint " + (a / "model.bin").string() + " --input " + path("inputs.txt").string() +
                " --src \"4 4 4\" --max-len 6 --out " + a.string()),
            kExitOk);
  const auto decoded = nlohmann::json::parse(slurp(a / "decode.json"));
  ASSERT_EQ(decoded["results"].size(), 3u);
  for (const auto& r : decoded["results"]) EXPECT_LE(r["output"].size(), 6u);
  EXPECT_EQ(run("decode --checkpoint " + path("none.bin").string() + " --src \"4 5\""), kExitRuntimeError);
  EXPECT_EQ(run("decode --checkpoint " + (a / "model.bin").string() + " --src \"4 x\""), kExitConfigError);
}

TEST_F(CliTest, GridReportsAreByteIdentical) {
  const auto a = path("a"), b = path("b");
  const std::string args = " --depths 1,2 --orders v1,v2 --inits lipschitz --d-model 16 --heads 2 --steps 3"
                           " --batch-tokens 256 --seed 3";
  ASSERT_EQ(run("grid" + args + " --out " + a.string()), kExitOk);
  ASSERT_EQ(run("grid" + args + " --out " + b.string()), kExitOk);
  EXPECT_EQ(slurp(a / "grid.json"), slurp(b / "grid.json"));
  EXPECT_EQ(slurp(a / "grid.csv"), slurp(b / "grid.csv"));
  const auto j = nlohmann::json::parse(slurp(a / "grid.json"));
  EXPECT_EQ(j["matrix"].size(), 2u);
  EXPECT_EQ(j["columns"].size(), 2u);
  EXPECT_EQ(run("grid --depths 2,x --out " + a.string()), kExitConfigError);
}

}  // namespace
}  // namespace deepnorm
