// End-to-end tests driving the built CLI binary as a subprocess.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string(MEPT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("mept_cli_" + std::to_string(::getpid()));
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path write_json(const std::string& name, const json& j) {
    fs::path p = root_ / name;
    std::ofstream out(p);
    out << j.dump(2);
    return p;
  }

  // small dataset + config so trained runs stay fast
  fs::path tiny_data(const std::string& name = "data", int n_tasks = 3) {
    json spec = {{"vocab_size", 64}, {"seq_len", 8},  {"n_train", 16},
                 {"n_dev", 8},       {"motif_len", 2}, {"seed", 11},
                 {"families", json::array({{{"n_tasks", n_tasks}, {"n_classes", 2}}})}};
    fs::path spec_path = write_json("spec_" + name + ".json", spec);
    fs::path data = root_ / name;
    EXPECT_EQ(run_cli("generate --spec " + spec_path.string() + " --out " + data.string()), 0);
    return data;
  }

  json tiny_model_json(int n_router = 2, int n_shared = 1) {
    return {{"n_layers", 2},   {"hidden_dim", 16},          {"n_heads", 2},
            {"prompt_len", 2}, {"n_router_experts", n_router}, {"n_shared_experts", n_shared},
            {"prompt_layers", json::array({1, 2})}, {"seed", 7}};
  }

  fs::path root_;
};

}  // namespace

TEST_F(CliTest, GenerateDefaultSpecWritesSixTaskFilesAndManifest) {
  fs::path out = root_ / "default_data";
  ASSERT_EQ(run_cli("generate --out " + out.string() + " --seed 3"), 0);
  int task_files = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().filename().string().rfind("task_", 0) == 0) ++task_files;
  EXPECT_EQ(task_files, 6);
  ASSERT_TRUE(fs::exists(out / "dataset_manifest.json"));
  json manifest = json::parse(slurp(out / "dataset_manifest.json"));
  EXPECT_EQ(manifest["version"], 1);
  EXPECT_EQ(manifest["tasks"].size(), 6u);
}

TEST_F(CliTest, GenerateIsDeterministicUnderSeed) {
  fs::path a = root_ / "a", b = root_ / "b", c = root_ / "c";
  json spec = {{"vocab_size", 64}, {"seq_len", 8}, {"n_train", 8}, {"n_dev", 4},
               {"families", json::array({{{"n_tasks", 1}, {"n_classes", 2}}})}};
  fs::path spec_path = write_json("spec.json", spec);
  ASSERT_EQ(run_cli("generate --spec " + spec_path.string() + " --seed 5 --out " + a.string()), 0);
  ASSERT_EQ(run_cli("generate --spec " + spec_path.string() + " --seed 5 --out " + b.string()), 0);
  ASSERT_EQ(run_cli("generate --spec " + spec_path.string() + " --seed 6 --out " + c.string()), 0);
  json ma = json::parse(slurp(a / "dataset_manifest.json"));
  json mb = json::parse(slurp(b / "dataset_manifest.json"));
  json mc = json::parse(slurp(c / "dataset_manifest.json"));
  EXPECT_EQ(ma["dataset_hash"], mb["dataset_hash"]);
  EXPECT_NE(ma["dataset_hash"], mc["dataset_hash"]);
}

TEST_F(CliTest, MissingOrMalformedSpecExitsTwo) {
  EXPECT_EQ(run_cli("generate --spec /nonexistent.json --out " + (root_ / "x").string()), 2);
  fs::path bad = root_ / "bad.json";
  std::ofstream(bad) << "{not json";
  EXPECT_EQ(run_cli("generate --spec " + bad.string() + " --out " + (root_ / "y").string()), 2);
  EXPECT_EQ(run_cli("generate"), 2);  // missing required --out
}

TEST_F(CliTest, TrainSeparateWritesOneCheckpointPerTask) {
  fs::path data = tiny_data();
  fs::path cfg = write_json("cfg.json", {{"model", tiny_model_json()},
                                         {"train", {{"epochs", 1}, {"batch_size", 8}}}});
  fs::path out = root_ / "run_sep";
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --data " + data.string() +
                    " --scheme separate --out " + out.string()),
            0);
  EXPECT_TRUE(fs::exists(out / "run_manifest.json"));
  for (int t = 0; t < 3; ++t)
    EXPECT_TRUE(fs::exists(out / ("task_" + std::to_string(t)) / "model.ckpt"));
  std::string csv = slurp(out / "accuracy.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task_0,task_1,task_2");
}

TEST_F(CliTest, TrainMixtureWritesSingleCheckpointAndPerTaskColumns) {
  fs::path data = tiny_data();
  fs::path cfg = write_json("cfg.json", {{"model", tiny_model_json()},
                                         {"train", {{"epochs", 1}, {"batch_size", 8}}}});
  fs::path out = root_ / "run_mix";
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --data " + data.string() +
                    " --scheme mixture --out " + out.string()),
            0);
  EXPECT_TRUE(fs::exists(out / "model.ckpt"));
  EXPECT_FALSE(fs::exists(out / "task_0"));
  std::string csv = slurp(out / "accuracy.csv");
  std::string header = csv.substr(0, csv.find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 2);  // 3 columns
  json manifest = json::parse(slurp(out / "run_manifest.json"));
  EXPECT_EQ(manifest["config"]["train"]["scheme"], "mixture");
  EXPECT_TRUE(manifest.contains("dataset_hash"));
  EXPECT_TRUE(manifest.contains("run_id"));
}

TEST_F(CliTest, RerunFromIdenticalInputsReproducesAccuracyCsv) {
  fs::path data = tiny_data();
  fs::path cfg = write_json("cfg.json", {{"model", tiny_model_json()},
                                         {"train", {{"epochs", 1}, {"batch_size", 8}}}});
  fs::path out1 = root_ / "r1", out2 = root_ / "r2";
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --data " + data.string() +
                    " --scheme mixture --out " + out1.string()),
            0);
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --data " + data.string() +
                    " --scheme mixture --out " + out2.string()),
            0);
  EXPECT_EQ(slurp(out1 / "accuracy.csv"), slurp(out2 / "accuracy.csv"));
  EXPECT_EQ(slurp(out1 / "train_log.jsonl"), slurp(out2 / "train_log.jsonl"));
}

TEST_F(CliTest, VocabMismatchExitsTwo) {
  fs::path data = tiny_data();
  json model = tiny_model_json();
  model["vocab_size"] = 8;  // dataset needs 64
  fs::path cfg = write_json("cfg.json", {{"model", model}});
  EXPECT_EQ(run_cli("train --config " + cfg.string() + " --data " + data.string() + " --out " +
                    (root_ / "bad_run").string()),
            2);
}

TEST_F(CliTest, AnalyzePathwaysOnSingleExpertCheckpoint) {
  fs::path data = tiny_data("pdata", 2);
  fs::path cfg = write_json("cfg.json", {{"model", tiny_model_json(1, 0)},
                                         {"train", {{"epochs", 1}, {"batch_size", 8}}}});
  fs::path run = root_ / "run";
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --data " + data.string() +
                    " --scheme mixture --out " + run.string()),
            0);
  fs::path out = root_ / "analysis";
  ASSERT_EQ(run_cli("analyze --ckpt " + (run / "model.ckpt").string() + " --data " +
                    data.string() + " --what pathways --out " + out.string()),
            0);
  json pathways = json::parse(slurp(out / "pathways.json"));
  ASSERT_EQ(pathways["tasks"].size(), 2u);
  for (const auto& t : pathways["tasks"])
    for (int a : t["argmax"].get<std::vector<int>>()) EXPECT_EQ(a, 0);
  // every pairwise cosine of identical one-expert pathways is 1
  for (const auto& row : pathways["pairwise_cosine"])
    for (double v : row.get<std::vector<double>>()) EXPECT_NEAR(v, 1.0, 1e-12);

  for (std::string what : {"utilization", "manifold", "features"}) {
    ASSERT_EQ(run_cli("analyze --ckpt " + (run / "model.ckpt").string() + " --data " +
                      data.string() + " --what " + what + " --out " + out.string()),
              0)
        << what;
  }
  EXPECT_TRUE(fs::exists(out / "utilization.json"));
  EXPECT_TRUE(fs::exists(out / "manifold.json"));
  EXPECT_TRUE(fs::exists(out / "features.csv"));

  EXPECT_EQ(run_cli("analyze --ckpt " + (run / "model.ckpt").string() + " --data " +
                    data.string() + " --what tsne --out " + out.string()),
            2);
}

TEST_F(CliTest, AblateVariantsProducesSevenRowSummary) {
  fs::path data = tiny_data("abdata", 1);
  json plan = {{"model", tiny_model_json()},
               {"train", {{"epochs", 1}, {"batch_size", 8}}},
               {"axis", "routing_modes"},
               {"values", "variants"},
               {"n_seeds", 1}};
  fs::path plan_path = write_json("plan.json", plan);
  fs::path out = root_ / "ablate";
  ASSERT_EQ(run_cli("ablate --plan " + plan_path.string() + " --data " + data.string() +
                    " --out " + out.string()),
            0);
  json summary = json::parse(slurp(out / "summary.json"));
  EXPECT_EQ(summary["cells"].size(), 7u);
  std::string csv = slurp(out / "cells.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);  // header + 7 cells

  json empty_plan = plan;
  empty_plan["values"] = json::array();
  fs::path empty_path = write_json("empty_plan.json", empty_plan);
  EXPECT_EQ(run_cli("ablate --plan " + empty_path.string() + " --data " + data.string() +
                    " --out " + (root_ / "ablate2").string()),
            2);
}
