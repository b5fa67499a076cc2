// Command-line entry point: dataset generation, training (separate/mixture),
// ablation plans, and analysis dumps. Every run writes a manifest with the
// fully resolved configuration and dataset hash before any training starts;
// rerunning with identical manifest inputs reproduces numeric outputs byte
// for byte. Exit codes: 0 success, 2 usage/config error, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mept/ablation.hpp"
#include "mept/analysis.hpp"
#include "mept/data.hpp"
#include "mept/serialize.hpp"
#include "mept/train.hpp"

#ifndef MEPT_REVISION
#define MEPT_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using mept::json;

namespace {

constexpr int kDatasetManifestVersion = 1;
constexpr int kRunManifestVersion = 1;

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string iso_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: task_<id>.jsonl per task + dataset_manifest.json

mept::GenRecipe recipe_from_json(const json& j) {
  mept::GenRecipe r;
  r.vocab_size = j.value("vocab_size", r.vocab_size);
  r.seq_len = j.value("seq_len", r.seq_len);
  r.n_train = j.value("n_train", r.n_train);
  r.n_dev = j.value("n_dev", r.n_dev);
  r.motif_len = j.value("motif_len", r.motif_len);
  r.seed = j.value("seed", r.seed);
  if (j.contains("families")) {
    r.families.clear();
    for (const json& f : j.at("families"))
      r.families.push_back({f.value("n_tasks", 2), f.value("n_classes", 2)});
  }
  return r;
}

json recipe_to_json(const mept::GenRecipe& r) {
  json j;
  j["vocab_size"] = r.vocab_size;
  j["seq_len"] = r.seq_len;
  j["n_train"] = r.n_train;
  j["n_dev"] = r.n_dev;
  j["motif_len"] = r.motif_len;
  j["seed"] = r.seed;
  json fams = json::array();
  for (const auto& f : r.families) fams.push_back({{"n_tasks", f.n_tasks}, {"n_classes", f.n_classes}});
  j["families"] = fams;
  return j;
}

void write_dataset_dir(const fs::path& dir, const mept::Dataset& ds,
                       const mept::GenRecipe& recipe) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = kDatasetManifestVersion;
  manifest["recipe"] = recipe_to_json(recipe);
  manifest["vocab_size"] = ds.vocab_size;
  manifest["seq_len"] = ds.seq_len;
  json tasks = json::array();
  for (const mept::TaskData& t : ds.tasks) {
    std::string file = "task_" + std::to_string(t.spec.task_id) + ".jsonl";
    mept::write_task_jsonl((dir / file).string(), t);
    json tj;
    tj["task"] = t.spec.task_id;
    tj["family"] = t.spec.family_id;
    tj["n_classes"] = t.spec.n_classes;
    tj["file"] = file;
    tj["n_train"] = t.train.size();
    tj["n_dev"] = t.dev.size();
    tj["motif_pos"] = t.spec.motif_pos;
    tj["class_motifs"] = t.spec.class_motifs;
    tj["motif_pool"] = t.spec.motif_pool;
    tj["pattern_seed"] = t.spec.pattern_seed;
    mept::Fnv1a64 h;
    h.update_i64(static_cast<int64_t>(mept::dataset_hash(t.train)));
    h.update_i64(static_cast<int64_t>(mept::dataset_hash(t.dev)));
    tj["hash"] = h.hex();
    tasks.push_back(std::move(tj));
  }
  manifest["tasks"] = std::move(tasks);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(mept::dataset_hash(ds)));
  manifest["dataset_hash"] = std::string(buf);
  mept::write_json_file((dir / "dataset_manifest.json").string(), manifest);
}

mept::Dataset load_dataset_dir(const fs::path& dir) {
  json manifest = mept::read_json_file((dir / "dataset_manifest.json").string());
  if (manifest.value("version", -1) != kDatasetManifestVersion)
    throw mept::IoError("unsupported dataset manifest version in " + dir.string());
  mept::Dataset ds;
  ds.vocab_size = manifest.at("vocab_size").get<int>();
  ds.seq_len = manifest.at("seq_len").get<int>();
  for (const json& tj : manifest.at("tasks")) {
    mept::TaskData td;
    td.spec.task_id = tj.at("task").get<int>();
    td.spec.family_id = tj.at("family").get<int>();
    td.spec.n_classes = tj.at("n_classes").get<int>();
    td.spec.motif_pos = tj.value("motif_pos", 0);
    td.spec.class_motifs = tj.value("class_motifs", std::vector<std::vector<int>>{});
    td.spec.motif_pool = tj.value("motif_pool", std::vector<int>{});
    td.spec.pattern_seed = tj.value("pattern_seed", uint64_t{0});
    auto all = mept::read_jsonl((dir / tj.at("file").get<std::string>()).string());
    size_t n_train = tj.at("n_train").get<size_t>();
    size_t n_dev = tj.at("n_dev").get<size_t>();
    if (all.size() != n_train + n_dev)
      throw mept::IoError("task file " + tj.at("file").get<std::string>() + " has " +
                          std::to_string(all.size()) + " lines, manifest expects " +
                          std::to_string(n_train + n_dev));
    td.train.assign(all.begin(), all.begin() + static_cast<long>(n_train));
    td.dev.assign(all.begin() + static_cast<long>(n_train), all.end());
    ds.tasks.push_back(std::move(td));
  }
  return ds;
}

std::string dataset_hash_hex(const mept::Dataset& ds) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(mept::dataset_hash(ds)));
  return buf;
}

// Fill unset model-config fields from the dataset; reject genuine mismatches.
mept::ModelConfig resolve_model_config(json model_json, const mept::Dataset& ds) {
  if (!model_json.contains("vocab_size")) model_json["vocab_size"] = ds.vocab_size;
  if (!model_json.contains("max_seq_len")) model_json["max_seq_len"] = ds.seq_len;
  if (!model_json.contains("n_classes")) model_json["n_classes"] = ds.max_classes();
  mept::ModelConfig cfg = mept::model_config_from_json(model_json);
  if (cfg.vocab_size < ds.vocab_size)
    throw mept::ValueError("config vocab_size " + std::to_string(cfg.vocab_size) +
                           " smaller than dataset vocab " + std::to_string(ds.vocab_size));
  if (cfg.max_seq_len < ds.seq_len)
    throw mept::ValueError("config max_seq_len " + std::to_string(cfg.max_seq_len) +
                           " smaller than dataset seq_len " + std::to_string(ds.seq_len));
  if (cfg.n_classes < ds.max_classes())
    throw mept::ValueError("config n_classes " + std::to_string(cfg.n_classes) +
                           " smaller than dataset classes " + std::to_string(ds.max_classes()));
  cfg.validate();
  return cfg;
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const json& resolved, const std::string& data_hash) {
  json m;
  m["version"] = kRunManifestVersion;
  m["command"] = command;
  m["revision"] = MEPT_REVISION;
  m["started"] = iso_now();
  m["config"] = resolved;
  m["dataset_hash"] = data_hash;
  mept::Fnv1a64 h;
  h.update(command);
  h.update(resolved.dump());
  h.update(data_hash);
  m["run_id"] = h.hex();
  mept::write_json_file((out_dir / "run_manifest.json").string(), m);
}

void write_train_log_jsonl(const fs::path& path, const mept::TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw mept::IoError("cannot open " + path.string() + " for writing");
  for (const auto& s : log.steps) {
    json j;
    j["type"] = "step";
    j["step"] = s.step;
    j["loss"] = s.loss;
    out << j.dump() << "\n";
  }
  for (const auto& e : log.evals) {
    json j;
    j["type"] = "eval";
    j["step"] = e.step;
    j["task_accuracy"] = e.task_accuracy;
    out << j.dump() << "\n";
  }
  if (!log.checkpoint.empty()) {
    json j;
    j["type"] = "checkpoint";
    j["path"] = log.checkpoint;
    out << j.dump() << "\n";
  }
}

void write_accuracy_csv(const fs::path& path, const std::vector<int>& task_ids,
                        const std::vector<double>& accuracy) {
  std::ofstream out(path);
  if (!out) throw mept::IoError("cannot open " + path.string() + " for writing");
  for (size_t i = 0; i < task_ids.size(); ++i) out << (i ? "," : "") << "task_" << task_ids[i];
  out << "\n";
  for (size_t i = 0; i < accuracy.size(); ++i) out << (i ? "," : "") << fmt_double(accuracy[i]);
  out << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_generate(const std::string& spec_path, const std::string& out_dir, int64_t seed_override) {
  mept::GenRecipe recipe;
  if (!spec_path.empty()) {
    if (!fs::exists(spec_path)) throw mept::IoError("spec file not found: " + spec_path);
    recipe = recipe_from_json(mept::read_json_file(spec_path));
  }
  if (seed_override >= 0) recipe.seed = static_cast<uint64_t>(seed_override);
  auto specs = mept::build_task_specs(recipe);
  mept::Dataset ds = mept::generate(specs, recipe.n_train, recipe.seq_len, recipe.seed,
                                    recipe.vocab_size, recipe.n_dev);
  write_dataset_dir(out_dir, ds, recipe);
  std::cout << "wrote " << ds.tasks.size() << " task files to " << out_dir << " (hash "
            << dataset_hash_hex(ds) << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& scheme_flag, const std::string& out_dir) {
  json cfg_json = config_path.empty() ? json::object() : mept::read_json_file(config_path);
  mept::Dataset ds = load_dataset_dir(data_dir);
  mept::ModelConfig mcfg = resolve_model_config(cfg_json.value("model", json::object()), ds);
  mept::TrainConfig tcfg = mept::train_config_from_json(cfg_json.value("train", json::object()));
  if (!scheme_flag.empty()) tcfg.scheme = mept::TrainConfig::parse_scheme(scheme_flag);
  tcfg.validate();

  fs::create_directories(out_dir);
  json resolved;
  resolved["model"] = mept::model_config_to_json(mcfg);
  resolved["train"] = mept::train_config_to_json(tcfg);
  write_run_manifest(out_dir, "train", resolved, dataset_hash_hex(ds));

  mept::SchemeResult result = mept::run_scheme(mcfg, tcfg, ds);

  std::vector<int> task_ids;
  for (const mept::TaskData& t : ds.tasks) task_ids.push_back(t.spec.task_id);
  if (tcfg.scheme == mept::TrainConfig::Scheme::Mixture) {
    std::string ckpt = (fs::path(out_dir) / "model.ckpt").string();
    mept::save_checkpoint(result.models[0], ckpt);
    result.logs[0].checkpoint = "model.ckpt";
    write_train_log_jsonl(fs::path(out_dir) / "train_log.jsonl", result.logs[0]);
  } else {
    for (size_t t = 0; t < result.models.size(); ++t) {
      fs::path task_dir = fs::path(out_dir) / ("task_" + std::to_string(task_ids[t]));
      fs::create_directories(task_dir);
      mept::save_checkpoint(result.models[t], (task_dir / "model.ckpt").string());
      result.logs[t].checkpoint = (task_dir / "model.ckpt").lexically_relative(out_dir).string();
      write_train_log_jsonl(task_dir / "train_log.jsonl", result.logs[t]);
    }
  }
  write_accuracy_csv(fs::path(out_dir) / "accuracy.csv", task_ids, result.eval.per_task);
  json summary;
  summary["version"] = 1;
  summary["per_task_accuracy"] = result.eval.per_task;
  summary["mean_accuracy"] = result.eval.mean;
  mept::write_json_file((fs::path(out_dir) / "summary.json").string(), summary);
  std::cout << "mean dev accuracy " << fmt_double(result.eval.mean) << "\n";
  return 0;
}

mept::AblationPlan plan_from_json(const json& j, const mept::Dataset& ds) {
  mept::AblationPlan plan;
  plan.base_model = resolve_model_config(j.value("model", json::object()), ds);
  plan.base_train = mept::train_config_from_json(j.value("train", json::object()));
  plan.axis = mept::parse_axis(j.value("axis", "routing_modes"));
  plan.n_seeds = j.value("n_seeds", 3);
  if (!j.contains("values")) throw mept::ValueError("ablation plan: missing 'values'");
  const json& values = j.at("values");
  switch (plan.axis) {
    case mept::AblationAxis::RoutingModes:
      if (values.is_string() && values.get<std::string>() == "variants") {
        plan.routing_values = mept::variant_configs();
      } else {
        for (const json& v : values) plan.routing_values.push_back(mept::routing_mode_from_json(v));
      }
      break;
    case mept::AblationAxis::DepthSets:
      for (const json& v : values) plan.depth_values.push_back(v.get<std::vector<int>>());
      break;
    case mept::AblationAxis::LearningSpaces:
      for (const json& v : values)
        plan.space_values.push_back({v.value("train_router", true), v.value("train_prompts", true)});
      break;
    case mept::AblationAxis::LengthExpertGrid:
      if (values.is_object()) {
        auto lens = values.at("prompt_lens").get<std::vector<int>>();
        auto routers = values.at("n_routers").get<std::vector<int>>();
        for (int m : lens)
          for (int nr : routers) plan.grid_values.push_back({m, nr});
      } else {
        for (const json& v : values)
          plan.grid_values.push_back({v.at("prompt_len").get<int>(), v.at("n_router").get<int>()});
      }
      break;
  }
  plan.validate();
  return plan;
}

int cmd_ablate(const std::string& plan_path, const std::string& data_dir,
               const std::string& out_dir) {
  json plan_json = mept::read_json_file(plan_path);
  mept::Dataset ds = load_dataset_dir(data_dir);
  mept::AblationPlan plan = plan_from_json(plan_json, ds);

  fs::create_directories(out_dir);
  json resolved;
  resolved["model"] = mept::model_config_to_json(plan.base_model);
  resolved["train"] = mept::train_config_to_json(plan.base_train);
  resolved["axis"] = mept::axis_name(plan.axis);
  resolved["n_seeds"] = plan.n_seeds;
  resolved["plan"] = plan_json;
  write_run_manifest(out_dir, "ablate", resolved, dataset_hash_hex(ds));

  mept::AblationReport report = mept::run_ablation(plan, ds);
  mept::write_ablation_csv(report, (fs::path(out_dir) / "cells.csv").string());
  json summary;
  summary["version"] = 1;
  json rows = json::array();
  for (const auto& s : report.summary)
    rows.push_back({{"cell", s.value_id}, {"mean", s.mean}, {"stddev", s.stddev}});
  summary["cells"] = std::move(rows);
  mept::write_json_file((fs::path(out_dir) / "summary.json").string(), summary);
  std::cout << report.summary.size() << " ablation cells -> " << out_dir << "\n";
  return 0;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& data_dir,
                const std::string& what, int layer, const std::string& out_dir) {
  mept::Model model = mept::load_checkpoint(ckpt_path);
  mept::Dataset ds = load_dataset_dir(data_dir);
  fs::create_directories(out_dir);

  std::vector<mept::Example> combined_dev;
  for (const mept::TaskData& t : ds.tasks)
    combined_dev.insert(combined_dev.end(), t.dev.begin(), t.dev.end());

  if (what == "pathways") {
    json out;
    out["version"] = 1;
    json tasks = json::array();
    std::vector<mept::PathwayRecord> records;
    for (const mept::TaskData& t : ds.tasks) {
      mept::PathwayRecord rec = mept::extract_pathway(model, t.dev);
      json tj;
      tj["task"] = t.spec.task_id;
      tj["family"] = t.spec.family_id;
      tj["layers"] = rec.layers;
      tj["mean_gate"] = rec.mean_gate;
      tj["argmax"] = rec.argmax;
      tasks.push_back(std::move(tj));
      records.push_back(std::move(rec));
    }
    out["tasks"] = std::move(tasks);
    json mae = json::array(), cosine = json::array();
    for (size_t i = 0; i < records.size(); ++i) {
      json mrow = json::array(), crow = json::array();
      for (size_t k = 0; k < records.size(); ++k) {
        mrow.push_back(mept::pathway_mae(records[i], records[k]));
        crow.push_back(mept::pathway_cosine(records[i], records[k]));
      }
      mae.push_back(std::move(mrow));
      cosine.push_back(std::move(crow));
    }
    out["pairwise_mae"] = std::move(mae);
    out["pairwise_cosine"] = std::move(cosine);
    mept::write_json_file((fs::path(out_dir) / "pathways.json").string(), out);
  } else if (what == "utilization") {
    mept::UtilizationTable table = mept::expert_utilization(model, combined_dev);
    json out;
    out["version"] = 1;
    out["layers"] = table.layers;
    out["rows"] = table.rows;
    mept::write_json_file((fs::path(out_dir) / "utilization.json").string(), out);
  } else if (what == "manifold") {
    // classes are (task, label) composites: the mixture's decision targets
    std::vector<int> class_ids;
    int max_classes = ds.max_classes();
    for (const mept::Example& e : combined_dev) class_ids.push_back(e.task * max_classes + e.label);
    mept::ManifoldReport report = mept::manifold_metrics(model, combined_dev, class_ids);
    json out;
    out["version"] = 1;
    json layers = json::array();
    for (const auto& m : report.per_layer)
      layers.push_back({{"layer", m.layer},
                        {"within", m.within_class_mean_dist},
                        {"between", m.between_class_mean_dist},
                        {"ratio", m.ratio}});
    out["per_layer"] = std::move(layers);
    out["warnings"] = report.warnings;
    mept::write_json_file((fs::path(out_dir) / "manifold.json").string(), out);
  } else if (what == "features") {
    int target = layer > 0 ? layer : model.config().n_layers;
    mept::export_features(model, combined_dev, target,
                          (fs::path(out_dir) / "features.csv").string());
  } else {
    std::cerr << "unknown --what value '" << what << "' (use pathways|utilization|manifold|features)\n";
    return 2;
  }
  std::cout << "wrote " << what << " analysis to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-expert prompt tuning experiments"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, config_path, data_dir, scheme, plan_path, ckpt_path;
  std::string what = "pathways";
  int64_t seed_override = -1;
  int layer = 0;

  CLI::App* gen = app.add_subcommand("generate", "Generate synthetic task datasets");
  gen->add_option("--spec", spec_path, "Dataset spec JSON (defaults to the built-in recipe)");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", seed_override, "Override the recipe seed");

  CLI::App* train = app.add_subcommand("train", "Train under the separate or mixture scheme");
  train->add_option("--config", config_path, "Model+train config JSON");
  train->add_option("--data", data_dir, "Dataset directory from `generate`")->required();
  train->add_option("--scheme", scheme, "separate|mixture (overrides config)");
  train->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation plan");
  ablate->add_option("--plan", plan_path, "Ablation plan JSON")->required();
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* analyze = app.add_subcommand("analyze", "Analyze a trained checkpoint");
  analyze->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  analyze->add_option("--data", data_dir, "Dataset directory")->required();
  analyze->add_option("--what", what, "pathways|utilization|manifold|features")->required();
  analyze->add_option("--layer", layer, "Layer for feature export (default: last)");
  analyze->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(spec_path, out_dir, seed_override);
    if (train->parsed()) return cmd_train(config_path, data_dir, scheme, out_dir);
    if (ablate->parsed()) return cmd_ablate(plan_path, data_dir, out_dir);
    if (analyze->parsed()) return cmd_analyze(ckpt_path, data_dir, what, layer, out_dir);
  } catch (const mept::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const mept::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
