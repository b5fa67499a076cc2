#pragma once

// JSON serialization: model/train configs (with defaults echoed back),
// checkpoints, and run manifests. All file schemas carry a version field.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mept/common.hpp"
#include "mept/model.hpp"
#include "mept/train.hpp"

namespace mept {

constexpr int kCheckpointVersion = 1;
constexpr int kConfigVersion = 1;

using nlohmann::json;

inline json routing_mode_to_json(const RoutingMode& mode) {
  json j;
  j["kind"] = mode.name();
  j["gumbel_temperature"] = mode.temperature;
  j["perturbation_sigma"] = mode.sigma;
  return j;
}

inline RoutingMode routing_mode_from_json(const json& j) {
  if (j.is_string()) return RoutingMode::parse(j.get<std::string>());
  return RoutingMode::parse(j.value("kind", "top1"), j.value("gumbel_temperature", 1.0),
                            j.value("perturbation_sigma", 1.0));
}

inline json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["n_layers"] = cfg.n_layers;
  j["hidden_dim"] = cfg.hidden_dim;
  j["n_heads"] = cfg.n_heads;
  j["ffn_mult"] = cfg.ffn_mult;
  j["vocab_size"] = cfg.vocab_size;
  j["max_seq_len"] = cfg.max_seq_len;
  j["n_classes"] = cfg.n_classes;
  j["prompt_len"] = cfg.prompt_len;
  j["n_router_experts"] = cfg.n_router_experts;
  j["n_shared_experts"] = cfg.n_shared_experts;
  j["prompt_layers"] = cfg.prompt_layers;
  j["routing_mode"] = routing_mode_to_json(cfg.routing_mode);
  j["init"] = init_name(cfg.init);
  j["activation"] = cfg.activation;
  j["dropout"] = cfg.dropout;
  j["seed"] = cfg.seed;
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig d = ModelConfig::defaults();
  ModelConfig cfg;
  cfg.n_layers = j.value("n_layers", d.n_layers);
  cfg.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  cfg.n_heads = j.value("n_heads", d.n_heads);
  cfg.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  cfg.vocab_size = j.value("vocab_size", d.vocab_size);
  cfg.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  cfg.n_classes = j.value("n_classes", d.n_classes);
  cfg.prompt_len = j.value("prompt_len", d.prompt_len);
  cfg.n_router_experts = j.value("n_router_experts", d.n_router_experts);
  cfg.n_shared_experts = j.value("n_shared_experts", d.n_shared_experts);
  cfg.prompt_layers = j.value("prompt_layers", d.prompt_layers);
  if (j.contains("routing_mode")) cfg.routing_mode = routing_mode_from_json(j.at("routing_mode"));
  cfg.init = parse_init(j.value("init", init_name(d.init)));
  cfg.activation = j.value("activation", d.activation);
  cfg.dropout = j.value("dropout", d.dropout);
  cfg.seed = j.value("seed", d.seed);
  return cfg;
}

inline json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["optimizer"] = cfg.optimizer == TrainConfig::Optimizer::Adam ? "adam" : "sgd";
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["scheme"] = TrainConfig::scheme_name(cfg.scheme);
  j["grad_clip"] = cfg.grad_clip;
  j["eval_every"] = cfg.eval_every;
  j["seed"] = cfg.seed;
  j["train_router"] = cfg.train_router;
  j["train_prompts"] = cfg.train_prompts;
  return j;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig d;
  TrainConfig cfg;
  cfg.epochs = j.value("epochs", d.epochs);
  cfg.batch_size = j.value("batch_size", d.batch_size);
  cfg.learning_rate = j.value("learning_rate", d.learning_rate);
  std::string opt = j.value("optimizer", "adam");
  if (opt == "adam")
    cfg.optimizer = TrainConfig::Optimizer::Adam;
  else if (opt == "sgd")
    cfg.optimizer = TrainConfig::Optimizer::Sgd;
  else
    throw ValueError("unknown optimizer '" + opt + "'");
  cfg.beta1 = j.value("beta1", d.beta1);
  cfg.beta2 = j.value("beta2", d.beta2);
  cfg.adam_eps = j.value("adam_eps", d.adam_eps);
  cfg.scheme = TrainConfig::parse_scheme(j.value("scheme", "mixture"));
  cfg.grad_clip = j.value("grad_clip", d.grad_clip);
  cfg.eval_every = j.value("eval_every", d.eval_every);
  cfg.seed = j.value("seed", d.seed);
  cfg.train_router = j.value("train_router", d.train_router);
  cfg.train_prompts = j.value("train_prompts", d.train_prompts);
  return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const Model& model, const std::string& path) {
  json j;
  j["version"] = kCheckpointVersion;
  j["model_config"] = model_config_to_json(model.config());
  json params = json::object();
  for (const NamedParam& p : model.parameters()) {
    json t;
    t["shape"] = p.tensor.shape();
    t["data"] = p.tensor.values();
    params[p.name] = std::move(t);
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump();
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint ") + path + ": " + e.what());
  }
  int version = j.value("version", -1);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint " + path + " has unsupported version " + std::to_string(version));
  Model model(model_config_from_json(j.at("model_config")));
  const json& params = j.at("params");
  for (NamedParam& p : model.parameters()) {
    if (!params.contains(p.name)) throw IoError("checkpoint missing parameter " + p.name);
    const json& t = params.at(p.name);
    auto shape = t.at("shape").get<std::vector<int>>();
    if (shape != p.tensor.shape())
      throw IoError("checkpoint parameter " + p.name + " has shape mismatch");
    auto data = t.at("data").get<std::vector<double>>();
    if (data.size() != p.tensor.numel())
      throw IoError("checkpoint parameter " + p.name + " has wrong element count");
    p.tensor.values_mut() = std::move(data);
  }
  return model;
}

inline uint64_t params_hash(const Model& model) {
  Fnv1a64 h;
  for (const NamedParam& p : model.parameters()) {
    h.update(p.name);
    h.update(p.tensor.values().data(), p.tensor.numel() * sizeof(double));
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Generic JSON file helpers

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed JSON in ") + path + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const std::string& path, const json& j, int indent = 2) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(indent) << "\n";
}

}  // namespace mept
