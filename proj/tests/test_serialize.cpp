#include "mept/serialize.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace mept;

namespace {

ModelConfig checkpoint_model() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_dim = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 8;
  cfg.n_classes = 3;
  cfg.prompt_len = 2;
  cfg.n_router_experts = 3;
  cfg.n_shared_experts = 1;
  cfg.prompt_layers = {2};
  cfg.routing_mode = RoutingMode::gumbel(0.5);
  cfg.seed = 19;
  return cfg;
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesParamsAndForward) {
  auto dir = std::filesystem::temp_directory_path() / "mept_ckpt_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "model.ckpt").string();

  Model model(checkpoint_model());
  // make the state differ from a fresh init
  for (NamedParam& p : model.parameters())
    if (p.name == "head.bias") p.tensor.values_mut()[0] = 0.3125;
  save_checkpoint(model, path);
  Model loaded = load_checkpoint(path);

  EXPECT_EQ(params_hash(model), params_hash(loaded));
  EXPECT_EQ(loaded.config().routing_mode.kind, RoutingMode::Kind::GumbelSoftmax);
  EXPECT_DOUBLE_EQ(loaded.config().routing_mode.temperature, 0.5);

  Batch batch = make_batch({{{1, 2, 3}, 0, 0}, {{4, 5, 6}, 1, 0}}, 3);
  Rng r1(2), r2(2);
  EXPECT_EQ(model.forward(batch, false, r1).logits.values(),
            loaded.forward(batch, false, r2).logits.values());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptOrWrongVersionFiles) {
  auto dir = std::filesystem::temp_directory_path() / "mept_ckpt_test2";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "model.ckpt").string();
  {
    std::ofstream out(path);
    out << "{not json";
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
  {
    std::ofstream out(path);
    out << R"({"version": 99, "model_config": {}, "params": {}})";
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), IoError);
  std::filesystem::remove_all(dir);
}

TEST(ConfigJson, RoundTripsAllFields) {
  ModelConfig cfg = checkpoint_model();
  cfg.activation = "relu";
  cfg.init = InitScheme::HeNormal;
  cfg.dropout = 0.25;
  ModelConfig back = model_config_from_json(model_config_to_json(cfg));
  EXPECT_EQ(back.n_layers, cfg.n_layers);
  EXPECT_EQ(back.hidden_dim, cfg.hidden_dim);
  EXPECT_EQ(back.prompt_layers, cfg.prompt_layers);
  EXPECT_EQ(back.routing_mode.kind, cfg.routing_mode.kind);
  EXPECT_DOUBLE_EQ(back.routing_mode.temperature, cfg.routing_mode.temperature);
  EXPECT_EQ(back.activation, "relu");
  EXPECT_EQ(back.init, InitScheme::HeNormal);
  EXPECT_DOUBLE_EQ(back.dropout, 0.25);
  EXPECT_EQ(back.seed, cfg.seed);

  TrainConfig t;
  t.epochs = 9;
  t.learning_rate = 5e-4;
  t.optimizer = TrainConfig::Optimizer::Sgd;
  t.scheme = TrainConfig::Scheme::Separate;
  t.train_router = false;
  TrainConfig tback = train_config_from_json(train_config_to_json(t));
  EXPECT_EQ(tback.epochs, 9);
  EXPECT_DOUBLE_EQ(tback.learning_rate, 5e-4);
  EXPECT_EQ(tback.optimizer, TrainConfig::Optimizer::Sgd);
  EXPECT_EQ(tback.scheme, TrainConfig::Scheme::Separate);
  EXPECT_FALSE(tback.train_router);

  // defaults fill missing fields
  ModelConfig defaults = model_config_from_json(json::object());
  EXPECT_EQ(defaults.hidden_dim, ModelConfig::defaults().hidden_dim);
  EXPECT_THROW(train_config_from_json(json{{"optimizer", "adagrad"}}), ValueError);
}
