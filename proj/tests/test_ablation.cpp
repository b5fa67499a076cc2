#include "mept/ablation.hpp"

#include <gtest/gtest.h>

#include "mept/serialize.hpp"

using namespace mept;

namespace {

Dataset ablation_dataset() {
  GenRecipe r;
  r.vocab_size = 64;
  r.seq_len = 8;
  r.n_train = 16;
  r.n_dev = 8;
  r.families = {{2, 2}};
  r.seed = 17;
  return generate(build_task_specs(r), r.n_train, r.seq_len, r.seed, r.vocab_size, r.n_dev);
}

AblationPlan base_plan() {
  AblationPlan plan;
  plan.base_model.n_layers = 2;
  plan.base_model.hidden_dim = 16;
  plan.base_model.n_heads = 2;
  plan.base_model.vocab_size = 64;
  plan.base_model.max_seq_len = 8;
  plan.base_model.n_classes = 2;
  plan.base_model.prompt_len = 2;
  plan.base_model.n_router_experts = 2;
  plan.base_model.n_shared_experts = 1;
  plan.base_model.prompt_layers = {1, 2};
  plan.base_model.seed = 5;
  plan.base_train.epochs = 1;
  plan.base_train.batch_size = 8;
  plan.base_train.seed = 5;
  plan.n_seeds = 1;
  return plan;
}

}  // namespace

TEST(VariantConfigs, SevenTableConfigurations) {
  auto variants = variant_configs();
  ASSERT_EQ(variants.size(), 7u);
  EXPECT_EQ(variants[0].kind, RoutingMode::Kind::Top1);
  EXPECT_EQ(variants[3].kind, RoutingMode::Kind::GumbelSoftmax);
  EXPECT_DOUBLE_EQ(variants[3].temperature, 1.0);
  EXPECT_EQ(variants[4].kind, RoutingMode::Kind::Perturbation);
  EXPECT_DOUBLE_EQ(variants[4].sigma, 1.0);
  EXPECT_EQ(variants[5].kind, RoutingMode::Kind::NoShared);
  EXPECT_EQ(variants[6].kind, RoutingMode::Kind::ReplaceShared);
}

TEST(Ablation, FrozenRouterKeepsInitBitForBit) {
  Dataset ds = ablation_dataset();
  AblationPlan plan = base_plan();

  Model trained(plan.base_model);
  Model reference(plan.base_model);  // same seed -> identical init
  TrainConfig tcfg = plan.base_train;
  tcfg.train_router = false;
  MixtureDataset mix = make_mixture(ds);
  train(trained, mix.train, mix.dev, tcfg);

  for (int layer : plan.base_model.prompt_layers) {
    EXPECT_EQ(trained.mept_layer(layer).router_weight.values(),
              reference.mept_layer(layer).router_weight.values());
    EXPECT_EQ(trained.mept_layer(layer).router_bias.values(),
              reference.mept_layer(layer).router_bias.values());
    // prompts did move
    EXPECT_NE(trained.mept_layer(layer).router_experts.values(),
              reference.mept_layer(layer).router_experts.values());
  }

  // and the complementary freeze
  Model trained2(plan.base_model);
  TrainConfig tcfg2 = plan.base_train;
  tcfg2.train_prompts = false;
  train(trained2, mix.train, mix.dev, tcfg2);
  for (int layer : plan.base_model.prompt_layers) {
    EXPECT_EQ(trained2.mept_layer(layer).router_experts.values(),
              reference.mept_layer(layer).router_experts.values());
    EXPECT_NE(trained2.mept_layer(layer).router_weight.values(),
              reference.mept_layer(layer).router_weight.values());
  }
}

TEST(Ablation, DegenerateDepthPlanEqualsPlainRun) {
  Dataset ds = ablation_dataset();
  AblationPlan plan = base_plan();
  plan.axis = AblationAxis::DepthSets;
  plan.depth_values = {{1, 2}};  // same as the base config
  AblationReport report = run_ablation(plan, ds);
  ASSERT_EQ(report.cells.size(), 1u);

  SchemeResult plain = run_scheme(plan.base_model, plan.base_train, ds);
  EXPECT_EQ(report.cells[0].mean_accuracy, plain.eval.mean);
  EXPECT_EQ(report.cells[0].per_task_accuracy, plain.eval.per_task);
}

TEST(Ablation, GridHasOneCellPerPoint) {
  Dataset ds = ablation_dataset();
  AblationPlan plan = base_plan();
  plan.axis = AblationAxis::LengthExpertGrid;
  plan.grid_values = {{4, 2}, {4, 4}, {8, 2}, {8, 4}};
  plan.n_seeds = 2;
  AblationReport report = run_ablation(plan, ds);
  EXPECT_EQ(report.cells.size(), 8u);
  EXPECT_EQ(report.summary.size(), 4u);
  EXPECT_EQ(report.summary[0].value_id, "m4_nr2");
  EXPECT_EQ(report.summary[3].value_id, "m8_nr4");
}

TEST(Ablation, LearningSpaceAxisRunsBothFreezes) {
  Dataset ds = ablation_dataset();
  AblationPlan plan = base_plan();
  plan.axis = AblationAxis::LearningSpaces;
  plan.space_values = {{true, true}, {false, true}, {true, false}};
  AblationReport report = run_ablation(plan, ds);
  ASSERT_EQ(report.summary.size(), 3u);
  EXPECT_EQ(report.summary[0].value_id, "router+prompt");
  EXPECT_EQ(report.summary[1].value_id, "prompt_only");
  EXPECT_EQ(report.summary[2].value_id, "router_only");
}

TEST(Ablation, ReproducibleAcrossRunsAndThreadCounts) {
  Dataset ds = ablation_dataset();
  AblationPlan plan = base_plan();
  plan.axis = AblationAxis::RoutingModes;
  plan.routing_values = {RoutingMode::top1(), RoutingMode::dense()};
  plan.n_seeds = 2;
  AblationReport a = run_ablation(plan, ds);
  AblationReport b = run_ablation(plan, ds);
  ASSERT_EQ(a.cells.size(), b.cells.size());
  for (size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].value_id, b.cells[i].value_id);
    EXPECT_EQ(a.cells[i].mean_accuracy, b.cells[i].mean_accuracy);
    EXPECT_EQ(a.cells[i].per_task_accuracy, b.cells[i].per_task_accuracy);
  }
}

TEST(Ablation, PlanValidation) {
  AblationPlan plan = base_plan();
  plan.axis = AblationAxis::RoutingModes;
  EXPECT_THROW(plan.validate(), ValueError);  // empty values

  plan.routing_values = {RoutingMode::top1()};
  plan.n_seeds = 0;
  EXPECT_THROW(plan.validate(), ValueError);

  plan.n_seeds = 1;
  plan.axis = AblationAxis::DepthSets;
  plan.depth_values = {{1, 9}};  // out of range for 2 layers
  EXPECT_THROW(plan.validate(), ValueError);
}

TEST(Ablation, CsvShape) {
  AblationReport report;
  report.cells = {{"top1", 0, 0.75, {0.75}}, {"top1", 1, 0.5, {0.5}}};
  std::ostringstream out;
  write_ablation_csv(report, out);
  EXPECT_EQ(out.str(), "cell,seed,accuracy\ntop1,0,0.75\ntop1,1,0.5\n");
}
