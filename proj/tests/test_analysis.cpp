#include "mept/analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mept/rng.hpp"

using namespace mept;

namespace {

ModelConfig analysis_model(int n_router = 1, int n_shared = 0) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_dim = 8;
  cfg.n_heads = 2;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  cfg.n_classes = 2;
  cfg.prompt_len = 2;
  cfg.n_router_experts = n_router;
  cfg.n_shared_experts = n_shared;
  cfg.prompt_layers = {1, 2};
  cfg.seed = 8;
  return cfg;
}

std::vector<Example> toy_examples(int n, int seq_len, uint64_t seed, int task = 0) {
  Rng rng(seed);
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    Example e;
    e.task = task;
    e.label = i % 2;
    for (int s = 0; s < seq_len; ++s) e.tokens.push_back(1 + rng.uniform_int(14));
    out.push_back(std::move(e));
  }
  return out;
}

PathwayRecord record_from(std::vector<std::vector<double>> gates) {
  PathwayRecord r;
  for (size_t i = 0; i < gates.size(); ++i) {
    r.layers.push_back(static_cast<int>(i) + 1);
    r.argmax.push_back(argmax_lowest(gates[i].data(), static_cast<int>(gates[i].size())));
    r.mean_gate.push_back(std::move(gates[i]));
  }
  return r;
}

}  // namespace

TEST(Pathway, SingleExpertIsAlwaysExpertZero) {
  Model model(analysis_model(1, 0));
  auto ex = toy_examples(6, 5, 3);
  PathwayRecord rec = extract_pathway(model, ex);
  ASSERT_EQ(rec.layers, (std::vector<int>{1, 2}));
  for (size_t li = 0; li < rec.layers.size(); ++li) {
    EXPECT_EQ(rec.argmax[li], 0);
    EXPECT_NEAR(rec.mean_gate[li][0], 1.0, 1e-12);
  }
}

TEST(Pathway, ZeroRouterGivesUniformMeanGateArgmaxZero) {
  ModelConfig cfg = analysis_model(4, 0);
  Model model(cfg);
  for (NamedParam& p : model.parameters())
    if (p.name.find("router_weight") != std::string::npos)
      std::fill(p.tensor.values_mut().begin(), p.tensor.values_mut().end(), 0.0);
  auto ex = toy_examples(6, 5, 4);
  PathwayRecord rec = extract_pathway(model, ex);
  for (size_t li = 0; li < rec.layers.size(); ++li) {
    EXPECT_EQ(rec.argmax[li], 0) << "tie breaks to lowest index";
    for (double g : rec.mean_gate[li]) EXPECT_NEAR(g, 0.25, 1e-12);
  }
}

TEST(Pathway, DuplicatedDatasetGivesIdenticalRecord) {
  Model model(analysis_model(3, 1));
  auto ex = toy_examples(5, 5, 5);
  auto doubled = ex;
  doubled.insert(doubled.end(), ex.begin(), ex.end());
  PathwayRecord a = extract_pathway(model, ex);
  PathwayRecord b = extract_pathway(model, doubled);
  ASSERT_EQ(a.mean_gate.size(), b.mean_gate.size());
  for (size_t li = 0; li < a.mean_gate.size(); ++li)
    for (size_t i = 0; i < a.mean_gate[li].size(); ++i)
      EXPECT_NEAR(a.mean_gate[li][i], b.mean_gate[li][i], 1e-12);
  EXPECT_EQ(a.argmax, b.argmax);
}

TEST(Pathway, MeanGateRowsSumToOne) {
  Model model(analysis_model(4, 1));
  auto ex = toy_examples(9, 5, 6);
  PathwayRecord rec = extract_pathway(model, ex);
  for (const auto& g : rec.mean_gate) {
    double s = 0.0;
    for (double v : g) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(PathwayMae, HandValuesAndProperties) {
  PathwayRecord x = record_from({{1, 0, 0}});
  PathwayRecord y = record_from({{0, 1, 0}});
  EXPECT_DOUBLE_EQ(pathway_mae(x, x), 0.0);
  EXPECT_NEAR(pathway_mae(x, y), 2.0 / 3.0, 1e-15);

  Rng rng(71);
  auto random_record = [&]() {
    std::vector<std::vector<double>> gates;
    for (int l = 0; l < 3; ++l) {
      std::vector<double> g(4);
      double s = 0.0;
      for (double& v : g) {
        v = rng.uniform() + 1e-3;
        s += v;
      }
      for (double& v : g) v /= s;
      gates.push_back(std::move(g));
    }
    return record_from(std::move(gates));
  };
  for (int trial = 0; trial < 25; ++trial) {
    PathwayRecord a = random_record(), b = random_record(), c = random_record();
    double ab = pathway_mae(a, b), ba = pathway_mae(b, a);
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(pathway_mae(a, c), ab + pathway_mae(b, c) + 1e-12) << "triangle inequality";
  }
  PathwayRecord mismatched = record_from({{1, 0}});
  EXPECT_THROW(pathway_mae(x, mismatched), ShapeError);
}

TEST(PathwayCosine, HandValuesAndScaleInvariance) {
  PathwayRecord x = record_from({{1, 0, 0}});
  PathwayRecord y = record_from({{0, 1, 0}});
  EXPECT_DOUBLE_EQ(pathway_cosine(x, x), 1.0);
  EXPECT_DOUBLE_EQ(pathway_cosine(x, y), 0.0);

  PathwayRecord scaled = record_from({{2, 0, 0}});  // raw vector, twice the length
  EXPECT_NEAR(pathway_cosine(x, scaled), 1.0, 1e-15);

  PathwayRecord zero = record_from({{0, 0, 0}});
  EXPECT_THROW(pathway_cosine(x, zero), ValueError);

  Rng rng(72);
  std::vector<double> g = {0.4, 0.3, 0.3};
  PathwayRecord r = record_from({{g[0], g[1], g[2]}});
  EXPECT_NEAR(pathway_cosine(r, r), 1.0, 1e-15);
}

TEST(Utilization, SingleExpertRowIsOne) {
  Model model(analysis_model(1, 0));
  auto ex = toy_examples(7, 5, 7);
  UtilizationTable t = expert_utilization(model, ex);
  for (const auto& row : t.rows) {
    ASSERT_EQ(row.size(), 1u);
    EXPECT_DOUBLE_EQ(row[0], 1.0);
  }
}

TEST(Utilization, ConstructedAlternatingRoutes) {
  // one prompted layer, router steered by two opposite token embeddings
  ModelConfig cfg = analysis_model(2, 0);
  cfg.n_layers = 1;
  cfg.prompt_layers = {1};
  Model model(cfg);
  int d = cfg.hidden_dim;
  for (NamedParam& p : model.parameters()) {
    if (p.name == "token_embedding") {
      auto& v = p.tensor.values_mut();
      for (int j = 0; j < d; ++j) {
        v[1 * d + j] = j == 0 ? 4.0 : 0.0;   // token 1 -> +e0
        v[2 * d + j] = j == 0 ? -4.0 : 0.0;  // token 2 -> -e0
      }
    } else if (p.name == "layer1.mept.router_weight") {
      auto& v = p.tensor.values_mut();
      std::fill(v.begin(), v.end(), 0.0);
      v[0 * 2 + 0] = 1.0;   // logit0 = +x0
      v[0 * 2 + 1] = -1.0;  // logit1 = -x0
    }
  }
  std::vector<Example> ex = {{{1}, 0, 0}, {{2}, 1, 0}};
  UtilizationTable t = expert_utilization(model, ex);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_DOUBLE_EQ(t.rows[0][0], 0.5);
  EXPECT_DOUBLE_EQ(t.rows[0][1], 0.5);
}

TEST(Utilization, RowsAlwaysSumToOne) {
  Model model(analysis_model(4, 1));
  auto ex = toy_examples(11, 5, 8);
  UtilizationTable t = expert_utilization(model, ex);
  for (const auto& row : t.rows) {
    double s = 0.0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Utilization, DenseModeDirectsToGateMass) {
  ModelConfig cfg = analysis_model(3, 1);
  cfg.routing_mode = RoutingMode::dense();
  Model model(cfg);
  auto ex = toy_examples(4, 5, 9);
  try {
    expert_utilization(model, ex);
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("expert_gate_mass"), std::string::npos);
  }
  UtilizationTable t = expert_gate_mass(model, ex);
  for (const auto& row : t.rows) {
    double s = 0.0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Manifold, DegenerateCases) {
  std::vector<std::vector<double>> same = {{1, 2}, {1, 2}, {1, 2}, {1, 2}};
  LayerManifoldMetrics m = manifold_from_features(same, {0, 0, 1, 1});
  EXPECT_EQ(m.within_class_mean_dist, 0.0);
  EXPECT_EQ(m.between_class_mean_dist, 0.0);
  EXPECT_EQ(m.ratio, 0.0);

  // two classes at {0} and {1} in 1-D, two coincident points each
  std::vector<std::vector<double>> split = {{0}, {0}, {1}, {1}};
  m = manifold_from_features(split, {0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(m.within_class_mean_dist, 0.0);
  EXPECT_DOUBLE_EQ(m.between_class_mean_dist, 1.0);
  EXPECT_DOUBLE_EQ(m.ratio, 0.0);
}

TEST(Manifold, SingletonClassWarnsAndIsExcludedFromWithin) {
  std::vector<std::vector<double>> feats = {{0, 0}, {1, 0}, {5, 5}};
  std::vector<std::string> warnings;
  LayerManifoldMetrics m = manifold_from_features(feats, {0, 0, 7}, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("7"), std::string::npos);
  EXPECT_DOUBLE_EQ(m.within_class_mean_dist, 1.0);  // only the (0,1) pair
}

TEST(Manifold, MatchesBruteForceOracleOnRandomInstances) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 5 + rng.uniform_int(40);
    int d = 1 + rng.uniform_int(6);
    int n_classes = 2 + rng.uniform_int(3);
    std::vector<std::vector<double>> feats(static_cast<size_t>(n));
    std::vector<int> cls(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      cls[static_cast<size_t>(i)] = rng.uniform_int(n_classes);
      for (int k = 0; k < d; ++k) feats[static_cast<size_t>(i)].push_back(rng.normal());
    }
    LayerManifoldMetrics m = manifold_from_features(feats, cls);

    // brute force: explicit double loop, separate accumulators
    double ws = 0, bs = 0;
    int wc = 0, bc = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (j <= i) continue;
        double sq = 0;
        for (int k = 0; k < d; ++k) {
          double diff = feats[static_cast<size_t>(i)][static_cast<size_t>(k)] -
                        feats[static_cast<size_t>(j)][static_cast<size_t>(k)];
          sq += diff * diff;
        }
        if (cls[static_cast<size_t>(i)] == cls[static_cast<size_t>(j)]) {
          ws += std::sqrt(sq);
          ++wc;
        } else {
          bs += std::sqrt(sq);
          ++bc;
        }
      }
    double within = wc ? ws / wc : 0.0, between = bc ? bs / bc : 0.0;
    EXPECT_NEAR(m.within_class_mean_dist, within, 1e-9);
    EXPECT_NEAR(m.between_class_mean_dist, between, 1e-9);
    if (between > 0) EXPECT_NEAR(m.ratio, within / between, 1e-9);
  }
}

TEST(Manifold, ModelLevelReportCoversEveryLayer) {
  Model model(analysis_model(2, 1));
  auto ex = toy_examples(8, 5, 10);
  std::vector<int> cls;
  for (const Example& e : ex) cls.push_back(e.label);
  ManifoldReport report = manifold_metrics(model, ex, cls);
  ASSERT_EQ(report.per_layer.size(), 2u);
  for (const auto& m : report.per_layer) {
    EXPECT_GT(m.between_class_mean_dist, 0.0);
    EXPECT_GT(m.within_class_mean_dist, 0.0);
  }
  EXPECT_THROW(manifold_metrics(model, ex, {0}), ShapeError);
}

TEST(ExportFeatures, ShapeAndDeterminism) {
  Model model(analysis_model(2, 1));
  auto ex = toy_examples(9, 5, 11, 3);
  std::ostringstream s1, s2;
  export_features(model, ex, 2, s1);
  export_features(model, ex, 2, s2);
  EXPECT_EQ(s1.str(), s2.str());

  std::istringstream in(s1.str());
  std::string line;
  int rows = 0;
  std::getline(in, line);  // header
  int cols = 1;
  for (char c : line)
    if (c == ',') ++cols;
  EXPECT_EQ(cols, model.config().hidden_dim + 2);
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 9);

  EXPECT_THROW(export_features(model, ex, 99, s1), ValueError);
}
