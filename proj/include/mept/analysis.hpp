#pragma once

// Read-only analysis over a trained model: neural-pathway extraction and
// comparison, expert-utilization histograms, within/between-class manifold
// metrics, and pooled-feature export. Everything routes on clean logits
// (training=false) with a fixed rng, so outputs are deterministic for a given
// checkpoint and dataset.

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mept/common.hpp"
#include "mept/model.hpp"
#include "mept/train.hpp"

namespace mept {

// Per-task pathway: mean gate distribution per prompted layer over a dataset;
// the argmax of each mean defines the activated expert for that layer.
struct PathwayRecord {
  std::vector<int> layers;                     // 1-based prompted layer indices
  std::vector<std::vector<double>> mean_gate;  // per layer, [n_router], sums to 1
  std::vector<int> argmax;                     // per layer

  std::vector<double> flat() const {
    std::vector<double> out;
    for (const auto& g : mean_gate) out.insert(out.end(), g.begin(), g.end());
    return out;
  }
};

struct UtilizationTable {
  std::vector<int> layers;
  std::vector<std::vector<double>> rows;  // per layer activation frequencies, sum to 1
};

namespace detail {

constexpr int kAnalysisBatch = 64;

template <typename Fn>
void for_each_batch(const Model& model, const std::vector<Example>& examples, bool record,
                    Fn&& fn) {
  if (examples.empty()) throw ValueError("analysis: empty dataset");
  Rng rng = Rng(0).derive("analysis");
  int seq_len = static_cast<int>(examples[0].tokens.size());
  for (size_t begin = 0; begin < examples.size(); begin += kAnalysisBatch) {
    size_t end = std::min(examples.size(), begin + kAnalysisBatch);
    Batch batch = make_batch(examples, begin, end, seq_len);
    ForwardTrace trace = model.forward(batch, record, rng, false);
    fn(batch, trace);
  }
}

}  // namespace detail

inline PathwayRecord extract_pathway(const Model& model, const std::vector<Example>& examples) {
  if (!model.config().mept_enabled())
    throw ValueError("extract_pathway: model has no prompted layers");
  PathwayRecord rec;
  size_t count = 0;
  detail::for_each_batch(model, examples, true, [&](const Batch& batch, const ForwardTrace& t) {
    if (rec.layers.empty()) {
      for (const auto& r : t.routing) {
        rec.layers.push_back(r.layer);
        rec.mean_gate.emplace_back(static_cast<size_t>(r.n_router), 0.0);
      }
    }
    for (size_t li = 0; li < t.routing.size(); ++li) {
      const LayerRoutingRecord& r = t.routing[li];
      for (int b = 0; b < batch.size(); ++b)
        for (int i = 0; i < r.n_router; ++i)
          rec.mean_gate[li][static_cast<size_t>(i)] +=
              r.gate_probs[static_cast<size_t>(b) * r.n_router + static_cast<size_t>(i)];
    }
    count += static_cast<size_t>(batch.size());
  });
  for (auto& g : rec.mean_gate) {
    for (double& v : g) v /= static_cast<double>(count);
    rec.argmax.push_back(argmax_lowest(g.data(), static_cast<int>(g.size())));
  }
  return rec;
}

// Mean absolute difference of the concatenated per-layer gate distributions.
inline double pathway_mae(const PathwayRecord& x, const PathwayRecord& y) {
  std::vector<double> a = x.flat(), b = y.flat();
  if (a.size() != b.size() || x.layers != y.layers)
    throw ShapeError("pathway_mae: records disagree in layers or expert counts");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double pathway_cosine(const PathwayRecord& x, const PathwayRecord& y) {
  std::vector<double> a = x.flat(), b = y.flat();
  if (a.size() != b.size() || x.layers != y.layers)
    throw ShapeError("pathway_cosine: records disagree in layers or expert counts");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ValueError("pathway_cosine: zero-norm record");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Fraction of examples routed to each expert, per layer. Defined for the
// sparse modes only; dense routing has no discrete activation.
inline UtilizationTable expert_utilization(const Model& model,
                                           const std::vector<Example>& examples) {
  if (!model.config().mept_enabled())
    throw ValueError("expert_utilization: model has no prompted layers");
  if (model.config().routing_mode.kind == RoutingMode::Kind::Dense)
    throw ValueError(
        "expert_utilization: dense routing activates every expert; use expert_gate_mass for "
        "the gate-probability-mass table");
  UtilizationTable table;
  size_t count = 0;
  detail::for_each_batch(model, examples, true, [&](const Batch& batch, const ForwardTrace& t) {
    if (table.layers.empty()) {
      for (const auto& r : t.routing) {
        table.layers.push_back(r.layer);
        table.rows.emplace_back(static_cast<size_t>(r.n_router), 0.0);
      }
    }
    for (size_t li = 0; li < t.routing.size(); ++li)
      for (int b = 0; b < batch.size(); ++b)
        table.rows[li][static_cast<size_t>(t.routing[li].selected[static_cast<size_t>(b)])] += 1.0;
    count += static_cast<size_t>(batch.size());
  });
  for (auto& row : table.rows)
    for (double& v : row) v /= static_cast<double>(count);
  return table;
}

// Mean gate-probability mass per layer; the dense-mode analogue of
// expert_utilization. Rows sum to 1 because each gate row does.
inline UtilizationTable expert_gate_mass(const Model& model,
                                         const std::vector<Example>& examples) {
  PathwayRecord rec = extract_pathway(model, examples);
  UtilizationTable table;
  table.layers = rec.layers;
  table.rows = rec.mean_gate;
  return table;
}

// ---------------------------------------------------------------------------
// Manifold metrics

struct LayerManifoldMetrics {
  int layer = 0;
  double within_class_mean_dist = 0.0;
  double between_class_mean_dist = 0.0;
  double ratio = 0.0;  // within / between; 0 when both vanish
};

struct ManifoldReport {
  std::vector<LayerManifoldMetrics> per_layer;
  std::vector<std::string> warnings;
};

// Mean pairwise Euclidean distances over rows of `features` grouped by
// class_ids. Exposed separately so tests can drive it against a brute-force
// oracle on raw feature matrices.
inline LayerManifoldMetrics manifold_from_features(const std::vector<std::vector<double>>& features,
                                                   const std::vector<int>& class_ids,
                                                   std::vector<std::string>* warnings = nullptr) {
  if (features.size() != class_ids.size())
    throw ShapeError("manifold_from_features: features/class_ids length mismatch");
  size_t n = features.size();
  double within_sum = 0.0, between_sum = 0.0;
  long long within_pairs = 0, between_pairs = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (size_t k = 0; k < features[i].size(); ++k) {
        double d = features[i][k] - features[j][k];
        sq += d * d;
      }
      double dist = std::sqrt(sq);
      if (class_ids[i] == class_ids[j]) {
        within_sum += dist;
        ++within_pairs;
      } else {
        between_sum += dist;
        ++between_pairs;
      }
    }
  if (warnings) {
    std::map<int, int> class_counts;
    for (int c : class_ids) class_counts[c]++;
    for (const auto& [c, cnt] : class_counts)
      if (cnt < 2)
        warnings->push_back("class " + std::to_string(c) +
                            " has a single example and contributes no within-class pairs");
  }
  LayerManifoldMetrics m;
  m.within_class_mean_dist = within_pairs > 0 ? within_sum / static_cast<double>(within_pairs) : 0.0;
  m.between_class_mean_dist =
      between_pairs > 0 ? between_sum / static_cast<double>(between_pairs) : 0.0;
  if (m.between_class_mean_dist == 0.0)
    m.ratio = m.within_class_mean_dist == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  else
    m.ratio = m.within_class_mean_dist / m.between_class_mean_dist;
  return m;
}

// Pooled features per layer for every example (plain values, no graph).
inline std::vector<std::vector<std::vector<double>>> collect_features(
    const Model& model, const std::vector<Example>& examples) {
  int n_layers = model.config().n_layers;
  std::vector<std::vector<std::vector<double>>> feats(static_cast<size_t>(n_layers));
  detail::for_each_batch(model, examples, false, [&](const Batch& batch, const ForwardTrace& t) {
    for (int layer = 1; layer <= n_layers; ++layer) {
      Tensor pooled = pool_features(t, layer);
      int d = pooled.dim(1);
      for (int b = 0; b < batch.size(); ++b)
        feats[static_cast<size_t>(layer - 1)]
            .emplace_back(pooled.values().begin() + static_cast<size_t>(b) * d,
                          pooled.values().begin() + static_cast<size_t>(b + 1) * d);
    }
  });
  return feats;
}

// class_ids must align with `examples`; pick labels, tasks, or composites.
inline ManifoldReport manifold_metrics(const Model& model, const std::vector<Example>& examples,
                                       const std::vector<int>& class_ids) {
  if (examples.size() != class_ids.size())
    throw ShapeError("manifold_metrics: examples/class_ids length mismatch");
  if (examples.size() < 2) throw ValueError("manifold_metrics: need at least two examples");
  auto feats = collect_features(model, examples);
  ManifoldReport report;
  for (size_t li = 0; li < feats.size(); ++li) {
    std::vector<std::string>* warn = li == 0 ? &report.warnings : nullptr;
    LayerManifoldMetrics m = manifold_from_features(feats[li], class_ids, warn);
    m.layer = static_cast<int>(li) + 1;
    report.per_layer.push_back(m);
  }
  return report;
}

// CSV of pooled features at one layer: task,label,d feature columns.
inline void export_features(const Model& model, const std::vector<Example>& examples, int layer,
                            std::ostream& out) {
  if (layer < 1 || layer > model.config().n_layers)
    throw ValueError("export_features: layer " + std::to_string(layer) + " out of range");
  int d = model.config().hidden_dim;
  out << "task,label";
  for (int j = 0; j < d; ++j) out << ",f" << j;
  out << "\n";
  char buf[32];
  detail::for_each_batch(model, examples, false, [&](const Batch& batch, const ForwardTrace& t) {
    Tensor pooled = pool_features(t, layer);
    for (int b = 0; b < batch.size(); ++b) {
      out << batch.task_ids[static_cast<size_t>(b)] << "," << batch.labels[static_cast<size_t>(b)];
      for (int j = 0; j < d; ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", pooled.values()[static_cast<size_t>(b) * d + j]);
        out << "," << buf;
      }
      out << "\n";
    }
  });
}

inline void export_features(const Model& model, const std::vector<Example>& examples, int layer,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  export_features(model, examples, layer, out);
}

}  // namespace mept
