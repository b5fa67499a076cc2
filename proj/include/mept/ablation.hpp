#pragma once

// Ablation orchestration: routing variants, prompt-depth sets, learning-space
// freezing, and the prompt-length x expert-count grid. Every cell trains an
// independent model from its own seeded init; cells run in parallel up to the
// MEPT_THREADS cap and results land in preallocated slots, so reports are
// reproducible regardless of thread count.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "mept/common.hpp"
#include "mept/data.hpp"
#include "mept/train.hpp"

namespace mept {

struct LearningSpace {
  bool train_router = true;
  bool train_prompts = true;

  std::string name() const {
    if (train_router && train_prompts) return "router+prompt";
    return train_router ? "router_only" : "prompt_only";
  }
};

enum class AblationAxis { RoutingModes, DepthSets, LearningSpaces, LengthExpertGrid };

inline std::string axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::RoutingModes: return "routing_modes";
    case AblationAxis::DepthSets: return "depth_sets";
    case AblationAxis::LearningSpaces: return "learning_spaces";
    case AblationAxis::LengthExpertGrid: return "length_expert_grid";
  }
  return "?";
}

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "routing_modes") return AblationAxis::RoutingModes;
  if (s == "depth_sets") return AblationAxis::DepthSets;
  if (s == "learning_spaces") return AblationAxis::LearningSpaces;
  if (s == "length_expert_grid") return AblationAxis::LengthExpertGrid;
  throw ValueError("unknown ablation axis '" + s + "'");
}

struct GridPoint {
  int prompt_len = 0;
  int n_router = 0;
};

struct AblationPlan {
  ModelConfig base_model;
  TrainConfig base_train;
  AblationAxis axis = AblationAxis::RoutingModes;
  std::vector<RoutingMode> routing_values;
  std::vector<std::vector<int>> depth_values;
  std::vector<LearningSpace> space_values;
  std::vector<GridPoint> grid_values;
  int n_seeds = 3;  // paper reports 3-run averages

  size_t n_values() const {
    switch (axis) {
      case AblationAxis::RoutingModes: return routing_values.size();
      case AblationAxis::DepthSets: return depth_values.size();
      case AblationAxis::LearningSpaces: return space_values.size();
      case AblationAxis::LengthExpertGrid: return grid_values.size();
    }
    return 0;
  }

  void validate() const {
    base_model.validate();
    base_train.validate();
    if (n_seeds < 1) throw ValueError("AblationPlan: n_seeds must be >= 1");
    if (n_values() == 0) throw ValueError("AblationPlan: empty value list for axis " + axis_name(axis));
    for (const auto& depth : depth_values) {
      if (depth.empty()) throw ValueError("AblationPlan: empty depth set");
      for (int l : depth)
        if (l < 1 || l > base_model.n_layers)
          throw ValueError("AblationPlan: depth layer " + std::to_string(l) + " outside [1," +
                           std::to_string(base_model.n_layers) + "]");
    }
    for (const auto& space : space_values)
      if (!space.train_router && !space.train_prompts)
        throw ValueError("AblationPlan: learning space must train something");
    for (const auto& g : grid_values)
      if (g.prompt_len < 1 || g.n_router < 1)
        throw ValueError("AblationPlan: grid points need prompt_len >= 1 and n_router >= 1");
  }

  std::string value_id(size_t vi) const {
    switch (axis) {
      case AblationAxis::RoutingModes:
        return routing_values[vi].name();
      case AblationAxis::DepthSets: {
        std::string id = "layers";
        for (int l : depth_values[vi]) id += "_" + std::to_string(l);
        return id;
      }
      case AblationAxis::LearningSpaces:
        return space_values[vi].name();
      case AblationAxis::LengthExpertGrid:
        return "m" + std::to_string(grid_values[vi].prompt_len) + "_nr" +
               std::to_string(grid_values[vi].n_router);
    }
    return "?";
  }

  // Config pair for one cell; seed_index shifts both seeds.
  std::pair<ModelConfig, TrainConfig> cell_configs(size_t vi, int seed_index) const {
    ModelConfig m = base_model;
    TrainConfig t = base_train;
    switch (axis) {
      case AblationAxis::RoutingModes:
        m.routing_mode = routing_values[vi];
        break;
      case AblationAxis::DepthSets:
        m.prompt_layers = depth_values[vi];
        break;
      case AblationAxis::LearningSpaces:
        t.train_router = space_values[vi].train_router;
        t.train_prompts = space_values[vi].train_prompts;
        break;
      case AblationAxis::LengthExpertGrid:
        m.prompt_len = grid_values[vi].prompt_len;
        m.n_router_experts = grid_values[vi].n_router;
        break;
    }
    m.seed = base_model.seed + static_cast<uint64_t>(seed_index);
    t.seed = base_train.seed + static_cast<uint64_t>(seed_index);
    return {m, t};
  }
};

// The seven Table-style router configurations: the default plus six variants.
inline std::vector<RoutingMode> variant_configs() {
  return {RoutingMode::top1(),          RoutingMode::stochastic(),
          RoutingMode::dense(),         RoutingMode::gumbel(1.0),
          RoutingMode::perturbation(1.0), RoutingMode::no_shared(),
          RoutingMode::replace_shared()};
}

struct AblationCell {
  std::string value_id;
  int seed_index = 0;
  double mean_accuracy = 0.0;
  std::vector<double> per_task_accuracy;
};

struct AblationSummary {
  std::string value_id;
  double mean = 0.0;
  double stddev = 0.0;  // population std over seeds
};

struct AblationReport {
  std::vector<AblationCell> cells;       // n_values * n_seeds, value-major
  std::vector<AblationSummary> summary;  // one per value
};

inline int mept_threads(int n_jobs) {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("MEPT_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return std::min(n, n_jobs);
}

inline AblationReport run_ablation(const AblationPlan& plan, const Dataset& dataset) {
  plan.validate();
  size_t n_values = plan.n_values();
  size_t n_jobs = n_values * static_cast<size_t>(plan.n_seeds);
  AblationReport report;
  report.cells.resize(n_jobs);

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      size_t job = next.fetch_add(1);
      if (job >= n_jobs) return;
      size_t vi = job / static_cast<size_t>(plan.n_seeds);
      int seed_index = static_cast<int>(job % static_cast<size_t>(plan.n_seeds));
      auto [mcfg, tcfg] = plan.cell_configs(vi, seed_index);
      SchemeResult r = run_scheme(mcfg, tcfg, dataset);
      AblationCell& cell = report.cells[job];
      cell.value_id = plan.value_id(vi);
      cell.seed_index = seed_index;
      cell.per_task_accuracy = r.eval.per_task;
      cell.mean_accuracy = r.eval.mean;
    }
  };
  int threads = mept_threads(static_cast<int>(n_jobs));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (size_t vi = 0; vi < n_values; ++vi) {
    double sum = 0.0;
    for (int s = 0; s < plan.n_seeds; ++s)
      sum += report.cells[vi * plan.n_seeds + static_cast<size_t>(s)].mean_accuracy;
    double mean = sum / plan.n_seeds;
    double var = 0.0;
    for (int s = 0; s < plan.n_seeds; ++s) {
      double d = report.cells[vi * plan.n_seeds + static_cast<size_t>(s)].mean_accuracy - mean;
      var += d * d;
    }
    report.summary.push_back({plan.value_id(vi), mean, std::sqrt(var / plan.n_seeds)});
  }
  return report;
}

inline void write_ablation_csv(const AblationReport& report, std::ostream& out) {
  out << "cell,seed,accuracy\n";
  char buf[32];
  for (const AblationCell& c : report.cells) {
    std::snprintf(buf, sizeof(buf), "%.17g", c.mean_accuracy);
    out << c.value_id << "," << c.seed_index << "," << buf << "\n";
  }
}

inline void write_ablation_csv(const AblationReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_ablation_csv(report, out);
}

}  // namespace mept
