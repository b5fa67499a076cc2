#pragma once

// Optimization loop and the separate/mixture training schemes. Router
// experts, shared experts, and the router itself all update every step unless
// frozen via train_router / train_prompts (frozen tensors are excluded from
// the optimizer entirely and keep their initialization bit-for-bit).

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mept/common.hpp"
#include "mept/data.hpp"
#include "mept/model.hpp"
#include "mept/rng.hpp"

namespace mept {

struct TrainConfig {
  int epochs = 4;
  int batch_size = 32;
  double learning_rate = 1e-3;
  enum class Optimizer { Adam, Sgd } optimizer = Optimizer::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  enum class Scheme { Separate, Mixture } scheme = Scheme::Mixture;
  double grad_clip = 0.0;  // 0 disables clipping
  int eval_every = 0;      // steps between dev evals; 0 = final eval only
  uint64_t seed = 1;
  bool train_router = true;   // learning-space freezing
  bool train_prompts = true;

  void validate() const {
    if (epochs < 1) throw ValueError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ValueError("TrainConfig: batch_size must be >= 1");
    if (learning_rate < 0.0) throw ValueError("TrainConfig: learning_rate must be >= 0");
    if (grad_clip < 0.0) throw ValueError("TrainConfig: grad_clip must be >= 0");
    if (!train_router && !train_prompts)
      throw ValueError("TrainConfig: at least one of router/prompts must train");
  }

  static std::string scheme_name(Scheme s) { return s == Scheme::Separate ? "separate" : "mixture"; }
  static Scheme parse_scheme(const std::string& s) {
    if (s == "separate") return Scheme::Separate;
    if (s == "mixture") return Scheme::Mixture;
    throw ValueError("unknown training scheme '" + s + "'");
  }
};

struct StepRecord {
  int step = 0;
  double loss = 0.0;
};

struct EvalRecord {
  int step = 0;
  std::vector<double> task_accuracy;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::string checkpoint;  // filled by callers that persist the model
};

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  explicit Optimizer(std::vector<Tensor> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.optimizer == TrainConfig::Optimizer::Adam) {
      m_.resize(params_.size());
      v_.resize(params_.size());
      for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].numel(), 0.0);
        v_[i].assign(params_[i].numel(), 0.0);
      }
    }
  }

  const std::vector<Tensor>& params() const { return params_; }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  // Global-norm clipping across every managed tensor.
  void clip_gradients(double max_norm) {
    double sq = 0.0;
    for (Tensor& p : params_)
      for (double g : p.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    double scale = max_norm / norm;
    for (Tensor& p : params_) {
      auto& g = p.raw()->grad;
      for (double& v : g) v *= scale;
    }
  }

  void step() {
    ++t_;
    if (cfg_.optimizer == TrainConfig::Optimizer::Sgd) {
      for (Tensor& p : params_) {
        const auto& g = p.grad();
        auto& val = p.values_mut();
        for (size_t i = 0; i < val.size(); ++i) val[i] -= cfg_.learning_rate * g[i];
      }
      return;
    }
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t k = 0; k < params_.size(); ++k) {
      const auto& g = params_[k].grad();
      auto& val = params_[k].values_mut();
      auto& m = m_[k];
      auto& v = v_[k];
      for (size_t i = 0; i < val.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        val[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  TrainConfig cfg_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Parameters that actually train under the configured learning space.
inline std::vector<Tensor> trainable_params(const Model& model, const TrainConfig& cfg) {
  std::vector<Tensor> out;
  for (const NamedParam& p : model.parameters()) {
    ParamGroup g = param_group(p.name);
    if (g == ParamGroup::Router && !cfg.train_router) continue;
    if (g == ParamGroup::Prompt && !cfg.train_prompts) continue;
    out.push_back(p.tensor);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::vector<double> per_task;
  double mean = 0.0;  // unweighted over tasks
};

inline double accuracy(const Model& model, const std::vector<Example>& dev, int batch_size = 64) {
  if (dev.empty()) throw ValueError("evaluate: empty dev set");
  Rng rng(0);  // eval routes on clean logits; stochastic mode still draws here
  int correct = 0;
  int seq_len = static_cast<int>(dev[0].tokens.size());
  for (size_t begin = 0; begin < dev.size(); begin += static_cast<size_t>(batch_size)) {
    size_t end = std::min(dev.size(), begin + static_cast<size_t>(batch_size));
    Batch batch = make_batch(dev, begin, end, seq_len);
    ForwardTrace trace = model.forward(batch, false, rng, false);
    int c = model.config().n_classes;
    for (int b = 0; b < batch.size(); ++b) {
      const double* row = trace.logits.values().data() + static_cast<size_t>(b) * c;
      if (argmax_lowest(row, c) == batch.labels[static_cast<size_t>(b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dev.size());
}

inline EvalResult evaluate(const Model& model, const std::vector<std::vector<Example>>& dev_sets) {
  EvalResult r;
  for (const auto& dev : dev_sets) r.per_task.push_back(accuracy(model, dev));
  if (r.per_task.empty()) throw ValueError("evaluate: no dev sets");
  double s = 0.0;
  for (double a : r.per_task) s += a;
  r.mean = s / static_cast<double>(r.per_task.size());
  return r;
}

// ---------------------------------------------------------------------------
// Core loop

inline TrainLog train(Model& model, const std::vector<Example>& train_set,
                      const std::vector<std::vector<Example>>& dev_sets,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw ValueError("train: empty training set");
  Optimizer opt(trainable_params(model, cfg), cfg);
  Rng order_rng = Rng(cfg.seed).derive("order");
  Rng forward_rng = Rng(cfg.seed).derive("forward");

  TrainLog log;
  int step = 0;
  int seq_len = static_cast<int>(train_set[0].tokens.size());
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      std::vector<Example> chunk;
      chunk.reserve(end - begin);
      for (size_t i = begin; i < end; ++i) chunk.push_back(train_set[order[i]]);
      Batch batch = make_batch(chunk, seq_len);

      ForwardTrace trace = model.forward(batch, false, forward_rng, true);
      Tensor loss = cross_entropy(trace.logits, batch.labels);
      double loss_value = loss.item();
      if (!std::isfinite(loss_value))
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           " (lr=" + std::to_string(cfg.learning_rate) + ")");
      opt.zero_grad();
      backward(loss);
      if (cfg.grad_clip > 0.0) opt.clip_gradients(cfg.grad_clip);
      opt.step();
      log.steps.push_back({step, loss_value});
      ++step;

      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && !dev_sets.empty())
        log.evals.push_back({step, evaluate(model, dev_sets).per_task});
    }
  }
  if (!dev_sets.empty()) log.evals.push_back({step, evaluate(model, dev_sets).per_task});
  return log;
}

// ---------------------------------------------------------------------------
// Schemes (Separate: one model per task; Mixture: one model on the union)

struct SchemeResult {
  std::vector<Model> models;   // one per task (separate) or exactly one (mixture)
  std::vector<TrainLog> logs;  // aligned with models
  EvalResult eval;             // per-task dev accuracy + unweighted mean
};

inline SchemeResult run_scheme(const ModelConfig& mcfg, const TrainConfig& tcfg,
                               const Dataset& ds) {
  SchemeResult result;
  if (tcfg.scheme == TrainConfig::Scheme::Mixture) {
    MixtureDataset mix = make_mixture(ds);
    Model model(mcfg);
    result.logs.push_back(train(model, mix.train, mix.dev, tcfg));
    result.eval = evaluate(model, mix.dev);
    result.models.push_back(std::move(model));
  } else {
    result.eval.mean = 0.0;
    for (const TaskData& task : ds.tasks) {
      Model model(mcfg);
      result.logs.push_back(train(model, task.train, {task.dev}, tcfg));
      result.eval.per_task.push_back(accuracy(model, task.dev));
      result.models.push_back(std::move(model));
    }
    double s = 0.0;
    for (double a : result.eval.per_task) s += a;
    result.eval.mean = s / static_cast<double>(result.eval.per_task.size());
  }
  return result;
}

}  // namespace mept
