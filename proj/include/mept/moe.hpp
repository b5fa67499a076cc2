#pragma once

// Mixture-of-expert prompt layer: a bank of routed prompt slabs, a bank of
// always-on shared slabs, and a linear-softmax router that picks one routed
// slab per example. The composed per-layer prompt is
//     prompt = gate[selected] * router_experts[selected] + sum(shared_experts)
// so the router stays differentiable through the gate probability while only
// one routed slab receives gradient per example.

#include <string>
#include <vector>

#include "mept/common.hpp"
#include "mept/rng.hpp"
#include "mept/tensor.hpp"

namespace mept {

struct RoutingMode {
  enum class Kind {
    Top1,          // argmax of softmax gate, scaled by its probability
    Stochastic,    // uniform-random expert; gate still reported as softmax
    Dense,         // all experts, weighted by the full gate distribution
    GumbelSoftmax, // Gumbel noise on logits (1/temperature), then argmax
    Perturbation,  // Gaussian noise on logits, then argmax
    NoShared,      // Top1 with the shared-expert term removed
    ReplaceShared, // Top1 with shared slots converted to extra routed slots
  };

  Kind kind = Kind::Top1;
  double temperature = 1.0;  // GumbelSoftmax only
  double sigma = 1.0;        // Perturbation only

  static RoutingMode top1() { return {}; }
  static RoutingMode stochastic() { return {Kind::Stochastic, 1.0, 1.0}; }
  static RoutingMode dense() { return {Kind::Dense, 1.0, 1.0}; }
  static RoutingMode gumbel(double temperature) {
    if (temperature <= 0.0) throw ValueError("gumbel temperature must be > 0");
    return {Kind::GumbelSoftmax, temperature, 1.0};
  }
  static RoutingMode perturbation(double sigma) {
    if (sigma < 0.0) throw ValueError("perturbation sigma must be >= 0");
    return {Kind::Perturbation, 1.0, sigma};
  }
  static RoutingMode no_shared() { return {Kind::NoShared, 1.0, 1.0}; }
  static RoutingMode replace_shared() { return {Kind::ReplaceShared, 1.0, 1.0}; }

  // Modes whose composition uses a single selected expert.
  bool sparse() const { return kind != Kind::Dense; }
  bool uses_shared() const { return kind != Kind::NoShared && kind != Kind::ReplaceShared; }

  std::string name() const {
    switch (kind) {
      case Kind::Top1: return "top1";
      case Kind::Stochastic: return "stochastic";
      case Kind::Dense: return "dense";
      case Kind::GumbelSoftmax: return "gumbel";
      case Kind::Perturbation: return "perturbation";
      case Kind::NoShared: return "no_shared";
      case Kind::ReplaceShared: return "replace_shared";
    }
    return "?";
  }

  static RoutingMode parse(const std::string& name, double temperature = 1.0,
                           double sigma = 1.0) {
    if (name == "top1") return top1();
    if (name == "stochastic") return stochastic();
    if (name == "dense") return dense();
    if (name == "gumbel") return gumbel(temperature);
    if (name == "perturbation") return perturbation(sigma);
    if (name == "no_shared") return no_shared();
    if (name == "replace_shared") return replace_shared();
    throw ValueError("unknown routing mode '" + name + "'");
  }
};

// One layer's prompt-expert parameters. With ReplaceShared the shared slots
// are converted into extra routed slots at construction, so n_router here may
// exceed the configured value while n_shared is zero.
struct MeptLayerParams {
  Tensor router_experts;  // [n_router, prompt_len, dim]
  Tensor shared_experts;  // [n_shared, prompt_len, dim]; undefined when n_shared == 0
  Tensor router_weight;   // [dim, n_router]
  Tensor router_bias;     // [n_router]
  int layer_index = 0;    // 1-based

  int n_router() const { return router_experts.dim(0); }
  int n_shared() const { return shared_experts.defined() ? shared_experts.dim(0) : 0; }
  int prompt_len() const { return router_experts.dim(1); }
  int dim() const { return router_experts.dim(2); }
};

inline MeptLayerParams make_mept_layer(int layer_index, int n_router, int n_shared,
                                       int prompt_len, int dim, const RoutingMode& mode) {
  if (n_router < 1 || n_shared < 0 || prompt_len < 1 || dim < 1)
    throw ValueError("make_mept_layer: need n_router >= 1, n_shared >= 0, prompt_len >= 1, dim >= 1");
  int routed = n_router;
  int shared = n_shared;
  if (mode.kind == RoutingMode::Kind::ReplaceShared) {
    routed += shared;  // parameter-matched: each shared slot becomes a routed slot
    shared = 0;
  } else if (mode.kind == RoutingMode::Kind::NoShared) {
    shared = 0;
  }
  MeptLayerParams p;
  p.layer_index = layer_index;
  p.router_experts = Tensor::zeros({routed, prompt_len, dim}, true);
  if (shared > 0) p.shared_experts = Tensor::zeros({shared, prompt_len, dim}, true);
  p.router_weight = Tensor::zeros({dim, routed}, true);
  p.router_bias = Tensor::zeros({routed}, true);
  return p;
}

// Per-batch routing outcome. gate_probs stays attached to the autodiff graph;
// selected/selected_prob are plain values for bookkeeping and analysis.
// selected is the argmax of its row (ties to the lowest index) for all modes
// except Stochastic, which samples the index uniformly.
struct RoutingDecision {
  Tensor gate_probs;                 // [batch, n_router]
  std::vector<int> selected;         // per example
  std::vector<double> selected_prob; // gate_probs[b, selected[b]]
};

inline int argmax_lowest(const double* row, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

// Routes pooled hidden states (mean over non-prompt, non-pad positions of the
// previous layer) to experts. Noise modes draw from `rng`; pass training=false
// to route on clean logits during evaluation and analysis.
inline RoutingDecision route(const MeptLayerParams& params, const Tensor& pooled_hidden,
                             const RoutingMode& mode, Rng& rng, bool training = true) {
  if (pooled_hidden.rank() != 2 || pooled_hidden.dim(1) != params.dim())
    throw ShapeError("route: pooled hidden " + shape_str(pooled_hidden.shape()) +
                     " incompatible with router weight " + shape_str(params.router_weight.shape()));
  int batch = pooled_hidden.dim(0);
  int n = params.n_router();

  Tensor logits = add_bias(matmul(pooled_hidden, params.router_weight), params.router_bias);
  if (training) {
    switch (mode.kind) {
      case RoutingMode::Kind::GumbelSoftmax: {
        std::vector<double> noise(logits.numel());
        for (double& v : noise) v = rng.gumbel();
        Tensor noisy = add(logits, Tensor::from_data(logits.shape(), std::move(noise)));
        logits = scale(noisy, 1.0 / mode.temperature);
        break;
      }
      case RoutingMode::Kind::Perturbation: {
        std::vector<double> noise(logits.numel());
        for (double& v : noise) v = rng.normal() * mode.sigma;
        logits = add(logits, Tensor::from_data(logits.shape(), std::move(noise)));
        break;
      }
      default:
        break;
    }
  }
  RoutingDecision d;
  d.gate_probs = softmax(logits, 1);
  d.selected.resize(static_cast<size_t>(batch));
  d.selected_prob.resize(static_cast<size_t>(batch));
  const auto& gv = d.gate_probs.values();
  for (int b = 0; b < batch; ++b) {
    int sel = mode.kind == RoutingMode::Kind::Stochastic
                  ? rng.uniform_int(n)
                  : argmax_lowest(gv.data() + static_cast<size_t>(b) * n, n);
    d.selected[static_cast<size_t>(b)] = sel;
    d.selected_prob[static_cast<size_t>(b)] = gv[static_cast<size_t>(b) * n + static_cast<size_t>(sel)];
  }
  return d;
}

// Element-wise sum of all shared slabs; undefined tensor when there are none.
inline Tensor shared_expert_sum(const MeptLayerParams& params) {
  int ns = params.n_shared();
  if (ns == 0) return Tensor();
  Tensor acc = index_axis0(params.shared_experts, 0);
  for (int i = 1; i < ns; ++i) acc = add(acc, index_axis0(params.shared_experts, i));
  return acc;
}

// Composes the per-example prompt [batch, prompt_len, dim] from the routing
// decision. Gradients flow into the selected slab, the shared slabs, and the
// router (through the gate scalar).
inline Tensor compose_prompt(const MeptLayerParams& params, const RoutingDecision& decision,
                             const RoutingMode& mode) {
  int batch = decision.gate_probs.dim(0);
  int n = params.n_router();
  if (decision.gate_probs.dim(1) != n)
    throw ShapeError("compose_prompt: decision arity " + shape_str(decision.gate_probs.shape()) +
                     " vs " + std::to_string(n) + " router experts");
  Tensor shared = mode.uses_shared() ? shared_expert_sum(params) : Tensor();

  std::vector<Tensor> per_example;
  per_example.reserve(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    Tensor routed;
    if (mode.sparse()) {
      int sel = decision.selected[static_cast<size_t>(b)];
      if (sel < 0 || sel >= n)
        throw ValueError("compose_prompt: selected index " + std::to_string(sel) +
                         " out of range [0," + std::to_string(n) + ")");
      Tensor gate = at_flat(decision.gate_probs, static_cast<size_t>(b) * n + static_cast<size_t>(sel));
      routed = scale_by(index_axis0(params.router_experts, sel), gate);
    } else {
      for (int i = 0; i < n; ++i) {
        Tensor gate = at_flat(decision.gate_probs, static_cast<size_t>(b) * n + static_cast<size_t>(i));
        Tensor term = scale_by(index_axis0(params.router_experts, i), gate);
        routed = routed.defined() ? add(routed, term) : term;
      }
    }
    per_example.push_back(shared.defined() ? add(routed, shared) : routed);
  }
  return stack_axis0(per_example);
}

// Parameter accounting behind the sparsity claim: activated prompt tokens per
// layer depend on the prompt length and shared count only, never on n_router
// in the sparse modes.
struct ParamReport {
  long long prompt_params = 0;
  long long router_params = 0;
  long long total = 0;
  long long per_forward_activated_prompt_tokens = 0;  // per prompted layer
};

inline ParamReport count_mept_params(int n_prompt_layers, int n_router, int n_shared,
                                     int prompt_len, int dim, const RoutingMode& mode) {
  int routed = n_router, shared = n_shared;
  if (mode.kind == RoutingMode::Kind::ReplaceShared) {
    routed += shared;
    shared = 0;
  } else if (mode.kind == RoutingMode::Kind::NoShared) {
    shared = 0;
  }
  ParamReport r;
  long long layers = n_prompt_layers;
  r.prompt_params = layers * static_cast<long long>(routed + shared) * prompt_len * dim;
  r.router_params = layers * (static_cast<long long>(dim) * routed + routed);
  r.total = r.prompt_params + r.router_params;
  r.per_forward_activated_prompt_tokens =
      mode.sparse() ? static_cast<long long>(1 + shared) * prompt_len
                    : static_cast<long long>(routed + shared) * prompt_len;
  return r;
}

}  // namespace mept
