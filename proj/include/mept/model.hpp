#pragma once

// Small pre-norm transformer encoder trained from scratch, with per-layer
// prompt injection. At each prompted layer the previous layer's prompt
// outputs are discarded and a freshly composed prompt is prepended (deep
// prompting with replacement semantics); at unprompted layers any live prompt
// positions simply flow through. Prompts are attendable by every position,
// carry no positional embedding, and never enter pooling or the loss.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mept/common.hpp"
#include "mept/data.hpp"
#include "mept/moe.hpp"
#include "mept/rng.hpp"
#include "mept/tensor.hpp"

namespace mept {

enum class InitScheme { XavierNormal, HeNormal };

inline std::string init_name(InitScheme s) {
  return s == InitScheme::XavierNormal ? "xavier_normal" : "he_normal";
}
inline InitScheme parse_init(const std::string& s) {
  if (s == "xavier_normal") return InitScheme::XavierNormal;
  if (s == "he_normal") return InitScheme::HeNormal;
  throw ValueError("unknown init scheme '" + s + "'");
}

struct ModelConfig {
  int n_layers = 4;
  int hidden_dim = 64;
  int n_heads = 4;
  int ffn_mult = 4;
  int vocab_size = 256;
  int max_seq_len = 64;
  int n_classes = 2;
  int prompt_len = 8;
  int n_router_experts = 4;
  int n_shared_experts = 1;
  std::vector<int> prompt_layers;  // 1-based; empty disables prompting
  RoutingMode routing_mode;
  InitScheme init = InitScheme::XavierNormal;
  std::string activation = "gelu";  // or "relu"
  double dropout = 0.0;
  uint64_t seed = 1;

  static ModelConfig defaults() {
    ModelConfig c;
    c.prompt_layers = {1, 2, 3, 4};
    return c;
  }

  bool mept_enabled() const { return !prompt_layers.empty(); }

  void validate() const {
    if (n_layers < 1 || hidden_dim < 1 || n_heads < 1 || ffn_mult < 1)
      throw ValueError("ModelConfig: sizes must be positive");
    if (hidden_dim % n_heads != 0)
      throw ValueError("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                       " not divisible by n_heads " + std::to_string(n_heads));
    if (vocab_size < 2 || max_seq_len < 1 || n_classes < 2)
      throw ValueError("ModelConfig: vocab_size/max_seq_len/n_classes too small");
    if (activation != "gelu" && activation != "relu")
      throw ValueError("ModelConfig: unknown activation '" + activation + "'");
    if (dropout < 0.0 || dropout >= 1.0) throw ValueError("ModelConfig: dropout out of range");
    for (int l : prompt_layers)
      if (l < 1 || l > n_layers)
        throw ValueError("ModelConfig: prompt layer " + std::to_string(l) + " outside [1," +
                         std::to_string(n_layers) + "]");
    if (mept_enabled()) {
      if (prompt_len < 1 || n_router_experts < 1 || n_shared_experts < 0)
        throw ValueError("ModelConfig: invalid prompt/expert counts");
    }
  }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

enum class ParamGroup { Backbone, Router, Prompt };

inline ParamGroup param_group(const std::string& name) {
  if (name.find("router_weight") != std::string::npos ||
      name.find("router_bias") != std::string::npos)
    return ParamGroup::Router;
  if (name.find("router_experts") != std::string::npos ||
      name.find("shared_experts") != std::string::npos)
    return ParamGroup::Prompt;
  return ParamGroup::Backbone;
}

// Snapshot of one prompted layer's routing, for pathway/utilization analysis.
struct LayerRoutingRecord {
  int layer = 0;  // 1-based
  int n_router = 0;
  std::vector<double> gate_probs;  // [batch * n_router]
  std::vector<int> selected;       // per example
  std::vector<double> selected_prob;
};

struct ForwardTrace {
  // hidden[j-1] is layer j's output (batch x seq_j x dim); the last entry is
  // post final-norm so it feeds the head directly. prompt_len[j-1] gives the
  // length of the prompt prefix in that tensor.
  std::vector<Tensor> hidden;
  std::vector<int> prompt_len;
  std::vector<LayerRoutingRecord> routing;  // per prompted layer, when recorded
  Tensor pooled;  // head input: mean over non-prompt, non-pad final positions
  Tensor logits;  // [batch, n_classes]
  int batch = 0;
  int text_len = 0;
  std::vector<uint8_t> pad;  // [batch * text_len]
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    int d = cfg_.hidden_dim;
    token_embedding_ = init_normal({cfg_.vocab_size, d}, 0.02, rng);
    pos_embedding_ = init_normal({cfg_.max_seq_len, d}, 0.02, rng);
    blocks_.reserve(static_cast<size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      Block b;
      b.ln1_gain = ones({d});
      b.ln1_bias = Tensor::zeros({d}, true);
      b.wq = init_linear({d, d}, rng);
      b.bq = Tensor::zeros({d}, true);
      b.wk = init_linear({d, d}, rng);
      b.bk = Tensor::zeros({d}, true);
      b.wv = init_linear({d, d}, rng);
      b.bv = Tensor::zeros({d}, true);
      b.wo = init_linear({d, d}, rng);
      b.bo = Tensor::zeros({d}, true);
      b.ln2_gain = ones({d});
      b.ln2_bias = Tensor::zeros({d}, true);
      b.w_ffn_in = init_linear({d, d * cfg_.ffn_mult}, rng);
      b.b_ffn_in = Tensor::zeros({d * cfg_.ffn_mult}, true);
      b.w_ffn_out = init_linear({d * cfg_.ffn_mult, d}, rng);
      b.b_ffn_out = Tensor::zeros({d}, true);
      blocks_.push_back(std::move(b));
    }
    final_gain_ = ones({d});
    final_bias_ = Tensor::zeros({d}, true);
    // near-zero head keeps the initial loss at chance level, ln(n_classes)
    head_weight_ = init_normal({d, cfg_.n_classes}, 0.02, rng);
    head_bias_ = Tensor::zeros({cfg_.n_classes}, true);

    for (int layer : cfg_.prompt_layers) {
      MeptLayerParams p = make_mept_layer(layer, cfg_.n_router_experts, cfg_.n_shared_experts,
                                          cfg_.prompt_len, d, cfg_.routing_mode);
      init_slabs(p.router_experts, rng);
      if (p.n_shared() > 0) init_slabs(p.shared_experts, rng);
      init_matrix(p.router_weight, rng);
      mept_layers_.emplace(layer, std::move(p));
    }
  }

  const ModelConfig& config() const { return cfg_; }

  const MeptLayerParams& mept_layer(int layer) const {
    auto it = mept_layers_.find(layer);
    if (it == mept_layers_.end())
      throw ValueError("layer " + std::to_string(layer) + " has no prompt experts");
    return it->second;
  }

  // rng drives routing noise / stochastic selection / dropout. training=false
  // routes on clean logits and disables dropout.
  ForwardTrace forward(const Batch& batch, bool record_trace, Rng& rng,
                       bool training = false) const {
    int batch_size = batch.size();
    if (batch_size == 0) throw ValueError("forward: empty batch");
    int text_len = batch.seq_len;
    if (text_len > cfg_.max_seq_len)
      throw ValueError("forward: sequence length " + std::to_string(text_len) +
                       " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len) +
                       "; pre-truncate inputs");

    ForwardTrace trace;
    trace.batch = batch_size;
    trace.text_len = text_len;
    trace.pad = batch.pad;

    // token + positional embeddings (text positions only)
    Tensor x = embed(token_embedding_, batch.token_ids, {batch_size, text_len});
    x = add_seq(x, slice(pos_embedding_, 0, 0, text_len));

    int cur_prompt = 0;
    Tensor mask;  // rebuilt only when the prompt prefix changes
    int mask_prefix = -1;
    for (int layer = 1; layer <= cfg_.n_layers; ++layer) {
      auto it = mept_layers_.find(layer);
      if (it != mept_layers_.end()) {
        const MeptLayerParams& mp = it->second;
        Tensor pooled_prev = pool_text(x, cur_prompt, batch, "routing input");
        RoutingDecision decision = route(mp, pooled_prev, cfg_.routing_mode, rng, training);
        Tensor prompt = compose_prompt(mp, decision, cfg_.routing_mode);
        Tensor text = cur_prompt > 0 ? slice(x, 1, cur_prompt, text_len) : x;
        x = concat(prompt, text, 1);
        cur_prompt = cfg_.prompt_len;
        if (record_trace) {
          LayerRoutingRecord rec;
          rec.layer = layer;
          rec.n_router = mp.n_router();
          rec.gate_probs = decision.gate_probs.values();
          rec.selected = decision.selected;
          rec.selected_prob = decision.selected_prob;
          trace.routing.push_back(std::move(rec));
        }
      }
      if (mask_prefix != cur_prompt) {
        mask = key_mask(batch, cur_prompt, cur_prompt + text_len);
        mask_prefix = cur_prompt;
      }
      x = run_block(blocks_[static_cast<size_t>(layer - 1)], x, mask, rng, training);
      if (layer == cfg_.n_layers) x = layer_norm(x, final_gain_, final_bias_);
      trace.hidden.push_back(x);
      trace.prompt_len.push_back(cur_prompt);
    }

    trace.pooled = pool_text(x, cur_prompt, batch, "classification head");
    trace.logits = add_bias(matmul(trace.pooled, head_weight_), head_bias_);
    return trace;
  }

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"token_embedding", token_embedding_});
    out.push_back({"pos_embedding", pos_embedding_});
    for (size_t l = 0; l < blocks_.size(); ++l) {
      const Block& b = blocks_[l];
      std::string p = "layer" + std::to_string(l + 1) + ".";
      out.push_back({p + "ln1.gain", b.ln1_gain});
      out.push_back({p + "ln1.bias", b.ln1_bias});
      out.push_back({p + "attn.wq", b.wq});
      out.push_back({p + "attn.bq", b.bq});
      out.push_back({p + "attn.wk", b.wk});
      out.push_back({p + "attn.bk", b.bk});
      out.push_back({p + "attn.wv", b.wv});
      out.push_back({p + "attn.bv", b.bv});
      out.push_back({p + "attn.wo", b.wo});
      out.push_back({p + "attn.bo", b.bo});
      out.push_back({p + "ln2.gain", b.ln2_gain});
      out.push_back({p + "ln2.bias", b.ln2_bias});
      out.push_back({p + "ffn.w_in", b.w_ffn_in});
      out.push_back({p + "ffn.b_in", b.b_ffn_in});
      out.push_back({p + "ffn.w_out", b.w_ffn_out});
      out.push_back({p + "ffn.b_out", b.b_ffn_out});
    }
    out.push_back({"final_norm.gain", final_gain_});
    out.push_back({"final_norm.bias", final_bias_});
    out.push_back({"head.weight", head_weight_});
    out.push_back({"head.bias", head_bias_});
    for (const auto& [layer, p] : mept_layers_) {
      std::string prefix = "layer" + std::to_string(layer) + ".mept.";
      out.push_back({prefix + "router_experts", p.router_experts});
      if (p.n_shared() > 0) out.push_back({prefix + "shared_experts", p.shared_experts});
      out.push_back({prefix + "router_weight", p.router_weight});
      out.push_back({prefix + "router_bias", p.router_bias});
    }
    return out;
  }

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_ffn_in, b_ffn_in, w_ffn_out, b_ffn_out;
  };

  Tensor init_normal(std::vector<int> shape, double std_dev, Rng& rng) const {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values_mut()) v = rng.normal() * std_dev;
    return t;
  }

  // Fan-based init for a 2-D weight [fan_in, fan_out].
  Tensor init_linear(std::vector<int> shape, Rng& rng) const {
    double fan_in = shape[0], fan_out = shape[1];
    double std_dev = cfg_.init == InitScheme::XavierNormal ? std::sqrt(2.0 / (fan_in + fan_out))
                                                           : std::sqrt(2.0 / fan_in);
    return init_normal(std::move(shape), std_dev, rng);
  }

  void init_matrix(Tensor t, Rng& rng) const {
    double fan_in = t.dim(0), fan_out = t.dim(1);
    double std_dev = cfg_.init == InitScheme::XavierNormal ? std::sqrt(2.0 / (fan_in + fan_out))
                                                           : std::sqrt(2.0 / fan_in);
    for (double& v : t.values_mut()) v = rng.normal() * std_dev;
  }

  // Expert slabs [n, m, d]: each m x d slab initialized like a weight matrix
  // with fan_in d.
  void init_slabs(Tensor t, Rng& rng) const {
    double m = t.dim(1), d = t.dim(2);
    double std_dev = cfg_.init == InitScheme::XavierNormal ? std::sqrt(2.0 / (m + d))
                                                           : std::sqrt(2.0 / d);
    for (double& v : t.values_mut()) v = rng.normal() * std_dev;
  }

  static Tensor ones(std::vector<int> shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values_mut()) v = 1.0;
    return t;
  }

  // Mean over non-prompt, non-pad positions of x [batch, prompt+text, d].
  Tensor pool_text(const Tensor& x, int prompt_prefix, const Batch& batch,
                   const char* what) const {
    int batch_size = batch.size();
    int seq = x.dim(1);
    int text_len = batch.seq_len;
    std::vector<double> weights(static_cast<size_t>(batch_size) * seq, 0.0);
    for (int b = 0; b < batch_size; ++b) {
      int valid = 0;
      for (int s = 0; s < text_len; ++s)
        if (!batch.pad[static_cast<size_t>(b) * text_len + s]) ++valid;
      if (valid == 0)
        throw ValueError(std::string("pooling for ") + what + ": example " + std::to_string(b) +
                         " is all padding");
      double w = 1.0 / valid;
      for (int s = 0; s < text_len; ++s)
        if (!batch.pad[static_cast<size_t>(b) * text_len + s])
          weights[static_cast<size_t>(b) * seq + prompt_prefix + s] = w;
    }
    return weighted_mean_seq(x, weights);
  }

  Tensor run_block(const Block& blk, const Tensor& x, const Tensor& mask, Rng& rng,
                   bool training) const {
    int batch_size = x.dim(0), seq = x.dim(1), d = x.dim(2);
    int heads = cfg_.n_heads, head_dim = d / heads;

    Tensor normed = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    auto split_heads = [&](const Tensor& t) {
      return reshape(permute(reshape(t, {batch_size, seq, heads, head_dim}), {0, 2, 1, 3}),
                     {batch_size * heads, seq, head_dim});
    };
    Tensor q = split_heads(add_bias(matmul(normed, blk.wq), blk.bq));
    Tensor k = split_heads(add_bias(matmul(normed, blk.wk), blk.bk));
    Tensor v = split_heads(add_bias(matmul(normed, blk.wv), blk.bv));

    Tensor scores = scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    scores = add(scores, mask);
    Tensor attn = softmax(scores, 2);
    Tensor ctx = bmm(attn, v);
    ctx = reshape(permute(reshape(ctx, {batch_size, heads, seq, head_dim}), {0, 2, 1, 3}),
                  {batch_size, seq, d});
    Tensor attn_out = add_bias(matmul(ctx, blk.wo), blk.bo);
    if (training && cfg_.dropout > 0.0) attn_out = dropout(attn_out, cfg_.dropout, rng);
    Tensor x1 = add(x, attn_out);

    Tensor normed2 = layer_norm(x1, blk.ln2_gain, blk.ln2_bias);
    Tensor mid = add_bias(matmul(normed2, blk.w_ffn_in), blk.b_ffn_in);
    mid = cfg_.activation == "gelu" ? gelu(mid) : relu(mid);
    Tensor ffn_out = add_bias(matmul(mid, blk.w_ffn_out), blk.b_ffn_out);
    if (training && cfg_.dropout > 0.0) ffn_out = dropout(ffn_out, cfg_.dropout, rng);
    return add(x1, ffn_out);
  }

  // Additive attention bias masking pad keys; prompts and text are visible to
  // every query.
  Tensor key_mask(const Batch& batch, int prompt_prefix, int seq) const {
    int batch_size = batch.size();
    int text_len = batch.seq_len;
    int heads = cfg_.n_heads;
    std::vector<double> bias(static_cast<size_t>(batch_size) * heads * seq * seq, 0.0);
    constexpr double kMasked = -1e30;
    for (int b = 0; b < batch_size; ++b) {
      for (int s = 0; s < text_len; ++s) {
        if (!batch.pad[static_cast<size_t>(b) * text_len + s]) continue;
        int key = prompt_prefix + s;
        for (int h = 0; h < heads; ++h) {
          size_t base = (static_cast<size_t>(b) * heads + h) * seq * seq;
          for (int qpos = 0; qpos < seq; ++qpos)
            bias[base + static_cast<size_t>(qpos) * seq + key] = kMasked;
        }
      }
    }
    return Tensor::from_data({batch_size * heads, seq, seq}, std::move(bias));
  }

  ModelConfig cfg_;
  Tensor token_embedding_, pos_embedding_;
  std::vector<Block> blocks_;
  Tensor final_gain_, final_bias_;
  Tensor head_weight_, head_bias_;
  std::map<int, MeptLayerParams> mept_layers_;
};

// Mean over non-prompt, non-pad positions of the stored hidden state at
// `layer` (1-based). At the final layer this equals the classification-head
// input.
inline Tensor pool_features(const ForwardTrace& trace, int layer) {
  if (layer < 1 || layer > static_cast<int>(trace.hidden.size()))
    throw ValueError("pool_features: layer " + std::to_string(layer) + " out of range [1," +
                     std::to_string(trace.hidden.size()) + "]");
  const Tensor& x = trace.hidden[static_cast<size_t>(layer - 1)];
  int prompt_prefix = trace.prompt_len[static_cast<size_t>(layer - 1)];
  int seq = x.dim(1);
  std::vector<double> weights(static_cast<size_t>(trace.batch) * seq, 0.0);
  for (int b = 0; b < trace.batch; ++b) {
    int valid = 0;
    for (int s = 0; s < trace.text_len; ++s)
      if (!trace.pad[static_cast<size_t>(b) * trace.text_len + s]) ++valid;
    if (valid == 0) throw ValueError("pool_features: example " + std::to_string(b) + " is all padding");
    double w = 1.0 / valid;
    for (int s = 0; s < trace.text_len; ++s)
      if (!trace.pad[static_cast<size_t>(b) * trace.text_len + s])
        weights[static_cast<size_t>(b) * seq + prompt_prefix + s] = w;
  }
  return weighted_mean_seq(x, weights);
}

// MEPT parameter accounting for a full model configuration.
inline ParamReport count_trainable_params(const ModelConfig& cfg) {
  cfg.validate();
  if (!cfg.mept_enabled()) return ParamReport{};
  return count_mept_params(static_cast<int>(cfg.prompt_layers.size()), cfg.n_router_experts,
                           cfg.n_shared_experts, cfg.prompt_len, cfg.hidden_dim,
                           cfg.routing_mode);
}

}  // namespace mept
