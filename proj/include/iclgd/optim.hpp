#pragma once

// Finetuning procedures: sequential vanilla GD and layer-causal GD (LCGD),
// plus toy-scale pretraining. Both finetuners are pure with respect to their
// input Parameters and record per-layer gradient norms at every update step.
//
// LCGD optimizes, one token at a time, the sum over layers of the
// cross-entropy of the frozen unembedding head applied to each layer's
// detached attention output; stop-gradient on the layer inputs and on the
// query confines the gradient of layer l's loss term to W_K^l and W_V^l.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "iclgd/model.hpp"
#include "iclgd/prng.hpp"
#include "iclgd/tasks.hpp"
#include "iclgd/tensor.hpp"

namespace iclgd {

enum class LossTokenPolicy { label_only, every_token };

struct FinetuneConfig {
  double learning_rate = 0.01;
  // Parameter names to update; empty means W_K and W_V of every layer.
  std::vector<std::string> trainable;
  LossTokenPolicy loss_token_policy = LossTokenPolicy::label_only;
  std::vector<std::size_t> demo_order;  // empty means given order
  std::size_t steps_per_demo = 1;
};

inline std::set<std::string> default_trainable(const ModelConfig& cfg) {
  std::set<std::string> s;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    s.insert(Parameters::kv_name(l, true));
    s.insert(Parameters::kv_name(l, false));
  }
  return s;
}

inline std::set<std::string> trainable_set(const Parameters& params,
                                           const FinetuneConfig& cfg) {
  if (cfg.trainable.empty()) return default_trainable(params.config);
  std::set<std::string> s;
  for (const auto& name : cfg.trainable) {
    if (const_cast<Parameters&>(params).find(name) == nullptr) {
      throw std::invalid_argument("trainable_set: unknown parameter " + name);
    }
    s.insert(name);
  }
  return s;
}

struct GradNormTrace {
  std::size_t n_layers = 0;
  std::size_t n_steps = 0;
  std::vector<double> norms;  // layer-major [n_layers x n_steps]

  double at(std::size_t layer, std::size_t step) const {
    return norms[layer * n_steps + step];
  }

  void append_step(const std::vector<double>& per_layer) {
    if (n_layers == 0) n_layers = per_layer.size();
    // stored column-append via rebuild; traces are short
    std::vector<double> next(n_layers * (n_steps + 1));
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t s = 0; s < n_steps; ++s)
        next[l * (n_steps + 1) + s] = norms[l * n_steps + s];
      next[l * (n_steps + 1) + n_steps] = per_layer[l];
    }
    norms = std::move(next);
    ++n_steps;
  }
};

struct FinetuneResult {
  Parameters params;
  GradNormTrace grad_norms;
};

namespace detail {

inline std::vector<std::pair<std::size_t, int>> loss_items(
    const std::vector<int>& tokens, LossTokenPolicy policy) {
  if (tokens.size() < 2) {
    throw std::invalid_argument("loss_items: prompt too short");
  }
  std::vector<std::pair<std::size_t, int>> items;
  if (policy == LossTokenPolicy::label_only) {
    items.emplace_back(tokens.size() - 2, tokens.back());
  } else {
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
      items.emplace_back(i, tokens[i + 1]);
  }
  return items;
}

inline std::vector<double> per_layer_norms(
    const std::map<std::string, Tensor>& grads, std::size_t n_layers) {
  std::vector<double> sq(n_layers, 0.0);
  for (const auto& [name, g] : grads) {
    if (name.rfind("layer", 0) != 0) continue;
    std::size_t l = std::stoul(name.substr(5));
    for (double v : g.data) sq[l] += v * v;
  }
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

inline void check_finite(double loss, const std::map<std::string, Tensor>& grads,
                         std::size_t step) {
  auto fail = [&](const std::string& what) {
    throw std::runtime_error("finetune: non-finite " + what + " at step " +
                             std::to_string(step));
  };
  if (!std::isfinite(loss)) fail("loss");
  for (const auto& [name, g] : grads)
    for (double v : g.data)
      if (!std::isfinite(v)) fail("gradient (" + name + ")");
}

inline void apply_update(Parameters& params,
                         const std::map<std::string, Tensor>& grads,
                         double lr) {
  for (const auto& [name, g] : grads) {
    Tensor* t = params.find(name);
    for (std::size_t i = 0; i < t->data.size(); ++i)
      t->data[i] -= lr * g.data[i];
  }
}

inline std::vector<std::size_t> resolve_order(std::size_t n,
                                              const FinetuneConfig& cfg) {
  if (cfg.demo_order.empty()) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    return order;
  }
  if (cfg.demo_order.size() != n) {
    throw std::invalid_argument("demo_order: size must match demo count");
  }
  return cfg.demo_order;
}

}  // namespace detail

// Vanilla-GD loss on one prompt: next-token cross-entropy at the positions the
// policy selects, averaged.
inline double gd_loss(const Parameters& params, const std::vector<int>& tokens,
                      LossTokenPolicy policy) {
  Tape tape;
  BoundParams bp = bind_params(tape, params);
  Tensor logits = forward_pass(tape, bp, tokens);
  return tape.cross_entropy(logits, detail::loss_items(tokens, policy)).data[0];
}

// Sequential vanilla GD: one full forward/backward per demonstration, updating
// only the trainable set.
inline FinetuneResult finetune_gd(const Parameters& params,
                                  const std::vector<std::vector<int>>& demos,
                                  const FinetuneConfig& cfg) {
  if (cfg.learning_rate < 0.0) {
    throw std::invalid_argument("finetune_gd: negative learning rate");
  }
  std::set<std::string> trainable = trainable_set(params, cfg);
  FinetuneResult res;
  res.params = params;
  std::size_t step = 0;
  for (std::size_t d : detail::resolve_order(demos.size(), cfg)) {
    for (std::size_t rep = 0; rep < cfg.steps_per_demo; ++rep, ++step) {
      Tape tape;
      BoundParams bp = bind_params(tape, res.params, trainable);
      Tensor logits = forward_pass(tape, bp, demos[d]);
      Tensor loss = tape.cross_entropy(
          logits, detail::loss_items(demos[d], cfg.loss_token_policy));
      auto grads = tape.backward(loss);
      detail::check_finite(loss.data[0], grads, step);
      res.grad_norms.append_step(
          detail::per_layer_norms(grads, params.config.n_layers));
      detail::apply_update(res.params, grads, cfg.learning_rate);
    }
  }
  return res;
}

// --- layer-causal GD ---------------------------------------------------------

namespace detail {

// One layer's detached early-exit cross-entropy at query position i.
// X is the layer's (stop-gradient or constant) post-LN input, qrow the
// detached query row; wk/wv carry gradient, wo and the unembedding head are
// frozen.
inline Tensor lcgd_layer_ce(Tape& tape, const ModelConfig& cfg,
                            const Tensor& X, const Tensor& qrow,
                            const Tensor& wk, const Tensor& wv,
                            const Tensor& wo_frozen, const Tensor& lnf_gain,
                            const Tensor& lnf_bias, const Tensor& unembed,
                            std::size_t i, int next_token) {
  std::size_t t = X.rows();
  std::size_t dh = cfg.d_head();
  double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mask mask(t, 0);
  for (std::size_t c = 0; c <= i; ++c) mask[c] = 1;
  Tensor K = tape.matmul(X, wk);
  Tensor V = tape.matmul(X, wv);
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Tensor qh = tape.cols(qrow, h * dh, dh);
    Tensor kh = tape.cols(K, h * dh, dh);
    Tensor vh = tape.cols(V, h * dh, dh);
    Tensor scores = tape.scale(tape.matmul_nt(qh, kh), att_scale);
    Tensor probs = tape.softmax_rows(scores, &mask);
    heads.push_back(tape.matmul(probs, vh));
  }
  Tensor hhat = tape.matmul(tape.concat_cols(heads), wo_frozen);
  Tensor u = tape.layer_norm_rows(hhat, lnf_gain, lnf_bias, cfg.layer_norm_eps);
  Tensor logits = tape.matmul(u, unembed);
  return tape.cross_entropy(logits, {{0, next_token}});
}

}  // namespace detail

// The LCGD objective at position i on an already-bound model: runs the full
// forward pass for the layer inputs, then sums the per-layer detached
// early-exit losses against token i+1.
inline Tensor lcgd_loss_on_tape(Tape& tape, const BoundParams& bp,
                                const std::vector<int>& tokens,
                                std::size_t i) {
  if (i + 1 >= tokens.size()) {
    throw std::invalid_argument("lcgd_loss: position has no next token");
  }
  const ModelConfig& cfg = *bp.config;
  std::vector<Tensor> xln;
  forward_pass(tape, bp, tokens, CaptureOptions{false, false, false, false},
               nullptr, &xln);
  Tensor total;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Tensor X = tape.stop_gradient(xln[l]);
    Tensor qrow = tape.stop_gradient(
        tape.rows(tape.matmul(xln[l], bp.layers[l].wq), i, 1));
    Tensor ce = detail::lcgd_layer_ce(
        tape, cfg, X, qrow, bp.layers[l].wk, bp.layers[l].wv,
        tape.stop_gradient(bp.layers[l].wo), tape.stop_gradient(bp.lnf_gain),
        tape.stop_gradient(bp.lnf_bias), tape.stop_gradient(bp.unembed), i,
        tokens[i + 1]);
    total = (l == 0) ? ce : tape.add(total, ce);
  }
  return total;
}

inline double lcgd_loss(const Parameters& params,
                        const std::vector<int>& tokens, std::size_t i) {
  Tape tape;
  BoundParams bp = bind_params(tape, params);
  return lcgd_loss_on_tape(tape, bp, tokens, i).data[0];
}

// Detached context for the LCGD loss: per-layer post-LN inputs and query
// projections, frozen at the given parameter values. The finite-difference
// oracle perturbs W_K/W_V against this fixed context, which is exactly the
// partial derivative the stop-gradient construction defines.
struct LcgdContext {
  std::vector<int> tokens;
  std::vector<Tensor> xln;  // per layer [T x d_model]
  std::vector<Tensor> q;    // per layer [T x d_model]
};

inline LcgdContext lcgd_context(const Parameters& params,
                                const std::vector<int>& tokens) {
  Tape tape;
  BoundParams bp = bind_params(tape, params);
  std::vector<Tensor> xln;
  forward_pass(tape, bp, tokens, CaptureOptions{false, false, false, false},
               nullptr, &xln);
  LcgdContext ctx;
  ctx.tokens = tokens;
  for (std::size_t l = 0; l < params.config.n_layers; ++l) {
    ctx.xln.push_back(Tensor(xln[l].shape, xln[l].data));
    Tensor q = tape.matmul(xln[l], bp.layers[l].wq);
    ctx.q.push_back(Tensor(q.shape, q.data));
  }
  return ctx;
}

// LCGD loss value with the detached context held fixed while wk/wv (and the
// frozen head) come from `params`.
inline double lcgd_loss_clamped(const Parameters& params,
                                const LcgdContext& ctx, std::size_t i) {
  if (i + 1 >= ctx.tokens.size()) {
    throw std::invalid_argument("lcgd_loss: position has no next token");
  }
  const ModelConfig& cfg = params.config;
  Tape tape;
  double total = 0.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Tensor X = tape.constant(ctx.xln[l]);
    Tensor qrow = tape.rows(tape.constant(ctx.q[l]), i, 1);
    Tensor ce = detail::lcgd_layer_ce(
        tape, cfg, X, qrow, tape.constant(params.layers[l].wk),
        tape.constant(params.layers[l].wv), tape.constant(params.layers[l].wo),
        tape.constant(params.lnf_gain), tape.constant(params.lnf_bias),
        tape.constant(params.unembed), i, ctx.tokens[i + 1]);
    total += ce.data[0];
  }
  return total;
}

// Layer-causal finetuning: steps once per selected token position, updating
// every layer's W_K/W_V simultaneously (their gradients are independent by
// construction), then advances with the updated weights.
inline FinetuneResult finetune_lcgd(const Parameters& params,
                                    const std::vector<std::vector<int>>& demos,
                                    const FinetuneConfig& cfg) {
  if (cfg.learning_rate < 0.0) {
    throw std::invalid_argument("finetune_lcgd: negative learning rate");
  }
  std::set<std::string> trainable = trainable_set(params, cfg);
  FinetuneResult res;
  res.params = params;
  std::size_t step = 0;
  for (std::size_t d : detail::resolve_order(demos.size(), cfg)) {
    const std::vector<int>& tokens = demos[d];
    std::vector<std::size_t> positions;
    if (cfg.loss_token_policy == LossTokenPolicy::label_only) {
      positions.push_back(tokens.size() - 2);
    } else {
      for (std::size_t i = 0; i + 1 < tokens.size(); ++i) positions.push_back(i);
    }
    for (std::size_t i : positions) {
      for (std::size_t rep = 0; rep < cfg.steps_per_demo; ++rep, ++step) {
        Tape tape;
        BoundParams bp = bind_params(tape, res.params, trainable);
        Tensor loss = lcgd_loss_on_tape(tape, bp, tokens, i);
        auto grads = tape.backward(loss);
        detail::check_finite(loss.data[0], grads, step);
        res.grad_norms.append_step(
            detail::per_layer_norms(grads, params.config.n_layers));
        detail::apply_update(res.params, grads, cfg.learning_rate);
      }
    }
  }
  return res;
}

// --- pretraining ---------------------------------------------------------------

struct PretrainResult {
  Parameters params;
  std::vector<double> loss_log;  // mean batch loss per step
};

// Plain-SGD next-token training on freshly sampled synthetic ICL episodes.
// This is the desk-scale stand-in for a pretrained checkpoint. clip > 0
// rescales each step's batch gradient to that global l2 norm when it
// exceeds it; the early structure-learning phase otherwise diverges at
// learning rates high enough for in-context behavior to emerge. start, when
// given, resumes from those parameters instead of a fresh initialization
// (the data stream is still keyed by seed, so resuming with a different seed
// continues on fresh episodes).
// policy selects which positions contribute to the loss: every_token is the
// standard choice; label_only concentrates the loss on the positions that
// predict demonstration labels (the in-context part of the task).
inline PretrainResult pretrain(
    const ModelConfig& model_cfg, const TaskConfig& task_cfg,
    std::size_t steps, std::size_t batch, double lr, std::uint64_t seed,
    double clip = 0.0, const Parameters* start = nullptr,
    LossTokenPolicy policy = LossTokenPolicy::every_token) {
  model_cfg.validate();
  task_cfg.validate();
  if (task_cfg.vocab_size() > model_cfg.vocab_size) {
    throw std::invalid_argument("pretrain: task vocabulary exceeds model vocab");
  }
  PretrainResult res;
  if (start != nullptr) {
    if (start->config != model_cfg) {
      throw std::invalid_argument(
          "pretrain: start parameters do not match config");
    }
    res.params = *start;
  } else {
    res.params = init_params(model_cfg, seed);
  }
  Prng data = Prng(seed).split("pretrain-data");
  std::set<std::string> all = all_param_names(res.params);
  for (std::size_t step = 0; step < steps; ++step) {
    std::map<std::string, Tensor> acc;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      Episode e = sample_episode(task_cfg, data);
      std::vector<int> tokens =
          format_icl_prompt(task_cfg, e, model_cfg.max_seq_len);
      Tape tape;
      BoundParams bp = bind_params(tape, res.params, all);
      Tensor logits = forward_pass(tape, bp, tokens);
      std::vector<std::pair<std::size_t, int>> items;
      if (policy == LossTokenPolicy::label_only) {
        // every position whose next token is a demonstration label, i.e. the
        // positions holding the arrow marker
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
          if (tokens[i] == task_cfg.arrow_id()) items.emplace_back(i, tokens[i + 1]);
        }
      } else {
        items = detail::loss_items(tokens, LossTokenPolicy::every_token);
      }
      Tensor loss = tape.cross_entropy(logits, items);
      auto grads = tape.backward(loss);
      loss_sum += loss.data[0];
      if (acc.empty()) {
        acc = std::move(grads);
      } else {
        for (auto& [name, g] : grads) {
          auto& a = acc[name];
          for (std::size_t i = 0; i < g.data.size(); ++i)
            a.data[i] += g.data[i];
        }
      }
    }
    double mean_loss = loss_sum / static_cast<double>(batch);
    // runaway-but-finite losses count as divergence too
    if (!std::isfinite(mean_loss) || mean_loss > 1e4) {
      throw std::runtime_error("pretrain: loss diverged at step " +
                               std::to_string(step));
    }
    for (auto& [name, g] : acc)
      for (auto& v : g.data) v /= static_cast<double>(batch);
    if (clip > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : acc)
        for (double v : g.data) sq += v * v;
      double norm = std::sqrt(sq);
      if (norm > clip) {
        double scale = clip / norm;
        for (auto& [name, g] : acc)
          for (auto& v : g.data) v *= scale;
      }
    }
    detail::apply_update(res.params, acc, lr);
    res.loss_log.push_back(mean_loss);
  }
  return res;
}

}  // namespace iclgd
