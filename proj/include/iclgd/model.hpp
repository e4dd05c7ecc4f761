#pragma once

// Decoder-only pre-layer-norm transformer with trace capture.
//
// The forward pass records, per layer, the attention sublayer output h
// (after the output projection, before the residual add by default) and,
// per head, the pre-softmax attention logits q.k^T/sqrt(d_head) with future
// positions carrying a masked marker. One code path serves both traced
// evaluation (all parameters bound as constants) and training (selected
// parameters bound as named leaves).

#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "iclgd/prng.hpp"
#include "iclgd/tensor.hpp"

namespace iclgd {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t vocab_size = 22;
  std::size_t max_seq_len = 64;
  std::size_t mlp_ratio = 4;
  double layer_norm_eps = 1e-5;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t d_mlp() const { return mlp_ratio * d_model; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || vocab_size < 1 ||
        max_seq_len < 1 || mlp_ratio < 1) {
      throw std::invalid_argument("ModelConfig: all sizes must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("ModelConfig: d_model not divisible by n_heads");
    }
    if (layer_norm_eps <= 0.0) {
      throw std::invalid_argument("ModelConfig: layer_norm_eps must be > 0");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor wq, wk, wv, wo;        // [d_model x d_model], head-partitioned
  Tensor ln1_gain, ln1_bias;    // attention layer norm
  Tensor mlp_w1, mlp_b1;        // [d_model x d_mlp], [d_mlp]
  Tensor mlp_w2, mlp_b2;        // [d_mlp x d_model], [d_model]
  Tensor ln2_gain, ln2_bias;    // MLP layer norm
};

struct Parameters {
  ModelConfig config;
  Tensor tok_emb;               // [V x d_model]
  Tensor pos_emb;               // [max_seq_len x d_model]
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;    // final layer norm
  Tensor unembed;               // [d_model x V]

  template <class F>
  void for_each(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      f(p + "wq", layers[l].wq);
      f(p + "wk", layers[l].wk);
      f(p + "wv", layers[l].wv);
      f(p + "wo", layers[l].wo);
      f(p + "ln1_gain", layers[l].ln1_gain);
      f(p + "ln1_bias", layers[l].ln1_bias);
      f(p + "mlp_w1", layers[l].mlp_w1);
      f(p + "mlp_b1", layers[l].mlp_b1);
      f(p + "mlp_w2", layers[l].mlp_w2);
      f(p + "mlp_b2", layers[l].mlp_b2);
      f(p + "ln2_gain", layers[l].ln2_gain);
      f(p + "ln2_bias", layers[l].ln2_bias);
    }
    f("final_ln_gain", lnf_gain);
    f("final_ln_bias", lnf_bias);
    f("unembed", unembed);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each(
        [&](const std::string& n, Tensor& t) {
          f(n, static_cast<const Tensor&>(t));
        });
  }

  Tensor* find(const std::string& name) {
    Tensor* out = nullptr;
    for_each([&](const std::string& n, Tensor& t) {
      if (n == name) out = &t;
    });
    return out;
  }

  static std::string kv_name(std::size_t layer, bool key) {
    return "layer" + std::to_string(layer) + (key ? ".wk" : ".wv");
  }
};

// Names of the attention/MLP weights (everything *not* kept by the
// Trained-Embeddings baseline).
inline bool is_block_weight(const std::string& name) {
  return name.find(".wq") != std::string::npos ||
         name.find(".wk") != std::string::npos ||
         name.find(".wv") != std::string::npos ||
         name.find(".wo") != std::string::npos ||
         name.find(".mlp_") != std::string::npos;
}

inline bool is_bias_or_norm(const std::string& name) {
  return name.find("ln") != std::string::npos ||
         name.find("_b") != std::string::npos;
}

inline Parameters make_empty_params(const ModelConfig& cfg) {
  cfg.validate();
  Parameters p;
  p.config = cfg;
  p.tok_emb = Tensor::zeros({cfg.vocab_size, cfg.d_model});
  p.pos_emb = Tensor::zeros({cfg.max_seq_len, cfg.d_model});
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.wq = Tensor::zeros({cfg.d_model, cfg.d_model});
    l.wk = Tensor::zeros({cfg.d_model, cfg.d_model});
    l.wv = Tensor::zeros({cfg.d_model, cfg.d_model});
    l.wo = Tensor::zeros({cfg.d_model, cfg.d_model});
    l.ln1_gain = Tensor::zeros({cfg.d_model});
    l.ln1_bias = Tensor::zeros({cfg.d_model});
    l.mlp_w1 = Tensor::zeros({cfg.d_model, cfg.d_mlp()});
    l.mlp_b1 = Tensor::zeros({cfg.d_mlp()});
    l.mlp_w2 = Tensor::zeros({cfg.d_mlp(), cfg.d_model});
    l.mlp_b2 = Tensor::zeros({cfg.d_model});
    l.ln2_gain = Tensor::zeros({cfg.d_model});
    l.ln2_bias = Tensor::zeros({cfg.d_model});
  }
  p.lnf_gain = Tensor::zeros({cfg.d_model});
  p.lnf_bias = Tensor::zeros({cfg.d_model});
  p.unembed = Tensor::zeros({cfg.d_model, cfg.vocab_size});
  return p;
}

constexpr double kInitStd = 0.02;

// Untrained "No Training" baseline: weights N(0, 0.02^2), layer-norm gains 1,
// all biases 0. Each tensor draws from its own name-keyed split stream so
// partial re-randomization reproduces the same values.
inline Parameters init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters p = make_empty_params(cfg);
  Prng root(seed);
  p.for_each([&](const std::string& name, Tensor& t) {
    if (name.find("gain") != std::string::npos) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (name.find("bias") != std::string::npos ||
               name.find("_b") != std::string::npos) {
      std::fill(t.data.begin(), t.data.end(), 0.0);
    } else {
      Prng s = root.split(name);
      for (auto& v : t.data) v = s.normal(kInitStd);
    }
  });
  return p;
}

// "Trained Embeddings" baseline: keep token/positional embeddings, the
// unembedding matrix and every layer norm from the trained model; re-draw all
// attention and MLP weights exactly as init_params(cfg, seed) would.
inline Parameters init_trained_embeddings(const ModelConfig& cfg,
                                          const Parameters& trained,
                                          std::uint64_t seed) {
  if (trained.config != cfg) {
    throw std::invalid_argument(
        "init_trained_embeddings: trained parameters do not match config");
  }
  Parameters p = trained;
  Prng root(seed);
  p.for_each([&](const std::string& name, Tensor& t) {
    if (!is_block_weight(name)) return;
    if (name.find("_b") != std::string::npos) {
      std::fill(t.data.begin(), t.data.end(), 0.0);
    } else {
      Prng s = root.split(name);
      for (auto& v : t.data) v = s.normal(kInitStd);
    }
  });
  return p;
}

// --- trace ------------------------------------------------------------------

// Pre-softmax attention logits over a t x t causal block. Entries whose key
// position is in the query's future hold the masked marker (quiet NaN) and are
// excluded from every metric.
struct AttnMap {
  std::size_t t = 0;
  std::vector<double> v;  // row-major t x t

  static double masked_marker() {
    return std::numeric_limits<double>::quiet_NaN();
  }
  static bool is_masked(double x) { return std::isnan(x); }

  std::size_t unmasked_count() const { return t * (t + 1) / 2; }

  // Lower triangle flattened row-major (query-major).
  std::vector<double> unmasked() const {
    std::vector<double> out;
    out.reserve(unmasked_count());
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c <= r; ++c) out.push_back(v[r * t + c]);
    return out;
  }
};

enum class Setting { ZSL, ICL, FT_GD, FT_LCGD };

inline const char* setting_name(Setting s) {
  switch (s) {
    case Setting::ZSL: return "ZSL";
    case Setting::ICL: return "ICL";
    case Setting::FT_GD: return "FT_GD";
    case Setting::FT_LCGD: return "FT_LCGD";
  }
  return "?";
}

struct CaptureOptions {
  bool attention_outputs = true;
  bool attention_maps = true;
  bool hidden_states = false;
  bool post_residual = false;  // capture h after the residual add instead
};

struct ForwardTrace {
  std::size_t seq_len = 0;
  std::size_t n_layers = 0, n_heads = 0, d_model = 0, vocab = 0;
  std::vector<double> logits;                 // [T x V]
  std::vector<std::vector<double>> attn_out;  // L entries of [T x d_model]
  std::vector<std::vector<AttnMap>> maps;     // [L][H]
  std::vector<std::vector<double>> hidden;    // optional, L of [T x d_model]

  // h^(l) at one position as a contiguous vector.
  std::vector<double> attn_out_at(std::size_t layer, std::size_t pos) const {
    const auto& m = attn_out[layer];
    return std::vector<double>(m.begin() + pos * d_model,
                               m.begin() + (pos + 1) * d_model);
  }
};

// --- forward -----------------------------------------------------------------

struct BoundLayer {
  Tensor wq, wk, wv, wo, ln1_gain, ln1_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
      ln2_gain, ln2_bias;
};

struct BoundParams {
  const ModelConfig* config = nullptr;
  Tensor tok_emb, pos_emb;
  std::vector<BoundLayer> layers;
  Tensor lnf_gain, lnf_bias, unembed;
};

// Bind parameters onto a tape. Names in `trainable` become named leaves whose
// gradients backward() reports; everything else is a constant.
inline BoundParams bind_params(Tape& tape, const Parameters& p,
                               const std::set<std::string>& trainable = {}) {
  BoundParams b;
  b.config = &p.config;
  auto bind1 = [&](const std::string& name, const Tensor& t) {
    return trainable.count(name) ? tape.leaf(t, name) : tape.constant(t);
  };
  p.for_each([&](const std::string& name, const Tensor& t) {
    Tensor bound = bind1(name, t);
    if (name == "tok_emb") b.tok_emb = bound;
    else if (name == "pos_emb") b.pos_emb = bound;
    else if (name == "final_ln_gain") b.lnf_gain = bound;
    else if (name == "final_ln_bias") b.lnf_bias = bound;
    else if (name == "unembed") b.unembed = bound;
    else {
      std::size_t l = std::stoul(name.substr(5));
      if (b.layers.size() <= l) b.layers.resize(l + 1);
      std::string field = name.substr(name.find('.') + 1);
      BoundLayer& bl = b.layers[l];
      if (field == "wq") bl.wq = bound;
      else if (field == "wk") bl.wk = bound;
      else if (field == "wv") bl.wv = bound;
      else if (field == "wo") bl.wo = bound;
      else if (field == "ln1_gain") bl.ln1_gain = bound;
      else if (field == "ln1_bias") bl.ln1_bias = bound;
      else if (field == "mlp_w1") bl.mlp_w1 = bound;
      else if (field == "mlp_b1") bl.mlp_b1 = bound;
      else if (field == "mlp_w2") bl.mlp_w2 = bound;
      else if (field == "mlp_b2") bl.mlp_b2 = bound;
      else if (field == "ln2_gain") bl.ln2_gain = bound;
      else if (field == "ln2_bias") bl.ln2_bias = bound;
    }
  });
  return b;
}

inline std::set<std::string> all_param_names(const Parameters& p) {
  std::set<std::string> names;
  p.for_each([&](const std::string& n, const Tensor&) { names.insert(n); });
  return names;
}

inline Mask causal_mask(std::size_t t) {
  Mask m(t * t, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c <= r; ++c) m[r * t + c] = 1;
  return m;
}

// Full forward pass on `tape`. Optionally fills `trace`, and collects the
// per-layer post-LN attention inputs into `ln1_out` (used by the layer-causal
// loss). Returns logits [T x V].
inline Tensor forward_pass(Tape& tape, const BoundParams& bp,
                           const std::vector<int>& tokens,
                           const CaptureOptions& capture = {},
                           ForwardTrace* trace = nullptr,
                           std::vector<Tensor>* ln1_out = nullptr) {
  const ModelConfig& cfg = *bp.config;
  std::size_t t = tokens.size();
  if (t == 0) throw std::invalid_argument("forward_pass: empty token list");
  if (t > cfg.max_seq_len) {
    throw std::invalid_argument("forward_pass: prompt exceeds max_seq_len");
  }
  std::size_t dh = cfg.d_head();
  double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mask cmask = causal_mask(t);

  if (trace) {
    trace->seq_len = t;
    trace->n_layers = cfg.n_layers;
    trace->n_heads = cfg.n_heads;
    trace->d_model = cfg.d_model;
    trace->vocab = cfg.vocab_size;
    trace->attn_out.assign(cfg.n_layers, {});
    trace->maps.assign(cfg.n_layers, {});
    trace->hidden.assign(capture.hidden_states ? cfg.n_layers : 0, {});
  }

  Tensor x = tape.add(tape.gather_rows(bp.tok_emb, tokens),
                      tape.rows(bp.pos_emb, 0, t));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const BoundLayer& lp = bp.layers[l];
    Tensor a = tape.layer_norm_rows(x, lp.ln1_gain, lp.ln1_bias,
                                    cfg.layer_norm_eps);
    if (ln1_out) ln1_out->push_back(a);
    Tensor q = tape.matmul(a, lp.wq);
    Tensor k = tape.matmul(a, lp.wk);
    Tensor v = tape.matmul(a, lp.wv);
    std::vector<Tensor> head_out;
    head_out.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      Tensor qh = tape.cols(q, h * dh, dh);
      Tensor kh = tape.cols(k, h * dh, dh);
      Tensor vh = tape.cols(v, h * dh, dh);
      Tensor scores = tape.scale(tape.matmul_nt(qh, kh), att_scale);
      if (trace && capture.attention_maps) {
        AttnMap am;
        am.t = t;
        am.v = scores.data;
        for (std::size_t r = 0; r < t; ++r)
          for (std::size_t c = r + 1; c < t; ++c)
            am.v[r * t + c] = AttnMap::masked_marker();
        trace->maps[l].push_back(std::move(am));
      }
      Tensor probs = tape.softmax_rows(scores, &cmask);
      head_out.push_back(tape.matmul(probs, vh));
    }
    Tensor att = tape.matmul(tape.concat_cols(head_out), lp.wo);
    Tensor x_next = tape.add(x, att);
    if (trace && capture.attention_outputs) {
      trace->attn_out[l] = capture.post_residual ? x_next.data : att.data;
    }
    x = x_next;
    Tensor m = tape.layer_norm_rows(x, lp.ln2_gain, lp.ln2_bias,
                                    cfg.layer_norm_eps);
    Tensor hmid = tape.gelu(tape.add_row(tape.matmul(m, lp.mlp_w1), lp.mlp_b1));
    Tensor mlp = tape.add_row(tape.matmul(hmid, lp.mlp_w2), lp.mlp_b2);
    x = tape.add(x, mlp);
    if (trace && capture.hidden_states) trace->hidden[l] = x.data;
  }
  Tensor xf = tape.layer_norm_rows(x, bp.lnf_gain, bp.lnf_bias,
                                   cfg.layer_norm_eps);
  Tensor logits = tape.matmul(xf, bp.unembed);
  if (trace) trace->logits = logits.data;
  return logits;
}

// Pure traced evaluation.
inline ForwardTrace forward_trace(const Parameters& params,
                                  const std::vector<int>& tokens,
                                  const CaptureOptions& capture = {}) {
  Tape tape;
  BoundParams bp = bind_params(tape, params);
  ForwardTrace trace;
  forward_pass(tape, bp, tokens, capture, &trace);
  return trace;
}

// Unembedding head U(.): final layer norm followed by the unembedding matrix.
inline std::vector<double> unembed(const Parameters& params,
                                   const std::vector<double>& h) {
  const ModelConfig& cfg = params.config;
  if (h.size() != cfg.d_model) {
    throw std::invalid_argument("unembed: hidden state has wrong length");
  }
  Tape tape;
  Tensor hn = tape.layer_norm_rows(
      tape.constant(Tensor({1, cfg.d_model}, h)),
      tape.constant(params.lnf_gain), tape.constant(params.lnf_bias),
      cfg.layer_norm_eps);
  Tensor logits = tape.matmul(hn, tape.constant(params.unembed));
  return logits.data;
}

// Restrict a trace to a contiguous span of positions: attention outputs keep
// rows in the span; maps keep the block where both query and key lie in the
// span. With demonstrations stripped this makes ICL traces shape-compatible
// with ZSL/FT traces of the bare prompt.
inline ForwardTrace icl_slice(const ForwardTrace& trace, std::size_t start,
                              std::size_t len) {
  if (len == 0) throw std::invalid_argument("icl_slice: empty span");
  if (start + len > trace.seq_len) {
    throw std::out_of_range("icl_slice: span out of range");
  }
  ForwardTrace out;
  out.seq_len = len;
  out.n_layers = trace.n_layers;
  out.n_heads = trace.n_heads;
  out.d_model = trace.d_model;
  out.vocab = trace.vocab;
  if (!trace.logits.empty()) {
    out.logits.assign(trace.logits.begin() + start * trace.vocab,
                      trace.logits.begin() + (start + len) * trace.vocab);
  }
  out.attn_out.resize(trace.attn_out.size());
  for (std::size_t l = 0; l < trace.attn_out.size(); ++l) {
    if (trace.attn_out[l].empty()) continue;
    out.attn_out[l].assign(
        trace.attn_out[l].begin() + start * trace.d_model,
        trace.attn_out[l].begin() + (start + len) * trace.d_model);
  }
  out.maps.resize(trace.maps.size());
  for (std::size_t l = 0; l < trace.maps.size(); ++l) {
    for (const AttnMap& m : trace.maps[l]) {
      AttnMap s;
      s.t = len;
      s.v.resize(len * len);
      for (std::size_t r = 0; r < len; ++r)
        for (std::size_t c = 0; c < len; ++c)
          s.v[r * len + c] = m.v[(start + r) * m.t + (start + c)];
      out.maps[l].push_back(std::move(s));
    }
  }
  out.hidden.resize(trace.hidden.size());
  for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
    if (trace.hidden[l].empty()) continue;
    out.hidden[l].assign(
        trace.hidden[l].begin() + start * trace.d_model,
        trace.hidden[l].begin() + (start + len) * trace.d_model);
  }
  return out;
}

}  // namespace iclgd
