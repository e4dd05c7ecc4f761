#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fd_check.hpp"
#include "iclgd/model.hpp"
#include "iclgd/tasks.hpp"

using namespace iclgd;

namespace {
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 22;
  cfg.max_seq_len = 40;
  return cfg;
}
}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 10;  // not divisible by 2 heads? it is; make it odd
  cfg.n_heads = 3;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("init_params") {
  ModelConfig cfg = tiny_config();
  SECTION("deterministic per seed") {
    Parameters a = init_params(cfg, 5);
    Parameters b = init_params(cfg, 5);
    bool equal = true;
    a.for_each([&](const std::string& name, const Tensor& t) {
      equal = equal && t.data == b.find(name)->data;
    });
    REQUIRE(equal);
  }
  SECTION("layer-norm gains one, biases zero") {
    Parameters p = init_params(cfg, 5);
    for (const auto& l : p.layers) {
      for (double v : l.ln1_gain.data) REQUIRE(v == 1.0);
      for (double v : l.ln1_bias.data) REQUIRE(v == 0.0);
      for (double v : l.ln2_gain.data) REQUIRE(v == 1.0);
      for (double v : l.ln2_bias.data) REQUIRE(v == 0.0);
    }
    for (double v : p.lnf_gain.data) REQUIRE(v == 1.0);
    for (double v : p.lnf_bias.data) REQUIRE(v == 0.0);
  }
  SECTION("weight std close to 0.02") {
    ModelConfig big = tiny_config();
    big.d_model = 64;
    big.mlp_ratio = 6;  // push sampled entry count past 1e5
    Parameters p = init_params(big, 7);
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    p.for_each([&](const std::string& name, const Tensor& t) {
      if (!is_block_weight(name) || name.find("_b") != std::string::npos) return;
      for (double v : t.data) {
        s += v;
        s2 += v * v;
        ++n;
      }
    });
    REQUIRE(n >= 100000);
    double mean = s / static_cast<double>(n);
    double stdv = std::sqrt(s2 / static_cast<double>(n) - mean * mean);
    REQUIRE(std::abs(stdv - 0.02) <= 0.001);
  }
}

TEST_CASE("init_trained_embeddings") {
  ModelConfig cfg = tiny_config();
  Parameters trained = init_params(cfg, 1);
  // make the "trained" model distinguishable
  for (auto& v : trained.tok_emb.data) v += 0.5;
  for (auto& l : trained.layers)
    for (auto& v : l.wq.data) v += 0.25;
  Parameters p = init_trained_embeddings(cfg, trained, 99);

  SECTION("embeddings, unembedding and layer norms copied bitwise") {
    REQUIRE(p.tok_emb.data == trained.tok_emb.data);
    REQUIRE(p.pos_emb.data == trained.pos_emb.data);
    REQUIRE(p.unembed.data == trained.unembed.data);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      REQUIRE(p.layers[l].ln1_gain.data == trained.layers[l].ln1_gain.data);
      REQUIRE(p.layers[l].ln2_bias.data == trained.layers[l].ln2_bias.data);
    }
    REQUIRE(p.lnf_gain.data == trained.lnf_gain.data);
  }
  SECTION("attention weights re-randomized") {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      double max_diff = 0.0;
      for (std::size_t i = 0; i < p.layers[l].wq.size(); ++i)
        max_diff = std::max(max_diff, std::abs(p.layers[l].wq.data[i] -
                                               trained.layers[l].wq.data[i]));
      REQUIRE(max_diff > 0.0);
    }
  }
  SECTION("re-drawn weights equal init_params with the same seed") {
    Parameters fresh = init_params(cfg, 99);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      REQUIRE(p.layers[l].wq.data == fresh.layers[l].wq.data);
      REQUIRE(p.layers[l].wk.data == fresh.layers[l].wk.data);
      REQUIRE(p.layers[l].wv.data == fresh.layers[l].wv.data);
      REQUIRE(p.layers[l].wo.data == fresh.layers[l].wo.data);
      REQUIRE(p.layers[l].mlp_w1.data == fresh.layers[l].mlp_w1.data);
      REQUIRE(p.layers[l].mlp_w2.data == fresh.layers[l].mlp_w2.data);
    }
  }
  SECTION("config mismatch is an error") {
    ModelConfig other = cfg;
    other.n_layers = 3;
    REQUIRE_THROWS_AS(init_trained_embeddings(other, trained, 1),
                      std::invalid_argument);
  }
}

TEST_CASE("forward_trace shapes and purity") {
  ModelConfig cfg = tiny_config();
  Parameters p = init_params(cfg, 3);
  std::vector<int> tokens = {1, 4, 9, 16, 2, 20};
  std::size_t t = tokens.size();
  ForwardTrace tr = forward_trace(p, tokens);

  SECTION("shape contract") {
    REQUIRE(tr.attn_out.size() == cfg.n_layers);
    for (const auto& h : tr.attn_out) REQUIRE(h.size() == t * cfg.d_model);
    REQUIRE(tr.maps.size() == cfg.n_layers);
    for (const auto& layer : tr.maps) {
      REQUIRE(layer.size() == cfg.n_heads);
      for (const auto& m : layer) {
        REQUIRE(m.unmasked().size() == t * (t + 1) / 2);
        // future positions carry the masked marker
        for (std::size_t r = 0; r < t; ++r)
          for (std::size_t c = r + 1; c < t; ++c)
            REQUIRE(AttnMap::is_masked(m.v[r * t + c]));
      }
    }
    REQUIRE(tr.logits.size() == t * cfg.vocab_size);
  }
  SECTION("replay is bitwise identical") {
    ForwardTrace tr2 = forward_trace(p, tokens);
    REQUIRE(tr.logits == tr2.logits);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      REQUIRE(tr.attn_out[l] == tr2.attn_out[l]);
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto& a = tr.maps[l][h].unmasked();
        const auto& b = tr2.maps[l][h].unmasked();
        REQUIRE(a == b);
      }
    }
  }
  SECTION("capture off does not change logits") {
    CaptureOptions off;
    off.attention_outputs = false;
    off.attention_maps = false;
    ForwardTrace tr2 = forward_trace(p, tokens, off);
    REQUIRE(tr.logits == tr2.logits);
  }
  SECTION("errors") {
    REQUIRE_THROWS_AS(forward_trace(p, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(forward_trace(p, std::vector<int>(64, 1)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(forward_trace(p, {1, 2, 99}), std::out_of_range);
  }
}

TEST_CASE("unembed") {
  ModelConfig cfg = tiny_config();
  Parameters p = init_params(cfg, 8);
  std::vector<int> tokens = {3, 7, 11};
  SECTION("matches the model's own output logits") {
    CaptureOptions cap;
    cap.hidden_states = true;
    ForwardTrace tr = forward_trace(p, tokens, cap);
    std::vector<double> h(tr.hidden.back().end() - cfg.d_model,
                          tr.hidden.back().end());
    std::vector<double> logits = unembed(p, h);
    for (std::size_t c = 0; c < cfg.vocab_size; ++c) {
      REQUIRE(logits[c] ==
              tr.logits[(tokens.size() - 1) * cfg.vocab_size + c]);
    }
  }
  SECTION("zero unembedding matrix gives zero logits") {
    Parameters z = p;
    std::fill(z.unembed.data.begin(), z.unembed.data.end(), 0.0);
    for (double v : unembed(z, std::vector<double>(cfg.d_model, 1.0)))
      REQUIRE(v == 0.0);
  }
  SECTION("CE(unembed(h), t) gradient w.r.t. h matches finite differences") {
    Prng prng(17);
    Tensor h = gaussian_sample(prng, {1, cfg.d_model}, 1.0);
    int target = 5;
    Tape tape;
    Tensor hl = tape.leaf(h, "h");
    Tensor hn = tape.layer_norm_rows(hl, tape.constant(p.lnf_gain),
                                     tape.constant(p.lnf_bias),
                                     cfg.layer_norm_eps);
    Tensor logits = tape.matmul(hn, tape.constant(p.unembed));
    auto grads = tape.backward(tape.cross_entropy(logits, {{0, target}}));
    Tensor numeric = fd::gradient(h, [&] {
      return cross_entropy_logits(unembed(p, h.data), target);
    });
    REQUIRE(fd::max_rel_err(grads.at("h"), numeric) <= 1e-5);
  }
}

TEST_CASE("icl_slice") {
  ModelConfig cfg = tiny_config();
  Parameters p = init_params(cfg, 12);
  TaskConfig task;
  Prng prng(4);
  Episode e = sample_episode(task, prng);
  std::vector<int> icl = format_icl_prompt(task, e, cfg.max_seq_len);
  auto [start, len] = icl_test_span(task, e);
  ForwardTrace full = forward_trace(p, icl);
  ForwardTrace sliced = icl_slice(full, start, len);

  SECTION("span arithmetic and unmasked counts") {
    REQUIRE(start + len == icl.size());
    REQUIRE(sliced.seq_len == len);
    REQUIRE(sliced.maps[0][0].unmasked().size() == len * (len + 1) / 2);
  }
  SECTION("full-sequence span is the identity") {
    ForwardTrace id = icl_slice(full, 0, full.seq_len);
    REQUIRE(id.attn_out[0] == full.attn_out[0]);
    REQUIRE(id.maps[1][1].unmasked() == full.maps[1][1].unmasked());
  }
  SECTION("zero-demonstration ICL equals ZSL bitwise") {
    Episode bare = e;
    bare.demos.clear();
    std::vector<int> icl0 = format_icl_prompt(task, bare);
    std::vector<int> zsl = format_zsl_prompt(task, bare);
    REQUIRE(icl0 == zsl);
    ForwardTrace a = icl_slice(forward_trace(p, icl0), 0, icl0.size());
    ForwardTrace b = forward_trace(p, zsl);
    REQUIRE(a.logits == b.logits);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      REQUIRE(a.attn_out[l] == b.attn_out[l]);
      for (std::size_t h = 0; h < cfg.n_heads; ++h)
        REQUIRE(a.maps[l][h].unmasked() == b.maps[l][h].unmasked());
    }
  }
  SECTION("empty span is an error") {
    REQUIRE_THROWS_AS(icl_slice(full, 2, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(icl_slice(full, full.seq_len, 1), std::out_of_range);
  }
}

TEST_CASE("post-residual capture switch") {
  ModelConfig cfg = tiny_config();
  Parameters p = init_params(cfg, 2);
  std::vector<int> tokens = {0, 1, 2};
  CaptureOptions pre, post;
  post.post_residual = true;
  ForwardTrace a = forward_trace(p, tokens, pre);
  ForwardTrace b = forward_trace(p, tokens, post);
  REQUIRE(a.attn_out[0] != b.attn_out[0]);
  REQUIRE(a.logits == b.logits);
}
