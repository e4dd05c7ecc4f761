// Acceptance gate: one pass/fail line per criterion, nonzero exit if any
// fail. Usage: acceptance <trained-checkpoint>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "iclgd/harness.hpp"

using namespace iclgd;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  if (!pass) ++g_failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << criterion << ": "
            << detail << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 1. Constructed-noise validation of the analytic 1/4 value.
void criterion1() {
  auto t0 = std::chrono::steady_clock::now();
  NoiseCheckRun run = run_noise_check(1024, 256, 7);
  double secs = seconds_since(t0);
  bool norm_ok = run.result.mean_norm_variant >= 0.22 &&
                 run.result.mean_norm_variant <= 0.28;
  bool plain_ok = std::abs(run.result.mean_plain_variant) <= 0.02;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "noise check: norm mean %.4f in [0.22,0.28], plain mean %.4f "
                "in [-0.02,0.02], %.1fs < 10s",
                run.result.mean_norm_variant, run.result.mean_plain_variant,
                secs);
  report(1, norm_ok && plain_ok && secs < 10.0, buf);
}

// 2. Finite-difference check of every trainable gradient.
void criterion2() {
  auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep = run_gradcheck(3);
  double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& e : rep.entries) worst = std::max(worst, e.max_rel_err);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "gradcheck: %zu tensors, max rel err %.2e <= 1e-4, %.1fs < 60s",
                rep.entries.size(), worst, secs);
  report(2, rep.pass && secs < 60.0, buf);
}

// 3. Layer causality of LCGD; non-causality of vanilla GD.
void criterion3() {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 22;
  cfg.max_seq_len = 40;
  Parameters params = init_params(cfg, 60);
  TaskConfig task;
  Prng prng(28);
  Episode e = sample_episode(task, prng);
  std::vector<int> tokens = format_demo_prompt(task, e.demos[0]);
  std::size_t pos = tokens.size() - 2;

  auto lcgd_grads = [&](const Parameters& p) {
    Tape tape;
    BoundParams bp = bind_params(tape, p, default_trainable(cfg));
    return tape.backward(lcgd_loss_on_tape(tape, bp, tokens, pos));
  };
  auto base = lcgd_grads(params);
  bool causal = true;
  double worst = 0.0;
  Prng noise(1);
  for (std::size_t l = 0; l + 1 < cfg.n_layers; ++l) {
    Parameters perturbed = params;
    perturbed.for_each([&](const std::string& name, Tensor& t) {
      if (name.rfind("layer", 0) != 0) return;
      if (std::stoul(name.substr(5)) <= l) return;
      for (auto& v : t.data) v += noise.uniform(-0.5, 0.5);
    });
    auto moved = lcgd_grads(perturbed);
    for (bool key : {true, false}) {
      std::string name = Parameters::kv_name(l, key);
      const auto& a = base.at(name).data;
      const auto& b = moved.at(name).data;
      for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
        if (std::abs(a[i] - b[i]) > 1e-12) causal = false;
      }
    }
  }

  auto gd_grads = [&](const Parameters& p) {
    Tape tape;
    BoundParams bp = bind_params(tape, p, default_trainable(cfg));
    Tensor logits = forward_pass(tape, bp, tokens);
    return tape.backward(tape.cross_entropy(logits, {{pos, tokens[pos + 1]}}));
  };
  auto gd_base = gd_grads(params);
  Parameters perturbed = params;
  Prng noise2(2);
  perturbed.for_each([&](const std::string& name, Tensor& t) {
    if (name.rfind("layer1.", 0) != 0) return;
    for (auto& v : t.data) v += noise2.uniform(-0.1, 0.1);
  });
  auto gd_moved = gd_grads(perturbed);
  double witness = 0.0;
  for (bool key : {true, false}) {
    std::string name = Parameters::kv_name(0, key);
    const auto& a = gd_base.at(name).data;
    const auto& b = gd_moved.at(name).data;
    for (std::size_t i = 0; i < a.size(); ++i)
      witness = std::max(witness, std::abs(a[i] - b[i]));
  }
  double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "layer causality: LCGD max cross-layer drift %.1e <= 1e-12, "
                "GD witness %.1e >= 1e-6, %.1fs < 30s",
                worst, witness, secs);
  report(3, causal && witness >= 1e-6 && secs < 30.0, buf);
}

// 4. Metric properties.
void criterion4() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string why;
  auto check = [&](bool cond, const char* what) {
    if (!cond && ok) {
      ok = false;
      why = what;
    }
  };

  // cosine bounds on random vectors
  Prng prng(11);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> u(8), v(8);
    for (auto& x : u) x = prng.normal();
    for (auto& x : v) x = prng.normal();
    double c = cosine(u, v).value();
    check(c >= -1.0 - 1e-12 && c <= 1.0 + 1e-12, "cosine out of bounds");
  }
  check(!cosine({0, 0, 0}, {1, 2, 3}).has_value(), "zero vector not excluded");

  // SimAM_delta positive-scale invariance (exact)
  {
    ForwardTrace zsl, icl, ft;
    for (ForwardTrace* tr : {&zsl, &icl, &ft}) {
      tr->seq_len = 2;
      tr->n_layers = 1;
      tr->n_heads = 1;
      tr->maps.resize(1);
    }
    AttnMap base;
    base.t = 2;
    base.v = {1.0, AttnMap::masked_marker(), 1.0, 1.0};
    AttnMap a = base, b = base;
    a.v[0] += 0.3;
    a.v[2] -= 0.1;
    a.v[3] += 0.7;
    for (std::size_t i : {0, 2, 3})
      b.v[i] = base.v[i] + 2.5 * (a.v[i] - base.v[i]);
    zsl.maps[0] = {base};
    icl.maps[0] = {a};
    ft.maps[0] = {b};
    SimilarityScore s = sim_am_delta(icl, ft, zsl);
    check(std::abs(s.per_head[0][0].value() - 1.0) < 1e-12,
          "SimAM_delta not scale invariant");
  }

  // zero-demo ICL == ZSL, bitwise, and degenerate exclusion
  {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 22;
    cfg.max_seq_len = 40;
    Parameters p = init_params(cfg, 12);
    TaskConfig task;
    Prng eprng(4);
    Episode e = sample_episode(task, eprng);
    e.demos.clear();
    std::vector<int> icl_prompt = format_icl_prompt(task, e);
    std::vector<int> zsl_prompt = format_zsl_prompt(task, e);
    check(icl_prompt == zsl_prompt, "zero-demo prompts differ");
    ForwardTrace a = forward_trace(p, icl_prompt);
    ForwardTrace b = forward_trace(p, zsl_prompt);
    check(a.logits == b.logits, "zero-demo logits differ");
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      check(a.attn_out[l] == b.attn_out[l], "zero-demo attn outputs differ");
    SimilarityScore s = sim_aou(a, b, b, false);
    check(s.all_excluded && s.excluded_count == cfg.n_layers,
          "degenerate update not excluded");
  }

  // aggregation vs independent recomputation
  {
    auto score = [](std::vector<std::optional<double>> pl) {
      SimilarityScore s;
      s.per_layer = std::move(pl);
      s.finalize();
      return s;
    };
    LayerwiseAggregate agg = aggregate_layerwise(
        {score({{0.2}, std::nullopt}), score({{0.4}, {0.9}}),
         score({{0.6}, {0.7}})});
    check(std::abs(agg.mean[0] - 0.4) < 1e-15, "aggregate mean wrong");
    check(std::abs(agg.std_dev[0] - 0.2) < 1e-12, "aggregate std wrong");
    check(agg.excluded[1] == 1 && agg.counts[1] == 2,
          "aggregate exclusion wrong");
    check(std::abs(agg.mean[1] - 0.8) < 1e-15, "excluded leaked into mean");
  }

  double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "metric properties: %s, %.1fs < 30s",
                ok ? "all hold" : why.c_str(), secs);
  report(4, ok && secs < 30.0, buf);
}

// 5. ICL emergence on the committed fixture checkpoint.
void criterion5(const std::string& ckpt) {
  auto t0 = std::chrono::steady_clock::now();
  Parameters params = load_checkpoint(ckpt);
  TaskConfig task;
  AccuracyResult acc = evaluate_icl_zsl_accuracy(params, task, 400,
                                                 Prng(99).split("acceptance"));
  double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "ICL emergence: icl %.3f >= zsl %.3f + 0.20 (n=%zu), %.0fs",
                acc.icl, acc.zsl, acc.n, secs);
  report(5, acc.icl >= acc.zsl + 0.20, buf);
}

// 6. Full benchmark pipeline, twice, byte-identical.
void criterion6(const std::string& ckpt) {
  auto t0 = std::chrono::steady_clock::now();
  Parameters trained = load_checkpoint(ckpt);
  fs::path root = fs::temp_directory_path() / "iclgd_acceptance";
  fs::remove_all(root);
  BenchmarkConfig cfg;
  cfg.model = trained.config;
  cfg.seeds = {1, 2, 3};
  cfg.n_test_episodes = 32;
  cfg.checkpoint_path = ckpt;
  cfg.output_dir = (root / "run1").string();
  BenchmarkResult r1 = run_benchmark(cfg);
  cfg.output_dir = (root / "run2").string();
  run_benchmark(cfg);

  bool identical = true;
  for (const char* f : {"rows.csv", "aggregate.json", "layerwise.csv",
                        "grad_norms.csv", "layerwise_SimAOU.svg",
                        "grad_norms_LCGD.svg"}) {
    if (slurp((root / "run1" / f).string()) !=
        slurp((root / "run2" / f).string())) {
      identical = false;
    }
  }
  bool values_ok = true;
  std::set<std::string> metrics;
  for (const auto& r : r1.rows) {
    metrics.insert(r.metric);
    if (r.value && !std::isfinite(*r.value)) values_ok = false;
  }
  bool all_metrics =
      metrics == std::set<std::string>{"SimAOU", "SimAOU_norm", "SimAM",
                                       "SimAM_delta", "alpha"};
  bool layerwise_ok = !r1.layerwise.empty();
  for (const auto& c : r1.layerwise)
    if (c.agg.mean.size() != cfg.model.n_layers) layerwise_ok = false;
  bool grad_csv_ok = !r1.grad_norm_rows.empty();
  bool plots_ok = fs::exists(root / "run1" / "layerwise_alpha.svg") &&
                  fs::exists(root / "run1" / "grad_norms_GD.svg");
  double secs = seconds_since(t0);
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "benchmark: %zu rows, byte-identical rerun %s, five metrics "
                "%s, layerwise %s, grad CSV %s, plots %s, %.0fs < 600s",
                r1.rows.size(), identical ? "yes" : "NO",
                all_metrics && values_ok ? "ok" : "BAD",
                layerwise_ok ? "ok" : "BAD", grad_csv_ok ? "ok" : "BAD",
                plots_ok ? "ok" : "BAD", secs);
  report(6,
         identical && values_ok && all_metrics && layerwise_ok && grad_csv_ok &&
             plots_ok && secs < 600.0,
         buf);
  fs::remove_all(root);
}

// 7. Sequential GD is order sensitive.
void criterion7() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 22;
  cfg.max_seq_len = 40;
  Parameters params = init_params(cfg, 40);
  TaskConfig task;
  Prng prng(6);
  Episode e = sample_episode(task, prng);
  std::vector<std::vector<int>> demos;
  for (const auto& d : e.demos)
    demos.push_back(format_demo_prompt(task, d));
  FinetuneConfig a, b;
  a.learning_rate = b.learning_rate = 0.2;
  b.demo_order = {7, 6, 5, 4, 3, 2, 1, 0};
  Parameters pa = finetune_gd(params, demos, a).params;
  Parameters pb = finetune_gd(params, demos, b).params;
  double max_diff = 0.0;
  pa.for_each([&](const std::string& name, const Tensor& t) {
    const Tensor& o = *pb.find(name);
    for (std::size_t i = 0; i < t.size(); ++i)
      max_diff = std::max(max_diff, std::abs(t.data[i] - o.data[i]));
  });
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "order sensitivity: reversed demo order moves parameters by "
                "max %.2e > 0",
                max_diff);
  report(7, max_diff > 0.0, buf);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <trained-checkpoint>\n";
    return 2;
  }
  std::string ckpt = argv[1];
  try {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5(ckpt);
    criterion6(ckpt);
    criterion7();
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << "\n";
    return 2;
  }
  std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED"
                                : "SOME CRITERIA FAILED")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
