#pragma once

// Orchestration on top of the library: the benchmark protocol, the noise
// validation, the gradient self-check, and ICL/ZSL accuracy evaluation.
// Everything here is deterministic in (config, seeds); (baseline x seed) arms
// run on their own threads with split PRNG streams and cloned Parameters,
// report assembly is single-threaded in a fixed order.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/checkpoint.hpp"
#include "iclgd/metrics.hpp"
#include "iclgd/model.hpp"
#include "iclgd/optim.hpp"
#include "iclgd/report.hpp"
#include "iclgd/tasks.hpp"

namespace iclgd {

struct BenchmarkConfig {
  ModelConfig model;
  TaskConfig task;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> baselines = {"Trained", "TrainedEmbeddings",
                                        "NoTraining"};
  std::vector<std::string> methods = {"GD", "LCGD"};
  FinetuneConfig finetune;
  std::size_t n_test_episodes = 32;
  std::string output_dir = "benchmark_out";
  bool plots = true;
  std::string checkpoint_path;

  bool needs_checkpoint() const {
    for (const auto& b : baselines)
      if (b == "Trained" || b == "TrainedEmbeddings") return true;
    return false;
  }

  void validate() const {
    model.validate();
    task.validate();
    if (task.vocab_size() > model.vocab_size) {
      throw std::invalid_argument(
          "config: task vocabulary exceeds model vocab_size");
    }
    if (seeds.empty()) throw std::invalid_argument("config: seeds is empty");
    if (baselines.empty() || methods.empty()) {
      throw std::invalid_argument(
          "config: need at least one baseline and one method");
    }
    for (const auto& b : baselines) {
      if (b != "Trained" && b != "TrainedEmbeddings" && b != "NoTraining") {
        throw std::invalid_argument("config: unknown baseline " + b);
      }
    }
    for (const auto& m : methods) {
      if (m != "GD" && m != "LCGD") {
        throw std::invalid_argument("config: unknown method " + m);
      }
    }
    if (n_test_episodes == 0) {
      throw std::invalid_argument("config: n_test_episodes must be positive");
    }
    if (needs_checkpoint() && checkpoint_path.empty()) {
      throw std::invalid_argument(
          "config: checkpoint required for Trained/TrainedEmbeddings");
    }
  }
};

namespace detail {

// JSON field accessors that name the full path in every error.
inline const nlohmann::json& jfield(const nlohmann::json& j,
                                    const std::string& path,
                                    const std::string& key) {
  if (!j.is_object()) {
    throw std::invalid_argument("config: " + path + ": expected object");
  }
  return j.at(key);
}

template <class T>
void jread(const nlohmann::json& j, const std::string& path,
           const std::string& key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("config: " + path + "." + key +
                                ": wrong type");
  }
}

inline void jcheck_keys(const nlohmann::json& j, const std::string& path,
                        const std::set<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw std::invalid_argument("config: unknown key " + path + "." +
                                  it.key());
    }
  }
}

}  // namespace detail

inline BenchmarkConfig benchmark_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected object");
  detail::jcheck_keys(j, "$",
                      {"model", "task", "seeds", "baselines", "methods",
                       "finetune", "n_test_episodes", "output_dir", "plots",
                       "checkpoint"});
  BenchmarkConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::jcheck_keys(m, "model",
                        {"n_layers", "n_heads", "d_model", "vocab_size",
                         "max_seq_len", "mlp_ratio"});
    detail::jread(m, "model", "n_layers", cfg.model.n_layers);
    detail::jread(m, "model", "n_heads", cfg.model.n_heads);
    detail::jread(m, "model", "d_model", cfg.model.d_model);
    detail::jread(m, "model", "vocab_size", cfg.model.vocab_size);
    detail::jread(m, "model", "max_seq_len", cfg.model.max_seq_len);
    detail::jread(m, "model", "mlp_ratio", cfg.model.mlp_ratio);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    detail::jcheck_keys(t, "task",
                        {"n_input_symbols", "n_labels", "pattern_length",
                         "k_demonstrations"});
    detail::jread(t, "task", "n_input_symbols", cfg.task.n_input_symbols);
    detail::jread(t, "task", "n_labels", cfg.task.n_labels);
    detail::jread(t, "task", "pattern_length", cfg.task.pattern_length);
    detail::jread(t, "task", "k_demonstrations", cfg.task.k_demonstrations);
  }
  detail::jread(j, "$", "seeds", cfg.seeds);
  detail::jread(j, "$", "baselines", cfg.baselines);
  detail::jread(j, "$", "methods", cfg.methods);
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    detail::jcheck_keys(f, "finetune",
                        {"learning_rate", "steps_per_demo", "trainable"});
    detail::jread(f, "finetune", "learning_rate", cfg.finetune.learning_rate);
    detail::jread(f, "finetune", "steps_per_demo", cfg.finetune.steps_per_demo);
    detail::jread(f, "finetune", "trainable", cfg.finetune.trainable);
  }
  detail::jread(j, "$", "n_test_episodes", cfg.n_test_episodes);
  detail::jread(j, "$", "output_dir", cfg.output_dir);
  detail::jread(j, "$", "plots", cfg.plots);
  detail::jread(j, "$", "checkpoint", cfg.checkpoint_path);
  return cfg;
}

// --- accuracy ----------------------------------------------------------------

struct AccuracyResult {
  double icl = 0.0;
  double zsl = 0.0;
  std::size_t n = 0;
};

// Argmax restricted to the label tokens at the last prompt position.
inline int predict_label(const Parameters& params, const TaskConfig& task,
                         const std::vector<int>& prompt) {
  ForwardTrace tr = forward_trace(params, prompt,
                                  CaptureOptions{false, false, false, false});
  std::size_t base = (prompt.size() - 1) * tr.vocab;
  int best = task.label_id(0);
  for (std::size_t c = 1; c < task.n_labels; ++c) {
    int id = task.label_id(c);
    if (tr.logits[base + static_cast<std::size_t>(id)] >
        tr.logits[base + static_cast<std::size_t>(best)]) {
      best = id;
    }
  }
  return best;
}

inline AccuracyResult evaluate_icl_zsl_accuracy(const Parameters& params,
                                                const TaskConfig& task,
                                                std::size_t n_episodes,
                                                Prng prng) {
  AccuracyResult acc;
  acc.n = n_episodes;
  std::size_t icl_hits = 0, zsl_hits = 0;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    Episode e = sample_episode(task, prng);
    std::vector<int> icl =
        format_icl_prompt(task, e, params.config.max_seq_len);
    if (predict_label(params, task, icl) == e.gold) ++icl_hits;
    if (predict_label(params, task, format_zsl_prompt(task, e)) == e.gold)
      ++zsl_hits;
  }
  acc.icl = static_cast<double>(icl_hits) / static_cast<double>(n_episodes);
  acc.zsl = static_cast<double>(zsl_hits) / static_cast<double>(n_episodes);
  return acc;
}

// --- benchmark -----------------------------------------------------------------

struct BenchmarkResult {
  std::vector<ReportRow> rows;
  std::vector<LayerwiseCell> layerwise;
  std::vector<GradNormRow> grad_norm_rows;
  nlohmann::json aggregate;
  std::vector<std::string> files_written;
};

namespace detail {

struct ArmOutput {
  std::vector<ReportRow> rows;
  // scores keyed (metric, method) for layerwise aggregation
  std::map<std::pair<std::string, std::string>, std::vector<SimilarityScore>>
      scores;
  std::map<std::string, GradNormTrace> first_episode_norms;  // by method
  AccuracyResult accuracy;
};

inline LossTokenPolicy method_policy(const std::string& method) {
  // GD steps once per demonstration on its label; LCGD steps token by token.
  return method == "GD" ? LossTokenPolicy::label_only
                        : LossTokenPolicy::every_token;
}

inline ArmOutput run_arm(const BenchmarkConfig& cfg, const Parameters& params,
                         const std::string& baseline, std::uint64_t seed) {
  ArmOutput out;
  const std::string task_id = "synthetic";
  Prng episode_prng = Prng(seed).split("episodes");
  for (std::size_t ep = 0; ep < cfg.n_test_episodes; ++ep) {
    Episode e = sample_episode(cfg.task, episode_prng);
    std::vector<int> zsl_prompt = format_zsl_prompt(cfg.task, e);
    std::vector<int> icl_prompt =
        format_icl_prompt(cfg.task, e, cfg.model.max_seq_len);
    auto [start, len] = icl_test_span(cfg.task, e);
    ForwardTrace zsl = forward_trace(params, zsl_prompt);
    ForwardTrace icl = icl_slice(forward_trace(params, icl_prompt), start, len);
    std::vector<std::vector<int>> demos;
    for (const auto& d : e.demos)
      demos.push_back(format_demo_prompt(cfg.task, d));

    std::map<std::string, ForwardTrace> ft_traces;
    for (const auto& method : cfg.methods) {
      FinetuneConfig fcfg = cfg.finetune;
      fcfg.loss_token_policy = method_policy(method);
      FinetuneResult ft = method == "GD" ? finetune_gd(params, demos, fcfg)
                                         : finetune_lcgd(params, demos, fcfg);
      if (ep == 0) out.first_episode_norms[method] = ft.grad_norms;
      ForwardTrace ftt = forward_trace(ft.params, zsl_prompt);
      std::vector<SimilarityScore> scores = {
          sim_aou(icl, ftt, zsl, false), sim_aou(icl, ftt, zsl, true),
          sim_am(icl, ftt), sim_am_delta(icl, ftt, zsl)};
      for (const auto& s : scores) {
        append_score_rows(out.rows, s, baseline, method, task_id, seed);
        out.scores[{s.metric, method}].push_back(s);
      }
      ft_traces.emplace(method, std::move(ftt));
    }
    if (ft_traces.count("GD") && ft_traces.count("LCGD")) {
      SimilarityScore a =
          alpha_gd_lcgd(ft_traces.at("GD"), ft_traces.at("LCGD"), zsl);
      append_score_rows(out.rows, a, baseline, "GD+LCGD", task_id, seed);
      out.scores[{a.metric, "GD+LCGD"}].push_back(a);
    }
  }
  out.accuracy = evaluate_icl_zsl_accuracy(params, cfg.task,
                                           cfg.n_test_episodes,
                                           Prng(seed).split("eval"));
  return out;
}

}  // namespace detail

inline BenchmarkResult run_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  std::optional<Parameters> trained;
  if (cfg.needs_checkpoint()) {
    trained = load_checkpoint(cfg.checkpoint_path, cfg.model);
  }
  // arm parameters built up front so config errors precede any compute
  struct Arm {
    std::string baseline;
    std::uint64_t seed;
    Parameters params;
    detail::ArmOutput out;
  };
  std::vector<Arm> arms;
  for (const auto& baseline : cfg.baselines) {
    for (std::uint64_t seed : cfg.seeds) {
      std::uint64_t derived = Prng(seed).split("init-" + baseline).next_u64();
      Parameters p = baseline == "Trained"
                         ? *trained
                         : baseline == "TrainedEmbeddings"
                               ? init_trained_embeddings(cfg.model, *trained,
                                                         derived)
                               : init_params(cfg.model, derived);
      arms.push_back({baseline, seed, std::move(p), {}});
    }
  }
  std::vector<std::thread> workers;
  workers.reserve(arms.size());
  for (auto& arm : arms) {
    workers.emplace_back([&cfg, &arm] {
      arm.out = detail::run_arm(cfg, arm.params, arm.baseline, arm.seed);
    });
  }
  for (auto& w : workers) w.join();

  BenchmarkResult res;
  std::map<std::tuple<std::string, std::string, std::string>,
           std::vector<SimilarityScore>>
      layer_scores;
  nlohmann::json accuracy = nlohmann::json::object();
  for (const auto& arm : arms) {
    res.rows.insert(res.rows.end(), arm.out.rows.begin(), arm.out.rows.end());
    for (const auto& [key, scores] : arm.out.scores) {
      auto& bucket = layer_scores[{key.first, arm.baseline, key.second}];
      bucket.insert(bucket.end(), scores.begin(), scores.end());
    }
    accuracy[arm.baseline][std::to_string(arm.seed)] = {
        {"icl", arm.out.accuracy.icl},
        {"zsl", arm.out.accuracy.zsl},
        {"n", arm.out.accuracy.n}};
  }
  for (const auto& [key, scores] : layer_scores) {
    res.layerwise.push_back({std::get<0>(key), std::get<1>(key),
                             std::get<2>(key), aggregate_layerwise(scores)});
  }
  // representative per-method gradient-norm trace: first baseline, first
  // seed, first test episode
  const detail::ArmOutput& rep = arms.front().out;
  std::map<std::string, GradNormTrace> rep_norms = rep.first_episode_norms;
  for (const auto& [method, trace] : rep_norms) {
    for (std::size_t l = 0; l < trace.n_layers; ++l)
      for (std::size_t s = 0; s < trace.n_steps; ++s)
        res.grad_norm_rows.push_back({method, l, s, trace.at(l, s)});
  }
  res.aggregate = aggregate_json(res.rows);
  res.aggregate["accuracy"] = accuracy;

  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  auto emit = [&](const std::string& name) {
    std::string p = (fs::path(cfg.output_dir) / name).string();
    res.files_written.push_back(p);
    return p;
  };
  write_rows_csv(emit("rows.csv"), res.rows);
  {
    std::ofstream out(emit("aggregate.json"), std::ios::binary);
    out << res.aggregate.dump(2) << '\n';
  }
  write_layerwise_csv(emit("layerwise.csv"), res.layerwise);
  write_grad_norm_csv(emit("grad_norms.csv"), res.grad_norm_rows);
  if (cfg.plots) {
    std::set<std::string> metrics;
    for (const auto& c : res.layerwise) metrics.insert(c.metric);
    for (const auto& m : metrics)
      write_layerwise_svg(emit("layerwise_" + m + ".svg"), m, res.layerwise);
    for (const auto& [method, trace] : rep_norms) {
      write_grad_norm_svg(emit("grad_norms_" + method + ".svg"), method,
                          trace, /*log_scale=*/method == "LCGD");
    }
  }
  return res;
}

// --- noise check -----------------------------------------------------------------

struct NoiseCheckRun {
  NoiseCheckResult result;
  bool pass = false;
  nlohmann::json json;
};

inline NoiseCheckRun run_noise_check(std::size_t d, std::size_t trials,
                                     std::uint64_t seed,
                                     bool correlated = false) {
  Prng prng(seed);
  NoiseCheckRun run;
  run.result = noise_simaou_check(d, trials, prng, correlated);
  double se_scale = std::sqrt(static_cast<double>(trials));
  run.pass = correlated
                 ? std::abs(run.result.mean_plain_variant - 1.0) <= 1e-9
                 : std::abs(run.result.mean_norm_variant - 0.25) <= 0.03;
  run.json = {
      {"d", d},
      {"trials", trials},
      {"seed", seed},
      {"correlated", correlated},
      {"mean_norm_variant", run.result.mean_norm_variant},
      {"mean_plain_variant", run.result.mean_plain_variant},
      {"se_norm_variant", run.result.std_norm_variant / se_scale},
      {"se_plain_variant", run.result.std_plain_variant / se_scale},
      {"mean_rand_norm_variant", run.result.mean_rand_norm_variant},
      {"mean_rand_plain_variant", run.result.mean_rand_plain_variant},
      {"pass", run.pass}};
  return run;
}

// --- gradient self-check -----------------------------------------------------------

struct GradcheckEntry {
  std::string name;  // "vanilla:tensor" or "lcgd:tensor"
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  std::vector<std::string> failed;
  double tolerance = 1e-4;
  bool pass = true;
};

namespace detail {

inline Tensor fd_gradient(Tensor& param, const std::function<double()>& f,
                          double h) {
  Tensor g = Tensor::zeros(param.shape);
  for (std::size_t i = 0; i < param.size(); ++i) {
    double saved = param.data[i];
    param.data[i] = saved + h;
    double up = f();
    param.data[i] = saved - h;
    double down = f();
    param.data[i] = saved;
    g.data[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), 1e-6});
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
  }
  return worst;
}

}  // namespace detail

// Checks every trainable tensor's analytic gradient against central finite
// differences, for the vanilla-GD loss (all parameters) and the layer-causal
// loss (W_K/W_V). `corrupt` injects an offset into the named tensor's
// analytic gradient -- a negative-control fixture proving the check can fail.
inline GradcheckReport run_gradcheck(std::uint64_t seed,
                                     const std::string& corrupt = "") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 22;
  cfg.max_seq_len = 40;
  Parameters params = init_params(cfg, seed);
  TaskConfig task;
  task.k_demonstrations = 2;
  Prng prng = Prng(seed).split("gradcheck");
  Episode e = sample_episode(task, prng);
  std::vector<int> tokens = format_icl_prompt(task, e, cfg.max_seq_len);
  const double h = 1e-4;

  GradcheckReport report;
  bool corrupt_used = corrupt.empty();
  auto corrupt_maybe = [&](std::map<std::string, Tensor>& grads) {
    auto it = grads.find(corrupt);
    if (it == grads.end()) return;
    corrupt_used = true;
    for (auto& v : it->second.data) v += 0.05;
  };
  auto record = [&](const std::string& name, double err) {
    report.entries.push_back({name, err});
    if (err > report.tolerance) {
      report.failed.push_back(name);
      report.pass = false;
    }
  };

  {
    Tape tape;
    BoundParams bp = bind_params(tape, params, all_param_names(params));
    Tensor logits = forward_pass(tape, bp, tokens);
    Tensor loss = tape.cross_entropy(
        logits, detail::loss_items(tokens, LossTokenPolicy::every_token));
    auto grads = tape.backward(loss);
    corrupt_maybe(grads);
    Parameters probe = params;
    probe.for_each([&](const std::string& name, Tensor& t) {
      Tensor numeric = detail::fd_gradient(
          t,
          [&] {
            return gd_loss(probe, tokens, LossTokenPolicy::every_token);
          },
          h);
      record("vanilla:" + name, detail::max_rel_err(grads.at(name), numeric));
    });
  }
  {
    std::size_t pos = tokens.size() - 2;
    Tape tape;
    BoundParams bp = bind_params(tape, params, default_trainable(cfg));
    auto grads = tape.backward(lcgd_loss_on_tape(tape, bp, tokens, pos));
    corrupt_maybe(grads);
    LcgdContext ctx = lcgd_context(params, tokens);
    Parameters probe = params;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (bool key : {true, false}) {
        std::string name = Parameters::kv_name(l, key);
        Tensor numeric = detail::fd_gradient(
            *probe.find(name),
            [&] { return lcgd_loss_clamped(probe, ctx, pos); }, h);
        record("lcgd:" + name, detail::max_rel_err(grads.at(name), numeric));
      }
    }
  }
  if (!corrupt_used) {
    throw std::invalid_argument("run_gradcheck: unknown tensor to corrupt: " +
                                corrupt);
  }
  return report;
}

}  // namespace iclgd
