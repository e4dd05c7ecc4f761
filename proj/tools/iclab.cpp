// iclab: command-line front end for the ICL-vs-finetuning laboratory.
//
// Subcommands: pretrain, benchmark, noise-check, gradcheck,
// inspect-checkpoint. Configuration comes from an optional JSON file plus
// flag overrides; relative output paths resolve under $ICLGD_OUTPUT_ROOT when
// it is set. Exit codes: 0 success, 1 validation failure, 2 bad config/IO.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iclgd/checkpoint.hpp"
#include "iclgd/harness.hpp"

namespace {

std::string resolve_output(const std::string& path) {
  const char* root = std::getenv("ICLGD_OUTPUT_ROOT");
  if (root == nullptr || path.empty() ||
      std::filesystem::path(path).is_absolute()) {
    return path;
  }
  return (std::filesystem::path(root) / path).string();
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) {
    throw std::runtime_error("malformed JSON in config file " + path);
  }
  return j;
}

int cmd_pretrain(const std::string& config_path, std::size_t steps,
                 std::size_t batch, double lr, std::uint64_t seed,
                 const std::string& out_path, std::size_t eval_episodes,
                 double clip, const std::string& init_from,
                 const std::string& loss_policy) {
  iclgd::ModelConfig model;
  model.n_layers = 4;
  model.n_heads = 4;
  model.d_model = 64;
  iclgd::TaskConfig task;
  if (!config_path.empty()) {
    iclgd::BenchmarkConfig cfg =
        iclgd::benchmark_config_from_json(load_json_file(config_path));
    model = cfg.model;
    task = cfg.task;
  }
  iclgd::Parameters warm;
  const iclgd::Parameters* start = nullptr;
  if (!init_from.empty()) {
    warm = iclgd::load_checkpoint(init_from);
    model = warm.config;
    start = &warm;
  }
  iclgd::LossTokenPolicy policy = iclgd::LossTokenPolicy::every_token;
  if (loss_policy == "label_only") {
    policy = iclgd::LossTokenPolicy::label_only;
  } else if (loss_policy != "every_token") {
    throw std::invalid_argument("pretrain: unknown --loss policy " + loss_policy);
  }
  iclgd::PretrainResult res =
      iclgd::pretrain(model, task, steps, batch, lr, seed, clip, start, policy);
  for (std::size_t i = 0; i < res.loss_log.size(); i += 250) {
    std::cout << "step " << i << " loss " << iclgd::fmt_g(res.loss_log[i])
              << "\n";
  }
  if (!res.loss_log.empty()) {
    std::cout << "final loss " << iclgd::fmt_g(res.loss_log.back()) << "\n";
  }
  iclgd::AccuracyResult acc = iclgd::evaluate_icl_zsl_accuracy(
      res.params, task, eval_episodes, iclgd::Prng(seed).split("heldout"));
  std::cout << "heldout accuracy: icl " << iclgd::fmt_g(acc.icl) << " zsl "
            << iclgd::fmt_g(acc.zsl) << " (n=" << acc.n << ")\n";
  std::string out = resolve_output(out_path);
  iclgd::save_checkpoint(res.params, out);
  std::cout << "checkpoint written to " << out << "\n";
  return 0;
}

int cmd_benchmark(const std::string& config_path, const std::string& checkpoint,
                  const std::string& output_dir, long episodes,
                  const std::vector<std::uint64_t>& seeds) {
  iclgd::BenchmarkConfig cfg;
  if (!config_path.empty()) {
    cfg = iclgd::benchmark_config_from_json(load_json_file(config_path));
  }
  if (!checkpoint.empty()) cfg.checkpoint_path = checkpoint;
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  if (episodes > 0) cfg.n_test_episodes = static_cast<std::size_t>(episodes);
  if (!seeds.empty()) cfg.seeds = seeds;
  cfg.output_dir = resolve_output(cfg.output_dir);
  iclgd::BenchmarkResult res = iclgd::run_benchmark(cfg);
  for (const auto& f : res.files_written) std::cout << "wrote " << f << "\n";
  std::cout << res.aggregate["directional"].dump(2) << "\n";
  return 0;
}

int cmd_noise_check(std::size_t d, std::size_t trials, std::uint64_t seed,
                    bool correlated, const std::string& json_path) {
  iclgd::NoiseCheckRun run = iclgd::run_noise_check(d, trials, seed, correlated);
  std::cout << "SimAOU_norm mean " << iclgd::fmt_g(run.result.mean_norm_variant)
            << " +- " << iclgd::fmt_g(run.json["se_norm_variant"].get<double>())
            << "\nSimAOU plain mean "
            << iclgd::fmt_g(run.result.mean_plain_variant) << " +- "
            << iclgd::fmt_g(run.json["se_plain_variant"].get<double>()) << "\n"
            << run.json.dump(2) << "\n";
  if (!json_path.empty()) {
    std::string out = resolve_output(json_path);
    std::ofstream f(out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + out);
    f << run.json.dump(2) << "\n";
  }
  return run.pass ? 0 : 1;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& corrupt) {
  iclgd::GradcheckReport report = iclgd::run_gradcheck(seed, corrupt);
  for (const auto& e : report.entries) {
    std::cout << e.name << " max rel err " << iclgd::fmt_g(e.max_rel_err)
              << "\n";
  }
  if (!report.pass) {
    std::cout << "FAIL:";
    for (const auto& n : report.failed) std::cout << " " << n;
    std::cout << "\n";
    return 1;
  }
  std::cout << "all gradients within " << iclgd::fmt_g(report.tolerance)
            << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  std::cout << iclgd::read_checkpoint_header(path).dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ICL-vs-gradient-descent laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_path = "model.ckpt", checkpoint, output_dir;
  std::string json_path, corrupt, inspect_path;
  std::size_t steps = 8000, batch = 4, d = 1024, trials = 256;
  std::size_t eval_episodes = 200;
  double lr = 0.5;
  double clip = 0.0;
  std::string init_from;
  std::string loss_policy = "every_token";
  std::uint64_t seed = 1;
  long episodes = 0;
  bool correlated = false;
  std::vector<std::uint64_t> seeds;

  auto* pre = app.add_subcommand("pretrain", "train a model on the synthetic task");
  pre->add_option("--config", config_path, "JSON config file");
  pre->add_option("--steps", steps);
  pre->add_option("--batch", batch);
  pre->add_option("--lr", lr);
  pre->add_option("--seed", seed);
  pre->add_option("--out", out_path, "checkpoint output path");
  pre->add_option("--eval-episodes", eval_episodes);
  pre->add_option("--clip", clip,
                  "global-norm gradient clip threshold (0 = off)");
  pre->add_option("--init-from", init_from,
                  "resume from an existing checkpoint instead of fresh init");
  pre->add_option("--loss", loss_policy,
                  "loss positions: every_token (default) or label_only");

  auto* bench = app.add_subcommand("benchmark", "run the full metric benchmark");
  bench->add_option("--config", config_path, "JSON config file");
  bench->add_option("--checkpoint", checkpoint);
  bench->add_option("--output-dir", output_dir);
  bench->add_option("--episodes", episodes);
  bench->add_option("--seeds", seeds);

  auto* noise = app.add_subcommand("noise-check",
                                   "constructed-noise SimAOU validation");
  noise->add_option("--d", d);
  noise->add_option("--trials", trials);
  noise->add_option("--seed", seed);
  noise->add_flag("--correlated", correlated, "force r' = r");
  noise->add_option("--json", json_path, "also write JSON result here");

  auto* grad = app.add_subcommand("gradcheck",
                                  "finite-difference gradient self-check");
  grad->add_option("--seed", seed);
  grad->add_option("--corrupt", corrupt,
                   "negative control: corrupt this tensor's gradient");

  auto* inspect = app.add_subcommand("inspect-checkpoint",
                                     "print a checkpoint's header JSON");
  inspect->add_option("path", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (pre->parsed()) {
      return cmd_pretrain(config_path, steps, batch, lr, seed, out_path,
                          eval_episodes, clip, init_from, loss_policy);
    }
    if (bench->parsed()) {
      return cmd_benchmark(config_path, checkpoint, output_dir, episodes,
                           seeds);
    }
    if (noise->parsed()) {
      return cmd_noise_check(d, trials, seed, correlated, json_path);
    }
    if (grad->parsed()) return cmd_gradcheck(seed, corrupt);
    if (inspect->parsed()) return cmd_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
