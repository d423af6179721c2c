// bscst: command-line front end for the B-SCST lab.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bscst/commands.hpp"

namespace {

using bscst::exp::ExperimentConfig;
using bscst::exp::UsageError;

ExperimentConfig load_config(const std::string& config_path, const std::string& workdir,
                             const std::vector<std::string>& sets) {
  ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!workdir.empty()) config.workdir = workdir;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian self-critical sequence training lab"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, workdir;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Experiment config file (section.key = value lines)")
      ->check(CLI::ExistingFile);
  app.add_option("--workdir", workdir, "Working directory (overrides paths.workdir)");
  app.add_option("--set", sets, "Override one config key, e.g. --set rl.lr=1e-3");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic scene dataset");
  bool force = false;
  gen->add_flag("--force", force, "Overwrite a non-empty workdir");

  auto* tr = app.add_subcommand("train", "XE pretraining and/or RL fine-tuning");
  bscst::cmd::TrainOptions topt;
  std::string method, sampling;
  int mc_passes = 0;
  std::uint64_t seed = 0;
  tr->add_option("--phase", topt.phase, "xe, rl or both")->check(CLI::IsMember({"xe", "rl", "both"}));
  auto* method_opt = tr->add_option("--method", method, "scst or bscst")->check(CLI::IsMember({"scst", "bscst"}));
  auto* mc_opt = tr->add_option("--mc-passes", mc_passes, "MC dropout passes per image for B-SCST");
  auto* sampling_opt = tr->add_option("--sampling", sampling, "random, top1, topk:K or distr");
  auto* seed_opt = tr->add_option("--seed", seed, "Run seed");

  auto* ev = app.add_subcommand("eval", "Beam-search evaluation of a checkpoint");
  bscst::cmd::EvalOptions eopt;
  std::string eval_ckpt;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint path or name under the checkpoint dir");
  ev->add_option("--split", eopt.split, "train, val or test");
  ev->add_option("--beam-width", eopt.beam_width, "Beam width (default from config)");
  ev->add_flag("--inject-references", eopt.inject_references, "Score each first reference against itself");

  auto* uqc = app.add_subcommand("uq", "MC-dropout uncertainty analysis");
  bscst::cmd::UQOptions uopt;
  std::string uq_ckpt;
  uqc->add_option("--checkpoint", uq_ckpt, "Checkpoint path or name")->required();
  uqc->add_option("--split", uopt.split, "train, val or test");
  uqc->add_option("--mc-passes", uopt.mc_passes, "Number of MC passes (default from config)");

  auto* ab = app.add_subcommand("ablate", "Run one ablation axis over several seeds");
  bscst::cmd::AblateOptions aopt;
  ab->add_option("--axis", aopt.axis, "sampling, mcpasses or architecture")->required();
  ab->add_option("--seeds", aopt.seeds, "Seeds per cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const ExperimentConfig config = load_config(config_path, workdir, sets);
    if (gen->parsed()) {
      bscst::cmd::gen_data(config, force, std::cout);
    } else if (tr->parsed()) {
      if (*method_opt) topt.method = method;
      if (*mc_opt) topt.mc_passes = mc_passes;
      if (*sampling_opt) topt.sampling = sampling;
      if (*seed_opt) topt.seed = seed;
      bscst::cmd::train(config, topt, std::cout);
    } else if (ev->parsed()) {
      if (!eopt.inject_references && eval_ckpt.empty())
        throw UsageError("eval needs --checkpoint or --inject-references");
      eopt.checkpoint = eval_ckpt;
      bscst::cmd::eval(config, eopt, std::cout);
    } else if (uqc->parsed()) {
      uopt.checkpoint = uq_ckpt;
      bscst::cmd::uq(config, uopt, std::cout);
    } else if (ab->parsed()) {
      bscst::cmd::ablate(config, aopt, std::cout);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
