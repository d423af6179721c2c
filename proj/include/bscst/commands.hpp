#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "bscst/experiment.hpp"

namespace bscst::cmd {

namespace fs = std::filesystem;

/// Writes dataset.tsv, vocab.txt, df.tsv and config.txt. Refuses a non-empty
/// workdir unless `force`, which starts a fresh manifest.
void gen_data(const exp::ExperimentConfig& config, bool force, std::ostream& log);

struct TrainOptions {
  std::string phase = "both";  // xe | rl | both
  std::optional<std::string> method;
  std::optional<int> mc_passes;
  std::optional<std::string> sampling;
  std::optional<std::uint64_t> seed;
};

/// Applies the flag overrides to a copy of the config (UsageError on bad values).
exp::ExperimentConfig apply_overrides(exp::ExperimentConfig config, const TrainOptions& opts);

/// File stem for an RL run, e.g. bscst_m5_distr_s7.
std::string rl_tag(const train::RLConfig& rl, std::uint64_t seed);

/// XE writes checkpoints/xe.ckpt (best val), xe_last.ckpt and logs/xe.csv. RL
/// starts from checkpoints/xe.ckpt and writes <tag>.ckpt, <tag>_last.ckpt,
/// logs/<tag>.csv and logs/<tag>.json.
void train(const exp::ExperimentConfig& config, const TrainOptions& opts, std::ostream& log);

struct EvalOptions {
  fs::path checkpoint;
  std::string split = "val";
  int beam_width = 0;  // 0: config value
  /// Scores each image's first reference against itself instead of decoding.
  bool inject_references = false;
};

/// eval/<stem>_<split>_w<W>.json with mean BLEU-1, BLEU-4, ROUGE-L and CIDEr-D,
/// plus the per-image CSV behind it. Returns the JSON path.
fs::path eval(const exp::ExperimentConfig& config, const EvalOptions& opts, std::ostream& log);

struct UQOptions {
  fs::path checkpoint;
  std::string split = "val";
  int mc_passes = 0;  // 0: config value
};

/// uq/<stem>_<split>_m<M>_{per_image,quantiles,per_pass}.csv and _summary.json.
/// Returns the summary path.
fs::path uq(const exp::ExperimentConfig& config, const UQOptions& opts, std::ostream& log);

struct AblateOptions {
  std::string axis;  // sampling | mcpasses | architecture
  int seeds = 5;
};

/// ablate/<axis>.csv with one row per cell and seed. Returns its path.
fs::path ablate(const exp::ExperimentConfig& config, const AblateOptions& opts, std::ostream& log);

/// Resolves a checkpoint argument: an existing path, or a name under the
/// workdir's checkpoint directory (with or without .ckpt).
fs::path resolve_checkpoint(const exp::ExperimentConfig& config, const fs::path& arg);

}  // namespace bscst::cmd
