#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bscst/captioner.hpp"
#include "bscst/metrics.hpp"
#include "bscst/scenegen.hpp"
#include "bscst/textcore.hpp"

namespace bscst::train {

using model::Caption;
using model::Captioner;
using model::DropoutConfig;
using model::SamplingStrategy;

/// One scene with its encoded references and a CIDEr-D scorer over them.
struct ImageData {
  long image_id = 0;
  SceneFeatures features;
  std::vector<Caption> refs;  // EOS-terminated
  std::shared_ptr<const metrics::CiderScorer> scorer;

  double cider(const Caption& c) const { return scorer->score(c.words()); }
};

/// Encoded dataset: vocabulary and document frequencies come from the
/// training references and stay frozen for every later scoring call.
struct Corpus {
  text::Vocabulary vocab;
  std::shared_ptr<const metrics::DocFreqTable> df;
  std::vector<ImageData> train;
  std::vector<ImageData> val;
  std::vector<ImageData> test;

  static Corpus build(const scene::SceneDataset& ds);
  const std::vector<ImageData>& split(const std::string& name) const;
  /// Longest training reference plus EOS.
  int max_len() const { return max_len_; }

 private:
  int max_len_ = 1;
};

struct XEConfig {
  int epochs = 12;
  double lr = 1e-2;
  double lr_decay = 0.8;
  int lr_decay_every = 3;
  double label_smoothing = 0.0;
  double ss_increment = 0.05;
  int ss_every = 5;
  double ss_max = 0.25;
  int batch_images = 10;
  DropoutConfig dropout = DropoutConfig::training(0.1);

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
  double lr_at(int epoch) const;              // epoch is 0-based
  double scheduled_sampling_at(int epoch) const;
};

enum class Method { SCST, BSCST, Reinforce };

std::string to_string(Method m);
Method parse_method(const std::string& s);

struct RLConfig {
  Method method = Method::BSCST;
  int mc_passes = 5;
  SamplingStrategy sampling = SamplingStrategy::distribution();
  int epochs = 30;
  double lr = 5e-4;
  double plateau_factor = 0.5;
  int plateau_patience = 2;
  int batch_images = 10;
  DropoutConfig dropout = DropoutConfig::training(0.1);

  void validate() const;
  /// Sampled captions per image: 1 for SCST, M otherwise.
  int passes() const { return method == Method::SCST ? 1 : mc_passes; }
};

/// One training row for teacher forcing.
struct XEExample {
  const SceneFeatures* features;
  const Caption* target;  // EOS-terminated
};

/// Label-smoothed token-mean NLL under teacher forcing with scheduled sampling.
/// Throws std::invalid_argument on an empty batch.
grad::Value xe_loss(grad::Tape& tape, const Captioner& model, std::span<const XEExample> batch,
                    double label_smoothing, double ss_prob, const DropoutConfig& dropout,
                    std::span<model::PassStreams> streams);

/// Builds the XE loss for every image paired with each of its references,
/// backpropagates into the store and returns the loss. No optimizer step.
double xe_step(const Captioner& model, std::span<const ImageData* const> images, const XEConfig& config,
               double ss_prob, std::uint64_t seed);

struct ImageRLReport {
  std::vector<Caption> captions;
  std::vector<double> rewards;
  double baseline = 0.0;
  std::vector<double> advantages;
};

struct RLStepReport {
  std::vector<ImageRLReport> images;
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// Samples captions for every image, scores them, and backpropagates the
/// surrogate loss into the store (no optimizer step).
///  SCST:      advantage = r(y^s) - r(greedy caption, dropout off)
///  BSCST:     advantage = r_m - mean of the image's M rewards
///  Reinforce: advantage = r(y^s) (no baseline)
/// The loss is the mean over images of -(1/M) sum_m advantage_m log p(y_m).
RLStepReport rl_step(const Captioner& model, std::span<const ImageData* const> images, const RLConfig& config,
                     std::uint64_t seed, int max_len);

inline RLStepReport scst_step(const Captioner& m, std::span<const ImageData* const> images, RLConfig c,
                              std::uint64_t seed, int max_len) {
  c.method = Method::SCST;
  return rl_step(m, images, c, seed, max_len);
}
inline RLStepReport bscst_step(const Captioner& m, std::span<const ImageData* const> images, RLConfig c,
                               std::uint64_t seed, int max_len) {
  c.method = Method::BSCST;
  return rl_step(m, images, c, seed, max_len);
}

/// Streams used for pass m of image slot i in an RL step seeded with `seed`.
model::PassStreams rl_streams(std::uint64_t seed, std::size_t image_slot, int pass);

/// Surrogate -(1/N) sum_i (1/M) sum_m a_im log p(y_im) for fixed captions and
/// advantages, replaying the masks of rl_streams(seed, ...).
grad::Value rl_surrogate(grad::Tape& tape, const Captioner& model, std::span<const ImageData* const> images,
                         const RLStepReport& report, const DropoutConfig& dropout, std::uint64_t seed);

/// Greedy captions (Top1, dropout off) and their mean CIDEr-D.
double greedy_cider(const Captioner& model, std::span<const ImageData> images, int max_len,
                    std::vector<double>* per_image = nullptr);

struct LogRow {
  int epoch;
  std::string phase;
  std::string split;
  std::string metric;
  double value;
};

void write_log_csv(std::span<const LogRow> rows, const std::filesystem::path& path);

struct PhaseResult {
  std::vector<LogRow> log;
  double start_val = 0.0;
  std::vector<double> val_cider;  // one per epoch
  double final_val = 0.0;
  double best_val = 0.0;
  int best_epoch = 0;             // 0 = the starting parameters
  grad::ParamStore best;
};

/// XE pretraining; `store` ends at the final epoch, the best-val copy is in the result.
PhaseResult train_xe(grad::ParamStore& store, const model::ModelConfig& mc, const Corpus& corpus,
                     const XEConfig& config, std::uint64_t seed);

/// RL fine-tuning from the parameters in `store`. ADAM moments restart at zero.
PhaseResult train_rl(grad::ParamStore& store, const model::ModelConfig& mc, const Corpus& corpus,
                     const RLConfig& config, std::uint64_t seed);

}  // namespace bscst::train
