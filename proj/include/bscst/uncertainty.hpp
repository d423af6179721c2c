#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bscst/captioner.hpp"
#include "bscst/trainer.hpp"

namespace bscst::uq {

using model::DecodedPass;
using model::MCBatch;

/// Non-negative entropy of one pass averaged over its own T_m steps, divided
/// by V when divide_by_v is set. 0 log 0 is taken as 0.
double pass_entropy(const DecodedPass& pass, std::size_t V, bool divide_by_v = true);

/// Per-pass and predictive entropies of an MC batch. Passes shorter than the
/// longest are extended with point masses on EOS so H, H_bar and MI share one
/// normalization T = max_m T_m.
struct BatchEntropy {
  std::vector<double> h_own;     // per pass, own-length normalization
  std::vector<double> h_common;  // per pass, common-T normalization
  double h_bar = 0.0;            // mean of h_common
  double h_pred = 0.0;
  double mi = 0.0;               // h_pred - h_bar
  std::size_t steps = 0;         // T
};

BatchEntropy batch_entropy(const MCBatch& batch, std::size_t V, bool divide_by_v = true);
inline double predictive_entropy(const MCBatch& b, std::size_t V, bool divide_by_v = true) {
  return batch_entropy(b, V, divide_by_v).h_pred;
}
inline double mutual_information(const MCBatch& b, std::size_t V, bool divide_by_v = true) {
  return batch_entropy(b, V, divide_by_v).mi;
}

/// Mean over steps of the largest word probability.
double softmax_confidence(const DecodedPass& pass);
/// Same for the greedy caption of `features` (Top1, dropout off).
double softmax_confidence(const model::Captioner& model, const SceneFeatures& features, int max_len);

struct UncertaintySummary {
  long image_id = 0;
  std::vector<double> h_m;         // own-length per-pass entropies
  std::vector<double> pass_cider;  // per-pass CIDEr-D
  double h_bar = 0.0;
  double h_pred = 0.0;
  double mi = 0.0;
  double softmax_conf = 0.0;
  double cider_mean = 0.0;
  double cider_min = 0.0;
  double cider_max = 0.0;
};

struct QuantileBin {
  int quantile = 0;  // 1-based, ascending CIDEr-D
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n = 0;
  double mean_h = 0.0;
  double mean_mi = 0.0;
  double mean_conf = 0.0;
  double mean_cider = 0.0;
};

/// Images sorted by predictive-mean CIDEr-D (ties by image id) and cut into
/// `bins` equal-count groups; earlier groups take the extra image.
std::vector<QuantileBin> quantile_report(std::span<const UncertaintySummary> images, int bins = 5);

/// Spearman rank correlation with average ranks for ties. 0 when a side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct UQConfig {
  int mc_passes = 30;
  double rate = 0.1;
  model::DropoutSite site = model::DropoutSite::FinalFc;
  std::uint64_t seed = 7;
  bool divide_by_v = true;
};

/// M Top1 passes per image under dropout at the configured site.
std::vector<UncertaintySummary> analyze_split(const model::Captioner& model, std::span<const train::ImageData> images,
                                              const UQConfig& config, int max_len);

/// `image_id,cider_mean,cider_min,cider_max,H_bar,H_pred,MI,softmax_conf`
void write_per_image_csv(std::span<const UncertaintySummary> rows, const std::filesystem::path& path);
/// `quantile,lo,hi,n,mean_H,mean_MI,mean_conf,mean_cider`
void write_quantile_csv(std::span<const QuantileBin> bins, const std::filesystem::path& path);
/// `image_id,pass,H_m,cider`
void write_per_pass_csv(std::span<const UncertaintySummary> rows, const std::filesystem::path& path);

}  // namespace bscst::uq
