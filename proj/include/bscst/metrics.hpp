#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bscst/textcore.hpp"

namespace bscst::metrics {

using text::Caption;
using Tokens = std::span<const int>;

inline constexpr int kMaxOrder = 4;

// An n-gram packed as 15 bits per id (ids must be < 32768) plus its order in
// the top bits.
using NGramKey = std::uint64_t;

NGramKey ngram_key(Tokens words, std::size_t start, int n);
int ngram_order(NGramKey key);
std::vector<int> ngram_ids(NGramKey key);

/// Per-order n-gram counts of one caption, each order sorted by key.
struct NGramProfile {
  std::array<std::vector<std::pair<NGramKey, int>>, kMaxOrder> counts;
  std::size_t length = 0;

  static NGramProfile of(Tokens words);
  /// Count of `key` in order n (1-based), 0 when absent.
  int count(int n, NGramKey key) const;
  /// Sum of counts for order n; equals max(0, length - n + 1).
  int total(int n) const;
};

/// Corpus document frequencies: df(g) is the number of images whose reference
/// set contains g at least once.
class DocFreqTable {
 public:
  /// Throws std::invalid_argument on an empty corpus or an image without references.
  static DocFreqTable build(std::span<const std::vector<Caption>> reference_sets);

  std::size_t num_images() const { return num_images_; }
  /// Document frequency of `key`; 0 when never seen.
  int df(NGramKey key) const;
  std::size_t size() const { return df_.size(); }
  const std::unordered_map<NGramKey, int>& entries() const { return df_; }

  /// Text format: header `NIMAGES <count>` then sorted lines
  /// `n<TAB>words joined by space<TAB>df`.
  void save(const std::filesystem::path& path, const text::Vocabulary& vocab) const;
  static DocFreqTable load(const std::filesystem::path& path, const text::Vocabulary& vocab);

 private:
  std::size_t num_images_ = 0;
  std::unordered_map<NGramKey, int> df_;
};

enum class RewardKind { CiderD, Bleu1, Bleu4, RougeL };

struct RewardFn {
  RewardKind kind = RewardKind::CiderD;
  double sigma = 6.0;  // CIDEr-D length-penalty width
  double beta = 1.2;   // ROUGE-L recall weight

  static RewardFn cider_d(double sigma = 6.0) { return {RewardKind::CiderD, sigma, 1.2}; }
  static RewardFn bleu4() { return {RewardKind::Bleu4, 6.0, 1.2}; }
  static RewardFn bleu1() { return {RewardKind::Bleu1, 6.0, 1.2}; }
  static RewardFn rouge_l(double beta = 1.2) { return {RewardKind::RougeL, 6.0, beta}; }
};

std::string to_string(RewardKind kind);

/// CIDEr-D with TF-IDF n-gram vectors (n = 1..4), candidate counts clipped at
/// reference counts, Gaussian length penalty, scaled by 10. Range [0, 10].
double cider_d(Tokens candidate, std::span<const Caption> refs, const DocFreqTable& df,
               double sigma = 6.0);

/// CIDEr-D against a fixed reference set, with the reference vectors computed
/// once. Scoring many candidates for one image (RL rollouts) goes through this.
class CiderScorer {
 public:
  CiderScorer(std::span<const Caption> refs, const DocFreqTable& df, double sigma = 6.0);
  double score(Tokens candidate) const;

 private:
  struct Vec {
    std::array<std::vector<std::pair<NGramKey, double>>, kMaxOrder> weights;
    std::array<double, kMaxOrder> norms{};  // squared L2 norms
    double length = 0.0;
  };
  Vec vectorize(const NGramProfile& profile) const;

  const DocFreqTable* df_;
  double sigma_;
  double log_images_;
  std::vector<Vec> ref_vecs_;
};

/// Smoothed sentence BLEU up to order max_n: geometric mean of clipped
/// precisions (eps added to numerator and denominator) times the brevity
/// penalty against the closest reference length.
double bleu(Tokens candidate, std::span<const Caption> refs, int max_n, double eps = 1e-9);
inline double bleu4(Tokens candidate, std::span<const Caption> refs) {
  return bleu(candidate, refs, 4);
}

std::size_t lcs_length(Tokens a, Tokens b);
/// LCS-based F-measure, maximised over references.
double rouge_l(Tokens candidate, std::span<const Caption> refs, double beta = 1.2);

/// Dispatches on fn.kind. `df` is required for CIDEr-D.
double score(const RewardFn& fn, Tokens candidate, std::span<const Caption> refs,
             const DocFreqTable* df);

struct ImageCandidate {
  long image_id = 0;
  Caption caption;
};

struct ImageReferences {
  long image_id = 0;
  std::vector<Caption> refs;
};

struct CorpusScores {
  std::vector<long> image_ids;
  std::vector<double> per_image;
  double mean = 0.0;
};

/// Throws std::invalid_argument when the two lists are not aligned by image id.
CorpusScores score_corpus(std::span<const ImageCandidate> candidates,
                          std::span<const ImageReferences> references, const RewardFn& fn,
                          const DocFreqTable* df);

}  // namespace bscst::metrics
