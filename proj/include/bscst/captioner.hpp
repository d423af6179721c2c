#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bscst/features.hpp"
#include "bscst/gradcore.hpp"
#include "bscst/rng.hpp"
#include "bscst/textcore.hpp"

namespace bscst::model {

using grad::Tape;
using grad::Tensor;
using grad::Value;
using text::Caption;

struct ModelConfig {
  std::size_t feature_dim = 17;
  std::size_t slots = 4;
  std::size_t encoder_dim = 32;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t attention_dim = 32;
  std::size_t vocab_size = 0;
  bool attention = true;
  int max_len = 34;
};

enum class DropoutSite : int { EncoderOutput = 0, DecoderState = 1, FinalFc = 2 };
inline constexpr int kDropoutSites = 3;

enum class MaskPolicy { FreshPerTimestep, TiedPerSequence };

/// Per-site dropout rates, the set of enabled sites and the mask policy.
struct DropoutConfig {
  std::array<double, kDropoutSites> rate{0.0, 0.0, 0.0};
  std::array<bool, kDropoutSites> enabled{false, false, false};
  MaskPolicy policy = MaskPolicy::FreshPerTimestep;

  static DropoutConfig disabled() { return {}; }
  /// Encoder-output and decoder-state sites at rate p.
  static DropoutConfig training(double p, MaskPolicy policy = MaskPolicy::FreshPerTimestep);
  /// Final fully connected layer only.
  static DropoutConfig final_fc(double p);

  bool active(DropoutSite s) const {
    return enabled[static_cast<int>(s)] && rate[static_cast<int>(s)] > 0.0;
  }
  bool any_active() const;
  /// Throws std::invalid_argument when a rate is outside [0, 0.9].
  void validate() const;
};

enum class SamplingKind { Random, Top1, TopK, Distribution };

struct SamplingStrategy {
  SamplingKind kind = SamplingKind::Distribution;
  int k = 1;

  static SamplingStrategy top1() { return {SamplingKind::Top1, 1}; }
  static SamplingStrategy distribution() { return {SamplingKind::Distribution, 1}; }
  static SamplingStrategy random() { return {SamplingKind::Random, 1}; }
  static SamplingStrategy top_k(int k) { return {SamplingKind::TopK, k}; }
  /// Accepts random | top1 | topk:K | distr.
  static SamplingStrategy parse(const std::string& text);
  std::string to_string() const;
};

/// Random streams owned by one decoding pass: one for dropout masks, one for
/// word sampling. Keeping them apart lets a pass be replayed under identical
/// masks with teacher forcing.
struct PassStreams {
  Rng masks;
  Rng sampling;

  static PassStreams derive(std::uint64_t seed, std::string_view purpose,
                            std::initializer_list<std::uint64_t> indices = {});
};

/// Picks the next word from a probability vector. PAD and BOS are never
/// chosen; Top1 and TopK break ties towards the lowest id.
int choose_word(std::span<const double> probs, const SamplingStrategy& strategy, Rng& rng);

/// Decoder state for a batch of passes, restricted to the rows still decoding.
struct DecoderState {
  Value h;                              // active rows x hidden
  std::vector<std::size_t> rows;        // original row of each active row
  std::vector<Value> slots;             // K values, active rows x encoder_dim
  std::vector<Value> keys;              // K values, active rows x attention_dim
  Value mean_slot;                      // active rows x encoder_dim
  // Cached tied-per-sequence masks, indexed by original row.
  std::vector<std::array<std::vector<double>, 2>> tied;
};

struct StepOutput {
  Value logp;       // active rows x V
  Value attention;  // active rows x K (invalid when attention is off)
};

/// Toy encoder-decoder policy: per-slot MLP encoder, GRU decoder with additive
/// attention over the encoded slots, tanh output layer and a final vocabulary
/// projection. Dropout sites: encoder output, decoder state, final-fc input.
class Captioner {
 public:
  /// Registers every parameter of `config` in `store` with a small random init.
  static void init_params(const ModelConfig& config, grad::ParamStore& store, Rng& rng);

  /// Binds to parameters already in `store`. Throws on a missing parameter or
  /// a shape mismatch.
  Captioner(ModelConfig config, grad::ParamStore& store);

  const ModelConfig& config() const { return config_; }
  grad::ParamStore& store() const { return *store_; }

  /// Encodes one scene per row. `streams` holds one entry per row.
  DecoderState encode_scene(Tape& tape, std::span<const SceneFeatures* const> features,
                            const DropoutConfig& dropout, std::span<PassStreams> streams) const;

  /// One decoder step for the active rows of `state`; prev_words has one entry
  /// per active row. Updates state.h.
  StepOutput decode_step(Tape& tape, DecoderState& state, std::span<const int> prev_words,
                         const DropoutConfig& dropout, std::span<PassStreams> streams) const;

  /// Keeps only the active rows at `positions` (indices into state.rows).
  void retain(Tape& tape, DecoderState& state, std::span<const int> positions) const;

 private:
  Tensor draw_mask(std::span<PassStreams> streams, const DecoderState& state, DropoutSite site,
                   std::size_t width, const DropoutConfig& dropout,
                   std::vector<std::array<std::vector<double>, 2>>& tied) const;

  ModelConfig config_;
  grad::ParamStore* store_;
  grad::Parameter* embed_;
  grad::Parameter* w_ih_;
  grad::Parameter* b_ih_;
  grad::Parameter* w_hh_;
  grad::Parameter* b_hh_;
  grad::Parameter* w_enc_;
  grad::Parameter* b_enc_;
  grad::Parameter* w_init_;
  grad::Parameter* b_init_;
  grad::Parameter* w_query_ = nullptr;
  grad::Parameter* b_query_ = nullptr;
  grad::Parameter* w_key_ = nullptr;
  grad::Parameter* w_score_ = nullptr;
  grad::Parameter* w_out_;
  grad::Parameter* b_out_;
  grad::Parameter* w_vocab_;
  grad::Parameter* b_vocab_;
};

/// Result of decoding one pass.
struct DecodedPass {
  Caption caption;
  std::vector<std::vector<double>> probs;  // v_t per step (empty unless kept)
  std::vector<double> step_logp;           // log v_t[chosen]
  double total_logp = 0.0;

  std::size_t steps() const { return step_logp.size(); }
};

/// A batch of passes decoded on one tape; keeps the per-step chosen-word
/// log-probabilities so a reward-weighted surrogate can be built afterwards.
struct Rollout {
  std::vector<DecodedPass> passes;

  struct StepPick {
    Value logp;                     // active rows x 1
    std::vector<std::size_t> rows;  // original row of each entry
  };
  std::vector<StepPick> picks;

  /// sum_r weights[r] * log p(pass r), as a 1x1 value on the rollout's tape.
  Value weighted_logprob(Tape& tape, std::span<const double> weights) const;
};

/// Decodes one pass per row until EOS or max_len. With `forced` non-empty the
/// words are taken from those captions (teacher forcing) instead of sampled.
Rollout rollout(Tape& tape, const Captioner& model, std::span<const SceneFeatures* const> features,
                const SamplingStrategy& strategy, const DropoutConfig& dropout,
                std::span<PassStreams> streams, int max_len, bool keep_probs,
                std::span<const Caption> forced = {});

/// Single pass on a non-recording tape, probabilities kept.
DecodedPass generate(const Captioner& model, const SceneFeatures& features,
                     const SamplingStrategy& strategy, const DropoutConfig& dropout,
                     PassStreams& streams, int max_len);

/// The M stochastic passes of one image under one parameter snapshot.
struct MCBatch {
  std::vector<DecodedPass> passes;
  std::vector<double> rewards;

  std::size_t size() const { return passes.size(); }
};

/// M passes with streams derived from base_seed (pass m uses stream index m).
MCBatch mc_passes(const Captioner& model, const SceneFeatures& features, int num_passes,
                  const SamplingStrategy& strategy, const DropoutConfig& dropout,
                  std::uint64_t base_seed, int max_len);

// ---------------------------------------------------------------------------
// Beam search over any model exposing
//   std::pair<State, std::vector<double>> start();           // state after BOS, next-word log-probs
//   std::pair<State, std::vector<double>> next(const State&, int word);

struct BeamResult {
  std::vector<int> ids;
  double logp = 0.0;
};

template <typename Model>
BeamResult beam_search_core(Model& model, int beam_width, int max_len) {
  using State = typename decltype(model.start())::first_type;
  struct Hyp {
    std::vector<int> ids;
    double logp;
    State state;
    std::vector<double> next_logp;
  };
  struct Cand {
    double logp;
    std::size_t parent;
    int word;
  };
  if (beam_width < 1) beam_width = 1;

  std::vector<Hyp> live;
  {
    auto [s, lp] = model.start();
    live.push_back(Hyp{{}, 0.0, std::move(s), std::move(lp)});
  }
  std::vector<BeamResult> finished;
  for (int t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Cand> cands;
    for (std::size_t p = 0; p < live.size(); ++p) {
      const auto& lp = live[p].next_logp;
      for (std::size_t w = text::kEos; w < lp.size(); ++w)
        cands.push_back({live[p].logp + lp[w], p, static_cast<int>(w)});
    }
    const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(beam_width));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.word < b.word;
                      });
    std::vector<Hyp> next_live;
    for (std::size_t i = 0; i < keep; ++i) {
      const Cand& c = cands[i];
      std::vector<int> ids = live[c.parent].ids;
      ids.push_back(c.word);
      if (c.word == text::kEos || t + 1 == max_len) {
        finished.push_back({std::move(ids), c.logp});
      } else {
        auto [s, lp] = model.next(live[c.parent].state, c.word);
        next_live.push_back(Hyp{std::move(ids), c.logp, std::move(s), std::move(lp)});
      }
    }
    live = std::move(next_live);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].logp > finished[best].logp) best = i;
  return finished.empty() ? BeamResult{} : finished[best];
}

/// Beam search with dropout disabled; beam_width = 1 reproduces Top1 decoding.
Caption beam_search(const Captioner& model, const SceneFeatures& features, int beam_width, int max_len);

}  // namespace bscst::model
