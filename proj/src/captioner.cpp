#include "bscst/captioner.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace bscst::model {

using grad::ParamStore;
using grad::Parameter;

DropoutConfig DropoutConfig::training(double p, MaskPolicy policy) {
  DropoutConfig c;
  c.rate = {p, p, 0.0};
  c.enabled = {true, true, false};
  c.policy = policy;
  return c;
}

DropoutConfig DropoutConfig::final_fc(double p) {
  DropoutConfig c;
  c.rate = {0.0, 0.0, p};
  c.enabled = {false, false, true};
  return c;
}

bool DropoutConfig::any_active() const {
  for (int s = 0; s < kDropoutSites; ++s)
    if (active(static_cast<DropoutSite>(s))) return true;
  return false;
}

void DropoutConfig::validate() const {
  for (double p : rate)
    if (!(p >= 0.0 && p <= 0.9)) throw std::invalid_argument("dropout rate must be in [0, 0.9]");
}

SamplingStrategy SamplingStrategy::parse(const std::string& text) {
  if (text == "random") return random();
  if (text == "top1" || text == "greedy") return top1();
  if (text == "distr" || text == "distribution") return distribution();
  if (text.rfind("topk:", 0) == 0) {
    int k = 0;
    try {
      k = std::stoi(text.substr(5));
    } catch (const std::exception&) {
      throw std::invalid_argument("bad top-k value in '" + text + "'");
    }
    if (k < 1) throw std::invalid_argument("top-k needs k >= 1");
    return top_k(k);
  }
  throw std::invalid_argument("unknown sampling strategy '" + text + "'");
}

std::string SamplingStrategy::to_string() const {
  switch (kind) {
    case SamplingKind::Random: return "random";
    case SamplingKind::Top1: return "top1";
    case SamplingKind::TopK: return "topk:" + std::to_string(k);
    case SamplingKind::Distribution: return "distr";
  }
  return "?";
}

PassStreams PassStreams::derive(std::uint64_t seed, std::string_view purpose,
                                std::initializer_list<std::uint64_t> indices) {
  const std::uint64_t base = derive_seed(seed, purpose, indices);
  return {Rng::stream(base, "masks"), Rng::stream(base, "sampling")};
}

namespace {

constexpr int kFirstChoosable = text::kEos;

int sample_weighted(std::span<const double> probs, std::span<const int> ids, Rng& rng) {
  double total = 0.0;
  for (int w : ids) total += probs[static_cast<std::size_t>(w)];
  if (!(total > 0.0)) return ids.front();
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (int w : ids) {
    acc += probs[static_cast<std::size_t>(w)];
    if (u < acc) return w;
  }
  return ids.back();
}

}  // namespace

int choose_word(std::span<const double> probs, const SamplingStrategy& strategy, Rng& rng) {
  const int v = static_cast<int>(probs.size());
  if (v <= kFirstChoosable) throw std::invalid_argument("choose_word: vocabulary has no choosable word");
  switch (strategy.kind) {
    case SamplingKind::Top1: {
      int best = kFirstChoosable;
      for (int w = kFirstChoosable + 1; w < v; ++w)
        if (probs[w] > probs[best]) best = w;
      return best;
    }
    case SamplingKind::Random:
      return kFirstChoosable + static_cast<int>(rng.below(static_cast<std::uint64_t>(v - kFirstChoosable)));
    case SamplingKind::Distribution: {
      std::vector<int> ids(static_cast<std::size_t>(v - kFirstChoosable));
      std::iota(ids.begin(), ids.end(), kFirstChoosable);
      return sample_weighted(probs, ids, rng);
    }
    case SamplingKind::TopK: {
      std::vector<int> ids(static_cast<std::size_t>(v - kFirstChoosable));
      std::iota(ids.begin(), ids.end(), kFirstChoosable);
      const std::size_t k = std::min(ids.size(), static_cast<std::size_t>(std::max(1, strategy.k)));
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
      });
      ids.resize(k);
      std::sort(ids.begin(), ids.end());
      return sample_weighted(probs, ids, rng);
    }
  }
  throw std::logic_error("choose_word: unknown strategy");
}

// ---------------------------------------------------------------------------

namespace {

Tensor uniform_init(std::size_t r, std::size_t c, double scale, Rng& rng) {
  Tensor t(r, c);
  for (double& x : t.data) x = (2.0 * rng.uniform() - 1.0) * scale;
  return t;
}

Parameter* bind(ParamStore& store, const std::string& name, std::size_t r, std::size_t c) {
  if (!store.contains(name)) throw std::invalid_argument("captioner: missing parameter '" + name + "'");
  Parameter& p = store.get(name);
  if (p.value.rows != r || p.value.cols != c)
    throw std::invalid_argument("captioner: parameter '" + name + "' has shape " + p.value.shape_string() +
                                ", expected " + std::to_string(r) + "x" + std::to_string(c));
  return &p;
}

}  // namespace

void Captioner::init_params(const ModelConfig& c, ParamStore& store, Rng& rng) {
  if (c.vocab_size <= static_cast<std::size_t>(text::kNumSpecials))
    throw std::invalid_argument("captioner: vocabulary too small");
  const std::size_t H = c.hidden_dim;
  auto w = [&](const char* name, std::size_t r, std::size_t cols) {
    store.add(name, uniform_init(r, cols, 1.0 / std::sqrt(static_cast<double>(r)), rng));
  };
  auto zero = [&](const char* name, std::size_t cols) { store.add(name, Tensor(1, cols)); };
  store.add("embed", uniform_init(c.vocab_size, c.embed_dim, 0.1, rng));
  w("gru.w_ih", c.embed_dim, 3 * H);
  zero("gru.b_ih", 3 * H);
  w("gru.w_hh", H, 3 * H);
  zero("gru.b_hh", 3 * H);
  w("enc.w", c.feature_dim, c.encoder_dim);
  zero("enc.b", c.encoder_dim);
  w("init.w", c.encoder_dim, H);
  zero("init.b", H);
  if (c.attention) {
    w("att.w_query", H, c.attention_dim);
    zero("att.b_query", c.attention_dim);
    w("att.w_key", c.encoder_dim, c.attention_dim);
    w("att.w_score", c.attention_dim, 1);
  }
  w("out.w", H + c.encoder_dim, H);
  zero("out.b", H);
  w("vocab.w", H, c.vocab_size);
  zero("vocab.b", c.vocab_size);
}

Captioner::Captioner(ModelConfig c, ParamStore& store) : config_(c), store_(&store) {
  const std::size_t H = c.hidden_dim;
  embed_ = bind(store, "embed", c.vocab_size, c.embed_dim);
  w_ih_ = bind(store, "gru.w_ih", c.embed_dim, 3 * H);
  b_ih_ = bind(store, "gru.b_ih", 1, 3 * H);
  w_hh_ = bind(store, "gru.w_hh", H, 3 * H);
  b_hh_ = bind(store, "gru.b_hh", 1, 3 * H);
  w_enc_ = bind(store, "enc.w", c.feature_dim, c.encoder_dim);
  b_enc_ = bind(store, "enc.b", 1, c.encoder_dim);
  w_init_ = bind(store, "init.w", c.encoder_dim, H);
  b_init_ = bind(store, "init.b", 1, H);
  if (c.attention) {
    w_query_ = bind(store, "att.w_query", H, c.attention_dim);
    b_query_ = bind(store, "att.b_query", 1, c.attention_dim);
    w_key_ = bind(store, "att.w_key", c.encoder_dim, c.attention_dim);
    w_score_ = bind(store, "att.w_score", c.attention_dim, 1);
  }
  w_out_ = bind(store, "out.w", H + c.encoder_dim, H);
  b_out_ = bind(store, "out.b", 1, H);
  w_vocab_ = bind(store, "vocab.w", H, c.vocab_size);
  b_vocab_ = bind(store, "vocab.b", 1, c.vocab_size);
}

Tensor Captioner::draw_mask(std::span<PassStreams> streams, const DecoderState& state, DropoutSite site,
                            std::size_t width, const DropoutConfig& dropout,
                            std::vector<std::array<std::vector<double>, 2>>& tied) const {
  const double keep = 1.0 - dropout.rate[static_cast<int>(site)];
  const int slot = site == DropoutSite::DecoderState ? 0 : 1;
  Tensor mask(state.rows.size(), width);
  for (std::size_t i = 0; i < state.rows.size(); ++i) {
    const std::size_t r = state.rows[i];
    auto fill = [&](std::span<double> dst) {
      for (double& m : dst) m = streams[r].masks.bernoulli(keep) ? 1.0 : 0.0;
    };
    if (dropout.policy == MaskPolicy::TiedPerSequence) {
      auto& cached = tied[r][static_cast<std::size_t>(slot)];
      if (cached.empty()) {
        cached.resize(width);
        fill(cached);
      }
      std::copy(cached.begin(), cached.end(), mask.row(i).begin());
    } else {
      fill(mask.row(i));
    }
  }
  return mask;
}

DecoderState Captioner::encode_scene(Tape& tape, std::span<const SceneFeatures* const> features,
                                     const DropoutConfig& dropout, std::span<PassStreams> streams) const {
  const std::size_t B = features.size();
  const std::size_t K = config_.slots;
  if (B == 0) throw std::invalid_argument("encode_scene: empty batch");
  if (streams.size() != B) throw std::invalid_argument("encode_scene: one stream pair per row required");
  dropout.validate();
  for (const SceneFeatures* f : features) {
    if (f->num_slots() != K || f->dim() != config_.feature_dim)
      throw std::invalid_argument("encode_scene: features are " + f->slots.shape_string() + ", expected " +
                                  std::to_string(K) + "x" + std::to_string(config_.feature_dim));
  }
  DecoderState st;
  st.rows.resize(B);
  std::iota(st.rows.begin(), st.rows.end(), std::size_t{0});
  st.tied.resize(B);

  // Encoder masks are drawn row by row, slot by slot, before any decoder mask.
  std::vector<Tensor> enc_masks;
  const bool enc_drop = dropout.active(DropoutSite::EncoderOutput);
  if (enc_drop) {
    enc_masks.assign(K, Tensor(B, config_.encoder_dim));
    const double keep = 1.0 - dropout.rate[0];
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t k = 0; k < K; ++k)
        for (double& m : enc_masks[k].row(r)) m = streams[r].masks.bernoulli(keep) ? 1.0 : 0.0;
  }

  Value w_enc = tape.param(*w_enc_), b_enc = tape.param(*b_enc_);
  Value total;
  for (std::size_t k = 0; k < K; ++k) {
    Tensor x(B, config_.feature_dim);
    for (std::size_t r = 0; r < B; ++r) {
      auto src = features[r]->slots.row(k);
      std::copy(src.begin(), src.end(), x.row(r).begin());
    }
    Value e = grad::tanh(grad::add(grad::matmul(tape.constant(std::move(x)), w_enc), b_enc));
    if (enc_drop) e = grad::dropout(e, enc_masks[k], dropout.rate[0]);
    st.slots.push_back(e);
    total = total.valid() ? grad::add(total, e) : e;
  }
  st.mean_slot = grad::scale(total, 1.0 / static_cast<double>(K));
  st.h = grad::tanh(grad::add(grad::matmul(st.mean_slot, tape.param(*w_init_)), tape.param(*b_init_)));
  if (config_.attention) {
    Value w_key = tape.param(*w_key_);
    for (const Value& e : st.slots) st.keys.push_back(grad::matmul(e, w_key));
  }
  return st;
}

StepOutput Captioner::decode_step(Tape& tape, DecoderState& st, std::span<const int> prev_words,
                                  const DropoutConfig& dropout, std::span<PassStreams> streams) const {
  const std::size_t A = st.rows.size();
  const std::size_t H = config_.hidden_dim;
  if (prev_words.size() != A) throw std::invalid_argument("decode_step: one previous word per active row");
  for (int w : prev_words)
    if (w < 0 || static_cast<std::size_t>(w) >= config_.vocab_size)
      throw std::invalid_argument("decode_step: word id " + std::to_string(w) + " out of range");

  Value x = grad::gather(tape.param(*embed_), prev_words);
  Value gx = grad::add(grad::matmul(x, tape.param(*w_ih_)), tape.param(*b_ih_));
  Value gh = grad::add(grad::matmul(st.h, tape.param(*w_hh_)), tape.param(*b_hh_));
  Value z = grad::sigmoid(grad::add(grad::slice_cols(gx, 0, H), grad::slice_cols(gh, 0, H)));
  Value r = grad::sigmoid(grad::add(grad::slice_cols(gx, H, H), grad::slice_cols(gh, H, H)));
  Value n = grad::tanh(grad::add(grad::slice_cols(gx, 2 * H, H), grad::mul(r, grad::slice_cols(gh, 2 * H, H))));
  Value h = grad::add(n, grad::mul(z, grad::sub(st.h, n)));
  st.h = h;

  Value hd = h;
  if (dropout.active(DropoutSite::DecoderState))
    hd = grad::dropout(h, draw_mask(streams, st, DropoutSite::DecoderState, H, dropout, st.tied), dropout.rate[1]);

  StepOutput out;
  Value ctx;
  if (config_.attention) {
    Value q = grad::add(grad::matmul(hd, tape.param(*w_query_)), tape.param(*b_query_));
    Value w_score = tape.param(*w_score_);
    std::vector<Value> scores;
    for (const Value& key : st.keys) scores.push_back(grad::matmul(grad::tanh(grad::add(key, q)), w_score));
    out.attention = grad::softmax(grad::concat(scores), 1);
    for (std::size_t k = 0; k < st.slots.size(); ++k) {
      Value part = grad::mul(grad::slice_cols(out.attention, k, 1), st.slots[k]);
      ctx = ctx.valid() ? grad::add(ctx, part) : part;
    }
  } else {
    ctx = st.mean_slot;
  }
  const Value joined[] = {hd, ctx};
  Value o = grad::tanh(grad::add(grad::matmul(grad::concat(joined), tape.param(*w_out_)), tape.param(*b_out_)));
  if (dropout.active(DropoutSite::FinalFc))
    o = grad::dropout(o, draw_mask(streams, st, DropoutSite::FinalFc, H, dropout, st.tied), dropout.rate[2]);
  out.logp = grad::log_softmax(grad::add(grad::matmul(o, tape.param(*w_vocab_)), tape.param(*b_vocab_)));
  return out;
}

void Captioner::retain(Tape&, DecoderState& st, std::span<const int> positions) const {
  if (positions.size() == st.rows.size()) return;
  st.h = grad::gather(st.h, positions);
  for (Value& v : st.slots) v = grad::gather(v, positions);
  for (Value& v : st.keys) v = grad::gather(v, positions);
  st.mean_slot = grad::gather(st.mean_slot, positions);
  std::vector<std::size_t> rows;
  rows.reserve(positions.size());
  for (int p : positions) rows.push_back(st.rows[static_cast<std::size_t>(p)]);
  st.rows = std::move(rows);
}

// ---------------------------------------------------------------------------

Value Rollout::weighted_logprob(Tape& tape, std::span<const double> weights) const {
  if (weights.size() != passes.size()) throw std::invalid_argument("weighted_logprob: one weight per pass");
  Value total = tape.constant(Tensor(1, 1));
  for (const StepPick& pick : picks) {
    Tensor w(pick.rows.size(), 1);
    for (std::size_t i = 0; i < pick.rows.size(); ++i) w.data[i] = weights[pick.rows[i]];
    total = grad::add(total, grad::sum(grad::mul(pick.logp, tape.constant(std::move(w)))));
  }
  return total;
}

Rollout rollout(Tape& tape, const Captioner& model, std::span<const SceneFeatures* const> features,
                const SamplingStrategy& strategy, const DropoutConfig& dropout, std::span<PassStreams> streams,
                int max_len, bool keep_probs, std::span<const Caption> forced) {
  if (max_len < 1) throw std::invalid_argument("rollout: max_len must be >= 1");
  const std::size_t B = features.size();
  if (!forced.empty() && forced.size() != B) throw std::invalid_argument("rollout: one forced caption per row");
  DecoderState st = model.encode_scene(tape, features, dropout, streams);
  const std::size_t V = model.config().vocab_size;

  std::vector<std::vector<int>> words(B);
  Rollout out;
  out.passes.resize(B);
  std::vector<int> prev(B, text::kBos);
  for (int t = 0; t < max_len && !st.rows.empty(); ++t) {
    StepOutput so = model.decode_step(tape, st, prev, dropout, streams);
    const Tensor& lp = so.logp.data();
    const std::size_t A = st.rows.size();
    std::vector<int> chosen(A);
    std::vector<double> probs(V);
    for (std::size_t i = 0; i < A; ++i) {
      const std::size_t r = st.rows[i];
      auto row = lp.row(i);
      for (std::size_t w = 0; w < V; ++w) probs[w] = std::exp(row[w]);
      if (!forced.empty()) {
        const auto& ids = forced[r].ids();
        chosen[i] = ids[static_cast<std::size_t>(t)];
      } else {
        chosen[i] = choose_word(probs, strategy, streams[r].sampling);
      }
      DecodedPass& pass = out.passes[r];
      if (keep_probs) pass.probs.push_back(probs);
      pass.step_logp.push_back(row[static_cast<std::size_t>(chosen[i])]);
      pass.total_logp += row[static_cast<std::size_t>(chosen[i])];
      words[r].push_back(chosen[i]);
    }
    out.picks.push_back({grad::pick(so.logp, chosen), st.rows});

    std::vector<int> keep;
    std::vector<int> next_prev;
    for (std::size_t i = 0; i < A; ++i) {
      const std::size_t r = st.rows[i];
      const bool done = forced.empty() ? chosen[i] == text::kEos
                                       : words[r].size() == forced[r].length();
      if (!done) {
        keep.push_back(static_cast<int>(i));
        next_prev.push_back(chosen[i]);
      }
    }
    if (keep.empty()) break;
    model.retain(tape, st, keep);
    prev = std::move(next_prev);
  }
  for (std::size_t r = 0; r < B; ++r) out.passes[r].caption = Caption(std::move(words[r]));
  return out;
}

DecodedPass generate(const Captioner& model, const SceneFeatures& features, const SamplingStrategy& strategy,
                     const DropoutConfig& dropout, PassStreams& streams, int max_len) {
  Tape tape(false);
  const SceneFeatures* rows[] = {&features};
  Rollout r = rollout(tape, model, rows, strategy, dropout, std::span<PassStreams>(&streams, 1), max_len, true);
  return std::move(r.passes.front());
}

MCBatch mc_passes(const Captioner& model, const SceneFeatures& features, int num_passes,
                  const SamplingStrategy& strategy, const DropoutConfig& dropout, std::uint64_t base_seed,
                  int max_len) {
  if (num_passes < 1) throw std::invalid_argument("mc_passes: M must be >= 1");
  std::vector<const SceneFeatures*> rows(static_cast<std::size_t>(num_passes), &features);
  std::vector<PassStreams> streams;
  for (int m = 0; m < num_passes; ++m)
    streams.push_back(PassStreams::derive(base_seed, "mc_pass", {static_cast<std::uint64_t>(m)}));
  Tape tape(false);
  Rollout r = rollout(tape, model, rows, strategy, dropout, streams, max_len, true);
  MCBatch batch;
  batch.passes = std::move(r.passes);
  batch.rewards.assign(batch.passes.size(), 0.0);
  return batch;
}

namespace {

class CaptionerBeamModel {
 public:
  CaptionerBeamModel(const Captioner& model, const SceneFeatures& features)
      : model_(model), tape_(false), stream_(PassStreams::derive(0, "beam")) {
    const SceneFeatures* rows[] = {&features};
    base_ = model_.encode_scene(tape_, rows, DropoutConfig::disabled(), std::span<PassStreams>(&stream_, 1));
  }

  std::pair<Value, std::vector<double>> start() { return next(base_.h, text::kBos); }

  std::pair<Value, std::vector<double>> next(const Value& h, int word) {
    DecoderState st = base_;
    st.h = h;
    const int prev[] = {word};
    StepOutput so = model_.decode_step(tape_, st, prev, DropoutConfig::disabled(), std::span<PassStreams>(&stream_, 1));
    auto row = so.logp.data().row(0);
    return {st.h, std::vector<double>(row.begin(), row.end())};
  }

 private:
  const Captioner& model_;
  Tape tape_;
  PassStreams stream_;
  DecoderState base_;
};

}  // namespace

Caption beam_search(const Captioner& model, const SceneFeatures& features, int beam_width, int max_len) {
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam_width must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  CaptionerBeamModel bm(model, features);
  BeamResult best = beam_search_core(bm, beam_width, max_len);
  return Caption(std::move(best.ids));
}

}  // namespace bscst::model
