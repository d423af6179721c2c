#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>

#include "bscst/captioner.hpp"
#include "bscst/scenegen.hpp"

using namespace bscst;
using namespace bscst::model;

namespace {

ModelConfig small_config(bool attention = true) {
  ModelConfig c;
  c.vocab_size = 12;
  c.encoder_dim = 6;
  c.embed_dim = 5;
  c.hidden_dim = 7;
  c.attention_dim = 4;
  c.attention = attention;
  c.max_len = 6;
  return c;
}

grad::ParamStore make_store(const ModelConfig& c, std::uint64_t seed) {
  grad::ParamStore s;
  Rng rng(seed);
  Captioner::init_params(c, s, rng);
  // larger weights than the default init so that distributions are peaked
  for (auto& p : s)
    for (double& v : p.value.data) v *= 3.0;
  return s;
}

std::vector<SceneFeatures> scenes(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SceneFeatures> out;
  for (int i = 0; i < n; ++i) {
    scene::Scene s;
    const int k = 1 + static_cast<int>(rng.below(3));
    for (int j = 0; j < k; ++j) s.objects.push_back(scene::Object::from_code(static_cast<int>(rng.below(240))));
    out.push_back(scene::render_features(s, 0.05, rng));
  }
  return out;
}

// Next-word log-probabilities that depend on the whole prefix.
struct TableModel {
  int V;
  using State = std::vector<int>;
  std::vector<double> dist(const State& prefix) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (int w : prefix) h = splitmix64(h ^ static_cast<std::uint64_t>(w + 1));
    Rng rng(h);
    std::vector<double> lp(static_cast<std::size_t>(V));
    double z = 0;
    for (double& x : lp) z += (x = std::exp(3.0 * rng.uniform()));
    for (double& x : lp) x = std::log(x / z);
    return lp;
  }
  std::pair<State, std::vector<double>> start() { return {State{}, dist({})}; }
  std::pair<State, std::vector<double>> next(const State& s, int w) {
    State n = s;
    n.push_back(w);
    return {n, dist(n)};
  }
};

// Best complete sequence (ending in EOS, or cut at max_len) by exhaustive search.
BeamResult enumerate(TableModel& m, int max_len) {
  BeamResult best{{}, -1e300};
  std::function<void(std::vector<int>&, double)> go = [&](std::vector<int>& prefix, double lp) {
    const auto d = m.dist(prefix);
    for (int w = text::kEos; w < m.V; ++w) {
      prefix.push_back(w);
      const double l = lp + d[static_cast<std::size_t>(w)];
      if (w == text::kEos || static_cast<int>(prefix.size()) == max_len) {
        if (l > best.logp) best = {prefix, l};
      } else {
        go(prefix, l);
      }
      prefix.pop_back();
    }
  };
  std::vector<int> p;
  go(p, 0.0);
  return best;
}

}  // namespace

TEST_CASE("parameter registration follows the architecture") {
  const ModelConfig c = small_config(true);
  grad::ParamStore s = make_store(c, 1);
  CHECK(s.contains("att.w_query"));
  CHECK(s.get("vocab.w").value.cols == c.vocab_size);
  grad::ParamStore plain = make_store(small_config(false), 1);
  CHECK_FALSE(plain.contains("att.w_query"));
  CHECK(plain.size() < s.size());
  CHECK_NOTHROW(Captioner(small_config(false), plain));
  CHECK_THROWS_AS(Captioner(c, plain), std::invalid_argument);
}

TEST_CASE("sampling strategies parse and print") {
  for (const char* s : {"random", "top1", "topk:5", "distr"}) CHECK(SamplingStrategy::parse(s).to_string() == s);
  CHECK(SamplingStrategy::parse("greedy").kind == SamplingKind::Top1);
  CHECK_THROWS(SamplingStrategy::parse("topk:0"));
  CHECK_THROWS(SamplingStrategy::parse("beam"));
  DropoutConfig d = DropoutConfig::training(0.95);
  CHECK_THROWS(d.validate());
  CHECK_FALSE(DropoutConfig::disabled().any_active());
  CHECK(DropoutConfig::final_fc(0.3).active(DropoutSite::FinalFc));
}

TEST_CASE("choose_word frequencies match the target distribution") {
  const std::vector<double> probs = {0.05, 0.05, 0.1, 0.3, 0.2, 0.25, 0.05};
  Rng rng(4);
  const int draws = 60000;
  auto chi2 = [&](SamplingStrategy s, std::vector<double> expect) {
    std::vector<int> counts(probs.size(), 0);
    for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(choose_word(probs, s, rng))];
    double x = 0;
    for (std::size_t w = 0; w < probs.size(); ++w) {
      if (expect[w] == 0.0) {
        CHECK(counts[w] == 0);
        continue;
      }
      const double e = expect[w] * draws;
      x += (counts[w] - e) * (counts[w] - e) / e;
    }
    return x;
  };
  // PAD and BOS are excluded; the rest is renormalised (chi-square df 4, p = 0.001: 18.5)
  CHECK(chi2(SamplingStrategy::distribution(), {0, 0, 0.1 / 0.9, 0.3 / 0.9, 0.2 / 0.9, 0.25 / 0.9, 0.05 / 0.9}) < 18.5);
  CHECK(chi2(SamplingStrategy::top_k(2), {0, 0, 0, 0.3 / 0.55, 0, 0.25 / 0.55, 0}) < 10.8);
  CHECK(chi2(SamplingStrategy::random(), {0, 0, 0.2, 0.2, 0.2, 0.2, 0.2}) < 18.5);
  CHECK(choose_word(probs, SamplingStrategy::top1(), rng) == 3);
  const std::vector<double> tie = {0.5, 0.0, 0.2, 0.1, 0.2};
  CHECK(choose_word(tie, SamplingStrategy::top1(), rng) == 2);
}

TEST_CASE("beam search finds the exhaustive optimum when wide enough") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TableModel m{6 + static_cast<int>(seed % 2)};
    const BeamResult exact = enumerate(m, 3);
    const BeamResult beam = beam_search_core(m, 400, 3);
    CHECK(beam.ids == exact.ids);
    CHECK(beam.logp == doctest::Approx(exact.logp));
  }
}

TEST_CASE("beam width 1 is greedy decoding") {
  TableModel m{6};
  const BeamResult beam = beam_search_core(m, 1, 5);
  std::vector<int> greedy;
  for (int t = 0; t < 5; ++t) {
    const auto d = m.dist(greedy);
    int best = text::kEos;
    for (int w = text::kEos; w < 6; ++w)
      if (d[static_cast<std::size_t>(w)] > d[static_cast<std::size_t>(best)]) best = w;
    greedy.push_back(best);
    if (best == text::kEos) break;
  }
  CHECK(beam.ids == greedy);

  const ModelConfig c = small_config();
  grad::ParamStore s = make_store(c, 2);
  Captioner cap(c, s);
  for (const auto& f : scenes(5, 3)) {
    PassStreams ps = PassStreams::derive(1, "t");
    const DecodedPass g = generate(cap, f, SamplingStrategy::top1(), DropoutConfig::disabled(), ps, c.max_len);
    CHECK(beam_search(cap, f, 1, c.max_len) == g.caption);
  }
}

TEST_CASE("batched rollout equals per-row decoding") {
  const ModelConfig c = small_config();
  grad::ParamStore s = make_store(c, 5);
  Captioner cap(c, s);
  const auto fs = scenes(4, 6);
  std::vector<const SceneFeatures*> rows;
  std::vector<PassStreams> streams;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    rows.push_back(&fs[i]);
    streams.push_back(PassStreams::derive(9, "row", {i}));
  }
  const DropoutConfig drop = DropoutConfig::training(0.3);
  grad::Tape tape(false);
  const Rollout ro = rollout(tape, cap, rows, SamplingStrategy::distribution(), drop, streams, c.max_len, true);
  bool lengths_differ = false;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    PassStreams ps = PassStreams::derive(9, "row", {i});
    const DecodedPass one = generate(cap, fs[i], SamplingStrategy::distribution(), drop, ps, c.max_len);
    CHECK(one.caption == ro.passes[i].caption);
    REQUIRE(one.steps() == ro.passes[i].steps());
    for (std::size_t t = 0; t < one.steps(); ++t)
      CHECK(one.step_logp[t] == doctest::Approx(ro.passes[i].step_logp[t]).epsilon(1e-12));
    lengths_differ |= one.steps() != ro.passes[0].steps();
    for (const auto& p : one.probs) {
      double z = 0;
      for (double v : p) z += v;
      CHECK(z == doctest::Approx(1.0));
    }
  }
  (void)lengths_differ;
}

TEST_CASE("teacher-forced replay reproduces the sampled pass under both mask policies") {
  const ModelConfig c = small_config();
  grad::ParamStore s = make_store(c, 7);
  Captioner cap(c, s);
  const auto fs = scenes(3, 8);
  std::vector<const SceneFeatures*> rows = {&fs[0], &fs[1], &fs[2]};
  for (MaskPolicy policy : {MaskPolicy::FreshPerTimestep, MaskPolicy::TiedPerSequence}) {
    DropoutConfig drop = DropoutConfig::training(0.4, policy);
    drop.enabled[static_cast<int>(DropoutSite::FinalFc)] = true;
    drop.rate[static_cast<int>(DropoutSite::FinalFc)] = 0.2;
    auto streams = [] {
      std::vector<PassStreams> v;
      for (std::uint64_t i = 0; i < 3; ++i) v.push_back(PassStreams::derive(3, "replay", {i}));
      return v;
    };
    auto st1 = streams();
    grad::Tape t1(false);
    const Rollout sampled = rollout(t1, cap, rows, SamplingStrategy::distribution(), drop, st1, c.max_len, false);
    std::vector<text::Caption> forced;
    for (const auto& p : sampled.passes) forced.push_back(p.caption);
    auto st2 = streams();
    grad::Tape t2(false);
    const Rollout replay = rollout(t2, cap, rows, SamplingStrategy::top1(), drop, st2, c.max_len, false, forced);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(replay.passes[i].caption == forced[i]);
      CHECK(replay.passes[i].total_logp == doctest::Approx(sampled.passes[i].total_logp).epsilon(1e-12));
    }
  }
}

TEST_CASE("mask policies differ and dropout-free decoding ignores the streams") {
  const ModelConfig c = small_config();
  grad::ParamStore s = make_store(c, 11);
  Captioner cap(c, s);
  const auto fs = scenes(1, 12);
  const text::Caption forced({4, 5, 6, 7, 8, text::kEos});
  auto logp = [&](const DropoutConfig& d, std::uint64_t seed) {
    std::vector<const SceneFeatures*> rows = {&fs[0]};
    std::vector<PassStreams> st = {PassStreams::derive(seed, "policy")};
    grad::Tape t(false);
    const std::vector<text::Caption> f = {forced};
    return rollout(t, cap, rows, SamplingStrategy::top1(), d, st, c.max_len, false, f).passes[0].step_logp;
  };
  CHECK(logp(DropoutConfig::disabled(), 1) == logp(DropoutConfig::disabled(), 2));
  const auto fresh = logp(DropoutConfig::training(0.5, MaskPolicy::FreshPerTimestep), 1);
  const auto tied = logp(DropoutConfig::training(0.5, MaskPolicy::TiedPerSequence), 1);
  CHECK(fresh != tied);
  CHECK(fresh != logp(DropoutConfig::training(0.5), 2));
}

TEST_CASE("MC passes are reproducible and vary under dropout") {
  const ModelConfig c = small_config();
  grad::ParamStore s = make_store(c, 13);
  Captioner cap(c, s);
  const auto fs = scenes(1, 14);
  const auto a = mc_passes(cap, fs[0], 8, SamplingStrategy::top1(), DropoutConfig::final_fc(0.5), 42, c.max_len);
  const auto b = mc_passes(cap, fs[0], 8, SamplingStrategy::top1(), DropoutConfig::final_fc(0.5), 42, c.max_len);
  REQUIRE(a.size() == 8);
  bool varied = false;
  for (std::size_t m = 0; m < 8; ++m) {
    CHECK(a.passes[m].caption == b.passes[m].caption);
    CHECK(a.passes[m].probs == b.passes[m].probs);
    varied |= a.passes[m].probs.front() != a.passes[0].probs.front();
  }
  CHECK(varied);
  for (const auto& p : a.passes) {
    CHECK(static_cast<int>(p.steps()) <= c.max_len);
    CHECK((p.caption.terminated() || static_cast<int>(p.steps()) == c.max_len));
  }
}

TEST_CASE("attention weights are a distribution over slots") {
  const ModelConfig c = small_config();
  grad::ParamStore s = make_store(c, 15);
  Captioner cap(c, s);
  const auto fs = scenes(2, 16);
  std::vector<const SceneFeatures*> rows = {&fs[0], &fs[1]};
  std::vector<PassStreams> st = {PassStreams::derive(1, "a", {0}), PassStreams::derive(1, "a", {1})};
  grad::Tape t(false);
  DecoderState state = cap.encode_scene(t, rows, DropoutConfig::disabled(), st);
  const std::vector<int> bos = {text::kBos, text::kBos};
  const StepOutput out = cap.decode_step(t, state, bos, DropoutConfig::disabled(), st);
  REQUIRE(out.attention.valid());
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0;
    for (std::size_t k = 0; k < c.slots; ++k) {
      CHECK(out.attention.data()(r, k) >= 0.0);
      z += out.attention.data()(r, k);
    }
    CHECK(z == doctest::Approx(1.0));
  }
}
