#include <doctest.h>

#include <algorithm>

#include "bscst/metrics.hpp"
#include "oracles.hpp"

using namespace bscst;
using namespace bscst::metrics;
using text::Caption;

namespace {

struct ToyCorpus {
  std::vector<std::vector<oracle::Seq>> seqs;
  std::vector<std::vector<Caption>> caps;

  explicit ToyCorpus(std::uint64_t seed, int images = 30) {
    Rng rng(seed);
    for (int i = 0; i < images; ++i) {
      std::vector<oracle::Seq> refs;
      const int n = 1 + static_cast<int>(rng.uniform() * 5);
      for (int r = 0; r < n; ++r) refs.push_back(oracle::random_seq(rng, 4, 12, 10, refs.empty() ? nullptr : &refs[0]));
      std::vector<Caption> c;
      for (const auto& s : refs) c.push_back(oracle::caption(s));
      seqs.push_back(refs);
      caps.push_back(c);
    }
  }
};

}  // namespace

TEST_CASE("n-gram keys round trip and profiles count correctly") {
  const std::vector<int> w = {5, 6, 5, 6, 5};
  for (int n = 1; n <= 4; ++n) {
    const NGramKey k = ngram_key(w, 0, n);
    CHECK(ngram_order(k) == n);
    CHECK(ngram_ids(k) == std::vector<int>(w.begin(), w.begin() + n));
  }
  const NGramProfile p = NGramProfile::of(w);
  CHECK(p.count(1, ngram_key(w, 0, 1)) == 3);
  CHECK(p.count(2, ngram_key(w, 0, 2)) == 2);
  CHECK(p.count(2, ngram_key(w, 1, 2)) == 2);
  for (int n = 1; n <= 4; ++n) CHECK(p.total(n) == std::max(0, 5 - n + 1));
  CHECK_THROWS(ngram_key(std::vector<int>{40000}, 0, 1));
}

TEST_CASE("document frequency counts images, not occurrences") {
  const ToyCorpus tc(1);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  const oracle::DocFreq odf(tc.seqs);
  CHECK(df.num_images() == tc.caps.size());
  CHECK(df.size() == odf.df.size());
  for (const auto& [g, count] : odf.df) CHECK(df.df(ngram_key(g, 0, static_cast<int>(g.size()))) == count);
  CHECK_THROWS_AS(DocFreqTable::build(std::vector<std::vector<Caption>>{}), std::invalid_argument);
}

TEST_CASE("CIDEr-D, BLEU and ROUGE-L agree with brute-force oracles") {
  const ToyCorpus tc(2);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  const oracle::DocFreq odf(tc.seqs);
  Rng rng(3);
  for (int k = 0; k < 300; ++k) {
    const std::size_t i = static_cast<std::size_t>(rng.uniform() * tc.seqs.size());
    const auto cand = oracle::random_seq(rng, 4, 12, 12, &tc.seqs[i][0]);
    const Caption c = oracle::caption(cand);
    CHECK(cider_d(c.words(), tc.caps[i], df) == doctest::Approx(oracle::cider_d(cand, tc.seqs[i], odf)).epsilon(1e-12));
    CHECK(bleu4(c.words(), tc.caps[i]) == doctest::Approx(oracle::bleu(cand, tc.seqs[i], 4)).epsilon(1e-12));
    CHECK(bleu(c.words(), tc.caps[i], 1) == doctest::Approx(oracle::bleu(cand, tc.seqs[i], 1)).epsilon(1e-12));
    CHECK(rouge_l(c.words(), tc.caps[i]) == doctest::Approx(oracle::rouge_l(cand, tc.seqs[i])).epsilon(1e-12));
  }
}

TEST_CASE("scores stay in range and are permutation invariant over references") {
  const ToyCorpus tc(4);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  Rng rng(5);
  for (int k = 0; k < 200; ++k) {
    const std::size_t i = static_cast<std::size_t>(rng.uniform() * tc.seqs.size());
    const Caption c = oracle::caption(oracle::random_seq(rng, 4, 12, 12, &tc.seqs[i][0]));
    auto refs = tc.caps[i];
    const double cd = cider_d(c.words(), refs, df), b = bleu4(c.words(), refs), r = rouge_l(c.words(), refs);
    CHECK(cd >= 0.0);
    CHECK(cd <= 10.0 + 1e-12);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0 + 1e-12);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0 + 1e-12);
    std::reverse(refs.begin(), refs.end());
    CHECK(cider_d(c.words(), refs, df) == doctest::Approx(cd).epsilon(1e-12));
    CHECK(bleu4(c.words(), refs) == doctest::Approx(b).epsilon(1e-12));
    CHECK(rouge_l(c.words(), refs) == r);
  }
}

TEST_CASE("identical captions score at the maximum") {
  const ToyCorpus tc(6);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  // a caption whose four orders all carry idf weight
  const Caption c({20, 21, 22, 23, 24});
  const std::vector<Caption> self = {c};
  CHECK(cider_d(c.words(), self, df) == doctest::Approx(10.0).epsilon(1e-14));
  CHECK(bleu4(c.words(), self) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rouge_l(c.words(), self) == 1.0);
}

TEST_CASE("adding the candidate as a reference never lowers ROUGE-L") {
  const ToyCorpus tc(7);
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    const std::size_t i = static_cast<std::size_t>(rng.uniform() * tc.seqs.size());
    const Caption c = oracle::caption(oracle::random_seq(rng, 4, 12, 12));
    auto refs = tc.caps[i];
    const double before = rouge_l(c.words(), refs);
    refs.push_back(c);
    CHECK(rouge_l(c.words(), refs) >= before);
    CHECK(rouge_l(c.words(), refs) == 1.0);
  }
}

TEST_CASE("metrics ignore a trailing EOS and handle empty candidates") {
  const ToyCorpus tc(9);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  const Caption open({5, 6, 7}), closed({5, 6, 7, text::kEos});
  CHECK(cider_d(open.words(), tc.caps[0], df) == cider_d(closed.words(), tc.caps[0], df));
  const std::vector<int> empty;
  CHECK(cider_d(empty, tc.caps[0], df) == 0.0);
  CHECK(bleu4(empty, tc.caps[0]) == 0.0);
  CHECK(rouge_l(empty, tc.caps[0]) == 0.0);
  CHECK_THROWS_AS(bleu4(open.words(), std::vector<Caption>{}), std::invalid_argument);
}

TEST_CASE("CIDEr scorer equals the one-shot function") {
  const ToyCorpus tc(10);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  const CiderScorer scorer(tc.caps[3], df);
  Rng rng(11);
  for (int k = 0; k < 50; ++k) {
    const Caption c = oracle::caption(oracle::random_seq(rng, 4, 12, 12, &tc.seqs[3][0]));
    CHECK(scorer.score(c.words()) == cider_d(c.words(), tc.caps[3], df));
  }
}

TEST_CASE("corpus scoring averages sentence scores and checks alignment") {
  const ToyCorpus tc(12, 4);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  std::vector<ImageCandidate> cands;
  std::vector<ImageReferences> refs;
  double sum = 0;
  for (long i = 0; i < 4; ++i) {
    cands.push_back({i, tc.caps[static_cast<std::size_t>(i)][0]});
    refs.push_back({i, tc.caps[static_cast<std::size_t>(i)]});
    sum += rouge_l(cands.back().caption.words(), refs.back().refs);
  }
  const CorpusScores s = score_corpus(cands, refs, RewardFn::rouge_l(), &df);
  CHECK(s.mean == doctest::Approx(sum / 4));
  refs[1].image_id = 99;
  CHECK_THROWS_AS(score_corpus(cands, refs, RewardFn::rouge_l(), &df), std::invalid_argument);
  CHECK_THROWS_AS(score(RewardFn::cider_d(), cands[0].caption.words(), refs[0].refs, nullptr), std::invalid_argument);
}

TEST_CASE("df table file round trip") {
  const ToyCorpus tc(13);
  std::vector<std::string> words;
  for (int id = 4; id < 40; ++id) words.push_back("w" + std::to_string(id));
  const text::Vocabulary vocab(words);
  const DocFreqTable df = DocFreqTable::build(tc.caps);
  const auto path = std::filesystem::temp_directory_path() / "bscst_df_test.tsv";
  df.save(path, vocab);
  const DocFreqTable back = DocFreqTable::load(path, vocab);
  CHECK(back.num_images() == df.num_images());
  CHECK(back.entries() == df.entries());
  std::filesystem::remove(path);
}
