#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "bscst/textcore.hpp"

using namespace bscst::text;

TEST_CASE("tokenize lowercases and strips edge punctuation") {
  CHECK(tokenize("  A Red, cube!  ") == WordSeq{"a", "red", "cube"});
  CHECK(tokenize("...") == WordSeq{});
  CHECK(tokenize("don't stop") == WordSeq{"don't", "stop"});
  CHECK(tokenize("") == WordSeq{});
}

TEST_CASE("vocabulary orders words by frequency then lexicographically") {
  const std::vector<WordSeq> corpus = {{"b", "a", "c"}, {"a", "b"}, {"a", "d"}};
  const Vocabulary v = build_vocab(corpus, 1);
  REQUIRE(v.size() == kNumSpecials + 4);
  CHECK(v.token(4) == "a");
  CHECK(v.token(5) == "b");
  CHECK(v.token(6) == "c");
  CHECK(v.token(7) == "d");
  CHECK(v.id("zzz") == kUnk);
  CHECK_FALSE(v.contains("zzz"));

  const Vocabulary pruned = build_vocab(corpus, 2);
  CHECK(pruned.size() == kNumSpecials + 2);
}

TEST_CASE("special ids are fixed") {
  const Vocabulary v;
  CHECK(v.size() == kNumSpecials);
  // special names in text never produce special ids
  CHECK(v.id(v.token(kEos)) == kUnk);
  CHECK(v.id(v.token(kBos)) == kUnk);
  CHECK(v.token(kEos) != v.token(kBos));
  CHECK_THROWS(Vocabulary({"x", "x"}));
}

TEST_CASE("encode and decode round trip, OOV maps to UNK") {
  const Vocabulary v({"a", "red", "cube"});
  const WordSeq words = {"a", "red", "cube"};
  const Caption c = encode_terminated(words, v);
  CHECK(c.terminated());
  CHECK(c.length() == 4);
  CHECK(c.words().size() == 3);
  CHECK(decode(c, v) == words);

  const Caption oov = encode(WordSeq{"a", "blue"}, v);
  CHECK(oov.ids()[1] == kUnk);
  CHECK(encode(WordSeq{}, v).ids().size() == 1);
  CHECK(encode(WordSeq{}, v).terminated());
}

TEST_CASE("caption rejects PAD, BOS and interior EOS") {
  CHECK_THROWS_AS(Caption(std::vector<int>{}), std::invalid_argument);
  CHECK_THROWS_AS(Caption({4, kPad}), std::invalid_argument);
  CHECK_THROWS_AS(Caption({kBos, 4}), std::invalid_argument);
  CHECK_THROWS_AS(Caption({4, kEos, 5}), std::invalid_argument);
  CHECK_NOTHROW(Caption({4, 5, kEos}));
  const Caption open({4, 5});
  CHECK_FALSE(open.terminated());
  CHECK(open.terminated_copy().terminated());
  CHECK(open.terminated_copy().terminated_copy() == open.terminated_copy());
}

TEST_CASE("decode rejects ids outside the vocabulary") {
  const Vocabulary v({"a"});
  CHECK_THROWS_AS(decode(Caption({40}), v), std::out_of_range);
}

TEST_CASE("vocabulary file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "bscst_vocab_test.txt";
  const Vocabulary v({"one", "two", "three"});
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  std::filesystem::remove(path);
}

TEST_CASE("join") {
  const WordSeq w = {"a", "b", "c"};
  CHECK(join(w) == "a b c");
  CHECK(join(w, ',') == "a,b,c");
  CHECK(join(WordSeq{}) == "");
}
