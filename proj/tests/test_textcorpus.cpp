#include <cmath>
#include <random>

#include "doctest.h"
#include "infodiff/errors.hpp"
#include "infodiff/textcorpus.hpp"

using namespace infodiff;
using namespace infodiff::text;

TEST_CASE("whitespace vocab reserves ids 0..3") {
  std::vector<TextPair> corpus{{"a", "b"}, {"a", "c"}};
  const Vocab v = Vocab::build(corpus, TokenizerMode::Whitespace);
  CHECK(v.size() == 7);
  CHECK(v.token(kPad) == "[PAD]");
  CHECK(v.token(kCls) == "[CLS]");
  CHECK(v.token(kSep) == "[SEP]");
  CHECK(v.token(kUnk) == "[UNK]");
  CHECK(v.token(4) == "a");
  CHECK(v.token(5) == "b");
  CHECK(v.token(6) == "c");
  CHECK(v.id("zzz") == kUnk);
}

TEST_CASE("char vocab holds the characters") {
  std::vector<TextPair> corpus{{"ab", "ab"}};
  const Vocab v = Vocab::build(corpus, TokenizerMode::Char);
  CHECK(v.size() == 6);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
}

TEST_CASE("bpe merges follow the hand-traced order") {
  SUBCASE("single merge on 'aa aa aa'") {
    std::vector<TextPair> corpus{{"aa aa", "aa"}};
    const Vocab v = Vocab::build(corpus, TokenizerMode::Bpe, 1);
    REQUIRE(v.merges().size() == 1);
    CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "a"});
    CHECK(v.contains("aa"));
    CHECK(v.tokenize("aa") == std::vector<std::string>{"aa"});
  }
  SUBCASE("two merges chain") {
    // pairs: (a,b)=3 (b,c)=1 -> ab ; then (ab,c)=1 -> abc
    std::vector<TextPair> corpus{{"ab ab", "abc"}};
    const Vocab v = Vocab::build(corpus, TokenizerMode::Bpe, 2);
    REQUIRE(v.merges().size() == 2);
    CHECK(v.merges()[1] == std::pair<std::string, std::string>{"ab", "c"});
    CHECK(v.tokenize("abc") == std::vector<std::string>{"abc"});
    CHECK(v.tokenize("cab") == std::vector<std::string>{"c@@", "ab"});
  }
  SUBCASE("ties go to the lexicographically smaller pair") {
    std::vector<TextPair> corpus{{"ba", "ab"}};
    const Vocab v = Vocab::build(corpus, TokenizerMode::Bpe, 1);
    CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "b"});
  }
  SUBCASE("merging stops when no pairs remain") {
    std::vector<TextPair> corpus{{"a", "b"}};
    CHECK(Vocab::build(corpus, TokenizerMode::Bpe, 5).merges().empty());
  }
}

TEST_CASE("empty corpus is an input error") {
  std::vector<TextPair> corpus;
  CHECK_THROWS_AS(Vocab::build(corpus, TokenizerMode::Whitespace), InputError);
}

TEST_CASE("tokenize and detokenize round-trip") {
  std::vector<TextPair> corpus{{"the bus passes", "by the school"}, {"héllo wörld", "a b c"}};
  for (auto mode : {TokenizerMode::Whitespace, TokenizerMode::Char, TokenizerMode::Bpe}) {
    const Vocab v = Vocab::build(corpus, mode, 4);
    for (const auto& p : corpus) {
      for (const auto& s : {p.source, p.target}) {
        CHECK(v.detokenize(v.tokenize(s)) == s);
        CHECK(v.decode(v.encode(s)) == s);
      }
    }
  }
}

TEST_CASE("vocab construction is deterministic and serializes losslessly") {
  std::vector<TextPair> corpus{{"x y z", "z y"}, {"q r", "x x"}};
  const Vocab a = Vocab::build(corpus, TokenizerMode::Bpe, 3);
  const Vocab b = Vocab::build(corpus, TokenizerMode::Bpe, 3);
  CHECK(a.serialize() == b.serialize());
  CHECK(Vocab::deserialize(a.serialize()) == a);
}

TEST_CASE("self-information with add-one smoothing") {
  // V = 6 (4 reserved + a, b), stream [a a a b]
  std::vector<TextPair> corpus{{"a a", "a b"}};
  const Vocab v = Vocab::build(corpus, TokenizerMode::Whitespace);
  REQUIRE(v.size() == 6);
  const EntropyTable t = corpus_entropy(corpus, v);
  CHECK(t.total == 4);
  CHECK(t[v.id("a")] == doctest::Approx(1.321928).epsilon(1e-6));
  CHECK(t[v.id("b")] == doctest::Approx(2.321928).epsilon(1e-6));
  // unseen tokens (reserved here) sit at the smoothing floor, the maximum
  const double floor_bits = -std::log2(1.0 / 10.0);
  CHECK(t[kPad] == doctest::Approx(floor_bits));
  for (int id = 0; id < t.size(); ++id) CHECK(t[id] <= floor_bits + 1e-12);
}

TEST_CASE("uniform counts give equal self-information") {
  const EntropyTable t = self_information(std::vector<int>{4, 5}, 6);
  CHECK(t[4] == t[5]);
}

TEST_CASE("self-information is strictly decreasing in count") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> pick(0, 19);
  std::vector<int> stream;
  for (int i = 0; i < 500; ++i) stream.push_back(pick(rng) % (1 + pick(rng)));
  const EntropyTable t = self_information(stream, 20);
  for (int a = 0; a < 20; ++a) {
    for (int b = 0; b < 20; ++b) {
      if (t.counts[static_cast<std::size_t>(a)] > t.counts[static_cast<std::size_t>(b)]) CHECK(t[a] < t[b]);
      CHECK(t[a] > 0.0);
    }
  }
}

TEST_CASE("entropy export prints six decimals and reloads to the same table") {
  std::vector<TextPair> corpus{{"a a", "a b"}};
  const Vocab v = Vocab::build(corpus, TokenizerMode::Whitespace);
  const EntropyTable t = corpus_entropy(corpus, v);
  const std::string tsv = t.export_tsv(v);
  CHECK(tsv.find("a\t3\t1.321928\n") != std::string::npos);
  CHECK(tsv.find("b\t1\t2.321928\n") != std::string::npos);
  CHECK(EntropyTable::from_tsv(tsv, v) == t);
}

TEST_CASE("sentence profile statistics") {
  EntropyTable t;
  t.bits = {9, 9, 9, 9, 2, 4, 6, 1, 7};
  t.counts.assign(9, 0);
  SUBCASE("mean max min") {
    auto p = sentence_profile(std::vector<int>{4, 5, 6}, t);
    CHECK(p.mean == doctest::Approx(4.0));
    CHECK(p.max == 6.0);
    CHECK(p.min == 2.0);
  }
  SUBCASE("non-integer mean") {
    auto p = sentence_profile(std::vector<int>{7, 4, 8}, t);
    CHECK(p.mean == doctest::Approx(10.0 / 3.0));
    CHECK(p.max == 7.0);
    CHECK(p.min == 1.0);
  }
  SUBCASE("single token") {
    auto p = sentence_profile(std::vector<int>{5}, t);
    CHECK(p.mean == 4.0);
    CHECK(p.max == p.min);
  }
  SUBCASE("reserved positions are flagged and excluded") {
    auto p = sentence_profile(std::vector<int>{kCls, 4, 6, kSep}, t);
    CHECK(p.reserved == std::vector<bool>{true, false, false, true});
    CHECK(p.mean == 4.0);
    CHECK(p.max == 6.0);
  }
  SUBCASE("empty list") { CHECK_THROWS_AS(sentence_profile(std::vector<int>{}, t), InputError); }
}

TEST_CASE("corpus parsing requires one TAB per line") {
  CHECK(parse_corpus("a b\tc\n\nd\te\n").size() == 2);
  CHECK_THROWS_AS(parse_corpus("no tab here\n"), InputError);
  CHECK_THROWS_AS(parse_corpus("a\tb\tc\n"), InputError);
  CHECK_THROWS_AS(read_corpus("/nonexistent/corpus.tsv"), InputError);
}
