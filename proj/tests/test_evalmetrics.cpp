#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "infodiff/errors.hpp"
#include "infodiff/evalmetrics.hpp"
#include "metric_suites.hpp"
#include "test_util.hpp"

using namespace infodiff;
using namespace infodiff::metrics;

namespace {

std::vector<Tokens> many(const std::string& s) { return testing::split_list(s); }

}  // namespace

TEST_CASE("bleu examples") {
  const Tokens x = split_words("the cat sat on the mat");
  CHECK(bleu(x, x) == 1.0);
  CHECK(bleu(Tokens{}, x) == 0.0);
  CHECK_THROWS_AS(bleu(x, Tokens{}), ContractError);
  // Clipping: one "the" in the reference admits one of three.
  const double p1 = 1.0 / 3.0, p2 = 1e-9 / 2.0, p3 = 1e-9 / 1.0;
  CHECK(bleu(split_words("the the the"), split_words("the cat")) ==
        doctest::Approx(std::exp((std::log(p1) + std::log(p2) + std::log(p3)) / 3.0)).epsilon(1e-12));
  CHECK(bleu(split_words("the the the"), split_words("the cat"), 1) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(bleu(x, x, 0), ContractError);
}

TEST_CASE("rouge-l, distinct and diverse examples") {
  CHECK(rouge_l(split_words("a b c d"), split_words("a c d")) == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
  CHECK(rouge_l(split_words("a b"), split_words("c d")) == 0.0);
  CHECK(rouge_l(split_words("a b"), split_words("a b")) == 1.0);
  CHECK(distinct_n(many("a a a"), 1) == doctest::Approx(1.0 / 3.0));
  CHECK(distinct_n(many("a b c"), 1) == 1.0);
  CHECK(distinct_n(many("a b a b"), 2) == doctest::Approx(2.0 / 3.0));
  CHECK(distinct_n(std::vector<Tokens>{}, 1) == 0.0);
  CHECK(diverse_4(many("a b c d")) == 0.25);
  CHECK(diverse_4(many("a b c d | a b c d | a b c d")) == doctest::Approx(1.0 / 12.0));
  CHECK(diverse_4(std::vector<Tokens>{}) == 0.0);
  CHECK(diverse_4(many("a b c")) == 0.0);
}

TEST_CASE("self-bleu") {
  CHECK(self_bleu(many("a b c | a b c | a b c")) == 1.0);
  CHECK(self_bleu(many("a b c | d e f | g h i")) < 1e-8);
  // Three texts against per-pair multi-reference computation.
  const auto t = many("a b c d | a b x d | y b c d");
  const double expected = (bleu(t[0], std::vector<Tokens>{t[1], t[2]}) + bleu(t[1], std::vector<Tokens>{t[0], t[2]}) +
                           bleu(t[2], std::vector<Tokens>{t[0], t[1]})) /
                          3.0;
  CHECK(self_bleu(t) == expected);
  CHECK_THROWS_AS(self_bleu(many("a")), ContractError);
}

TEST_CASE("metric invariants") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(1, 9), tok(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Tokens> texts(4);
    for (auto& t : texts) {
      for (int i = len(rng); i > 0; --i) t.push_back("w" + std::to_string(tok(rng)));
    }
    CHECK(bleu(texts[0], texts[0]) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(rouge_l(texts[0], texts[0]) == 1.0);
    auto shuffled = texts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(distinct_n(texts, 2) == distinct_n(shuffled, 2));
    CHECK(diverse_4(texts) == diverse_4(shuffled));
    CHECK(self_bleu(texts) == doctest::Approx(self_bleu(shuffled)).epsilon(1e-12));
    for (double v : {bleu(texts[0], texts[1]), rouge_l(texts[0], texts[1]), self_bleu(texts)}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("golden file from the independent oracle") {
  const auto cases = testing::golden_metric_cases(testing::data_path("metrics_golden.tsv"));
  for (const auto& c : cases) {
    INFO(c.metric << " | " << c.arg1 << " | " << c.arg2);
    CHECK(std::abs(c.got - c.expected) <= 1e-9);
  }
  CHECK(cases.size() == 20);
}

TEST_CASE("minimum Bayes risk selection") {
  CHECK_THROWS_AS(mbr_select(std::vector<std::vector<int>>{}), ContractError);
  CHECK(mbr_select(std::vector<std::vector<int>>{{4, 5}}) == 0);
  CHECK(mbr_select(std::vector<std::vector<int>>(4, {4, 5, 6})) == 0);
  const std::vector<std::vector<int>> outlier{{9, 9, 8}, {4, 5, 6, 7}, {4, 5, 6, 7}, {4, 5, 6, 7}, {4, 5, 6, 7}};
  CHECK(mbr_select(outlier) == 1);

  CHECK(testing::mbr_fuzz_mismatches(12, 200) == 0);
}

TEST_CASE("report") {
  const auto refs = many("a b c d | e f g");
  const auto r = evaluate(refs, refs);
  CHECK(r.bleu == 1.0);
  CHECK(r.rouge_l == 1.0);
  CHECK(r.corpus_bleu == 1.0);
  CHECK(r.pairs == 2);
  CHECK(r.format().find("rouge_l=1") != std::string::npos);
  CHECK_THROWS_AS(evaluate(refs, many("a")), InputError);
  const std::vector<std::vector<Tokens>> groups{many("a b c | a b c | a b d"), many("x y | z w | x y")};
  const auto g = evaluate(refs, refs, groups);
  CHECK(g.diversity_groups == 2);
  CHECK(g.self_bleu == doctest::Approx((self_bleu(groups[0]) + self_bleu(groups[1])) / 2.0));
}
