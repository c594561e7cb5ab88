#pragma once

// Quality and diversity metrics over token sequences.
//
// BLEU uses clipped n-gram precision over orders 1..max_n that have at least
// one hypothesis n-gram, add-epsilon smoothing (a zero match count becomes
// 1e-9) and the brevity penalty exp(1 - r/h) for h < r, where r is the
// reference length closest to h (shorter on ties).

#include <span>
#include <string>
#include <vector>

namespace infodiff::metrics {

using Tokens = std::vector<std::string>;

inline constexpr double kBleuEpsilon = 1e-9;

Tokens split_words(std::string_view text);

// Empty hypothesis scores 0; an empty reference is a contract error.
double bleu(std::span<const std::string> hypothesis, std::span<const Tokens> references, int max_n = 4);
double bleu(std::span<const std::string> hypothesis, std::span<const std::string> reference, int max_n = 4);
double bleu(std::span<const int> hypothesis, std::span<const int> reference, int max_n = 4);

// Pooled clipped counts and lengths over aligned hypothesis/reference lists.
double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references, int max_n = 4);

// LCS-based F-measure; 0 when the hypothesis is empty.
double rouge_l(std::span<const std::string> hypothesis, std::span<const std::string> reference);

double distinct_n(std::span<const Tokens> texts, int n);
// Unique 4-grams over total words, both pooled over texts.
double diverse_4(std::span<const Tokens> texts);
// Mean over i of bleu(texts[i], all other non-empty texts).
double self_bleu(std::span<const Tokens> texts);

// Similarity used for minimum-Bayes-risk selection: sentence BLEU, with two
// empty sequences scoring 1 and one empty sequence scoring 0.
double sentence_similarity(std::span<const int> a, std::span<const int> b);

// argmax_c mean_{c' != c} similarity(c, c'); ties go to the lowest index.
std::size_t mbr_select(std::span<const std::vector<int>> candidates);

struct MetricReport {
  double bleu = 0.0;         // mean sentence BLEU
  double corpus_bleu = 0.0;
  double rouge_l = 0.0;
  double dist_1 = 0.0;
  double self_bleu = 0.0;
  double diverse_4 = 0.0;
  int pairs = 0;
  int diversity_groups = 0;

  // Text table followed by a key=value block.
  std::string format() const;
};

// Quality over aligned pairs. Diversity is averaged over `groups` (samples of
// the same condition, three per condition by protocol); when no groups are
// given the hypotheses form a single group.
MetricReport evaluate(std::span<const Tokens> hypotheses, std::span<const Tokens> references,
                      std::span<const std::vector<Tokens>> groups = {});

}  // namespace infodiff::metrics
