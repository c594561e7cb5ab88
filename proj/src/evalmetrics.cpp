#include "infodiff/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "infodiff/errors.hpp"

namespace infodiff::metrics {

namespace {

template <typename T>
using Counts = std::map<std::vector<T>, int>;

template <typename T>
Counts<T> ngrams(std::span<const T> seq, int n) {
  Counts<T> out;
  if (static_cast<int>(seq.size()) < n) return out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
    ++out[std::vector<T>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                         seq.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return out;
}

// Per order: clipped matches and hypothesis n-gram totals.
template <typename T>
void clipped_counts(std::span<const T> hyp, const std::vector<std::span<const T>>& refs, int max_n,
                    std::vector<double>& matches, std::vector<double>& totals) {
  for (int n = 1; n <= max_n; ++n) {
    const auto h = ngrams(hyp, n);
    Counts<T> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : h) {
      auto it = max_ref.find(g);
      matches[static_cast<std::size_t>(n - 1)] += std::min(c, it == max_ref.end() ? 0 : it->second);
      totals[static_cast<std::size_t>(n - 1)] += c;
    }
  }
}

std::size_t closest_length(std::size_t h, const std::vector<std::size_t>& lengths) {
  std::size_t best = lengths.front();
  for (auto r : lengths) {
    const auto dr = r > h ? r - h : h - r;
    const auto db = best > h ? best - h : h - best;
    if (dr < db || (dr == db && r < best)) best = r;
  }
  return best;
}

double combine(const std::vector<double>& matches, const std::vector<double>& totals, double h, double r) {
  double log_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 0; n < matches.size(); ++n) {
    if (totals[n] <= 0.0) continue;
    log_sum += std::log(std::max(matches[n], kBleuEpsilon) / totals[n]);
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double bp = h < r ? std::exp(1.0 - r / h) : 1.0;
  return bp * std::exp(log_sum / orders);
}

template <typename T>
double bleu_impl(std::span<const T> hyp, const std::vector<std::span<const T>>& refs, int max_n) {
  if (max_n < 1) throw ContractError("bleu: max_n must be at least 1");
  if (refs.empty()) throw ContractError("bleu: at least one reference is required");
  std::vector<std::size_t> lengths;
  for (const auto& r : refs) {
    if (r.empty()) throw ContractError("bleu: empty reference");
    lengths.push_back(r.size());
  }
  if (hyp.empty()) return 0.0;
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0), totals(static_cast<std::size_t>(max_n), 0.0);
  clipped_counts(hyp, refs, max_n, matches, totals);
  return combine(matches, totals, static_cast<double>(hyp.size()),
                 static_cast<double>(closest_length(hyp.size(), lengths)));
}

template <typename T>
std::size_t lcs(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

Tokens split_words(std::string_view text) {
  Tokens out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

double bleu(std::span<const std::string> hypothesis, std::span<const Tokens> references, int max_n) {
  std::vector<std::span<const std::string>> refs(references.begin(), references.end());
  return bleu_impl(hypothesis, refs, max_n);
}

double bleu(std::span<const std::string> hypothesis, std::span<const std::string> reference, int max_n) {
  return bleu_impl(hypothesis, std::vector<std::span<const std::string>>{reference}, max_n);
}

double bleu(std::span<const int> hypothesis, std::span<const int> reference, int max_n) {
  return bleu_impl(hypothesis, std::vector<std::span<const int>>{reference}, max_n);
}

double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references, int max_n) {
  if (hypotheses.size() != references.size()) throw ContractError("corpus_bleu: hypothesis/reference count mismatch");
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0), totals(static_cast<std::size_t>(max_n), 0.0);
  double h = 0.0, r = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (references[i].empty()) throw ContractError("corpus_bleu: empty reference");
    const std::span<const std::string> hyp = hypotheses[i];
    clipped_counts(hyp, std::vector<std::span<const std::string>>{references[i]}, max_n, matches, totals);
    h += static_cast<double>(hyp.size());
    r += static_cast<double>(references[i].size());
  }
  if (h == 0.0) return 0.0;
  return combine(matches, totals, h, r);
}

double rouge_l(std::span<const std::string> hypothesis, std::span<const std::string> reference) {
  if (reference.empty()) throw ContractError("rouge_l: empty reference");
  if (hypothesis.empty()) return 0.0;
  const auto m = static_cast<double>(lcs(hypothesis, reference));
  if (m == 0.0) return 0.0;
  const double p = m / static_cast<double>(hypothesis.size());
  const double rc = m / static_cast<double>(reference.size());
  return 2.0 * p * rc / (p + rc);
}

double distinct_n(std::span<const Tokens> texts, int n) {
  if (n < 1) throw ContractError("distinct_n: n must be at least 1");
  std::set<std::vector<std::string>> unique;
  double total = 0.0;
  for (const auto& t : texts) {
    for (const auto& [g, c] : ngrams(std::span<const std::string>(t), n)) {
      unique.insert(g);
      total += c;
    }
  }
  return total == 0.0 ? 0.0 : static_cast<double>(unique.size()) / total;
}

double diverse_4(std::span<const Tokens> texts) {
  std::set<std::vector<std::string>> unique;
  double words = 0.0;
  for (const auto& t : texts) {
    words += static_cast<double>(t.size());
    for (const auto& [g, c] : ngrams(std::span<const std::string>(t), 4)) unique.insert(g);
  }
  return unique.empty() ? 0.0 : static_cast<double>(unique.size()) / words;
}

double self_bleu(std::span<const Tokens> texts) {
  if (texts.size() < 2) throw ContractError("self_bleu: need at least two texts");
  double sum = 0.0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<Tokens> others;
    for (std::size_t j = 0; j < texts.size(); ++j) {
      if (j != i && !texts[j].empty()) others.push_back(texts[j]);
    }
    if (!others.empty()) sum += bleu(texts[i], others);
  }
  return sum / static_cast<double>(texts.size());
}

double sentence_similarity(std::span<const int> a, std::span<const int> b) {
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  return bleu(a, b);
}

std::size_t mbr_select(std::span<const std::vector<int>> candidates) {
  if (candidates.empty()) throw ContractError("mbr_select: no candidates");
  if (candidates.size() == 1) return 0;
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      if (j != i) s += sentence_similarity(candidates[i], candidates[j]);
    }
    s /= static_cast<double>(candidates.size() - 1);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

std::string MetricReport::format() const {
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "metric        value\n"
                "bleu          %.6f\n"
                "corpus_bleu   %.6f\n"
                "rouge_l       %.6f\n"
                "dist_1        %.6f\n"
                "self_bleu     %.6f\n"
                "diverse_4     %.6f\n"
                "\n"
                "bleu=%.17g\ncorpus_bleu=%.17g\nrouge_l=%.17g\ndist_1=%.17g\nself_bleu=%.17g\ndiverse_4=%.17g\n"
                "pairs=%d\ndiversity_groups=%d\n",
                bleu, corpus_bleu, rouge_l, dist_1, self_bleu, diverse_4, bleu, corpus_bleu, rouge_l, dist_1,
                self_bleu, diverse_4, pairs, diversity_groups);
  return buf;
}

MetricReport evaluate(std::span<const Tokens> hypotheses, std::span<const Tokens> references,
                      std::span<const std::vector<Tokens>> groups) {
  if (hypotheses.size() != references.size()) throw InputError("evaluate: hypothesis and reference counts differ");
  if (hypotheses.empty()) throw InputError("evaluate: nothing to evaluate");
  MetricReport r;
  r.pairs = static_cast<int>(hypotheses.size());
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    r.bleu += bleu(hypotheses[i], references[i]);
    r.rouge_l += rouge_l(hypotheses[i], references[i]);
  }
  r.bleu /= r.pairs;
  r.rouge_l /= r.pairs;
  r.corpus_bleu = corpus_bleu(hypotheses, references);

  std::vector<std::vector<Tokens>> fallback;
  if (groups.empty()) {
    fallback.emplace_back(hypotheses.begin(), hypotheses.end());
    groups = fallback;
  }
  for (const auto& g : groups) {
    r.dist_1 += distinct_n(g, 1);
    r.diverse_4 += diverse_4(g);
    r.self_bleu += g.size() >= 2 ? self_bleu(g) : 0.0;
  }
  r.diversity_groups = static_cast<int>(groups.size());
  r.dist_1 /= r.diversity_groups;
  r.diverse_4 /= r.diversity_groups;
  r.self_bleu /= r.diversity_groups;
  return r;
}

}  // namespace infodiff::metrics
