#pragma once

// Tokenization, vocabulary and per-token self-information.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace infodiff::text {

inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

inline bool is_reserved(int id) noexcept { return id >= 0 && id < kNumReserved; }

enum class TokenizerMode { Whitespace, Char, Bpe };

TokenizerMode parse_tokenizer_mode(std::string_view name);
std::string_view tokenizer_mode_name(TokenizerMode mode);

struct TextPair {
  std::string source;
  std::string target;
};

// One pair per line, source and target separated by a single TAB.
std::vector<TextPair> read_corpus(const std::string& path);
std::vector<TextPair> parse_corpus(std::string_view contents);

class Vocab {
 public:
  // Content tokens are ordered by byte-wise comparison after the reserved
  // ids. BPE ties on merge frequency go to the lexicographically smaller pair.
  static Vocab build(std::span<const TextPair> corpus, TokenizerMode mode, int bpe_merges = 0);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  TokenizerMode mode() const noexcept { return mode_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const noexcept { return merges_; }

  bool contains(std::string_view token) const;
  // kUnk for unknown tokens.
  int id(std::string_view token) const;
  const std::string& token(int id) const;

  std::vector<std::string> tokenize(std::string_view text) const;
  std::vector<int> encode(std::string_view text) const;
  std::string detokenize(std::span<const std::string> tokens) const;
  // Reserved ids are dropped.
  std::string decode(std::span<const int> ids) const;

  std::string serialize() const;
  static Vocab deserialize(std::string_view text);

  bool operator==(const Vocab& other) const {
    return mode_ == other.mode_ && merges_ == other.merges_ && tokens_ == other.tokens_;
  }

 private:
  std::vector<std::string> segment_word(std::string_view word) const;
  void index();

  TokenizerMode mode_ = TokenizerMode::Whitespace;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Per-token self-information in bits under add-one smoothing:
//   H(w) = -log2((count(w) + 1) / (N + V))
struct EntropyTable {
  std::vector<std::int64_t> counts;
  std::vector<double> bits;
  std::int64_t total = 0;

  double operator[](int id) const { return bits.at(static_cast<std::size_t>(id)); }
  int size() const noexcept { return static_cast<int>(bits.size()); }

  // token<TAB>count<TAB>H_bits, H with 6 decimals, one line per id.
  std::string export_tsv(const Vocab& vocab) const;
  // Rebuilds the table from the counts column of an export.
  static EntropyTable from_tsv(std::string_view text, const Vocab& vocab);

  bool operator==(const EntropyTable&) const = default;
};

EntropyTable self_information(std::span<const int> stream, int vocab_size);
EntropyTable self_information(std::span<const int> stream, const Vocab& vocab);

// Counts every source and target token of the corpus (reserved ids excluded
// since they never appear in raw text).
EntropyTable corpus_entropy(std::span<const TextPair> corpus, const Vocab& vocab);

struct SentenceProfile {
  std::vector<double> bits;
  std::vector<bool> reserved;
  double mean = 0.0;
  double max = 0.0;
  double min = 0.0;
};

// Mean, max and min are taken over non-reserved positions; when every
// position is reserved they fall back to all positions.
SentenceProfile sentence_profile(std::span<const int> ids, const EntropyTable& table);

}  // namespace infodiff::text
