#include "infodiff/textcorpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "infodiff/errors.hpp"

namespace infodiff::text {

namespace {

constexpr std::string_view kReservedNames[kNumReserved] = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
constexpr std::string_view kSpaceMark = "\xE2\x96\x81";  // U+2581, stands in for ' ' in char mode
constexpr std::string_view kJoin = "@@";                // marks a non-final BPE piece

std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xF0) {
      len = 4;
    } else if (c >= 0xE0) {
      len = 3;
    } else if (c >= 0xC0) {
      len = 2;
    }
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

using Merge = std::pair<std::string, std::string>;

void apply_merge(std::vector<std::string>& symbols, const Merge& merge) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      out.push_back(symbols[i]);
    }
  }
  symbols = std::move(out);
}

std::vector<Merge> learn_bpe(std::span<const TextPair> corpus, int merges) {
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& pair : corpus) {
    for (auto side : {std::string_view(pair.source), std::string_view(pair.target)}) {
      for (auto w : split_whitespace(side)) ++word_counts[std::string(w)];
    }
  }
  std::vector<std::pair<std::vector<std::string>, std::int64_t>> words;
  for (const auto& [w, n] : word_counts) words.emplace_back(utf8_chars(w), n);

  std::vector<Merge> learned;
  for (int m = 0; m < merges; ++m) {
    std::map<Merge, std::int64_t> pair_counts;
    for (const auto& [symbols, n] : words) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pair_counts[{symbols[i], symbols[i + 1]}] += n;
    }
    if (pair_counts.empty()) break;
    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    learned.push_back(best->first);
    for (auto& [symbols, n] : words) apply_merge(symbols, best->first);
  }
  return learned;
}

}  // namespace

TokenizerMode parse_tokenizer_mode(std::string_view name) {
  if (name == "whitespace") return TokenizerMode::Whitespace;
  if (name == "char") return TokenizerMode::Char;
  if (name == "bpe") return TokenizerMode::Bpe;
  throw ConfigError("unknown tokenizer mode '" + std::string(name) + "'");
}

std::string_view tokenizer_mode_name(TokenizerMode mode) {
  switch (mode) {
    case TokenizerMode::Whitespace: return "whitespace";
    case TokenizerMode::Char: return "char";
    case TokenizerMode::Bpe: return "bpe";
  }
  return "?";
}

std::vector<TextPair> parse_corpus(std::string_view contents) {
  std::vector<TextPair> pairs;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    std::size_t end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || line.find('\t', tab + 1) != std::string_view::npos) {
      throw InputError("corpus line " + std::to_string(line_no) + ": expected exactly one TAB");
    }
    pairs.push_back({std::string(line.substr(0, tab)), std::string(line.substr(tab + 1))});
  }
  return pairs;
}

std::vector<TextPair> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read corpus file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  auto pairs = parse_corpus(buf.str());
  if (pairs.empty()) throw InputError("corpus file '" + path + "' is empty");
  return pairs;
}

// ---------------------------------------------------------------------------
// Vocab

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw InputError("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::build(std::span<const TextPair> corpus, TokenizerMode mode, int bpe_merges) {
  if (corpus.empty()) throw InputError("build_vocab: corpus is empty");
  Vocab v;
  v.mode_ = mode;
  if (mode == TokenizerMode::Bpe) v.merges_ = learn_bpe(corpus, bpe_merges);

  std::set<std::string> content;
  for (const auto& pair : corpus) {
    for (auto side : {std::string_view(pair.source), std::string_view(pair.target)}) {
      for (auto& tok : v.tokenize(side)) content.insert(std::move(tok));
      if (mode == TokenizerMode::Bpe) {
        // Every character in both piece forms, so unseen words still segment.
        for (auto w : split_whitespace(side)) {
          for (auto& c : utf8_chars(w)) {
            content.insert(c + std::string(kJoin));
            content.insert(std::move(c));
          }
        }
      }
    }
  }
  for (auto name : kReservedNames) content.erase(std::string(name));
  for (auto name : kReservedNames) v.tokens_.emplace_back(name);
  v.tokens_.insert(v.tokens_.end(), content.begin(), content.end());
  if (v.size() < kNumReserved + 1) throw InputError("build_vocab: corpus has no content tokens");
  v.index();
  return v;
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw ContractError("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocab::segment_word(std::string_view word) const {
  std::vector<std::string> symbols = utf8_chars(word);
  for (const auto& m : merges_) apply_merge(symbols, m);
  for (std::size_t i = 0; i + 1 < symbols.size(); ++i) symbols[i] += kJoin;
  return symbols;
}

std::vector<std::string> Vocab::tokenize(std::string_view text) const {
  std::vector<std::string> out;
  switch (mode_) {
    case TokenizerMode::Whitespace:
      for (auto w : split_whitespace(text)) out.emplace_back(w);
      break;
    case TokenizerMode::Char:
      for (auto& c : utf8_chars(text)) out.push_back(c == " " ? std::string(kSpaceMark) : std::move(c));
      break;
    case TokenizerMode::Bpe:
      for (auto w : split_whitespace(text)) {
        for (auto& piece : segment_word(w)) out.push_back(std::move(piece));
      }
      break;
  }
  return out;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocab::detokenize(std::span<const std::string> tokens) const {
  std::string out;
  switch (mode_) {
    case TokenizerMode::Whitespace:
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
      }
      break;
    case TokenizerMode::Char:
      for (const auto& t : tokens) out += t == kSpaceMark ? std::string(" ") : t;
      break;
    case TokenizerMode::Bpe: {
      bool joined = true;
      for (const auto& t : tokens) {
        if (!joined) out += ' ';
        joined = ends_with(t, kJoin);
        out += joined ? t.substr(0, t.size() - kJoin.size()) : t;
      }
      break;
    }
  }
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::vector<std::string> toks;
  for (int id : ids) {
    if (!is_reserved(id)) toks.push_back(token(id));
  }
  return detokenize(toks);
}

std::string Vocab::serialize() const {
  std::ostringstream out;
  out << "mode=" << tokenizer_mode_name(mode_) << '\n';
  out << "merges=" << merges_.size() << '\n';
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  out << "tokens=" << tokens_.size() << '\n';
  for (const auto& t : tokens_) out << t << '\n';
  return out.str();
}

Vocab Vocab::deserialize(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  std::size_t i = 0;
  auto field = [&](std::string_view key) {
    if (i >= lines.size() || lines[i].rfind(std::string(key) + "=", 0) != 0) {
      throw InputError("vocab: expected '" + std::string(key) + "=' on line " + std::to_string(i + 1));
    }
    return lines[i++].substr(key.size() + 1);
  };
  Vocab v;
  v.mode_ = parse_tokenizer_mode(field("mode"));
  const auto n_merges = std::stoul(field("merges"));
  for (std::size_t m = 0; m < n_merges; ++m, ++i) {
    if (i >= lines.size()) throw InputError("vocab: truncated merge list");
    const auto sp = lines[i].find(' ');
    if (sp == std::string::npos) throw InputError("vocab: malformed merge on line " + std::to_string(i + 1));
    v.merges_.emplace_back(lines[i].substr(0, sp), lines[i].substr(sp + 1));
  }
  const auto n_tokens = std::stoul(field("tokens"));
  if (lines.size() - i < n_tokens) throw InputError("vocab: truncated token list");
  v.tokens_.assign(lines.begin() + static_cast<std::ptrdiff_t>(i),
                   lines.begin() + static_cast<std::ptrdiff_t>(i + n_tokens));
  if (v.size() < kNumReserved + 1) throw InputError("vocab: fewer than 5 tokens");
  for (int r = 0; r < kNumReserved; ++r) {
    if (v.tokens_[static_cast<std::size_t>(r)] != kReservedNames[r]) throw InputError("vocab: reserved ids reassigned");
  }
  v.index();
  return v;
}

// ---------------------------------------------------------------------------
// Self-information

EntropyTable self_information(std::span<const int> stream, int vocab_size) {
  EntropyTable t;
  t.counts.assign(static_cast<std::size_t>(vocab_size), 0);
  for (int id : stream) {
    if (id < 0 || id >= vocab_size) throw ContractError("self_information: id out of range");
    ++t.counts[static_cast<std::size_t>(id)];
  }
  t.total = static_cast<std::int64_t>(stream.size());
  const double denom = static_cast<double>(t.total + vocab_size);
  t.bits.resize(t.counts.size());
  for (std::size_t i = 0; i < t.counts.size(); ++i) {
    t.bits[i] = -std::log2(static_cast<double>(t.counts[i] + 1) / denom);
  }
  return t;
}

EntropyTable self_information(std::span<const int> stream, const Vocab& vocab) {
  return self_information(stream, vocab.size());
}

EntropyTable corpus_entropy(std::span<const TextPair> corpus, const Vocab& vocab) {
  std::vector<int> stream;
  for (const auto& pair : corpus) {
    for (int id : vocab.encode(pair.source)) stream.push_back(id);
    for (int id : vocab.encode(pair.target)) stream.push_back(id);
  }
  return self_information(stream, vocab);
}

std::string EntropyTable::export_tsv(const Vocab& vocab) const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  for (int id = 0; id < size(); ++id) {
    out << vocab.token(id) << '\t' << counts[static_cast<std::size_t>(id)] << '\t' << bits[static_cast<std::size_t>(id)]
        << '\n';
  }
  return out.str();
}

EntropyTable EntropyTable::from_tsv(std::string_view text, const Vocab& vocab) {
  std::vector<std::int64_t> counts;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string_view::npos || t2 == std::string_view::npos) throw InputError("entropy table: malformed line");
    const auto id = static_cast<int>(counts.size());
    if (id >= vocab.size() || line.substr(0, t1) != vocab.token(id)) {
      throw InputError("entropy table does not match the vocabulary at id " + std::to_string(id));
    }
    counts.push_back(std::stoll(std::string(line.substr(t1 + 1, t2 - t1 - 1))));
  }
  if (static_cast<int>(counts.size()) != vocab.size()) throw InputError("entropy table size differs from vocabulary");
  std::vector<int> stream;
  for (std::size_t id = 0; id < counts.size(); ++id) stream.insert(stream.end(), static_cast<std::size_t>(counts[id]), static_cast<int>(id));
  return self_information(stream, vocab);
}

SentenceProfile sentence_profile(std::span<const int> ids, const EntropyTable& table) {
  if (ids.empty()) throw InputError("sentence_profile: empty token list");
  SentenceProfile p;
  p.bits.reserve(ids.size());
  p.reserved.reserve(ids.size());
  bool any_content = false;
  for (int id : ids) {
    p.bits.push_back(table[id]);
    p.reserved.push_back(is_reserved(id));
    any_content = any_content || !is_reserved(id);
  }
  double sum = 0.0;
  std::size_t n = 0;
  p.max = -std::numeric_limits<double>::infinity();
  p.min = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (any_content && p.reserved[i]) continue;
    sum += p.bits[i];
    ++n;
    p.max = std::max(p.max, p.bits[i]);
    p.min = std::min(p.min, p.bits[i]);
  }
  p.mean = sum / static_cast<double>(n);
  return p;
}

}  // namespace infodiff::text
