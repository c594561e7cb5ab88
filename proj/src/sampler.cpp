#include "infodiff/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <thread>

#include "infodiff/errors.hpp"
#include "infodiff/evalmetrics.hpp"
#include "infodiff/keyvalue.hpp"

namespace infodiff::sample {

std::vector<int> step_sequence(int total_steps, int steps) {
  if (steps < 2) throw ContractError("sampling needs at least 2 steps, got " + std::to_string(steps));
  if (steps > total_steps) {
    throw ContractError("sampling steps " + std::to_string(steps) + " exceed the schedule's " +
                        std::to_string(total_steps));
  }
  std::vector<int> tau(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) {
    tau[static_cast<std::size_t>(k)] =
        static_cast<int>(std::llround(static_cast<double>(k) * total_steps / static_cast<double>(steps)));
  }
  return tau;
}

std::vector<int> round_to_tokens(const diff::RowMatrixF& x, const diff::EmbeddingTable& emb) {
  if (x.cols() != emb.width()) throw DimensionError("round: width differs from the embedding table");
  if (!x.allFinite()) throw NumericError("round: non-finite input");
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  const auto& E = emb.rows();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    int best_id = 0;
    for (int w = 0; w < emb.vocab_size(); ++w) {
      double d = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double diff = static_cast<double>(x(r, c)) - static_cast<double>(E(w, c));
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_id = w;
      }
    }
    out[static_cast<std::size_t>(r)] = best_id;
  }
  return out;
}

diff::RowMatrixF clamp_to_embedding(const diff::RowMatrixF& x, const diff::EmbeddingTable& emb) {
  const auto ids = round_to_tokens(x, emb);
  diff::RowMatrixF out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = emb.row(ids[static_cast<std::size_t>(r)]);
  return out;
}

bool retained_step(int step, int total) {
  const int stride = (total + 49) / 50;
  return step == 1 || step == total || step % stride == 0;
}

void SampleTrace::finalize() {
  if (steps.empty()) throw ContractError("trace has no steps");
  const auto L = steps.front().tokens.size();
  for (const auto& s : steps) {
    if (s.tokens.size() != L) throw InputError("trace steps disagree on the sequence length");
  }
  stabilization.assign(L, 0);
  for (std::size_t i = 0; i < L; ++i) {
    const int last = steps.back().tokens[i];
    std::size_t k = steps.size() - 1;
    while (k > 0 && steps[k - 1].tokens[i] == last) --k;
    stabilization[i] = steps[k].step;
  }
  output_positions.clear();
  const auto& tokens = steps.back().tokens;
  for (auto i = static_cast<std::size_t>(std::max(0, target_start)); i < L; ++i) {
    if (tokens[i] == text::kSep) break;
    if (!text::is_reserved(tokens[i])) output_positions.push_back(static_cast<int>(i));
  }
}

std::vector<int> extract_output(std::span<const int> tokens, int target_start) {
  std::vector<int> out;
  for (auto i = static_cast<std::size_t>(std::max(0, target_start)); i < tokens.size(); ++i) {
    if (tokens[i] == text::kSep) break;
    if (!text::is_reserved(tokens[i])) out.push_back(tokens[i]);
  }
  return out;
}

std::vector<SampleResult> reverse_sample(const model::Denoiser& model, std::span<const int> source,
                                         const sched::AlphaBarTable& table, const SamplerOptions& opts,
                                         std::span<Rng> streams) {
  const auto& cfg = model.config();
  const int L = cfg.max_length;
  const int d = cfg.width;
  const int B = static_cast<int>(streams.size());
  if (B == 0) return {};
  if (table.steps() != cfg.steps || table.length() != L) {
    throw ContractError("sampling table must be (T+1) x L for the model");
  }
  const int S = opts.steps == 0 ? cfg.steps : opts.steps;
  const auto tau = step_sequence(cfg.steps, S);
  if (opts.sigma0 < 0.0) throw ContractError("sigma0 must be non-negative");

  diff::PairedBatch batch = diff::make_batch(L);
  for (int b = 0; b < B; ++b) diff::append_row(batch, source, {});
  const int target_start = static_cast<int>(source.size()) + 2;
  const diff::EmbeddingTable emb = model.embedding();

  // Source rows keep their embedded values; target rows start from N(0, I).
  diff::DiffusionState x{diff::RowMatrixF(B * L, d), B, L, tau.back()};
  for (int b = 0; b < B; ++b) {
    auto& rng = streams[static_cast<std::size_t>(b)];
    for (int i = 0; i < L; ++i) {
      const auto r = static_cast<Eigen::Index>(batch.index(b, i));
      const bool src = batch.source_mask[static_cast<std::size_t>(r)];
      for (int c = 0; c < d; ++c) {
        const double base = src ? static_cast<double>(emb.row(batch.ids[static_cast<std::size_t>(r)])(c)) : 0.0;
        const double sd = src ? opts.sigma0 : 1.0;
        x.x(r, c) = static_cast<float>(base + sd * standard_normal(rng));
      }
    }
  }
  const diff::RowMatrixF anchor = x.x;
  const auto anchor_tokens = round_to_tokens(anchor, emb);

  model::Conditioning cond{std::vector<int>(static_cast<std::size_t>(B)), batch.source_mask, batch.pad_mask};
  const bool use_sc = opts.self_condition && cfg.self_condition;
  diff::RowMatrixF sc = diff::RowMatrixF::Zero(B * L, d);
  std::vector<SampleResult> results(static_cast<std::size_t>(B));
  for (auto& res : results) {
    res.trace.total_steps = S;
    res.trace.target_start = target_start;
    res.trace.kind = opts.kind;
    res.trace.seed = opts.seed;
  }
  const std::span<const sched::AlphaBarTable> tables(&table, 1);

  for (int r = 1; r <= S; ++r) {
    const int t = tau[static_cast<std::size_t>(S - r + 1)];
    const int t_prev = tau[static_cast<std::size_t>(S - r)];
    x.t = t;
    std::fill(cond.steps.begin(), cond.steps.end(), t);
    diff::RowMatrixF x0 = model.denoise(x, sc, cond);
    if (!x0.allFinite()) throw NumericError("non-finite prediction at reverse step " + std::to_string(r));
    if (opts.clamp_x0) x0 = clamp_to_embedding(x0, emb);
    if (use_sc) sc = x0;

    if (retained_step(r, S)) {
      auto tokens = round_to_tokens(x0, emb);
      for (std::size_t k = 0; k < tokens.size(); ++k) {
        if (batch.source_mask[k]) tokens[k] = anchor_tokens[k];
      }
      for (int b = 0; b < B; ++b) {
        const auto first = tokens.begin() + static_cast<std::ptrdiff_t>(batch.index(b, 0));
        results[static_cast<std::size_t>(b)].trace.steps.push_back({r, t, std::vector<int>(first, first + L)});
      }
    }
    if (t_prev == 0) break;

    const auto post = diff::posterior_between(x, x0, t, t_prev, tables);
    for (int b = 0; b < B; ++b) {
      auto& rng = streams[static_cast<std::size_t>(b)];
      for (int i = 0; i < L; ++i) {
        const auto row = static_cast<Eigen::Index>(batch.index(b, i));
        if (batch.source_mask[static_cast<std::size_t>(row)]) {
          x.x.row(row) = anchor.row(row);
          continue;
        }
        const double sd = std::sqrt(static_cast<double>(post.variance(row)));
        for (int c = 0; c < d; ++c) {
          const double z = sd == 0.0 ? 0.0 : sd * standard_normal(rng);
          x.x(row, c) = static_cast<float>(static_cast<double>(post.mean(row, c)) + z);
        }
      }
    }
  }

  for (auto& res : results) {
    res.trace.finalize();
    res.tokens = extract_output(res.trace.final_tokens(), target_start);
  }
  return results;
}

SampleResult reverse_sample(const model::Denoiser& model, std::span<const int> source,
                            const sched::AlphaBarTable& table, const SamplerOptions& opts, Rng& rng) {
  auto out = reverse_sample(model, source, table, opts, std::span<Rng>(&rng, 1));
  return std::move(out.front());
}

int worker_threads() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* env = std::getenv("INFODIFF_THREADS")) {
    int cap = 0;
    const auto* end = env + std::char_traits<char>::length(env);
    const auto [p, ec] = std::from_chars(env, end, cap);
    if (ec != std::errc{} || p != end || cap < 1) {
      throw ConfigError(std::string("INFODIFF_THREADS must be a positive integer, got '") + env + "'");
    }
    n = std::min(n, cap);
  }
  return n;
}

std::vector<SourceSamples> sample_sources(const model::Denoiser& model, std::span<const std::vector<int>> sources,
                                          const sched::AlphaBarTable& table, const SamplerOptions& opts,
                                          int candidates, int threads) {
  if (candidates < 1) throw ContractError("need at least one candidate per source");
  std::vector<SourceSamples> out(sources.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t s; (s = next.fetch_add(1)) < sources.size();) {
      try {
        std::vector<Rng> streams;
        for (int c = 0; c < candidates; ++c) streams.push_back(make_stream(opts.seed, {s, static_cast<std::uint64_t>(c)}));
        auto& slot = out[s];
        slot.candidates = reverse_sample(model, sources[s], table, opts, streams);
        std::vector<std::vector<int>> seqs;
        for (const auto& c : slot.candidates) seqs.push_back(c.tokens);
        slot.chosen = metrics::mbr_select(seqs);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = sources.size();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(sources.size())));
  std::vector<std::thread> pool;
  for (int k = 1; k < n; ++k) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::string format_trace(const SampleTrace& trace) {
  std::string out = "# schedule=" + std::string(sched::schedule_kind_name(trace.kind)) +
                    " seed=" + std::to_string(trace.seed) + " target_start=" + std::to_string(trace.target_start) +
                    " total_steps=" + std::to_string(trace.total_steps) + "\n";
  for (const auto& s : trace.steps) {
    out += std::to_string(s.step) + "\t" + std::to_string(s.t) + "\t";
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(s.tokens[i]);
    }
    out += '\n';
  }
  return out;
}

namespace {

long long parse_integer(std::string_view s, const char* what) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) {
    throw InputError(std::string("trace: bad ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

SampleTrace parse_trace(std::string_view text) {
  SampleTrace trace;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw InputError("trace: missing header line");
  std::istringstream header(line.substr(2));
  bool has_total = false;
  for (std::string field; header >> field;) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw InputError("trace: bad header field '" + field + "'");
    const auto key = field.substr(0, eq);
    const std::string_view value = std::string_view(field).substr(eq + 1);
    if (key == "schedule") {
      trace.kind = sched::parse_schedule_kind(value);
    } else if (key == "seed") {
      trace.seed = static_cast<std::uint64_t>(parse_integer(value, "seed"));
    } else if (key == "target_start") {
      trace.target_start = static_cast<int>(parse_integer(value, "target_start"));
    } else if (key == "total_steps") {
      trace.total_steps = static_cast<int>(parse_integer(value, "total_steps"));
      has_total = true;
    }
  }
  if (!has_total) throw InputError("trace: header lacks total_steps");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw InputError("trace: expected step<TAB>t<TAB>tokens");
    TraceStep s;
    s.step = static_cast<int>(parse_integer(std::string_view(line).substr(0, a), "step"));
    s.t = static_cast<int>(parse_integer(std::string_view(line).substr(a + 1, b - a - 1), "t"));
    std::istringstream toks(line.substr(b + 1));
    for (std::string tok; toks >> tok;) s.tokens.push_back(static_cast<int>(parse_integer(tok, "token")));
    if (!trace.steps.empty() && s.step <= trace.steps.back().step) throw InputError("trace: steps must increase");
    trace.steps.push_back(std::move(s));
  }
  if (trace.steps.empty()) throw InputError("trace: no steps");
  trace.finalize();
  return trace;
}

DecodeOrderReport decode_order_report(std::span<const SampleTrace> traces, const text::EntropyTable& entropy) {
  if (traces.empty()) throw ContractError("decode-order report needs at least one trace");
  struct Item {
    double h;
    int stab;
    int total;
  };
  std::vector<Item> items;
  for (const auto& tr : traces) {
    for (int p : tr.output_positions) {
      const int id = tr.final_tokens()[static_cast<std::size_t>(p)];
      if (id < 0 || id >= entropy.size()) throw InputError("trace token " + std::to_string(id) + " outside the entropy table");
      items.push_back({entropy[id], tr.stabilization[static_cast<std::size_t>(p)], tr.total_steps});
    }
  }
  DecodeOrderReport rep;
  rep.tokens = static_cast<int>(items.size());
  if (items.empty()) return rep;

  std::vector<double> sorted_h;
  for (const auto& it : items) sorted_h.push_back(it.h);
  std::sort(sorted_h.begin(), sorted_h.end());
  const auto n = static_cast<double>(items.size());
  for (const auto& it : items) {
    const auto below = static_cast<double>(std::lower_bound(sorted_h.begin(), sorted_h.end(), it.h) - sorted_h.begin());
    const int q = std::min(3, static_cast<int>(std::floor(4.0 * below / n)));
    auto& qs = rep.quartiles[static_cast<std::size_t>(q)];
    ++qs.count;
    qs.mean += it.stab;
    const int bin = std::clamp(static_cast<int>((static_cast<long long>(it.stab) - 1) * 10 / std::max(1, it.total)), 0, 9);
    ++qs.histogram[static_cast<std::size_t>(bin)];
  }
  int lowest = -1, highest = -1;
  for (int q = 0; q < 4; ++q) {
    auto& qs = rep.quartiles[static_cast<std::size_t>(q)];
    if (qs.count == 0) continue;
    qs.mean /= qs.count;
    if (lowest < 0) lowest = q;
    highest = q;
  }
  if (lowest != highest) {
    rep.delta = rep.quartiles[static_cast<std::size_t>(lowest)].mean - rep.quartiles[static_cast<std::size_t>(highest)].mean;
  }
  return rep;
}

std::string DecodeOrderReport::format() const {
  std::ostringstream out;
  out << "quartile  count  mean_stab  histogram\n";
  for (std::size_t q = 0; q < quartiles.size(); ++q) {
    const auto& qs = quartiles[q];
    char buf[64];
    std::snprintf(buf, sizeof buf, "Q%zu        %-5d  %-9.3f ", q + 1, qs.count, qs.mean);
    out << buf;
    for (std::size_t b = 0; b < qs.histogram.size(); ++b) out << (b ? " " : "") << qs.histogram[b];
    out << '\n';
  }
  out << "\ntokens=" << tokens << "\ndelta=" << (delta ? kv::format_double(*delta) : std::string("absent")) << '\n';
  return out.str();
}

}  // namespace infodiff::sample
