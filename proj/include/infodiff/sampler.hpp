#pragma once

// Reverse-process generation, word rounding, candidate selection and the
// decode-order analysis of sampling traces.
//
// Reverse step r = 1..S denoises at t = tau_{S-r+1}, where tau_k =
// round(k T / S) is the evenly spaced subsequence of 0..T with both
// endpoints. Source positions stay anchored to their embedded values.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infodiff/denoiser.hpp"
#include "infodiff/diffusion.hpp"
#include "infodiff/rng.hpp"
#include "infodiff/schedules.hpp"
#include "infodiff/textcorpus.hpp"

namespace infodiff::sample {

// tau_0 = 0 < tau_1 < ... < tau_S = T. Throws ContractError unless 2 <= S <= T.
std::vector<int> step_sequence(int total_steps, int steps);

// Nearest embedding row per matrix row; ties go to the lowest id.
std::vector<int> round_to_tokens(const diff::RowMatrixF& x, const diff::EmbeddingTable& emb);
diff::RowMatrixF clamp_to_embedding(const diff::RowMatrixF& x, const diff::EmbeddingTable& emb);

// Reverse steps kept in a trace: the first, the last and every ceil(S/50)-th.
bool retained_step(int step, int total);

struct TraceStep {
  int step = 0;             // reverse step r, 1-based
  int t = 0;                // diffusion step the estimate was made at
  std::vector<int> tokens;  // rounded x0_hat at every position
};

struct SampleTrace {
  std::vector<TraceStep> steps;
  int total_steps = 0;   // S
  int target_start = 0;  // first generated position
  sched::ScheduleKind kind = sched::ScheduleKind::InfoAware;
  std::uint64_t seed = 0;
  // Derived by finalize(): per position, the first retained step from which
  // the rounded token stays constant; the positions that make up the output.
  std::vector<int> stabilization;
  std::vector<int> output_positions;

  // Recomputes the derived fields from `steps`.
  void finalize();
  const std::vector<int>& final_tokens() const { return steps.back().tokens; }
};

// Generated ids from target_start up to the first SEP, reserved ids dropped.
std::vector<int> extract_output(std::span<const int> tokens, int target_start);

struct SamplerOptions {
  int steps = 0;  // 0 means every step of the table
  bool self_condition = true;
  bool clamp_x0 = false;
  double sigma0 = 0.1;
  // Recorded in traces only.
  sched::ScheduleKind kind = sched::ScheduleKind::InfoAware;
  std::uint64_t seed = 0;
};

struct SampleResult {
  std::vector<int> tokens;
  SampleTrace trace;
};

// Samples one candidate per RNG stream for the same source as a single
// batch. Throws InputError when the source leaves no target position.
std::vector<SampleResult> reverse_sample(const model::Denoiser& model, std::span<const int> source,
                                         const sched::AlphaBarTable& table, const SamplerOptions& opts,
                                         std::span<Rng> streams);
SampleResult reverse_sample(const model::Denoiser& model, std::span<const int> source,
                            const sched::AlphaBarTable& table, const SamplerOptions& opts, Rng& rng);

// Worker count: hardware concurrency, capped by INFODIFF_THREADS when set.
int worker_threads();

struct SourceSamples {
  std::vector<SampleResult> candidates;
  std::size_t chosen = 0;  // MBR winner
};

// |S| candidates per source from streams (seed, source index, candidate),
// sources spread over `threads` workers. Results do not depend on `threads`.
std::vector<SourceSamples> sample_sources(const model::Denoiser& model, std::span<const std::vector<int>> sources,
                                          const sched::AlphaBarTable& table, const SamplerOptions& opts,
                                          int candidates, int threads);

// Trace file: "# schedule=.. seed=.. target_start=.. total_steps=..", then
// one "step<TAB>t<TAB>space-joined ids" line per retained step.
std::string format_trace(const SampleTrace& trace);
SampleTrace parse_trace(std::string_view text);

struct QuartileStats {
  int count = 0;
  double mean = 0.0;
  std::array<int, 10> histogram{};  // stabilization step in tenths of S
};

struct DecodeOrderReport {
  std::array<QuartileStats, 4> quartiles;  // index 0 holds the lowest H
  // Mean stabilization of the lowest non-empty quartile minus the highest;
  // absent when fewer than two quartiles are populated.
  std::optional<double> delta;
  int tokens = 0;
  std::string format() const;
};

// Every output token of every trace is placed in a quartile of H by the
// fraction of output tokens with strictly smaller H.
DecodeOrderReport decode_order_report(std::span<const SampleTrace> traces, const text::EntropyTable& entropy);

}  // namespace infodiff::sample
