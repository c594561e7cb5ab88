#pragma once

// Command-line surface: prep, train, sample, eval and trace over a
// self-describing run directory.
//
// Run directory layout:
//   vocab.txt, entropy.tsv               written by prep
//   checkpoints/step_N, checkpoints/final
//   metrics.log                          one deterministic record per step
//   timing.log                           wall-clock time per step
//   samples/hypotheses.txt               MBR winner per source line
//   samples/candidates.tsv               source<TAB>candidate<TAB>chosen<TAB>text
//   samples/traces/sNNNNN_cNN.trace
//   eval/report.txt
//   trace/decode_order.txt, trace/curve.tsv
//   <command>.config                     resolved configuration of the last run

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "infodiff/denoiser.hpp"
#include "infodiff/evalmetrics.hpp"
#include "infodiff/keyvalue.hpp"
#include "infodiff/schedules.hpp"
#include "infodiff/textcorpus.hpp"
#include "infodiff/training.hpp"

namespace infodiff::cli {

// Every field has a default. model.vocab_size and model.steps are derived
// from the vocabulary and schedule.steps, train.seed from seed.
struct RunConfig {
  std::string run_dir = "run";
  std::string corpus = "train.tsv";
  text::TokenizerMode tokenizer = text::TokenizerMode::Whitespace;
  int bpe_merges = 0;
  std::uint64_t seed = 1;
  model::ModelConfig model;
  train::TrainConfig train;
  sched::ScheduleSpec schedule;
  int checkpoint_interval = 100;
  std::string sample_source;  // empty: the corpus
  std::string sample_checkpoint = "final";
  int sample_steps = 0;       // 0: every diffusion step
  int candidates = 10;
  bool sample_self_cond = true;
  bool clamp_x0 = false;
  std::string references;     // empty: the sample source

  // Relative paths are resolved against `base_dir`. Unknown keys are errors.
  static RunConfig parse(std::string_view text, const std::string& base_dir = "");
  static RunConfig load(const std::string& path);
  kv::KeyValues resolved() const;
  void validate() const;

  // Effective sampling inputs after the defaults chain.
  std::string source_path() const { return sample_source.empty() ? corpus : sample_source; }
  std::string reference_path() const { return references.empty() ? source_path() : references; }
};

// Command-line flags layered over the configuration file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;  // train: total steps, sample: sampling steps
  std::optional<int> candidates;
  std::optional<std::string> schedule;
  std::optional<double> lambda;
  std::optional<bool> self_cond;  // train: model branch, sample: sampler input
  std::optional<std::string> run_dir;
};

void apply_overrides(RunConfig& cfg, const Overrides& o, const std::string& command);

void cmd_prep(const RunConfig& cfg, std::ostream& out);
// Resumes from the newest step checkpoint when `resume` is set.
void cmd_train(const RunConfig& cfg, bool resume, std::ostream& out);
// Samples with the checkpoint's schedule, with kind and lambda replaced when
// the overrides carry them.
void cmd_sample(const RunConfig& cfg, std::ostream& out, const Overrides& overrides = {});
metrics::MetricReport cmd_eval(const RunConfig& cfg, std::ostream& out, const std::string& hypotheses = "");
void cmd_trace(const RunConfig& cfg, std::ostream& out, const std::string& trace_dir = "");

// Parses argv (without the program name) and runs one command. Returns the
// process exit code: 0 success, 2 usage or input error, 3 numeric failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace infodiff::cli
