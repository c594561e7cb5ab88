#pragma once

// End-to-end objective with partial noising, the self-conditioning training
// policy, the Adam optimizer and checkpoints.
//
// Per example with t drawn uniformly from 1..T:
//   t >= 2: |x0_hat - x_0|^2 averaged over target positions
//   t == 1: |x0_hat - EMB(w)|^2 averaged over target positions
//   always: -log p(w | x0_hat) averaged over non-pad positions
// with p(w | x) = softmax_w(-|x - EMB(w)|^2). The batch loss is the mean over
// examples.

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "infodiff/denoiser.hpp"
#include "infodiff/diffusion.hpp"
#include "infodiff/keyvalue.hpp"
#include "infodiff/numcore.hpp"
#include "infodiff/schedules.hpp"
#include "infodiff/textcorpus.hpp"

namespace infodiff::train {

struct EncodedPair {
  std::vector<int> source;
  std::vector<int> target;
};

std::vector<EncodedPair> encode_corpus(std::span<const text::TextPair> corpus, const text::Vocab& vocab);

struct TrainConfig {
  double learning_rate = 1e-3;
  int total_steps = 1000;
  double warmup_fraction = 0.1;
  int batch_size = 16;
  std::uint64_t seed = 1;
  double p_sc = 0.5;
  double sigma0 = 0.1;
  double clip = 1.0;

  void validate() const;
  int warmup_steps() const;
  // Linear warmup to learning_rate over warmup_steps(), then constant.
  double rate_at(int step) const;
};

// Per-row alpha-bar tables for a batch. Info-aware rows get e computed from
// the target tokens' self-information; source and reserved positions get 0.
class TableSource {
 public:
  TableSource(sched::ScheduleSpec spec, int length, const text::EntropyTable* entropy);
  const sched::ScheduleSpec& spec() const noexcept { return spec_; }
  std::vector<sched::AlphaBarTable> tables(const diff::PairedBatch& batch) const;
  // Relative entropy per position of one row; zeros for non-entropy kinds.
  std::vector<double> relative_entropy(const diff::PairedBatch& batch, int row) const;

 private:
  sched::ScheduleSpec spec_;
  int length_;
  const text::EntropyTable* entropy_;
  sched::AlphaBarTable uniform_;
};

// Loss graph over a batch of fixed size. With `free_prediction` x0_hat is the
// parameter "x0_hat" [B, L, d] instead of the encoder output.
struct LossGraph {
  nc::Graph graph;
  int batch = 0;
  nc::Var x0_hat, mse, anchor, nll, loss;
};

struct LossOptions {
  bool free_prediction = false;
  bool dropout = false;
};

LossGraph build_loss_graph(const model::ModelConfig& cfg, int batch, const LossOptions& opts = {});

// Host-side inputs for one batch: ids, noise draws, coefficients, weights and
// the encoder conditioning. self_cond is bound to zeros.
struct LossInputs {
  diff::PairedBatch batch;
  std::vector<int> steps;
  nc::Bindings bindings;
};

LossInputs prepare_loss_inputs(const model::ModelConfig& cfg, diff::PairedBatch batch, std::vector<int> steps,
                               std::span<const sched::AlphaBarTable> tables, double sigma0, Rng& rng);

struct LossValue {
  double loss = 0.0;
  double mse = 0.0;
  double anchor = 0.0;
  double nll = 0.0;
};

LossValue read_loss(const LossGraph& lg, const nc::Evaluation& ev);
// Throws NumericError naming the first non-finite term.
void check_finite(const LossValue& v, int step);

// Self-conditioning policy: with probability p_sc run the model once with
// zero self_cond and bind its x0_hat, detached, as the self_cond input.
// Returns whether the estimate was used. Consumes exactly one uniform draw.
bool apply_self_condition(const LossGraph& lg, nc::Bindings& bindings, double p_sc, Rng& rng);

struct AdamState {
  int step = 0;
  nc::Bindings m;
  nc::Bindings v;
};

struct StepRecord {
  int step = 0;
  LossValue loss;
  double grad_norm = 0.0;
  double lr = 0.0;
  double elapsed_ms = 0.0;
  bool self_conditioned = false;
};

// "step=.. loss=.. mse=.. anchor=.. nll=.. grad_norm=.. lr=.. sc=.." on one
// line, followed by "elapsed_ms=.." when timing is requested.
std::string format_record(const StepRecord& r, bool with_timing = true);

struct Gradients {
  LossValue loss;
  std::map<std::string, nc::Tensor> grads;
  bool self_conditioned = false;
};

class Trainer {
 public:
  Trainer(model::Denoiser& model, TrainConfig cfg, TableSource tables, std::vector<EncodedPair> data);

  const TrainConfig& config() const noexcept { return cfg_; }
  AdamState& optimizer() noexcept { return adam_; }
  const AdamState& optimizer() const noexcept { return adam_; }
  int completed_steps() const noexcept { return adam_.step; }

  // Batch, timesteps and noise for step `step` (1-based), from the stream
  // (seed, step) so a resumed run sees the same draws.
  LossInputs prepare(int step, Rng& rng) const;

  // Loss and gradients at the current parameters for step `step`.
  Gradients gradients(int step) const;

  // Runs step completed_steps() + 1. Throws NumericError without touching
  // the parameters when the loss or gradient is non-finite.
  StepRecord step();

  // Loss at the current parameters on fixed inputs (no self-conditioning).
  LossValue evaluate(const LossInputs& inputs) const;

  const LossGraph& graph() const noexcept { return graph_; }

 private:
  model::Denoiser& model_;
  TrainConfig cfg_;
  TableSource tables_;
  std::vector<EncodedPair> data_;
  LossGraph graph_;
  AdamState adam_;
  std::chrono::steady_clock::time_point start_;
};

// Applies one Adam update with global-norm clipping. Returns the pre-clip
// gradient norm.
double adam_update(nc::Bindings& params, const std::map<std::string, nc::Tensor>& grads, AdamState& state,
                   double lr, double clip);

// ---------------------------------------------------------------------------
// Checkpoints: "IDIF", u32 version, then sections of u32 tag, u64 length and
// payload. CONF holds key=value text, VOCB the vocabulary, ENTR the entropy
// table and TENS the named tensors (parameters and optimizer moments).

struct Checkpoint {
  model::ModelConfig model;
  TrainConfig train;
  sched::ScheduleSpec schedule;
  text::Vocab vocab;
  text::EntropyTable entropy;
  nc::Bindings params;
  AdamState adam;
  kv::KeyValues extra;  // run-level settings carried along verbatim
};

void write_model_config(kv::KeyValues& out, const model::ModelConfig& cfg, const std::string& prefix = "model.");
model::ModelConfig read_model_config(const kv::KeyValues& in, model::ModelConfig base = {},
                                     const std::string& prefix = "model.");
void write_train_config(kv::KeyValues& out, const TrainConfig& cfg, const std::string& prefix = "train.");
TrainConfig read_train_config(const kv::KeyValues& in, TrainConfig base = {}, const std::string& prefix = "train.");
void write_schedule_spec(kv::KeyValues& out, const sched::ScheduleSpec& spec,
                         const std::string& prefix = "schedule.");
sched::ScheduleSpec read_schedule_spec(const kv::KeyValues& in, sched::ScheduleSpec base = {},
                                       const std::string& prefix = "schedule.");

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError with the byte offset of the first problem.
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace infodiff::train
