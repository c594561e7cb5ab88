#pragma once

// Embedding step, partial forward noising and the Gaussian reverse posterior.
//
// States are stored as (B*L) x d row-major matrices: row b*L + i is position
// i of batch row b. Source positions are never noised.

#include <Eigen/Core>

#include <span>
#include <vector>

#include "infodiff/rng.hpp"
#include "infodiff/schedules.hpp"

namespace infodiff::diff {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(RowMatrixF rows);

  // N(0, scale^2) entries, rows made pairwise distinct.
  static EmbeddingTable random(int vocab_size, int width, Rng& rng, float scale = 1.0f);

  int vocab_size() const noexcept { return static_cast<int>(rows_.rows()); }
  int width() const noexcept { return static_cast<int>(rows_.cols()); }
  const RowMatrixF& rows() const noexcept { return rows_; }
  auto row(int id) const { return rows_.row(id); }

  // Nudges duplicated rows apart with distinct jitter until every row is unique.
  static void make_distinct(RowMatrixF& rows, Rng& rng);
  bool rows_distinct() const;

 private:
  RowMatrixF rows_;
};

struct PairedBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;           // B*L
  std::vector<bool> source_mask;  // true on CLS, source tokens and the first SEP
  std::vector<bool> pad_mask;     // true outside a row's active window

  std::size_t index(int b, int i) const { return static_cast<std::size_t>(b) * static_cast<std::size_t>(length) + static_cast<std::size_t>(i); }
  void validate() const;
  // Positions of row b that are generated: not source and not pad.
  std::vector<int> target_positions(int b) const;
};

// Lays out [CLS] source [SEP] target [SEP] and fills the rest of the window
// with PAD ids. Those PAD ids belong to the target and are generated; only
// positions at or past `window` (default: L) are pad-masked.
void append_row(PairedBatch& batch, std::span<const int> source, std::span<const int> target, int window = -1);
PairedBatch make_batch(int length);

struct DiffusionState {
  RowMatrixF x;
  int batch = 0;
  int length = 0;
  int t = 0;
};

// x_0 = EMB(ids) + sigma0 * eps.
DiffusionState embed(const PairedBatch& batch, const EmbeddingTable& emb, double sigma0, Rng& rng);

struct NoiseCoefficients {
  double signal;
  double noise;
};

// sqrt(abar) and sqrt(1 - abar) for target positions; exactly (1, 0) for
// source positions.
NoiseCoefficients noise_coefficients(const sched::AlphaBarTable& table, int t, int position, bool is_source);

// `tables` holds either one table shared by every row or one per row.
const sched::AlphaBarTable& table_for_row(std::span<const sched::AlphaBarTable> tables, int row);

// Closed-form q(x_t | x_0) on target positions; source rows copied bit-exactly.
DiffusionState forward_noise(const DiffusionState& x0, int t, std::span<const sched::AlphaBarTable> tables,
                             const std::vector<bool>& source_mask, Rng& rng);

// One transition q(x_t | x_{t-1}) with the per-position step alpha.
DiffusionState forward_step(const DiffusionState& prev, int t, std::span<const sched::AlphaBarTable> tables,
                            const std::vector<bool>& source_mask, Rng& rng);

struct Posterior {
  RowMatrixF mean;
  Eigen::VectorXf variance;  // one value per row (position)
};

// q(x_{t-1} | x_t, x_0 = x0_hat) for 2 <= t <= T.
Posterior posterior(const DiffusionState& xt, const RowMatrixF& x0_hat, int t,
                    std::span<const sched::AlphaBarTable> tables);

// Same posterior between arbitrary steps t_prev < t, used by strided sampling.
Posterior posterior_between(const DiffusionState& xt, const RowMatrixF& x0_hat, int t, int t_prev,
                            std::span<const sched::AlphaBarTable> tables);

// Scalar coefficients of the posterior mean: mean = a * x0 + b * xt.
struct PosteriorCoefficients {
  double x0;
  double xt;
  double variance;
};
PosteriorCoefficients posterior_coefficients(double abar_t, double abar_prev);

RowMatrixF sample_posterior(const Posterior& post, Rng& rng);

}  // namespace infodiff::diff
