#include "infodiff/diffusion.hpp"

#include <cmath>
#include <set>

#include "infodiff/errors.hpp"
#include "infodiff/textcorpus.hpp"

namespace infodiff::diff {

namespace {

void check_state(const DiffusionState& s, const std::vector<bool>& source_mask) {
  if (s.x.rows() != static_cast<Eigen::Index>(s.batch) * s.length) {
    throw DimensionError("diffusion: state has " + std::to_string(s.x.rows()) + " rows, expected B*L = " +
                         std::to_string(s.batch * s.length));
  }
  if (source_mask.size() != static_cast<std::size_t>(s.x.rows())) {
    throw DimensionError("diffusion: source mask length does not match state rows");
  }
}

void check_tables(std::span<const sched::AlphaBarTable> tables, int batch, int length, int t) {
  if (tables.empty() || (tables.size() != 1 && tables.size() != static_cast<std::size_t>(batch))) {
    throw DimensionError("diffusion: expected 1 or B alpha-bar tables, got " + std::to_string(tables.size()));
  }
  for (const auto& tab : tables) {
    if (tab.length() < length) throw DimensionError("diffusion: alpha-bar table shorter than sequence length");
    if (t < 0 || t > tab.steps()) throw ContractError("diffusion: step " + std::to_string(t) + " outside schedule");
  }
}

}  // namespace

EmbeddingTable::EmbeddingTable(RowMatrixF rows) : rows_(std::move(rows)) {}

EmbeddingTable EmbeddingTable::random(int vocab_size, int width, Rng& rng, float scale) {
  if (vocab_size < 1 || width < 1) throw ContractError("EmbeddingTable: sizes must be positive");
  RowMatrixF rows(vocab_size, width);
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = static_cast<float>(scale * standard_normal(rng));
  make_distinct(rows, rng);
  return EmbeddingTable(std::move(rows));
}

void EmbeddingTable::make_distinct(RowMatrixF& rows, Rng& rng) {
  for (;;) {
    std::set<std::vector<float>> seen;
    bool changed = false;
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      std::vector<float> key(rows.row(r).data(), rows.row(r).data() + rows.cols());
      if (!seen.insert(key).second) {
        for (Eigen::Index c = 0; c < rows.cols(); ++c) rows(r, c) += static_cast<float>(1e-3 * standard_normal(rng));
        changed = true;
      }
    }
    if (!changed) return;
  }
}

bool EmbeddingTable::rows_distinct() const {
  std::set<std::vector<float>> seen;
  for (Eigen::Index r = 0; r < rows_.rows(); ++r) {
    if (!seen.insert(std::vector<float>(rows_.row(r).data(), rows_.row(r).data() + rows_.cols())).second) return false;
  }
  return true;
}

void PairedBatch::validate() const {
  const auto n = static_cast<std::size_t>(batch) * static_cast<std::size_t>(length);
  if (ids.size() != n || source_mask.size() != n || pad_mask.size() != n) {
    throw DimensionError("PairedBatch: ids and masks must have B*L entries");
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (source_mask[k] && pad_mask[k]) throw ContractError("PairedBatch: position both source and pad");
  }
}

std::vector<int> PairedBatch::target_positions(int b) const {
  std::vector<int> out;
  for (int i = 0; i < length; ++i) {
    const auto k = index(b, i);
    if (!source_mask[k] && !pad_mask[k]) out.push_back(i);
  }
  return out;
}

PairedBatch make_batch(int length) {
  if (length < 4) throw ContractError("make_batch: length must be at least 4");
  PairedBatch b;
  b.length = length;
  return b;
}

void append_row(PairedBatch& batch, std::span<const int> source, std::span<const int> target, int window) {
  const int L = batch.length;
  if (window < 0) window = L;
  const int needed = static_cast<int>(source.size() + target.size()) + 3;
  if (window > L || needed > window) {
    throw InputError("sequence pair needs " + std::to_string(needed) + " positions but the window holds " +
                     std::to_string(std::min(window, L)));
  }
  std::vector<int> row;
  row.push_back(text::kCls);
  row.insert(row.end(), source.begin(), source.end());
  row.push_back(text::kSep);
  const auto src_len = row.size();
  row.insert(row.end(), target.begin(), target.end());
  row.push_back(text::kSep);
  row.resize(static_cast<std::size_t>(L), text::kPad);
  for (int i = 0; i < L; ++i) {
    batch.ids.push_back(row[static_cast<std::size_t>(i)]);
    batch.source_mask.push_back(static_cast<std::size_t>(i) < src_len);
    batch.pad_mask.push_back(i >= window);
  }
  ++batch.batch;
}

DiffusionState embed(const PairedBatch& batch, const EmbeddingTable& emb, double sigma0, Rng& rng) {
  batch.validate();
  if (sigma0 < 0.0) throw ContractError("embed: sigma0 must be non-negative");
  DiffusionState s{RowMatrixF(static_cast<Eigen::Index>(batch.ids.size()), emb.width()), batch.batch, batch.length, 0};
  for (std::size_t k = 0; k < batch.ids.size(); ++k) {
    const int id = batch.ids[k];
    if (id < 0 || id >= emb.vocab_size()) throw ContractError("embed: token id " + std::to_string(id) + " out of range");
    const auto r = static_cast<Eigen::Index>(k);
    for (int c = 0; c < emb.width(); ++c) {
      const double noise = sigma0 > 0.0 ? sigma0 * standard_normal(rng) : 0.0;
      s.x(r, c) = static_cast<float>(static_cast<double>(emb.rows()(id, c)) + noise);
    }
  }
  return s;
}

NoiseCoefficients noise_coefficients(const sched::AlphaBarTable& table, int t, int position, bool is_source) {
  if (is_source) return {1.0, 0.0};
  const double abar = table(t, position);
  return {std::sqrt(abar), std::sqrt(1.0 - abar)};
}

const sched::AlphaBarTable& table_for_row(std::span<const sched::AlphaBarTable> tables, int row) {
  return tables.size() == 1 ? tables[0] : tables[static_cast<std::size_t>(row)];
}

DiffusionState forward_noise(const DiffusionState& x0, int t, std::span<const sched::AlphaBarTable> tables,
                             const std::vector<bool>& source_mask, Rng& rng) {
  check_state(x0, source_mask);
  check_tables(tables, x0.batch, x0.length, t);
  DiffusionState out = x0;
  out.t = t;
  for (int b = 0; b < x0.batch; ++b) {
    const auto& table = table_for_row(tables, b);
    for (int i = 0; i < x0.length; ++i) {
      const auto r = static_cast<Eigen::Index>(b) * x0.length + i;
      if (source_mask[static_cast<std::size_t>(r)]) continue;
      const auto [signal, noise] = noise_coefficients(table, t, i, false);
      for (Eigen::Index c = 0; c < x0.x.cols(); ++c) {
        out.x(r, c) = static_cast<float>(signal * x0.x(r, c) + noise * standard_normal(rng));
      }
    }
  }
  return out;
}

DiffusionState forward_step(const DiffusionState& prev, int t, std::span<const sched::AlphaBarTable> tables,
                            const std::vector<bool>& source_mask, Rng& rng) {
  check_state(prev, source_mask);
  check_tables(tables, prev.batch, prev.length, t);
  if (t < 1) throw ContractError("forward_step: t must be at least 1");
  DiffusionState out = prev;
  out.t = t;
  for (int b = 0; b < prev.batch; ++b) {
    const auto& table = table_for_row(tables, b);
    for (int i = 0; i < prev.length; ++i) {
      const auto r = static_cast<Eigen::Index>(b) * prev.length + i;
      if (source_mask[static_cast<std::size_t>(r)]) continue;
      const double alpha = sched::per_step_alpha(table, t, i);
      const double signal = std::sqrt(alpha);
      const double noise = std::sqrt(1.0 - alpha);
      for (Eigen::Index c = 0; c < prev.x.cols(); ++c) {
        out.x(r, c) = static_cast<float>(signal * prev.x(r, c) + noise * standard_normal(rng));
      }
    }
  }
  return out;
}

PosteriorCoefficients posterior_coefficients(double abar_t, double abar_prev) {
  const double denom = 1.0 - abar_t;
  if (denom < 1e-12) return {1.0, 0.0, 0.0};
  const double alpha = abar_prev < 1e-12 ? 0.0 : abar_t / abar_prev;
  const double beta = 1.0 - alpha;
  return {std::sqrt(abar_prev) * beta / denom, std::sqrt(alpha) * (1.0 - abar_prev) / denom,
          std::max(0.0, beta * (1.0 - abar_prev) / denom)};
}

Posterior posterior_between(const DiffusionState& xt, const RowMatrixF& x0_hat, int t, int t_prev,
                            std::span<const sched::AlphaBarTable> tables) {
  if (x0_hat.rows() != xt.x.rows() || x0_hat.cols() != xt.x.cols()) {
    throw DimensionError("posterior: x0_hat shape does not match x_t");
  }
  check_tables(tables, xt.batch, xt.length, t);
  if (t_prev < 0 || t_prev >= t) throw ContractError("posterior: need 0 <= t_prev < t");
  Posterior post{RowMatrixF(xt.x.rows(), xt.x.cols()), Eigen::VectorXf(xt.x.rows())};
  for (int b = 0; b < xt.batch; ++b) {
    const auto& table = table_for_row(tables, b);
    for (int i = 0; i < xt.length; ++i) {
      const auto r = static_cast<Eigen::Index>(b) * xt.length + i;
      const auto k = posterior_coefficients(table(t, i), table(t_prev, i));
      for (Eigen::Index c = 0; c < xt.x.cols(); ++c) {
        post.mean(r, c) = static_cast<float>(k.x0 * x0_hat(r, c) + k.xt * xt.x(r, c));
      }
      post.variance(r) = static_cast<float>(k.variance);
    }
  }
  return post;
}

Posterior posterior(const DiffusionState& xt, const RowMatrixF& x0_hat, int t,
                    std::span<const sched::AlphaBarTable> tables) {
  if (t < 2) throw ContractError("posterior: t must be at least 2; step 1 emits the prediction directly");
  return posterior_between(xt, x0_hat, t, t - 1, tables);
}

RowMatrixF sample_posterior(const Posterior& post, Rng& rng) {
  RowMatrixF out = post.mean;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double sd = std::sqrt(static_cast<double>(post.variance(r)));
    if (sd == 0.0) continue;
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      out(r, c) = static_cast<float>(out(r, c) + sd * standard_normal(rng));
    }
  }
  return out;
}

}  // namespace infodiff::diff
