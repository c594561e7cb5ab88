#pragma once

// Transformer encoder f(x_t, self_cond, t) -> x0_hat over the whole
// [CLS] source [SEP] target [SEP] sequence.
//
// Input fusion is the concatenation [x_t ; self_cond] projected 2d -> d,
// realized as x_t W_x + self_cond W_sc so that a zero self_cond contributes
// exactly nothing. Layers are pre-norm. The embedding table is the
// parameter "embedding" and doubles as the rounding projection.

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "infodiff/diffusion.hpp"
#include "infodiff/numcore.hpp"
#include "infodiff/rng.hpp"

namespace infodiff::model {

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int width = 32;         // d
  int hidden_mult = 4;    // feed-forward hidden = hidden_mult * d
  int max_length = 64;    // L
  int vocab_size = 0;     // V
  int steps = 200;        // T
  double dropout = 0.0;
  bool self_condition = true;  // false drops the W_sc branch entirely

  // Throws ConfigError on any invalid field.
  void validate() const;
  int head_width() const { return width / heads; }
};

// Sinusoidal features of t: channel k < d/2 is sin(t w_k), channel d/2 + k
// is cos(t w_k), w_k = 10000^(-k / (d/2)).
std::vector<double> time_features(int t, int width);

// Graph inputs owned by the encoder besides x_t and self_cond.
inline constexpr const char* kTimeInput = "time_features";   // [B, 1, d]
inline constexpr const char* kMaskInput = "attention_mask";  // [B, 1, 1, L]
inline constexpr const char* kSegmentInput = "segment_ids";  // [B, L], 1 on source

struct EncoderOptions {
  bool dropout = false;  // adds mask inputs "dropout.{layer}.{attn,ffn}" [B, L, d]
};

// Appends the encoder to `g`; `x_t` and `self_cond` are [B, L, d] nodes
// (`self_cond` is ignored when the config has no self-conditioning branch).
nc::Var build_encoder(nc::Graph& g, const ModelConfig& cfg, int batch, nc::Var x_t, nc::Var self_cond,
                      const EncoderOptions& opts = {});

// Per-row step, source mask and pad mask bound into the encoder's inputs.
struct Conditioning {
  std::vector<int> steps;         // one per batch row
  std::vector<bool> source_mask;  // B*L
  std::vector<bool> pad_mask;     // B*L
};

void bind_conditioning(nc::Bindings& bindings, const ModelConfig& cfg, int batch, const Conditioning& cond);
void bind_dropout(nc::Bindings& bindings, const ModelConfig& cfg, int batch, Rng& rng);

// Tensor shapes of every parameter for a config, in a stable order.
std::vector<std::pair<std::string, nc::Shape>> parameter_shapes(const ModelConfig& cfg);

class Denoiser {
 public:
  Denoiser() = default;
  // Each parameter draws from its own stream keyed by (seed, name), so adding
  // or removing a branch leaves every other tensor unchanged.
  Denoiser(const ModelConfig& cfg, std::uint64_t seed);
  Denoiser(const ModelConfig& cfg, nc::Bindings params);

  Denoiser(const Denoiser& other) : cfg_(other.cfg_), params_(other.params_) {}
  Denoiser& operator=(const Denoiser& other) {
    cfg_ = other.cfg_;
    params_ = other.params_;
    invalidate();
    return *this;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const nc::Bindings& params() const noexcept { return params_; }
  // Cached graphs depend only on the config, so parameters may change freely.
  nc::Bindings& mutable_params() noexcept { return params_; }

  diff::EmbeddingTable embedding() const;

  // Inference pass, dropout off. self_cond must match x_t's shape; zeros mean
  // no self-conditioning.
  diff::RowMatrixF denoise(const diff::DiffusionState& x_t, const diff::RowMatrixF& self_cond,
                           const Conditioning& cond) const;

 private:
  struct InferenceGraph {
    nc::Graph graph;
    nc::Var out;
  };
  const InferenceGraph& inference_graph(int batch) const;
  void invalidate() {
    std::lock_guard lock(mutex_);
    graphs_.clear();
  }

  ModelConfig cfg_;
  nc::Bindings params_;
  mutable std::mutex mutex_;
  mutable std::map<int, std::shared_ptr<const InferenceGraph>> graphs_;
};

// Row-major [B*L, d] matrix <-> [B, L, d] tensor.
nc::Tensor to_tensor(const diff::RowMatrixF& m, int batch, int length);
diff::RowMatrixF to_matrix(const std::vector<double>& values, int rows, int cols);

}  // namespace infodiff::model
