#include "infodiff/denoiser.hpp"

#include <cmath>

#include "infodiff/errors.hpp"

namespace infodiff::model {

namespace {

using nc::Graph;
using nc::Shape;
using nc::Var;

std::uint64_t name_key(const std::string& name) {
  std::uint64_t h = 14695981039346656037ull;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string layer_prefix(int k) { return "layer" + std::to_string(k) + "."; }

// Learned gain and bias over the last axis after a plain layer norm.
Var affine_norm(Graph& g, Var x, const std::string& prefix, int d) {
  Var gain = g.parameter(prefix + ".g", {d});
  Var bias = g.parameter(prefix + ".b", {d});
  return g.add(g.mul(g.layer_norm(x), gain), bias);
}

Var dense(Graph& g, Var x, const std::string& prefix, int in, int out) {
  Var w = g.parameter(prefix + ".w", {in, out});
  Var b = g.parameter(prefix + ".b", {out});
  return g.add(g.matmul(x, w), b);
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: layers must be at least 1");
  if (heads < 1 || width < 2 || width % heads != 0) throw ConfigError("model: width must be divisible by heads");
  if (width % 2 != 0) throw ConfigError("model: width must be even for the time features");
  if (hidden_mult < 1) throw ConfigError("model: hidden_mult must be at least 1");
  if (max_length < 4) throw ConfigError("model: max_length must be at least 4");
  if (vocab_size < 5) throw ConfigError("model: vocab_size must cover the reserved tokens plus content");
  if (steps < 2) throw ConfigError("model: T must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
}

std::vector<double> time_features(int t, int width) {
  if (width < 2 || width % 2 != 0) throw ContractError("time_features: width must be even");
  const int half = width / 2;
  std::vector<double> f(static_cast<std::size_t>(width));
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    f[static_cast<std::size_t>(k)] = std::sin(t * freq);
    f[static_cast<std::size_t>(half + k)] = std::cos(t * freq);
  }
  return f;
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg) {
  const int d = cfg.width;
  const int h = cfg.hidden_mult * d;
  std::vector<std::pair<std::string, Shape>> out{
      {"embedding", {cfg.vocab_size, d}},
      {"position", {cfg.max_length, d}},
      {"segment", {2, d}},
      {"input.w_x", {d, d}},
  };
  if (cfg.self_condition) out.push_back({"input.w_sc", {d, d}});
  out.push_back({"input.b", {d}});
  out.push_back({"time.l1.w", {d, h}});
  out.push_back({"time.l1.b", {h}});
  out.push_back({"time.l2.w", {h, d}});
  out.push_back({"time.l2.b", {d}});
  for (int k = 0; k < cfg.layers; ++k) {
    const std::string p = layer_prefix(k);
    for (const char* name : {"ln1.g", "ln1.b"}) out.push_back({p + name, {d}});
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      out.push_back({p + name + ".w", {d, d}});
      out.push_back({p + name + ".b", {d}});
    }
    for (const char* name : {"ln2.g", "ln2.b"}) out.push_back({p + name, {d}});
    out.push_back({p + "ffn.l1.w", {d, h}});
    out.push_back({p + "ffn.l1.b", {h}});
    out.push_back({p + "ffn.l2.w", {h, d}});
    out.push_back({p + "ffn.l2.b", {d}});
  }
  out.push_back({"final.g", {d}});
  out.push_back({"final.b", {d}});
  out.push_back({"output.w", {d, d}});
  out.push_back({"output.b", {d}});
  return out;
}

Var build_encoder(Graph& g, const ModelConfig& cfg, int batch, Var x_t, Var self_cond, const EncoderOptions& opts) {
  cfg.validate();
  const int B = batch;
  const int L = cfg.max_length;
  const int d = cfg.width;
  const int H = cfg.heads;
  const int dh = cfg.head_width();
  const int hidden = cfg.hidden_mult * d;
  const Shape state{B, L, d};
  if (g.shape(x_t) != state) {
    throw ContractError("denoiser: x_t has shape " + nc::shape_string(g.shape(x_t)) + ", expected " +
                        nc::shape_string(state));
  }
  if (cfg.self_condition && g.shape(self_cond) != state) {
    throw ContractError("denoiser: self_cond shape must equal x_t shape");
  }

  Var position = g.parameter("position", {L, d});
  Var segment = g.parameter("segment", {2, d});
  Var time_in = g.input(kTimeInput, {B, 1, d});
  Var mask = g.input(kMaskInput, {B, 1, 1, L});
  Var segment_ids = g.index_input(kSegmentInput, {B, L});

  Var h = g.matmul(x_t, g.parameter("input.w_x", {d, d}));
  if (cfg.self_condition) h = g.add(h, g.matmul(self_cond, g.parameter("input.w_sc", {d, d})));
  h = g.add(h, g.parameter("input.b", {d}));

  Var temb = dense(g, g.gelu(dense(g, time_in, "time.l1", d, hidden)), "time.l2", hidden, d);
  h = g.add(g.add(g.add(h, temb), position), g.gather_rows(segment, segment_ids));

  const Var scale = g.constant(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int k = 0; k < cfg.layers; ++k) {
    const std::string p = layer_prefix(k);
    Var a = affine_norm(g, h, p + "ln1", d);
    auto heads_of = [&](const std::string& name) {
      return g.transpose(g.reshape(dense(g, a, p + "attn." + name, d, d), {B, L, H, dh}), {0, 2, 1, 3});
    };
    Var q = heads_of("q");
    Var kk = heads_of("k");
    Var v = heads_of("v");
    Var scores = g.add(g.mul(g.matmul(q, g.transpose(kk)), scale), mask);
    Var ctx = g.matmul(g.softmax(scores), v);
    Var merged = g.reshape(g.transpose(ctx, {0, 2, 1, 3}), {B, L, d});
    Var attn_out = dense(g, merged, p + "attn.o", d, d);
    if (opts.dropout) attn_out = g.mul(attn_out, g.input("dropout." + std::to_string(k) + ".attn", state));
    h = g.add(h, attn_out);

    Var f = affine_norm(g, h, p + "ln2", d);
    Var ffn_out = dense(g, g.gelu(dense(g, f, p + "ffn.l1", d, hidden)), p + "ffn.l2", hidden, d);
    if (opts.dropout) ffn_out = g.mul(ffn_out, g.input("dropout." + std::to_string(k) + ".ffn", state));
    h = g.add(h, ffn_out);
  }
  return dense(g, affine_norm(g, h, "final", d), "output", d, d);
}

void bind_conditioning(nc::Bindings& bindings, const ModelConfig& cfg, int batch, const Conditioning& cond) {
  const int L = cfg.max_length;
  const int d = cfg.width;
  const auto n = static_cast<std::size_t>(batch) * static_cast<std::size_t>(L);
  if (cond.steps.size() != static_cast<std::size_t>(batch) || cond.source_mask.size() != n ||
      cond.pad_mask.size() != n) {
    throw ContractError("denoiser: conditioning sizes do not match B and L");
  }
  nc::Tensor time({batch, 1, d});
  nc::Tensor mask({batch, 1, 1, L});
  nc::Tensor segment({batch, L});
  for (int b = 0; b < batch; ++b) {
    const int t = cond.steps[static_cast<std::size_t>(b)];
    if (t < 0 || t > cfg.steps) throw ContractError("denoiser: step " + std::to_string(t) + " outside [0, T]");
    const auto f = time_features(t, d);
    for (int c = 0; c < d; ++c) time[static_cast<std::size_t>(b * d + c)] = static_cast<float>(f[static_cast<std::size_t>(c)]);
    for (int i = 0; i < L; ++i) {
      const auto k = static_cast<std::size_t>(b * L + i);
      mask[k] = cond.pad_mask[k] ? -1e9f : 0.0f;
      segment[k] = cond.source_mask[k] ? 1.0f : 0.0f;
    }
  }
  bindings[kTimeInput] = std::move(time);
  bindings[kMaskInput] = std::move(mask);
  bindings[kSegmentInput] = std::move(segment);
}

void bind_dropout(nc::Bindings& bindings, const ModelConfig& cfg, int batch, Rng& rng) {
  const Shape state{batch, cfg.max_length, cfg.width};
  const float keep_scale = static_cast<float>(1.0 / (1.0 - cfg.dropout));
  std::bernoulli_distribution drop(cfg.dropout);
  for (int k = 0; k < cfg.layers; ++k) {
    for (const char* part : {"attn", "ffn"}) {
      nc::Tensor m(state);
      for (auto& x : m.data()) x = drop(rng) ? 0.0f : keep_scale;
      bindings["dropout." + std::to_string(k) + "." + part] = std::move(m);
    }
  }
}

Denoiser::Denoiser(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  for (const auto& [name, shape] : parameter_shapes(cfg_)) {
    Rng rng = make_stream(seed, {name_key(name)});
    nc::Tensor t(shape);
    if (name == "embedding") {
      diff::RowMatrixF rows = diff::EmbeddingTable::random(shape[0], shape[1], rng).rows();
      t.matrix() = rows;
    } else if (name == "position" || name == "segment") {
      for (auto& x : t.data()) x = static_cast<float>(0.1 * standard_normal(rng));
    } else if (ends_with(name, ".g")) {
      for (auto& x : t.data()) x = 1.0f;
    } else if (ends_with(name, ".b")) {
      // biases start at zero
    } else {
      const double sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& x : t.data()) x = static_cast<float>(sd * standard_normal(rng));
    }
    params_[name] = std::move(t);
  }
}

Denoiser::Denoiser(const ModelConfig& cfg, nc::Bindings params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  for (const auto& [name, shape] : parameter_shapes(cfg_)) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("denoiser: missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw DimensionError("denoiser: parameter '" + name + "' has shape " + nc::shape_string(it->second.shape()) +
                           ", expected " + nc::shape_string(shape));
    }
  }
}

diff::EmbeddingTable Denoiser::embedding() const {
  return diff::EmbeddingTable(diff::RowMatrixF(params_.at("embedding").matrix()));
}

const Denoiser::InferenceGraph& Denoiser::inference_graph(int batch) const {
  std::lock_guard lock(mutex_);
  auto& slot = graphs_[batch];
  if (!slot) {
    auto ig = std::make_shared<InferenceGraph>();
    const Shape state{batch, cfg_.max_length, cfg_.width};
    Var x = ig->graph.input("x_t", state);
    Var sc = cfg_.self_condition ? ig->graph.input("self_cond", state) : Var{};
    ig->out = build_encoder(ig->graph, cfg_, batch, x, sc);
    slot = std::move(ig);
  }
  return *slot;
}

diff::RowMatrixF Denoiser::denoise(const diff::DiffusionState& x_t, const diff::RowMatrixF& self_cond,
                                   const Conditioning& cond) const {
  const int B = x_t.batch;
  if (x_t.length != cfg_.max_length || x_t.x.cols() != cfg_.width || x_t.x.rows() != B * x_t.length) {
    throw ContractError("denoise: state must be [B*L, d] with the model's L and d");
  }
  if (self_cond.rows() != x_t.x.rows() || self_cond.cols() != x_t.x.cols()) {
    throw ContractError("denoise: self_cond shape must equal x_t shape");
  }
  const auto& ig = inference_graph(B);
  nc::Bindings bindings = params_;
  bindings["x_t"] = to_tensor(x_t.x, B, x_t.length);
  if (cfg_.self_condition) {
    bindings["self_cond"] = to_tensor(self_cond, B, x_t.length);
  } else if (!self_cond.isZero(0.0)) {
    throw ContractError("denoise: model has no self-conditioning branch but self_cond is non-zero");
  }
  bind_conditioning(bindings, cfg_, B, cond);
  const auto ev = nc::eval(ig.graph, bindings);
  return to_matrix(ev.value(ig.out), static_cast<int>(x_t.x.rows()), cfg_.width);
}

nc::Tensor to_tensor(const diff::RowMatrixF& m, int batch, int length) {
  nc::Tensor t({batch, length, static_cast<int>(m.cols())});
  std::copy(m.data(), m.data() + m.size(), t.data().begin());
  return t;
}

diff::RowMatrixF to_matrix(const std::vector<double>& values, int rows, int cols) {
  diff::RowMatrixF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(values[static_cast<std::size_t>(i)]);
  return m;
}

}  // namespace infodiff::model
