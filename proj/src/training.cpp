#include "infodiff/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "infodiff/binio.hpp"
#include "infodiff/errors.hpp"

namespace infodiff::train {

namespace {

using nc::Graph;
using nc::Var;

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

const char* const kIds = "ids";
const char* const kTargets = "targets";
const char* const kEmbedNoise = "embed_noise";
const char* const kNoise = "noise";
const char* const kSignal = "signal";
const char* const kNoiseScale = "noise_scale";
const char* const kMseWeight = "mse_weight";
const char* const kAnchorWeight = "anchor_weight";
const char* const kNllWeight = "nll_weight";
const char* const kSelfCond = "self_cond";

bool starts_with(const std::string& s, const std::string& prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

}  // namespace

std::vector<EncodedPair> encode_corpus(std::span<const text::TextPair> corpus, const text::Vocab& vocab) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) out.push_back({vocab.encode(p.source), vocab.encode(p.target)});
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (total_steps < 1) throw ConfigError("train: total steps must be at least 1");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("train: warmup fraction must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("train: batch size must be at least 1");
  if (!(p_sc >= 0.0 && p_sc <= 1.0)) throw ConfigError("train: p_sc must lie in [0, 1]");
  if (!(sigma0 >= 0.0)) throw ConfigError("train: sigma0 must be non-negative");
  if (!(clip > 0.0)) throw ConfigError("train: clip norm must be positive");
}

int TrainConfig::warmup_steps() const { return static_cast<int>(std::lround(warmup_fraction * total_steps)); }

double TrainConfig::rate_at(int step) const {
  const int w = warmup_steps();
  if (w <= 0 || step >= w) return learning_rate;
  return learning_rate * static_cast<double>(step) / w;
}

// ---------------------------------------------------------------------------
// Schedule tables

TableSource::TableSource(sched::ScheduleSpec spec, int length, const text::EntropyTable* entropy)
    : spec_(spec), length_(length), entropy_(entropy), uniform_(sched::uniform_table(spec, length)) {
  if (spec_.kind == sched::ScheduleKind::InfoAware && entropy_ == nullptr) {
    throw ContractError("TableSource: info-aware schedule needs an entropy table");
  }
}

std::vector<double> TableSource::relative_entropy(const diff::PairedBatch& batch, int row) const {
  std::vector<double> e(static_cast<std::size_t>(length_), 0.0);
  if (spec_.kind != sched::ScheduleKind::InfoAware) return e;
  const auto positions = batch.target_positions(row);
  if (positions.empty()) return e;
  std::vector<int> ids;
  for (int i : positions) ids.push_back(batch.ids[batch.index(row, i)]);
  const auto rel = sched::entropy_relative(text::sentence_profile(ids, *entropy_));
  for (std::size_t k = 0; k < positions.size(); ++k) e[static_cast<std::size_t>(positions[k])] = rel[k];
  return e;
}

std::vector<sched::AlphaBarTable> TableSource::tables(const diff::PairedBatch& batch) const {
  if (batch.length != length_) throw DimensionError("TableSource: batch length does not match");
  if (spec_.kind != sched::ScheduleKind::InfoAware) return {uniform_};
  std::vector<sched::AlphaBarTable> out;
  out.reserve(static_cast<std::size_t>(batch.batch));
  for (int b = 0; b < batch.batch; ++b) out.push_back(sched::info_aware_table(relative_entropy(batch, b), spec_));
  return out;
}

// ---------------------------------------------------------------------------
// Loss graph

LossGraph build_loss_graph(const model::ModelConfig& cfg, int batch, const LossOptions& opts) {
  cfg.validate();
  LossGraph lg;
  lg.batch = batch;
  Graph& g = lg.graph;
  const int B = batch;
  const int L = cfg.max_length;
  const int d = cfg.width;
  const int V = cfg.vocab_size;

  Var emb = g.parameter("embedding", {V, d});
  Var ids = g.index_input(kIds, {B, L});
  Var targets = g.index_input(kTargets, {B * L});
  Var embed_noise = g.input(kEmbedNoise, {B, L, d});
  Var noise = g.input(kNoise, {B, L, d});
  Var signal = g.input(kSignal, {B, L, 1});
  Var noise_scale = g.input(kNoiseScale, {B, L, 1});
  Var w_mse = g.input(kMseWeight, {B, L, 1});
  Var w_anchor = g.input(kAnchorWeight, {B, L, 1});
  Var w_nll = g.input(kNllWeight, {B * L});

  Var emb_rows = g.gather_rows(emb, ids);
  Var x0 = g.add(emb_rows, embed_noise);
  Var xt = g.add(g.mul(signal, x0), g.mul(noise_scale, noise));

  if (opts.free_prediction) {
    lg.x0_hat = g.parameter("x0_hat", {B, L, d});
  } else {
    Var sc = cfg.self_condition ? g.input(kSelfCond, {B, L, d}) : Var{};
    lg.x0_hat = model::build_encoder(g, cfg, B, xt, sc, {.dropout = opts.dropout});
  }

  lg.mse = g.squared_error(lg.x0_hat, x0, w_mse);
  lg.anchor = g.squared_error(lg.x0_hat, emb_rows, w_anchor);
  // -|x - e|^2 = 2 x.e - |e|^2 - |x|^2; the last term is constant per row and
  // cancels in the softmax.
  Var flat = g.reshape(lg.x0_hat, {B * L, d});
  Var logits = g.sub(g.mul(g.constant(2.0), g.matmul(flat, g.transpose(emb))), g.reshape(g.sum_last(g.mul(emb, emb)), {V}));
  lg.nll = g.log_softmax_nll(logits, targets, w_nll);
  lg.loss = g.add(g.add(lg.mse, lg.anchor), lg.nll);
  return lg;
}

LossInputs prepare_loss_inputs(const model::ModelConfig& cfg, diff::PairedBatch batch, std::vector<int> steps,
                               std::span<const sched::AlphaBarTable> tables, double sigma0, Rng& rng) {
  batch.validate();
  const int B = batch.batch;
  const int L = cfg.max_length;
  const int d = cfg.width;
  if (batch.length != L) throw DimensionError("loss: batch length must equal the model's max length");
  if (steps.size() != static_cast<std::size_t>(B)) throw ContractError("loss: need one step per batch row");
  if (tables.size() != 1 && tables.size() != static_cast<std::size_t>(B)) {
    throw DimensionError("loss: expected 1 or B alpha-bar tables");
  }

  nc::Tensor ids({B, L});
  nc::Tensor signal({B, L, 1});
  nc::Tensor noise_scale({B, L, 1});
  nc::Tensor w_mse({B, L, 1});
  nc::Tensor w_anchor({B, L, 1});
  nc::Tensor w_nll({B * L});
  for (int b = 0; b < B; ++b) {
    const int t = steps[static_cast<std::size_t>(b)];
    const auto& table = diff::table_for_row(tables, b);
    if (t < 1 || t > table.steps()) throw ContractError("loss: step " + std::to_string(t) + " outside [1, T]");
    const auto n_target = static_cast<double>(batch.target_positions(b).size());
    int n_live = 0;
    for (int i = 0; i < L; ++i) n_live += batch.pad_mask[batch.index(b, i)] ? 0 : 1;
    for (int i = 0; i < L; ++i) {
      const auto k = batch.index(b, i);
      const int id = batch.ids[k];
      if (id < 0 || id >= cfg.vocab_size) throw ContractError("loss: token id " + std::to_string(id) + " out of range");
      ids[k] = static_cast<float>(id);
      const bool source = batch.source_mask[k];
      const bool pad = batch.pad_mask[k];
      const auto c = diff::noise_coefficients(table, t, i, source);
      signal[k] = static_cast<float>(c.signal);
      noise_scale[k] = static_cast<float>(c.noise);
      if (!source && !pad) {
        const auto w = static_cast<float>(1.0 / (n_target * B));
        (t >= 2 ? w_mse : w_anchor)[k] = w;
      }
      if (!pad) w_nll[k] = static_cast<float>(1.0 / (static_cast<double>(n_live) * B));
    }
  }

  nc::Tensor embed_noise({B, L, d});
  nc::Tensor noise({B, L, d});
  for (auto& x : embed_noise.data()) x = static_cast<float>(sigma0 * standard_normal(rng));
  for (auto& x : noise.data()) x = static_cast<float>(standard_normal(rng));

  LossInputs in;
  nc::Bindings& bind = in.bindings;
  bind[kTargets] = ids.reshaped({B * L});
  bind[kIds] = std::move(ids);
  bind[kEmbedNoise] = std::move(embed_noise);
  bind[kNoise] = std::move(noise);
  bind[kSignal] = std::move(signal);
  bind[kNoiseScale] = std::move(noise_scale);
  bind[kMseWeight] = std::move(w_mse);
  bind[kAnchorWeight] = std::move(w_anchor);
  bind[kNllWeight] = std::move(w_nll);
  if (cfg.self_condition) bind[kSelfCond] = nc::Tensor({B, L, d});
  model::bind_conditioning(bind, cfg, B, {steps, batch.source_mask, batch.pad_mask});
  in.batch = std::move(batch);
  in.steps = std::move(steps);
  return in;
}

LossValue read_loss(const LossGraph& lg, const nc::Evaluation& ev) {
  return {ev.scalar(lg.loss), ev.scalar(lg.mse), ev.scalar(lg.anchor), ev.scalar(lg.nll)};
}

void check_finite(const LossValue& v, int step) {
  const std::pair<const char*, double> terms[] = {{"mse", v.mse}, {"anchor", v.anchor}, {"nll", v.nll}};
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss term '" + std::string(name) + "' at step " + std::to_string(step));
    }
  }
}

bool apply_self_condition(const LossGraph& lg, nc::Bindings& bindings, double p_sc, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (!(u < p_sc) || !lg.graph.inputs().count(kSelfCond)) return false;
  const auto ev = nc::eval(lg.graph, bindings);
  bindings[kSelfCond] = ev.tensor(lg.graph, lg.x0_hat);
  return true;
}

std::string format_record(const StepRecord& r, bool with_timing) {
  char buf[320];
  int n = std::snprintf(buf, sizeof buf, "step=%d loss=%.9g mse=%.9g anchor=%.9g nll=%.9g grad_norm=%.9g lr=%.9g sc=%d",
                        r.step, r.loss.loss, r.loss.mse, r.loss.anchor, r.loss.nll, r.grad_norm, r.lr,
                        r.self_conditioned ? 1 : 0);
  if (with_timing) std::snprintf(buf + n, sizeof buf - static_cast<std::size_t>(n), " elapsed_ms=%.3f", r.elapsed_ms);
  return buf;
}

// ---------------------------------------------------------------------------
// Optimizer

double adam_update(nc::Bindings& params, const std::map<std::string, nc::Tensor>& grads, AdamState& state,
                   double lr, double clip) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (float x : g.data()) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  const double scale = norm > clip ? clip / norm : 1.0;
  state.step += 1;
  const double c1 = 1.0 - std::pow(kBeta1, state.step);
  const double c2 = 1.0 - std::pow(kBeta2, state.step);
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    auto& m = state.m.try_emplace(name, p.shape()).first->second;
    auto& v = state.v.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = scale * g[i];
      const double mi = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
      const double vi = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEps));
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(model::Denoiser& model, TrainConfig cfg, TableSource tables, std::vector<EncodedPair> data)
    : model_(model),
      cfg_(cfg),
      tables_(std::move(tables)),
      data_(std::move(data)),
      graph_(build_loss_graph(model.config(), cfg.batch_size, {.dropout = model.config().dropout > 0.0})),
      start_(std::chrono::steady_clock::now()) {
  cfg_.validate();
  if (data_.empty()) throw InputError("training corpus is empty");
  // Validate every pair fits once, up front.
  for (const auto& p : data_) {
    auto probe = diff::make_batch(model_.config().max_length);
    diff::append_row(probe, p.source, p.target);
  }
}

LossInputs Trainer::prepare(int step, Rng& rng) const {
  (void)step;
  const auto& mc = model_.config();
  const int B = cfg_.batch_size;
  std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
  std::uniform_int_distribution<int> step_dist(1, tables_.spec().steps);
  auto batch = diff::make_batch(mc.max_length);
  for (int b = 0; b < B; ++b) {
    const auto& p = data_[pick(rng)];
    diff::append_row(batch, p.source, p.target);
  }
  std::vector<int> steps(static_cast<std::size_t>(B));
  for (auto& t : steps) t = step_dist(rng);
  const auto tables = tables_.tables(batch);
  auto in = prepare_loss_inputs(mc, std::move(batch), std::move(steps), tables, cfg_.sigma0, rng);
  if (mc.dropout > 0.0) model::bind_dropout(in.bindings, mc, B, rng);
  return in;
}

Gradients Trainer::gradients(int step) const {
  Rng rng = make_stream(cfg_.seed, {static_cast<std::uint64_t>(step)});
  auto in = prepare(step, rng);
  for (const auto& [name, t] : model_.params()) in.bindings[name] = t;
  Gradients out;
  out.self_conditioned = apply_self_condition(graph_, in.bindings, cfg_.p_sc, rng);
  const auto ev = nc::eval(graph_.graph, in.bindings);
  out.loss = read_loss(graph_, ev);
  check_finite(out.loss, step);
  out.grads = nc::backward(graph_.graph, ev, graph_.loss);
  return out;
}

StepRecord Trainer::step() {
  const int step = adam_.step + 1;
  auto g = gradients(step);
  for (const auto& [name, t] : g.grads) {
    for (float x : t.data()) {
      if (!std::isfinite(x)) throw NumericError("non-finite gradient for '" + name + "' at step " + std::to_string(step));
    }
  }
  StepRecord r;
  r.step = step;
  r.loss = g.loss;
  r.lr = cfg_.rate_at(step);
  r.self_conditioned = g.self_conditioned;
  r.grad_norm = adam_update(model_.mutable_params(), g.grads, adam_, r.lr, cfg_.clip);
  r.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  return r;
}

LossValue Trainer::evaluate(const LossInputs& inputs) const {
  nc::Bindings bind = inputs.bindings;
  for (const auto& [name, t] : model_.params()) bind[name] = t;
  return read_loss(graph_, nc::eval(graph_.graph, bind));
}

// ---------------------------------------------------------------------------
// Config text

void write_model_config(kv::KeyValues& out, const model::ModelConfig& c, const std::string& p) {
  out.set(p + "layers", c.layers);
  out.set(p + "heads", c.heads);
  out.set(p + "width", c.width);
  out.set(p + "hidden_mult", c.hidden_mult);
  out.set(p + "max_length", c.max_length);
  out.set(p + "vocab_size", c.vocab_size);
  out.set(p + "steps", c.steps);
  out.set(p + "dropout", c.dropout);
  out.set(p + "self_condition", c.self_condition);
}

model::ModelConfig read_model_config(const kv::KeyValues& in, model::ModelConfig c, const std::string& p) {
  c.layers = in.get_int(p + "layers", c.layers);
  c.heads = in.get_int(p + "heads", c.heads);
  c.width = in.get_int(p + "width", c.width);
  c.hidden_mult = in.get_int(p + "hidden_mult", c.hidden_mult);
  c.max_length = in.get_int(p + "max_length", c.max_length);
  c.vocab_size = in.get_int(p + "vocab_size", c.vocab_size);
  c.steps = in.get_int(p + "steps", c.steps);
  c.dropout = in.get_double(p + "dropout", c.dropout);
  c.self_condition = in.get_bool(p + "self_condition", c.self_condition);
  return c;
}

void write_train_config(kv::KeyValues& out, const TrainConfig& c, const std::string& p) {
  out.set(p + "learning_rate", c.learning_rate);
  out.set(p + "total_steps", c.total_steps);
  out.set(p + "warmup_fraction", c.warmup_fraction);
  out.set(p + "batch_size", c.batch_size);
  out.set(p + "seed", c.seed);
  out.set(p + "p_sc", c.p_sc);
  out.set(p + "sigma0", c.sigma0);
  out.set(p + "clip", c.clip);
}

TrainConfig read_train_config(const kv::KeyValues& in, TrainConfig c, const std::string& p) {
  c.learning_rate = in.get_double(p + "learning_rate", c.learning_rate);
  c.total_steps = in.get_int(p + "total_steps", c.total_steps);
  c.warmup_fraction = in.get_double(p + "warmup_fraction", c.warmup_fraction);
  c.batch_size = in.get_int(p + "batch_size", c.batch_size);
  c.seed = in.get_u64(p + "seed", c.seed);
  c.p_sc = in.get_double(p + "p_sc", c.p_sc);
  c.sigma0 = in.get_double(p + "sigma0", c.sigma0);
  c.clip = in.get_double(p + "clip", c.clip);
  return c;
}

void write_schedule_spec(kv::KeyValues& out, const sched::ScheduleSpec& s, const std::string& p) {
  out.set(p + "kind", std::string(sched::schedule_kind_name(s.kind)));
  out.set(p + "steps", s.steps);
  out.set(p + "lambda", s.lambda);
  out.set(p + "offset", s.offset);
  out.set(p + "beta_min", s.beta_min);
  out.set(p + "beta_max", s.beta_max);
  out.set(p + "enforce_monotone", s.enforce_monotone);
}

sched::ScheduleSpec read_schedule_spec(const kv::KeyValues& in, sched::ScheduleSpec s, const std::string& p) {
  s.kind = sched::parse_schedule_kind(in.get(p + "kind", std::string(sched::schedule_kind_name(s.kind))));
  s.steps = in.get_int(p + "steps", s.steps);
  s.lambda = in.get_double(p + "lambda", s.lambda);
  s.offset = in.get_double(p + "offset", s.offset);
  s.beta_min = in.get_double(p + "beta_min", s.beta_min);
  s.beta_max = in.get_double(p + "beta_max", s.beta_max);
  s.enforce_monotone = in.get_bool(p + "enforce_monotone", s.enforce_monotone);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoint format

namespace {

void write_section(binio::Writer& w, std::string_view tag, const std::string& payload) {
  w.bytes(tag);
  w.u64(payload.size());
  w.bytes(payload);
}

void write_tensor(binio::Writer& w, const std::string& name, const nc::Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float x : t.data()) w.f32(x);
}

nc::Tensor read_tensor(binio::Reader& r, std::string& name) {
  name = r.str();
  const auto rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has invalid rank", r.offset());
  nc::Shape shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = r.u32();
    if (d == 0 || d > (1u << 28)) throw FormatError("checkpoint: tensor '" + name + "' has invalid dims", r.offset());
    shape.push_back(static_cast<int>(d));
    count *= d;
  }
  if (count * 4 > r.remaining()) throw FormatError("checkpoint: tensor '" + name + "' payload truncated", r.offset());
  std::vector<float> data(count);
  for (auto& x : data) x = r.f32();
  return nc::Tensor(std::move(shape), std::move(data));
}

const std::string kMomentM = "adam.m/";
const std::string kMomentV = "adam.v/";

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  kv::KeyValues conf;
  write_model_config(conf, c.model);
  write_train_config(conf, c.train);
  write_schedule_spec(conf, c.schedule);
  conf.set("adam.step", c.adam.step);
  for (const auto& [key, value] : c.extra.entries()) {
    if (conf.has(key)) throw ContractError("checkpoint: extra key '" + key + "' collides with a config key");
    conf.set(key, value);
  }

  binio::Writer entr;
  entr.u32(static_cast<std::uint32_t>(c.entropy.size()));
  entr.u64(static_cast<std::uint64_t>(c.entropy.total));
  for (int i = 0; i < c.entropy.size(); ++i) {
    entr.u64(static_cast<std::uint64_t>(c.entropy.counts[static_cast<std::size_t>(i)]));
    entr.f64(c.entropy.bits[static_cast<std::size_t>(i)]);
  }

  binio::Writer tens;
  tens.u32(static_cast<std::uint32_t>(c.params.size() + c.adam.m.size() + c.adam.v.size()));
  for (const auto& [name, t] : c.params) write_tensor(tens, name, t);
  for (const auto& [name, t] : c.adam.m) write_tensor(tens, kMomentM + name, t);
  for (const auto& [name, t] : c.adam.v) write_tensor(tens, kMomentV + name, t);

  binio::Writer w;
  w.bytes("IDIF");
  w.u32(kCheckpointVersion);
  write_section(w, "CONF", conf.format(true));
  write_section(w, "VOCB", c.vocab.serialize());
  write_section(w, "ENTR", entr.buffer());
  write_section(w, "TENS", tens.buffer());
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != "IDIF") throw FormatError("checkpoint: bad magic", 0);
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(v), 4);
  }
  Checkpoint c;
  bool seen_conf = false, seen_vocab = false, seen_entropy = false, seen_tensors = false;
  while (!r.done()) {
    const auto tag_offset = r.offset();
    const std::string tag(r.bytes(4));
    const auto length = r.u64();
    if (length > r.remaining()) throw FormatError("checkpoint: section " + tag + " overruns the file", r.offset());
    const auto base = r.offset();
    binio::Reader s(r.bytes(static_cast<std::size_t>(length)), base);
    try {
      if (tag == "CONF") {
        const auto conf = kv::KeyValues::parse(s.bytes(static_cast<std::size_t>(length)));
        c.model = read_model_config(conf);
        c.train = read_train_config(conf);
        c.schedule = read_schedule_spec(conf);
        c.adam.step = conf.get_int("adam.step", 0);
        for (const auto& [key, value] : conf.entries()) {
          if (!starts_with(key, "model.") && !starts_with(key, "train.") && !starts_with(key, "schedule.") &&
              key != "adam.step") {
            c.extra.set(key, value);
          }
        }
        seen_conf = true;
      } else if (tag == "VOCB") {
        c.vocab = text::Vocab::deserialize(s.bytes(static_cast<std::size_t>(length)));
        seen_vocab = true;
      } else if (tag == "ENTR") {
        const auto n = s.u32();
        c.entropy.total = static_cast<std::int64_t>(s.u64());
        if (static_cast<std::size_t>(n) * 16 != s.remaining()) {
          throw FormatError("checkpoint: entropy section length mismatch", s.offset());
        }
        for (std::uint32_t i = 0; i < n; ++i) {
          c.entropy.counts.push_back(static_cast<std::int64_t>(s.u64()));
          c.entropy.bits.push_back(s.f64());
        }
        seen_entropy = true;
      } else if (tag == "TENS") {
        const auto n = s.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
          std::string name;
          auto t = read_tensor(s, name);
          if (starts_with(name, kMomentM)) {
            c.adam.m[name.substr(kMomentM.size())] = std::move(t);
          } else if (starts_with(name, kMomentV)) {
            c.adam.v[name.substr(kMomentV.size())] = std::move(t);
          } else {
            c.params[name] = std::move(t);
          }
        }
        seen_tensors = true;
      } else {
        throw FormatError("checkpoint: unknown section '" + tag + "'", tag_offset);
      }
    } catch (const FormatError&) {
      throw;
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint: section ") + tag + ": " + e.what(), base);
    }
    if (!s.done()) throw FormatError("checkpoint: trailing bytes in section " + tag, s.offset());
  }
  if (!(seen_conf && seen_vocab && seen_entropy && seen_tensors)) {
    throw FormatError("checkpoint: missing section", r.offset());
  }
  if (c.vocab.size() != c.model.vocab_size || c.entropy.size() != c.model.vocab_size) {
    throw FormatError("checkpoint: vocabulary size disagrees with the model config", r.offset());
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  binio::write_file(tmp, encode_checkpoint(ckpt));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw InputError("cannot write checkpoint '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace infodiff::train
