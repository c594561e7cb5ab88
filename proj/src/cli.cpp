#include "infodiff/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "infodiff/binio.hpp"
#include "infodiff/errors.hpp"
#include "infodiff/sampler.hpp"

namespace fs = std::filesystem;

namespace infodiff::cli {

namespace {

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).lexically_normal().string();
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k{"run_dir",          "corpus",          "tokenizer",          "bpe_merges",
                            "seed",             "checkpoint.interval", "sample.source",  "sample.checkpoint",
                            "sample.steps",     "sample.candidates", "sample.self_cond", "sample.clamp_x0",
                            "eval.references"};
    for (const char* m : {"layers", "heads", "width", "hidden_mult", "max_length", "dropout", "self_condition"}) {
      k.insert(std::string("model.") + m);
    }
    for (const char* t : {"learning_rate", "total_steps", "warmup_fraction", "batch_size", "p_sc", "sigma0", "clip"}) {
      k.insert(std::string("train.") + t);
    }
    for (const char* s : {"kind", "steps", "lambda", "offset", "beta_min", "beta_max", "enforce_monotone"}) {
      k.insert(std::string("schedule.") + s);
    }
    return k;
  }();
  return keys;
}

// Lines of a text file without trailing CR.
std::vector<std::string> read_lines(const std::string& path) {
  const auto text = binio::read_file(path);
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Text before the first TAB, or after it when `second` is set.
std::string column(const std::string& line, bool second) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) return line;
  return second ? line.substr(tab + 1) : line.substr(0, tab);
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  binio::write_file(path, text);
}

void echo_config(const RunConfig& cfg, const std::string& command, std::ostream& out) {
  fs::create_directories(cfg.run_dir);
  const auto text = cfg.resolved().format();
  binio::write_file(join(cfg.run_dir, command + ".config"), text);
  out << "# resolved configuration\n" << text << "\n";
}

struct PrepArtifacts {
  text::Vocab vocab;
  text::EntropyTable entropy;
};

PrepArtifacts load_prep(const RunConfig& cfg) {
  const auto vocab_path = join(cfg.run_dir, "vocab.txt");
  const auto entropy_path = join(cfg.run_dir, "entropy.tsv");
  if (!fs::exists(vocab_path) || !fs::exists(entropy_path)) {
    throw InputError("run directory '" + cfg.run_dir + "' has no vocab.txt/entropy.tsv; run prep first");
  }
  PrepArtifacts a;
  a.vocab = text::Vocab::deserialize(binio::read_file(vocab_path));
  a.entropy = text::EntropyTable::from_tsv(binio::read_file(entropy_path), a.vocab);
  return a;
}

std::string checkpoint_dir(const RunConfig& cfg) { return join(cfg.run_dir, "checkpoints"); }

// Step checkpoints present in the run directory, keyed by step.
std::map<int, std::string> step_checkpoints(const RunConfig& cfg) {
  std::map<int, std::string> out;
  const auto dir = checkpoint_dir(cfg);
  if (!fs::exists(dir)) return out;
  static const std::regex name("step_([0-9]+)");
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto file = e.path().filename().string();
    if (std::regex_match(file, m, name)) out[std::stoi(m[1].str())] = e.path().string();
  }
  return out;
}

// Settings a resumed run must share with its checkpoint. The step budget may
// grow.
std::string config_text(const train::Checkpoint& ck) {
  kv::KeyValues k;
  train::write_model_config(k, ck.model);
  train::TrainConfig tc = ck.train;
  tc.total_steps = 0;
  train::write_train_config(k, tc);
  train::write_schedule_spec(k, ck.schedule);
  return k.format();
}

void truncate_log(const std::string& path, int last_step) {
  if (!fs::exists(path)) return;
  std::vector<std::string> kept;
  for (const auto& line : read_lines(path)) {
    int step = 0;
    if (std::sscanf(line.c_str(), "step=%d", &step) == 1 && step <= last_step) kept.push_back(line);
  }
  write_lines(path, kept);
}

std::vector<metrics::Tokens> reference_words(const RunConfig& cfg) {
  std::vector<metrics::Tokens> refs;
  for (const auto& line : read_lines(cfg.reference_path())) refs.push_back(metrics::split_words(column(line, true)));
  return refs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

RunConfig RunConfig::parse(std::string_view text, const std::string& base_dir) {
  const auto k = kv::KeyValues::parse(text);
  k.require_known(known_keys());
  RunConfig c;
  c.run_dir = resolve(base_dir, k.get("run_dir", c.run_dir));
  c.corpus = resolve(base_dir, k.get("corpus", c.corpus));
  c.tokenizer = text::parse_tokenizer_mode(k.get("tokenizer", std::string(text::tokenizer_mode_name(c.tokenizer))));
  c.bpe_merges = k.get_int("bpe_merges", c.bpe_merges);
  c.seed = k.get_u64("seed", c.seed);
  c.model = train::read_model_config(k, c.model);
  c.train = train::read_train_config(k, c.train);
  c.schedule = train::read_schedule_spec(k, c.schedule);
  c.checkpoint_interval = k.get_int("checkpoint.interval", c.checkpoint_interval);
  c.sample_source = resolve(base_dir, k.get("sample.source", c.sample_source));
  c.sample_checkpoint = k.get("sample.checkpoint", c.sample_checkpoint);
  c.sample_steps = k.get_int("sample.steps", c.sample_steps);
  c.candidates = k.get_int("sample.candidates", c.candidates);
  c.sample_self_cond = k.get_bool("sample.self_cond", c.sample_self_cond);
  c.clamp_x0 = k.get_bool("sample.clamp_x0", c.clamp_x0);
  c.references = resolve(base_dir, k.get("eval.references", c.references));
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  if (!fs::exists(path)) throw InputError("config file '" + path + "' does not exist");
  return parse(binio::read_file(path), fs::path(path).parent_path().string());
}

kv::KeyValues RunConfig::resolved() const {
  kv::KeyValues k;
  k.set("run_dir", run_dir);
  k.set("corpus", corpus);
  k.set("tokenizer", std::string(text::tokenizer_mode_name(tokenizer)));
  k.set("bpe_merges", bpe_merges);
  k.set("seed", seed);
  kv::KeyValues parts;
  train::write_model_config(parts, model);
  train::write_train_config(parts, train);
  train::write_schedule_spec(parts, schedule);
  for (const auto& [key, value] : parts.entries()) {
    if (key == "model.vocab_size" || key == "model.steps" || key == "train.seed") continue;
    k.set(key, value);
  }
  k.set("checkpoint.interval", checkpoint_interval);
  k.set("sample.source", source_path());
  k.set("sample.checkpoint", sample_checkpoint);
  k.set("sample.steps", sample_steps);
  k.set("sample.candidates", candidates);
  k.set("sample.self_cond", sample_self_cond);
  k.set("sample.clamp_x0", clamp_x0);
  k.set("eval.references", reference_path());
  return k;
}

void RunConfig::validate() const {
  if (run_dir.empty()) throw ConfigError("run_dir must not be empty");
  if (bpe_merges < 0) throw ConfigError("bpe_merges must be non-negative");
  schedule.validate();
  model::ModelConfig m = model;
  m.vocab_size = std::max(m.vocab_size, text::kNumReserved + 1);
  m.steps = schedule.steps;
  m.validate();
  train.validate();
  if (checkpoint_interval < 1) throw ConfigError("checkpoint.interval must be at least 1");
  if (candidates < 1) throw ConfigError("sample.candidates must be at least 1");
  if (sample_steps != 0 && (sample_steps < 2 || sample_steps > schedule.steps)) {
    throw ConfigError("sample.steps must be 0 or within 2..schedule.steps");
  }
}

void apply_overrides(RunConfig& cfg, const Overrides& o, const std::string& command) {
  if (o.run_dir) cfg.run_dir = *o.run_dir;
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) (command == "train" ? cfg.train.total_steps : cfg.sample_steps) = *o.steps;
  if (o.candidates) cfg.candidates = *o.candidates;
  if (o.schedule) cfg.schedule.kind = sched::parse_schedule_kind(*o.schedule);
  if (o.lambda) cfg.schedule.lambda = *o.lambda;
  if (o.self_cond) (command == "train" ? cfg.model.self_condition : cfg.sample_self_cond) = *o.self_cond;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_prep(const RunConfig& cfg, std::ostream& out) {
  const auto corpus = text::read_corpus(cfg.corpus);
  const auto vocab = text::Vocab::build(corpus, cfg.tokenizer, cfg.bpe_merges);
  const auto entropy = text::corpus_entropy(corpus, vocab);
  echo_config(cfg, "prep", out);
  binio::write_file(join(cfg.run_dir, "vocab.txt"), vocab.serialize());
  binio::write_file(join(cfg.run_dir, "entropy.tsv"), entropy.export_tsv(vocab));
  out << "prep: " << corpus.size() << " pairs, " << vocab.size() << " tokens (" << text::kNumReserved
      << " reserved), " << entropy.total << " counted tokens\n";
}

void cmd_train(const RunConfig& cfg, bool resume, std::ostream& out) {
  const auto prep = load_prep(cfg);
  const auto corpus = text::read_corpus(cfg.corpus);
  auto data = train::encode_corpus(corpus, prep.vocab);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto needed = data[i].source.size() + data[i].target.size() + 3;
    if (needed > static_cast<std::size_t>(cfg.model.max_length)) {
      throw InputError("corpus line " + std::to_string(i + 1) + " needs " + std::to_string(needed) +
                       " positions but model.max_length is " + std::to_string(cfg.model.max_length));
    }
  }
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = prep.vocab.size();
  mc.steps = cfg.schedule.steps;
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  echo_config(cfg, "train", out);

  const auto ckdir = checkpoint_dir(cfg);
  const auto log_path = join(cfg.run_dir, "metrics.log");
  const auto timing_path = join(cfg.run_dir, "timing.log");
  model::Denoiser net(mc, cfg.seed);
  train::AdamState adam;
  const train::Checkpoint fresh{mc, tc, cfg.schedule, prep.vocab, prep.entropy, {}, {}, {}};
  if (resume) {
    const auto found = step_checkpoints(cfg);
    if (found.empty()) throw InputError("nothing to resume: no step checkpoints in '" + ckdir + "'");
    const auto ck = train::load_checkpoint(found.rbegin()->second);
    if (config_text(ck) != config_text(fresh)) {
      throw ConfigError("checkpoint '" + found.rbegin()->second + "' was trained with a different configuration");
    }
    if (!(ck.vocab == prep.vocab)) throw InputError("checkpoint vocabulary differs from the run directory's");
    net = model::Denoiser(ck.model, ck.params);
    adam = ck.adam;
    truncate_log(log_path, adam.step);
    truncate_log(timing_path, adam.step);
    out << "resuming from step " << adam.step << "\n";
  } else {
    fs::create_directories(ckdir);
    for (const auto& [step, path] : step_checkpoints(cfg)) fs::remove(path);
    fs::remove(join(ckdir, "final"));
    binio::write_file(log_path, "");
    binio::write_file(timing_path, "");
  }
  fs::create_directories(ckdir);

  train::Trainer trainer(net, tc, train::TableSource(cfg.schedule, mc.max_length, &prep.entropy), data);
  trainer.optimizer() = adam;
  const auto resolved = cfg.resolved();
  kv::KeyValues extra;
  for (const auto& [key, value] : resolved.entries()) extra.set("run." + key, value);
  auto snapshot = [&] {
    return train::Checkpoint{mc, tc, cfg.schedule, prep.vocab, prep.entropy, net.params(), trainer.optimizer(), extra};
  };
  std::ofstream log(log_path, std::ios::app);
  std::ofstream timing(timing_path, std::ios::app);
  const int report_every = std::max(1, tc.total_steps / 10);
  while (trainer.completed_steps() < tc.total_steps) {
    const auto rec = trainer.step();
    log << train::format_record(rec, false) << '\n' << std::flush;
    timing << "step=" << rec.step << " elapsed_ms=" << kv::format_double(rec.elapsed_ms) << '\n';
    if (rec.step % cfg.checkpoint_interval == 0 || rec.step == tc.total_steps) {
      train::save_checkpoint(join(ckdir, "step_" + std::to_string(rec.step)), snapshot());
    }
    if (rec.step % report_every == 0 || rec.step == tc.total_steps) out << train::format_record(rec) << '\n';
  }
  train::save_checkpoint(join(ckdir, "final"), snapshot());
  out << "train: " << trainer.completed_steps() << " steps, checkpoints in " << ckdir << "\n";
}

void cmd_sample(const RunConfig& cfg, std::ostream& out, const Overrides& overrides) {
  const auto ck_path = fs::exists(cfg.sample_checkpoint) && !fs::is_directory(cfg.sample_checkpoint)
                           ? cfg.sample_checkpoint
                           : join(checkpoint_dir(cfg), cfg.sample_checkpoint);
  if (!fs::exists(ck_path)) throw InputError("checkpoint '" + ck_path + "' does not exist; run train first");
  const auto ck = train::load_checkpoint(ck_path);
  const auto vocab_path = join(cfg.run_dir, "vocab.txt");
  if (fs::exists(vocab_path) && !(text::Vocab::deserialize(binio::read_file(vocab_path)) == ck.vocab)) {
    throw InputError("vocabulary mismatch between checkpoint '" + ck_path + "' and " + vocab_path);
  }
  const model::Denoiser net(ck.model, ck.params);
  sched::ScheduleSpec spec = ck.schedule;
  if (overrides.schedule) spec.kind = sched::parse_schedule_kind(*overrides.schedule);
  if (overrides.lambda) spec.lambda = *overrides.lambda;
  spec.validate();
  // Target tokens are unknown at inference, so every position uses e = 0.
  const auto table = sched::uniform_table(spec, ck.model.max_length);

  std::vector<std::vector<int>> sources;
  const auto lines = read_lines(cfg.source_path());
  int unknown = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto ids = ck.vocab.encode(column(lines[i], false));
    unknown += static_cast<int>(std::count(ids.begin(), ids.end(), text::kUnk));
    if (ids.size() + 3 > static_cast<std::size_t>(ck.model.max_length)) {
      throw InputError("source line " + std::to_string(i + 1) + " has " + std::to_string(ids.size()) +
                       " tokens; at most " + std::to_string(ck.model.max_length - 3) + " fit");
    }
    sources.push_back(std::move(ids));
  }
  if (sources.empty()) throw InputError("source file '" + cfg.source_path() + "' is empty");
  echo_config(cfg, "sample", out);

  sample::SamplerOptions opts;
  opts.steps = cfg.sample_steps;
  opts.self_condition = cfg.sample_self_cond;
  opts.clamp_x0 = cfg.clamp_x0;
  opts.sigma0 = ck.train.sigma0;
  opts.kind = spec.kind;
  opts.seed = cfg.seed;
  const int threads = sample::worker_threads();
  const auto results = sample::sample_sources(net, sources, table, opts, cfg.candidates, threads);

  const auto dir = join(cfg.run_dir, "samples");
  const auto trace_dir = join(dir, "traces");
  fs::create_directories(trace_dir);
  for (const auto& e : fs::directory_iterator(trace_dir)) {
    if (e.path().extension() == ".trace") fs::remove(e.path());
  }
  std::vector<std::string> hyps, cands;
  for (std::size_t s = 0; s < results.size(); ++s) {
    const auto& r = results[s];
    hyps.push_back(ck.vocab.decode(r.candidates[r.chosen].tokens));
    for (std::size_t c = 0; c < r.candidates.size(); ++c) {
      cands.push_back(std::to_string(s) + "\t" + std::to_string(c) + "\t" + (c == r.chosen ? "1" : "0") + "\t" +
                      ck.vocab.decode(r.candidates[c].tokens));
      char name[64];
      std::snprintf(name, sizeof name, "s%05zu_c%02zu.trace", s, c);
      binio::write_file(join(trace_dir, name), sample::format_trace(r.candidates[c].trace));
    }
  }
  write_lines(join(dir, "hypotheses.txt"), hyps);
  write_lines(join(dir, "candidates.tsv"), cands);
  out << "sample: " << sources.size() << " sources x " << cfg.candidates << " candidates, "
      << (cfg.sample_steps == 0 ? ck.model.steps : cfg.sample_steps) << " steps, schedule "
      << sched::schedule_kind_name(spec.kind) << ", " << threads << " worker(s)";
  if (unknown > 0) out << ", " << unknown << " unknown source token(s)";
  out << "\n";
}

metrics::MetricReport cmd_eval(const RunConfig& cfg, std::ostream& out, const std::string& hypotheses) {
  const auto samples = join(cfg.run_dir, "samples");
  const auto hyp_path = hypotheses.empty() ? join(samples, "hypotheses.txt") : hypotheses;
  std::vector<metrics::Tokens> hyps;
  for (const auto& line : read_lines(hyp_path)) hyps.push_back(metrics::split_words(line));
  const auto refs = reference_words(cfg);
  if (hyps.size() != refs.size()) {
    throw InputError("hypotheses (" + std::to_string(hyps.size()) + " lines) and references (" +
                     std::to_string(refs.size()) + " lines) are not aligned");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty()) throw InputError("reference line " + std::to_string(i + 1) + " is empty");
  }
  // Diversity uses the first three candidates of each source when available.
  std::vector<std::vector<metrics::Tokens>> groups;
  const auto cand_path = join(samples, "candidates.tsv");
  if (hypotheses.empty() && fs::exists(cand_path)) {
    for (const auto& line : read_lines(cand_path)) {
      std::istringstream in(line);
      std::size_t s = 0, c = 0;
      if (!(in >> s >> c)) throw InputError("malformed candidates line '" + line + "'");
      if (c >= 3) continue;
      if (groups.size() <= s) groups.resize(s + 1);
      const auto last_tab = line.rfind('\t');
      groups[s].push_back(metrics::split_words(line.substr(last_tab + 1)));
    }
    if (groups.size() != hyps.size()) groups.clear();
  }
  echo_config(cfg, "eval", out);
  const auto report = metrics::evaluate(hyps, refs, groups);
  fs::create_directories(join(cfg.run_dir, "eval"));
  binio::write_file(join(join(cfg.run_dir, "eval"), "report.txt"), report.format());
  out << report.format();
  return report;
}

void cmd_trace(const RunConfig& cfg, std::ostream& out, const std::string& trace_dir) {
  const auto dir = trace_dir.empty() ? join(join(cfg.run_dir, "samples"), "traces") : trace_dir;
  std::vector<fs::path> files;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".trace") files.push_back(e.path());
    }
  }
  if (files.empty()) throw InputError("no .trace files in '" + dir + "'");
  std::sort(files.begin(), files.end());
  const auto prep = load_prep(cfg);
  echo_config(cfg, "trace", out);

  static const std::regex name("s([0-9]+)_c([0-9]+)\\.trace");
  std::vector<sample::SampleTrace> traces;
  std::vector<long> source_of;
  for (const auto& f : files) {
    traces.push_back(sample::parse_trace(binio::read_file(f.string())));
    std::smatch m;
    const auto file = f.filename().string();
    source_of.push_back(std::regex_match(file, m, name) ? std::stol(m[1].str()) : -1);
  }
  const auto report = sample::decode_order_report(traces, prep.entropy);
  const auto out_dir = join(cfg.run_dir, "trace");
  fs::create_directories(out_dir);
  binio::write_file(join(out_dir, "decode_order.txt"), report.format());
  out << report.format();

  // Quality along the reverse process, against the references when readable.
  std::vector<metrics::Tokens> refs;
  if (fs::exists(cfg.reference_path())) refs = reference_words(cfg);
  const auto& steps = traces.front().steps;
  for (const auto& tr : traces) {
    if (tr.steps.size() != steps.size()) throw InputError("traces in '" + dir + "' have different step counts");
  }
  std::string curve = "step\tt\tbleu\tdiverse_4\n";
  for (std::size_t j = 0; j < steps.size(); ++j) {
    double bleu_sum = 0.0;
    int scored = 0;
    std::map<long, std::vector<metrics::Tokens>> groups;
    for (std::size_t k = 0; k < traces.size(); ++k) {
      const auto ids = sample::extract_output(traces[k].steps[j].tokens, traces[k].target_start);
      auto words = metrics::split_words(prep.vocab.decode(ids));
      const long s = source_of[k];
      if (s >= 0 && static_cast<std::size_t>(s) < refs.size() && !refs[static_cast<std::size_t>(s)].empty()) {
        bleu_sum += metrics::bleu(words, refs[static_cast<std::size_t>(s)]);
        ++scored;
      }
      groups[s].push_back(std::move(words));
    }
    double div = 0.0;
    for (const auto& [s, g] : groups) div += metrics::diverse_4(g);
    div /= static_cast<double>(groups.size());
    curve += std::to_string(steps[j].step) + "\t" + std::to_string(steps[j].t) + "\t" +
             (scored ? kv::format_double(bleu_sum / scored) : std::string("nan")) + "\t" + kv::format_double(div) +
             "\n";
  }
  binio::write_file(join(out_dir, "curve.tsv"), curve);
  out << "trace: " << traces.size() << " traces, curve over " << steps.size() << " retained steps in "
      << join(out_dir, "curve.tsv") << "\n";
}

// ---------------------------------------------------------------------------
// Entry point

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sequence-to-sequence text diffusion with entropy-aware noise schedules", "infodiff"};
  app.require_subcommand(1, 1);
  std::string config_path, hypotheses, trace_dir;
  bool resume = false;
  Overrides o;
  std::uint64_t seed = 0;
  int steps = 0, candidates = 0;
  std::string schedule, self_cond, run_dir;
  double lambda = 0.0;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"prep", "Build the vocabulary and entropy table from the corpus"},
      {"train", "Train the denoiser and write checkpoints"},
      {"sample", "Generate candidates, MBR outputs and traces"},
      {"eval", "Score hypotheses against references"},
      {"trace", "Decode-order report and quality along the reverse process"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    subs[name] = sub;
    sub->add_option("--config", config_path, "key = value configuration file");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--steps", steps, "train: total steps; sample: sampling steps")->check(CLI::PositiveNumber);
    sub->add_option("--candidates", candidates, "candidates per source")->check(CLI::PositiveNumber);
    sub->add_option("--schedule", schedule, "noise schedule")
        ->check(CLI::IsMember({"linear", "cosine", "sqrt", "mi", "info"}));
    sub->add_option("--lambda", lambda, "entropy weight of the info-aware schedule");
    sub->add_option("--self-cond", self_cond, "self-conditioning")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--run-dir", run_dir, "run directory");
  }
  subs["train"]->add_flag("--resume", resume, "continue from the newest step checkpoint");
  subs["eval"]->add_option("--hypotheses", hypotheses, "hypothesis file (default: the run's MBR outputs)");
  subs["trace"]->add_option("--traces", trace_dir, "trace directory (default: the run's traces)");

  if (!args.empty() && !args.front().starts_with("-") && !subs.count(args.front())) {
    err << "error: unknown command '" << args.front() << "'\n" << app.help();
    return 2;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  const auto* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  if (chosen->count("--seed")) o.seed = seed;
  if (chosen->count("--steps")) o.steps = steps;
  if (chosen->count("--candidates")) o.candidates = candidates;
  if (chosen->count("--schedule")) o.schedule = schedule;
  if (chosen->count("--lambda")) o.lambda = lambda;
  if (chosen->count("--self-cond")) o.self_cond = self_cond == "on";
  if (chosen->count("--run-dir")) o.run_dir = run_dir;

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    apply_overrides(cfg, o, command);
    cfg.validate();
    if (command == "prep") {
      cmd_prep(cfg, out);
    } else if (command == "train") {
      cmd_train(cfg, resume, out);
    } else if (command == "sample") {
      cmd_sample(cfg, out, o);
    } else if (command == "eval") {
      cmd_eval(cfg, out, hypotheses);
    } else {
      cmd_trace(cfg, out, trace_dir);
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace infodiff::cli
