#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "infodiff/errors.hpp"
#include "infodiff/evalmetrics.hpp"
#include "infodiff/sampler.hpp"
#include "infodiff/training.hpp"

using namespace infodiff;
using namespace infodiff::sample;

namespace {

model::ModelConfig small_config(bool self_condition = true) {
  return {.layers = 1, .heads = 2, .width = 8, .hidden_mult = 2, .max_length = 10, .vocab_size = 12, .steps = 20,
          .self_condition = self_condition};
}

sched::AlphaBarTable mi_table(int steps = 20, int length = 10) {
  return sched::uniform_table({.kind = sched::ScheduleKind::MutualInfo, .steps = steps}, length);
}

// Brute-force nearest neighbor over sorted (distance, id) pairs.
int nearest_oracle(const Eigen::RowVectorXf& x, const diff::EmbeddingTable& emb) {
  std::vector<std::pair<double, int>> d;
  for (int w = 0; w < emb.vocab_size(); ++w) {
    double s = 0.0;
    for (int c = 0; c < emb.width(); ++c) s += std::pow(static_cast<double>(x(c)) - emb.row(w)(c), 2);
    d.emplace_back(s, w);
  }
  return std::min_element(d.begin(), d.end())->second;
}

}  // namespace

TEST_CASE("strided step sequence") {
  const auto full = step_sequence(20, 20);
  for (int k = 0; k <= 20; ++k) CHECK(full[static_cast<std::size_t>(k)] == k);
  const auto tau = step_sequence(2000, 7);
  CHECK(tau.front() == 0);
  CHECK(tau.back() == 2000);
  CHECK(tau.size() == 8);
  CHECK(std::adjacent_find(tau.begin(), tau.end(), std::greater_equal<>()) == tau.end());
  CHECK_THROWS_AS(step_sequence(20, 1), ContractError);
  CHECK_THROWS_AS(step_sequence(20, 21), ContractError);
}

TEST_CASE("rounding") {
  Rng rng(3);
  const auto emb = diff::EmbeddingTable::random(9, 4, rng);
  std::vector<int> ids{0, 5, 8, 3};
  diff::RowMatrixF x(4, 4);
  for (int r = 0; r < 4; ++r) x.row(r) = emb.row(ids[static_cast<std::size_t>(r)]);
  CHECK(round_to_tokens(x, emb) == ids);

  diff::RowMatrixF rows = diff::RowMatrixF::Constant(7, 2, 50.0f);
  for (int w = 0; w < 7; ++w) rows(w, 1) = static_cast<float>(10 * w);
  rows.row(2) << 1.0f, 0.0f;
  rows.row(5) << -1.0f, 0.0f;
  const diff::EmbeddingTable tie(rows);
  CHECK(round_to_tokens(diff::RowMatrixF::Zero(1, 2), tie) == std::vector<int>{2});

  for (int trial = 0; trial < 500; ++trial) {
    diff::RowMatrixF q(1, 4);
    for (int c = 0; c < 4; ++c) q(0, c) = static_cast<float>(1.5 * standard_normal(rng));
    CHECK(round_to_tokens(q, emb).front() == nearest_oracle(q.row(0), emb));
  }
  diff::RowMatrixF bad = diff::RowMatrixF::Zero(1, 4);
  bad(0, 1) = std::nanf("");
  CHECK_THROWS_AS(round_to_tokens(bad, emb), NumericError);
  CHECK(clamp_to_embedding(x, emb) == x);
}

TEST_CASE("trace retention and stabilization") {
  CHECK(retained_step(1, 200));
  CHECK(retained_step(200, 200));
  CHECK(retained_step(4, 200));
  CHECK_FALSE(retained_step(5, 200));
  int kept = 0;
  for (int r = 1; r <= 200; ++r) kept += retained_step(r, 200);
  CHECK(kept == 51);
  for (int r = 1; r <= 30; ++r) CHECK(retained_step(r, 30));

  SampleTrace tr;
  tr.total_steps = 5;
  tr.target_start = 2;
  tr.steps = {{1, 5, {1, 4, 7, 9, 6, 0}}, {2, 4, {1, 4, 7, 8, 6, 0}}, {3, 3, {1, 4, 5, 8, 2, 0}},
              {4, 2, {1, 4, 7, 8, 2, 0}}, {5, 1, {1, 4, 7, 8, 2, 0}}};
  tr.finalize();
  CHECK(tr.stabilization == std::vector<int>{1, 1, 4, 2, 3, 1});
  CHECK(tr.output_positions == std::vector<int>{2, 3});
  CHECK(extract_output(tr.final_tokens(), 2) == std::vector<int>{7, 8});
  CHECK(extract_output(std::vector<int>{1, 4, 2, 0, 6, 3, 7, 2, 9}, 3) == std::vector<int>{6, 7});

  const auto round_trip = parse_trace(format_trace(tr));
  CHECK(round_trip.stabilization == tr.stabilization);
  CHECK(round_trip.total_steps == 5);
  CHECK(round_trip.target_start == 2);
  CHECK(format_trace(round_trip) == format_trace(tr));
  CHECK_THROWS_AS(parse_trace("no header\n"), InputError);
  CHECK_THROWS_AS(parse_trace("# total_steps=3\n"), InputError);
  CHECK_THROWS_AS(parse_trace("# total_steps=3\n1\t3\t1 2\n1\t2\t1 2\n"), InputError);
}

TEST_CASE("reverse sampling contract") {
  const model::Denoiser net(small_config(), 5);
  const std::vector<int> source{4, 7, 9};
  const auto table = mi_table();
  SamplerOptions opts;

  Rng a = make_stream(1, {0});
  const auto first = reverse_sample(net, source, table, opts, a);
  Rng b = make_stream(1, {0});
  const auto second = reverse_sample(net, source, table, opts, b);
  CHECK(format_trace(first.trace) == format_trace(second.trace));
  CHECK(first.tokens == second.tokens);

  CHECK(first.trace.steps.size() == 20);
  CHECK(first.trace.steps.front().t == 20);
  CHECK(first.trace.steps.back().t == 1);
  CHECK(first.trace.target_start == 5);
  for (const auto& s : first.trace.steps) {
    CHECK(s.tokens[0] == text::kCls);
    for (std::size_t i = 0; i < source.size(); ++i) CHECK(s.tokens[i + 1] == source[i]);
    CHECK(s.tokens[4] == text::kSep);
  }
  for (int p = first.trace.target_start; p < 10; ++p) {
    CHECK(first.trace.stabilization[static_cast<std::size_t>(p)] >= 1);
    CHECK(first.trace.stabilization[static_cast<std::size_t>(p)] <= 20);
  }
  CHECK(first.tokens == extract_output(first.trace.final_tokens(), 5));

  SamplerOptions strided;
  strided.steps = 5;
  Rng c(2);
  const auto s5 = reverse_sample(net, source, table, strided, c);
  CHECK(s5.trace.steps.size() == 5);
  CHECK(s5.trace.steps.front().t == 20);
  CHECK(s5.trace.steps[1].t == 16);

  SamplerOptions clamped;
  clamped.clamp_x0 = true;
  Rng d(2);
  CHECK_NOTHROW(reverse_sample(net, source, table, clamped, d));

  SamplerOptions too_few;
  too_few.steps = 1;
  Rng e(2);
  CHECK_THROWS_AS(reverse_sample(net, source, table, too_few, e), ContractError);
  Rng f(2);
  CHECK_THROWS_AS(reverse_sample(net, std::vector<int>(8, 5), table, opts, f), InputError);
  Rng g(2);
  CHECK_THROWS_AS(reverse_sample(net, source, mi_table(10), opts, g), ContractError);
}

TEST_CASE("batched candidates match one-at-a-time sampling") {
  const model::Denoiser net(small_config(), 6);
  const std::vector<int> source{5, 6};
  const auto table = mi_table();
  std::vector<Rng> streams{make_stream(9, {0, 0}), make_stream(9, {0, 1}), make_stream(9, {0, 2})};
  const auto batch = reverse_sample(net, source, table, {}, streams);
  REQUIRE(batch.size() == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    Rng rng = make_stream(9, {0, c});
    const auto single = reverse_sample(net, source, table, {}, rng);
    CHECK(format_trace(single.trace) == format_trace(batch[c].trace));
  }
}

TEST_CASE("zero-weight entropy shaping leaves sampling unchanged") {
  const model::Denoiser net(small_config(), 7);
  const std::vector<int> source{4, 8};
  const auto info = sched::info_aware_table(std::vector<double>{0, 0.3, -0.2, 0.5, -0.5, 0.1, 0, 0, 0.4, -0.1},
                                            {.kind = sched::ScheduleKind::InfoAware, .steps = 20, .lambda = 0.0});
  Rng a(11), b(11);
  CHECK(format_trace(reverse_sample(net, source, info, {}, a).trace) ==
        format_trace(reverse_sample(net, source, mi_table(), {}, b).trace));
}

TEST_CASE("self-conditioning flag") {
  const model::Denoiser with_sc(small_config(true), 8);
  const model::Denoiser without(small_config(false), 8);
  const std::vector<int> source{4, 8};
  SamplerOptions off;
  off.self_condition = false;
  Rng a(3), b(3);
  // A zero self-conditioning input makes the branch contribute nothing.
  CHECK(format_trace(reverse_sample(with_sc, source, mi_table(), off, a).trace) ==
        format_trace(reverse_sample(without, source, mi_table(), {}, b).trace));
}

TEST_CASE("parallel sampling over sources") {
  const model::Denoiser net(small_config(), 9);
  const std::vector<std::vector<int>> sources{{4}, {5, 6}, {7, 8, 9}, {10}};
  SamplerOptions opts;
  opts.seed = 21;
  opts.steps = 10;
  const auto one = sample_sources(net, sources, mi_table(), opts, 3, 1);
  const auto many = sample_sources(net, sources, mi_table(), opts, 3, 3);
  REQUIRE(one.size() == 4);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(one[s].chosen == many[s].chosen);
    REQUIRE(one[s].candidates.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(format_trace(one[s].candidates[c].trace) == format_trace(many[s].candidates[c].trace));
    }
    std::vector<std::vector<int>> seqs;
    for (const auto& c : one[s].candidates) seqs.push_back(c.tokens);
    CHECK(one[s].chosen == metrics::mbr_select(seqs));
  }
  const auto single = sample_sources(net, sources, mi_table(), opts, 1, 2);
  for (const auto& s : single) CHECK(s.chosen == 0);
  CHECK_THROWS_AS(sample_sources(net, sources, mi_table(), opts, 0, 1), ContractError);
  CHECK_THROWS_AS(sample_sources(net, std::vector<std::vector<int>>{{4}, std::vector<int>(9, 4)}, mi_table(), opts, 2, 2),
                  InputError);
}

TEST_CASE("worker thread cap") {
  ::setenv("INFODIFF_THREADS", "1", 1);
  CHECK(worker_threads() == 1);
  ::setenv("INFODIFF_THREADS", "zero", 1);
  CHECK_THROWS_AS(worker_threads(), ConfigError);
  ::unsetenv("INFODIFF_THREADS");
  CHECK(worker_threads() >= 1);
}

TEST_CASE("decode-order report") {
  text::EntropyTable entropy;
  entropy.bits = {0, 0, 0, 0, 1.0, 2.0, 3.0, 4.0};
  entropy.counts.assign(8, 1);

  // Two output tokens per trace: high-H id 7 settles at step 10, low-H id 4 at step 90.
  SampleTrace tr;
  tr.total_steps = 100;
  tr.target_start = 1;
  for (int r = 1; r <= 100; ++r) {
    if (!retained_step(r, 100)) continue;
    tr.steps.push_back({r, 101 - r, {1, r < 10 ? 5 : 7, r < 90 ? 6 : 4, 2}});
  }
  tr.finalize();
  const std::vector<SampleTrace> traces{tr, tr};
  const auto rep = decode_order_report(traces, entropy);
  CHECK(rep.tokens == 4);
  CHECK(rep.quartiles[0].count == 2);
  CHECK(rep.quartiles[0].mean == 90.0);
  CHECK(rep.quartiles[2].count == 2);
  CHECK(rep.quartiles[2].mean == 10.0);
  CHECK(rep.quartiles[0].histogram[8] == 2);
  CHECK(rep.quartiles[2].histogram[0] == 2);
  REQUIRE(rep.delta.has_value());
  CHECK(*rep.delta == 80.0);
  CHECK(rep.format().find("delta=80") != std::string::npos);

  SampleTrace flat = tr;
  for (auto& s : flat.steps) s.tokens = {1, 6, 6, 2};
  flat.finalize();
  const auto single = decode_order_report(std::span<const SampleTrace>(&flat, 1), entropy);
  CHECK(single.quartiles[0].count == 2);
  CHECK_FALSE(single.delta.has_value());
  CHECK(single.format().find("delta=absent") != std::string::npos);
  CHECK_THROWS_AS(decode_order_report(std::span<const SampleTrace>{}, entropy), ContractError);
}

TEST_CASE("a model trained on one pair reproduces it") {
  const std::vector<text::TextPair> corpus{{"where is it", "it is here"}};
  const auto vocab = text::Vocab::build(corpus, text::TokenizerMode::Whitespace);
  const auto entropy = text::corpus_entropy(corpus, vocab);
  const model::ModelConfig cfg{.layers = 1, .heads = 2, .width = 16, .hidden_mult = 2, .max_length = 10,
                               .vocab_size = vocab.size(), .steps = 20};
  const sched::ScheduleSpec spec{.kind = sched::ScheduleKind::InfoAware, .steps = 20, .lambda = 0.25};
  model::Denoiser net(cfg, 3);
  train::Trainer trainer(net, {.learning_rate = 1e-2, .total_steps = 300, .batch_size = 4, .seed = 3},
                         train::TableSource(spec, cfg.max_length, &entropy), train::encode_corpus(corpus, vocab));
  for (int i = 0; i < 300; ++i) trainer.step();

  const auto source = vocab.encode(corpus[0].source);
  const auto target = vocab.encode(corpus[0].target);
  const auto table = sched::uniform_table(spec, cfg.max_length);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    CHECK(reverse_sample(net, source, table, {}, rng).tokens == target);
  }
}
