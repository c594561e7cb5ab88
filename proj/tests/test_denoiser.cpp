#include <cmath>
#include <set>

#include "doctest.h"
#include "infodiff/denoiser.hpp"
#include "infodiff/errors.hpp"
#include "test_util.hpp"

using namespace infodiff;
using namespace infodiff::model;

namespace {

ModelConfig tiny_config() {
  return {.layers = 1, .heads = 2, .width = 8, .hidden_mult = 2, .max_length = 8, .vocab_size = 12, .steps = 10};
}

Conditioning conditioning(int batch, int length, int n_src, int window) {
  Conditioning c;
  for (int b = 0; b < batch; ++b) {
    c.steps.push_back(3 + b);
    for (int i = 0; i < length; ++i) {
      c.source_mask.push_back(i < n_src);
      c.pad_mask.push_back(i >= window);
    }
  }
  return c;
}

diff::DiffusionState random_state(int batch, int length, int width, std::mt19937_64& rng) {
  diff::DiffusionState s{diff::RowMatrixF(batch * length, width), batch, length, 5};
  std::normal_distribution<float> n;
  for (Eigen::Index i = 0; i < s.x.size(); ++i) s.x.data()[i] = n(rng);
  return s;
}

}  // namespace

TEST_CASE("time features") {
  const auto f0 = time_features(0, 16);
  for (int k = 0; k < 8; ++k) {
    CHECK(f0[static_cast<std::size_t>(k)] == 0.0);
    CHECK(f0[static_cast<std::size_t>(8 + k)] == 1.0);
  }
  std::set<std::vector<double>> seen;
  double peak = 0.0;
  for (int t = 0; t <= 100000; ++t) {
    auto f = time_features(t, 32);
    for (double x : f) peak = std::max(peak, std::abs(x));
    seen.insert(std::move(f));
  }
  CHECK(seen.size() == 100001);
  CHECK(peak <= 1.0);
  CHECK_THROWS_AS(time_features(1, 7), ContractError);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny_config().validate());
  auto c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("output shape and determinism") {
  const Denoiser net(tiny_config(), 7);
  std::mt19937_64 rng(1);
  for (int B : {1, 3}) {
    const auto x = random_state(B, 8, 8, rng);
    const auto cond = conditioning(B, 8, 3, 8);
    const auto sc = diff::RowMatrixF::Zero(B * 8, 8);
    const auto out = net.denoise(x, sc, cond);
    CHECK(out.rows() == B * 8);
    CHECK(out.cols() == 8);
    CHECK(out == net.denoise(x, sc, cond));
    CHECK(out.allFinite());
  }
  const auto x = random_state(1, 8, 8, rng);
  CHECK_THROWS_AS(net.denoise(x, diff::RowMatrixF::Zero(4, 8), conditioning(1, 8, 3, 8)), ContractError);
  auto bad = x;
  bad.length = 4;
  CHECK_THROWS_AS(net.denoise(bad, diff::RowMatrixF::Zero(8, 8), conditioning(1, 8, 3, 8)), ContractError);
}

TEST_CASE("zero self-conditioning equals the model without the branch") {
  auto with_sc = tiny_config();
  auto without = with_sc;
  without.self_condition = false;
  const Denoiser a(with_sc, 21);
  const Denoiser b(without, 21);
  for (const auto& [name, tensor] : b.params()) CHECK(a.params().at(name) == tensor);
  std::mt19937_64 rng(2);
  const auto x = random_state(2, 8, 8, rng);
  const auto cond = conditioning(2, 8, 2, 8);
  const auto zeros = diff::RowMatrixF::Zero(16, 8);
  CHECK(a.denoise(x, zeros, cond) == b.denoise(x, zeros, cond));
  // A non-zero estimate does change the output.
  const auto sc = random_state(2, 8, 8, rng).x;
  CHECK(a.denoise(x, sc, cond) != a.denoise(x, zeros, cond));
}

TEST_CASE("pad positions are isolated from attention") {
  const Denoiser net(tiny_config(), 5);
  std::mt19937_64 rng(3);
  auto x = random_state(1, 8, 8, rng);
  const auto cond = conditioning(1, 8, 2, 5);  // positions 5..7 are pad
  const diff::RowMatrixF sc = random_state(1, 8, 8, rng).x;
  const auto before = net.denoise(x, sc, cond);
  auto permuted = x;
  permuted.x.row(5) = x.x.row(7);
  permuted.x.row(7) = x.x.row(6);
  permuted.x.row(6) = x.x.row(5) * 3.0f;
  auto sc2 = sc;
  sc2.row(6).setConstant(9.0f);
  const auto after = net.denoise(permuted, sc2, cond);
  CHECK(before.topRows(5) == after.topRows(5));
  CHECK(before.bottomRows(3) != after.bottomRows(3));
}

TEST_CASE("every encoder parameter receives gradient") {
  const auto cfg = tiny_config();
  const Denoiser net(cfg, 9);
  const int B = 2;
  nc::Graph g;
  auto x = g.input("x_t", {B, 8, 8});
  auto sc = g.input("self_cond", {B, 8, 8});
  auto out = build_encoder(g, cfg, B, x, sc);
  auto probe = g.input("probe", {B, 8, 8});
  auto loss = g.sum(g.mul(out, probe));
  std::mt19937_64 rng(4);
  nc::Bindings bind = net.params();
  bind["x_t"] = testing::random_tensor({B, 8, 8}, rng);
  bind["self_cond"] = testing::random_tensor({B, 8, 8}, rng);
  bind["probe"] = testing::random_tensor({B, 8, 8}, rng);
  bind_conditioning(bind, cfg, B, conditioning(B, 8, 3, 7));
  const auto ev = nc::eval(g, bind);
  const auto grads = nc::backward(g, ev, loss);
  for (const auto& name : g.parameter_names()) {
    double mx = 0.0;
    for (float v : grads.at(name).data()) mx = std::max(mx, static_cast<double>(std::abs(v)));
    CHECK_MESSAGE(mx > 0.0, name);
  }
  for (const auto& name : {"layer0.attn.q.w", "input.w_sc", "time.l1.w", "segment", "final.g"}) {
    CHECK_MESSAGE(nc::grad_check(g, loss, bind, name, 1e-3) < 1e-4, name);
  }
}

TEST_CASE("dropout masks apply only when requested") {
  auto cfg = tiny_config();
  cfg.dropout = 0.5;
  nc::Graph g;
  auto x = g.input("x_t", {1, 8, 8});
  auto sc = g.input("self_cond", {1, 8, 8});
  build_encoder(g, cfg, 1, x, sc, {.dropout = true});
  CHECK(g.inputs().count("dropout.0.attn") == 1);
  nc::Bindings bind;
  Rng rng(1);
  bind_dropout(bind, cfg, 1, rng);
  int zeros = 0;
  for (float v : bind.at("dropout.0.ffn").data()) {
    CHECK((v == 0.0f || v == 2.0f));
    zeros += v == 0.0f;
  }
  CHECK(zeros > 0);
  CHECK(zeros < 64);
}
