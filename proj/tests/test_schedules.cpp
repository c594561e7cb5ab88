#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "doctest.h"
#include "infodiff/binio.hpp"
#include "infodiff/errors.hpp"
#include "infodiff/schedules.hpp"

using namespace infodiff;
using namespace infodiff::sched;

namespace {

std::vector<double> random_relative_entropy(std::mt19937_64& rng, int length) {
  std::uniform_real_distribution<double> bits(1.0, 14.0);
  text::SentenceProfile p;
  for (int i = 0; i < length; ++i) {
    p.bits.push_back(bits(rng));
    p.reserved.push_back(i == 0 || i == length - 1);
  }
  double sum = 0.0;
  p.max = -1e9;
  p.min = 1e9;
  int n = 0;
  for (int i = 1; i < length - 1; ++i) {
    sum += p.bits[static_cast<std::size_t>(i)];
    p.max = std::max(p.max, p.bits[static_cast<std::size_t>(i)]);
    p.min = std::min(p.min, p.bits[static_cast<std::size_t>(i)]);
    ++n;
  }
  p.mean = sum / n;
  return entropy_relative(p);
}

}  // namespace

TEST_CASE("mutual-info closed form") {
  ScheduleSpec spec{.kind = ScheduleKind::MutualInfo, .steps = 2000};
  CHECK(base_alphabar(ScheduleKind::MutualInfo, 0, spec) == 1.0);
  CHECK(base_alphabar(ScheduleKind::MutualInfo, 2000, spec) == 0.0);
  CHECK(base_alphabar(ScheduleKind::MutualInfo, 500, spec) == 0.75);
}

TEST_CASE("sqrt, cosine and linear closed forms") {
  ScheduleSpec spec{.kind = ScheduleKind::Sqrt, .steps = 100, .offset = 1e-4};
  CHECK(base_alphabar(ScheduleKind::Sqrt, 0, spec) == doctest::Approx(0.99).epsilon(1e-12));
  CHECK(base_alphabar(ScheduleKind::Sqrt, 100, spec) == 0.0);  // clamped

  spec.kind = ScheduleKind::Cosine;
  const double f0 = std::pow(std::cos(1e-4 / (1 + 1e-4) * std::numbers::pi / 2), 2);
  const double f50 = std::pow(std::cos((0.5 + 1e-4) / (1 + 1e-4) * std::numbers::pi / 2), 2);
  CHECK(base_alphabar(ScheduleKind::Cosine, 50, spec) == doctest::Approx(f50 / f0).epsilon(1e-12));

  spec.kind = ScheduleKind::Linear;
  double prod = 1.0;
  for (int i = 1; i <= 3; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (i - 1) / 99.0);
  CHECK(base_alphabar(ScheduleKind::Linear, 3, spec) == doctest::Approx(prod).epsilon(1e-14));
  CHECK(uniform_table(spec, 2)(3, 1) == base_alphabar(ScheduleKind::Linear, 3, spec));

  CHECK_THROWS_AS(base_alphabar(ScheduleKind::Sqrt, 101, spec), ContractError);
  CHECK_THROWS_AS(base_alphabar(ScheduleKind::Sqrt, -1, spec), ContractError);
}

TEST_CASE("sinusoidal lambda weight") {
  CHECK(lambda_weight(0, 1000, 0.3) == 0.0);
  CHECK(std::abs(lambda_weight(1000, 1000, 0.3)) < 1e-12);
  CHECK(lambda_weight(500, 1000, 0.3) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(lambda_weight(250, 1000, 0.3) == doctest::Approx(0.212132).epsilon(1e-6));
}

TEST_CASE("relative entropy normalization") {
  auto e = entropy_relative(std::vector<double>{2, 4, 6}, 4.0, 6.0, 2.0);
  CHECK(e == std::vector<double>{-0.5, 0.0, 0.5});
  CHECK(entropy_relative(std::vector<double>{3, 3, 3}, 3.0, 3.0, 3.0) == std::vector<double>{0, 0, 0});
  e = entropy_relative(std::vector<double>{1, 2, 7}, 10.0 / 3.0, 7.0, 1.0);
  CHECK(e[0] == doctest::Approx(-0.3889).epsilon(1e-4));
  CHECK(e[1] == doctest::Approx(-0.2222).epsilon(1e-4));
  CHECK(e[2] == doctest::Approx(0.6111).epsilon(1e-4));

  text::SentenceProfile p{{9, 2, 6, 9}, {true, false, false, true}, 4.0, 6.0, 2.0};
  CHECK(entropy_relative(p) == std::vector<double>{0.0, -0.5, 0.5, 0.0});
}

TEST_CASE("info-aware table values") {
  ScheduleSpec spec{.kind = ScheduleKind::InfoAware, .steps = 1000, .lambda = 0.2};
  const std::vector<double> e{0.5, -0.5, 0.0};
  const auto table = info_aware_table(e, spec);
  CHECK(table(500, 0) == doctest::Approx(0.60).epsilon(1e-12));
  CHECK(table(500, 1) == doctest::Approx(0.40).epsilon(1e-12));
  for (int i = 0; i < 3; ++i) {
    CHECK(table(0, i) == 1.0);
    CHECK(table(1000, i) == 0.0);
  }
}

TEST_CASE("zero relative entropy reduces to mutual-info bit-exactly") {
  ScheduleSpec info{.kind = ScheduleKind::InfoAware, .steps = 200, .lambda = 0.3};
  ScheduleSpec mi = info;
  mi.kind = ScheduleKind::MutualInfo;
  CHECK(info_aware_table(std::vector<double>(5, 0.0), info) == uniform_table(mi, 5));
  CHECK(uniform_table(info, 5) == uniform_table(mi, 5));
}

TEST_CASE("configuration errors") {
  ScheduleSpec spec{.kind = ScheduleKind::InfoAware, .steps = 100, .lambda = 0.35};
  CHECK_THROWS_AS(info_aware_table(std::vector<double>{0.1}, spec), ConfigError);
  spec.enforce_monotone = false;
  CHECK_NOTHROW(info_aware_table(std::vector<double>{0.1}, spec));
  spec.lambda = std::numbers::inv_pi;
  spec.enforce_monotone = true;
  CHECK_NOTHROW(info_aware_table(std::vector<double>{0.1}, spec));
  CHECK_THROWS_AS((ScheduleSpec{.steps = 1}.validate()), ConfigError);
  CHECK_THROWS_AS((ScheduleSpec{.offset = 0.2}.validate()), ConfigError);
  CHECK_THROWS_AS(info_aware_table(std::vector<double>{0.1}, ScheduleSpec{.kind = ScheduleKind::Sqrt}), ContractError);
}

TEST_CASE("per-step alpha") {
  ScheduleSpec spec{.kind = ScheduleKind::MutualInfo, .steps = 4};
  const auto table = uniform_table(spec, 1);
  CHECK(per_step_alpha(table, 1, 0) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(per_step_alpha(table, 4, 0) == 0.0);
  AlphaBarMatrix flat(3, 1);
  flat << 1.0, 0.6, 0.6;
  CHECK(per_step_alpha(AlphaBarTable(flat), 2, 0) == 1.0);
  AlphaBarMatrix absorbed(3, 1);
  absorbed << 1.0, 0.0, 0.0;
  CHECK(per_step_alpha(AlphaBarTable(absorbed), 2, 0) == 0.0);
  CHECK_THROWS_AS(per_step_alpha(table, 0, 0), ContractError);
}

TEST_CASE("schedule properties over random sentences") {
  std::mt19937_64 rng(42);
  for (double lambda : {0.0, 0.1, 0.25, std::numbers::inv_pi}) {
    for (int T : {10, 200}) {
      for (int trial = 0; trial < 10; ++trial) {
        const auto e = random_relative_entropy(rng, 12);
        const auto table = info_aware_table(e, {.kind = ScheduleKind::InfoAware, .steps = T, .lambda = lambda});
        for (int i = 0; i < 12; ++i) {
          CHECK(table(0, i) == 1.0);
          CHECK(table(T, i) == 0.0);
          for (int t = 1; t <= T; ++t) {
            CHECK(table(t, i) <= table(t - 1, i));
            CHECK(table(t, i) >= 0.0);
          }
          for (int j = 0; j < 12; ++j) {
            if (e[static_cast<std::size_t>(i)] > e[static_cast<std::size_t>(j)]) {
              for (int t = 0; t <= T; ++t) CHECK(table(t, i) >= table(t, j));
            }
          }
        }
      }
    }
  }
}

TEST_CASE("every kind has exact boundaries") {
  for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::Sqrt, ScheduleKind::MutualInfo,
                    ScheduleKind::InfoAware}) {
    const auto table = uniform_table({.kind = kind, .steps = 50}, 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(table(0, i) == 1.0);
      CHECK(table(50, i) == 0.0);
      for (int t = 1; t <= 50; ++t) CHECK(table(t, i) <= table(t - 1, i));
    }
  }
}

TEST_CASE("binary table export") {
  const auto dir = std::filesystem::temp_directory_path() / "infodiff_sched_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "table.abar").string();
  ScheduleSpec spec{.kind = ScheduleKind::InfoAware, .steps = 20, .lambda = 0.25};
  const auto table = info_aware_table(std::vector<double>{0.3, -0.2, 0.0, 0.7}, spec);
  write_table(path, table, spec);
  const std::string bytes = binio::read_file(path);
  CHECK(bytes.substr(0, 4) == "ABAR");
  CHECK(bytes.size() == 16 + 21 * 4 * 4);
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version, little-endian
  const auto back = read_table(path);
  CHECK(back.steps() == 20);
  CHECK(back.length() == 4);
  for (int t = 0; t <= 20; ++t) {
    for (int i = 0; i < 4; ++i) CHECK(back(t, i) == static_cast<double>(static_cast<float>(table(t, i))));
  }
  CHECK(binio::read_file(path + ".txt").find("lambda=0.25") != std::string::npos);
  CHECK_THROWS_AS(decode_table("ABCD"), FormatError);
  CHECK_THROWS_AS(decode_table(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_table(bad_version), FormatError);
}
