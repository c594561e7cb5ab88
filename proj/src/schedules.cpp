#include "infodiff/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "infodiff/binio.hpp"
#include "infodiff/errors.hpp"

namespace infodiff::sched {

namespace {

constexpr std::uint32_t kTableVersion = 1;

void check_step(int t, int steps) {
  if (t < 0 || t > steps) {
    throw ContractError("schedule: step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  }
}

}  // namespace

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "sqrt") return ScheduleKind::Sqrt;
  if (name == "mi" || name == "mutual-info") return ScheduleKind::MutualInfo;
  if (name == "info" || name == "info-aware") return ScheduleKind::InfoAware;
  throw ConfigError("unknown schedule '" + std::string(name) + "'");
}

std::string_view schedule_kind_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::Sqrt: return "sqrt";
    case ScheduleKind::MutualInfo: return "mi";
    case ScheduleKind::InfoAware: return "info";
  }
  return "?";
}

void ScheduleSpec::validate() const {
  if (steps < 2) throw ConfigError("schedule: T must be at least 2");
  if (!(offset >= 0.0 && offset <= 0.1)) throw ConfigError("schedule: offset s must lie in [0, 0.1]");
  if (!(lambda >= 0.0)) throw ConfigError("schedule: lambda must be non-negative");
  if (enforce_monotone && lambda > std::numbers::inv_pi) {
    throw ConfigError("schedule: lambda " + std::to_string(lambda) + " exceeds 1/pi with monotonicity enforced");
  }
  if (kind == ScheduleKind::Linear && !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("schedule: linear beta range must satisfy 0 < beta_min <= beta_max < 1");
  }
}

std::string ScheduleSpec::describe() const {
  std::ostringstream out;
  out.precision(17);
  out << "kind=" << schedule_kind_name(kind) << '\n'
      << "T=" << steps << '\n'
      << "lambda=" << lambda << '\n'
      << "s=" << offset << '\n'
      << "beta_min=" << beta_min << '\n'
      << "beta_max=" << beta_max << '\n'
      << "enforce_monotone=" << (enforce_monotone ? 1 : 0) << '\n';
  return out.str();
}

double base_alphabar(ScheduleKind kind, int t, const ScheduleSpec& spec) {
  const int T = spec.steps;
  check_step(t, T);
  const double frac = static_cast<double>(t) / T;
  switch (kind) {
    case ScheduleKind::Linear: {
      double abar = 1.0;
      for (int i = 1; i <= t; ++i) {
        const double beta = spec.beta_min + (spec.beta_max - spec.beta_min) * (i - 1) / (T - 1);
        abar *= 1.0 - beta;
      }
      return abar;
    }
    case ScheduleKind::Cosine: {
      auto f = [&](double x) {
        const double c = std::cos((x + spec.offset) / (1.0 + spec.offset) * std::numbers::pi / 2.0);
        return c * c;
      };
      return std::clamp(f(frac) / f(0.0), 0.0, 1.0);
    }
    case ScheduleKind::Sqrt:
      return std::clamp(1.0 - std::sqrt(frac + spec.offset), 0.0, 1.0);
    case ScheduleKind::MutualInfo:
    case ScheduleKind::InfoAware:
      return 1.0 - frac;
  }
  return 0.0;
}

double lambda_weight(int t, int steps, double lambda) {
  check_step(t, steps);
  if (t == 0 || t == steps) return 0.0;
  return lambda * std::sin(static_cast<double>(t) / steps * std::numbers::pi);
}

std::vector<double> entropy_relative(std::span<const double> bits, double mean, double max, double min) {
  std::vector<double> e(bits.size(), 0.0);
  const double range = max - min;
  if (std::abs(range) < 1e-12) return e;
  for (std::size_t i = 0; i < bits.size(); ++i) e[i] = (bits[i] - mean) / range;
  return e;
}

std::vector<double> entropy_relative(const text::SentenceProfile& profile) {
  auto e = entropy_relative(profile.bits, profile.mean, profile.max, profile.min);
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (profile.reserved[i]) e[i] = 0.0;
  }
  return e;
}

AlphaBarTable info_aware_table(std::span<const double> relative_entropy, const ScheduleSpec& spec) {
  if (spec.kind != ScheduleKind::InfoAware) throw ContractError("info_aware_table: spec.kind must be info-aware");
  spec.validate();
  const int T = spec.steps;
  const auto L = static_cast<Eigen::Index>(relative_entropy.size());
  AlphaBarMatrix grid(T + 1, L);
  for (int t = 0; t <= T; ++t) {
    const double base = base_alphabar(ScheduleKind::MutualInfo, t, spec);
    const double weight = lambda_weight(t, T, spec.lambda);
    for (Eigen::Index i = 0; i < L; ++i) {
      grid(t, i) = std::clamp(base + weight * relative_entropy[static_cast<std::size_t>(i)], 0.0, 1.0);
    }
  }
  grid.row(0).setOnes();
  grid.row(T).setZero();
  return AlphaBarTable(std::move(grid));
}

AlphaBarTable uniform_table(const ScheduleSpec& spec, int length) {
  spec.validate();
  if (length < 1) throw ContractError("uniform_table: length must be positive");
  const int T = spec.steps;
  AlphaBarMatrix grid(T + 1, length);
  if (spec.kind == ScheduleKind::Linear) {
    // Running product instead of T separate product loops.
    double abar = 1.0;
    grid.row(0).setConstant(1.0);
    for (int t = 1; t <= T; ++t) {
      const double beta = spec.beta_min + (spec.beta_max - spec.beta_min) * (t - 1) / (T - 1);
      abar *= 1.0 - beta;
      grid.row(t).setConstant(abar);
    }
  } else {
    for (int t = 0; t <= T; ++t) grid.row(t).setConstant(base_alphabar(spec.kind, t, spec));
  }
  grid.row(0).setOnes();
  grid.row(T).setZero();
  return AlphaBarTable(std::move(grid));
}

double per_step_alpha(const AlphaBarTable& table, int t, int i) {
  if (t < 1 || t > table.steps()) throw ContractError("per_step_alpha: t must lie in [1, T]");
  const double prev = table(t - 1, i);
  if (prev < 1e-12) return 0.0;
  return table(t, i) / prev;
}

std::string encode_table(const AlphaBarTable& table) {
  binio::Writer w;
  w.bytes("ABAR");
  w.u32(kTableVersion);
  w.u32(static_cast<std::uint32_t>(table.steps()));
  w.u32(static_cast<std::uint32_t>(table.length()));
  for (int t = 0; t <= table.steps(); ++t) {
    for (int i = 0; i < table.length(); ++i) w.f32(static_cast<float>(table(t, i)));
  }
  return w.take();
}

AlphaBarTable decode_table(std::string_view bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4) != "ABAR") throw FormatError("alpha-bar table: bad magic", 0);
  if (const auto v = r.u32(); v != kTableVersion) {
    throw FormatError("alpha-bar table: unsupported version " + std::to_string(v), 4);
  }
  const auto T = r.u32();
  const auto L = r.u32();
  if (T < 1 || L < 1) throw FormatError("alpha-bar table: empty grid", r.offset());
  if (r.remaining() != static_cast<std::size_t>(T + 1) * L * 4) {
    throw FormatError("alpha-bar table: payload length mismatch", r.offset());
  }
  AlphaBarMatrix grid(T + 1, L);
  for (std::uint32_t t = 0; t <= T; ++t) {
    for (std::uint32_t i = 0; i < L; ++i) grid(t, i) = r.f32();
  }
  return AlphaBarTable(std::move(grid));
}

void write_table(const std::string& path, const AlphaBarTable& table, const ScheduleSpec& spec) {
  binio::write_file(path, encode_table(table));
  binio::write_file(path + ".txt", spec.describe() + "L=" + std::to_string(table.length()) + "\n");
}

AlphaBarTable read_table(const std::string& path) { return decode_table(binio::read_file(path)); }

}  // namespace infodiff::sched
