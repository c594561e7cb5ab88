#pragma once

// Noise schedules: the standard retained-signal curves and the per-token
// entropy-aware variant
//
//   abar[t][i] = clamp(1 - t/T + lambda * sin(pi t / T) * e_i, 0, 1)
//
// where e_i is token i's self-information relative to its sentence.

#include <Eigen/Core>

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "infodiff/textcorpus.hpp"

namespace infodiff::sched {

enum class ScheduleKind { Linear, Cosine, Sqrt, MutualInfo, InfoAware };

// Accepts the CLI spellings linear, cosine, sqrt, mi, info.
ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view schedule_kind_name(ScheduleKind kind);

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::InfoAware;
  int steps = 200;
  double lambda = 0.25;
  double offset = 1e-4;  // s, sqrt and cosine only
  double beta_min = 1e-4;
  double beta_max = 0.02;
  bool enforce_monotone = true;

  // Throws ConfigError on T < 2, s outside [0, 0.1], negative lambda, or
  // lambda > 1/pi while monotonicity enforcement is on.
  void validate() const;
  std::string describe() const;
};

using AlphaBarMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// abar[t][i] for t in 0..T and positions i in 0..L-1.
class AlphaBarTable {
 public:
  AlphaBarTable() = default;
  explicit AlphaBarTable(AlphaBarMatrix grid) : grid_(std::move(grid)) {}

  int steps() const noexcept { return static_cast<int>(grid_.rows()) - 1; }
  int length() const noexcept { return static_cast<int>(grid_.cols()); }
  double operator()(int t, int i) const { return grid_(t, i); }
  const AlphaBarMatrix& grid() const noexcept { return grid_; }

  bool operator==(const AlphaBarTable& other) const { return grid_ == other.grid_; }

 private:
  AlphaBarMatrix grid_;
};

// Raw closed form for the non-entropy kinds (info-aware evaluates as
// mutual-info). Boundary values are not forced here.
double base_alphabar(ScheduleKind kind, int t, const ScheduleSpec& spec);

double lambda_weight(int t, int steps, double lambda);

// e_i = (H_i - mean) / (max - min); zero for reserved positions and when the
// sentence is flat.
std::vector<double> entropy_relative(const text::SentenceProfile& profile);
std::vector<double> entropy_relative(std::span<const double> bits, double mean, double max, double min);

AlphaBarTable info_aware_table(std::span<const double> relative_entropy, const ScheduleSpec& spec);

// Same curve at every position, boundaries forced to exactly 1 and 0. For
// the info-aware kind this is the e = 0 table.
AlphaBarTable uniform_table(const ScheduleSpec& spec, int length);

// abar[t][i] / abar[t-1][i]; 0 once abar[t-1][i] is below 1e-12.
double per_step_alpha(const AlphaBarTable& table, int t, int i);

// Binary export: "ABAR", u32 version, u32 T, u32 L, then (T+1) x L float32,
// all little-endian. A text sidecar at `path + ".txt"` records the spec.
void write_table(const std::string& path, const AlphaBarTable& table, const ScheduleSpec& spec);
AlphaBarTable read_table(const std::string& path);
std::string encode_table(const AlphaBarTable& table);
AlphaBarTable decode_table(std::string_view bytes);

}  // namespace infodiff::sched
