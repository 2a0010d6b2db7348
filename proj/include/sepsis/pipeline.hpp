#pragma once

// Forward fill, completeness-gated segmentation (training down-sampling and the
// streaming window), z-score normalization, and the sample/stat file formats.

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "sepsis/error.hpp"
#include "sepsis/ingest.hpp"

namespace sepsis {

struct PipelineConfig {
  FeatureSchema schema = physionet_schema();
  double completeness_threshold = 0.8;
  /// When false, last-known values are dropped at every emission as well.
  bool carry_fill_across_windows = true;
  /// When true, the model input is [values, mask] (2D wide) instead of values.
  bool append_mask_channels = false;

  void validate() const {
    if (!(completeness_threshold > 0.0 && completeness_threshold <= 1.0)) {
      throw Error(Errc::BadConfig,
                  fmt::format("completeness threshold {} outside (0,1]", completeness_threshold));
    }
  }
};

/// Smallest number of distinct observed features that meets `threshold` of `dim`.
inline std::size_t required_feature_count(std::size_t dim, double threshold) {
  const double exact = threshold * static_cast<double>(dim);
  // Tolerate representation error such as 0.8 * 5 = 4.000000000000001.
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

struct Sample {
  std::vector<double> values;
  std::vector<bool> mask;  // true = a value was available (observed, possibly carried forward)
  int label = 0;
  std::string patient_id;
  std::int64_t hour = 0;

  bool operator==(const Sample&) const = default;
};

/// Per-patient accumulation state shared by the forward fill and the window.
struct SegmenterState {
  std::string patient_id;
  std::vector<std::optional<double>> last_known;
  std::vector<bool> observed_in_window;
  std::size_t observed_count = 0;
  std::int64_t window_start_hour = 0;
  std::optional<std::int64_t> last_hour;

  static SegmenterState start(std::string patient_id, std::size_t dim) {
    SegmenterState s;
    s.patient_id = std::move(patient_id);
    s.last_known.assign(dim, std::nullopt);
    s.observed_in_window.assign(dim, false);
    return s;
  }

  std::size_t dim() const noexcept { return last_known.size(); }
};

/// In-place forward fill of one row into `state`.
inline void consume_row(SegmenterState& state, const HourlyRow& row) {
  if (row.values.size() != state.dim()) {
    throw Error(Errc::DimensionMismatch,
                fmt::format("row has {} values, state expects {}", row.values.size(), state.dim()));
  }
  if (state.last_hour && row.hour <= *state.last_hour) {
    throw Error(Errc::OutOfOrderRow, fmt::format("patient '{}': hour {} after hour {}",
                                                 state.patient_id, row.hour, *state.last_hour));
  }
  if (state.observed_count == 0) state.window_start_hour = row.hour;
  for (std::size_t i = 0; i < row.values.size(); ++i) {
    if (!row.values[i]) continue;
    state.last_known[i] = row.values[i];
    if (!state.observed_in_window[i]) {
      state.observed_in_window[i] = true;
      ++state.observed_count;
    }
  }
  state.last_hour = row.hour;
}

inline SegmenterState forward_fill_step(SegmenterState state, const HourlyRow& row) {
  consume_row(state, row);
  return state;
}

/// Fraction of features observed (raw, not carried) in the current window.
inline double completeness(const SegmenterState& state) {
  if (state.dim() == 0) return 0.0;
  return static_cast<double>(state.observed_count) / static_cast<double>(state.dim());
}

/// Zero-filled snapshot of the state, labelled with the emitting row.
inline Sample snapshot(const SegmenterState& state, const HourlyRow& row) {
  Sample s;
  s.values.resize(state.dim());
  s.mask.resize(state.dim());
  for (std::size_t i = 0; i < state.dim(); ++i) {
    s.mask[i] = state.last_known[i].has_value();
    s.values[i] = state.last_known[i].value_or(0.0);
  }
  s.label = row.label;
  s.patient_id = state.patient_id;
  s.hour = row.hour;
  return s;
}

/// Consumes one row; returns a sample exactly when the window first reaches the
/// completeness threshold, then clears the window.
inline std::optional<Sample> stream_window_step(SegmenterState& state, const HourlyRow& row,
                                                const PipelineConfig& cfg) {
  consume_row(state, row);
  if (state.observed_count < required_feature_count(state.dim(), cfg.completeness_threshold)) {
    return std::nullopt;
  }
  Sample out = snapshot(state, row);
  state.observed_in_window.assign(state.dim(), false);
  state.observed_count = 0;
  if (!cfg.carry_fill_across_windows) state.last_known.assign(state.dim(), std::nullopt);
  return out;
}

/// Training-time down-sampling over a whole record. Written as a direct scan so
/// that it can be checked against the incremental stream_window_step.
inline std::vector<Sample> downsample_training(const PatientRecord& record,
                                               const PipelineConfig& cfg) {
  cfg.validate();
  std::vector<Sample> samples;
  if (record.rows.empty()) return samples;
  const std::size_t dim = record.rows.front().values.size();
  const std::size_t needed = required_feature_count(dim, cfg.completeness_threshold);

  std::vector<std::optional<double>> carried(dim);
  std::vector<bool> seen(dim, false);
  std::size_t seen_count = 0;
  std::optional<std::int64_t> previous_hour;
  for (const auto& row : record.rows) {
    if (row.values.size() != dim) {
      throw Error(Errc::DimensionMismatch, fmt::format("patient '{}': ragged rows", record.patient_id));
    }
    if (previous_hour && row.hour <= *previous_hour) {
      throw Error(Errc::OutOfOrderRow, fmt::format("patient '{}': hours not increasing", record.patient_id));
    }
    previous_hour = row.hour;
    for (std::size_t i = 0; i < dim; ++i) {
      if (!row.values[i]) continue;
      carried[i] = row.values[i];
      if (!seen[i]) seen_count += 1;
      seen[i] = true;
    }
    if (seen_count < needed) continue;

    Sample s;
    s.patient_id = record.patient_id;
    s.hour = row.hour;
    s.label = row.label;
    for (std::size_t i = 0; i < dim; ++i) {
      s.values.push_back(carried[i] ? *carried[i] : 0.0);
      s.mask.push_back(carried[i].has_value());
    }
    samples.push_back(std::move(s));
    seen.assign(dim, false);
    seen_count = 0;
    if (!cfg.carry_fill_across_windows) carried.assign(dim, std::nullopt);
  }
  return samples;
}

/// Test-time counterpart: feeds the record row by row through the window.
inline std::vector<Sample> stream_record(const PatientRecord& record, const PipelineConfig& cfg) {
  cfg.validate();
  std::vector<Sample> out;
  if (record.rows.empty()) return out;
  auto state = SegmenterState::start(record.patient_id, record.rows.front().values.size());
  for (const auto& row : record.rows) {
    if (auto s = stream_window_step(state, row, cfg)) out.push_back(std::move(*s));
  }
  return out;
}

inline constexpr double kStdFloor = 1e-8;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::size_t> count;

  std::size_t dim() const noexcept { return mean.size(); }
  bool operator==(const NormStats&) const = default;
};

/// Per-feature mean and population std over observed (mask = true) entries.
/// Unobserved features get (0, 1); zero-variance features keep their mean with std 1.
inline NormStats fit_norm_stats(const std::vector<Sample>& samples) {
  if (samples.empty()) throw Error(Errc::EmptyInput, "cannot fit normalization on zero samples");
  const std::size_t dim = samples.front().values.size();
  NormStats stats{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0),
                  std::vector<std::size_t>(dim, 0)};
  std::vector<double> sum(dim, 0.0);
  for (const auto& s : samples) {
    if (s.values.size() != dim || s.mask.size() != dim) {
      throw Error(Errc::DimensionMismatch, "samples of differing width");
    }
    for (std::size_t i = 0; i < dim; ++i) {
      if (!s.mask[i]) continue;
      sum[i] += s.values[i];
      stats.count[i] += 1;
    }
  }
  std::vector<double> sq(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    if (stats.count[i] > 0) stats.mean[i] = sum[i] / static_cast<double>(stats.count[i]);
  }
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < dim; ++i) {
      if (!s.mask[i]) continue;
      const double d = s.values[i] - stats.mean[i];
      sq[i] += d * d;
    }
  }
  for (std::size_t i = 0; i < dim; ++i) {
    if (stats.count[i] == 0) continue;
    const double sd = std::sqrt(sq[i] / static_cast<double>(stats.count[i]));
    stats.std[i] = sd == 0.0 ? 1.0 : std::max(sd, kStdFloor);
  }
  return stats;
}

/// Z-scores observed entries and pins unobserved ones to exactly 0.
/// Apply once; the result is not a fixed point.
inline Sample normalize(Sample sample, const NormStats& stats) {
  if (sample.values.size() != stats.dim() || sample.mask.size() != stats.dim()) {
    throw Error(Errc::DimensionMismatch,
                fmt::format("sample width {} vs stats width {}", sample.values.size(), stats.dim()));
  }
  for (std::size_t i = 0; i < stats.dim(); ++i) {
    sample.values[i] = sample.mask[i] ? (sample.values[i] - stats.mean[i]) / stats.std[i] : 0.0;
  }
  return sample;
}

inline std::vector<Sample> normalize_all(std::vector<Sample> samples, const NormStats& stats) {
  for (auto& s : samples) s = normalize(std::move(s), stats);
  return samples;
}

/// The network input vector for a sample.
inline std::vector<double> model_input(const Sample& sample, bool append_mask_channels) {
  std::vector<double> x = sample.values;
  if (append_mask_channels) {
    for (bool m : sample.mask) x.push_back(m ? 1.0 : 0.0);
  }
  return x;
}

struct ClassCounts {
  std::size_t total = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

inline ClassCounts count_classes(const std::vector<Sample>& samples) {
  ClassCounts c;
  for (const auto& s : samples) {
    ++c.total;
    (s.label ? c.positive : c.negative) += 1;
  }
  return c;
}

// ---- text formats -----------------------------------------------------------

inline std::string write_norm_stats(const NormStats& stats, const FeatureSchema& schema,
                                    double threshold) {
  if (stats.dim() != schema.dim()) throw Error(Errc::DimensionMismatch, "stats/schema width");
  std::string out = fmt::format("# sepsis-normstats v1 schema_hash={:016x} threshold={} features={}\n",
                                schema.hash(), threshold, schema.dim());
  for (std::size_t i = 0; i < stats.dim(); ++i) {
    out += fmt::format("{} {} {} {}\n", schema.names()[i], stats.mean[i], stats.std[i], stats.count[i]);
  }
  return out;
}

struct NormStatsFile {
  NormStats stats;
  double threshold = 0.0;
};

inline NormStatsFile read_norm_stats(std::istream& in, const FeatureSchema& schema) {
  std::string header;
  if (!std::getline(in, header)) throw Error(Errc::CorruptFile, "empty normalization file");
  unsigned long long hash = 0;
  double threshold = 0.0;
  std::size_t features = 0;
  if (std::sscanf(header.c_str(), "# sepsis-normstats v1 schema_hash=%llx threshold=%lf features=%zu",
                  &hash, &threshold, &features) != 3) {
    throw Error(Errc::CorruptFile, "bad normalization header '" + header + "'");
  }
  if (hash != schema.hash() || features != schema.dim()) {
    throw Error(Errc::VersionMismatch, "normalization file was fitted for a different schema");
  }
  NormStatsFile file;
  file.threshold = threshold;
  for (std::size_t i = 0; i < features; ++i) {
    std::string name;
    double mean = 0.0, sd = 0.0;
    std::size_t count = 0;
    if (!(in >> name >> mean >> sd >> count) || name != schema.names()[i]) {
      throw Error(Errc::CorruptFile, fmt::format("bad normalization line {}", i + 2));
    }
    file.stats.mean.push_back(mean);
    file.stats.std.push_back(sd);
    file.stats.count.push_back(count);
  }
  return file;
}

/// CSV: patient_id,hour,label,<D values>,<D mask bits named mask_<feature>>.
inline std::string write_samples_csv(const std::vector<Sample>& samples, const FeatureSchema& schema) {
  std::string out = "patient_id,hour,label";
  for (const auto& n : schema.names()) out += "," + n;
  for (const auto& n : schema.names()) out += ",mask_" + n;
  out += '\n';
  for (const auto& s : samples) {
    if (s.values.size() != schema.dim()) throw Error(Errc::DimensionMismatch, "sample/schema width");
    out += fmt::format("{},{},{}", s.patient_id, s.hour, s.label);
    for (double v : s.values) out += fmt::format(",{}", v);
    for (bool m : s.mask) out += m ? ",1" : ",0";
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> read_samples_csv(std::istream& in, const FeatureSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::CorruptFile, "empty sample file");
  std::string expected = "patient_id,hour,label";
  for (const auto& n : schema.names()) expected += "," + n;
  for (const auto& n : schema.names()) expected += ",mask_" + n;
  if (detail::strip_cr(line) != expected) throw Error(Errc::HeaderMismatch, "sample file header does not match schema");

  const std::size_t dim = schema.dim();
  std::vector<Sample> samples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view text = detail::strip_cr(line);
    if (text.empty()) continue;
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (auto comma = text.find(','); comma != std::string_view::npos; comma = text.find(',', start)) {
      cells.push_back(text.substr(start, comma - start));
      start = comma + 1;
    }
    cells.push_back(text.substr(start));
    if (cells.size() != 3 + 2 * dim) {
      throw Error(Errc::MalformedRow, fmt::format("sample line {}: {} cells", line_no, cells.size()));
    }
    Sample s;
    s.patient_id = std::string(cells[0]);
    const auto hour = detail::parse_cell(cells[1], line_no);
    if (!hour) throw Error(Errc::MalformedRow, fmt::format("sample line {}: missing hour", line_no));
    s.hour = static_cast<std::int64_t>(*hour);
    s.label = detail::parse_label(cells[2], line_no);
    for (std::size_t i = 0; i < dim; ++i) {
      const auto v = detail::parse_cell(cells[3 + i], line_no);
      if (!v) throw Error(Errc::MalformedRow, fmt::format("sample line {}: NaN value", line_no));
      s.values.push_back(*v);
    }
    for (std::size_t i = 0; i < dim; ++i) {
      const auto bit = cells[3 + dim + i];
      if (bit != "0" && bit != "1") throw Error(Errc::MalformedRow, fmt::format("sample line {}: bad mask bit", line_no));
      s.mask.push_back(bit == "1");
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace sepsis
