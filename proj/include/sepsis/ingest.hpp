#pragma once

// Per-patient PSV ingestion, dataset catalog and patient-level splitting.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "sepsis/error.hpp"
#include "sepsis/rng.hpp"

namespace sepsis {

inline constexpr std::string_view kLabelColumn = "SepsisLabel";
inline constexpr std::string_view kMissingToken = "NaN";

/// Ordered feature identifiers. The label column is carried separately.
class FeatureSchema {
 public:
  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw Error(Errc::BadConfig, "schema has no features");
    std::set<std::string_view> seen;
    for (const auto& n : names_) {
      if (n.empty()) throw Error(Errc::BadConfig, "schema contains an empty feature name");
      if (n == kLabelColumn) throw Error(Errc::BadConfig, "label column cannot be a feature");
      if (!seen.insert(n).second) throw Error(Errc::BadConfig, "duplicate feature name '" + n + "'");
    }
  }

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t dim() const noexcept { return names_.size(); }

  /// Stable identity of the feature list, stored in every derived artifact.
  std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& n : names_) {
      h.update(n);
      h.update("\n");
    }
    return h.digest();
  }

  bool operator==(const FeatureSchema&) const = default;

 private:
  std::vector<std::string> names_;
};

/// The 40 feature columns of the PhysioNet 2019 Challenge files.
inline FeatureSchema physionet_schema() {
  return FeatureSchema({"HR",          "O2Sat",     "Temp",      "SBP",         "MAP",
                        "DBP",         "Resp",      "EtCO2",     "BaseExcess",  "HCO3",
                        "FiO2",        "pH",        "PaCO2",     "SaO2",        "AST",
                        "BUN",         "Alkalinephos", "Calcium", "Chloride",   "Creatinine",
                        "Bilirubin_direct", "Glucose", "Lactate", "Magnesium",  "Phosphate",
                        "Potassium",   "Bilirubin_total", "TroponinI", "Hct",   "Hgb",
                        "PTT",         "WBC",       "Fibrinogen", "Platelets",  "Age",
                        "Gender",      "Unit1",     "Unit2",     "HospAdmTime", "ICULOS"});
}

/// Reads a schema file: one feature name per line, blank lines and '#' comments ignored.
inline FeatureSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open schema file " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t");
    names.push_back(line.substr(first, last - first + 1));
  }
  return FeatureSchema(std::move(names));
}

struct HourlyRow {
  std::int64_t hour = 0;
  std::vector<std::optional<double>> values;
  int label = 0;

  bool operator==(const HourlyRow&) const = default;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<HourlyRow> rows;

  bool operator==(const PatientRecord&) const = default;
};

namespace detail {

inline std::vector<std::string_view> split_pipes(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto bar = line.find('|', start);
    if (bar == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, bar - start));
    start = bar + 1;
  }
}

inline std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

inline std::optional<double> parse_cell(std::string_view token, std::size_t line_no) {
  if (token == kMissingToken) return std::nullopt;
  double value = 0.0;
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (token.empty() || ec != std::errc{} || ptr != end || !std::isfinite(value)) {
    throw Error(Errc::MalformedRow,
                fmt::format("line {}: unparsable numeric token '{}'", line_no, token));
  }
  return value;
}

inline int parse_label(std::string_view token, std::size_t line_no) {
  if (token == "0") return 0;
  if (token == "1") return 1;
  throw Error(Errc::BadLabel, fmt::format("line {}: label '{}' is not 0/1", line_no, token));
}

}  // namespace detail

/// Validates the header line against `schema` plus the trailing label column.
inline void check_psv_header(std::string_view header, const FeatureSchema& schema) {
  const auto cells = detail::split_pipes(detail::strip_cr(header));
  bool ok = cells.size() == schema.dim() + 1 && cells.back() == kLabelColumn;
  for (std::size_t i = 0; ok && i < schema.dim(); ++i) ok = cells[i] == schema.names()[i];
  if (!ok) {
    throw Error(Errc::HeaderMismatch,
                fmt::format("header '{}' does not match the {}-feature schema plus '{}'",
                            detail::strip_cr(header), schema.dim(), kLabelColumn));
  }
}

/// Parses one data line; `line_no` is only used in error messages.
inline HourlyRow parse_psv_row(std::string_view line, const FeatureSchema& schema,
                               std::int64_t hour, std::size_t line_no) {
  const auto cells = detail::split_pipes(detail::strip_cr(line));
  if (cells.size() != schema.dim() + 1) {
    throw Error(Errc::MalformedRow, fmt::format("line {}: expected {} columns, found {}", line_no,
                                                schema.dim() + 1, cells.size()));
  }
  HourlyRow row;
  row.hour = hour;
  row.values.reserve(schema.dim());
  for (std::size_t i = 0; i < schema.dim(); ++i) row.values.push_back(detail::parse_cell(cells[i], line_no));
  row.label = detail::parse_label(cells.back(), line_no);
  return row;
}

/// One HourlyRow per data line, hour = 0-based data line index.
inline PatientRecord parse_psv(std::istream& in, const FeatureSchema& schema,
                               std::string patient_id = {}) {
  PatientRecord record{std::move(patient_id), {}};
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::HeaderMismatch, "missing header line");
  check_psv_header(line, schema);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::strip_cr(line).empty()) continue;
    const auto hour = static_cast<std::int64_t>(record.rows.size());
    record.rows.push_back(parse_psv_row(line, schema, hour, line_no));
  }
  return record;
}

inline PatientRecord parse_psv(std::string_view text, const FeatureSchema& schema,
                               std::string patient_id = {}) {
  std::istringstream in{std::string(text)};
  return parse_psv(in, schema, std::move(patient_id));
}

/// Inverse of parse_psv (rows are written in order; hours are implied by position).
inline std::string to_psv(const PatientRecord& record, const FeatureSchema& schema) {
  std::string out;
  for (const auto& n : schema.names()) {
    out += n;
    out += '|';
  }
  out += kLabelColumn;
  out += '\n';
  for (const auto& row : record.rows) {
    for (const auto& v : row.values) {
      out += v ? fmt::format("{}", *v) : std::string(kMissingToken);
      out += '|';
    }
    out += row.label ? '1' : '0';
    out += '\n';
  }
  return out;
}

/// Loads every "*.psv" file in `dir`; patient_id = file stem; sorted by id.
inline std::vector<PatientRecord> load_dataset(const std::filesystem::path& dir,
                                               const FeatureSchema& schema) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(Errc::IoError, "not a directory: " + dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".psv") files.push_back(entry.path());
  }
  if (ec) throw Error(Errc::IoError, "cannot list " + dir.string() + ": " + ec.message());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem().string() < b.stem().string(); });

  std::vector<PatientRecord> records;
  records.reserve(files.size());
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot open " + file.string());
    try {
      records.push_back(parse_psv(in, schema, file.stem().string()));
    } catch (const Error& e) {
      throw Error(e.code(), file.filename().string() + ": " + e.what());
    }
  }
  return records;
}

struct PatientSplit {
  std::vector<PatientRecord> train;
  std::vector<PatientRecord> test;
};

/// Number of test patients for a given fraction: round(fraction * n).
inline std::size_t test_count(std::size_t n, double test_fraction) {
  return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
}

/// Patient-level seeded split; both halves come back sorted by patient_id.
template <typename Record>
std::pair<std::vector<Record>, std::vector<Record>> split_by_patient(std::vector<Record> items,
                                                                     double test_fraction,
                                                                     std::uint64_t seed) {
  if (items.empty()) throw Error(Errc::EmptyInput, "nothing to split");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(Errc::BadConfig, fmt::format("test_fraction {} outside (0,1)", test_fraction));
  }
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span(order));
  const auto n_test = test_count(items.size(), test_fraction);

  std::vector<bool> in_test(items.size(), false);
  for (std::size_t i = 0; i < n_test; ++i) in_test[order[i]] = true;
  std::pair<std::vector<Record>, std::vector<Record>> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    (in_test[i] ? out.second : out.first).push_back(std::move(items[i]));
  }
  return out;
}

inline PatientSplit split_patients(std::vector<PatientRecord> records, double test_fraction,
                                   std::uint64_t seed) {
  std::sort(records.begin(), records.end(),
            [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
  auto [train, test] = split_by_patient(std::move(records), test_fraction, seed);
  return {std::move(train), std::move(test)};
}

}  // namespace sepsis
