#pragma once

// Command-line orchestration: config loading, per-key overrides and the
// preprocess / train / grid-search / predict / stream / evaluate / stats commands.

#include <CLI11.hpp>
#include <fmt/core.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sepsis/error.hpp"
#include "sepsis/evalstats.hpp"
#include "sepsis/ingest.hpp"
#include "sepsis/model.hpp"
#include "sepsis/model_file.hpp"
#include "sepsis/pipeline.hpp"

namespace sepsis::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline int exit_code_for(Errc code) {
  switch (code) {
    case Errc::BadConfig: return kExitUsage;
    case Errc::NonFiniteInput:
    case Errc::NonFiniteLoss:
    case Errc::BadDomain: return kExitNumeric;
    default: return kExitData;
  }
}

struct RunConfig {
  fs::path data_dir;
  fs::path schema_path;  // empty: built-in 40-column layout
  fs::path output_dir = "out";
  fs::path train_samples_path;  // empty: <output_dir>/train_samples.csv
  fs::path test_samples_path;   // empty: <output_dir>/test_samples.csv
  fs::path norm_stats_path;     // empty: <output_dir>/norm_stats.txt
  fs::path model_path;          // empty: <output_dir>/model.bin
  PipelineConfig pipeline;
  TrainConfig train;
  GridSpec grid;
  double validation_fraction = 0.2;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  std::string stream_patient_id = "stream";
  std::string eval_dataset = "dataset";
  std::string eval_model = "End-to-End";
  fs::path stats_table;
  std::string stats_target = "End-to-End";
  bool stats_ties_win = true;

  fs::path or_default(const fs::path& p, std::string_view name) const { return p.empty() ? output_dir / name : p; }
  fs::path train_samples() const { return or_default(train_samples_path, "train_samples.csv"); }
  fs::path test_samples() const { return or_default(test_samples_path, "test_samples.csv"); }
  fs::path norm_stats() const { return or_default(norm_stats_path, "norm_stats.txt"); }
  fs::path model() const { return or_default(model_path, "model.bin"); }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] inline void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw Error(Errc::BadConfig, fmt::format("{}: '{}' is not {}", key, value, expected));
}

inline double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

inline std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

inline bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

inline std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto end = comma == std::string_view::npos ? v.size() : comma;
    if (const auto item = trim(v.substr(start, end - start)); !item.empty()) out.push_back(item);
    start = end + 1;
  }
  return out;
}

inline fs::path to_path(std::string_view v, const fs::path& base) {
  if (v.empty()) return {};
  fs::path p{std::string(v)};
  return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace detail

/// One configuration key: dotted name, default, help text and setter.
/// `base` is the directory relative paths resolve against (the config file's
/// directory for file values, the working directory for flags).
struct KeySpec {
  std::string_view name;
  std::string_view default_value;
  std::string_view help;
  void (*apply)(RunConfig&, std::string_view key, std::string_view value, const fs::path& base);
};

inline const std::vector<KeySpec>& key_specs() {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_path;
  using detail::to_u64;
  static const std::vector<KeySpec> specs{
      {"data_dir", "", "directory of per-patient .psv files",
       [](RunConfig& c, auto, auto v, const auto& b) { c.data_dir = to_path(v, b); }},
      {"schema_path", "", "feature names, one per line (empty: 40-column PhysioNet layout)",
       [](RunConfig& c, auto, auto v, const auto& b) { c.schema_path = to_path(v, b); }},
      {"output_dir", "out", "directory for all generated files",
       [](RunConfig& c, auto, auto v, const auto& b) { c.output_dir = to_path(v, b); }},
      {"train_samples_path", "", "training sample CSV (empty: <output_dir>/train_samples.csv)",
       [](RunConfig& c, auto, auto v, const auto& b) { c.train_samples_path = to_path(v, b); }},
      {"test_samples_path", "", "sample CSV for predict/evaluate (empty: <output_dir>/test_samples.csv)",
       [](RunConfig& c, auto, auto v, const auto& b) { c.test_samples_path = to_path(v, b); }},
      {"norm_stats_path", "", "normalization statistics (empty: <output_dir>/norm_stats.txt)",
       [](RunConfig& c, auto, auto v, const auto& b) { c.norm_stats_path = to_path(v, b); }},
      {"model_path", "", "model file (empty: <output_dir>/model.bin)",
       [](RunConfig& c, auto, auto v, const auto& b) { c.model_path = to_path(v, b); }},
      {"pipeline.threshold", "0.8", "completeness threshold in (0,1]",
       [](RunConfig& c, auto k, auto v, const auto&) { c.pipeline.completeness_threshold = to_double(k, v); }},
      {"pipeline.carry_fill_across_windows", "true", "keep last-known values across emitted windows",
       [](RunConfig& c, auto k, auto v, const auto&) { c.pipeline.carry_fill_across_windows = to_bool(k, v); }},
      {"pipeline.append_mask_channels", "false", "feed [values, mask] to the model",
       [](RunConfig& c, auto k, auto v, const auto&) { c.pipeline.append_mask_channels = to_bool(k, v); }},
      {"train.learning_rate", "0.0007", "SGD learning rate",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.learning_rate = to_double(k, v); }},
      {"train.epochs", "550", "training epochs",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.epochs = to_u64(k, v); }},
      {"train.batch_size", "32", "mini-batch size",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.batch_size = to_u64(k, v); }},
      {"train.dropout_p", "0.5", "dropout probability on hidden layers",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.dropout_p = to_double(k, v); }},
      {"train.seed", "0", "seed for initialization, shuffling and dropout",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.seed = to_u64(k, v); }},
      {"train.threshold", "0.5", "probability cutoff for a positive prediction",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.threshold = to_double(k, v); }},
      {"train.pretrain", "false", "initialize the encoder by reconstruction pretraining",
       [](RunConfig& c, auto k, auto v, const auto&) { c.train.pretrain = to_bool(k, v); }},
      {"grid.learning_rates", "0.0007,0.001", "comma-separated learning rates",
       [](RunConfig& c, auto k, auto v, const auto&) {
         c.grid.learning_rates.clear();
         for (auto item : detail::split_list(v)) c.grid.learning_rates.push_back(to_double(k, item));
       }},
      {"grid.epoch_counts", "550", "comma-separated epoch counts",
       [](RunConfig& c, auto k, auto v, const auto&) {
         c.grid.epoch_counts.clear();
         for (auto item : detail::split_list(v)) c.grid.epoch_counts.push_back(to_u64(k, item));
       }},
      {"grid.selection", "sensitivity_plus_ppv", "sensitivity_plus_ppv | accuracy | sensitivity | ppv",
       [](RunConfig& c, auto, auto v, const auto&) { c.grid.selection = parse_selection_rule(v); }},
      {"grid.validation_fraction", "0.2", "fraction of training patients held out for validation",
       [](RunConfig& c, auto k, auto v, const auto&) { c.validation_fraction = to_double(k, v); }},
      {"split.test_fraction", "0.2", "fraction of patients in the test split",
       [](RunConfig& c, auto k, auto v, const auto&) { c.test_fraction = to_double(k, v); }},
      {"split.seed", "0", "seed for patient-level splits",
       [](RunConfig& c, auto k, auto v, const auto&) { c.split_seed = to_u64(k, v); }},
      {"stream.patient_id", "stream", "patient id reported by the stream command",
       [](RunConfig& c, auto, auto v, const auto&) { c.stream_patient_id = std::string(v); }},
      {"evaluate.dataset", "dataset", "dataset name written to the metric row",
       [](RunConfig& c, auto, auto v, const auto&) { c.eval_dataset = std::string(v); }},
      {"evaluate.model", "End-to-End", "model name written to the metric row",
       [](RunConfig& c, auto, auto v, const auto&) { c.eval_model = std::string(v); }},
      {"stats.table", "", "metric-table CSV for the stats command",
       [](RunConfig& c, auto, auto v, const auto& b) { c.stats_table = to_path(v, b); }},
      {"stats.target", "End-to-End", "model compared against all others",
       [](RunConfig& c, auto, auto v, const auto&) { c.stats_target = std::string(v); }},
      {"stats.ties_win", "true", "count ties as wins in win/loss",
       [](RunConfig& c, auto k, auto v, const auto&) { c.stats_ties_win = to_bool(k, v); }},
  };
  return specs;
}

inline const KeySpec& find_key(std::string_view name) {
  for (const auto& spec : key_specs()) {
    if (spec.name == name) return spec;
  }
  throw Error(Errc::BadConfig, fmt::format("unknown config key '{}'", name));
}

inline void set_key(RunConfig& cfg, std::string_view key, std::string_view value, const fs::path& base = {}) {
  find_key(key).apply(cfg, key, detail::trim(value), base);
}

/// Parses "key = value" lines; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(Errc::BadConfig, fmt::format("config line {}: expected 'key = value'", line_no));
    }
    std::string key(detail::trim(line.substr(0, eq)));
    find_key(key);
    if (!seen.insert(key).second) throw Error(Errc::BadConfig, fmt::format("config line {}: duplicate key '{}'", line_no, key));
    entries.emplace_back(std::move(key), std::string(detail::trim(line.substr(eq + 1))));
  }
  return entries;
}

inline RunConfig default_config() {
  RunConfig cfg;
  for (const auto& spec : key_specs()) spec.apply(cfg, spec.name, spec.default_value, {});
  return cfg;
}

inline void validate(RunConfig& cfg) {
  cfg.pipeline.validate();
  cfg.train.append_mask_channels = cfg.pipeline.append_mask_channels;
  cfg.train.validate();
  auto fraction = [](std::string_view key, double v) {
    if (!(v > 0.0 && v < 1.0)) throw Error(Errc::BadConfig, fmt::format("{} = {} outside (0,1)", key, v));
  };
  fraction("split.test_fraction", cfg.test_fraction);
  fraction("grid.validation_fraction", cfg.validation_fraction);
}

// ---- file helpers ---------------------------------------------------------------------

inline std::string read_file(const fs::path& path, std::string_view what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, fmt::format("cannot open {} '{}'", what, path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

inline void require_file(const fs::path& path, std::string_view what) {
  std::error_code ec;
  if (path.empty() || !fs::is_regular_file(path, ec)) {
    throw Error(Errc::IoError, fmt::format("missing {} '{}'", what, path.string()));
  }
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::IoError, fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
}

inline std::string fixed4(double v) { return std::isnan(v) ? "nan" : fmt::format("{:.4f}", v); }

// ---- commands ---------------------------------------------------------------------------

struct Context {
  RunConfig cfg;
  bool quiet = false;
  std::istream& in;
  std::ostream& out;
  std::ostream& err;

  void info(std::string_view msg) const {
    if (!quiet) err << msg << '\n';
  }
  void print(std::string_view text) const {
    if (!quiet) out << text;
  }

  FeatureSchema schema() const {
    if (cfg.schema_path.empty()) return physionet_schema();
    require_file(cfg.schema_path, "schema file");
    return load_schema(cfg.schema_path);
  }

  std::vector<Sample> samples(const fs::path& path, const FeatureSchema& schema) const {
    std::istringstream text(read_file(path, "sample file"));
    try {
      return read_samples_csv(text, schema);
    } catch (const Error& e) {
      throw Error(e.code(), path.filename().string() + ": " + e.what());
    }
  }

  LoadedModel model(const FeatureSchema& schema) const {
    require_file(cfg.model(), "model file");
    return load_model(cfg.model(), schema.hash());
  }
};

inline std::string class_count_table(std::size_t train_patients, const ClassCounts& train, std::size_t test_patients,
                                 const ClassCounts& test) {
  std::string out = fmt::format("{:<6} {:>9} {:>14} {:>16} {:>16}\n", "Split", "Patients", "Total Samples",
                                "Sepsis Positive", "Sepsis Negative");
  out += fmt::format("{:<6} {:>9} {:>14} {:>16} {:>16}\n", "Train", train_patients, train.total, train.positive,
                     train.negative);
  out += fmt::format("{:<6} {:>9} {:>14} {:>16} {:>16}\n", "Test", test_patients, test.total, test.positive,
                     test.negative);
  return out;
}

/// Down-samples training patients, window-emits test patients, fits z-score
/// statistics on the training samples and writes everything to output_dir.
inline int cmd_preprocess(Context& ctx) {
  const auto& cfg = ctx.cfg;
  if (cfg.data_dir.empty()) throw Error(Errc::BadConfig, "data_dir is required for preprocess");
  PipelineConfig pipeline = cfg.pipeline;
  pipeline.schema = ctx.schema();

  auto records = load_dataset(cfg.data_dir, pipeline.schema);
  if (records.empty()) throw Error(Errc::EmptyInput, "no .psv files in " + cfg.data_dir.string());
  const auto split = split_patients(std::move(records), cfg.test_fraction, cfg.split_seed);

  std::vector<Sample> train_samples, test_samples;
  for (const auto& r : split.train) {
    auto s = downsample_training(r, pipeline);
    train_samples.insert(train_samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  for (const auto& r : split.test) {
    auto s = stream_record(r, pipeline);
    test_samples.insert(test_samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  if (train_samples.empty()) {
    throw Error(Errc::EmptyInput, "no training samples reach the completeness threshold");
  }
  const auto stats = fit_norm_stats(train_samples);
  const auto train_counts = count_classes(train_samples);
  const auto test_counts = count_classes(test_samples);

  const auto train_csv = write_samples_csv(normalize_all(std::move(train_samples), stats), pipeline.schema);
  const auto test_csv = write_samples_csv(normalize_all(std::move(test_samples), stats), pipeline.schema);
  const auto norm_text = write_norm_stats(stats, pipeline.schema, pipeline.completeness_threshold);

  std::string manifest = "# sepsis preprocess manifest\n";
  manifest += fmt::format("schema_hash = {:016x}\n", pipeline.schema.hash());
  manifest += fmt::format("features = {}\n", pipeline.schema.dim());
  manifest += fmt::format("pipeline.threshold = {}\n", pipeline.completeness_threshold);
  manifest += fmt::format("pipeline.carry_fill_across_windows = {}\n", pipeline.carry_fill_across_windows);
  manifest += fmt::format("split.test_fraction = {}\nsplit.seed = {}\n", cfg.test_fraction, cfg.split_seed);
  auto counts = [&](std::string_view split_name, std::size_t patients, const ClassCounts& c) {
    manifest += fmt::format("{0}.patients = {1}\n{0}.samples = {2}\n{0}.positive = {3}\n{0}.negative = {4}\n",
                            split_name, patients, c.total, c.positive, c.negative);
  };
  counts("train", split.train.size(), train_counts);
  counts("test", split.test.size(), test_counts);
  manifest += fmt::format("train_samples.fnv1a = {:016x}\n", fnv1a(train_csv));
  manifest += fmt::format("test_samples.fnv1a = {:016x}\n", fnv1a(test_csv));
  manifest += fmt::format("norm_stats.fnv1a = {:016x}\n", fnv1a(norm_text));

  ensure_dir(cfg.output_dir);
  write_file(cfg.train_samples(), train_csv);
  write_file(cfg.test_samples(), test_csv);
  write_file(cfg.norm_stats(), norm_text);
  write_file(cfg.output_dir / "preprocess_manifest.txt", manifest);

  ctx.print(class_count_table(split.train.size(), train_counts, split.test.size(), test_counts));
  ctx.info(fmt::format("wrote {}", cfg.output_dir.string()));
  return kExitOk;
}

inline int cmd_train(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto schema = ctx.schema();
  require_file(cfg.train_samples(), "training samples");
  require_file(cfg.norm_stats(), "normalization file");
  const auto norm_text = read_file(cfg.norm_stats(), "normalization file");
  {
    std::istringstream check(norm_text);
    read_norm_stats(check, schema);
  }
  const auto samples = ctx.samples(cfg.train_samples(), schema);
  const auto result = train(samples, cfg.train);
  for (const auto& w : result.history.warnings) ctx.err << "warning: " << w << '\n';

  const ModelMetadata meta{schema.hash(), fnv1a(norm_text), cfg.train.append_mask_channels};
  const auto bytes = serialize_model(result.network, meta);
  std::string history = "epoch,loss\n";
  for (std::size_t e = 0; e < result.history.epoch_loss.size(); ++e) {
    history += fmt::format("{},{:.17g}\n", e + 1, result.history.epoch_loss[e]);
  }
  std::string manifest = "# sepsis train manifest\n";
  manifest += fmt::format("samples = {}\n", samples.size());
  manifest += fmt::format("train.learning_rate = {}\ntrain.epochs = {}\ntrain.batch_size = {}\n",
                          cfg.train.learning_rate, cfg.train.epochs, cfg.train.batch_size);
  manifest += fmt::format("train.dropout_p = {}\ntrain.seed = {}\ntrain.pretrain = {}\n", cfg.train.dropout_p,
                          cfg.train.seed, cfg.train.pretrain);
  manifest += fmt::format("pipeline.append_mask_channels = {}\n", cfg.train.append_mask_channels);
  manifest += fmt::format("first_epoch_loss = {:.17g}\nlast_epoch_loss = {:.17g}\n", result.history.epoch_loss.front(),
                          result.history.epoch_loss.back());
  manifest += fmt::format("model.fnv1a = {:016x}\n", fnv1a(bytes));

  ensure_dir(cfg.output_dir);
  if (cfg.model().has_parent_path()) ensure_dir(cfg.model().parent_path());
  write_file(cfg.model(), bytes);
  write_file(cfg.output_dir / "train_history.csv", history);
  write_file(cfg.output_dir / "train_manifest.txt", manifest);
  ctx.print(fmt::format("trained on {} samples: loss {:.6f} -> {:.6f}\n", samples.size(),
                        result.history.epoch_loss.front(), result.history.epoch_loss.back()));
  ctx.info(fmt::format("wrote {}", cfg.model().string()));
  return kExitOk;
}

/// Holds out a patient-level validation split of the training samples and
/// scores every (learning rate, epochs) cell.
inline int cmd_grid(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto schema = ctx.schema();
  require_file(cfg.train_samples(), "training samples");
  const auto samples = ctx.samples(cfg.train_samples(), schema);
  if (samples.empty()) throw Error(Errc::EmptyInput, "no training samples");

  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.patient_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const auto [fit_ids, val_ids] = split_by_patient(ids, cfg.validation_fraction, cfg.split_seed);
  if (fit_ids.empty() || val_ids.empty()) {
    throw Error(Errc::EmptyInput, fmt::format("{} training patients cannot be split for validation", ids.size()));
  }
  const std::set<std::string> val_set(val_ids.begin(), val_ids.end());
  std::vector<Sample> fit, val;
  for (const auto& s : samples) (val_set.count(s.patient_id) ? val : fit).push_back(s);

  const auto result = grid_search(fit, val, cfg.grid, cfg.train);
  std::string scores = "learning_rate,epochs,seed,ppv,npv,accuracy,sensitivity,specificity,score\n";
  std::string table = fmt::format("{:>14} {:>7} {:>10} {:>10} {:>8}\n", "learning_rate", "epochs", "ppv",
                                  "sensitivity", "score");
  for (const auto& c : result.cells) {
    const auto& m = c.validation;
    scores += fmt::format("{},{},{},{},{},{},{},{},{:.6f}\n", c.learning_rate, c.epochs, c.seed, fixed4(m.ppv),
                          fixed4(m.npv), fixed4(m.accuracy), fixed4(m.sensitivity), fixed4(m.specificity), c.score);
    table += fmt::format("{:>14} {:>7} {:>10} {:>10} {:>8.4f}\n", c.learning_rate, c.epochs, fixed4(m.ppv),
                         fixed4(m.sensitivity), c.score);
  }
  const auto best = fmt::format("train.learning_rate = {}\ntrain.epochs = {}\n", result.best.learning_rate,
                                result.best.epochs);
  ensure_dir(cfg.output_dir);
  write_file(cfg.output_dir / "grid_scores.csv", scores);
  write_file(cfg.output_dir / "grid_best.txt", best);
  ctx.print(table + "best:\n" + best);
  return kExitOk;
}

inline int cmd_predict(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto schema = ctx.schema();
  require_file(cfg.test_samples(), "sample file");
  const auto loaded = ctx.model(schema);
  const auto samples = ctx.samples(cfg.test_samples(), schema);
  std::string out = "patient_id,hour,prob_sepsis,label\n";
  for (const auto& s : samples) {
    const auto p = predict(loaded.network, s, cfg.train.threshold, loaded.metadata.append_mask_channels);
    out += fmt::format("{},{},{:.17g},{}\n", s.patient_id, s.hour, p.prob_sepsis, p.label);
  }
  ensure_dir(cfg.output_dir);
  write_file(cfg.output_dir / "predictions.csv", out);
  ctx.info(fmt::format("wrote {} predictions to {}", samples.size(), (cfg.output_dir / "predictions.csv").string()));
  return kExitOk;
}

/// Reads a PSV header and then one row per tick from standard input; writes
/// "patient_id,hour,prob_sepsis,label" whenever a window completes.
inline int cmd_stream(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto schema = ctx.schema();
  require_file(cfg.norm_stats(), "normalization file");
  const auto loaded = ctx.model(schema);
  const auto norm_text = read_file(cfg.norm_stats(), "normalization file");
  if (fnv1a(norm_text) != loaded.metadata.norm_stats_hash) {
    throw Error(Errc::VersionMismatch, "normalization file does not match the model");
  }
  std::istringstream norm_in(norm_text);
  const auto stats = read_norm_stats(norm_in, schema).stats;
  PipelineConfig pipeline = cfg.pipeline;
  pipeline.schema = schema;

  std::string line;
  if (!std::getline(ctx.in, line)) throw Error(Errc::HeaderMismatch, "missing header line on standard input");
  check_psv_header(line, schema);
  auto state = SegmenterState::start(cfg.stream_patient_id, schema.dim());
  std::int64_t hour = 0;
  for (std::size_t line_no = 2; std::getline(ctx.in, line); ++line_no) {
    if (sepsis::detail::strip_cr(line).empty()) continue;
    const auto row = parse_psv_row(line, schema, hour++, line_no);
    if (auto sample = stream_window_step(state, row, pipeline)) {
      const auto p = predict(loaded.network, normalize(std::move(*sample), stats), cfg.train.threshold,
                             loaded.metadata.append_mask_channels);
      ctx.out << fmt::format("{},{},{:.17g},{}\n", cfg.stream_patient_id, row.hour, p.prob_sepsis, p.label);
      ctx.out.flush();
    }
  }
  return kExitOk;
}

inline std::string evaluation_report(const Evaluation& e, std::size_t samples) {
  std::string out = "# sepsis evaluation\n";
  out += fmt::format("samples = {}\n", samples);
  out += fmt::format("tp = {}\nfp = {}\nfn = {}\ntn = {}\n", e.confusion.tp, e.confusion.fp, e.confusion.fn,
                     e.confusion.tn);
  for (auto m : kAllMetrics) out += fmt::format("{} = {}\n", metric_name(m), fixed4(e.metrics.get(m)));
  return out;
}

inline int cmd_evaluate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto schema = ctx.schema();
  require_file(cfg.test_samples(), "sample file");
  const auto loaded = ctx.model(schema);
  const auto samples = ctx.samples(cfg.test_samples(), schema);
  const auto e = evaluate(loaded.network, samples, cfg.train.threshold, loaded.metadata.append_mask_channels);
  const auto report = evaluation_report(e, samples.size());
  const auto& m = e.metrics;
  const auto row = fmt::format("dataset,model,ppv,npv,accuracy,sensitivity,specificity\n{},{},{},{},{},{},{}\n",
                               cfg.eval_dataset, cfg.eval_model, fixed4(m.ppv), fixed4(m.npv), fixed4(m.accuracy),
                               fixed4(m.sensitivity), fixed4(m.specificity));
  ensure_dir(cfg.output_dir);
  write_file(cfg.output_dir / "evaluation.txt", report);
  write_file(cfg.output_dir / "metrics_row.csv", row);
  ctx.print(report);
  return kExitOk;
}

inline int cmd_stats(Context& ctx) {
  const auto& cfg = ctx.cfg;
  if (cfg.stats_table.empty()) throw Error(Errc::BadConfig, "stats.table is required for stats");
  require_file(cfg.stats_table, "metric table");
  std::istringstream in(read_file(cfg.stats_table, "metric table"));
  const auto table = read_metric_table(in);
  const auto report = format_stats_report(table, cfg.stats_target, cfg.stats_ties_win);
  ensure_dir(cfg.output_dir);
  write_file(cfg.output_dir / "stats_report.txt", report);
  ctx.print(report);
  return kExitOk;
}

// ---- entry point ------------------------------------------------------------------------

/// Runs the CLI on `args` (without the program name).
inline int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sepsis prediction pipeline: preprocessing, training, streaming inference and statistics",
               "sepsis_cli"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  app.add_option("--config", config_path, "key = value configuration file")->required();
  app.add_option("--seed", seed, "overrides train.seed and split.seed");
  app.add_flag("--quiet", quiet, "suppress informational output");

  const auto& specs = key_specs();
  std::vector<std::string> override_values(specs.size());
  std::vector<CLI::Option*> override_options;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto* opt = app.add_option("--" + std::string(specs[i].name), override_values[i], std::string(specs[i].help));
    opt->default_str(std::string(specs[i].default_value))->group("Config overrides");
    override_options.push_back(opt);
  }

  const std::vector<std::pair<std::string, int (*)(Context&)>> commands{
      {"preprocess", cmd_preprocess}, {"train", cmd_train},       {"grid-search", cmd_grid},
      {"predict", cmd_predict},       {"stream", cmd_stream},     {"evaluate", cmd_evaluate},
      {"stats", cmd_stats}};
  const std::map<std::string, std::string> descriptions{
      {"preprocess", "split patients, build normalized train/test samples"},
      {"train", "train the encoder-MLP on the training samples"},
      {"grid-search", "score learning-rate x epoch cells on a validation split"},
      {"predict", "write one probability per sample"},
      {"stream", "read PSV rows from stdin, print a prediction per completed window"},
      {"evaluate", "confusion matrix and metrics on a sample file"},
      {"stats", "Friedman / Wilcoxon / win-loss report for a metric table"}};
  for (const auto& [name, fn] : commands) app.add_subcommand(name, descriptions.at(name));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg = default_config();
    std::ifstream cfg_in(config_path, std::ios::binary);
    if (!cfg_in) throw Error(Errc::BadConfig, "cannot read config file '" + config_path + "'");
    const std::string text{std::istreambuf_iterator<char>(cfg_in), std::istreambuf_iterator<char>()};
    const auto base = fs::path(config_path).parent_path();
    for (const auto& [key, value] : parse_config_text(text)) set_key(cfg, key, value, base.empty() ? "." : base);
    if (seed) {
      cfg.train.seed = *seed;
      cfg.split_seed = *seed;
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (override_options[i]->count() > 0) set_key(cfg, specs[i].name, override_values[i]);
    }
    validate(cfg);

    Context ctx{std::move(cfg), quiet, in, out, err};
    for (const auto& [name, fn] : commands) {
      if (app.got_subcommand(name)) return fn(ctx);
    }
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cin, std::cout, std::cerr);
}

}  // namespace sepsis::cli
