#pragma once

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sepsis/cli.hpp"
#include "sepsis/ingest.hpp"
#include "sepsis/rng.hpp"

namespace sepsis::testing {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("sepsis_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline FeatureSchema small_schema() { return FeatureSchema({"HR", "O2Sat", "Temp", "SBP", "Resp"}); }

inline void write_schema(const fs::path& path, const FeatureSchema& schema) {
  std::string text;
  for (const auto& n : schema.names()) text += n + "\n";
  write_text(path, text);
}

/// Synthetic per-patient PSV files: every third patient turns septic partway
/// through, and septic rows are shifted upward; cells go missing at random.
inline void write_corpus(const fs::path& dir, const FeatureSchema& schema, std::size_t patients,
                         std::uint64_t seed, double observe_p = 0.6) {
  fs::create_directories(dir);
  Rng rng(seed);
  for (std::size_t p = 0; p < patients; ++p) {
    PatientRecord r{fmt::format("p{:03}", p), {}};
    const std::size_t rows = 12 + rng.below(20);
    const std::size_t onset = p % 3 == 0 ? 4 + rng.below(rows - 4) : rows;
    for (std::size_t h = 0; h < rows; ++h) {
      HourlyRow row{static_cast<std::int64_t>(h), {}, h >= onset ? 1 : 0};
      for (std::size_t f = 0; f < schema.dim(); ++f) {
        if (rng.bernoulli(observe_p)) {
          row.values.push_back(std::round((rng.normal() + 1.5 * row.label) * 100) / 100);
        } else {
          row.values.push_back(std::nullopt);
        }
      }
      r.rows.push_back(std::move(row));
    }
    write_text(dir / (r.patient_id + ".psv"), to_psv(r, schema));
  }
}

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

/// Runs the CLI in-process.
inline CliResult run_cli(const std::vector<std::string>& args, const std::string& stdin_text = {}) {
  std::istringstream in(stdin_text);
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(args, in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Runs a shell command, returning its exit status and standard output.
inline CliResult run_shell(const std::string& command) {
  CliResult r;
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) {
    r.code = -1;
    return r;
  }
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace sepsis::testing
