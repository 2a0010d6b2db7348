#pragma once

// Threshold metrics, win/loss tabulation, the tie-corrected Friedman test,
// the chi-square survival function and the Wilcoxon signed-rank test.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw Error(Errc::LengthMismatch, "predictions vs labels");
  if (predictions.empty()) throw Error(Errc::EmptyInput, "no predictions");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool y = labels[i] != 0;
    if (p && y) ++cm.tp;
    else if (p) ++cm.fp;
    else if (y) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

enum class Metric : std::size_t { PPV = 0, NPV, Accuracy, Sensitivity, Specificity };
inline constexpr std::array kAllMetrics{Metric::PPV, Metric::NPV, Metric::Accuracy, Metric::Sensitivity,
                                        Metric::Specificity};

inline std::string_view metric_name(Metric m) {
  constexpr std::array<std::string_view, 5> names{"PPV", "NPV", "Accuracy", "Sensitivity", "Specificity"};
  return names[static_cast<std::size_t>(m)];
}

/// Rates in percent. Undefined rates (0/0) are NaN, never 0.
struct Metrics {
  double ppv = 0.0;
  double npv = 0.0;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;

  double get(Metric m) const {
    switch (m) {
      case Metric::PPV: return ppv;
      case Metric::NPV: return npv;
      case Metric::Accuracy: return accuracy;
      case Metric::Sensitivity: return sensitivity;
      case Metric::Specificity: return specificity;
    }
    return std::numeric_limits<double>::quiet_NaN();
  }
};

namespace detail {
inline double percent(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::numeric_limits<double>::quiet_NaN();
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline Metrics metrics(const ConfusionMatrix& cm) {
  return {detail::percent(cm.tp, cm.tp + cm.fp), detail::percent(cm.tn, cm.tn + cm.fn),
          detail::percent(cm.tp + cm.tn, cm.total()), detail::percent(cm.tp, cm.tp + cm.fn),
          detail::percent(cm.tn, cm.tn + cm.fp)};
}

/// Dataset x model grid of every metric.
class MetricTable {
 public:
  const std::vector<std::string>& datasets() const noexcept { return datasets_; }
  const std::vector<std::string>& models() const noexcept { return models_; }

  void set(const std::string& dataset, const std::string& model, const Metrics& m) {
    cells_[{index_of(datasets_, dataset, true), index_of(models_, model, true)}] = m;
  }

  const Metrics& at(std::size_t dataset, std::size_t model) const {
    const auto it = cells_.find({dataset, model});
    if (it == cells_.end()) {
      throw Error(Errc::IncompleteGrid,
                  fmt::format("no values for ({}, {})", datasets_.at(dataset), models_.at(model)));
    }
    return it->second;
  }

  std::size_t model_index(std::string_view model) const {
    const auto it = std::find(models_.begin(), models_.end(), model);
    if (it == models_.end()) throw Error(Errc::UnknownModel, fmt::format("model '{}' not in table", model));
    return static_cast<std::size_t>(it - models_.begin());
  }

  /// n datasets x k models for one metric; throws IncompleteGrid on holes.
  std::vector<std::vector<double>> grid(Metric metric) const {
    std::vector<std::vector<double>> g(datasets_.size(), std::vector<double>(models_.size()));
    for (std::size_t d = 0; d < datasets_.size(); ++d) {
      for (std::size_t m = 0; m < models_.size(); ++m) g[d][m] = at(d, m).get(metric);
    }
    return g;
  }

  bool complete() const { return cells_.size() == datasets_.size() * models_.size(); }

 private:
  static std::size_t index_of(std::vector<std::string>& names, const std::string& name, bool insert) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it != names.end()) return static_cast<std::size_t>(it - names.begin());
    if (!insert) throw Error(Errc::UnknownModel, name);
    names.push_back(name);
    return names.size() - 1;
  }

  std::vector<std::string> datasets_;
  std::vector<std::string> models_;
  std::map<std::pair<std::size_t, std::size_t>, Metrics> cells_;
};

/// Reads "dataset,model,ppv,npv,accuracy,sensitivity,specificity" (percent).
inline MetricTable read_metric_table(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::CorruptFile, "empty metric table");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "dataset,model,ppv,npv,accuracy,sensitivity,specificity") {
    throw Error(Errc::HeaderMismatch, "metric table header '" + line + "'");
  }
  MetricTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (auto comma = line.find(','); comma != std::string::npos; comma = line.find(',', start)) {
      cells.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    cells.push_back(line.substr(start));
    if (cells.size() != 7) throw Error(Errc::MalformedRow, fmt::format("metric table line {}", line_no));
    std::array<double, 5> v{};
    for (std::size_t i = 0; i < 5; ++i) {
      try {
        std::size_t used = 0;
        v[i] = std::stod(cells[2 + i], &used);
        if (used != cells[2 + i].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw Error(Errc::MalformedRow, fmt::format("metric table line {}: bad number '{}'", line_no, cells[2 + i]));
      }
    }
    table.set(cells[0], cells[1], {v[0], v[1], v[2], v[3], v[4]});
  }
  if (!table.complete()) throw Error(Errc::IncompleteGrid, "metric table has missing (dataset, model) cells");
  return table;
}

struct WinLoss {
  std::size_t wins = 0;
  std::size_t losses = 0;
};

/// Counts, over every (dataset, other model) pair, whether the target is at
/// least as good (win; ties count as wins unless `ties_win` is false).
inline WinLoss win_loss(const MetricTable& table, std::string_view target_model, Metric metric,
                        bool ties_win = true) {
  const auto target = table.model_index(target_model);
  const auto g = table.grid(metric);
  WinLoss wl;
  for (const auto& row : g) {
    for (std::size_t m = 0; m < row.size(); ++m) {
      if (m == target) continue;
      const bool win = ties_win ? row[target] >= row[m] : row[target] > row[m];
      (win ? wl.wins : wl.losses) += 1;
    }
  }
  return wl;
}

/// Ascending ranks (1 = smallest), averaging tied positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Sizes of the groups of tied values (only groups larger than one).
inline std::vector<std::size_t> tie_groups(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> groups;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    if (j > i) groups.push_back(j - i + 1);
    i = j + 1;
  }
  return groups;
}

namespace detail {
inline void check_grid(const std::vector<std::vector<double>>& grid) {
  if (grid.size() < 1 || grid.front().size() < 2) throw Error(Errc::IncompleteGrid, "grid too small");
  for (const auto& row : grid) {
    if (row.size() != grid.front().size()) throw Error(Errc::IncompleteGrid, "ragged grid");
    for (double v : row) {
      if (std::isnan(v)) throw Error(Errc::IncompleteGrid, "grid contains an undefined value");
    }
  }
}
}  // namespace detail

/// Rank sums R_j per model (rows = datasets, columns = models).
inline std::vector<double> rank_sums(const std::vector<std::vector<double>>& grid) {
  detail::check_grid(grid);
  std::vector<double> sums(grid.front().size(), 0.0);
  for (const auto& row : grid) {
    const auto r = average_ranks(row);
    for (std::size_t j = 0; j < r.size(); ++j) sums[j] += r[j];
  }
  return sums;
}

inline std::vector<double> mean_ranks(const std::vector<std::vector<double>>& grid) {
  auto sums = rank_sums(grid);
  for (auto& s : sums) s /= static_cast<double>(grid.size());
  return sums;
}

// ---- chi-square survival function --------------------------------------------

namespace detail {

// Regularized lower gamma P(a, x) by its power series; good for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper gamma Q(a, x) by Lentz's continued fraction; x >= a + 1.
inline double gamma_q_continued_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Regularized upper incomplete gamma Q(a, x).
inline double gamma_q(double a, double x) {
  if (!(a > 0.0) || !(x >= 0.0)) throw Error(Errc::BadDomain, fmt::format("gamma_q({}, {})", a, x));
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_continued_fraction(a, x);
}

/// Upper-tail probability of the chi-square distribution with `df` degrees of freedom.
inline double chi2_sf(double x, int df) {
  if (df < 1) throw Error(Errc::BadDomain, fmt::format("df {} < 1", df));
  if (!(x >= 0.0) || !std::isfinite(x)) throw Error(Errc::BadDomain, fmt::format("x {} not in [0, inf)", x));
  return std::clamp(gamma_q(0.5 * df, 0.5 * x), 0.0, 1.0);
}

// ---- Friedman ------------------------------------------------------------------

struct FriedmanResult {
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
  std::vector<double> rank_sums;
  bool tie_corrected = false;
};

/// Friedman rank test over n datasets (rows) x k models (columns), with the
/// statistic divided by 1 - sum(t^3 - t) / (n k (k^2 - 1)).
inline FriedmanResult friedman(const std::vector<std::vector<double>>& grid) {
  detail::check_grid(grid);
  const auto n = static_cast<double>(grid.size());
  const auto k = static_cast<double>(grid.front().size());
  if (grid.size() < 2) throw Error(Errc::IncompleteGrid, "Friedman needs at least two datasets");

  FriedmanResult r;
  r.df = static_cast<int>(grid.front().size()) - 1;
  r.rank_sums = rank_sums(grid);
  double sum_sq = 0.0;
  for (double s : r.rank_sums) sum_sq += s * s;
  const double raw = 12.0 / (n * k * (k + 1.0)) * sum_sq - 3.0 * n * (k + 1.0);

  double tie_term = 0.0;
  for (const auto& row : grid) {
    for (auto t : tie_groups(row)) {
      const auto tt = static_cast<double>(t);
      tie_term += tt * tt * tt - tt;
    }
  }
  const double correction = 1.0 - tie_term / (n * k * (k * k - 1.0));
  r.tie_corrected = tie_term > 0.0;
  if (correction <= 1e-12) {
    r.statistic = 0.0;
    r.p_value = 1.0;
    return r;
  }
  r.statistic = std::max(0.0, raw / correction);
  r.p_value = chi2_sf(r.statistic, r.df);
  return r;
}

// ---- Wilcoxon signed-rank -----------------------------------------------------------

inline constexpr std::size_t kWilcoxonExactLimit = 25;

struct WilcoxonResult {
  double w_statistic = 0.0;   // min(W+, W-)
  double w_plus = 0.0;
  std::size_t n_effective = 0;
  double p_two_sided = 1.0;
  bool exact = true;
};

/// Nonzero differences x - y with their average ranks of |d|.
struct SignedRanks {
  std::vector<double> differences;
  std::vector<double> ranks;
};

inline SignedRanks signed_ranks(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::LengthMismatch, "paired vectors differ in length");
  SignedRanks sr;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    if (d != 0.0) sr.differences.push_back(d);
  }
  std::vector<double> magnitude(sr.differences.size());
  for (std::size_t i = 0; i < magnitude.size(); ++i) magnitude[i] = std::abs(sr.differences[i]);
  sr.ranks = average_ranks(magnitude);
  return sr;
}

inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.empty()) throw Error(Errc::LengthMismatch, "need at least one pair");
  const auto sr = signed_ranks(x, y);
  WilcoxonResult r;
  r.n_effective = sr.differences.size();
  if (r.n_effective == 0) return r;

  // Average ranks are multiples of 1/2, so doubled ranks are integers.
  std::vector<std::size_t> doubled(r.n_effective);
  std::size_t doubled_total = 0;
  std::size_t doubled_plus = 0;
  for (std::size_t i = 0; i < r.n_effective; ++i) {
    doubled[i] = static_cast<std::size_t>(std::llround(2.0 * sr.ranks[i]));
    doubled_total += doubled[i];
    if (sr.differences[i] > 0.0) doubled_plus += doubled[i];
  }
  r.w_plus = 0.5 * static_cast<double>(doubled_plus);
  const double w_minus = 0.5 * static_cast<double>(doubled_total - doubled_plus);
  r.w_statistic = std::min(r.w_plus, w_minus);

  if (r.n_effective <= kWilcoxonExactLimit) {
    // counts[s] = number of sign assignments whose doubled W+ equals s.
    std::vector<std::uint64_t> counts(doubled_total + 1, 0);
    counts[0] = 1;
    std::size_t reach = 0;
    for (auto rank : doubled) {
      reach += rank;
      for (std::size_t s = reach; s >= rank; --s) {
        counts[s] += counts[s - rank];
        if (s == rank) break;
      }
    }
    std::uint64_t at_most = 0, at_least = 0;
    for (std::size_t s = 0; s <= doubled_total; ++s) {
      if (s <= doubled_plus) at_most += counts[s];
      if (s >= doubled_plus) at_least += counts[s];
    }
    const double assignments = std::ldexp(1.0, static_cast<int>(r.n_effective));
    r.p_two_sided = std::min(1.0, 2.0 * static_cast<double>(std::min(at_most, at_least)) / assignments);
    return r;
  }

  r.exact = false;
  const auto n = static_cast<double>(r.n_effective);
  double tie_term = 0.0;
  std::vector<double> magnitude;
  for (double d : sr.differences) magnitude.push_back(std::abs(d));
  for (auto t : tie_groups(magnitude)) {
    const auto tt = static_cast<double>(t);
    tie_term += tt * tt * tt - tt;
  }
  const double mean = n * (n + 1.0) / 4.0;
  const double variance = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
  if (variance <= 0.0) return r;
  const double deviation = std::max(0.0, std::abs(r.w_plus - mean) - 0.5);
  const double z = deviation / std::sqrt(variance);
  r.p_two_sided = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

// ---- report -----------------------------------------------------------------------

struct MetricSummary {
  Metric metric = Metric::PPV;
  WinLoss win_loss;
  FriedmanResult friedman;
  std::vector<double> mean_ranks;
  WilcoxonResult pooled_wilcoxon;  // target vs every (dataset, other model) cell
};

inline MetricSummary summarize_metric(const MetricTable& table, std::string_view target, Metric metric,
                                      bool ties_win = true) {
  MetricSummary s;
  s.metric = metric;
  s.win_loss = win_loss(table, target, metric, ties_win);
  const auto g = table.grid(metric);
  s.friedman = friedman(g);
  s.mean_ranks = mean_ranks(g);
  const auto t = table.model_index(target);
  std::vector<double> mine, theirs;
  for (const auto& row : g) {
    for (std::size_t m = 0; m < row.size(); ++m) {
      if (m == t) continue;
      mine.push_back(row[t]);
      theirs.push_back(row[m]);
    }
  }
  s.pooled_wilcoxon = wilcoxon_signed_rank(mine, theirs);
  return s;
}

/// Plain-text report laid out like a dataset x model comparison table followed
/// by win/loss, p-value and F-rank rows, plus Wilcoxon post hoc tests.
inline std::string format_stats_report(const MetricTable& table, std::string_view target, bool ties_win = true) {
  std::string out;
  out += fmt::format("{:<22}{:<16}", "Dataset", "Model");
  for (auto m : kAllMetrics) out += fmt::format("{:>16}", fmt::format("{}(%)", metric_name(m)));
  out += '\n';
  for (std::size_t d = 0; d < table.datasets().size(); ++d) {
    for (std::size_t k = 0; k < table.models().size(); ++k) {
      out += fmt::format("{:<22}{:<16}", k == 0 ? table.datasets()[d] : "", table.models()[k]);
      for (auto m : kAllMetrics) out += fmt::format("{:>16.4f}", table.at(d, k).get(m));
      out += '\n';
    }
  }
  std::vector<MetricSummary> summaries;
  for (auto m : kAllMetrics) summaries.push_back(summarize_metric(table, target, m, ties_win));

  out += fmt::format("{:<22}{:<16}", "Statistical Analysis", "win/loss");
  for (const auto& s : summaries) out += fmt::format("{:>16}", fmt::format("{}/{}", s.win_loss.wins, s.win_loss.losses));
  out += '\n';
  out += fmt::format("{:<22}{:<16}", "", "p-value");
  for (const auto& s : summaries) out += fmt::format("{:>16.4f}", s.friedman.p_value);
  out += '\n';
  out += fmt::format("{:<22}{:<16}", "", "F-rank");
  for (const auto& s : summaries) out += fmt::format("{:>16.3f}", s.friedman.statistic);
  out += '\n';

  out += fmt::format("\nTarget model: {} (ties count as {})\n", target, ties_win ? "wins" : "losses");
  out += "\nFriedman detail (df, tie-corrected, mean ranks in model order):\n";
  for (const auto& s : summaries) {
    out += fmt::format("  {:<12} chi2={:.6f} df={} p={:.6f} tie_corrected={} mean_ranks=", metric_name(s.metric),
                       s.friedman.statistic, s.friedman.df, s.friedman.p_value, s.friedman.tie_corrected ? "yes" : "no");
    for (std::size_t j = 0; j < s.mean_ranks.size(); ++j) {
      out += fmt::format("{}{:.4f}", j ? "," : "", s.mean_ranks[j]);
    }
    out += '\n';
  }
  out += "\nWilcoxon signed-rank, target vs all other (dataset, model) cells per metric:\n";
  for (const auto& s : summaries) {
    out += fmt::format("  {:<12} n={} W={} p={:.6f} ({})\n", metric_name(s.metric), s.pooled_wilcoxon.n_effective,
                       s.pooled_wilcoxon.w_statistic, s.pooled_wilcoxon.p_two_sided,
                       s.pooled_wilcoxon.exact ? "exact" : "normal approx");
  }
  out += "\nWilcoxon signed-rank, target vs each model over all (dataset, metric) cells:\n";
  const auto t = table.model_index(target);
  for (std::size_t k = 0; k < table.models().size(); ++k) {
    if (k == t) continue;
    std::vector<double> mine, theirs;
    for (std::size_t d = 0; d < table.datasets().size(); ++d) {
      for (auto m : kAllMetrics) {
        mine.push_back(table.at(d, t).get(m));
        theirs.push_back(table.at(d, k).get(m));
      }
    }
    const auto w = wilcoxon_signed_rank(mine, theirs);
    out += fmt::format("  vs {:<14} n={} W={} p={:.6f} ({})\n", table.models()[k], w.n_effective, w.w_statistic,
                       w.p_two_sided, w.exact ? "exact" : "normal approx");
  }
  return out;
}

}  // namespace sepsis
