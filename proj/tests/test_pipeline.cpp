#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "sepsis/pipeline.hpp"
#include "pipeline_fixtures.hpp"

using namespace sepsis;
using sepsis::testing::random_record;
using sepsis::testing::worked_example;

namespace {

PipelineConfig config_for(std::size_t dim, double threshold = 0.8) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < dim; ++i) names.push_back("f" + std::to_string(i + 1));
  PipelineConfig cfg;
  cfg.schema = FeatureSchema(names);
  cfg.completeness_threshold = threshold;
  return cfg;
}

HourlyRow row(std::int64_t hour, std::vector<std::optional<double>> values, int label = 0) {
  return {hour, std::move(values), label};
}

}  // namespace

TEST(ForwardFill, CarriesLastObservation) {
  auto s = SegmenterState::start("p", 2);
  s.last_known = {std::nullopt, 2.0};
  s = forward_fill_step(s, row(0, {1.0, std::nullopt}));
  EXPECT_EQ(s.last_known, (std::vector<std::optional<double>>{1.0, 2.0}));
  EXPECT_EQ(s.observed_count, 1u);
}

TEST(ForwardFill, EmptyRowOnlyAdvancesHour) {
  auto s = SegmenterState::start("p", 3);
  s = forward_fill_step(s, row(0, {1.0, std::nullopt, 3.0}));
  const auto next = forward_fill_step(s, row(4, {std::nullopt, std::nullopt, std::nullopt}));
  EXPECT_EQ(next.last_known, s.last_known);
  EXPECT_EQ(next.observed_in_window, s.observed_in_window);
  EXPECT_EQ(next.last_hour, 4);
}

TEST(ForwardFill, FinalStateMatchesColumnScan) {
  Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rec = random_record(rng, 5, 5, 0.5);
    auto s = SegmenterState::start("p", 5);
    for (const auto& r : rec.rows) s = forward_fill_step(s, r);
    for (std::size_t col = 0; col < 5; ++col) {
      std::optional<double> last;
      for (const auto& r : rec.rows) {
        if (r.values[col]) last = r.values[col];
      }
      EXPECT_EQ(s.last_known[col], last);
    }
  }
}

TEST(ForwardFill, Errors) {
  auto s = SegmenterState::start("p", 2);
  EXPECT_THROW(forward_fill_step(s, row(0, {1.0})), Error);
  s = forward_fill_step(s, row(3, {1.0, 2.0}));
  try {
    forward_fill_step(s, row(3, {1.0, 2.0}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::OutOfOrderRow);
  }
}

TEST(Completeness, RatiosOfDistinctFeatures) {
  auto s = SegmenterState::start("p", 5);
  EXPECT_EQ(completeness(s), 0.0);
  s = forward_fill_step(s, row(0, {1.0, 2.0, std::nullopt, std::nullopt, std::nullopt}));
  s = forward_fill_step(s, row(1, {1.5, std::nullopt, 3.0, 4.0, std::nullopt}));
  // f1 observed twice still counts once.
  EXPECT_DOUBLE_EQ(completeness(s), 0.8);
}

TEST(Completeness, EqualsSetCardinalityOverRawCells) {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rec = random_record(rng, 6, 4, 0.6);
    auto s = SegmenterState::start("p", 6);
    std::set<std::size_t> seen;
    for (const auto& r : rec.rows) {
      s = forward_fill_step(s, r);
      for (std::size_t i = 0; i < 6; ++i) {
        if (r.values[i]) seen.insert(i);
      }
      EXPECT_DOUBLE_EQ(completeness(s), static_cast<double>(seen.size()) / 6.0);
    }
  }
}

TEST(RequiredCount, ThresholdArithmetic) {
  EXPECT_EQ(required_feature_count(5, 0.8), 4u);
  EXPECT_EQ(required_feature_count(40, 0.8), 32u);
  EXPECT_EQ(required_feature_count(3, 0.8), 3u);
  EXPECT_EQ(required_feature_count(10, 0.7), 7u);
  EXPECT_EQ(required_feature_count(6, 1.0), 6u);
}

TEST(Downsample, WorkedExample) {
  const auto samples = downsample_training(worked_example(), config_for(5));
  ASSERT_EQ(samples.size(), 2u);
  EXPECT_EQ(samples[0].hour, 3);
  EXPECT_EQ(samples[0].values, (std::vector<double>{1.0, 2.5, 3.0, 4.0, 0.0}));
  EXPECT_EQ(samples[0].mask, (std::vector<bool>{true, true, true, true, false}));
  EXPECT_EQ(samples[0].label, 0);
  EXPECT_EQ(samples[1].hour, 5);
  EXPECT_EQ(samples[1].values, (std::vector<double>{1.5, 2.6, 3.1, 4.0, 5.0}));
  EXPECT_EQ(samples[1].label, 1);
  EXPECT_EQ(samples[1].patient_id, "example");
}

TEST(Downsample, SaturatedAndNeverComplete) {
  PatientRecord full{"full", {}};
  for (int h = 0; h < 4; ++h) full.rows.push_back(row(h, {1.0 * h, 2.0, 3.0}));
  EXPECT_EQ(downsample_training(full, config_for(3)).size(), 4u);

  PatientRecord sparse{"sparse", {}};
  for (int h = 0; h < 10; ++h) sparse.rows.push_back(row(h, {1.0, std::nullopt, std::nullopt}));
  EXPECT_TRUE(downsample_training(sparse, config_for(3)).empty());
  EXPECT_TRUE(downsample_training(PatientRecord{"none", {}}, config_for(3)).empty());
}

TEST(StreamWindow, WorkedExampleMatchesBatch) {
  const auto rec = worked_example();
  const auto cfg = config_for(5);
  auto state = SegmenterState::start(rec.patient_id, 5);
  std::vector<Sample> emitted;
  std::vector<std::int64_t> hours;
  for (const auto& r : rec.rows) {
    if (auto s = stream_window_step(state, r, cfg)) {
      hours.push_back(s->hour);
      emitted.push_back(*s);
    }
  }
  EXPECT_EQ(hours, (std::vector<std::int64_t>{3, 5}));
  EXPECT_EQ(emitted, downsample_training(rec, cfg));
}

TEST(StreamWindow, FirstRowCompleteAndNoNewObservations) {
  const auto cfg = config_for(2);
  auto state = SegmenterState::start("p", 2);
  const auto first = stream_window_step(state, row(0, {1.0, 2.0}), cfg);
  ASSERT_TRUE(first.has_value());
  EXPECT_EQ(first->hour, 0);
  EXPECT_FALSE(stream_window_step(state, row(1, {std::nullopt, std::nullopt}), cfg).has_value());
  EXPECT_FALSE(stream_window_step(state, row(2, {std::nullopt, std::nullopt}), cfg).has_value());
  EXPECT_THROW(stream_window_step(state, row(1, {1.0, 1.0}), cfg), Error);
}

TEST(StreamWindow, ResetModeDropsCarriedValues) {
  auto cfg = config_for(5);
  cfg.carry_fill_across_windows = false;
  const auto samples = downsample_training(worked_example(), cfg);
  ASSERT_EQ(samples.size(), 2u);
  // f4 was observed only in the first window, so it is absent from the second.
  EXPECT_EQ(samples[1].values, (std::vector<double>{1.5, 2.6, 3.1, 0.0, 5.0}));
  EXPECT_EQ(samples[1].mask, (std::vector<bool>{true, true, true, false, true}));
  EXPECT_EQ(stream_record(worked_example(), cfg), samples);
}

TEST(Properties, BatchStreamEquivalence) {
  Rng rng(2025);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t dim = 1 + rng.below(6);
    auto cfg = config_for(dim, rng.uniform(0.3, 1.0));
    cfg.carry_fill_across_windows = rng.bernoulli(0.5);
    const auto rec = random_record(rng, dim, 1 + rng.below(12), rng.uniform(0.1, 0.9));
    EXPECT_EQ(downsample_training(rec, cfg), stream_record(rec, cfg));
  }
}

TEST(Properties, WindowsPartitionObservationsAndMeetThreshold) {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t dim = 2 + rng.below(5);
    const auto cfg = config_for(dim);
    const auto rec = random_record(rng, dim, 12, 0.5);
    const auto samples = downsample_training(rec, cfg);
    // Each row belongs to the window that closes at the first emission hour >= its hour.
    std::size_t window = 0;
    std::set<std::size_t> features;
    for (const auto& r : rec.rows) {
      if (window == samples.size()) break;
      for (std::size_t i = 0; i < dim; ++i) {
        if (r.values[i]) features.insert(i);
      }
      if (r.hour == samples[window].hour) {
        EXPECT_GE(static_cast<double>(features.size()) / dim, cfg.completeness_threshold);
        // And not earlier: the window closes at its first qualifying row.
        features.clear();
        ++window;
      } else {
        EXPECT_LT(static_cast<double>(features.size()) / dim, cfg.completeness_threshold - 1e-12);
      }
    }
    EXPECT_EQ(window, samples.size());
  }
}

TEST(Properties, NoLookahead) {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const auto rec = random_record(rng, 4, 12, 0.5);
    const auto cfg = config_for(4);
    const auto all = downsample_training(rec, cfg);
    const std::size_t cut = rng.below(rec.rows.size() + 1);
    PatientRecord prefix{rec.patient_id, {rec.rows.begin(), rec.rows.begin() + static_cast<std::ptrdiff_t>(cut)}};
    const auto partial = downsample_training(prefix, cfg);
    ASSERT_LE(partial.size(), all.size());
    for (std::size_t i = 0; i < partial.size(); ++i) EXPECT_EQ(partial[i], all[i]);
    if (partial.size() < all.size() && cut > 0) EXPECT_GT(all[partial.size()].hour, prefix.rows.back().hour);
  }
}

TEST(NormStats, TwoPointAndUnobserved) {
  std::vector<Sample> s(2);
  s[0] = {{2.0, 0.0}, {true, false}, 0, "a", 0};
  s[1] = {{4.0, 0.0}, {true, false}, 1, "b", 0};
  const auto st = fit_norm_stats(s);
  EXPECT_DOUBLE_EQ(st.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(st.std[0], 1.0);
  EXPECT_EQ(st.count[0], 2u);
  EXPECT_EQ(st.mean[1], 0.0);
  EXPECT_EQ(st.std[1], 1.0);
  EXPECT_EQ(st.count[1], 0u);
  EXPECT_THROW(fit_norm_stats({}), Error);
}

TEST(NormStats, ZeroVarianceKeepsMean) {
  std::vector<Sample> s(3, Sample{{5.0}, {true}, 0, "a", 0});
  const auto st = fit_norm_stats(s);
  EXPECT_EQ(st.mean[0], 5.0);
  EXPECT_EQ(st.std[0], 1.0);
  EXPECT_EQ(normalize(s[0], st).values[0], 0.0);
}

TEST(NormStats, MatchesNaiveTwoPass) {
  Rng rng(10);
  std::vector<Sample> samples;
  for (int i = 0; i < 300; ++i) {
    Sample s;
    for (int f = 0; f < 6; ++f) {
      const bool seen = rng.bernoulli(0.7);
      s.mask.push_back(seen);
      s.values.push_back(seen ? rng.uniform(-50, 80) : 0.0);
    }
    samples.push_back(s);
  }
  const auto st = fit_norm_stats(samples);
  for (int f = 0; f < 6; ++f) {
    std::vector<double> col;
    for (const auto& s : samples) {
      if (s.mask[f]) col.push_back(s.values[f]);
    }
    double mean = 0;
    for (double v : col) mean += v;
    mean /= col.size();
    double var = 0;
    for (double v : col) var += (v - mean) * (v - mean);
    EXPECT_NEAR(st.mean[f], mean, 1e-12);
    EXPECT_NEAR(st.std[f], std::sqrt(var / col.size()), 1e-12);
    EXPECT_EQ(st.count[f], col.size());
  }
}

TEST(Normalize, ValuesAndMissingPins) {
  NormStats st{{2.0, 7.0}, {2.0, 3.0}, {5, 5}};
  const auto out = normalize(Sample{{4.0, 123.0}, {true, false}, 0, "p", 0}, st);
  EXPECT_EQ(out.values[0], 1.0);
  EXPECT_EQ(out.values[1], 0.0);
  EXPECT_EQ(out.mask, (std::vector<bool>{true, false}));
  EXPECT_THROW(normalize(Sample{{1.0}, {true}, 0, "p", 0}, st), Error);
}

TEST(Normalize, ElementwiseOracleAndZeroMarker) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    NormStats st;
    Sample s;
    for (int f = 0; f < 8; ++f) {
      st.mean.push_back(rng.uniform(-10, 10));
      st.std.push_back(rng.uniform(0.1, 5));
      st.count.push_back(3);
      s.mask.push_back(rng.bernoulli(0.6));
      s.values.push_back(s.mask.back() ? rng.uniform(-20, 20) : 0.0);
    }
    const auto out = normalize(s, st);
    for (int f = 0; f < 8; ++f) {
      if (s.mask[f]) EXPECT_NEAR(out.values[f], (s.values[f] - st.mean[f]) / st.std[f], 1e-12);
      else EXPECT_EQ(out.values[f], 0.0);
    }
  }
}

TEST(ModelInput, MaskChannels) {
  const Sample s{{0.5, 0.0}, {true, false}, 0, "p", 0};
  EXPECT_EQ(model_input(s, false), (std::vector<double>{0.5, 0.0}));
  EXPECT_EQ(model_input(s, true), (std::vector<double>{0.5, 0.0, 1.0, 0.0}));
}

TEST(TextFormats, NormStatsRoundTrip) {
  const FeatureSchema schema({"a", "b", "c"});
  const NormStats st{{0.1, -2.5, 0.0}, {1.0 / 3.0, 2.0, 1.0}, {4, 9, 0}};
  std::istringstream in(write_norm_stats(st, schema, 0.8));
  const auto back = read_norm_stats(in, schema);
  EXPECT_EQ(back.stats, st);
  EXPECT_EQ(back.threshold, 0.8);
  std::istringstream again(write_norm_stats(st, schema, 0.8));
  EXPECT_THROW(read_norm_stats(again, FeatureSchema({"a", "b", "d"})), Error);
}

TEST(TextFormats, SampleCsvRoundTrip) {
  const auto cfg = config_for(5);
  const auto samples = downsample_training(worked_example(), cfg);
  std::istringstream in(write_samples_csv(samples, cfg.schema));
  EXPECT_EQ(read_samples_csv(in, cfg.schema), samples);
  std::istringstream bad("patient_id,hour,label,x\n");
  EXPECT_THROW(read_samples_csv(bad, cfg.schema), Error);
}

TEST(Counts, ClassTallies) {
  const auto c = count_classes(downsample_training(worked_example(), config_for(5)));
  EXPECT_EQ(c.total, 2u);
  EXPECT_EQ(c.positive, 1u);
  EXPECT_EQ(c.negative, 1u);
}
