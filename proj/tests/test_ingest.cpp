#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "sepsis/ingest.hpp"

using namespace sepsis;
namespace fs = std::filesystem;

namespace {

FeatureSchema two_features() { return FeatureSchema({"f1", "f2"}); }

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / fs::path("sepsis_ingest_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                                 "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  void write(const std::string& name, const std::string& text) const { std::ofstream(path_ / name) << text; }

 private:
  fs::path path_;
};

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return Errc::BadConfig;
}

}  // namespace

TEST(Schema, PhysioNetDefault) {
  const auto s = physionet_schema();
  EXPECT_EQ(s.dim(), 40u);
  EXPECT_EQ(s.names().front(), "HR");
  EXPECT_EQ(s.names().back(), "ICULOS");
  EXPECT_NE(s.hash(), FeatureSchema({"HR"}).hash());
}

TEST(Schema, RejectsDuplicatesEmptiesAndLabel) {
  EXPECT_THROW(FeatureSchema({"a", "a"}), Error);
  EXPECT_THROW(FeatureSchema({"a", ""}), Error);
  EXPECT_THROW(FeatureSchema({"SepsisLabel"}), Error);
  EXPECT_THROW(FeatureSchema(std::vector<std::string>{}), Error);
}

TEST(ParsePsv, SingleRow) {
  const auto r = parse_psv("f1|f2|SepsisLabel\n1.0|NaN|0\n", two_features(), "p");
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].hour, 0);
  EXPECT_EQ(r.rows[0].values[0], 1.0);
  EXPECT_FALSE(r.rows[0].values[1].has_value());
  EXPECT_EQ(r.rows[0].label, 0);
}

TEST(ParsePsv, HeaderOnlyAndCrlf) {
  EXPECT_TRUE(parse_psv("f1|f2|SepsisLabel\n", two_features()).rows.empty());
  const auto r = parse_psv("f1|f2|SepsisLabel\r\n2|3|1\r\n4|NaN|1\r\n", two_features());
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[1].hour, 1);
  EXPECT_EQ(r.rows[1].label, 1);
  EXPECT_EQ(r.rows[0].values[1], 3.0);
}

TEST(ParsePsv, MissingPatternMatchesIndependentSplit) {
  const std::string body = "NaN|2.5|NaN|0\n-1e3|NaN|7|0\nNaN|NaN|0.125|1\n";
  const FeatureSchema schema({"a", "b", "c"});
  const auto r = parse_psv("a|b|c|SepsisLabel\n" + body, schema);

  std::istringstream lines(body);
  std::string line;
  std::size_t row = 0;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string cell;
    for (std::size_t col = 0; col < 3; ++col) {
      std::getline(cells, cell, '|');
      EXPECT_EQ(!r.rows[row].values[col].has_value(), cell == "NaN") << row << "," << col;
      if (cell != "NaN") EXPECT_EQ(*r.rows[row].values[col], std::stod(cell));
    }
    ++row;
  }
  EXPECT_EQ(row, r.rows.size());
}

TEST(ParsePsv, Errors) {
  const auto s = two_features();
  EXPECT_EQ(code_of([&] { parse_psv("f2|f1|SepsisLabel\n", s); }), Errc::HeaderMismatch);
  EXPECT_EQ(code_of([&] { parse_psv("f1|f2\n", s); }), Errc::HeaderMismatch);
  EXPECT_EQ(code_of([&] { parse_psv("", s); }), Errc::HeaderMismatch);
  EXPECT_EQ(code_of([&] { parse_psv("f1|f2|SepsisLabel\n1|2\n", s); }), Errc::MalformedRow);
  EXPECT_EQ(code_of([&] { parse_psv("f1|f2|SepsisLabel\n1|x|0\n", s); }), Errc::MalformedRow);
  EXPECT_EQ(code_of([&] { parse_psv("f1|f2|SepsisLabel\n1||0\n", s); }), Errc::MalformedRow);
  EXPECT_EQ(code_of([&] { parse_psv("f1|f2|SepsisLabel\n1|2|2\n", s); }), Errc::BadLabel);
  EXPECT_EQ(code_of([&] { parse_psv("f1|f2|SepsisLabel\n1|2|NaN\n", s); }), Errc::BadLabel);
}

TEST(ParsePsv, RoundTripRandomRecords) {
  Rng rng(5);
  const FeatureSchema schema({"a", "b", "c", "d"});
  for (int trial = 0; trial < 200; ++trial) {
    PatientRecord rec{"p" + std::to_string(trial), {}};
    const auto n = rng.below(8);
    for (std::size_t h = 0; h < n; ++h) {
      HourlyRow row{static_cast<std::int64_t>(h), {}, static_cast<int>(rng.below(2))};
      for (int i = 0; i < 4; ++i) {
        if (rng.bernoulli(0.4)) row.values.push_back(std::nullopt);
        else row.values.push_back(rng.uniform(-1e4, 1e4));
      }
      rec.rows.push_back(row);
    }
    EXPECT_EQ(parse_psv(to_psv(rec, schema), schema, rec.patient_id), rec);
  }
}

TEST(LoadDataset, SortedByStem) {
  TempDir dir;
  dir.write("p2.psv", "f1|f2|SepsisLabel\n1|2|0\n");
  dir.write("p1.psv", "f1|f2|SepsisLabel\nNaN|2|1\n3|4|1\n");
  dir.write("notes.txt", "ignored");
  const auto recs = load_dataset(dir.path(), two_features());
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].patient_id, "p1");
  EXPECT_EQ(recs[0].rows.size(), 2u);
  EXPECT_EQ(recs[1].patient_id, "p2");
}

TEST(LoadDataset, EmptyAndMissingDirectories) {
  TempDir dir;
  EXPECT_TRUE(load_dataset(dir.path(), two_features()).empty());
  EXPECT_EQ(code_of([&] { load_dataset(dir.path() / "nope", two_features()); }), Errc::IoError);
}

TEST(LoadDataset, TenFilesMatchListing) {
  TempDir dir;
  for (int i = 0; i < 10; ++i) dir.write("patient" + std::to_string(i * 7) + ".psv", "f1|f2|SepsisLabel\n1|2|0\n");
  std::set<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir.path())) stems.insert(e.path().stem().string());
  const auto recs = load_dataset(dir.path(), two_features());
  ASSERT_EQ(recs.size(), 10u);
  std::set<std::string> ids;
  for (const auto& r : recs) ids.insert(r.patient_id);
  EXPECT_EQ(ids, stems);
}

TEST(LoadDataset, ErrorsNameTheFile) {
  TempDir dir;
  dir.write("bad.psv", "f1|f2|SepsisLabel\n1|2|7\n");
  try {
    load_dataset(dir.path(), two_features());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::BadLabel);
    EXPECT_NE(std::string(e.what()).find("bad.psv"), std::string::npos);
  }
}

namespace {
std::vector<PatientRecord> patients(std::size_t n) {
  std::vector<PatientRecord> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back({"p" + std::to_string(100 + i), {}});
  return v;
}
}  // namespace

TEST(SplitPatients, CardinalityAndDeterminism) {
  const auto a = split_patients(patients(10), 0.1, 7);
  EXPECT_EQ(a.train.size(), 9u);
  EXPECT_EQ(a.test.size(), 1u);
  const auto b = split_patients(patients(10), 0.1, 7);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  // Roughly the 10:1 ratio of the published cohorts, e.g. 5031 -> 4528 / 503.
  EXPECT_EQ(test_count(5031, 0.1), 503u);
}

TEST(SplitPatients, DisjointPartitionForAllSeeds) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = split_patients(patients(23), 0.3, seed);
    std::set<std::string> train, test;
    for (const auto& r : s.train) train.insert(r.patient_id);
    for (const auto& r : s.test) test.insert(r.patient_id);
    EXPECT_EQ(train.size() + test.size(), 23u);
    for (const auto& id : test) EXPECT_EQ(train.count(id), 0u);
    EXPECT_EQ(test.size(), 7u);
  }
}

TEST(SplitPatients, Errors) {
  EXPECT_EQ(code_of([] { split_patients({}, 0.1, 1); }), Errc::EmptyInput);
  EXPECT_EQ(code_of([] { split_patients(patients(3), 1.0, 1); }), Errc::BadConfig);
  EXPECT_EQ(code_of([] { split_patients(patients(3), 0.0, 1); }), Errc::BadConfig);
}
