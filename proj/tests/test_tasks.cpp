#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "modmeta/tasks.hpp"
#include "testutil.hpp"

using namespace modmeta;

TEST(Basis, KnownValues) {
  EXPECT_DOUBLE_EQ(basis_function("abs", -0.5), 0.5);
  EXPECT_DOUBLE_EQ(basis_function("arctan", 1.0), 1.0);
  EXPECT_DOUBLE_EQ(basis_function("arcsinh", 1.0), 1.0);
  EXPECT_DOUBLE_EQ(basis_function("cosh", 1.0), 1.0);
  EXPECT_DOUBLE_EQ(basis_function("exp2", 1.0), 1.0);
  EXPECT_NEAR(basis_function("sin", 0.25), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(basis_function("cos", 0.5), 1.0);
  EXPECT_DOUBLE_EQ(basis_function("cbrt", -8.0), -2.0);
  EXPECT_DOUBLE_EQ(basis_function("ceil", -0.5), 0.0);
  EXPECT_DOUBLE_EQ(basis_function("floor", -0.5), -1.0);
  EXPECT_DOUBLE_EQ(basis_function("rint", 0.5), 0.0);
  EXPECT_DOUBLE_EQ(basis_function("rint", -0.7), -1.0);
  EXPECT_DOUBLE_EQ(basis_function("sign", 0.0), 0.0);
  EXPECT_DOUBLE_EQ(basis_function("sign", -3.0), -1.0);
  EXPECT_DOUBLE_EQ(basis_function("sinc", 0.0), 1.0);
  EXPECT_DOUBLE_EQ(basis_function("square", -0.3), 0.09);
  EXPECT_DOUBLE_EQ(basis_function("id", 0.7), 0.7);
  EXPECT_THROW(basis_function("log", 1.0), ConfigError);
}

TEST(Basis, SincIsNormalizedOverItsScaledArgument) {
  // sinc(t) = sin(pi t) / (pi t) with t = 4 pi x.
  const double x = 0.1, t = 4.0 * std::numbers::pi * x;
  EXPECT_NEAR(basis_function("sinc", x), std::sin(std::numbers::pi * t) / (std::numbers::pi * t), 1e-15);
}

TEST(Basis, AllFunctionsBoundedOnUnitInterval) {
  for (auto name : basis_names())
    for (int i = 0; i <= 200; ++i) {
      const double v = basis_function(name, -1.0 + i / 100.0);
      EXPECT_LE(std::abs(v), 1.0 + 1e-12) << name;
    }
}

TEST(SumSuite, IdentityPairGivesTwiceX) {
  SumSuiteSpec spec;
  spec.n_tasks = 256;
  auto raw = gen_sum_suite_raw(spec);
  bool found = false;
  for (const auto& t : raw.tasks) {
    if (t.labels != std::vector<std::string>{"id", "id"}) continue;
    found = true;
    for (std::size_t n = 0; n < t.train.size(); ++n) EXPECT_EQ(t.train.y(n)[0], 2.0 * t.train.x(n)[0]);
  }
  EXPECT_TRUE(found);
}

TEST(SumSuite, PairsAreDistinctAndHeldOutSuiteIsDisjoint) {
  SumSuiteSpec spec;
  spec.seed = 7;
  auto train = gen_sum_suite_raw(spec);
  ASSERT_EQ(train.tasks.size(), 230u);
  std::set<std::vector<std::string>> pairs;
  for (const auto& t : train.tasks) {
    EXPECT_EQ(t.train.size(), 16u);
    EXPECT_EQ(t.test.size(), 64u);
    for (std::size_t n = 0; n < t.train.size(); ++n) {
      EXPECT_GE(t.train.x(n)[0], -1.0);
      EXPECT_LT(t.train.x(n)[0], 1.0);
    }
    EXPECT_TRUE(pairs.insert(t.labels).second);
  }
  SumSuiteSpec held = spec;
  held.n_tasks = 26;
  held.skip = 230;
  for (const auto& t : gen_sum_suite_raw(held).tasks) EXPECT_TRUE(pairs.insert(t.labels).second);
  EXPECT_EQ(pairs.size(), 256u);
}

TEST(SumSuite, PureFunctionOfSpecAndSeed) {
  SumSuiteSpec spec;
  spec.n_tasks = 12;
  auto a = gen_sum_suite(spec), b = gen_sum_suite(spec);
  for (std::size_t t = 0; t < a.tasks.size(); ++t) {
    EXPECT_EQ(a.tasks[t].train, b.tasks[t].train);
    EXPECT_EQ(a.tasks[t].test, b.tasks[t].test);
  }
  spec.seed = 1;
  auto c = gen_sum_suite(spec);
  EXPECT_NE(a.tasks[0].train, c.tasks[0].train);
}

TEST(SumSuite, RejectsTooManyTasks) {
  SumSuiteSpec spec;
  spec.n_tasks = 257;
  EXPECT_THROW(gen_sum_suite_raw(spec), ConfigError);
  spec.n_tasks = 200;
  spec.skip = 100;
  EXPECT_THROW(gen_sum_suite_raw(spec), ConfigError);
}

TEST(SumSuite, VariableTrainingSizeStaysInRange) {
  SumSuiteSpec spec;
  spec.n_tasks = 40;
  spec.n_train = 4;
  spec.n_train_min = 1;
  std::set<std::size_t> sizes;
  for (const auto& t : gen_sum_suite_raw(spec).tasks) sizes.insert(t.train.size());
  EXPECT_EQ(sizes, (std::set<std::size_t>{1, 2, 3, 4}));
}

TEST(SineSuite, TargetsAreSinesInRange) {
  SineSuiteSpec spec;
  spec.n_tasks = 30;
  auto raw = gen_sine_suite_raw(spec);
  for (const auto& t : raw.tasks) {
    ASSERT_EQ(t.labels.size(), 2u);
    const double a = std::stod(t.labels[0].substr(2)), b = std::stod(t.labels[1].substr(2));
    EXPECT_GE(a, 0.1);
    EXPECT_LE(a, 5.0);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, std::numbers::pi);
    for (std::size_t n = 0; n < t.test.size(); ++n) {
      const double x = t.test.x(n)[0];
      EXPECT_GE(x, -5.0);
      EXPECT_LE(x, 5.0);
      EXPECT_EQ(t.test.y(n)[0], std::sin(a * x + b));
    }
  }
}

TEST(Standardize, ThreeTargetsExample) {
  TaskSuite s;
  TaskData t{Dataset(1, 1), Dataset(1, 1), {}};
  t.train.add({0.0}, {1.0});
  t.train.add({0.0}, {2.0});
  t.test.add({0.0}, {3.0});
  s.tasks.push_back(t);
  auto z = standardize(s);
  EXPECT_NEAR(z.tasks[0].train.y(0)[0], -1.224744871391589, 1e-12);
  EXPECT_NEAR(z.tasks[0].train.y(1)[0], 0.0, 1e-12);
  EXPECT_NEAR(z.tasks[0].test.y(0)[0], 1.224744871391589, 1e-12);
}

TEST(Standardize, PooledTargetsHaveZeroMeanUnitStdAndInvert) {
  SumSuiteSpec spec;
  spec.n_tasks = 50;
  auto raw = gen_sum_suite_raw(spec);
  auto z = standardize(raw);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& t : z.tasks)
    for (const Dataset* d : {&t.train, &t.test})
      for (std::size_t i = 0; i < d->size(); ++i, ++n) {
        sum += d->y(i)[0];
        sq += d->y(i)[0] * d->y(i)[0];
      }
  const double mean = sum / static_cast<double>(n);
  EXPECT_LT(std::abs(mean), 1e-9);
  EXPECT_LT(std::abs(std::sqrt(sq / static_cast<double>(n) - mean * mean) - 1.0), 1e-9);
  auto back = destandardize(z);
  for (std::size_t t = 0; t < raw.tasks.size(); ++t)
    for (std::size_t i = 0; i < raw.tasks[t].test.size(); ++i)
      EXPECT_NEAR(back.tasks[t].test.y(i)[0], raw.tasks[t].test.y(i)[0], 1e-12);
}

TEST(Standardize, ConstantTargetsAreDegenerate) {
  TaskSuite s;
  TaskData t{Dataset(1, 1), Dataset(1, 1), {}};
  t.train.add({0.0}, {2.0});
  t.test.add({1.0}, {2.0});
  s.tasks.push_back(t);
  EXPECT_THROW(standardize(s), DegenerateDataError);
}

TEST(CsvSuite, RoundTripsValuesAndLabels) {
  SumSuiteSpec spec;
  spec.n_tasks = 2;
  auto suite = gen_sum_suite(spec);
  auto dir = testutil::scratch_dir("csv_roundtrip");
  auto manifest = save_csv_suite(suite, dir);
  auto back = load_csv_suite(manifest);
  ASSERT_EQ(back.tasks.size(), 2u);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(back.tasks[t].labels, suite.tasks[t].labels);
    for (auto [a, b] : {std::pair{&suite.tasks[t].train, &back.tasks[t].train},
                        std::pair{&suite.tasks[t].test, &back.tasks[t].test}}) {
      ASSERT_EQ(a->size(), b->size());
      for (std::size_t i = 0; i < a->size(); ++i) {
        EXPECT_EQ(a->x(i)[0], b->x(i)[0]);
        EXPECT_NEAR(a->y(i)[0], b->y(i)[0], 1e-12);
      }
    }
  }
  EXPECT_NEAR(back.stats.mean[0], suite.stats.mean[0], 1e-12);
}

TEST(CsvSuite, FixedStatisticsAreReappliedVerbatim) {
  SumSuiteSpec spec;
  spec.n_tasks = 3;
  auto suite = gen_sum_suite(spec);
  suite.stats.mean[0] += 0.25;  // pretend the stats came from another suite
  auto dir = testutil::scratch_dir("csv_fixed");
  auto back = load_csv_suite(save_csv_suite(suite, dir, true));
  EXPECT_EQ(back.stats, suite.stats);
}

namespace {

std::filesystem::path write_manifest(const std::filesystem::path& dir, const std::string& csv, std::size_t n_train,
                                     std::size_t out_dims = 1) {
  {
    std::ofstream f(dir / "t.csv");
    f << csv;
  }
  json m{{"tasks", {{{"csv", "t.csv"}, {"n_train", n_train}, {"input_dims", 1}, {"output_dims", out_dims}}}}};
  std::ofstream(dir / "manifest.json") << m.dump();
  return dir / "manifest.json";
}

std::string ingest_message(const std::filesystem::path& manifest) {
  try {
    load_csv_suite(manifest);
  } catch (const IngestError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(CsvSuite, HeaderMismatchNamesFileAndColumn) {
  auto dir = testutil::scratch_dir("csv_header");
  auto msg = ingest_message(write_manifest(dir, "x0,y0\n0,1\n1,2\n2,3\n", 1, 2));
  EXPECT_NE(msg.find("t.csv"), std::string::npos) << msg;
  EXPECT_NE(msg.find("y1"), std::string::npos) << msg;
}

TEST(CsvSuite, TrainingSplitMustLeaveTestRows) {
  auto dir = testutil::scratch_dir("csv_rows");
  EXPECT_NE(ingest_message(write_manifest(dir, "x0,y0\n0,1\n1,2\n", 2)), "");
  EXPECT_EQ(ingest_message(write_manifest(dir, "x0,y0\n0,1\n1,2\n", 1)), "");
}

TEST(CsvSuite, MissingFilesAndBadCellsAreIngestErrors) {
  auto dir = testutil::scratch_dir("csv_missing");
  EXPECT_THROW(load_csv_suite(dir / "nope.json"), IngestError);
  EXPECT_NE(ingest_message(write_manifest(dir, "x0,y0\n0,abc\n1,2\n", 1)).find("row 1"), std::string::npos);
  std::ofstream(dir / "manifest.json") << R"({"tasks":[{"csv":"gone.csv","n_train":1,"input_dims":1,"output_dims":1}]})";
  EXPECT_NE(ingest_message(dir / "manifest.json").find("gone.csv"), std::string::npos);
}
