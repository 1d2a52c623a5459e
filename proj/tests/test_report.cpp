#include <gtest/gtest.h>

#include <cmath>
#include <regex>

#include "modmeta/report.hpp"
#include "testutil.hpp"

using namespace modmeta;

namespace {

// relu(x) + relu(-x) and relu(x) - relu(-x) on a [1-2-1] net.
ParamVector exact_abs() { return {1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0}; }
ParamVector exact_id() { return {1.0, -1.0, 0.0, 0.0, 1.0, -1.0, 0.0}; }

ModulePool abs_id_pool() {
  ModulePool pool;
  pool.add_group(Role::generic(), Arch{{1, 2, 1}}, {exact_id(), exact_abs()});
  return pool;
}

TaskSuite abs_plus_id_suite(std::size_t n_tasks) {
  TaskSuite s;
  Rng rng(3);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    TaskData d{Dataset(1, 1), Dataset(1, 1), {"abs", "id"}};
    for (int i = 0; i < 8; ++i) {
      const double x = rng.uniform(-1.0, 1.0);
      (i < 4 ? d.train : d.test).add({x}, {std::abs(x) + x});
    }
    s.tasks.push_back(d);
  }
  return s;
}

std::string strip_timestamp(const std::string& text) {
  return std::regex_replace(text, std::regex(R"("generated_at": "[^"]*")"), "");
}

}  // namespace

TEST(Sharing, FractionExamples) {
  EXPECT_DOUBLE_EQ(sharing_fraction(Structure{{0, 1}, {}}, Structure{{0, 1}, {}}), 1.0);
  EXPECT_DOUBLE_EQ(sharing_fraction(Structure{{0, 1}, {}}, Structure{{2, 3}, {}}), 0.0);
  EXPECT_DOUBLE_EQ(sharing_fraction(Structure{{0, 1}, {}}, Structure{{1, 2}, {}}), 0.5);
  // Repeated modules count once per occurrence.
  EXPECT_DOUBLE_EQ(sharing_fraction(Structure{{0, 0}, {}}, Structure{{0, 1}, {}}), 0.5);
  EXPECT_DOUBLE_EQ(sharing_fraction(Structure{{0, 0}, {}}, Structure{{0, 0}, {}}), 1.0);
}

TEST(Sharing, MatrixIsSymmetricAndInRange) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(15);
    std::vector<Structure> s;
    std::vector<std::string> groups;
    for (std::size_t j = 0; j < n; ++j) {
      Structure st;
      const std::size_t slots = 1 + rng.below(4);
      for (std::size_t k = 0; k < slots; ++k) st.modules.push_back(static_cast<ModuleId>(rng.below(6)));
      s.push_back(st);
      groups.push_back(std::string(1, static_cast<char>('a' + rng.below(3))));
    }
    auto m = sharing_matrix(s, groups, {"a", "b", "c"});
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_EQ(m.counts[a][b], m.counts[b][a]);
        if (m.counts[a][b] == 0) {
          EXPECT_TRUE(std::isnan(m.values[a][b]));
          continue;
        }
        EXPECT_EQ(m.values[a][b], m.values[b][a]);
        EXPECT_GE(m.values[a][b], 0.0);
        EXPECT_LE(m.values[a][b], 1.0);
      }
  }
}

TEST(Sharing, DiagonalUsesDistinctPairsOnly) {
  std::vector<Structure> s{Structure{{0, 1}, {}}, Structure{{0, 2}, {}}, Structure{{3, 4}, {}}};
  std::vector<std::string> g{"x", "x", "y"};
  auto m = sharing_matrix(s, g, {"x", "y"});
  EXPECT_EQ(m.counts[0][0], 1u);
  EXPECT_DOUBLE_EQ(m.values[0][0], 0.5);
  EXPECT_EQ(m.counts[1][1], 0u);
  EXPECT_EQ(m.counts[0][1], 2u);
  EXPECT_DOUBLE_EQ(m.values[0][1], 0.0);
}

TEST(Sharing, UnknownGroupIsAConfigError) {
  std::vector<Structure> s{Structure{{0}, {}}};
  std::vector<std::string> g{"z"};
  EXPECT_THROW(sharing_matrix(s, g, {"x"}), ConfigError);
}

TEST(Sharing, ExactPairsShareHalfWhenOneFunctionIsCommon) {
  // One planted module per basis function; each task's structure is its
  // generating pair.
  const auto names = basis_names();
  std::vector<Structure> s;
  std::vector<std::vector<std::string>> labels;
  for (std::size_t a = 0; a < names.size(); ++a)
    for (std::size_t b = 0; b < names.size(); ++b) {
      s.push_back(Structure{{static_cast<ModuleId>(a), static_cast<ModuleId>(b)}, {}});
      labels.push_back({std::string(names[a]), std::string(names[b])});
    }
  auto r = sharing_by_overlap(s, labels);
  ASSERT_EQ(r.mean.size(), 3u);
  EXPECT_EQ(r.mean[0], 0.0);
  EXPECT_EQ(r.mean[1], 0.5);
  EXPECT_EQ(r.mean[2], 1.0);
  EXPECT_GT(r.pairs[1], 0u);
}

TEST(Matching, ExactModulesGiveAPerfectBijection) {
  auto pool = abs_id_pool();
  std::vector<std::string> names{"abs", "id"};
  auto m = match_modules_to_basis(pool, names, Standardization{});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].module, 1);
  EXPECT_EQ(m[1].module, 0);
  EXPECT_LT(m[0].mad, 1e-12);
  EXPECT_LT(m[1].mad, 1e-12);
}

TEST(Matching, ComparesInStandardizedSpace) {
  // A module computing (abs - 0.5 * mean) / std matches abs exactly.
  Standardization st{{0.4}, {2.0}};
  auto p = exact_abs();
  for (std::size_t i = 4; i < 6; ++i) p[i] /= 2.0;
  p[6] = -0.1;
  ModulePool pool;
  pool.add_group(Role::generic(), Arch{{1, 2, 1}}, {exact_id(), p});
  std::vector<std::string> names{"abs"};
  auto m = match_modules_to_basis(pool, names, st);
  EXPECT_EQ(m[0].module, 1);
  EXPECT_LT(m[0].mad, 1e-12);
}

TEST(Matching, RejectsNonScalarModules) {
  auto pool = init_pool({{Role::generic(), Arch{{2, 3, 1}}, 2}}, 0);
  std::vector<std::string> names{"abs"};
  EXPECT_THROW(match_modules_to_basis(pool, names, Standardization{}), ConfigError);
}

TEST(Evaluate, ExactGeneratingStructureScoresZero) {
  MethodArtifact m{"BounceGrad", Scheme::sum(), abs_id_pool(), TrainConfig{}, MetatestMode::structure_only};
  auto suite = abs_plus_id_suite(5);
  auto t = evaluate_methods(std::span(&m, 1), suite, "abs_id", 0, "d");
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_LT(t.rows[0].mean_loss, 1e-20);
  EXPECT_EQ(t.rows[0].n_tasks, 5u);
}

TEST(Evaluate, ConstantZeroPredictorScoresTargetPower) {
  SumSuiteSpec spec;
  spec.n_tasks = 60;
  auto suite = gen_sum_suite(spec);
  ModulePool pool;
  pool.add_group(Role::generic(), Arch{{1, 1}}, {{0.0, 0.0}});
  MethodArtifact m{"Pooled", Scheme::single(), pool, TrainConfig{}, MetatestMode::structure_only};
  auto t = evaluate_methods(std::span(&m, 1), suite, "sums", 0, "d");
  double oracle = 0.0;
  for (const auto& task : suite.tasks) {
    double ss = 0.0;
    for (std::size_t i = 0; i < task.test.size(); ++i) ss += task.test.y(i)[0] * task.test.y(i)[0];
    oracle += 100.0 * ss / static_cast<double>(task.test.size()) / static_cast<double>(suite.tasks.size());
  }
  EXPECT_NEAR(t.rows[0].mean_loss, oracle, 1e-9 * oracle);
  EXPECT_NEAR(t.rows[0].mean_loss, 100.0, 15.0);
}

TEST(Evaluate, NeverMutatesTheTrainedPool) {
  auto pool = init_pool({{Role::generic(), Arch{{1, 6, 1}}, 4}}, 3);
  TrainConfig cfg;
  cfg.maml_mode = MamlMode::first_order;
  cfg.inner_steps = 3;
  cfg.inner_step_size = 0.01;
  cfg.search_steps = 50;
  const auto before = pool.digest();
  MethodArtifact m{"MOMA", Scheme::sum(), pool, cfg, MetatestMode::moma};
  auto suite = abs_plus_id_suite(4);
  evaluate_methods(std::span(&m, 1), suite, "s", 0, "d", 2);
  EXPECT_EQ(m.pool.digest(), before);
}

TEST(Evaluate, DimMismatchIsAConfigError) {
  auto pool = init_pool({{Role::generic(), Arch{{2, 3, 1}}, 2}}, 0);
  MethodArtifact m{"Pooled", Scheme::single(), pool, TrainConfig{}, MetatestMode::structure_only};
  auto suite = abs_plus_id_suite(2);
  EXPECT_THROW(evaluate_methods(std::span(&m, 1), suite, "s", 0, "d"), ConfigError);
}

TEST(Evaluate, StandardErrorUsesSampleDeviation) {
  std::vector<double> v{1.0, 2.0, 3.0, 6.0};
  auto s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.std_error, std::sqrt(14.0 / 3.0 / 4.0), 1e-15);
}

TEST(Emit, TableRoundTripsThroughCsv) {
  ResultTable t;
  t.rows.push_back({"sums16", "BounceGrad", 0.123456789012345678, 1.0 / 3.0, 26, 7, "abcdef0123456789"});
  t.rows.push_back({"sines", "MAML", 12.5, 0.0, 100, 7, "abcdef0123456789"});
  auto dir = testutil::scratch_dir("emit_table");
  auto f = emit_report(t, dir, "results", Sidecar{"abcdef0123456789", 7});
  auto back = table_from_csv(read_text_file(f.data));
  ASSERT_EQ(back.rows.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(back.rows[i].mean_loss, t.rows[i].mean_loss, 1e-12);
    EXPECT_NEAR(back.rows[i].std_error, t.rows[i].std_error, 1e-12);
    EXPECT_EQ(back.rows[i].method, t.rows[i].method);
    EXPECT_EQ(back.rows[i].n_tasks, t.rows[i].n_tasks);
  }
  auto side = json::parse(read_text_file(f.sidecar));
  EXPECT_EQ(side["config_digest"], "abcdef0123456789");
  EXPECT_EQ(side["seed"], 7);
  EXPECT_TRUE(side.contains("generated_at"));
}

TEST(Emit, EmptyTableIsHeaderOnly) {
  auto dir = testutil::scratch_dir("emit_empty");
  auto f = emit_report(ResultTable{}, dir, "empty", Sidecar{});
  EXPECT_EQ(read_text_file(f.data), "suite,method,mean_loss,std_error,n_tasks,seed,config_digest\n");
  EXPECT_TRUE(table_from_csv(read_text_file(f.data)).rows.empty());
}

TEST(Emit, RepeatedEmissionIsIdenticalApartFromTimestamp) {
  std::vector<Structure> s{Structure{{0, 1}, {}}, Structure{{1, 2}, {}}, Structure{{0, 2}, {}}};
  std::vector<std::string> g{"a", "b", "a"};
  auto m = sharing_matrix(s, g, {"a", "b", "c"});
  auto d1 = testutil::scratch_dir("emit_twice_1"), d2 = testutil::scratch_dir("emit_twice_2");
  auto f1 = emit_report(m, d1, "sharing", Sidecar{"00", 1});
  auto f2 = emit_report(m, d2, "sharing", Sidecar{"00", 1});
  EXPECT_EQ(read_text_file(f1.data), read_text_file(f2.data));
  EXPECT_EQ(strip_timestamp(read_text_file(f1.sidecar)), strip_timestamp(read_text_file(f2.sidecar)));

  auto back = matrix_from_csv(read_text_file(f1.data));
  EXPECT_EQ(back.labels, m.labels);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      if (std::isnan(m.values[a][b])) {
        EXPECT_TRUE(std::isnan(back.values[a][b]));
      } else {
        EXPECT_NEAR(back.values[a][b], m.values[a][b], 1e-12);
      }
    }
}

TEST(Emit, MalformedTablesAreIngestErrors) {
  EXPECT_THROW(table_from_csv("suite,method\n"), IngestError);
  EXPECT_THROW(table_from_csv("suite,method,mean_loss,std_error,n_tasks,seed,config_digest\na,b,1\n"), IngestError);
  EXPECT_THROW(table_from_csv("suite,method,mean_loss,std_error,n_tasks,seed,config_digest\na,b,x,1,1,1,d\n"),
               IngestError);
  EXPECT_THROW(matrix_from_csv("label,a\n"), IngestError);
}
