#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "modmeta/structure.hpp"
#include "testutil.hpp"

using namespace modmeta;

namespace {

std::vector<double> flatten(const ModulePool& pool) {
  std::vector<double> v;
  for (std::size_t id = 0; id < pool.size(); ++id) {
    auto p = pool.params(static_cast<ModuleId>(id));
    v.insert(v.end(), p.begin(), p.end());
  }
  return v;
}

ModulePool unflatten(ModulePool pool, const std::vector<double>& v) {
  std::size_t off = 0;
  for (std::size_t id = 0; id < pool.size(); ++id) {
    auto& p = pool.mutable_params(static_cast<ModuleId>(id));
    for (auto& x : p) x = v[off++];
  }
  return pool;
}

std::vector<double> flatten(const ModuleGradients& g, const ModulePool& pool) {
  std::vector<double> v;
  for (std::size_t id = 0; id < pool.size(); ++id) {
    auto d = g.dense(static_cast<ModuleId>(id), pool.params(static_cast<ModuleId>(id)).size());
    v.insert(v.end(), d.begin(), d.end());
  }
  return v;
}

}  // namespace

TEST(StructureGradient, MatchesFiniteDifferencesForEveryScheme) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (auto& c : testutil::scheme_cases(seed)) {
      validate_structure(c.scheme, c.structure, c.pool);
      Rng rng(seed + 100);
      auto data = testutil::random_dataset(rng, 5, c.in_dim, c.out_dim);
      StructureEvaluator ev;
      ModuleGradients g(c.pool.size());
      structure_gradient(c.scheme, c.structure, c.pool, data, g, ev);
      auto fd = testutil::central_difference(
          [&](const std::vector<double>& v) {
            auto p = unflatten(c.pool, v);
            return mean_squared_error(data, c.scheme, c.structure, p, ev);
          },
          flatten(c.pool));
      EXPECT_LT(testutil::relative_error(flatten(g, c.pool), fd), 1e-6) << c.name << " seed " << seed;
    }
  }
}

TEST(StructureGradient, TiedModuleReceivesSumOfSlotGradients) {
  // f(x) = w x + b, sum scheme with the same module twice: h = 2 (w x + b).
  ModulePool pool;
  pool.add_group(Role::generic(), Arch{{1, 1}}, {{0.5, 0.1}, {0.0, 0.0}});
  Dataset d(1, 1);
  d.add({2.0}, {1.0});
  auto g = structure_gradient(Scheme::sum(), Structure{{0, 0}, {}}, pool, d);
  const double r = 2.0 * (0.5 * 2.0 + 0.1) - 1.0;
  EXPECT_NEAR(g.get(0)[0], 2.0 * r * 2.0 * 2.0, 1e-12);
  EXPECT_NEAR(g.get(0)[1], 2.0 * r * 2.0, 1e-12);
  EXPECT_FALSE(g.touched(1));
}

TEST(StructureForward, SchemesComposeAsDefined) {
  ModulePool pool;
  // Linear 1-1 modules: f0 = 2x + 1, f1 = -x + 3.
  pool.add_group(Role::generic(), Arch{{1, 1}}, {{2.0, 1.0}, {-1.0, 3.0}});
  const std::vector<double> x{0.5};
  EXPECT_DOUBLE_EQ(structure_forward(Scheme::single(), Structure{{1}, {}}, pool, x)[0], 2.5);
  EXPECT_DOUBLE_EQ(structure_forward(Scheme::sum(), Structure{{0, 1}, {}}, pool, x)[0], 2.0 + 2.5);
  // compose [a, b] = f_a(f_b(x)) = f0(f1(0.5)) = 2 * 2.5 + 1
  EXPECT_DOUBLE_EQ(structure_forward(Scheme::compose(), Structure{{0, 1}, {}}, pool, x)[0], 6.0);
  // tree: root f0 over children f1, f1 -> f0(2.5 + 2.5)
  EXPECT_DOUBLE_EQ(structure_forward(Scheme::tree(), Structure{{0, 1, 1}, {-1, 0, 0}}, pool, x)[0], 11.0);
}

TEST(StructureForward, EnsembleWeightsAreSoftmaxOfAttention) {
  ModulePool pool;
  pool.add_group(Role::attention(), Arch{{1, 1}}, {{0.0, 1.0}, {0.0, 2.0}});
  pool.add_group(Role::regressor(), Arch{{1, 1}}, {{0.0, 10.0}, {0.0, 20.0}});
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  auto y = structure_forward(Scheme::weighted_ensemble(2), Structure{{0, 1, 2, 3}, {}}, pool, std::vector<double>{0.3});
  EXPECT_NEAR(y[0], (10.0 * e1 + 20.0 * e2) / (e1 + e2), 1e-12);
}

TEST(Softmax, SumsToOneAndSurvivesLargeScores) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s(1 + rng.below(8));
    for (auto& v : s) v = rng.uniform(-800.0, 800.0);
    auto w = softmax(s);
    double total = 0.0;
    for (double v : w) {
      EXPECT_TRUE(std::isfinite(v));
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Propose, AlwaysStaysInsideTheStructureSpace) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto& c : testutil::scheme_cases(seed)) {
      Rng rng(seed);
      Structure s = c.structure;
      for (int i = 0; i < 200; ++i) {
        auto next = propose(c.scheme, s, c.pool, rng);
        if (!next) break;
        ASSERT_NO_THROW(validate_structure(c.scheme, *next, c.pool)) << c.name;
        ASSERT_FALSE(*next == s) << c.name;
        s = *next;
      }
    }
  }
}

TEST(Propose, FixedSchemesChangeExactlyOneSlotAndNeverTheEncoder) {
  auto cases = testutil::scheme_cases(4);
  for (auto& c : cases) {
    if (c.scheme.is_tree()) continue;
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
      auto next = propose(c.scheme, c.structure, c.pool, rng);
      if (!next) break;
      int changed = 0;
      for (std::size_t k = 0; k < next->size(); ++k) changed += next->modules[k] != c.structure.modules[k];
      EXPECT_EQ(changed, 1) << c.name;
      if (c.scheme.kind == SchemeKind::concat_heads) {
        EXPECT_EQ(next->modules[0], c.structure.modules[0]);
      }
    }
  }
}

TEST(Propose, SingleModulePoolHasNoMoves) {
  auto pool = init_pool({{Role::generic(), Arch{{1, 4, 1}}, 1}}, 0);
  Rng rng(0);
  EXPECT_FALSE(propose(Scheme::single(), Structure{{0}, {}}, pool, rng).has_value());
}

TEST(Enumerate, FixedSchemeSizeIsProductOfSlotChoices) {
  auto pool = init_pool({{Role::generic(), Arch{{1, 2, 1}}, 4}}, 0);
  EXPECT_EQ(enumerate_structures(Scheme::sum(), pool, 1000).size(), 16u);
  EXPECT_THROW(enumerate_structures(Scheme::sum(), pool, 10), CapacityError);
}

TEST(Enumerate, TreesMatchIndependentCanonicalCount) {
  // Oracle: grow every tree by insertions from every root and dedupe by
  // canonical form.
  auto pool = init_pool({{Role::generic(), Arch{{1, 2, 1}}, 2}}, 0);
  for (auto [depth, nodes] : {std::pair{1, 1}, {2, 3}, {2, 4}, {3, 4}, {3, 5}}) {
    Scheme scheme = Scheme::tree(depth, nodes);
    std::set<std::string> seen;
    std::vector<Structure> frontier;
    for (ModuleId id = 0; id < 2; ++id) frontier.push_back(Structure{{id}, {-1}});
    while (!frontier.empty()) {
      Structure s = frontier.back();
      frontier.pop_back();
      if (!seen.insert(tree::canonical(s)).second) continue;
      auto d = tree::depths(s);
      if (s.size() >= static_cast<std::size_t>(nodes)) continue;
      for (std::size_t at = 0; at < s.size(); ++at) {
        if (d[at] >= static_cast<std::size_t>(depth)) continue;
        for (ModuleId id = 0; id < 2; ++id) {
          Structure t = s;
          t.modules.push_back(id);
          t.parent.push_back(static_cast<int>(at));
          frontier.push_back(t);
        }
      }
    }
    auto all = enumerate_structures(scheme, pool, 100000);
    std::set<std::string> got;
    for (auto& s : all) {
      validate_structure(scheme, s, pool);
      got.insert(tree::canonical(s));
    }
    EXPECT_EQ(got.size(), all.size()) << "duplicates for depth " << depth << " nodes " << nodes;
    EXPECT_EQ(got, seen) << "depth " << depth << " nodes " << nodes;
  }
}

TEST(Validate, RejectsOutOfSpaceStructures) {
  auto pool = init_pool({{Role::generic(), Arch{{1, 2, 1}}, 2}}, 0);
  EXPECT_THROW(validate_structure(Scheme::sum(), Structure{{0}, {}}, pool), ConfigError);
  EXPECT_THROW(validate_structure(Scheme::sum(), Structure{{0, 5}, {}}, pool), ConfigError);
  EXPECT_THROW(validate_structure(Scheme::tree(2, 7), Structure{{0, 0, 0}, {-1, 0, 1}}, pool), ConfigError);
  EXPECT_THROW(validate_structure(Scheme::tree(3, 2), Structure{{0, 0, 0}, {-1, 0, 0}}, pool), ConfigError);
}

TEST(Validate, SchemeNeedsCompatiblePool) {
  auto pool = init_pool({{Role::generic(), Arch{{2, 3, 1}}, 2}}, 0);
  EXPECT_THROW(validate_scheme(Scheme::compose(), pool), ConfigError);
  EXPECT_THROW(validate_scheme(Scheme::weighted_ensemble(2), pool), ConfigError);
  EXPECT_NO_THROW(validate_scheme(Scheme::sum(), pool));
}

TEST(StructureJson, RoundTripsEveryScheme) {
  for (auto& c : testutil::scheme_cases(2)) {
    auto j = structure_to_json(c.scheme, c.structure);
    auto back = structure_from_json(c.scheme, json::parse(j.dump()));
    EXPECT_TRUE(equivalent(c.scheme, back, c.structure)) << c.name;
    EXPECT_EQ(scheme_from_json(scheme_to_json(c.scheme)), c.scheme);
  }
}

TEST(TaskError, ConstantZeroPredictorScoresHundredTimesTargetPower) {
  ModulePool pool;
  pool.add_group(Role::generic(), Arch{{1, 1}}, {{0.0, 0.0}});
  Dataset d(1, 1);
  d.add({0.0}, {1.0});
  d.add({1.0}, {-3.0});
  EXPECT_DOUBLE_EQ(task_error(d, Scheme::single(), Structure{{0}, {}}, pool), 100.0 * (1.0 + 9.0) / 2.0);
}
