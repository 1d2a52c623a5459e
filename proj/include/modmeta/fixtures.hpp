#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "modmeta/dataset.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/meta_learn.hpp"
#include "modmeta/rng.hpp"
#include "modmeta/structure.hpp"
#include "modmeta/tasks.hpp"

// Shared instances for property checks: finite differences, one case per
// scheme variant and planted search problems.
namespace modmeta::fixtures {

template <class F>
std::vector<double> central_difference(F&& f, std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double hi = f(x);
    x[i] = orig - h;
    const double lo = f(x);
    x[i] = orig;
    g[i] = (hi - lo) / (2.0 * h);
  }
  return g;
}

inline double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(norm(a), norm(b));
  return scale < 1e-14 ? 0.0 : std::sqrt(d) / scale;
}

inline Dataset random_dataset(Rng& rng, std::size_t n, std::size_t in, std::size_t out, double lo = -1.0,
                              double hi = 1.0) {
  Dataset d(in, out);
  std::vector<double> x(in), y(out);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : x) v = rng.uniform(lo, hi);
    for (auto& v : y) v = rng.uniform(lo, hi);
    d.add(x, y);
  }
  return d;
}



struct SchemeCase {
  std::string name;
  Scheme scheme;
  ModulePool pool;
  Structure structure;
  std::size_t in_dim = 1, out_dim = 1;
};

/// One instance of every scheme variant, including structures that reuse a
/// module in several slots.
inline std::vector<SchemeCase> scheme_cases(std::uint64_t seed) {
  std::vector<SchemeCase> cases;
  Rng rng(seed);
  auto walk = [&](SchemeCase& c, int steps) {
    c.structure = initial_structure(c.scheme, c.pool, rng);
    for (int i = 0; i < steps; ++i)
      if (auto next = propose(c.scheme, c.structure, c.pool, rng)) c.structure = *next;
  };
  const PoolSpec generic{{Role::generic(), Arch{{2, 6, 2}}, 3}, {Role::generic(), Arch{{2, 5, 4, 2}}, 2}};

  for (auto scheme : {Scheme::single(), Scheme::sum(), Scheme::compose(), Scheme::tree(3, 7)}) {
    SchemeCase c{scheme.name(), scheme, init_pool(generic, seed), {}, 2, 2};
    walk(c, 12);
    cases.push_back(c);
  }
  {
    SchemeCase c{"sum_tied", Scheme::sum(), init_pool(generic, seed), Structure{{3, 3}, {}}, 2, 2};
    cases.push_back(c);
    c.name = "compose_tied";
    c.scheme = Scheme::compose();
    c.structure = Structure{{1, 1}, {}};
    cases.push_back(c);
    c.name = "tree_tied";
    c.scheme = Scheme::tree(3, 7);
    c.structure = Structure{{2, 2, 4, 2, 2}, {-1, 0, 0, 1, 1}};
    cases.push_back(c);
  }
  {
    const PoolSpec spec{{Role::attention(), Arch{{3, 4, 1}}, 3}, {Role::regressor(), Arch{{3, 5, 2}}, 3}};
    SchemeCase c{"weighted_ensemble", Scheme::weighted_ensemble(3), init_pool(spec, seed), {}, 3, 2};
    walk(c, 10);
    cases.push_back(c);
    c.name = "weighted_ensemble_tied";
    c.structure = Structure{{0, 0, 1, 4, 4, 4}, {}};
    cases.push_back(c);
  }
  {
    const PoolSpec spec{{Role::encoder(), Arch{{3, 6, 4}}, 1},
                        {Role::head_block(0), Arch{{4, 3, 2}}, 2},
                        {Role::head_block(1), Arch{{4, 3, 1}}, 2}};
    SchemeCase c{"concat_heads", Scheme::concat_heads({2, 1}), init_pool(spec, seed), {}, 3, 3};
    walk(c, 5);
    cases.push_back(c);
  }
  return cases;
}


/// A random pool and a task generated exactly by one of its structures, so
/// the brute-force optimum has zero error.
struct PlantedSearch {
  Scheme scheme;
  ModulePool pool;
  Structure truth;
  Dataset train;
};

inline PlantedSearch planted_search(std::uint64_t seed) {
  PlantedSearch p;
  p.scheme = seed % 2 == 0 ? Scheme::sum() : Scheme::compose();
  p.pool = init_pool({{Role::generic(), Arch{{1, 8, 1}}, 4}, {Role::generic(), Arch{{1, 6, 6, 1}}, 4}}, seed);
  Rng rng = stream(seed, 0, 0, Purpose::search);
  p.truth = initial_structure(p.scheme, p.pool, rng);
  p.train = Dataset(1, 1);
  for (int i = 0; i < 16; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const std::vector<double> xv{x};
    p.train.add(xv, structure_forward(p.scheme, p.truth, p.pool, xv));
  }
  return p;
}

/// Two clusters of constant tasks, y = +0.1 and y = -0.1, and a one-slot
/// scheme over two linear modules: "red" starts near the clusters and "blue"
/// far away. Greedy structure moves leave blue unused forever; the two-module
/// solution requires blue to be tried while it is still bad.
struct PrematureFamily {
  TaskSuite suite;
  ModulePool pool;
};

inline PrematureFamily premature_family(std::uint64_t seed, std::size_t per_cluster = 10) {
  PrematureFamily f;
  Rng rng = stream(seed, 0, 0, Purpose::suite);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < per_cluster; ++t) {
      TaskData task{Dataset(1, 1), Dataset(1, 1), {c == 0 ? "up" : "down"}};
      const double level = c == 0 ? 0.1 : -0.1;
      for (Dataset* ds : {&task.train, &task.test})
        for (int i = 0; i < 8; ++i) ds->add({rng.uniform(-1.0, 1.0)}, {level});
      f.suite.tasks.push_back(std::move(task));
    }
  // Modules are y = w x + b with a small random slope.
  const double jitter = 0.01 * (rng.uniform() - 0.5);
  f.pool.add_group(Role::generic(), Arch{{1, 1}}, {{jitter, 0.05}, {-jitter, 0.5}});
  f.pool.set_seed(seed);
  return f;
}

}  // namespace modmeta::fixtures
