#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "modmeta/annealing.hpp"
#include "modmeta/fixtures.hpp"
#include "modmeta/meta_learn.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/nn.hpp"
#include "modmeta/optimizer.hpp"
#include "modmeta/report.hpp"
#include "modmeta/structure.hpp"
#include "modmeta/tasks.hpp"

namespace modmeta::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CheckSizes {
  std::size_t gradient_seeds = 20;
  double gradient_tol = 1e-3;
  std::size_t oracle_runs = 50;
  double oracle_rate = 0.9;
  std::size_t premature_seeds = 100;
  std::size_t metropolis_trials = 100000;
  std::size_t trajectory_iters = 200;

  static CheckSizes quick() {
    CheckSizes s;
    s.gradient_seeds = 3;
    s.oracle_runs = 10;
    s.premature_seeds = 10;
    s.trajectory_iters = 30;
    return s;
  }
};

namespace detail {

inline std::vector<double> flatten(const ModulePool& pool) {
  std::vector<double> v;
  for (std::size_t id = 0; id < pool.size(); ++id) {
    auto p = pool.params(static_cast<ModuleId>(id));
    v.insert(v.end(), p.begin(), p.end());
  }
  return v;
}

inline ModulePool unflatten(ModulePool pool, const std::vector<double>& v) {
  std::size_t off = 0;
  for (std::size_t id = 0; id < pool.size(); ++id)
    for (auto& x : pool.mutable_params(static_cast<ModuleId>(id))) x = v[off++];
  return pool;
}

inline std::vector<double> flatten(const ModuleGradients& g, const ModulePool& pool) {
  std::vector<double> v;
  for (std::size_t id = 0; id < pool.size(); ++id) {
    auto d = g.dense(static_cast<ModuleId>(id), pool.params(static_cast<ModuleId>(id)).size());
    v.insert(v.end(), d.begin(), d.end());
  }
  return v;
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace detail

/// Analytic structure gradients against central differences for every
/// scheme variant, plus the full second-order meta gradient.
inline CheckResult check_gradients(const CheckSizes& n = {}) {
  double worst = 0.0;
  std::string worst_case;
  for (std::uint64_t seed = 0; seed < n.gradient_seeds; ++seed) {
    for (auto& c : fixtures::scheme_cases(seed)) {
      Rng rng(seed + 1000);
      auto data = fixtures::random_dataset(rng, 5, c.in_dim, c.out_dim);
      StructureEvaluator ev;
      ModuleGradients g(c.pool.size());
      structure_gradient(c.scheme, c.structure, c.pool, data, g, ev);
      auto fd = fixtures::central_difference(
          [&](const std::vector<double>& v) {
            return mean_squared_error(data, c.scheme, c.structure, detail::unflatten(c.pool, v), ev);
          },
          detail::flatten(c.pool));
      const double e = fixtures::relative_error(detail::flatten(g, c.pool), fd);
      if (!(e <= worst)) {
        worst = e;
        worst_case = c.name + " seed " + std::to_string(seed);
      }
    }
    // Meta gradient through five inner steps on a sum structure.
    auto c = fixtures::scheme_cases(seed)[1];
    Rng rng(seed + 2000);
    auto train = fixtures::random_dataset(rng, 4, c.in_dim, c.out_dim);
    auto test = fixtures::random_dataset(rng, 4, c.in_dim, c.out_dim);
    StructureEvaluator ev;
    ModuleGradients g(c.pool.size());
    meta_task_gradient(c.scheme, c.structure, c.pool, train, test, MamlMode::full, 0.001, 5, g, ev);
    auto fd = fixtures::central_difference(
        [&](const std::vector<double>& v) {
          return maml_eval(train, test, c.scheme, c.structure, detail::unflatten(c.pool, v), 0.001, 5, ev) /
                 kLossScale;
        },
        detail::flatten(c.pool));
    const double e = fixtures::relative_error(detail::flatten(g, c.pool), fd);
    if (!(e <= worst)) {
      worst = e;
      worst_case = "maml_full seed " + std::to_string(seed);
    }
  }
  return {"gradients", worst < n.gradient_tol,
          "max relative error " + detail::fmt(worst) + " (" + worst_case + "), tolerance " +
              detail::fmt(n.gradient_tol)};
}

/// Online search on planted instances (64-structure spaces) reaches the
/// brute-force optimum.
inline CheckResult check_annealing_oracle(const CheckSizes& n = {}) {
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < n.oracle_runs; ++seed) {
    auto p = fixtures::planted_search(seed);
    StructureEvaluator ev;
    double best = std::numeric_limits<double>::infinity();
    for (auto& s : enumerate_structures(p.scheme, p.pool, 1000))
      best = std::min(best, task_error(p.train, p.scheme, s, p.pool, ev));
    Rng rng = stream(seed, 0, 1, Purpose::search);
    auto r = online_search(p.train, p.scheme, p.pool, AnnealSchedule{10.0, 0.01, 0.01}, rng);
    hits += r.best_error <= best + 1e-12;
  }
  const double rate = static_cast<double>(hits) / static_cast<double>(n.oracle_runs);
  return {"annealing_oracle", rate >= n.oracle_rate,
          std::to_string(hits) + "/" + std::to_string(n.oracle_runs) + " runs matched brute force"};
}

/// Two-module, one-slot family where greedy structure moves lock onto the
/// initially better module; annealing from a high temperature must reach the
/// zero-error solution strictly more often.
inline CheckResult check_premature_optimization(const CheckSizes& n = {}) {
  std::size_t annealed = 0, greedy = 0;
  for (std::uint64_t seed = 0; seed < n.premature_seeds; ++seed) {
    auto f = fixtures::premature_family(seed);
    TrainConfig c;
    c.iterations = 2000;
    c.optimizer.lr = 0.01;
    c.seed = seed;
    c.log_every = c.iterations;
    c.t0 = 50.0;
    c.t_end = 1e-3;
    annealed += bouncegrad_train(f.suite, Scheme::single(), f.pool, c).log.back().mean_train_error < 0.1;
    c.t0 = 1e-9;
    c.t_end = 1e-10;
    greedy += bouncegrad_train(f.suite, Scheme::single(), f.pool, c).log.back().mean_train_error < 0.1;
  }
  return {"premature_optimization", annealed > greedy,
          "optimum reached: annealed " + std::to_string(annealed) + ", greedy " + std::to_string(greedy) + " of " +
              std::to_string(n.premature_seeds)};
}

namespace detail {

inline TaskSuite small_sum_suite(std::uint64_t seed, std::size_t n_tasks) {
  SumSuiteSpec spec;
  spec.n_tasks = n_tasks;
  spec.seed = seed;
  return gen_sum_suite(spec);
}

inline std::vector<Example> sample_batch(const Dataset& d, Rng& rng, std::size_t n) {
  std::vector<Example> batch;
  for (std::size_t b = 0; b < n; ++b) {
    const auto i = static_cast<std::size_t>(rng.below(d.size()));
    auto x = d.x(i), y = d.y(i);
    batch.push_back({{x.begin(), x.end()}, {y.begin(), y.end()}});
  }
  return batch;
}

inline std::vector<Example> examples(const Dataset& d) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto x = d.x(i), y = d.y(i);
    out.push_back({{x.begin(), x.end()}, {y.begin(), y.end()}});
  }
  return out;
}

}  // namespace detail

/// With one module and the single scheme, BounceGrad is plain minibatch
/// training of one network: compare against a direct loop over the MLP and
/// Adam primitives. The plain run must agree bitwise; the adapted run is
/// first-order MAML with 5 inner steps of size 0.001.
inline CheckResult check_degenerate_equivalence(const CheckSizes& n = {}) {
  const std::uint64_t seed = 5;
  const auto suite = detail::small_sum_suite(seed, 12);
  const Arch arch{{1, 16, 16, 1}};
  const PoolSpec spec{{Role::generic(), arch, 1}};

  auto reference = [&](bool maml) {
    ModulePool pool = init_pool(spec, seed);
    ParamVector p(pool.params(0).begin(), pool.params(0).end());
    OptState opt(p.size(), AdamHyper{});
    for (std::size_t it = 0; it < n.trajectory_iters; ++it) {
      std::vector<double> total(p.size(), 0.0);
      for (std::size_t j = 0; j < suite.tasks.size(); ++j) {
        Rng rng = stream(seed, j, it, Purpose::grad);
        const auto batch = detail::sample_batch(suite.tasks[j].test, rng, 4);
        ParamVector q = p;
        if (maml) {
          const auto train = detail::examples(suite.tasks[j].train);
          for (int k = 0; k < 5; ++k) {
            const auto g = mlp_backward(arch, q, train).params;
            for (std::size_t i = 0; i < q.size(); ++i) q[i] -= 0.001 * kLossScale * g[i];
          }
        }
        const auto g = mlp_backward(arch, q, batch).params;
        for (std::size_t i = 0; i < p.size(); ++i) total[i] += g[i];
      }
      optimizer_step(opt, p, total);
    }
    return p;
  };

  TrainConfig c;
  c.iterations = n.trajectory_iters;
  c.seed = seed;
  c.batch_size = 4;
  c.log_every = c.iterations;
  const auto plain = bouncegrad_train(suite, Scheme::single(), spec, c).pool;
  c.maml_mode = MamlMode::first_order;
  c.inner_steps = 5;
  c.inner_step_size = 0.001;
  const auto adapted = bouncegrad_train(suite, Scheme::single(), spec, c).pool;

  const auto ref_plain = reference(false), ref_maml = reference(true);
  const bool plain_equal = std::equal(ref_plain.begin(), ref_plain.end(), plain.params(0).begin());
  const bool maml_equal = std::equal(ref_maml.begin(), ref_maml.end(), adapted.params(0).begin());
  return {"degenerate_equivalence", plain_equal && maml_equal,
          std::string("pooled trajectory ") + (plain_equal ? "bitwise equal" : "DIFFERS") + ", MAML trajectory " +
              (maml_equal ? "bitwise equal" : "DIFFERS") + " over " + std::to_string(n.trajectory_iters) +
              " iterations"};
}

/// Same seed, same result; thread count does not matter; every file format
/// reads back what was written.
inline CheckResult check_determinism_and_roundtrips(const std::filesystem::path& scratch,
                                                    const CheckSizes& n = {}) {
  std::vector<std::string> failures;
  const auto suite = detail::small_sum_suite(3, 16);
  const PoolSpec spec{{Role::generic(), Arch{{1, 8, 1}}, 3}, {Role::generic(), Arch{{1, 6, 6, 1}}, 3}};
  TrainConfig c;
  c.iterations = n.trajectory_iters;
  c.seed = 3;
  c.log_every = 10;
  c.tasks_per_step = 7;
  auto a = bouncegrad_train(suite, Scheme::sum(), spec, c);
  auto b = bouncegrad_train(suite, Scheme::sum(), spec, c);
  c.threads = 4;
  auto par = bouncegrad_train(suite, Scheme::sum(), spec, c);
  if (!(a.pool == b.pool) || a.structures != b.structures) failures.push_back("repeat run differs");
  if (!(a.pool == par.pool) || a.structures != par.structures) failures.push_back("parallel run differs");

  c.threads = 1;
  c.maml_mode = MamlMode::first_order;
  c.inner_steps = 2;
  c.iterations = std::max<std::size_t>(2, n.trajectory_iters / 4);
  auto ma = bouncegrad_train(suite, Scheme::compose(), spec, c);
  c.threads = 3;
  auto mb = bouncegrad_train(suite, Scheme::compose(), spec, c);
  if (!(ma.pool == mb.pool) || ma.structures != mb.structures) failures.push_back("parallel MOMA run differs");

  std::filesystem::create_directories(scratch);
  checkpoint_save(a.pool, scratch / "pool.json");
  if (!(checkpoint_load(scratch / "pool.json") == a.pool)) failures.push_back("checkpoint");

  for (std::uint64_t seed = 0; seed < 3; ++seed)
    for (auto& sc : fixtures::scheme_cases(seed)) {
      auto back = structure_from_json(sc.scheme, json::parse(structure_to_json(sc.scheme, sc.structure).dump()));
      if (!equivalent(sc.scheme, back, sc.structure) || !(scheme_from_json(scheme_to_json(sc.scheme)) == sc.scheme))
        failures.push_back("structure " + sc.name);
    }

  SumSuiteSpec raw_spec;
  raw_spec.n_tasks = 4;
  const auto raw = gen_sum_suite_raw(raw_spec);
  const auto raw_back = load_csv_suite(save_csv_suite(raw, scratch / "raw_suite"));
  const auto expected = standardize(raw);
  bool raw_exact = raw_back.tasks.size() == raw.tasks.size() && raw_back.stats == expected.stats;
  for (std::size_t t = 0; raw_exact && t < raw.tasks.size(); ++t)
    raw_exact = raw_back.tasks[t].train == expected.tasks[t].train &&
                raw_back.tasks[t].test == expected.tasks[t].test && raw_back.tasks[t].labels == raw.tasks[t].labels;
  if (!raw_exact) failures.push_back("raw suite csv");
  const auto std_back = load_csv_suite(save_csv_suite(suite, scratch / "suite"));
  for (std::size_t t = 0; t < suite.tasks.size(); ++t)
    for (std::size_t i = 0; i < suite.tasks[t].test.size(); ++i)
      if (std::abs(std_back.tasks[t].test.y(i)[0] - suite.tasks[t].test.y(i)[0]) > 1e-12) {
        failures.push_back("standardized suite csv");
        t = suite.tasks.size();
        break;
      }

  ResultTable table;
  table.rows.push_back({"s", "BounceGrad", 1.0 / 3.0, 0.1, 4, 3, "00ff"});
  const auto files = emit_report(table, scratch, "table", Sidecar{"00ff", 3});
  if (!(table_from_csv(read_text_file(files.data)) == table)) failures.push_back("result table");

  std::string detail = "serial, parallel and repeated runs identical; checkpoint, structure, suite and table files "
                       "round-trip";
  if (!failures.empty()) {
    detail = "failed:";
    for (const auto& f : failures) detail += " [" + f + "]";
  }
  return {"determinism_and_serialization", failures.empty(), detail};
}

/// Empirical Metropolis acceptance for (delta 0.5, T 0.5) and softmax
/// normalization.
inline CheckResult check_metropolis(const CheckSizes& n = {}) {
  Rng rng(20240607);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n.metropolis_trials; ++i) hits += accept(1.5, 1.0, 0.5, rng);
  const double rate = static_cast<double>(hits) / static_cast<double>(n.metropolis_trials);
  const double gap = std::abs(rate - std::exp(-1.0));

  double worst_sum = 0.0;
  Rng wr(7);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(1 + wr.below(10));
    for (auto& v : s) v = wr.uniform(-700.0, 700.0);
    double total = 0.0;
    for (double w : softmax(s)) total += w;
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  }
  // Ensemble weights: softmax over the attention modules' scores.
  for (auto& sc : fixtures::scheme_cases(0)) {
    if (sc.scheme.kind != SchemeKind::weighted_ensemble) continue;
    const std::size_t m = sc.scheme.ensemble_size;
    Rng xr(1);
    for (int t = 0; t < 100; ++t) {
      std::vector<double> x(sc.in_dim);
      for (auto& v : x) v = xr.uniform(-3.0, 3.0);
      std::vector<double> scores;
      for (std::size_t l = 0; l < m; ++l) scores.push_back(module_forward(sc.pool, sc.structure.modules[l], x)[0]);
      double total = 0.0;
      for (double w : softmax(scores)) total += w;
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
  }
  return {"metropolis", gap <= 0.01 && worst_sum <= 1e-9,
          "acceptance rate " + detail::fmt(rate) + " vs exp(-1) " + detail::fmt(std::exp(-1.0)) +
              "; worst softmax |sum - 1| " + detail::fmt(worst_sum)};
}

inline std::vector<CheckResult> run_all(const std::filesystem::path& scratch, const CheckSizes& n = {}) {
  return {check_gradients(n),
          check_annealing_oracle(n),
          check_premature_optimization(n),
          check_degenerate_equivalence(n),
          check_determinism_and_roundtrips(scratch, n),
          check_metropolis(n)};
}

}  // namespace modmeta::selftest
