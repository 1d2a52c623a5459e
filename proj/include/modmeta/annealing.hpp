#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "modmeta/dataset.hpp"
#include "modmeta/error.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/parallel.hpp"
#include "modmeta/rng.hpp"
#include "modmeta/structure.hpp"

namespace modmeta {

/// Linear cooling T0, T0 - dT, ... while T >= T_end (and T > 0).
struct AnnealSchedule {
  double t0 = 2.0;
  double dt = 0.001;
  double t_end = 0.01;

  void validate() const {
    if (!(std::isfinite(t0) && t0 > 0.0)) throw ConfigError("schedule.t0 must be > 0");
    if (!(std::isfinite(dt) && dt > 0.0)) throw ConfigError("schedule.dt must be > 0");
    if (!(std::isfinite(t_end) && t_end >= 0.0)) throw ConfigError("schedule.t_end must be >= 0");
    if (!(t_end < t0)) throw ConfigError("schedule.t_end must be < t0");
  }

  std::size_t steps() const {
    validate();
    // The small slack absorbs rounding in (t0 - t_end) / dt.
    auto n = static_cast<std::size_t>(std::floor((t0 - t_end) / dt + 1e-9)) + 1;
    while (n > 0 && !(temperature(n - 1) > 0.0)) --n;
    return n;
  }

  /// T at step k, computed directly (not by repeated subtraction), floored
  /// at t_end so the last step never dips below it through rounding.
  double temperature(std::size_t k) const {
    return std::max(t0 - static_cast<double>(k) * dt, t_end);
  }

  /// Schedule from t0 to t_end in exactly n steps.
  static AnnealSchedule with_steps(double t0, double t_end, std::size_t n) {
    if (n == 0) throw ConfigError("schedule needs at least one step");
    AnnealSchedule s{t0, n == 1 ? (t0 - t_end) * 2.0 + 1.0 : (t0 - t_end) / static_cast<double>(n - 1),
                     t_end};
    s.validate();
    return s;
  }
};

inline double accept_probability(double v_new, double v_old, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  if (v_new < v_old) return 1.0;
  return std::exp((v_old - v_new) / temperature);
}

/// Metropolis rule: always take strict improvements, otherwise accept with
/// probability exp((v_old - v_new) / T).
inline bool accept(double v_new, double v_old, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  if (v_new < v_old) return true;
  return rng.uniform() < std::exp((v_old - v_new) / temperature);
}

struct SearchResult {
  Structure best;
  double best_error = std::numeric_limits<double>::infinity();
  Structure initial;
  double initial_error = std::numeric_limits<double>::infinity();
  Structure current;
  double current_error = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
  std::size_t accepted = 0;
};

/// Simulated-annealing structure search with an arbitrary score. Returns the
/// best-scoring structure seen along the chain, together with the final
/// chain state.
template <class Score>
SearchResult online_search_with(const Scheme& scheme, const ModulePool& pool,
                                const AnnealSchedule& schedule, Rng& rng, Score&& score) {
  const std::size_t n = schedule.steps();
  SearchResult r;
  r.current = initial_structure(scheme, pool, rng);
  r.current_error = score(r.current);
  r.initial = r.current;
  r.initial_error = r.current_error;
  r.best = r.current;
  r.best_error = r.current_error;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = schedule.temperature(k);
    ++r.steps;
    auto candidate = propose(scheme, r.current, pool, rng);
    if (!candidate) continue;
    const double e = score(*candidate);
    if (accept(e, r.current_error, t, rng)) {
      r.current = std::move(*candidate);
      r.current_error = e;
      ++r.accepted;
      if (r.current_error < r.best_error) {
        r.best = r.current;
        r.best_error = r.current_error;
      }
    }
  }
  return r;
}

/// Meta-test structure selection on a fixed pool, scored by task_error on
/// the training set.
inline SearchResult online_search(const Dataset& train, const Scheme& scheme, const ModulePool& pool,
                                  const AnnealSchedule& schedule, Rng& rng) {
  if (train.empty()) throw DomainError("online_search: empty training set");
  StructureEvaluator ev;
  return online_search_with(scheme, pool, schedule, rng,
                            [&](const Structure& s) { return task_error(train, scheme, s, pool, ev); });
}

struct BounceOutcome {
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  std::vector<double> errors;  // score of each task's structure after the step
};

/// One annealing step per listed task at fixed temperature. `score(task,
/// structure, evaluator)` rates a structure on that task's training data;
/// task j draws from stream(seed, j, iteration, bounce).
template <class Score>
BounceOutcome bounce_with(std::vector<Structure>& structures, std::span<const std::size_t> tasks,
                          double temperature, const Scheme& scheme, const ModulePool& pool,
                          std::uint64_t seed, std::uint64_t iteration, std::size_t threads,
                          Score&& score) {
  if (!(temperature > 0.0)) throw DomainError("bounce: temperature must be > 0");
  std::vector<char> took(tasks.size(), 0), proposed(tasks.size(), 0);
  std::vector<double> errors(tasks.size());
  std::vector<StructureEvaluator> evs(std::max<std::size_t>(1, threads));
  const std::size_t workers = evs.size();
  const std::size_t chunk = (tasks.size() + workers - 1) / std::max<std::size_t>(1, workers);
  parallel_for(workers, workers, [&](std::size_t w) {
    const std::size_t begin = w * chunk, end = std::min(tasks.size(), begin + chunk);
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t j = tasks[i];
      Rng rng = stream(seed, j, iteration, Purpose::bounce);
      Structure& current = structures[j];
      const double old_error = score(j, current, evs[w]);
      errors[i] = old_error;
      auto candidate = propose(scheme, current, pool, rng);
      if (!candidate) continue;
      proposed[i] = 1;
      const double new_error = score(j, *candidate, evs[w]);
      if (accept(new_error, old_error, temperature, rng)) {
        current = std::move(*candidate);
        errors[i] = new_error;
        took[i] = 1;
      }
    }
  });
  BounceOutcome out;
  out.errors = std::move(errors);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    out.proposals += proposed[i];
    out.accepted += took[i];
  }
  return out;
}

/// Bounce over every task, scored by task_error on each training set.
inline BounceOutcome bounce(std::vector<Structure>& structures, std::span<const Dataset> train_sets,
                            double temperature, const Scheme& scheme, const ModulePool& pool,
                            std::uint64_t seed, std::uint64_t iteration, std::size_t threads = 1) {
  if (structures.size() != train_sets.size())
    throw ConfigError("bounce: structures and training sets differ in length");
  std::vector<std::size_t> all(structures.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return bounce_with(structures, all, temperature, scheme, pool, seed, iteration, threads,
                     [&](std::size_t j, const Structure& s, StructureEvaluator& ev) {
                       return task_error(train_sets[j], scheme, s, pool, ev);
                     });
}

}  // namespace modmeta
