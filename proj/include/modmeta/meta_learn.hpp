#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "modmeta/annealing.hpp"
#include "modmeta/dataset.hpp"
#include "modmeta/error.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/optimizer.hpp"
#include "modmeta/parallel.hpp"
#include "modmeta/rng.hpp"
#include "modmeta/structure.hpp"
#include "modmeta/tasks.hpp"

namespace modmeta {

enum class MamlMode { off, first_order, full };

inline std::string to_string(MamlMode m) {
  switch (m) {
    case MamlMode::off: return "off";
    case MamlMode::first_order: return "first_order";
    case MamlMode::full: return "full";
  }
  return "?";
}

inline MamlMode maml_mode_from_string(const std::string& s) {
  if (s == "off") return MamlMode::off;
  if (s == "first_order") return MamlMode::first_order;
  if (s == "full") return MamlMode::full;
  throw ConfigError("unknown maml_mode '" + s + "'");
}

struct TrainConfig {
  AdamHyper optimizer{};
  std::size_t iterations = 1000;
  // Outer cooling: T0 at iteration 0 down to T_end at the last iteration.
  double t0 = 2.0;
  double t_end = 0.01;
  MamlMode maml_mode = MamlMode::off;
  std::size_t inner_steps = 0;
  double inner_step_size = 0.001;
  // Test points drawn per task for each gradient step.
  std::size_t batch_size = 1;
  // Tasks visited per outer iteration; 0 visits every task.
  std::size_t tasks_per_step = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::size_t log_every = 100;
  // Meta-test structure search.
  double search_t0 = 2.0;
  double search_t_end = 0.01;
  std::size_t search_steps = 1000;

  AnnealSchedule schedule() const { return AnnealSchedule::with_steps(t0, t_end, iterations); }
  AnnealSchedule search_schedule() const { return AnnealSchedule::with_steps(search_t0, search_t_end, search_steps); }

  void validate() const {
    optimizer.validate();
    if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
    if (!(t0 > 0.0) || !(t_end >= 0.0) || !(t_end < t0))
      throw ConfigError("train.t0/t_end must satisfy 0 <= t_end < t0");
    if ((inner_steps == 0) != (maml_mode == MamlMode::off))
      throw ConfigError("train.inner_steps must be 0 exactly when train.maml_mode is off");
    if (!(inner_step_size > 0.0)) throw ConfigError("train.inner_step_size must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (threads < 1) throw ConfigError("train.threads must be >= 1");
    if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
    if (!(search_t0 > 0.0) || !(search_t_end >= 0.0) || !(search_t_end < search_t0))
      throw ConfigError("train.search_t0/search_t_end must satisfy 0 <= t_end < t0");
    if (search_steps < 1) throw ConfigError("train.search_steps must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Scoped parameters

/// A view of a pool with some modules replaced by adapted copies. The base
/// pool is never written.
class ParamOverlay {
 public:
  explicit ParamOverlay(const ModulePool& base) : base_(&base), over_(base.size()) {}

  std::size_t size() const { return base_->size(); }
  const Arch& arch(ModuleId id) const { return base_->arch(id); }
  std::span<const double> params(ModuleId id) const {
    const auto& o = over_[static_cast<std::size_t>(id)];
    return o.empty() ? base_->params(id) : std::span<const double>(o);
  }
  bool overridden(ModuleId id) const { return !over_[static_cast<std::size_t>(id)].empty(); }

  ParamVector& adapted(ModuleId id) {
    auto& o = over_[static_cast<std::size_t>(id)];
    if (o.empty()) {
      auto p = base_->params(id);
      o.assign(p.begin(), p.end());
    }
    return o;
  }

  const ModulePool& base() const { return *base_; }

  /// Modules with adapted copies, in id order.
  std::vector<std::pair<ModuleId, ParamVector>> overrides() const {
    std::vector<std::pair<ModuleId, ParamVector>> v;
    for (std::size_t i = 0; i < over_.size(); ++i)
      if (!over_[i].empty()) v.emplace_back(static_cast<ModuleId>(i), over_[i]);
    return v;
  }

 private:
  const ModulePool* base_;
  std::vector<ParamVector> over_;
};

// ---------------------------------------------------------------------------
// Inner-loop adaptation: theta' = theta - step * grad e(D, S, theta), where e
// is the reported (x100) task error.

namespace detail {

inline void descend(ParamOverlay& params, const Structure& s, const Scheme& scheme, const Dataset& data,
                    double step, ModuleGradients& g, StructureEvaluator& ev) {
  g.clear();
  structure_gradient(scheme, s, params, data, g, ev);
  for (std::size_t id = 0; id < g.size(); ++id) {
    if (!g.touched(static_cast<ModuleId>(id))) continue;
    auto grad = g.get(static_cast<ModuleId>(id));
    auto& p = params.adapted(static_cast<ModuleId>(id));
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= step * kLossScale * grad[k];
  }
}

}  // namespace detail

inline ParamOverlay inner_adapt(const ModulePool& pool, const Dataset& data, const Scheme& scheme,
                                const Structure& s, double step, std::size_t n_steps, StructureEvaluator& ev) {
  ParamOverlay adapted(pool);
  if (n_steps == 0) return adapted;
  if (data.empty()) throw DomainError("inner_adapt: empty adaptation set");
  ModuleGradients g(pool.size());
  for (std::size_t k = 0; k < n_steps; ++k) detail::descend(adapted, s, scheme, data, step, g, ev);
  return adapted;
}

inline ParamOverlay inner_adapt(const ModulePool& pool, const Dataset& data, const Scheme& scheme,
                                const Structure& s, double step, std::size_t n_steps) {
  StructureEvaluator ev;
  return inner_adapt(pool, data, scheme, s, step, n_steps, ev);
}

/// e_maml: task error on d_eval after adapting on d_adapt.
inline double maml_eval(const Dataset& d_adapt, const Dataset& d_eval, const Scheme& scheme, const Structure& s,
                        const ModulePool& pool, double step, std::size_t n_steps, StructureEvaluator& ev) {
  if (d_eval.empty() || (n_steps > 0 && d_adapt.empty())) throw DomainError("maml_eval: empty dataset");
  const ParamOverlay adapted = inner_adapt(pool, d_adapt, scheme, s, step, n_steps, ev);
  return task_error(d_eval, scheme, s, adapted, ev);
}

inline double maml_eval(const Dataset& d_adapt, const Dataset& d_eval, const Scheme& scheme, const Structure& s,
                        const ModulePool& pool, const TrainConfig& config) {
  if (config.maml_mode == MamlMode::off) throw ConfigError("maml_eval requires maml_mode != off");
  StructureEvaluator ev;
  return maml_eval(d_adapt, d_eval, scheme, s, pool, config.inner_step_size, config.inner_steps, ev);
}

// ---------------------------------------------------------------------------
// Per-task meta-gradient

/// Gradient of the (unscaled) squared error at `batch`, taken at the
/// parameters obtained by adapting on `adapt_set`. With MamlMode::full the
/// gradient is carried back through the inner steps using central-difference
/// Hessian-vector products; first_order stops at the adapted parameters.
inline void meta_task_gradient(const Scheme& scheme, const Structure& s, const ModulePool& pool,
                               const Dataset& adapt_set, const Dataset& batch, MamlMode mode, double step,
                               std::size_t n_steps, ModuleGradients& g, StructureEvaluator& ev) {
  if (g.size() != pool.size()) g = ModuleGradients(pool.size());
  g.clear();
  if (mode == MamlMode::off || n_steps == 0) {
    structure_gradient(scheme, s, pool, batch, g, ev);
    return;
  }
  if (adapt_set.empty()) throw DomainError("meta gradient: empty adaptation set");

  std::vector<ParamOverlay> path;
  path.emplace_back(pool);
  ModuleGradients scratch(pool.size());
  for (std::size_t k = 0; k < n_steps; ++k) {
    ParamOverlay next = path.back();
    detail::descend(next, s, scheme, adapt_set, step, scratch, ev);
    path.push_back(std::move(next));
  }
  structure_gradient(scheme, s, path.back(), batch, g, ev);
  if (mode == MamlMode::first_order) return;

  // v <- (I - step * H_k) v for k = n-1 .. 0, with H the Hessian of e.
  ModuleGradients plus(pool.size()), minus(pool.size());
  for (std::size_t k = n_steps; k-- > 0;) {
    double vmax = 0.0, pmax = 0.0;
    for (std::size_t id = 0; id < g.size(); ++id) {
      if (!g.touched(static_cast<ModuleId>(id))) continue;
      for (double v : g.get(static_cast<ModuleId>(id))) vmax = std::max(vmax, std::abs(v));
      for (double p : path[k].params(static_cast<ModuleId>(id))) pmax = std::max(pmax, std::abs(p));
    }
    if (vmax == 0.0) break;
    const double eps = 1e-5 * (1.0 + pmax) / vmax;
    ParamOverlay hi = path[k], lo = path[k];
    for (std::size_t id = 0; id < g.size(); ++id) {
      if (!g.touched(static_cast<ModuleId>(id))) continue;
      auto v = g.get(static_cast<ModuleId>(id));
      auto& ph = hi.adapted(static_cast<ModuleId>(id));
      auto& pl = lo.adapted(static_cast<ModuleId>(id));
      for (std::size_t i = 0; i < v.size(); ++i) {
        ph[i] += eps * v[i];
        pl[i] -= eps * v[i];
      }
    }
    plus.clear();
    minus.clear();
    structure_gradient(scheme, s, hi, adapt_set, plus, ev);
    structure_gradient(scheme, s, lo, adapt_set, minus, ev);
    ModuleGradients next(pool.size());
    for (std::size_t id = 0; id < g.size(); ++id) {
      const auto mid = static_cast<ModuleId>(id);
      if (!g.touched(mid) && !plus.touched(mid)) continue;
      const std::size_t len = param_count(pool.arch(mid));
      auto v = g.dense(mid, len);
      const auto a = plus.dense(mid, len), b = minus.dense(mid, len);
      auto out = next.block(mid, len);
      for (std::size_t i = 0; i < len; ++i)
        out[i] = v[i] - step * kLossScale * (a[i] - b[i]) / (2.0 * eps);
    }
    g = std::move(next);
  }
}

inline ModuleGradients meta_task_gradient(const Scheme& scheme, const Structure& s, const ModulePool& pool,
                                          const Dataset& adapt_set, const Dataset& batch, MamlMode mode,
                                          double step, std::size_t n_steps) {
  ModuleGradients g(pool.size());
  StructureEvaluator ev;
  meta_task_gradient(scheme, s, pool, adapt_set, batch, mode, step, n_steps, g, ev);
  return g;
}

// ---------------------------------------------------------------------------
// Training state

/// Adam over every module of the pool with one shared step count.
class PoolOptimizer {
 public:
  PoolOptimizer() = default;
  PoolOptimizer(const ModulePool& pool, AdamHyper hyper) {
    for (std::size_t id = 0; id < pool.size(); ++id)
      states_.emplace_back(pool.params(static_cast<ModuleId>(id)).size(), hyper);
  }

  void step(ModulePool& pool, const ModuleGradients& grads) {
    for (std::size_t id = 0; id < states_.size(); ++id) {
      const auto mid = static_cast<ModuleId>(id);
      auto& p = pool.mutable_params(mid);
      if (grads.touched(mid)) {
        optimizer_step(states_[id], p, grads.get(mid));
      } else {
        zeros_.assign(p.size(), 0.0);
        optimizer_step(states_[id], p, zeros_);
      }
    }
  }

  std::uint64_t step_count() const { return states_.empty() ? 0 : states_.front().step_count; }

 private:
  std::vector<OptState> states_;
  std::vector<double> zeros_;
};

struct PhaseCounters {
  std::uint64_t theta_version = 0;            // bumped by every parameter update
  std::uint64_t stale_bounce_reads = 0;       // bounce scores computed against a different theta
  std::uint64_t structure_changes_during_grad = 0;
};

struct MetaState {
  ModulePool pool;
  std::vector<Structure> structures;
  PoolOptimizer opt;
  double temperature = 0.0;
  std::uint64_t iteration = 0;
  PhaseCounters counters;
  // Per-task gradient buffers, kept between iterations to avoid reallocation.
  std::vector<ModuleGradients> task_grads;
};

struct LogRecord {
  std::uint64_t iteration = 0;
  double temperature = 0.0;
  double mean_train_error = 0.0;
  double mean_val_error = 0.0;
  double acceptance_rate = 0.0;

  json to_json() const {
    return json{{"iteration", iteration},
                {"T", temperature},
                {"mean_train_error", mean_train_error},
                {"mean_val_error", mean_val_error},
                {"acceptance_rate", acceptance_rate}};
  }
};

struct TrainResult {
  ModulePool pool;
  std::vector<Structure> structures;
  std::vector<LogRecord> log;
  PhaseCounters counters;
};

inline MetaState init_meta_state(ModulePool pool, const Scheme& scheme, std::size_t n_tasks,
                                 const TrainConfig& config) {
  validate_scheme(scheme, pool);
  MetaState st;
  st.opt = PoolOptimizer(pool, config.optimizer);
  for (std::size_t j = 0; j < n_tasks; ++j) {
    Rng rng = stream(config.seed, j, 0, Purpose::init);
    st.structures.push_back(initial_structure(scheme, pool, rng));
  }
  st.pool = std::move(pool);
  st.temperature = config.t0;
  return st;
}

/// Tasks visited at `iteration`: all of them, or a seeded subset of
/// tasks_per_step in increasing index order.
inline std::vector<std::size_t> active_tasks(std::size_t n_tasks, const TrainConfig& config,
                                             std::uint64_t iteration) {
  std::vector<std::size_t> all(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) all[i] = i;
  if (config.tasks_per_step == 0 || config.tasks_per_step >= n_tasks) return all;
  Rng rng = stream(config.seed, ~std::uint64_t{0}, iteration, Purpose::task_batch);
  for (std::size_t i = 0; i < config.tasks_per_step; ++i)
    std::swap(all[i], all[i + rng.below(n_tasks - i)]);
  all.resize(config.tasks_per_step);
  std::sort(all.begin(), all.end());
  return all;
}

/// One Grad step: for each listed task, draw batch_size uniform points of
/// its test set, accumulate the (MAML-adapted, if enabled) gradient in task
/// order, then apply one optimizer step. Returns the summed gradient.
inline ModuleGradients grad_step(MetaState& st, const Scheme& scheme, std::span<const Dataset> train_sets,
                                 std::span<const Dataset> test_sets, std::span<const std::size_t> tasks,
                                 const TrainConfig& config) {
  for (auto j : tasks)
    if (test_sets[j].empty()) throw DomainError("grad_step: task " + std::to_string(j) + " has an empty test set");
  auto& per_task = st.task_grads;
  if (per_task.size() < tasks.size()) per_task.resize(tasks.size(), ModuleGradients(st.pool.size()));
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.threads, tasks.size()));
  const std::size_t chunk = (tasks.size() + workers - 1) / workers;
  const auto structures_before = st.structures;
  parallel_for(workers, workers, [&](std::size_t w) {
    StructureEvaluator ev;
    for (std::size_t i = w * chunk; i < std::min(tasks.size(), (w + 1) * chunk); ++i) {
      const std::size_t j = tasks[i];
      Rng rng = stream(config.seed, j, st.iteration, Purpose::grad);
      const Dataset& test = test_sets[j];
      Dataset batch(test.in_dim(), test.out_dim());
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const auto idx = static_cast<std::size_t>(rng.below(test.size()));
        batch.add(test.x(idx), test.y(idx));
      }
      meta_task_gradient(scheme, st.structures[j], st.pool, train_sets[j], batch, config.maml_mode,
                         config.inner_step_size, config.inner_steps, per_task[i], ev);
    }
  });
  ModuleGradients total(st.pool.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) total.add(per_task[i]);
  if (st.structures != structures_before) ++st.counters.structure_changes_during_grad;
  st.opt.step(st.pool, total);
  ++st.counters.theta_version;
  return total;
}

namespace detail {

inline double score_structure(const Scheme& scheme, const Structure& s, const ModulePool& pool,
                              const Dataset& train, const TrainConfig& config, StructureEvaluator& ev) {
  if (config.maml_mode == MamlMode::off || config.inner_steps == 0) return task_error(train, scheme, s, pool, ev);
  return maml_eval(train, train, scheme, s, pool, config.inner_step_size, config.inner_steps, ev);
}

inline double score_val(const Scheme& scheme, const Structure& s, const ModulePool& pool, const Dataset& train,
                        const Dataset& test, const TrainConfig& config, StructureEvaluator& ev) {
  if (config.maml_mode == MamlMode::off || config.inner_steps == 0) return task_error(test, scheme, s, pool, ev);
  return maml_eval(train, test, scheme, s, pool, config.inner_step_size, config.inner_steps, ev);
}

}  // namespace detail

/// Mean train and validation error of the current structures over all tasks.
inline std::pair<double, double> evaluate_state(const MetaState& st, const Scheme& scheme,
                                                std::span<const Dataset> train_sets,
                                                std::span<const Dataset> test_sets, const TrainConfig& config) {
  std::vector<double> tr(train_sets.size()), va(train_sets.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.threads, train_sets.size()));
  const std::size_t chunk = (train_sets.size() + workers - 1) / workers;
  parallel_for(workers, workers, [&](std::size_t w) {
    StructureEvaluator ev;
    for (std::size_t j = w * chunk; j < std::min(train_sets.size(), (w + 1) * chunk); ++j) {
      tr[j] = detail::score_structure(scheme, st.structures[j], st.pool, train_sets[j], config, ev);
      va[j] = detail::score_val(scheme, st.structures[j], st.pool, train_sets[j], test_sets[j], config, ev);
    }
  });
  double a = 0.0, b = 0.0;
  for (std::size_t j = 0; j < tr.size(); ++j) {
    a += tr[j];
    b += va[j];
  }
  const auto n = static_cast<double>(std::max<std::size_t>(1, tr.size()));
  return {a / n, b / n};
}

/// One outer iteration: Bounce on the listed tasks at the current
/// temperature, then Grad on the same tasks, then cool.
inline BounceOutcome train_iteration(MetaState& st, const Scheme& scheme, std::span<const Dataset> train_sets,
                                     std::span<const Dataset> test_sets, const TrainConfig& config,
                                     const AnnealSchedule& schedule) {
  st.temperature = schedule.temperature(static_cast<std::size_t>(st.iteration));
  const auto tasks = active_tasks(train_sets.size(), config, st.iteration);
  const std::uint64_t snapshot = st.counters.theta_version;
  std::vector<std::uint64_t> seen(train_sets.size(), snapshot);
  auto outcome = bounce_with(st.structures, tasks, st.temperature, scheme, st.pool, config.seed, st.iteration,
                             config.threads, [&](std::size_t j, const Structure& s, StructureEvaluator& ev) {
                               seen[j] = st.counters.theta_version;
                               return detail::score_structure(scheme, s, st.pool, train_sets[j], config, ev);
                             });
  for (auto v : seen)
    if (v != snapshot) ++st.counters.stale_bounce_reads;
  grad_step(st, scheme, train_sets, test_sets, tasks, config);
  ++st.iteration;
  return outcome;
}

/// BounceGrad meta-training (MOMA when config.maml_mode is on). `on_log`
/// receives each log record as it is produced.
inline TrainResult bouncegrad_train(const TaskSuite& suite, const Scheme& scheme, ModulePool initial_pool,
                                    const TrainConfig& config,
                                    const std::function<void(const LogRecord&)>& on_log = {}) {
  config.validate();
  if (suite.tasks.empty()) throw ConfigError("bouncegrad_train: suite has no tasks");
  const auto schedule = config.schedule();
  const auto train_sets = suite.train_sets();
  const auto test_sets = suite.test_sets();
  if (scheme_input_dim(scheme, initial_pool) != suite.in_dim() ||
      scheme_output_dim(scheme, initial_pool) != suite.out_dim())
    throw ConfigError("pool/scheme dims do not match the task suite");
  MetaState st = init_meta_state(std::move(initial_pool), scheme, suite.tasks.size(), config);

  TrainResult result;
  std::size_t window_props = 0, window_acc = 0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const bool log_now = it % config.log_every == 0;
    LogRecord rec;
    if (log_now) {
      auto [tr, va] = evaluate_state(st, scheme, train_sets, test_sets, config);
      rec.mean_train_error = tr;
      rec.mean_val_error = va;
    }
    auto outcome = train_iteration(st, scheme, train_sets, test_sets, config, schedule);
    window_props += outcome.proposals;
    window_acc += outcome.accepted;
    if (log_now) {
      rec.iteration = it;
      rec.temperature = st.temperature;
      rec.acceptance_rate = window_props ? static_cast<double>(window_acc) / static_cast<double>(window_props) : 0.0;
      window_props = window_acc = 0;
      result.log.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
  LogRecord last;
  auto [tr, va] = evaluate_state(st, scheme, train_sets, test_sets, config);
  last.iteration = config.iterations;
  last.temperature = st.temperature;
  last.mean_train_error = tr;
  last.mean_val_error = va;
  last.acceptance_rate = window_props ? static_cast<double>(window_acc) / static_cast<double>(window_props) : 0.0;
  result.log.push_back(last);
  if (on_log) on_log(last);

  result.pool = std::move(st.pool);
  result.structures = std::move(st.structures);
  result.counters = st.counters;
  return result;
}

inline TrainResult bouncegrad_train(const TaskSuite& suite, const Scheme& scheme, const PoolSpec& pool_spec,
                                    const TrainConfig& config,
                                    const std::function<void(const LogRecord&)>& on_log = {}) {
  return bouncegrad_train(suite, scheme, init_pool(pool_spec, config.seed), config, on_log);
}

// ---------------------------------------------------------------------------
// Meta-test

/// A self-contained predictor: the chosen structure plus private copies of
/// the (possibly fine-tuned) module parameters.
class Predictor {
 public:
  Predictor(Scheme scheme, Structure structure, ModulePool params)
      : scheme_(std::move(scheme)), structure_(std::move(structure)), params_(std::move(params)) {}

  std::vector<double> operator()(std::span<const double> x) const {
    return structure_forward(scheme_, structure_, params_, x);
  }

  double error(const Dataset& data) const { return task_error(data, scheme_, structure_, params_); }

  const Structure& structure() const { return structure_; }
  const ModulePool& params() const { return params_; }

 private:
  Scheme scheme_;
  Structure structure_;
  ModulePool params_;
};

enum class MetatestMode { structure_only, moma };

struct MetatestResult {
  Structure structure;
  double train_error = 0.0;
  // Fine-tuned copies of the modules used by `structure` (MOMA only).
  std::optional<std::vector<std::pair<ModuleId, ParamVector>>> tuned;
  Predictor predictor;
};

/// Solves a new task: annealed structure search on d_train, scored by
/// task_error (structure_only) or by e_maml with adaptation and evaluation
/// on d_train (moma); MOMA then fine-tunes the used modules on d_train.
inline MetatestResult metatest_solve(const Dataset& d_train, const Scheme& scheme, const ModulePool& pool,
                                     const TrainConfig& config, MetatestMode mode, Rng& rng) {
  if (d_train.empty()) throw DomainError("metatest_solve: empty training set");
  const auto schedule = config.search_schedule();
  StructureEvaluator ev;
  const std::size_t inner = mode == MetatestMode::moma ? config.inner_steps : 0;
  auto search = online_search_with(scheme, pool, schedule, rng, [&](const Structure& s) {
    return inner == 0 ? task_error(d_train, scheme, s, pool, ev)
                      : maml_eval(d_train, d_train, scheme, s, pool, config.inner_step_size, inner, ev);
  });
  ModulePool chosen = pool;
  std::optional<std::vector<std::pair<ModuleId, ParamVector>>> tuned;
  if (mode == MetatestMode::moma) {
    tuned = inner_adapt(pool, d_train, scheme, search.best, config.inner_step_size, inner, ev).overrides();
    for (auto& [id, p] : *tuned) chosen.set_params(id, p);
  }
  return MetatestResult{search.best, search.best_error, std::move(tuned),
                        Predictor(scheme, search.best, std::move(chosen))};
}

}  // namespace modmeta
