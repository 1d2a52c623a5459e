#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "modmeta/digest.hpp"
#include "modmeta/error.hpp"
#include "modmeta/meta_learn.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/structure.hpp"
#include "modmeta/tasks.hpp"

namespace modmeta {

enum class MethodKind { pooled, maml, bouncegrad, moma };

inline std::string_view to_string(MethodKind k) {
  switch (k) {
    case MethodKind::pooled: return "Pooled";
    case MethodKind::maml: return "MAML";
    case MethodKind::bouncegrad: return "BounceGrad";
    case MethodKind::moma: return "MOMA";
  }
  return "?";
}

inline std::optional<MethodKind> method_kind_from_string(std::string_view s) {
  for (auto k : {MethodKind::pooled, MethodKind::maml, MethodKind::bouncegrad, MethodKind::moma})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

struct SuiteConfig {
  std::string generator;  // sums | sines | manifest
  SumSuiteSpec sums;
  SineSuiteSpec sines;
  std::filesystem::path manifest;
  std::filesystem::path test_manifest;
  std::size_t test_tasks = 26;
};

struct MethodConfig {
  std::string name;
  MethodKind kind = MethodKind::bouncegrad;
  Scheme scheme;
  PoolSpec pool;
  TrainConfig train;
  MetatestMode mode = MetatestMode::structure_only;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> output_dir;
  std::size_t threads = 1;
  SuiteConfig suite;
  std::vector<MethodConfig> methods;
  std::vector<std::size_t> train_prefixes;
  std::string sharing_group = "pair";
  json source = json::object();

  /// Digest of the canonical document with runtime-only keys removed.
  std::string digest() const {
    json j = source;
    j["seed"] = seed;
    j.erase("output_dir");
    j.erase("threads");
    return digest_hex(j.dump());
  }

  const MethodConfig* find_method(const std::string& name) const {
    for (const auto& m : methods)
      if (m.name == name) return &m;
    return nullptr;
  }
};

namespace detail {

/// Typed access to one JSON object; every error names the full field path
/// and unknown keys are rejected.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "must be an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ConfigError("config field '" + path + "' " + what);
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& raw(const std::string& key) const {
    if (!has(key)) fail(at(key), "is required");
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key) const {
    const json& v = raw(key);
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(at(key), "must be a string");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) fail(at(key), "must be a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) fail(at(key), "must be an integer");
        if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          fail(at(key), "must be >= 0");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) fail(at(key), "must be a number");
      }
      return v.get<T>();
    } catch (const json::exception&) {
      fail(at(key), "has the wrong type");
    }
  }

  template <class T>
  void read(const std::string& key, T& out) const {
    if (has(key)) out = get<T>(key);
  }

  double positive(const std::string& key, double fallback) const {
    const double v = has(key) ? get<double>(key) : fallback;
    if (!(v > 0.0) || !std::isfinite(v)) fail(at(key), "must be a finite number > 0");
    return v;
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(at(it.key()), "is not a recognized field");
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  mutable std::set<std::string> seen_;
};

inline std::size_t count_field(const Fields& f, const std::string& key, std::size_t fallback, std::size_t min = 1) {
  std::size_t v = fallback;
  f.read(key, v);
  if (v < min) Fields::fail(f.at(key), "must be >= " + std::to_string(min));
  return v;
}

inline Arch parse_arch(const json& j, const std::string& path) {
  Arch a;
  try {
    a = arch_from_json(j);
  } catch (const std::exception& e) {
    Fields::fail(path, std::string("is not a valid architecture: ") + e.what());
  }
  for (auto n : a.layer_sizes)
    if (n > 100000) Fields::fail(path, "has a layer wider than 100000");
  if (a.layer_sizes.size() > 64) Fields::fail(path, "has more than 64 layers");
  return a;
}

inline PoolSpec parse_pool(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) Fields::fail(path, "must be a non-empty array of module groups");
  PoolSpec spec;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    Fields g(j[i], p);
    PoolSpecEntry e;
    std::string role = "generic";
    g.read("role", role);
    try {
      e.role = role_from_string(role);
    } catch (const std::exception&) {
      Fields::fail(g.at("role"), "names an unknown role '" + role + "'");
    }
    e.arch = parse_arch(g.raw("arch"), g.at("arch"));
    e.count = count_field(g, "count", 1);
    g.reject_unknown();
    spec.push_back(std::move(e));
  }
  return spec;
}

inline Scheme parse_scheme(const json& j, const std::string& path) {
  try {
    return scheme_from_json(j);
  } catch (const std::exception& e) {
    Fields::fail(path, std::string("is not a valid scheme: ") + e.what());
  }
}

inline void parse_train(const Fields& f, TrainConfig& c) {
  c.optimizer.lr = f.positive("lr", c.optimizer.lr);
  c.iterations = count_field(f, "iterations", c.iterations);
  c.t0 = f.positive("t0", c.t0);
  f.read("t_end", c.t_end);
  if (!(c.t_end >= 0.0) || !(c.t_end < c.t0)) Fields::fail(f.at("t_end"), "must satisfy 0 <= t_end < t0");
  if (f.has("maml_mode")) {
    const auto s = f.get<std::string>("maml_mode");
    try {
      c.maml_mode = maml_mode_from_string(s);
    } catch (const std::exception&) {
      Fields::fail(f.at("maml_mode"), "must be one of off, first_order, full");
    }
  }
  c.inner_steps = count_field(f, "inner_steps", c.inner_steps, 0);
  c.inner_step_size = f.positive("inner_step_size", c.inner_step_size);
  c.batch_size = count_field(f, "batch_size", c.batch_size);
  c.tasks_per_step = count_field(f, "tasks_per_step", c.tasks_per_step, 0);
  c.log_every = count_field(f, "log_every", c.log_every);
  c.search_t0 = f.positive("search_t0", c.search_t0);
  f.read("search_t_end", c.search_t_end);
  if (!(c.search_t_end >= 0.0) || !(c.search_t_end < c.search_t0))
    Fields::fail(f.at("search_t_end"), "must satisfy 0 <= search_t_end < search_t0");
  c.search_steps = count_field(f, "search_steps", c.search_steps);
  if ((c.inner_steps == 0) != (c.maml_mode == MamlMode::off))
    Fields::fail(f.at("inner_steps"), "must be 0 exactly when maml_mode is off");
  f.reject_unknown();
}

inline SuiteConfig parse_suite(const Fields& f, const std::filesystem::path& base) {
  SuiteConfig s;
  s.generator = f.get<std::string>("generator");
  if (s.generator == "sums") {
    s.sums.n_tasks = count_field(f, "n_tasks", s.sums.n_tasks);
    s.sums.n_train = count_field(f, "n_train", s.sums.n_train);
    s.sums.n_train_min = count_field(f, "n_train_min", 0, 0);
    s.sums.n_test = count_field(f, "n_test", s.sums.n_test);
    s.test_tasks = count_field(f, "test_tasks", 26);
    if (s.sums.n_train_min > s.sums.n_train) Fields::fail(f.at("n_train_min"), "must not exceed n_train");
    if (s.sums.n_tasks + s.test_tasks > 256)
      Fields::fail(f.at("test_tasks"), "plus n_tasks must not exceed the 256 function pairs");
  } else if (s.generator == "sines") {
    s.sines.n_tasks = count_field(f, "n_tasks", s.sines.n_tasks);
    s.sines.n_train = count_field(f, "n_train", s.sines.n_train);
    s.sines.n_test = count_field(f, "n_test", s.sines.n_test);
    s.test_tasks = count_field(f, "test_tasks", 100);
  } else if (s.generator == "manifest") {
    auto path_field = [&](const std::string& key) {
      std::filesystem::path p = f.get<std::string>(key);
      if (p.is_relative()) p = base / p;
      if (!std::filesystem::exists(p)) Fields::fail(f.at(key), "points to a missing file '" + p.string() + "'");
      return p;
    };
    s.manifest = path_field("train");
    s.test_manifest = path_field("test");
  } else {
    Fields::fail(f.at("generator"), "must be one of sums, sines, manifest");
  }
  f.reject_unknown();
  return s;
}

inline MethodConfig parse_method(const Fields& f) {
  MethodConfig m;
  const auto kind = f.get<std::string>("kind");
  auto k = method_kind_from_string(kind);
  if (!k) Fields::fail(f.at("kind"), "must be one of Pooled, MAML, BounceGrad, MOMA");
  m.kind = *k;
  m.name = std::string(to_string(m.kind));
  f.read("name", m.name);
  if (m.name.empty() || m.name.find_first_of("/\\,\n") != std::string::npos || m.name == "." || m.name == "..")
    Fields::fail(f.at("name"), "must be a non-empty name without path separators or commas");

  const bool modular = m.kind == MethodKind::bouncegrad || m.kind == MethodKind::moma;
  const bool adapted = m.kind == MethodKind::maml || m.kind == MethodKind::moma;
  if (modular) {
    if (f.has("arch")) Fields::fail(f.at("arch"), "is only used by Pooled and MAML; give pool instead");
    m.scheme = parse_scheme(f.raw("scheme"), f.at("scheme"));
    m.pool = parse_pool(f.raw("pool"), f.at("pool"));
  } else {
    // Baselines: one network in the single-slot scheme.
    if (f.has("scheme")) Fields::fail(f.at("scheme"), "is fixed to single for " + kind);
    if (f.has("pool")) Fields::fail(f.at("pool"), "is fixed to one module for " + kind + "; give arch instead");
    m.scheme = Scheme::single();
    m.pool = {{Role::generic(), parse_arch(f.raw("arch"), f.at("arch")), 1}};
  }
  if (adapted) {
    m.train.maml_mode = MamlMode::first_order;
    m.train.inner_steps = 5;
    m.mode = MetatestMode::moma;
  }
  if (f.has("train")) {
    Fields t(f.raw("train"), f.at("train"));
    parse_train(t, m.train);
  }
  if (adapted && m.train.maml_mode == MamlMode::off)
    Fields::fail(f.at("train.maml_mode"), "must not be off for " + kind);
  if (!adapted && m.train.maml_mode != MamlMode::off)
    Fields::fail(f.at("train.maml_mode"), "must be off for " + kind);
  f.reject_unknown();
  std::size_t total = 0;
  for (const auto& e : m.pool) {
    if (e.count > 100000) Fields::fail(f.at("pool"), "has more than 100000 modules in one group");
    total += e.count * param_count(e.arch);
    if (total > (std::size_t{1} << 27)) Fields::fail(f.at("pool"), "has more than 2^27 parameters");
  }
  try {
    validate_scheme(m.scheme, init_pool(m.pool, 0));
  } catch (const std::exception& e) {
    Fields::fail(f.at("pool"), std::string("does not fit the scheme: ") + e.what());
  }
  return m;
}

}  // namespace detail

/// Parses and validates an experiment document. Relative manifest paths
/// resolve against `base`.
inline ExperimentConfig parse_experiment_config(const json& doc, const std::filesystem::path& base = ".") {
  using detail::Fields;
  ExperimentConfig c;
  Fields f(doc, "");
  c.source = doc;
  if (f.has("seed")) c.seed = f.get<std::uint64_t>("seed");
  if (f.has("output_dir")) c.output_dir = f.get<std::string>("output_dir");
  c.threads = detail::count_field(f, "threads", 1);
  c.suite = detail::parse_suite(Fields(f.raw("suite"), "suite"), base);

  const json& methods = f.raw("methods");
  if (!methods.is_array() || methods.empty()) Fields::fail("methods", "must be a non-empty array");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    Fields mf(methods[i], "methods[" + std::to_string(i) + "]");
    auto m = detail::parse_method(mf);
    if (c.find_method(m.name)) Fields::fail(mf.at("name"), "duplicates method name '" + m.name + "'");
    c.methods.push_back(std::move(m));
  }

  if (f.has("eval")) {
    Fields e(f.raw("eval"), "eval");
    if (e.has("train_prefixes")) {
      const json& p = e.raw("train_prefixes");
      if (!p.is_array()) Fields::fail(e.at("train_prefixes"), "must be an array of positive integers");
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (!p[i].is_number_unsigned() || p[i].get<std::size_t>() == 0)
          Fields::fail(e.at("train_prefixes") + "[" + std::to_string(i) + "]", "must be a positive integer");
        c.train_prefixes.push_back(p[i].get<std::size_t>());
      }
      const std::size_t n_train = c.suite.generator == "sums"    ? c.suite.sums.n_train
                                  : c.suite.generator == "sines" ? c.suite.sines.n_train
                                                                 : 0;
      for (auto n : c.train_prefixes)
        if (n_train && n > n_train) Fields::fail(e.at("train_prefixes"), "exceeds suite.n_train");
    }
    e.reject_unknown();
  }
  if (f.has("report")) {
    Fields r(f.raw("report"), "report");
    r.read("sharing_group", c.sharing_group);
    if (c.sharing_group != "pair" && c.sharing_group != "first_label")
      Fields::fail(r.at("sharing_group"), "must be pair or first_label");
    r.reject_unknown();
  }
  f.reject_unknown();

  for (auto& m : c.methods) {
    m.train.seed = c.seed;
    m.train.threads = c.threads;
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  const auto doc = parse_json_text(read_text_file(path), path.string());
  return parse_experiment_config(doc, path.has_parent_path() ? path.parent_path() : ".");
}

/// Applies a seed override (the CLI's --seed) so digests and all derived
/// seeds follow it.
inline void override_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  for (auto& m : c.methods) m.train.seed = seed;
}

inline void override_threads(ExperimentConfig& c, std::size_t threads) {
  if (threads < 1) throw ConfigError("--threads must be >= 1");
  c.threads = threads;
  for (auto& m : c.methods) m.train.threads = threads;
}

// ---------------------------------------------------------------------------
// Suites

struct ExperimentSuites {
  TaskSuite train;
  TaskSuite test;  // standardized with the training statistics
};

inline ExperimentSuites build_suites(const ExperimentConfig& c) {
  ExperimentSuites s;
  const auto& sc = c.suite;
  if (sc.generator == "sums") {
    SumSuiteSpec spec = sc.sums;
    spec.seed = c.seed;
    s.train = gen_sum_suite(spec);
    spec.skip = spec.n_tasks;
    spec.n_tasks = sc.test_tasks;
    s.test = apply_standardization(gen_sum_suite_raw(spec), s.train.stats);
  } else if (sc.generator == "sines") {
    SineSuiteSpec spec = sc.sines;
    spec.seed = c.seed;
    s.train = gen_sine_suite(spec);
    spec.skip = spec.n_tasks;
    spec.n_tasks = sc.test_tasks;
    s.test = apply_standardization(gen_sine_suite_raw(spec), s.train.stats);
  } else {
    s.train = load_csv_suite(sc.manifest);
    s.test = apply_standardization(destandardize(load_csv_suite(sc.test_manifest)), s.train.stats);
    if (s.train.in_dim() != s.test.in_dim() || s.train.out_dim() != s.test.out_dim())
      throw ConfigError("config field 'suite.test' has dims that differ from 'suite.train'");
  }
  return s;
}

}  // namespace modmeta
