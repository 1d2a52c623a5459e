#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "modmeta/experiment.hpp"
#include "modmeta/meta_learn.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/report.hpp"
#include "modmeta/selftest.hpp"
#include "modmeta/tasks.hpp"

namespace modmeta::cli {

inline constexpr const char* kOutputDirEnv = "MODMETA_OUTPUT_DIR";
inline constexpr const char* kDefaultOutputDir = "modmeta-out";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::size_t> threads;
  std::vector<std::string> methods;
  bool full = false;
};

/// --output-dir, then the config's output_dir, then $MODMETA_OUTPUT_DIR.
inline std::filesystem::path resolve_output_dir(const Options& o, const ExperimentConfig* c) {
  if (o.output_dir) return *o.output_dir;
  if (c && c->output_dir) return *c->output_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return kDefaultOutputDir;
}

inline ExperimentConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required for this subcommand");
  auto c = load_experiment_config(o.config);
  if (o.seed) override_seed(c, *o.seed);
  if (o.threads) override_threads(c, *o.threads);
  return c;
}

inline std::vector<const MethodConfig*> selected_methods(const ExperimentConfig& c, const Options& o) {
  std::vector<const MethodConfig*> out;
  if (o.methods.empty()) {
    for (const auto& m : c.methods) out.push_back(&m);
    return out;
  }
  for (const auto& name : o.methods) {
    const auto* m = c.find_method(name);
    if (!m) throw ConfigError("--method '" + name + "' is not a method of the config");
    out.push_back(m);
  }
  return out;
}

inline std::filesystem::path method_dir(const std::filesystem::path& out, const MethodConfig& m) {
  return out / "methods" / m.name;
}

inline json stamp(const ExperimentConfig& c, json j) {
  j["config_digest"] = c.digest();
  j["seed"] = c.seed;
  return j;
}

inline Sidecar sidecar(const ExperimentConfig& c, json extra = json::object()) {
  return Sidecar{c.digest(), c.seed, std::move(extra)};
}

/// Reads an artifact written by an earlier subcommand and checks it came
/// from the same config and seed.
inline json read_stamped(const std::filesystem::path& path, const ExperimentConfig& c) {
  if (!std::filesystem::exists(path))
    throw ConfigError("missing '" + path.string() + "'; run the earlier subcommand first");
  auto j = parse_json_text(read_text_file(path), path.string());
  if (j.value("config_digest", "") != c.digest() || j.value("seed", std::uint64_t{0}) != c.seed)
    throw ConfigError("'" + path.string() + "' was produced by a different config or seed");
  return j;
}

inline std::string join_labels(const std::vector<std::string>& labels) {
  std::string s;
  for (std::size_t i = 0; i < labels.size(); ++i) s += (i ? "+" : "") + labels[i];
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_gen_tasks(const Options& o, std::ostream& out) {
  const auto c = load_config(o);
  const auto dir = resolve_output_dir(o, &c) / "suite";
  const auto suites = build_suites(c);
  for (const auto& manifest : {save_csv_suite(suites.train, dir / "train"),
                               save_csv_suite(suites.test, dir / "test", true)}) {
    auto j = stamp(c, parse_json_text(read_text_file(manifest), manifest.string()));
    write_text_file(manifest, j.dump(1) + "\n");
  }
  json extra{{"train_tasks", suites.train.tasks.size()},
             {"test_tasks", suites.test.tasks.size()},
             {"stats", {{"mean", suites.train.stats.mean}, {"std", suites.train.stats.std}}}};
  auto j = sidecar_json(sidecar(c, extra), "suite", "train/manifest.json");
  write_text_file(dir / "suite.json", j.dump(2) + "\n");
  out << "wrote " << suites.train.tasks.size() << " train and " << suites.test.tasks.size() << " test tasks to "
      << dir.string() << "\n";
  return 0;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const auto c = load_config(o);
  const auto root = resolve_output_dir(o, &c);
  const auto suites = build_suites(c);
  for (const auto* m : selected_methods(c, o)) {
    const auto dir = method_dir(root, *m);
    std::string log_text;
    auto result = bouncegrad_train(suites.train, m->scheme, m->pool, m->train, [&](const LogRecord& r) {
      log_text += stamp(c, r.to_json()).dump() + "\n";
    });
    write_text_file(dir / "train_log.jsonl", log_text);

    json ckpt = stamp(c, pool_to_json(result.pool));
    ckpt["method"] = m->name;
    ckpt["kind"] = std::string(to_string(m->kind));
    ckpt["scheme"] = scheme_to_json(m->scheme);
    write_text_file(dir / "checkpoint.json", ckpt.dump(1) + "\n");

    json structures = json::array();
    for (std::size_t j = 0; j < result.structures.size(); ++j)
      structures.push_back({{"task", j},
                            {"labels", suites.train.tasks[j].labels},
                            {"structure", structure_to_json(m->scheme, result.structures[j])}});
    json summary = stamp(c, json{{"method", m->name},
                                 {"scheme", scheme_to_json(m->scheme)},
                                 {"iterations", m->train.iterations},
                                 {"final", result.log.back().to_json()},
                                 {"counters",
                                  {{"theta_version", result.counters.theta_version},
                                   {"stale_bounce_reads", result.counters.stale_bounce_reads},
                                   {"structure_changes_during_grad", result.counters.structure_changes_during_grad}}},
                                 {"structures", std::move(structures)}});
    write_text_file(dir / "train.json", summary.dump(1) + "\n");
    out << m->name << ": final train error " << result.log.back().mean_train_error << ", val error "
        << result.log.back().mean_val_error << "\n";
  }
  return 0;
}

inline MethodArtifact load_artifact(const ExperimentConfig& c, const MethodConfig& m,
                                    const std::filesystem::path& root) {
  const auto ckpt = read_stamped(method_dir(root, m) / "checkpoint.json", c);
  return MethodArtifact{m.name, m.scheme, pool_from_json(ckpt), m.train, m.mode};
}

inline int cmd_metatest(const Options& o, std::ostream& out) {
  const auto c = load_config(o);
  const auto root = resolve_output_dir(o, &c);
  const auto suites = build_suites(c);
  for (const auto* m : selected_methods(c, o)) {
    const auto artifact = load_artifact(c, *m, root);
    const auto outcomes = metatest_suite(artifact, suites.test, c.threads, c.train_prefixes);
    const auto row = summarize_outcomes(c.suite.generator, m->name, outcomes, c.seed, c.digest());
    json tasks = json::array();
    std::string csv = "task,labels,train_error,test_loss\n";
    for (std::size_t j = 0; j < outcomes.size(); ++j) {
      const auto& t = suites.test.tasks[j];
      tasks.push_back({{"task", j},
                       {"labels", t.labels},
                       {"structure", structure_to_json(m->scheme, outcomes[j].structure)},
                       {"train_error", outcomes[j].train_error},
                       {"test_loss", outcomes[j].test_loss}});
      csv += std::to_string(j) + "," + join_labels(t.labels) + "," + format_double(outcomes[j].train_error) + "," +
             format_double(outcomes[j].test_loss) + "\n";
    }
    const auto dir = method_dir(root, *m);
    write_text_file(dir / "metatest.csv", csv);
    json doc = stamp(c, json{{"method", m->name},
                             {"kind", std::string(to_string(m->kind))},
                             {"scheme", scheme_to_json(m->scheme)},
                             {"train_prefixes", c.train_prefixes},
                             {"mean_loss", row.mean_loss},
                             {"std_error", row.std_error},
                             {"tasks", std::move(tasks)}});
    write_text_file(dir / "metatest.json", doc.dump(1) + "\n");
    out << m->name << ": meta-test loss " << row.mean_loss << " +- " << row.std_error << " over " << row.n_tasks
        << " tasks\n";
  }
  return 0;
}

inline int cmd_report(const Options& o, std::ostream& out) {
  const auto c = load_config(o);
  const auto root = resolve_output_dir(o, &c);
  const auto dir = root / "report";
  ResultTable table;
  const auto methods = selected_methods(c, o);
  std::optional<TaskSuite> train_suite;
  for (const auto* m : methods) {
    const auto doc = read_stamped(method_dir(root, *m) / "metatest.json", c);
    std::vector<Structure> structures;
    std::vector<std::vector<std::string>> labels;
    std::vector<double> losses;
    for (const auto& t : doc.at("tasks")) {
      structures.push_back(structure_from_json(m->scheme, t.at("structure")));
      labels.push_back(t.at("labels").get<std::vector<std::string>>());
      losses.push_back(t.at("test_loss").get<double>());
    }
    const auto s = summarize(losses);
    table.rows.push_back({c.suite.generator, m->name, s.mean, s.std_error, losses.size(), c.seed, c.digest()});
    if (m->scheme.kind == SchemeKind::single) continue;

    std::vector<std::string> groups, group_labels;
    for (const auto& l : labels) {
      groups.push_back(c.sharing_group == "pair" || l.empty() ? join_labels(l) : l.front());
      if (std::find(group_labels.begin(), group_labels.end(), groups.back()) == group_labels.end())
        group_labels.push_back(groups.back());
    }
    emit_report(sharing_matrix(structures, groups, group_labels), dir, "sharing_" + m->name, sidecar(c));
    emit_report(sharing_by_overlap(structures, labels), dir, "overlap_" + m->name, sidecar(c));

    if (c.suite.generator == "sums") {
      if (!train_suite) train_suite = build_suites(c).train;
      const auto artifact = load_artifact(c, *m, root);
      bool scalar = true;
      for (auto id : artifact.pool.eligible(Role::generic()))
        scalar = scalar && artifact.pool.arch(id).input_dim() == 1 && artifact.pool.arch(id).output_dim() == 1;
      if (scalar) {
        std::vector<std::string> names;
        for (auto n : basis_names()) names.emplace_back(n);
        const auto matches = match_modules_to_basis(artifact.pool, names, train_suite->stats);
        emit_report(std::span<const BasisMatch>(matches), dir, "modules_" + m->name, sidecar(c));
      }
    }
  }
  const auto files = emit_report(table, dir, "results", sidecar(c));
  out << table_to_csv(table);
  out << "wrote " << files.data.string() << "\n";
  return 0;
}

inline int cmd_selftest(const Options& o, std::ostream& out) {
  std::optional<ExperimentConfig> c;
  if (!o.config.empty()) c = load_config(o);
  const auto root = resolve_output_dir(o, c ? &*c : nullptr);
  const auto sizes = o.full ? selftest::CheckSizes{} : selftest::CheckSizes::quick();
  const auto results = selftest::run_all(root / "selftest" / "scratch", sizes);
  bool ok = true;
  json checks = json::array();
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
    checks.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
  }
  Sidecar meta{c ? c->digest() : "none", c ? c->seed : o.seed.value_or(0), {{"checks", checks}}};
  write_text_file(root / "selftest" / "selftest.json",
                  sidecar_json(meta, "selftest", "selftest.json").dump(2) + "\n");
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------

/// Parses argv and dispatches. Exit status: 0 success, 1 runtime failure or
/// failed self-test, 2 usage or configuration error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Modular meta-learning: BounceGrad, MOMA and baselines", "modmeta"};
  app.require_subcommand(1);
  Options o;
  const char* env_help = "output directory (default: config output_dir, then $MODMETA_OUTPUT_DIR, then ./modmeta-out)";
  std::function<int(const Options&, std::ostream&)> action;
  auto add = [&](const std::string& name, const std::string& help, auto fn, bool needs_config) {
    auto* sub = app.add_subcommand(name, help);
    auto* cfg = sub->add_option("-c,--config", o.config, "experiment config (JSON)");
    if (needs_config) cfg->required();
    sub->add_option("--seed", o.seed, "master seed, overrides the config");
    sub->add_option("-o,--output-dir", o.output_dir, env_help);
    sub->add_option("--threads", o.threads, "worker threads (results do not depend on it)")
        ->check(CLI::PositiveNumber);
    sub->callback([&action, fn] { action = fn; });
    return sub;
  };
  for (auto* sub : {add("train", "meta-train every method of the config", cmd_train, true),
                    add("metatest", "solve the held-out tasks with trained methods", cmd_metatest, true),
                    add("report", "result table, sharing matrices and module matching", cmd_report, true)})
    sub->add_option("-m,--method", o.methods, "restrict to these method names");
  add("gen-tasks", "write the train and held-out suites as CSV", cmd_gen_tasks, true);
  add("selftest", "run the invariant checks", cmd_selftest, false)
      ->add_flag("--full", o.full, "acceptance-sized checks");

  if (argc <= 1) {
    err << app.help() << "\nerror: a subcommand is required: gen-tasks, train, metatest, report or selftest\n";
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    for (auto* sub : app.get_subcommands())
      if (sub->count() > 0) {
        err << sub->help();
        break;
      }
    if (app.get_subcommands().empty()) err << app.help();
    err << "\nerror: " << e.what() << "\nsubcommands: gen-tasks, train, metatest, report, selftest\n";
    return 2;
  }
  try {
    return action(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace modmeta::cli
