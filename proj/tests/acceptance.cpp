// Acceptance runs. Usage: modmeta_acceptance <group> [config dir] [output dir]
// with group one of functions16, functions_few, sines, properties, all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "modmeta/modmeta.hpp"
#include "modmeta/experiment.hpp"
#include "modmeta/selftest.hpp"

#ifndef MODMETA_CONFIG_DIR
#define MODMETA_CONFIG_DIR "configs"
#endif

using namespace modmeta;

namespace {

struct Verdict {
  int criterion;
  bool passed;
  std::string detail;
};

struct MethodRun {
  const MethodConfig* cfg = nullptr;
  TrainResult trained;
  std::vector<TaskOutcome> outcomes;
  ResultRow row;
};

struct ExperimentRun {
  ExperimentConfig config;
  ExperimentSuites suites;
  std::map<std::string, MethodRun> methods;

  const MethodRun& by_kind(MethodKind k) const {
    for (const auto& [name, m] : methods)
      if (m.cfg->kind == k) return m;
    throw ConfigError("experiment has no " + std::string(to_string(k)) + " method");
  }
};

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string num(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ExperimentRun run_experiment(const std::filesystem::path& config_path, const std::filesystem::path& out) {
  ExperimentRun run;
  run.config = load_experiment_config(config_path);
  run.suites = build_suites(run.config);
  std::printf("[%s] %zu meta-train tasks, %zu meta-test tasks\n", config_path.filename().c_str(),
              run.suites.train.tasks.size(), run.suites.test.tasks.size());
  ResultTable table;
  for (const auto& m : run.config.methods) {
    auto t0 = std::chrono::steady_clock::now();
    MethodRun r;
    r.cfg = &m;
    double train_s = 0.0;
    try {
      r.trained = bouncegrad_train(run.suites.train, m.scheme, m.pool, m.train);
      train_s = seconds_since(t0);
      t0 = std::chrono::steady_clock::now();
      MethodArtifact artifact{m.name, m.scheme, r.trained.pool, m.train, m.mode};
      r.outcomes = metatest_suite(artifact, run.suites.test, run.config.threads, run.config.train_prefixes);
      r.row = summarize_outcomes(run.config.suite.generator, m.name, r.outcomes, run.config.seed, run.config.digest());
    } catch (const NumericError& e) {
      std::printf("  %-12s diverged: %s\n", m.name.c_str(), e.what());
      r.row.suite = run.config.suite.generator;
      r.row.method = m.name;
      r.row.mean_loss = std::numeric_limits<double>::infinity();
    }
    std::printf("  %-12s loss %8.3f +- %6.3f  (train %.0fs, meta-test %.0fs)\n", m.name.c_str(), r.row.mean_loss,
                r.row.std_error, train_s, seconds_since(t0));
    std::fflush(stdout);
    table.rows.push_back(r.row);
    run.methods[m.name] = std::move(r);
  }
  emit_report(table, out, config_path.stem().string(), Sidecar{run.config.digest(), run.config.seed});
  return run;
}

std::vector<Verdict> functions16(const std::filesystem::path& configs, const std::filesystem::path& out) {
  const auto run = run_experiment(configs / "sums16.json", out);
  const auto& bg = run.by_kind(MethodKind::bouncegrad);
  const auto& pooled = run.by_kind(MethodKind::pooled);
  std::vector<Verdict> v;
  v.push_back({1, bg.row.mean_loss <= 2.0 && pooled.row.mean_loss >= 25.0,
               "BounceGrad " + num(bg.row.mean_loss) + " (<= 2.0), Pooled " + num(pooled.row.mean_loss) +
                   " (>= 25)"});

  std::vector<std::string> names;
  for (auto n : basis_names()) names.emplace_back(n);
  const auto matches = match_modules_to_basis(bg.trained.pool, names, run.suites.train.stats);
  std::size_t close = 0;
  std::string weak;
  for (const auto& m : matches) {
    if (m.mad <= 0.15)
      ++close;
    else
      weak += " " + m.name + "=" + num(m.mad);
  }
  emit_report(std::span<const BasisMatch>(matches), out, "sums16_modules", Sidecar{run.config.digest(), run.config.seed});
  v.push_back({4, close >= 12,
               std::to_string(close) + "/16 basis functions matched at MAD <= 0.15 (need 12)" +
                   (weak.empty() ? "" : "; unmatched:" + weak)});

  std::vector<Structure> structures;
  std::vector<std::vector<std::string>> labels;
  for (std::size_t j = 0; j < bg.outcomes.size(); ++j) {
    structures.push_back(bg.outcomes[j].structure);
    labels.push_back(run.suites.test.tasks[j].labels);
  }
  const auto overlap = sharing_by_overlap(structures, labels);
  emit_report(overlap, out, "sums16_overlap", Sidecar{run.config.digest(), run.config.seed});
  const double none = overlap.mean.size() > 0 ? overlap.mean[0] : std::nan("");
  const double one = overlap.mean.size() > 1 ? overlap.mean[1] : std::nan("");
  v.push_back({5, one - none >= 0.2,
               "mean sharing " + num(one) + " for pairs sharing one function vs " + num(none) +
                   " for none (need difference >= 0.2)"});
  return v;
}

std::vector<Verdict> functions_few(const std::filesystem::path& configs, const std::filesystem::path& out) {
  const auto run = run_experiment(configs / "sums_few.json", out);
  const auto& bg = run.by_kind(MethodKind::bouncegrad);
  const auto& maml = run.by_kind(MethodKind::maml);
  return {{2, bg.row.mean_loss <= 0.85 * maml.row.mean_loss,
           "BounceGrad " + num(bg.row.mean_loss) + " vs 0.85 x MAML " + num(maml.row.mean_loss) + " = " +
               num(0.85 * maml.row.mean_loss)}};
}

std::vector<Verdict> sines(const std::filesystem::path& configs, const std::filesystem::path& out) {
  const auto run = run_experiment(configs / "sines.json", out);
  const auto& moma = run.by_kind(MethodKind::moma).row;
  const auto& maml = run.by_kind(MethodKind::maml).row;
  const auto& pooled = run.by_kind(MethodKind::pooled).row;
  const bool ordered = moma.mean_loss <= maml.mean_loss + maml.std_error;
  const bool both = moma.mean_loss <= 0.5 * pooled.mean_loss && maml.mean_loss <= 0.5 * pooled.mean_loss;
  return {{3, ordered && both,
           "MOMA " + num(moma.mean_loss) + " vs MAML " + num(maml.mean_loss) + " + SE " + num(maml.std_error) +
               "; half of Pooled " + num(0.5 * pooled.mean_loss)}};
}

std::vector<Verdict> properties(const std::filesystem::path& out) {
  selftest::CheckSizes sizes;
  auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, selftest::CheckResult> r;
  for (auto& c : selftest::run_all(out / "scratch", sizes)) {
    std::printf("  %s %s: %s\n", c.passed ? "ok  " : "FAIL", c.name.c_str(), c.detail.c_str());
    r[c.name] = c;
  }
  std::printf("  property checks took %.0fs\n", seconds_since(t0));
  const auto& oracle = r["annealing_oracle"];
  const auto& premature = r["premature_optimization"];
  return {{6, r["gradients"].passed, r["gradients"].detail},
          {7, oracle.passed && premature.passed, oracle.detail + "; " + premature.detail},
          {8, r["degenerate_equivalence"].passed, r["degenerate_equivalence"].detail},
          {9, r["determinism_and_serialization"].passed, r["determinism_and_serialization"].detail},
          {10, r["metropolis"].passed, r["metropolis"].detail}};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string group = argc > 1 ? argv[1] : "all";
  const std::filesystem::path configs = argc > 2 ? argv[2] : MODMETA_CONFIG_DIR;
  const std::filesystem::path out =
      argc > 3 ? std::filesystem::path(argv[3]) : std::filesystem::temp_directory_path() / "modmeta_acceptance";
  std::filesystem::create_directories(out);

  std::vector<Verdict> verdicts;
  auto add = [&](std::vector<Verdict> v) { verdicts.insert(verdicts.end(), v.begin(), v.end()); };
  try {
    if (group == "properties" || group == "all") add(properties(out));
    if (group == "functions16" || group == "all") add(functions16(configs, out));
    if (group == "functions_few" || group == "all") add(functions_few(configs, out));
    if (group == "sines" || group == "all") add(sines(configs, out));
  } catch (const std::exception& e) {
    std::printf("error: %s\n", e.what());
    return 1;
  }
  if (verdicts.empty()) {
    std::printf("unknown group '%s'; use functions16, functions_few, sines, properties or all\n", group.c_str());
    return 2;
  }
  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.criterion < b.criterion; });
  bool ok = true;
  for (const auto& v : verdicts) {
    std::printf("criterion %d: %s  %s\n", v.criterion, v.passed ? "PASS" : "FAIL", v.detail.c_str());
    ok = ok && v.passed;
  }
  return ok ? 0 : 1;
}
