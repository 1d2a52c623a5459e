#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iterator>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "modmeta/error.hpp"
#include "modmeta/meta_learn.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/parallel.hpp"
#include "modmeta/structure.hpp"
#include "modmeta/tasks.hpp"

namespace modmeta {

// ---------------------------------------------------------------------------
// Result tables

struct ResultRow {
  std::string suite;
  std::string method;
  double mean_loss = 0.0;
  double std_error = 0.0;
  std::size_t n_tasks = 0;
  std::uint64_t seed = 0;
  std::string config_digest;

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  const ResultRow* find(const std::string& suite, const std::string& method) const {
    for (const auto& r : rows)
      if (r.suite == suite && r.method == method) return &r;
    return nullptr;
  }
  friend bool operator==(const ResultTable&, const ResultTable&) = default;
};

struct LossSummary {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Mean and standard error (sample std / sqrt(n)).
inline LossSummary summarize(std::span<const double> losses) {
  LossSummary s;
  if (losses.empty()) return s;
  for (double v : losses) s.mean += v;
  s.mean /= static_cast<double>(losses.size());
  if (losses.size() > 1) {
    double ss = 0.0;
    for (double v : losses) ss += (v - s.mean) * (v - s.mean);
    s.std_error = std::sqrt(ss / static_cast<double>(losses.size() - 1) / static_cast<double>(losses.size()));
  }
  return s;
}

/// What a method contributes to evaluation: its trained pool, the scheme it
/// searches over and how it solves a new task.
struct MethodArtifact {
  std::string method;
  Scheme scheme;
  ModulePool pool;
  TrainConfig config;
  MetatestMode mode = MetatestMode::structure_only;
};

struct TaskOutcome {
  Structure structure;
  double train_error = 0.0;
  double test_loss = 0.0;
};

/// Solves every task of `suite` on its training set and scores the result on
/// its test set. Task j searches with stream(seed, j, 0, search).
/// With a non-empty `train_prefixes`, each task is solved once per prefix
/// length n using only its first n training points, and its loss is the
/// mean over those solves (the structure reported is the last one's).
inline std::vector<TaskOutcome> metatest_suite(const MethodArtifact& m, const TaskSuite& suite,
                                               std::size_t threads = 1,
                                               std::span<const std::size_t> train_prefixes = {}) {
  if (scheme_input_dim(m.scheme, m.pool) != suite.in_dim() || scheme_output_dim(m.scheme, m.pool) != suite.out_dim())
    throw ConfigError("method '" + m.method + "' does not match the dims of the meta-test suite");
  std::vector<TaskOutcome> out(suite.tasks.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, suite.tasks.size()));
  const std::size_t chunk = (suite.tasks.size() + workers - 1) / workers;
  parallel_for(workers, workers, [&](std::size_t w) {
    for (std::size_t j = w * chunk; j < std::min(suite.tasks.size(), (w + 1) * chunk); ++j) {
      const auto& task = suite.tasks[j];
      if (train_prefixes.empty()) {
        Rng rng = stream(m.config.seed, j, 0, Purpose::search);
        auto r = metatest_solve(task.train, m.scheme, m.pool, m.config, m.mode, rng);
        out[j] = {r.structure, r.train_error, r.predictor.error(task.test)};
        continue;
      }
      TaskOutcome acc;
      for (std::size_t k = 0; k < train_prefixes.size(); ++k) {
        const std::size_t n = train_prefixes[k];
        if (n == 0 || n > task.train.size())
          throw ConfigError("train prefix " + std::to_string(n) + " is outside task " + std::to_string(j) +
                            "'s training set");
        Rng rng = stream(m.config.seed, j, k, Purpose::search);
        auto r = metatest_solve(task.train.prefix(n), m.scheme, m.pool, m.config, m.mode, rng);
        acc.structure = r.structure;
        acc.train_error += r.train_error / static_cast<double>(train_prefixes.size());
        acc.test_loss += r.predictor.error(task.test) / static_cast<double>(train_prefixes.size());
      }
      out[j] = std::move(acc);
    }
  });
  return out;
}

inline ResultRow summarize_outcomes(const std::string& suite_name, const std::string& method,
                                    std::span<const TaskOutcome> outcomes, std::uint64_t seed,
                                    const std::string& digest) {
  std::vector<double> losses;
  for (const auto& o : outcomes) losses.push_back(o.test_loss);
  const auto s = summarize(losses);
  return {suite_name, method, s.mean, s.std_error, outcomes.size(), seed, digest};
}

inline ResultTable evaluate_methods(std::span<const MethodArtifact> methods, const TaskSuite& suite,
                                    const std::string& suite_name, std::uint64_t seed,
                                    const std::string& digest, std::size_t threads = 1,
                                    std::span<const std::size_t> train_prefixes = {}) {
  ResultTable t;
  for (const auto& m : methods) {
    const auto outcomes = metatest_suite(m, suite, threads, train_prefixes);
    t.rows.push_back(summarize_outcomes(suite_name, m.method, outcomes, seed, digest));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Sharing

/// |multiset intersection of module ids| / slots (the larger structure's
/// size when tree sizes differ).
inline double sharing_fraction(const Structure& a, const Structure& b) {
  const std::size_t slots = std::max(a.size(), b.size());
  if (slots == 0) return 0.0;
  std::vector<ModuleId> x = a.modules, y = b.modules;
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::vector<ModuleId> common;
  std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(slots);
}

struct SharingMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<std::size_t>> counts;
};

/// Entry (g, h) is the mean sharing fraction over distinct task pairs whose
/// groups are g and h. Entries without pairs are NaN with count 0.
inline SharingMatrix sharing_matrix(std::span<const Structure> structures, std::span<const std::string> task_groups,
                                    std::vector<std::string> labels) {
  if (structures.size() != task_groups.size())
    throw ConfigError("sharing_matrix: one group per structure required");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
  std::vector<std::size_t> g(task_groups.size());
  for (std::size_t j = 0; j < task_groups.size(); ++j) {
    auto it = index.find(task_groups[j]);
    if (it == index.end()) throw ConfigError("sharing_matrix: unknown group label '" + task_groups[j] + "'");
    g[j] = it->second;
  }
  const std::size_t n = labels.size();
  SharingMatrix m{std::move(labels), std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0)),
                  std::vector<std::vector<std::size_t>>(n, std::vector<std::size_t>(n, 0))};
  for (std::size_t i = 0; i < structures.size(); ++i)
    for (std::size_t j = i + 1; j < structures.size(); ++j) {
      const double f = sharing_fraction(structures[i], structures[j]);
      m.values[g[i]][g[j]] += f;
      ++m.counts[g[i]][g[j]];
      if (g[i] != g[j]) {
        m.values[g[j]][g[i]] += f;
        ++m.counts[g[j]][g[i]];
      }
    }
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      m.values[a][b] = m.counts[a][b] ? m.values[a][b] / static_cast<double>(m.counts[a][b])
                                      : std::numeric_limits<double>::quiet_NaN();
  return m;
}

/// Number of tags two tasks have in common, counted as a multiset.
inline std::size_t label_overlap(std::vector<std::string> a, std::vector<std::string> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::string> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return common.size();
}

struct OverlapSharing {
  // Indexed by the number of shared generating labels.
  std::vector<double> mean;
  std::vector<std::size_t> pairs;
};

/// Mean sharing fraction over all task pairs, bucketed by label overlap.
inline OverlapSharing sharing_by_overlap(std::span<const Structure> structures,
                                         std::span<const std::vector<std::string>> labels) {
  if (structures.size() != labels.size()) throw ConfigError("sharing_by_overlap: one label set per structure");
  OverlapSharing r;
  for (std::size_t i = 0; i < structures.size(); ++i)
    for (std::size_t j = i + 1; j < structures.size(); ++j) {
      const std::size_t k = label_overlap(labels[i], labels[j]);
      if (r.mean.size() <= k) {
        r.mean.resize(k + 1, 0.0);
        r.pairs.resize(k + 1, 0);
      }
      r.mean[k] += sharing_fraction(structures[i], structures[j]);
      ++r.pairs[k];
    }
  for (std::size_t k = 0; k < r.mean.size(); ++k)
    r.mean[k] = r.pairs[k] ? r.mean[k] / static_cast<double>(r.pairs[k]) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// ---------------------------------------------------------------------------
// Module recovery

struct BasisMatch {
  std::string name;
  ModuleId module = -1;
  double mad = 0.0;
};

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

struct MatchOptions {
  std::vector<double> grid = linspace(-1.0, 1.0, 201);
  // A module in a k-term sum carries f / std plus 1/k of the -mean / std
  // offset; 0.5 matches the two-term sums.
  double offset_fraction = 0.5;
  // Compare after removing each curve's grid mean, which ignores how the
  // constant offset was split between the summed modules.
  bool align_offset = false;
};

/// For every basis function, the generic 1-d module closest in mean absolute
/// deviation on the grid, comparing in standardized target space.
inline std::vector<BasisMatch> match_modules_to_basis(const ModulePool& pool, std::span<const std::string> names,
                                                      const Standardization& stats, const MatchOptions& opt = {}) {
  if (opt.grid.empty()) throw ConfigError("match_modules_to_basis: empty grid");
  const auto ids = pool.eligible(Role::generic());
  for (auto id : ids)
    if (pool.arch(id).input_dim() != 1 || pool.arch(id).output_dim() != 1)
      throw ConfigError("match_modules_to_basis needs scalar-input, scalar-output modules");
  const double mean = stats.empty() ? 0.0 : stats.mean.at(0);
  const double sd = stats.empty() ? 1.0 : stats.std.at(0);
  const std::size_t n = opt.grid.size();
  auto centered = [&](std::vector<double> v) {
    if (!opt.align_offset) return v;
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double& x : v) x -= m;
    return v;
  };

  std::vector<std::vector<double>> curves;
  for (auto id : ids) {
    std::vector<double> c(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = module_forward(pool, id, std::vector<double>{opt.grid[i]})[0];
    curves.push_back(centered(std::move(c)));
  }
  std::vector<BasisMatch> out;
  for (const auto& name : names) {
    std::vector<double> target(n);
    for (std::size_t i = 0; i < n; ++i)
      target[i] = (basis_function(name, opt.grid[i]) - opt.offset_fraction * mean) / sd;
    target = centered(std::move(target));
    BasisMatch best{name, -1, std::numeric_limits<double>::infinity()};
    for (std::size_t k = 0; k < ids.size(); ++k) {
      double mad = 0.0;
      for (std::size_t i = 0; i < n; ++i) mad += std::abs(curves[k][i] - target[i]);
      mad /= static_cast<double>(n);
      if (mad < best.mad) best = {name, ids[k], mad};
    }
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Emission

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols{"suite",   "method", "mean_loss",    "std_error",
                                             "n_tasks", "seed",   "config_digest"};
  return cols;
}

inline std::string table_to_csv(const ResultTable& t) {
  std::string out;
  for (std::size_t i = 0; i < result_columns().size(); ++i) out += (i ? "," : "") + result_columns()[i];
  out += "\n";
  for (const auto& r : t.rows)
    out += r.suite + "," + r.method + "," + format_double(r.mean_loss) + "," + format_double(r.std_error) + "," +
           std::to_string(r.n_tasks) + "," + std::to_string(r.seed) + "," + r.config_digest + "\n";
  return out;
}

inline ResultTable table_from_csv(const std::string& text, const std::string& origin = "<table>") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line) != result_columns())
    throw IngestError(origin + ": result table header does not match the expected columns");
  ResultTable t;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != result_columns().size())
      throw IngestError(origin + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                        " cells");
    ResultRow r;
    r.suite = cells[0];
    r.method = cells[1];
    r.mean_loss = detail::parse_cell(cells[2], origin, row, 2);
    r.std_error = detail::parse_cell(cells[3], origin, row, 3);
    r.n_tasks = static_cast<std::size_t>(std::stoull(cells[4]));
    r.seed = std::stoull(cells[5]);
    r.config_digest = cells[6];
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline std::string matrix_to_csv(const SharingMatrix& m) {
  std::string out = "group";
  for (const auto& l : m.labels) out += "," + l;
  out += "\n";
  for (std::size_t a = 0; a < m.labels.size(); ++a) {
    out += m.labels[a];
    for (std::size_t b = 0; b < m.labels.size(); ++b) out += "," + format_double(m.values[a][b]);
    out += "\n";
  }
  return out;
}

inline SharingMatrix matrix_from_csv(const std::string& text, const std::string& origin = "<matrix>") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw IngestError(origin + ": empty matrix file");
  auto header = detail::split_csv_line(line);
  if (header.empty() || header[0] != "group") throw IngestError(origin + ": matrix header must start with 'group'");
  SharingMatrix m;
  m.labels.assign(header.begin() + 1, header.end());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) throw IngestError(origin + ": row " + std::to_string(row) + " is ragged");
    std::vector<double> values;
    for (std::size_t c = 1; c < cells.size(); ++c)
      values.push_back(detail::parse_cell(cells[c], origin, row, c));
    m.values.push_back(std::move(values));
  }
  return m;
}

/// Provenance recorded next to every emitted file.
struct Sidecar {
  std::string config_digest;
  std::uint64_t seed = 0;
  json extra = json::object();
};

inline json sidecar_json(const Sidecar& s, const std::string& kind, const std::string& file) {
  json j{{"kind", kind},
         {"file", file},
         {"config_digest", s.config_digest},
         {"seed", s.seed},
         {"generated_at", utc_timestamp()}};
  for (auto it = s.extra.begin(); it != s.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

struct EmittedFiles {
  std::filesystem::path data;
  std::filesystem::path sidecar;
};

inline EmittedFiles emit_report(const ResultTable& t, const std::filesystem::path& dir, const std::string& stem,
                                const Sidecar& meta) {
  EmittedFiles f{dir / (stem + ".csv"), dir / (stem + ".json")};
  write_text_file(f.data, table_to_csv(t));
  auto j = sidecar_json(meta, "result_table", f.data.filename().string());
  j["columns"] = result_columns();
  write_text_file(f.sidecar, j.dump(2) + "\n");
  return f;
}

inline EmittedFiles emit_report(const SharingMatrix& m, const std::filesystem::path& dir, const std::string& stem,
                                const Sidecar& meta) {
  EmittedFiles f{dir / (stem + ".csv"), dir / (stem + ".json")};
  write_text_file(f.data, matrix_to_csv(m));
  auto j = sidecar_json(meta, "sharing_matrix", f.data.filename().string());
  j["counts"] = m.counts;
  write_text_file(f.sidecar, j.dump(2) + "\n");
  return f;
}

inline EmittedFiles emit_report(std::span<const BasisMatch> matches, const std::filesystem::path& dir,
                                const std::string& stem, const Sidecar& meta) {
  EmittedFiles f{dir / (stem + ".csv"), dir / (stem + ".json")};
  std::string csv = "basis,module,mad\n";
  for (const auto& m : matches) csv += m.name + "," + std::to_string(m.module) + "," + format_double(m.mad) + "\n";
  write_text_file(f.data, csv);
  auto j = sidecar_json(meta, "basis_matches", f.data.filename().string());
  j["columns"] = {"basis", "module", "mad"};
  write_text_file(f.sidecar, j.dump(2) + "\n");
  return f;
}

inline EmittedFiles emit_report(const OverlapSharing& o, const std::filesystem::path& dir, const std::string& stem,
                                const Sidecar& meta) {
  EmittedFiles f{dir / (stem + ".csv"), dir / (stem + ".json")};
  std::string csv = "shared_labels,mean_sharing,pairs\n";
  for (std::size_t k = 0; k < o.mean.size(); ++k)
    csv += std::to_string(k) + "," + format_double(o.mean[k]) + "," + std::to_string(o.pairs[k]) + "\n";
  write_text_file(f.data, csv);
  auto j = sidecar_json(meta, "sharing_by_overlap", f.data.filename().string());
  j["columns"] = {"shared_labels", "mean_sharing", "pairs"};
  write_text_file(f.sidecar, j.dump(2) + "\n");
  return f;
}

}  // namespace modmeta
