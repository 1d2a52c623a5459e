#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "modmeta/dataset.hpp"
#include "modmeta/error.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/rng.hpp"

namespace modmeta {

// ---------------------------------------------------------------------------
// Basis functions for the sums-of-functions domain. Names follow numpy; in
// particular sinc is the normalized sin(pi t) / (pi t).

inline const std::array<std::string_view, 16>& basis_names() {
  static const std::array<std::string_view, 16> names = {
      "abs",  "arcsinh", "arctan", "cbrt", "ceil", "cos",    "cosh",   "exp2",
      "floor", "rint",   "sign",   "sin",  "sinc", "square", "tanh",   "id"};
  return names;
}

inline double basis_function(std::string_view name, double x) {
  constexpr double pi = std::numbers::pi;
  if (name == "abs") return std::abs(x);
  if (name == "arcsinh") return std::asinh(4.0 * x) / std::asinh(4.0);
  if (name == "arctan") return std::atan(4.0 * x) / std::atan(4.0);
  if (name == "cbrt") return std::cbrt(x);
  if (name == "ceil") return std::ceil(x);
  if (name == "cos") return std::cos(4.0 * pi * x);
  if (name == "cosh") return std::cosh(4.0 * x) / std::cosh(4.0);
  if (name == "exp2") return std::exp2(4.0 * x) / std::exp2(4.0);
  if (name == "floor") return std::floor(x);
  if (name == "rint") return std::nearbyint(x);
  if (name == "sign") return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
  if (name == "sin") return std::sin(4.0 * pi * x);
  if (name == "sinc") {
    const double t = pi * (4.0 * pi * x);
    return t == 0.0 ? 1.0 : std::sin(t) / t;
  }
  if (name == "square") return x * x;
  if (name == "tanh") return std::tanh(x);
  if (name == "id") return x;
  throw ConfigError("unknown basis function '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Tasks and suites

struct TaskData {
  Dataset train;
  Dataset test;
  std::vector<std::string> labels;
};

/// Per-output affine map y_std = (y - mean) / std.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> std;

  bool empty() const { return mean.empty(); }
  friend bool operator==(const Standardization&, const Standardization&) = default;
};

struct TaskSuite {
  std::vector<TaskData> tasks;
  Standardization stats;  // empty while targets are still raw
  json meta = json::object();

  std::size_t in_dim() const { return tasks.empty() ? 0 : tasks.front().train.in_dim(); }
  std::size_t out_dim() const { return tasks.empty() ? 0 : tasks.front().train.out_dim(); }

  std::vector<Dataset> train_sets() const {
    std::vector<Dataset> v;
    for (const auto& t : tasks) v.push_back(t.train);
    return v;
  }
  std::vector<Dataset> test_sets() const {
    std::vector<Dataset> v;
    for (const auto& t : tasks) v.push_back(t.test);
    return v;
  }
};

/// Mean and population standard deviation of every target in the suite
/// (train and test sets of all tasks pooled), per output dimension.
inline Standardization fit_standardization(const TaskSuite& raw) {
  const std::size_t d = raw.out_dim();
  if (raw.tasks.empty() || d == 0) throw DegenerateDataError("cannot standardize an empty suite");
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t n = 0;
  auto visit = [&](auto&& fn) {
    for (const auto& t : raw.tasks)
      for (const Dataset* ds : {&t.train, &t.test})
        for (std::size_t i = 0; i < ds->size(); ++i) fn(ds->y(i));
  };
  visit([&](std::span<const double> y) {
    for (std::size_t o = 0; o < d; ++o) sum[o] += y[o];
    ++n;
  });
  Standardization s;
  s.mean.resize(d);
  s.std.resize(d);
  for (std::size_t o = 0; o < d; ++o) s.mean[o] = sum[o] / static_cast<double>(n);
  visit([&](std::span<const double> y) {
    for (std::size_t o = 0; o < d; ++o) sq[o] += (y[o] - s.mean[o]) * (y[o] - s.mean[o]);
  });
  for (std::size_t o = 0; o < d; ++o) {
    s.std[o] = std::sqrt(sq[o] / static_cast<double>(n));
    if (!(s.std[o] > 0.0))
      throw DegenerateDataError("output " + std::to_string(o) + " has zero variance");
  }
  return s;
}

inline void transform_targets(TaskSuite& suite, const Standardization& s, bool inverse) {
  for (auto& t : suite.tasks)
    for (Dataset* ds : {&t.train, &t.test}) {
      if (ds->out_dim() != s.mean.size()) throw ShapeError("standardization dims do not match suite");
      for (std::size_t i = 0; i < ds->size(); ++i) {
        auto y = ds->mutable_y(i);
        for (std::size_t o = 0; o < y.size(); ++o)
          y[o] = inverse ? y[o] * s.std[o] + s.mean[o] : (y[o] - s.mean[o]) / s.std[o];
      }
    }
}

/// Applies fixed statistics (typically fit on the meta-training suite).
inline TaskSuite apply_standardization(TaskSuite raw, const Standardization& s) {
  if (!raw.stats.empty()) throw ConfigError("suite is already standardized");
  transform_targets(raw, s, false);
  raw.stats = s;
  return raw;
}

/// Fits statistics on the pooled targets and applies them.
inline TaskSuite standardize(TaskSuite raw) {
  const Standardization s = fit_standardization(raw);
  return apply_standardization(std::move(raw), s);
}

/// Back to raw targets.
inline TaskSuite destandardize(TaskSuite suite) {
  if (suite.stats.empty()) return suite;
  transform_targets(suite, suite.stats, true);
  suite.stats = {};
  return suite;
}

// ---------------------------------------------------------------------------
// Generators

struct SumSuiteSpec {
  std::size_t n_tasks = 230;
  std::size_t n_train = 16;
  std::size_t n_test = 64;
  std::uint64_t seed = 0;
  // Offset into the seeded permutation of all 256 ordered pairs. A held-out
  // suite with the same seed and skip = n_tasks of the training suite never
  // repeats a training pair.
  std::size_t skip = 0;
  double x_lo = -1.0, x_hi = 1.0;
  // When nonzero, each task draws its training-set size uniformly from
  // [n_train_min, n_train].
  std::size_t n_train_min = 0;
};

inline TaskSuite gen_sum_suite_raw(const SumSuiteSpec& spec) {
  constexpr std::size_t kPairs = 16 * 16;
  if (spec.n_tasks + spec.skip > kPairs)
    throw ConfigError("sum suite: n_tasks + skip exceeds the 256 available function pairs");
  if (spec.n_tasks == 0 || spec.n_train == 0 || spec.n_test == 0)
    throw ConfigError("sum suite: counts must be >= 1");
  if (!(spec.x_lo < spec.x_hi)) throw ConfigError("sum suite: x range is empty");
  if (spec.n_train_min > spec.n_train) throw ConfigError("sum suite: n_train_min exceeds n_train");
  std::vector<std::size_t> pairs(kPairs);
  std::iota(pairs.begin(), pairs.end(), 0);
  Rng perm = stream(spec.seed, 0, 0, Purpose::suite);
  for (std::size_t i = kPairs - 1; i > 0; --i) std::swap(pairs[i], pairs[perm.below(i + 1)]);

  const auto& names = basis_names();
  TaskSuite suite;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    const std::size_t pair = pairs[spec.skip + t];
    const auto a = names[pair / 16], b = names[pair % 16];
    Rng rng = stream(spec.seed, pair + 1, 1, Purpose::suite);
    std::size_t n_train = spec.n_train;
    if (spec.n_train_min > 0) {
      Rng count = stream(spec.seed, pair + 1, 3, Purpose::suite);
      n_train = spec.n_train_min + count.below(spec.n_train - spec.n_train_min + 1);
    }
    TaskData task{Dataset(1, 1), Dataset(1, 1), {std::string(a), std::string(b)}};
    for (Dataset* ds : {&task.train, &task.test}) {
      const std::size_t n = ds == &task.train ? n_train : spec.n_test;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.uniform(spec.x_lo, spec.x_hi);
        ds->add({x}, {basis_function(a, x) + basis_function(b, x)});
      }
    }
    suite.tasks.push_back(std::move(task));
  }
  suite.meta = {{"generator", "sum"},   {"n_tasks", spec.n_tasks}, {"n_train", spec.n_train},
                {"n_test", spec.n_test}, {"seed", spec.seed},       {"skip", spec.skip},
                {"n_train_min", spec.n_train_min}};
  return suite;
}

inline TaskSuite gen_sum_suite(const SumSuiteSpec& spec) { return standardize(gen_sum_suite_raw(spec)); }

struct SineSuiteSpec {
  std::size_t n_tasks = 230;
  std::size_t n_train = 16;
  std::size_t n_test = 64;
  std::uint64_t seed = 0;
  // Task t draws from the stream of index skip + t, so a held-out suite with
  // skip = n_tasks of the training suite continues it.
  std::size_t skip = 0;
  double a_lo = 0.1, a_hi = 5.0;
  double b_lo = 0.0, b_hi = std::numbers::pi;
  double x_lo = -5.0, x_hi = 5.0;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Tasks y = sin(a x + b) with a, b, x drawn uniformly from the spec ranges.
inline TaskSuite gen_sine_suite_raw(const SineSuiteSpec& spec) {
  if (spec.n_tasks == 0 || spec.n_train == 0 || spec.n_test == 0)
    throw ConfigError("sine suite: counts must be >= 1");
  if (!(spec.a_lo <= spec.a_hi && spec.b_lo <= spec.b_hi && spec.x_lo < spec.x_hi))
    throw ConfigError("sine suite: parameter ranges are inverted");
  TaskSuite suite;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    Rng rng = stream(spec.seed, spec.skip + t, 2, Purpose::suite);
    const double a = rng.uniform(spec.a_lo, spec.a_hi);
    const double b = rng.uniform(spec.b_lo, spec.b_hi);
    TaskData task{Dataset(1, 1), Dataset(1, 1), {"a=" + format_double(a), "b=" + format_double(b)}};
    for (Dataset* ds : {&task.train, &task.test}) {
      const std::size_t n = ds == &task.train ? spec.n_train : spec.n_test;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.uniform(spec.x_lo, spec.x_hi);
        ds->add({x}, {std::sin(a * x + b)});
      }
    }
    suite.tasks.push_back(std::move(task));
  }
  suite.meta = {{"generator", "sine"}, {"n_tasks", spec.n_tasks}, {"n_train", spec.n_train},
                {"n_test", spec.n_test},  {"seed", spec.seed},       {"skip", spec.skip},
                {"a", {spec.a_lo, spec.a_hi}},
                {"b", {spec.b_lo, spec.b_hi}}, {"x", {spec.x_lo, spec.x_hi}}};
  return suite;
}

inline TaskSuite gen_sine_suite(const SineSuiteSpec& spec) { return standardize(gen_sine_suite_raw(spec)); }

// ---------------------------------------------------------------------------
// CSV suites: a JSON manifest plus one CSV per task with header
// x0..x{d-1},y0..y{d'-1}. The first n_train rows are the training set.
// Targets on disk are raw; standardization is re-applied on load, either
// fit on the loaded suite or fixed by the manifest.

inline constexpr int kSuiteSchemaVersion = 1;

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_cell(const std::string& cell, const std::string& file, std::size_t row,
                         std::size_t col) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw IngestError(file + ": row " + std::to_string(row) + ", column " + std::to_string(col) +
                      ": '" + cell + "' is not a number");
  }
}

}  // namespace detail

/// Writes the suite with raw (de-standardized) targets. When
/// `fixed_stats` is true the manifest pins the suite's statistics so a
/// reload applies them instead of refitting (used for held-out suites).
inline std::filesystem::path save_csv_suite(const TaskSuite& suite, const std::filesystem::path& dir,
                                            bool fixed_stats = false) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const TaskSuite raw = destandardize(suite);
  json tasks = json::array();
  for (std::size_t t = 0; t < raw.tasks.size(); ++t) {
    const auto& task = raw.tasks[t];
    char name[32];
    std::snprintf(name, sizeof name, "task_%04zu.csv", t);
    std::string text;
    for (std::size_t i = 0; i < task.train.in_dim(); ++i) text += (i ? ",x" : "x") + std::to_string(i);
    for (std::size_t o = 0; o < task.train.out_dim(); ++o) text += ",y" + std::to_string(o);
    text += '\n';
    for (const Dataset* ds : {&task.train, &task.test})
      for (std::size_t n = 0; n < ds->size(); ++n) {
        std::string row;
        for (double v : ds->x(n)) row += (row.empty() ? "" : ",") + format_double(v);
        for (double v : ds->y(n)) row += "," + format_double(v);
        text += row + '\n';
      }
    write_text_file(dir / name, text);
    tasks.push_back({{"csv", name},
                     {"n_train", task.train.size()},
                     {"labels", task.labels},
                     {"input_dims", task.train.in_dim()},
                     {"output_dims", task.train.out_dim()}});
  }
  json manifest{{"format", "modmeta-suite"},
                {"schema_version", kSuiteSchemaVersion},
                {"meta", suite.meta},
                {"tasks", std::move(tasks)}};
  if (fixed_stats && !suite.stats.empty())
    manifest["standardization"] = {{"mode", "fixed"}, {"mean", suite.stats.mean}, {"std", suite.stats.std}};
  else
    manifest["standardization"] = {{"mode", "fit"}};
  const auto path = dir / "manifest.json";
  write_text_file(path, manifest.dump(1) + "\n");
  return path;
}

inline TaskSuite load_csv_suite(const std::filesystem::path& manifest_path) {
  if (!std::filesystem::exists(manifest_path))
    throw IngestError("manifest '" + manifest_path.string() + "' does not exist");
  json manifest;
  try {
    manifest = parse_json_text(read_text_file(manifest_path), manifest_path.string());
  } catch (const FormatError& e) {
    throw IngestError(e.what());
  }
  const auto base = manifest_path.parent_path();
  TaskSuite suite;
  try {
    if (manifest.contains("schema_version") && manifest.at("schema_version").get<int>() != kSuiteSchemaVersion)
      throw VersionError("suite manifest schema version is not supported");
    suite.meta = manifest.value("meta", json::object());
    const auto& entries = manifest.at("tasks");
    if (!entries.is_array() || entries.empty()) throw IngestError("manifest lists no tasks");
    std::size_t in_dims = 0, out_dims = 0;
    for (const auto& entry : entries) {
      const auto file = entry.at("csv").get<std::string>();
      const auto n_train = entry.at("n_train").get<std::size_t>();
      const auto din = entry.at("input_dims").get<std::size_t>();
      const auto dout = entry.at("output_dims").get<std::size_t>();
      if (din == 0 || dout == 0) throw IngestError(file + ": input/output dims must be >= 1");
      if (in_dims == 0) {
        in_dims = din;
        out_dims = dout;
      } else if (din != in_dims || dout != out_dims) {
        throw IngestError(file + ": dims differ from the first task in the manifest");
      }
      const auto path = std::filesystem::path(file).is_absolute() ? std::filesystem::path(file) : base / file;
      std::ifstream in(path);
      if (!in) throw IngestError("cannot open task file '" + path.string() + "'");
      std::string line;
      if (!std::getline(in, line)) throw IngestError(file + ": missing header");
      const auto header = detail::split_csv_line(line);
      for (std::size_t c = 0; c < std::max(header.size(), din + dout); ++c) {
        const std::string expected = c < din ? "x" + std::to_string(c)
                                     : c < din + dout ? "y" + std::to_string(c - din)
                                                      : std::string();
        const std::string got = c < header.size() ? header[c] : std::string("<missing>");
        if (got != expected)
          throw IngestError(file + ": header column " + std::to_string(c) + " is '" + got +
                            "', expected '" + (expected.empty() ? "<end of header>" : expected) + "'");
      }
      TaskData task{Dataset(din, dout), Dataset(din, dout), entry.value("labels", std::vector<std::string>{})};
      std::vector<double> x(din), y(dout);
      std::size_t row = 0;
      while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != din + dout)
          throw IngestError(file + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                            " columns, expected " + std::to_string(din + dout));
        for (std::size_t c = 0; c < din; ++c) x[c] = detail::parse_cell(cells[c], file, row, c);
        for (std::size_t c = 0; c < dout; ++c) y[c] = detail::parse_cell(cells[din + c], file, row, din + c);
        (row <= n_train ? task.train : task.test).add(x, y);
      }
      if (n_train == 0) throw IngestError(file + ": n_train must be >= 1");
      if (n_train >= row)
        throw IngestError(file + ": n_train = " + std::to_string(n_train) + " leaves no test rows (file has " +
                          std::to_string(row) + " rows)");
      suite.tasks.push_back(std::move(task));
    }
    const json stats = manifest.value("standardization", json{{"mode", "fit"}});
    if (stats.value("mode", "fit") == "fixed") {
      Standardization s{stats.at("mean").get<std::vector<double>>(), stats.at("std").get<std::vector<double>>()};
      if (s.mean.size() != out_dims || s.std.size() != out_dims)
        throw IngestError("manifest standardization dims do not match output dims");
      return apply_standardization(std::move(suite), s);
    }
  } catch (const json::exception& e) {
    throw IngestError(manifest_path.string() + ": " + e.what());
  }
  return standardize(std::move(suite));
}

}  // namespace modmeta
