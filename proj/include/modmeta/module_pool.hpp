#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "modmeta/digest.hpp"
#include "modmeta/error.hpp"
#include "modmeta/nn.hpp"
#include "modmeta/rng.hpp"

namespace modmeta {

using ModuleId = int;
using json = nlohmann::json;

enum class RoleKind { generic, attention, regressor, encoder, head_block };

/// The job a group of modules plays inside a compositional scheme. Head
/// blocks are indexed so each output block draws from its own sub-pool.
struct Role {
  RoleKind kind = RoleKind::generic;
  int block = 0;

  static Role generic() { return {RoleKind::generic, 0}; }
  static Role attention() { return {RoleKind::attention, 0}; }
  static Role regressor() { return {RoleKind::regressor, 0}; }
  static Role encoder() { return {RoleKind::encoder, 0}; }
  static Role head_block(int b) { return {RoleKind::head_block, b}; }

  std::string to_string() const {
    switch (kind) {
      case RoleKind::generic: return "generic";
      case RoleKind::attention: return "attention";
      case RoleKind::regressor: return "regressor";
      case RoleKind::encoder: return "encoder";
      case RoleKind::head_block: return "head-block[" + std::to_string(block) + "]";
    }
    return "?";
  }

  friend bool operator==(const Role&, const Role&) = default;
};

/// Throws VersionError for tags this build does not know, since those can
/// only come from a newer writer.
inline Role role_from_string(std::string_view s) {
  if (s == "generic") return Role::generic();
  if (s == "attention") return Role::attention();
  if (s == "regressor") return Role::regressor();
  if (s == "encoder") return Role::encoder();
  constexpr std::string_view prefix = "head-block[";
  if (s.starts_with(prefix) && s.ends_with("]") && s.size() > prefix.size() + 1) {
    std::string digits(s.substr(prefix.size(), s.size() - prefix.size() - 1));
    if (digits.find_first_not_of("0123456789") == std::string::npos && digits.size() < 6)
      return Role::head_block(std::stoi(digits));
  }
  throw VersionError("unknown role tag '" + std::string(s) + "'");
}

struct ModuleGroup {
  Role role;
  Arch arch;
  std::vector<ModuleId> member_ids;
};

struct PoolSpecEntry {
  Role role;
  Arch arch;
  std::size_t count = 1;
};

using PoolSpec = std::vector<PoolSpecEntry>;

/// The basis set of modules and their joint parameters. Ids are dense
/// integers 0..k-1 assigned in group order.
class ModulePool {
 public:
  ModulePool() = default;

  std::size_t size() const { return params_.size(); }
  const std::vector<ModuleGroup>& groups() const { return groups_; }
  std::uint64_t seed() const { return seed_; }

  const ModuleGroup& group_of(ModuleId id) const { return groups_[group_index(id)]; }
  const Arch& arch(ModuleId id) const { return group_of(id).arch; }
  const Role& role(ModuleId id) const { return group_of(id).role; }

  std::span<const double> params(ModuleId id) const {
    check_id(id);
    return params_[static_cast<std::size_t>(id)];
  }

  /// Write access. Only the training and fine-tuning code paths use this.
  ParamVector& mutable_params(ModuleId id) {
    check_id(id);
    return params_[static_cast<std::size_t>(id)];
  }

  void set_params(ModuleId id, ParamVector p) {
    check_id(id);
    if (p.size() != param_count(arch(id)))
      throw ShapeError("set_params: length mismatch for module " + std::to_string(id));
    params_[static_cast<std::size_t>(id)] = std::move(p);
  }

  /// All module ids whose group plays `role`, in id order.
  std::vector<ModuleId> eligible(const Role& role) const {
    std::vector<ModuleId> ids;
    for (const auto& g : groups_)
      if (g.role == role) ids.insert(ids.end(), g.member_ids.begin(), g.member_ids.end());
    return ids;
  }

  std::string digest() const {
    Fnv1a h;
    for (const auto& p : params_) h.update(std::span<const double>(p));
    return h.hex();
  }

  friend bool operator==(const ModulePool& a, const ModulePool& b) {
    if (a.seed_ != b.seed_ || a.params_ != b.params_ || a.groups_.size() != b.groups_.size())
      return false;
    for (std::size_t i = 0; i < a.groups_.size(); ++i) {
      const auto &ga = a.groups_[i], &gb = b.groups_[i];
      if (!(ga.role == gb.role) || !(ga.arch == gb.arch) || ga.member_ids != gb.member_ids)
        return false;
    }
    return true;
  }

  // Builders used by init_pool and checkpoint_load; they keep the
  // id/group bookkeeping consistent.
  void add_group(Role role, Arch arch, std::vector<ParamVector> members) {
    ModuleGroup g{role, std::move(arch), {}};
    for (auto& p : members) {
      if (p.size() != param_count(g.arch))
        throw ShapeError("module parameter length does not match group arch " +
                         g.arch.to_string());
      g.member_ids.push_back(static_cast<ModuleId>(params_.size()));
      owner_.push_back(groups_.size());
      params_.push_back(std::move(p));
    }
    groups_.push_back(std::move(g));
  }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

 private:
  void check_id(ModuleId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= params_.size())
      throw LookupError("unknown module id " + std::to_string(id));
  }
  std::size_t group_index(ModuleId id) const {
    check_id(id);
    return owner_[static_cast<std::size_t>(id)];
  }

  std::vector<ModuleGroup> groups_;
  std::vector<ParamVector> params_;
  std::vector<std::size_t> owner_;
  std::uint64_t seed_ = 0;
};

inline ModulePool init_pool(const PoolSpec& spec, std::uint64_t seed) {
  ModulePool pool;
  pool.set_seed(seed);
  std::uint64_t next_id = 0;
  for (const auto& entry : spec) {
    entry.arch.validate();
    if (entry.count < 1) throw ConfigError("pool group count must be >= 1");
    std::vector<ParamVector> members;
    for (std::size_t i = 0; i < entry.count; ++i, ++next_id) {
      Rng rng = stream(seed, next_id, 0, Purpose::init);
      members.push_back(init_params(entry.arch, rng));
    }
    pool.add_group(entry.role, entry.arch, std::move(members));
  }
  return pool;
}

inline std::vector<double> module_forward(const ModulePool& pool, ModuleId id,
                                          std::span<const double> x) {
  return mlp_forward(pool.arch(id), pool.params(id), x);
}

// ---------------------------------------------------------------------------
// JSON encoding shared with config parsing and checkpoints.

inline json arch_to_json(const Arch& a) {
  return json{{"layers", a.layer_sizes},
              {"hidden", std::string(to_string(a.hidden))},
              {"output", std::string(to_string(a.output))}};
}

inline Arch arch_from_json(const json& j) {
  Arch a;
  if (j.is_array()) {
    a.layer_sizes = j.get<std::vector<std::size_t>>();
  } else {
    a.layer_sizes = j.at("layers").get<std::vector<std::size_t>>();
    if (j.contains("hidden")) a.hidden = activation_from_string(j.at("hidden").get<std::string>());
    if (j.contains("output")) a.output = activation_from_string(j.at("output").get<std::string>());
  }
  a.validate();
  return a;
}

inline constexpr int kCheckpointSchemaVersion = 1;

inline json pool_to_json(const ModulePool& pool) {
  json groups = json::array();
  for (const auto& g : pool.groups())
    groups.push_back({{"role", g.role.to_string()},
                      {"arch", arch_to_json(g.arch)},
                      {"members", g.member_ids}});
  json params = json::array();
  for (std::size_t id = 0; id < pool.size(); ++id) {
    const auto p = pool.params(static_cast<ModuleId>(id));
    params.push_back(std::vector<double>(p.begin(), p.end()));
  }
  return json{{"format", "modmeta-pool"},
              {"schema_version", kCheckpointSchemaVersion},
              {"seed", pool.seed()},
              {"groups", std::move(groups)},
              {"params", std::move(params)}};
}

inline ModulePool pool_from_json(const json& doc) {
  try {
    if (!doc.is_object() || doc.value("format", "") != "modmeta-pool")
      throw FormatError("not a module pool checkpoint", 0);
    const int version = doc.at("schema_version").get<int>();
    if (version != kCheckpointSchemaVersion)
      throw VersionError("checkpoint schema version " + std::to_string(version) +
                         " is not supported (expected " +
                         std::to_string(kCheckpointSchemaVersion) + ")");
    ModulePool pool;
    pool.set_seed(doc.at("seed").get<std::uint64_t>());
    const json& params = doc.at("params");
    ModuleId expected = 0;
    for (const auto& g : doc.at("groups")) {
      Role role = role_from_string(g.at("role").get<std::string>());
      Arch arch = arch_from_json(g.at("arch"));
      std::vector<ParamVector> members;
      for (const auto& id_json : g.at("members")) {
        const auto id = id_json.get<ModuleId>();
        if (id != expected)
          throw FormatError("module ids must be dense and in group order", 0);
        if (static_cast<std::size_t>(id) >= params.size())
          throw FormatError("missing parameters for module " + std::to_string(id), 0);
        members.push_back(params.at(static_cast<std::size_t>(id)).get<ParamVector>());
        ++expected;
      }
      pool.add_group(role, std::move(arch), std::move(members));
    }
    if (static_cast<std::size_t>(expected) != params.size())
      throw FormatError("parameter arrays without a group", 0);
    return pool;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what(), 0);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what(), 0);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what(), 0);
  }
}

/// Parses a JSON document from text, turning syntax errors into FormatError
/// with the byte offset reported by the parser.
inline json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(origin + ": " + e.what(), e.byte);
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void checkpoint_save(const ModulePool& pool, const std::filesystem::path& path) {
  write_text_file(path, pool_to_json(pool).dump(1) + "\n");
}

inline ModulePool checkpoint_load(const std::filesystem::path& path) {
  return pool_from_json(parse_json_text(read_text_file(path), path.string()));
}

}  // namespace modmeta
