#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "modmeta/dataset.hpp"
#include "modmeta/error.hpp"
#include "modmeta/module_pool.hpp"
#include "modmeta/nn.hpp"
#include "modmeta/rng.hpp"

namespace modmeta {

/// Reported losses are 100 x mean squared error on standardized targets.
inline constexpr double kLossScale = 100.0;

enum class SchemeKind { single, sum, compose, weighted_ensemble, concat_heads, tree };

/// A compositional scheme: how slots are wired and which role each slot
/// draws its module from.
///
///   single            h(x) = f_a(x)
///   sum               h(x) = f_a(x) + f_b(x)
///   compose           h(x) = f_a(f_b(x))            slots [a, b]
///   weighted_ensemble h(x) = sum_l softmax_l(att_l(x)) reg_l(x)
///                     slots [att_1..att_m, reg_1..reg_m]
///   concat_heads      h(x) = [head_1(enc(x)), ..., head_B(enc(x))]
///                     slots [enc, head_1..head_B]
///   tree              each node applies its module to the sum of its
///                     children's outputs (leaves read x)
struct Scheme {
  SchemeKind kind = SchemeKind::single;
  std::size_t ensemble_size = 2;
  std::vector<std::size_t> head_dims;
  std::size_t max_depth = 3;
  std::size_t max_nodes = 7;

  static Scheme of(SchemeKind k) {
    Scheme s;
    s.kind = k;
    return s;
  }
  static Scheme single() { return {}; }
  static Scheme sum() { return of(SchemeKind::sum); }
  static Scheme compose() { return of(SchemeKind::compose); }
  static Scheme weighted_ensemble(std::size_t m) {
    Scheme s = of(SchemeKind::weighted_ensemble);
    s.ensemble_size = m;
    return s;
  }
  static Scheme concat_heads(std::vector<std::size_t> dims) {
    Scheme s = of(SchemeKind::concat_heads);
    s.head_dims = std::move(dims);
    return s;
  }
  static Scheme tree(std::size_t max_depth = 3, std::size_t max_nodes = 7) {
    Scheme s = of(SchemeKind::tree);
    s.max_depth = max_depth;
    s.max_nodes = max_nodes;
    return s;
  }

  bool is_tree() const { return kind == SchemeKind::tree; }

  std::string name() const {
    switch (kind) {
      case SchemeKind::single: return "single";
      case SchemeKind::sum: return "sum";
      case SchemeKind::compose: return "compose";
      case SchemeKind::weighted_ensemble: return "weighted_ensemble";
      case SchemeKind::concat_heads: return "concat_heads";
      case SchemeKind::tree: return "tree";
    }
    return "?";
  }

  /// Number of slots for fixed-shape schemes (trees have one per node).
  std::size_t num_slots() const {
    switch (kind) {
      case SchemeKind::single: return 1;
      case SchemeKind::sum:
      case SchemeKind::compose: return 2;
      case SchemeKind::weighted_ensemble: return 2 * ensemble_size;
      case SchemeKind::concat_heads: return 1 + head_dims.size();
      case SchemeKind::tree: return 0;
    }
    return 0;
  }

  Role slot_role(std::size_t slot) const {
    switch (kind) {
      case SchemeKind::weighted_ensemble:
        return slot < ensemble_size ? Role::attention() : Role::regressor();
      case SchemeKind::concat_heads:
        return slot == 0 ? Role::encoder() : Role::head_block(static_cast<int>(slot - 1));
      default: return Role::generic();
    }
  }

  friend bool operator==(const Scheme&, const Scheme&) = default;
};

/// One point in the structure space. Fixed schemes use one module id per
/// slot; trees store one id per node plus parent links, with parents always
/// at lower indices than their children (node 0 is the root).
struct Structure {
  std::vector<ModuleId> modules;
  std::vector<int> parent;

  std::size_t size() const { return modules.size(); }
  friend bool operator==(const Structure&, const Structure&) = default;
};

template <class P>
concept ParamSource = requires(const P& p, ModuleId id) {
  { p.arch(id) } -> std::convertible_to<const Arch&>;
  { p.params(id) } -> std::convertible_to<std::span<const double>>;
  { p.size() } -> std::convertible_to<std::size_t>;
};

// ---------------------------------------------------------------------------
// Scheme validation

inline std::size_t scheme_output_dim(const Scheme& scheme, const ModulePool& pool) {
  switch (scheme.kind) {
    case SchemeKind::weighted_ensemble: {
      auto regs = pool.eligible(Role::regressor());
      return regs.empty() ? 0 : pool.arch(regs.front()).output_dim();
    }
    case SchemeKind::concat_heads: {
      std::size_t n = 0;
      for (auto d : scheme.head_dims) n += d;
      return n;
    }
    default: {
      auto ids = pool.eligible(Role::generic());
      return ids.empty() ? 0 : pool.arch(ids.front()).output_dim();
    }
  }
}

inline std::size_t scheme_input_dim(const Scheme& scheme, const ModulePool& pool) {
  const Role r = scheme.kind == SchemeKind::weighted_ensemble ? Role::attention()
                 : scheme.kind == SchemeKind::concat_heads    ? Role::encoder()
                                                              : Role::generic();
  auto ids = pool.eligible(r);
  return ids.empty() ? 0 : pool.arch(ids.front()).input_dim();
}

/// Checks that the pool can populate every slot of the scheme with
/// dimension-compatible modules. Throws ConfigError otherwise.
inline void validate_scheme(const Scheme& scheme, const ModulePool& pool) {
  auto need = [&](const Role& r) {
    auto ids = pool.eligible(r);
    if (ids.empty())
      throw ConfigError("scheme '" + scheme.name() + "' needs modules with role " +
                        r.to_string() + " but the pool has none");
    return ids;
  };
  auto dims_of = [&](const std::vector<ModuleId>& ids, std::size_t& in, std::size_t& out) {
    in = pool.arch(ids.front()).input_dim();
    out = pool.arch(ids.front()).output_dim();
    for (auto id : ids)
      if (pool.arch(id).input_dim() != in || pool.arch(id).output_dim() != out)
        throw ConfigError("modules of role " + pool.role(id).to_string() +
                          " disagree on input/output dims");
  };
  std::size_t in = 0, out = 0;
  switch (scheme.kind) {
    case SchemeKind::single:
    case SchemeKind::sum: dims_of(need(Role::generic()), in, out); break;
    case SchemeKind::compose:
    case SchemeKind::tree:
      dims_of(need(Role::generic()), in, out);
      if (in != out)
        throw ConfigError("scheme '" + scheme.name() +
                          "' chains modules, so module input and output dims must match");
      if (scheme.is_tree() && (scheme.max_depth < 1 || scheme.max_nodes < 1))
        throw ConfigError("tree bounds must be >= 1");
      break;
    case SchemeKind::weighted_ensemble: {
      if (scheme.ensemble_size < 1) throw ConfigError("weighted_ensemble needs m >= 1");
      std::size_t rin = 0, rout = 0;
      dims_of(need(Role::attention()), in, out);
      if (out != 1) throw ConfigError("attention modules must have scalar output");
      dims_of(need(Role::regressor()), rin, rout);
      if (rin != in) throw ConfigError("attention and regressor modules disagree on input dim");
      break;
    }
    case SchemeKind::concat_heads: {
      if (scheme.head_dims.empty()) throw ConfigError("concat_heads needs at least one block");
      auto enc = need(Role::encoder());
      if (enc.size() != 1) throw ConfigError("concat_heads needs exactly one encoder module");
      dims_of(enc, in, out);
      for (std::size_t b = 0; b < scheme.head_dims.size(); ++b) {
        std::size_t hin = 0, hout = 0;
        dims_of(need(Role::head_block(static_cast<int>(b))), hin, hout);
        if (hin != out)
          throw ConfigError("head-block[" + std::to_string(b) +
                            "] input dim does not match encoder output dim");
        if (hout != scheme.head_dims[b])
          throw ConfigError("head-block[" + std::to_string(b) + "] output dim " +
                            std::to_string(hout) + " does not match block dim " +
                            std::to_string(scheme.head_dims[b]));
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Tree helpers

namespace tree {

inline std::vector<std::size_t> depths(const Structure& s) {
  std::vector<std::size_t> d(s.size(), 1);
  for (std::size_t i = 1; i < s.size(); ++i) d[i] = d[static_cast<std::size_t>(s.parent[i])] + 1;
  return d;
}

inline std::vector<bool> has_children(const Structure& s) {
  std::vector<bool> h(s.size(), false);
  for (std::size_t i = 1; i < s.size(); ++i) h[static_cast<std::size_t>(s.parent[i])] = true;
  return h;
}

/// Canonical text form; children are unordered because they are summed.
inline std::string canonical(const Structure& s, std::size_t node = 0) {
  std::vector<std::string> kids;
  for (std::size_t c = node + 1; c < s.size(); ++c)
    if (static_cast<std::size_t>(s.parent[c]) == node) kids.push_back(canonical(s, c));
  std::sort(kids.begin(), kids.end());
  std::string out = "(" + std::to_string(s.modules[node]);
  for (auto& k : kids) out += k;
  return out + ")";
}

inline void check(const Scheme& scheme, const Structure& s) {
  if (s.modules.empty()) throw ConfigError("tree structure has no nodes");
  if (s.parent.size() != s.modules.size() || s.parent[0] != -1)
    throw ConfigError("tree structure parent links are malformed");
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s.parent[i] < 0 || static_cast<std::size_t>(s.parent[i]) >= i)
      throw ConfigError("tree parents must precede their children");
  if (s.size() > scheme.max_nodes) throw ConfigError("tree exceeds max_nodes");
  for (auto d : depths(s))
    if (d > scheme.max_depth) throw ConfigError("tree exceeds max_depth");
}

}  // namespace tree

/// Structural equality up to reordering of summed tree children.
inline bool equivalent(const Scheme& scheme, const Structure& a, const Structure& b) {
  if (scheme.is_tree()) return tree::canonical(a) == tree::canonical(b);
  return a.modules == b.modules;
}

/// Throws ConfigError when `s` is not a member of the scheme's structure
/// space over `pool`.
inline void validate_structure(const Scheme& scheme, const Structure& s, const ModulePool& pool) {
  auto check_id = [&](ModuleId id, const Role& role) {
    if (id < 0 || static_cast<std::size_t>(id) >= pool.size())
      throw ConfigError("structure references unknown module " + std::to_string(id));
    if (!(pool.role(id) == role))
      throw ConfigError("module " + std::to_string(id) + " has role " +
                        pool.role(id).to_string() + ", slot needs " + role.to_string());
  };
  if (scheme.is_tree()) {
    tree::check(scheme, s);
    for (auto id : s.modules) check_id(id, Role::generic());
    return;
  }
  if (s.modules.size() != scheme.num_slots() || !s.parent.empty())
    throw ConfigError("structure has " + std::to_string(s.modules.size()) + " slots, scheme '" +
                      scheme.name() + "' needs " + std::to_string(scheme.num_slots()));
  for (std::size_t i = 0; i < s.modules.size(); ++i) check_id(s.modules[i], scheme.slot_role(i));
}

// ---------------------------------------------------------------------------
// Initial structures and local modifications

inline Structure initial_structure(const Scheme& scheme, const ModulePool& pool, Rng& rng) {
  auto pick = [&](const Role& role) {
    auto ids = pool.eligible(role);
    if (ids.empty()) throw ConfigError("no modules with role " + role.to_string());
    return ids[rng.below(ids.size())];
  };
  Structure s;
  if (scheme.is_tree()) {
    s.modules.push_back(pick(Role::generic()));
    s.parent.push_back(-1);
    return s;
  }
  for (std::size_t i = 0; i < scheme.num_slots(); ++i) s.modules.push_back(pick(scheme.slot_role(i)));
  return s;
}

namespace detail {

inline ModuleId pick_other(const std::vector<ModuleId>& ids, ModuleId current, Rng& rng) {
  // ids contains current exactly once and has at least two elements.
  auto r = static_cast<std::size_t>(rng.below(ids.size() - 1));
  auto pos = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), current) - ids.begin());
  if (pos < ids.size() && r >= pos) ++r;
  return ids[r];
}

}  // namespace detail

/// Applies one random local modification. Returns nullopt when the
/// structure admits no legal move. The input is left untouched.
inline std::optional<Structure> propose(const Scheme& scheme, const Structure& current,
                                        const ModulePool& pool, Rng& rng) {
  if (!scheme.is_tree()) {
    std::vector<std::size_t> movable;
    std::vector<std::vector<ModuleId>> eligible(current.modules.size());
    for (std::size_t i = 0; i < current.modules.size(); ++i) {
      const Role role = scheme.slot_role(i);
      if (role.kind == RoleKind::encoder) continue;
      eligible[i] = pool.eligible(role);
      if (eligible[i].size() >= 2) movable.push_back(i);
    }
    if (movable.empty()) return std::nullopt;
    Structure next = current;
    const std::size_t slot = movable[rng.below(movable.size())];
    next.modules[slot] = detail::pick_other(eligible[slot], current.modules[slot], rng);
    return next;
  }

  const auto ids = pool.eligible(Role::generic());
  const auto depth = tree::depths(current);
  const auto inner = tree::has_children(current);
  std::vector<std::size_t> insert_at, leaves;
  if (current.size() < scheme.max_nodes)
    for (std::size_t i = 0; i < current.size(); ++i)
      if (depth[i] < scheme.max_depth) insert_at.push_back(i);
  for (std::size_t i = 1; i < current.size(); ++i)
    if (!inner[i]) leaves.push_back(i);

  enum class Move { reassign, insert, remove };
  std::vector<Move> moves;
  if (ids.size() >= 2) moves.push_back(Move::reassign);
  if (!insert_at.empty()) moves.push_back(Move::insert);
  if (!leaves.empty()) moves.push_back(Move::remove);
  if (moves.empty()) return std::nullopt;

  Structure next = current;
  switch (moves[rng.below(moves.size())]) {
    case Move::reassign: {
      const std::size_t node = rng.below(current.size());
      next.modules[node] = detail::pick_other(ids, current.modules[node], rng);
      break;
    }
    case Move::insert: {
      const std::size_t at = insert_at[rng.below(insert_at.size())];
      next.modules.push_back(ids[rng.below(ids.size())]);
      next.parent.push_back(static_cast<int>(at));
      break;
    }
    case Move::remove: {
      const std::size_t leaf = leaves[rng.below(leaves.size())];
      next.modules.erase(next.modules.begin() + static_cast<std::ptrdiff_t>(leaf));
      next.parent.erase(next.parent.begin() + static_cast<std::ptrdiff_t>(leaf));
      for (auto& p : next.parent)
        if (p > static_cast<int>(leaf)) --p;
      break;
    }
  }
  return next;
}

// ---------------------------------------------------------------------------
// Gradients keyed by module id

/// Per-module gradient blocks. Modules that a structure never touched have
/// an empty block, which reads as zero.
class ModuleGradients {
 public:
  explicit ModuleGradients(std::size_t modules = 0) : blocks_(modules) {}

  std::size_t size() const { return blocks_.size(); }
  bool touched(ModuleId id) const { return !blocks_[static_cast<std::size_t>(id)].empty(); }
  std::span<const double> get(ModuleId id) const { return blocks_[static_cast<std::size_t>(id)]; }

  std::span<double> block(ModuleId id, std::size_t length) {
    auto& b = blocks_[static_cast<std::size_t>(id)];
    if (b.empty()) b.assign(length, 0.0);
    return b;
  }

  /// Dense copy of one block (zeros when untouched).
  std::vector<double> dense(ModuleId id, std::size_t length) const {
    const auto& b = blocks_[static_cast<std::size_t>(id)];
    return b.empty() ? std::vector<double>(length, 0.0) : b;
  }

  void add(const ModuleGradients& other) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& o = other.blocks_[i];
      if (o.empty()) continue;
      auto& b = blocks_[i];
      if (b.empty()) b.assign(o.size(), 0.0);
      for (std::size_t k = 0; k < o.size(); ++k) b[k] += o[k];
    }
  }

  void scale(double factor) {
    for (auto& b : blocks_)
      for (auto& v : b) v *= factor;
  }

  void clear() {
    for (auto& b : blocks_) b.clear();
  }

 private:
  std::vector<std::vector<double>> blocks_;
};

inline std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> w(scores.begin(), scores.end());
  if (w.empty()) return w;
  const double peak = *std::max_element(w.begin(), w.end());
  double total = 0.0;
  for (auto& v : w) total += (v = std::exp(v - peak));
  for (auto& v : w) v /= total;
  return w;
}

// ---------------------------------------------------------------------------
// Forward evaluation and backpropagation through a structure

/// Evaluates S_theta(x) one example at a time and keeps what backward()
/// needs. Holds scratch buffers, so reuse one instance per thread.
class StructureEvaluator {
 public:
  template <ParamSource P>
  std::span<const double> forward(const Scheme& scheme, const Structure& s, const P& params,
                                  std::span<const double> x) {
    const std::size_t calls = s.size();
    if (traces_.size() < calls) traces_.resize(calls);
    auto run = [&](std::size_t call, ModuleId id, std::span<const double> in) {
      mlp_forward(params.arch(id), params.params(id), in, traces_[call]);
      return traces_[call].output();
    };

    switch (scheme.kind) {
      case SchemeKind::single: {
        auto y = run(0, s.modules[0], x);
        out_.assign(y.begin(), y.end());
        break;
      }
      case SchemeKind::sum: {
        auto a = run(0, s.modules[0], x);
        auto b = run(1, s.modules[1], x);
        if (a.size() != b.size()) throw ShapeError("sum: module output dims differ");
        out_.resize(a.size());
        for (std::size_t o = 0; o < a.size(); ++o) out_[o] = a[o] + b[o];
        break;
      }
      case SchemeKind::compose: {
        auto inner = run(1, s.modules[1], x);
        auto y = run(0, s.modules[0], inner);
        out_.assign(y.begin(), y.end());
        break;
      }
      case SchemeKind::weighted_ensemble: {
        const std::size_t m = scheme.ensemble_size;
        scores_.resize(m);
        for (std::size_t l = 0; l < m; ++l) {
          auto a = run(l, s.modules[l], x);
          if (a.size() != 1) throw ShapeError("attention module output must be scalar");
          scores_[l] = a[0];
        }
        weights_ = softmax(scores_);
        out_.clear();
        for (std::size_t l = 0; l < m; ++l) {
          auto g = run(m + l, s.modules[m + l], x);
          if (out_.empty()) out_.assign(g.size(), 0.0);
          if (g.size() != out_.size()) throw ShapeError("regressor output dims differ");
          for (std::size_t o = 0; o < g.size(); ++o) out_[o] += weights_[l] * g[o];
        }
        break;
      }
      case SchemeKind::concat_heads: {
        auto code = run(0, s.modules[0], x);
        code_.assign(code.begin(), code.end());
        out_.clear();
        for (std::size_t b = 1; b < s.size(); ++b) {
          auto h = run(b, s.modules[b], code_);
          if (h.size() != scheme.head_dims[b - 1])
            throw ShapeError("head block output does not match block dim");
          out_.insert(out_.end(), h.begin(), h.end());
        }
        break;
      }
      case SchemeKind::tree: {
        if (child_sum_.size() < calls) child_sum_.resize(calls);
        for (std::size_t i = 0; i < calls; ++i) child_sum_[i].clear();
        for (std::size_t i = calls; i-- > 0;) {
          const bool leaf = child_sum_[i].empty();
          auto y = run(i, s.modules[i], leaf ? x : std::span<const double>(child_sum_[i]));
          if (i == 0) {
            out_.assign(y.begin(), y.end());
            break;
          }
          auto& acc = child_sum_[static_cast<std::size_t>(s.parent[i])];
          if (acc.empty()) acc.assign(y.size(), 0.0);
          for (std::size_t o = 0; o < y.size(); ++o) acc[o] += y[o];
        }
        break;
      }
    }
    return out_;
  }

  /// Accumulates dL/dtheta for the most recent forward() call, given
  /// dL/dprediction.
  template <ParamSource P>
  void backward(const Scheme& scheme, const Structure& s, const P& params,
                std::span<const double> grad_out, ModuleGradients& grads) {
    auto back = [&](std::size_t call, ModuleId id, std::span<const double> g,
                    std::vector<double>* grad_input) {
      const Arch& arch = params.arch(id);
      auto gp = grads.block(id, param_count(arch));
      std::span<double> gi;
      if (grad_input) {
        grad_input->assign(arch.input_dim(), 0.0);
        gi = *grad_input;
      }
      mlp_backprop(arch, params.params(id), traces_[call], g, gp, gi, scratch_);
    };

    switch (scheme.kind) {
      case SchemeKind::single: back(0, s.modules[0], grad_out, nullptr); break;
      case SchemeKind::sum:
        back(0, s.modules[0], grad_out, nullptr);
        back(1, s.modules[1], grad_out, nullptr);
        break;
      case SchemeKind::compose:
        back(0, s.modules[0], grad_out, &tmp_);
        back(1, s.modules[1], tmp_, nullptr);
        break;
      case SchemeKind::weighted_ensemble: {
        const std::size_t m = scheme.ensemble_size;
        dw_.assign(m, 0.0);
        double mix = 0.0;
        for (std::size_t l = 0; l < m; ++l) {
          auto g = traces_[m + l].output();
          double dot = 0.0;
          for (std::size_t o = 0; o < g.size(); ++o) dot += grad_out[o] * g[o];
          dw_[l] = dot;
          mix += weights_[l] * dot;
        }
        for (std::size_t l = 0; l < m; ++l) {
          tmp_.resize(grad_out.size());
          for (std::size_t o = 0; o < grad_out.size(); ++o) tmp_[o] = weights_[l] * grad_out[o];
          back(m + l, s.modules[m + l], tmp_, nullptr);
          const double da = weights_[l] * (dw_[l] - mix);
          back(l, s.modules[l], std::span<const double>(&da, 1), nullptr);
        }
        break;
      }
      case SchemeKind::concat_heads: {
        code_grad_.assign(code_.size(), 0.0);
        std::size_t offset = 0;
        for (std::size_t b = 1; b < s.size(); ++b) {
          const std::size_t dim = scheme.head_dims[b - 1];
          back(b, s.modules[b], grad_out.subspan(offset, dim), &tmp_);
          for (std::size_t i = 0; i < tmp_.size(); ++i) code_grad_[i] += tmp_[i];
          offset += dim;
        }
        back(0, s.modules[0], code_grad_, nullptr);
        break;
      }
      case SchemeKind::tree: {
        const std::size_t n = s.size();
        const auto inner = tree::has_children(s);
        if (node_grad_.size() < n) node_grad_.resize(n);
        if (input_grad_.size() < n) input_grad_.resize(n);
        node_grad_[0].assign(grad_out.begin(), grad_out.end());
        for (std::size_t i = 0; i < n; ++i) {
          if (i > 0) node_grad_[i] = input_grad_[static_cast<std::size_t>(s.parent[i])];
          back(i, s.modules[i], node_grad_[i], inner[i] ? &input_grad_[i] : nullptr);
        }
        break;
      }
    }
  }

 private:
  std::vector<MlpTrace> traces_;
  std::vector<double> out_, tmp_, code_, code_grad_, scores_, weights_, dw_;
  std::vector<std::vector<double>> child_sum_, node_grad_, input_grad_;
  BackpropScratch scratch_;
};

template <ParamSource P>
std::vector<double> structure_forward(const Scheme& scheme, const Structure& s, const P& params,
                                      std::span<const double> x) {
  StructureEvaluator ev;
  auto y = ev.forward(scheme, s, params, x);
  return {y.begin(), y.end()};
}

/// Unscaled mean (over examples and output dims) squared error.
template <ParamSource P>
double mean_squared_error(const Dataset& data, const Scheme& scheme, const Structure& s,
                          const P& params, StructureEvaluator& ev) {
  if (data.empty()) throw DomainError("error on an empty dataset");
  double total = 0.0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    auto pred = ev.forward(scheme, s, params, data.x(n));
    auto y = data.y(n);
    if (pred.size() != y.size()) throw ShapeError("prediction and target dims differ");
    for (std::size_t o = 0; o < y.size(); ++o) {
      const double r = pred[o] - y[o];
      total += r * r;
    }
  }
  return total / static_cast<double>(data.size() * data.out_dim());
}

/// e(D, S, theta): 100 x mean squared error over D.
template <ParamSource P>
double task_error(const Dataset& data, const Scheme& scheme, const Structure& s, const P& params,
                  StructureEvaluator& ev) {
  return kLossScale * mean_squared_error(data, scheme, s, params, ev);
}

template <ParamSource P>
double task_error(const Dataset& data, const Scheme& scheme, const Structure& s, const P& params) {
  StructureEvaluator ev;
  return task_error(data, scheme, s, params, ev);
}

/// Exact gradient of the unscaled mean squared error over `batch` with
/// respect to every module; tied modules receive the sum over their uses.
/// Returns the loss value.
template <ParamSource P>
double structure_gradient(const Scheme& scheme, const Structure& s, const P& params,
                          const Dataset& batch, ModuleGradients& grads, StructureEvaluator& ev) {
  if (batch.empty()) throw DomainError("gradient on an empty batch");
  if (grads.size() != params.size()) grads = ModuleGradients(params.size());
  std::vector<double> grad_out(batch.out_dim());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto pred = ev.forward(scheme, s, params, batch.x(n));
    auto y = batch.y(n);
    if (pred.size() != y.size()) throw ShapeError("prediction and target dims differ");
    for (std::size_t o = 0; o < y.size(); ++o) {
      const double r = pred[o] - y[o];
      loss += r * r;
    }
    mse_output_grad(pred, y, batch.size(), grad_out);
    ev.backward(scheme, s, params, grad_out, grads);
  }
  return loss / static_cast<double>(batch.size() * batch.out_dim());
}

template <ParamSource P>
ModuleGradients structure_gradient(const Scheme& scheme, const Structure& s, const P& params,
                                   const Dataset& batch) {
  ModuleGradients g(params.size());
  StructureEvaluator ev;
  structure_gradient(scheme, s, params, batch, g, ev);
  return g;
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration (test oracle)

namespace detail {

struct CanonTree {
  ModuleId id;
  std::vector<std::size_t> children;  // indices into the per-depth catalogue
  std::size_t nodes;
};

}  // namespace detail

/// Every structure in the space, without duplicates (tree children are
/// unordered). Throws CapacityError if the space holds more than `cap`.
inline std::vector<Structure> enumerate_structures(const Scheme& scheme, const ModulePool& pool,
                                                   std::size_t cap) {
  std::vector<Structure> out;
  if (!scheme.is_tree()) {
    std::vector<std::vector<ModuleId>> choices;
    std::size_t total = 1;
    for (std::size_t i = 0; i < scheme.num_slots(); ++i) {
      choices.push_back(pool.eligible(scheme.slot_role(i)));
      if (choices.back().empty()) throw ConfigError("empty slot group");
      if (total > cap / choices.back().size() + 1) throw CapacityError("structure space exceeds cap");
      total *= choices.back().size();
    }
    if (total > cap)
      throw CapacityError("structure space has " + std::to_string(total) +
                          " elements, cap is " + std::to_string(cap));
    std::vector<std::size_t> idx(choices.size(), 0);
    for (std::size_t n = 0; n < total; ++n) {
      Structure s;
      for (std::size_t i = 0; i < choices.size(); ++i) s.modules.push_back(choices[i][idx[i]]);
      out.push_back(std::move(s));
      for (std::size_t i = choices.size(); i-- > 0;) {
        if (++idx[i] < choices[i].size()) break;
        idx[i] = 0;
      }
    }
    return out;
  }

  // Trees: build catalogues of canonical subtrees by remaining depth. A
  // subtree's children are a multiset, generated in non-decreasing
  // catalogue order so each multiset appears once.
  const auto ids = pool.eligible(Role::generic());
  if (ids.empty()) throw ConfigError("empty slot group");
  std::vector<std::vector<detail::CanonTree>> cat(scheme.max_depth + 1);
  std::size_t budget = 0;
  for (std::size_t d = 1; d <= scheme.max_depth; ++d) {
    auto& level = cat[d];
    const auto& below = cat[d - 1];
    std::vector<std::size_t> pick;
    std::function<void(std::size_t, std::size_t)> extend = [&](std::size_t from, std::size_t used) {
      for (auto id : ids) {
        if (++budget > cap) throw CapacityError("tree structure space exceeds cap");
        level.push_back({id, pick, used + 1});
      }
      for (std::size_t c = from; c < below.size(); ++c) {
        if (used + 1 + below[c].nodes > scheme.max_nodes) continue;
        pick.push_back(c);
        extend(c, used + below[c].nodes);
        pick.pop_back();
      }
    };
    budget = 0;
    extend(0, 0);
  }
  std::function<void(std::size_t, std::size_t, int, Structure&)> emit =
      [&](std::size_t depth, std::size_t index, int parent, Structure& s) {
        const auto& node = cat[depth][index];
        const int self = static_cast<int>(s.modules.size());
        s.modules.push_back(node.id);
        s.parent.push_back(parent);
        for (auto c : node.children) emit(depth - 1, c, self, s);
      };
  for (std::size_t i = 0; i < cat[scheme.max_depth].size(); ++i) {
    Structure s;
    emit(scheme.max_depth, i, -1, s);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline json scheme_to_json(const Scheme& s) {
  json j{{"type", s.name()}};
  if (s.kind == SchemeKind::weighted_ensemble) j["m"] = s.ensemble_size;
  if (s.kind == SchemeKind::concat_heads) j["blocks"] = s.head_dims;
  if (s.kind == SchemeKind::tree) {
    j["max_depth"] = s.max_depth;
    j["max_nodes"] = s.max_nodes;
  }
  return j;
}

inline Scheme scheme_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "single") return Scheme::single();
  if (type == "sum") return Scheme::sum();
  if (type == "compose") return Scheme::compose();
  if (type == "weighted_ensemble") return Scheme::weighted_ensemble(j.value("m", std::size_t{2}));
  if (type == "concat_heads") return Scheme::concat_heads(j.at("blocks").get<std::vector<std::size_t>>());
  if (type == "tree")
    return Scheme::tree(j.value("max_depth", std::size_t{3}), j.value("max_nodes", std::size_t{7}));
  throw ConfigError("unknown scheme type '" + type + "'");
}

namespace detail {

inline json tree_node_json(const Structure& s, std::size_t node) {
  json kids = json::array();
  for (std::size_t c = node + 1; c < s.size(); ++c)
    if (static_cast<std::size_t>(s.parent[c]) == node) kids.push_back(tree_node_json(s, c));
  return json{{"module", s.modules[node]}, {"children", std::move(kids)}};
}

inline void tree_node_parse(const json& j, int parent, Structure& s) {
  const int self = static_cast<int>(s.modules.size());
  s.modules.push_back(j.at("module").get<ModuleId>());
  s.parent.push_back(parent);
  for (const auto& c : j.at("children")) tree_node_parse(c, self, s);
}

}  // namespace detail

inline json structure_to_json(const Scheme& scheme, const Structure& s) {
  if (scheme.is_tree()) return json{{"scheme", scheme.name()}, {"tree", detail::tree_node_json(s, 0)}};
  return json{{"scheme", scheme.name()}, {"slots", s.modules}};
}

inline Structure structure_from_json(const Scheme& scheme, const json& j) {
  const auto name = j.at("scheme").get<std::string>();
  if (name != scheme.name())
    throw ConfigError("structure was saved for scheme '" + name + "', expected '" + scheme.name() + "'");
  Structure s;
  if (scheme.is_tree())
    detail::tree_node_parse(j.at("tree"), -1, s);
  else
    s.modules = j.at("slots").get<std::vector<ModuleId>>();
  return s;
}

}  // namespace modmeta
