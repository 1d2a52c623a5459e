#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modmeta/error.hpp"
#include "modmeta/rng.hpp"

namespace modmeta {

enum class Activation { relu, identity, tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

/// Shape of a dense feedforward network: layer widths from input to output.
struct Arch {
  std::vector<std::size_t> layer_sizes;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  Activation activation(std::size_t layer) const {
    return layer + 1 == num_layers() ? output : hidden;
  }

  void validate() const {
    if (layer_sizes.size() < 2)
      throw ConfigError("arch needs at least 2 layer sizes");
    for (auto s : layer_sizes)
      if (s == 0) throw ConfigError("arch layer sizes must be >= 1");
  }

  std::string to_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < layer_sizes.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(layer_sizes[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Arch&, const Arch&) = default;
};

/// Flat parameters. Per layer: weight matrix stored row-major as
/// [in][out], followed by the bias vector [out].
using ParamVector = std::vector<double>;

inline std::size_t param_count(const Arch& arch) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l)
    n += arch.layer_sizes[l] * arch.layer_sizes[l + 1] + arch.layer_sizes[l + 1];
  return n;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline ParamVector init_params(const Arch& arch, Rng& rng) {
  ParamVector p;
  p.reserve(param_count(arch));
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const std::size_t in = arch.layer_sizes[l], out = arch.layer_sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < in * out + out; ++i)
      p.push_back(rng.uniform(-bound, bound));
  }
  return p;
}

namespace detail {

inline double activate(Activation a, double v) {
  switch (a) {
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::tanh: return std::tanh(v);
    case Activation::identity: break;
  }
  return v;
}

// Derivative expressed through the activation's output value.
inline double activate_grad_from_output(Activation a, double out) {
  switch (a) {
    case Activation::relu: return out > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - out * out;
    case Activation::identity: break;
  }
  return 1.0;
}

inline void check_shapes(const Arch& arch, std::span<const double> params,
                         std::size_t input_size) {
  if (params.size() != param_count(arch))
    throw ShapeError("params length " + std::to_string(params.size()) +
                     " does not match arch " + arch.to_string() + " (expects " +
                     std::to_string(param_count(arch)) + ")");
  if (input_size != arch.input_dim())
    throw ShapeError("input length " + std::to_string(input_size) +
                     " does not match arch input dim " +
                     std::to_string(arch.input_dim()));
}

}  // namespace detail

/// Activations recorded by a forward pass; act[0] is the input and
/// act.back() the output. Reused across calls to avoid reallocation.
struct MlpTrace {
  std::vector<std::vector<double>> act;

  std::span<const double> output() const { return act.back(); }
};

inline void mlp_forward(const Arch& arch, std::span<const double> params,
                        std::span<const double> x, MlpTrace& trace) {
  detail::check_shapes(arch, params, x.size());
  const std::size_t layers = arch.num_layers();
  trace.act.resize(layers + 1);
  trace.act[0].assign(x.begin(), x.end());
  const double* p = params.data();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = arch.layer_sizes[l], out = arch.layer_sizes[l + 1];
    const double* w = p;
    const double* b = p + in * out;
    const std::vector<double>& a = trace.act[l];
    std::vector<double>& z = trace.act[l + 1];
    z.assign(b, b + out);
    for (std::size_t i = 0; i < in; ++i) {
      const double ai = a[i];
      const double* row = w + i * out;
      for (std::size_t o = 0; o < out; ++o) z[o] += ai * row[o];
    }
    const Activation act = arch.activation(l);
    if (act != Activation::identity)
      for (auto& v : z) v = detail::activate(act, v);
    p += in * out + out;
  }
}

inline std::vector<double> mlp_forward(const Arch& arch,
                                       std::span<const double> params,
                                       std::span<const double> x) {
  MlpTrace trace;
  mlp_forward(arch, params, x, trace);
  return std::move(trace.act.back());
}

struct BackpropScratch {
  std::vector<double> delta, next;
};

/// Backpropagates grad_out (dL/d output) through a recorded forward pass.
/// Accumulates dL/dparams into grad_params; writes dL/dx into grad_input
/// unless it is empty.
inline void mlp_backprop(const Arch& arch, std::span<const double> params,
                         const MlpTrace& trace, std::span<const double> grad_out,
                         std::span<double> grad_params, std::span<double> grad_input,
                         BackpropScratch& scratch) {
  const std::size_t layers = arch.num_layers();
  if (grad_out.size() != arch.output_dim() || grad_params.size() != params.size())
    throw ShapeError("mlp_backprop: gradient buffer shape mismatch");
  if (!grad_input.empty() && grad_input.size() != arch.input_dim())
    throw ShapeError("mlp_backprop: grad_input shape mismatch");

  std::vector<double>& delta = scratch.delta;
  std::vector<double>& next = scratch.next;
  delta.assign(grad_out.begin(), grad_out.end());

  std::size_t offset = params.size();
  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t in = arch.layer_sizes[l], out = arch.layer_sizes[l + 1];
    offset -= in * out + out;
    const Activation act = arch.activation(l);
    if (act != Activation::identity) {
      const std::vector<double>& z = trace.act[l + 1];
      for (std::size_t o = 0; o < out; ++o)
        delta[o] *= detail::activate_grad_from_output(act, z[o]);
    }
    const double* w = params.data() + offset;
    double* gw = grad_params.data() + offset;
    double* gb = gw + in * out;
    const std::vector<double>& a = trace.act[l];
    for (std::size_t o = 0; o < out; ++o) gb[o] += delta[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double ai = a[i];
      double* grow = gw + i * out;
      for (std::size_t o = 0; o < out; ++o) grow[o] += ai * delta[o];
    }
    if (l == 0 && grad_input.empty()) break;
    next.assign(in, 0.0);
    for (std::size_t i = 0; i < in; ++i) {
      const double* row = w + i * out;
      double s = 0.0;
      for (std::size_t o = 0; o < out; ++o) s += row[o] * delta[o];
      next[i] = s;
    }
    delta.swap(next);
  }
  if (!grad_input.empty())
    for (std::size_t i = 0; i < grad_input.size(); ++i) grad_input[i] = delta[i];
}

/// dL/dprediction for the mean (over `batch` examples and output dims)
/// squared error. Shared by every gradient path so results agree bitwise.
inline void mse_output_grad(std::span<const double> pred, std::span<const double> target,
                            std::size_t batch, std::span<double> out) {
  const double scale = 2.0 / static_cast<double>(batch * pred.size());
  for (std::size_t o = 0; o < pred.size(); ++o) out[o] = scale * (pred[o] - target[o]);
}

struct Example {
  std::vector<double> x, y;
};

struct MlpGradient {
  ParamVector params;
  std::vector<std::vector<double>> inputs;
  double loss = 0.0;
};

/// Exact gradient of the mean squared error over the batch.
inline MlpGradient mlp_backward(const Arch& arch, std::span<const double> params,
                                std::span<const Example> batch) {
  if (batch.empty()) throw DomainError("mlp_backward: empty batch");
  MlpGradient g;
  g.params.assign(params.size(), 0.0);
  MlpTrace trace;
  BackpropScratch scratch;
  std::vector<double> grad_out(arch.output_dim());
  for (const auto& ex : batch) {
    mlp_forward(arch, params, ex.x, trace);
    const auto pred = trace.output();
    if (ex.y.size() != pred.size()) throw ShapeError("mlp_backward: target length mismatch");
    for (std::size_t o = 0; o < pred.size(); ++o) {
      const double r = pred[o] - ex.y[o];
      g.loss += r * r;
    }
    mse_output_grad(pred, ex.y, batch.size(), grad_out);
    auto& gi = g.inputs.emplace_back(arch.input_dim(), 0.0);
    mlp_backprop(arch, params, trace, grad_out, g.params, gi, scratch);
  }
  g.loss /= static_cast<double>(batch.size() * arch.output_dim());
  return g;
}

}  // namespace modmeta
