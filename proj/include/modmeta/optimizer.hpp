#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "modmeta/error.hpp"

namespace modmeta {

struct AdamHyper {
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1 must be in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2 must be in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("optimizer.epsilon must be > 0");
  }
};

struct OptState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;
  AdamHyper hyper;

  OptState() = default;
  OptState(std::size_t n, AdamHyper h)
      : first_moment(n, 0.0), second_moment(n, 0.0), hyper(h) {}
};

/// One bias-corrected Adam update, in place.
inline void optimizer_step(OptState& state, std::span<double> params,
                           std::span<const double> grads) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size())
    throw ShapeError("optimizer_step: length mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) throw NumericError("optimizer_step: non-finite gradient");

  const AdamHyper& h = state.hyper;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    params[i] -= h.lr * (m / c1) / (std::sqrt(v / c2) + h.epsilon);
  }
}

}  // namespace modmeta
