#pragma once

#include "convrec/tensor.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace convrec {

/// Gradients for an ordered parameter list, one buffer per parameter.
template <class S>
using GradientList = std::vector<std::vector<S>>;

/// Scales all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm; otherwise leaves them untouched. Returns the pre-clip norm.
template <class S>
double clip_global_norm(GradientList<S>& grads, double max_norm) {
  detail::require(max_norm > 0, "clip_global_norm: max_norm must be positive");
  double sq = 0;
  for (const auto& g : grads)
    for (S v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    // a few ulps under the exact ratio, so per-element rounding cannot land
    // the rescaled norm above the bound
    const S factor = static_cast<S>(
        max_norm / norm * (1.0 - 4.0 * static_cast<double>(std::numeric_limits<S>::epsilon())));
    for (auto& g : grads)
      for (S& v : g) v *= factor;
  }
  return norm;
}

/// Adam with bias correction; defaults are the usual beta1=0.9, beta2=0.999,
/// eps=1e-8. Moment buffers are laid out parallel to the parameter list.
template <class S>
struct AdamState {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  long step = 0;
  GradientList<S> m;
  GradientList<S> v;

  template <class ParamPtrs>
  void init(const ParamPtrs& params) {
    m.clear();
    v.clear();
    for (const auto* p : params) {
      m.emplace_back(p->data.size(), S(0));
      v.emplace_back(p->data.size(), S(0));
    }
  }
};

template <class S>
void adam_step(std::vector<Tensor<S>*>& params, const GradientList<S>& grads,
               AdamState<S>& state) {
  detail::require(params.size() == grads.size() && params.size() == state.m.size(),
                  "adam_step: parameter/gradient/state count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), state.step);
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), state.step);
  for (size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p]->data;
    const auto& g = grads[p];
    detail::require(w.size() == g.size(), "adam_step: gradient shape mismatch");
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (S(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (S(1) - state.beta2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      w[i] -= static_cast<S>(static_cast<double>(state.lr) * mhat /
                             (std::sqrt(vhat) + static_cast<double>(state.eps)));
    }
  }
}

}  // namespace convrec
