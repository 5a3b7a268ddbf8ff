#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "navinterp/autodiff.hpp"

namespace navinterp {

// Adam with bias correction. The paper setting fixes only the learning rate
// (1e-4); beta/epsilon are the usual defaults.
template <typename T>
struct AdamState {
  long step = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  static AdamState init(const std::vector<ValuePtr<T>>& params,
                        double learning_rate = 1e-4, double beta1 = 0.9,
                        double beta2 = 0.999, double epsilon = 1e-8) {
    AdamState st;
    st.learning_rate = learning_rate;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.epsilon = epsilon;
    st.first_moment.reserve(params.size());
    st.second_moment.reserve(params.size());
    for (const auto& p : params) {
      st.first_moment.emplace_back(p->size(), T(0));
      st.second_moment.emplace_back(p->size(), T(0));
    }
    return st;
  }
};

// One bias-corrected update from the gradients currently in params.
// Gradients are left untouched; the caller resets them explicitly.
template <typename T>
void adam_step(const std::vector<ValuePtr<T>>& params, AdamState<T>& state) {
  if (params.size() != state.first_moment.size())
    throw std::invalid_argument("adam_step: state/params count mismatch");
  state.step += 1;
  const double b1t = 1.0 - std::pow(state.beta1, state.step);
  const double b2t = 1.0 - std::pow(state.beta2, state.step);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.size())
      throw std::invalid_argument("adam_step: moment/param shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / b1t;
      const double vhat = vi / b2t;
      p.data[i] = static_cast<T>(
          p.data[i] - state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

}  // namespace navinterp
