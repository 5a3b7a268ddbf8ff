#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "navinterp/rng.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

// Reverse-mode differentiable value. A graph lives for one forward/backward
// pass; nodes own their inputs via shared_ptr so the DAG is kept alive by the
// root handle. grad always mirrors data's shape and is explicitly reset by
// the caller (no implicit zeroing between passes).
template <typename T>
struct DiffValue {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;  // depends on at least one trainable leaf
  bool trainable = false;      // leaf that accumulates gradient
  const char* op = "leaf";     // producing operation; "leaf" for inputs
  std::vector<std::shared_ptr<DiffValue<T>>> inputs;
  std::function<void(DiffValue<T>&)> backward_fn;

  std::size_t size() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }
  T scalar() const { return data[0]; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ValuePtr = std::shared_ptr<DiffValue<T>>;

template <typename T>
ValuePtr<T> make_leaf(Shape shape, std::vector<T> data, bool trainable = true) {
  auto v = std::make_shared<DiffValue<T>>();
  v->shape = std::move(shape);
  if (data.size() != numel(v->shape))
    throw std::invalid_argument("leaf data size does not match shape");
  v->data = std::move(data);
  v->grad.assign(v->data.size(), T(0));
  v->trainable = trainable;
  v->requires_grad = trainable;
  return v;
}

template <typename T>
ValuePtr<T> make_const(Shape shape, std::vector<T> data) {
  return make_leaf<T>(std::move(shape), std::move(data), false);
}

template <typename T>
ValuePtr<T> make_const(const Tensor<T>& t) {
  return make_leaf<T>(t.shape, t.data, false);
}

namespace detail {

template <typename T>
ValuePtr<T> make_op(const char* op, Shape shape,
                    std::vector<ValuePtr<T>> inputs) {
  auto v = std::make_shared<DiffValue<T>>();
  v->shape = std::move(shape);
  v->data.assign(numel(v->shape), T(0));
  v->grad.assign(v->data.size(), T(0));
  v->op = op;
  for (const auto& in : inputs)
    if (in->requires_grad) v->requires_grad = true;
  v->inputs = std::move(inputs);
  return v;
}

template <typename T>
void check_same_shape(const ValuePtr<T>& a, const ValuePtr<T>& b,
                      const char* op) {
  if (a->shape != b->shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

template <typename T>
ValuePtr<T> add(const ValuePtr<T>& a, const ValuePtr<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_op<T>("add", a->shape, {a, b});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] + b->data[i];
  out->backward_fn = [](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    for (std::size_t i = 0; i < self.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i];
      if (b.requires_grad) b.grad[i] += self.grad[i];
    }
  };
  return out;
}

template <typename T>
ValuePtr<T> sub(const ValuePtr<T>& a, const ValuePtr<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_op<T>("sub", a->shape, {a, b});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] - b->data[i];
  out->backward_fn = [](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    for (std::size_t i = 0; i < self.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i];
      if (b.requires_grad) b.grad[i] -= self.grad[i];
    }
  };
  return out;
}

template <typename T>
ValuePtr<T> mul(const ValuePtr<T>& a, const ValuePtr<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_op<T>("mul", a->shape, {a, b});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] * b->data[i];
  out->backward_fn = [](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    for (std::size_t i = 0; i < self.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i] * b.data[i];
      if (b.requires_grad) b.grad[i] += self.grad[i] * a.data[i];
    }
  };
  return out;
}

template <typename T>
ValuePtr<T> scale(const ValuePtr<T>& a, T factor) {
  auto out = detail::make_op<T>("scale", a->shape, {a});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] * factor;
  out->backward_fn = [factor](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.size(); ++i)
      a.grad[i] += self.grad[i] * factor;
  };
  return out;
}

template <typename T>
ValuePtr<T> relu(const ValuePtr<T>& a) {
  auto out = detail::make_op<T>("relu", a->shape, {a});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] > T(0) ? a->data[i] : T(0);
  out->backward_fn = [](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.size(); ++i)
      if (a.data[i] > T(0)) a.grad[i] += self.grad[i];
  };
  return out;
}

template <typename T>
ValuePtr<T> sum(const ValuePtr<T>& a) {
  auto out = detail::make_op<T>("sum", Shape{1}, {a});
  T acc = T(0);
  for (std::size_t i = 0; i < a->size(); ++i) acc += a->data[i];
  out->data[0] = acc;
  out->backward_fn = [](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    if (!a.requires_grad) return;
    const T g = self.grad[0];
    for (std::size_t i = 0; i < a.size(); ++i) a.grad[i] += g;
  };
  return out;
}

template <typename T>
ValuePtr<T> mean(const ValuePtr<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a->size()));
}

// Extracts plane `c` of a {C,H,W} tensor as an {H,W} value.
template <typename T>
ValuePtr<T> slice_channel(const ValuePtr<T>& a, int c) {
  if (a->shape.size() != 3)
    throw std::invalid_argument("slice_channel: expected rank-3 input");
  if (c < 0 || c >= a->shape[0])
    throw std::invalid_argument("slice_channel: channel out of range");
  const int H = a->shape[1], W = a->shape[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto out = detail::make_op<T>("slice_channel", Shape{H, W}, {a});
  std::copy_n(a->data.begin() + c * plane, plane, out->data.begin());
  out->backward_fn = [c, plane](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < plane; ++i)
      a.grad[c * plane + i] += self.grad[i];
  };
  return out;
}

// Same data under a new shape with identical element count.
template <typename T>
ValuePtr<T> reshape(const ValuePtr<T>& a, Shape new_shape) {
  if (numel(new_shape) != a->size())
    throw std::invalid_argument("reshape: element count mismatch");
  auto out = detail::make_op<T>("reshape", std::move(new_shape), {a});
  std::copy(a->data.begin(), a->data.end(), out->data.begin());
  out->backward_fn = [](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.size(); ++i) a.grad[i] += self.grad[i];
  };
  return out;
}

// Stacks two {H,W} planes into a {2,H,W} tensor (flow assembly).
template <typename T>
ValuePtr<T> stack2(const ValuePtr<T>& a, const ValuePtr<T>& b) {
  detail::check_same_shape(a, b, "stack2");
  if (a->shape.size() != 2)
    throw std::invalid_argument("stack2: expected rank-2 inputs");
  const int H = a->shape[0], W = a->shape[1];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto out = detail::make_op<T>("stack2", Shape{2, H, W}, {a, b});
  std::copy_n(a->data.begin(), plane, out->data.begin());
  std::copy_n(b->data.begin(), plane, out->data.begin() + plane);
  out->backward_fn = [plane](DiffValue<T>& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    for (std::size_t i = 0; i < plane; ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i];
      if (b.requires_grad) b.grad[i] += self.grad[plane + i];
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void topo_sort(DiffValue<T>* root, std::vector<DiffValue<T>*>& order) {
  // Iterative post-order DFS; recursion would overflow on long chains.
  std::unordered_set<DiffValue<T>*> visited;
  std::vector<std::pair<DiffValue<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      DiffValue<T>* next = node->inputs[idx++].get();
      if (next->requires_grad && !visited.count(next)) {
        visited.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Gradients accumulate into every
// trainable leaf reachable from root; repeated calls without zero_grad add
// another d(root)/d(leaf). Interior cotangents are rebuilt per sweep.
template <typename T>
void backward(const ValuePtr<T>& root) {
  if (!root->is_scalar())
    throw std::invalid_argument("backward: root must be a scalar");
  if (!root->requires_grad) return;  // constant root: nothing depends on leaves
  std::vector<DiffValue<T>*> order;
  detail::topo_sort(root.get(), order);
  for (DiffValue<T>* n : order)
    if (!n->inputs.empty()) n->zero_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    DiffValue<T>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

template <typename T>
void zero_grads(const std::vector<ValuePtr<T>>& params) {
  for (const auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Central-difference check of an op built by `make_graph` over fresh leaf
// copies of `inputs`. Vector-valued outputs are contracted with a fixed
// random projection so the check always runs against a scalar. Returns the
// max over all input elements of |analytic - numeric| / max(|a|, |n|, 1e-8).
template <typename T, typename MakeGraph>
double grad_check(const char* name, MakeGraph&& make_graph,
                  const std::vector<Tensor<T>>& inputs,
                  const std::vector<bool>& differentiable, double step = 1e-5,
                  std::uint64_t projection_seed = 0x9d2c5680) {
  auto build = [&](const std::vector<Tensor<T>>& vals) {
    std::vector<ValuePtr<T>> leaves;
    leaves.reserve(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i)
      leaves.push_back(make_leaf<T>(vals[i].shape, vals[i].data,
                                    differentiable[i]));
    ValuePtr<T> out = make_graph(leaves);
    return std::make_pair(out, leaves);
  };

  // Fixed projection shared by the analytic and numeric paths.
  auto project = [&](const ValuePtr<T>& out) -> ValuePtr<T> {
    if (out->is_scalar()) return out;
    Rng rng(projection_seed);
    std::vector<T> proj(out->size());
    for (auto& p : proj) p = static_cast<T>(rng.uniform(-1.0, 1.0));
    return sum(mul(out, make_const<T>(out->shape, std::move(proj))));
  };

  auto eval_scalar = [&](const std::vector<Tensor<T>>& vals) -> double {
    auto [out, leaves] = build(vals);
    auto s = project(out);
    const double v = static_cast<double>(s->scalar());
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("grad_check: non-finite output of ") +
                               name);
    return v;
  };

  auto [out, leaves] = build(inputs);
  auto root = project(out);
  backward(root);

  double max_rel = 0.0;
  std::vector<Tensor<T>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!differentiable[k]) continue;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = static_cast<double>(inputs[k].data[i]);
      const double h = step * std::max(1.0, std::abs(x0));
      work[k].data[i] = static_cast<T>(x0 + h);
      const double fp = eval_scalar(work);
      work[k].data[i] = static_cast<T>(x0 - h);
      const double fm = eval_scalar(work);
      work[k].data[i] = static_cast<T>(x0);
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = static_cast<double>(leaves[k]->grad[i]);
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace navinterp
