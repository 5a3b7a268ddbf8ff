#pragma once

#include <stdexcept>
#include <string>

#include "navinterp/autodiff.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

// Dense per-pixel displacement field, backward-warping convention: the vector
// stored at pixel x of a field tagged from->to points from frame `from`'s
// grid into frame `to`, so warp(frame_to, field) reconstructs frame_from.
// Layout {2,H,W}: plane 0 holds row displacements, plane 1 column
// displacements. (Files interleave per pixel; see io.hpp.)
template <typename T>
struct FlowField {
  Tensor<T> field;
  int frame_from = 0;
  int frame_to = 0;

  FlowField() = default;
  FlowField(Tensor<T> f, int from, int to)
      : field(std::move(f)), frame_from(from), frame_to(to) {
    if (field.shape.size() != 3 || field.shape[0] != 2)
      throw std::invalid_argument("FlowField: expected {2,H,W} tensor");
  }

  int rows() const { return field.shape[1]; }
  int cols() const { return field.shape[2]; }
};

using Flow = FlowField<float>;

// Graph-side counterpart carrying the same frame tags.
template <typename T>
struct FlowVar {
  ValuePtr<T> field;  // {2,H,W}
  int frame_from = 0;
  int frame_to = 0;
};

namespace detail {

inline void check_flow_chain(int a_to, int b_from, const char* op) {
  if (a_to != b_from)
    throw std::invalid_argument(std::string(op) +
                                ": frame-tag mismatch, first flow ends at " +
                                std::to_string(a_to) +
                                " but second starts at " +
                                std::to_string(b_from));
}

}  // namespace detail

}  // namespace navinterp
