#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "navinterp/autodiff.hpp"
#include "navinterp/flow.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

// Convolution layer descriptor. "Convolution" here is cross-correlation (no
// kernel flip); learned filters make the distinction immaterial, but oracle
// code must match this convention.
struct ConvSpec {
  int filter_size = 3;
  int in_channels = 1;
  int out_channels = 1;
  int stride = 1;
  bool has_relu = true;

  void validate() const {
    if (filter_size < 1 || filter_size % 2 == 0)
      throw std::invalid_argument("ConvSpec: filter_size must be odd");
    if (stride != 1 && stride != 2)
      throw std::invalid_argument("ConvSpec: stride must be 1 or 2");
    if (in_channels < 1 || out_channels < 1)
      throw std::invalid_argument("ConvSpec: channels must be >= 1");
  }
};

namespace kernels {

// One axis of a clamped bilinear tap. Positions are clamped to [0, n-1]
// before index selection; `interior` marks where d(sample)/d(pos) is live.
template <typename T>
struct AxisTap {
  int i0 = 0;
  int i1 = 0;
  T w1 = T(0);  // weight of i1; i0 gets 1-w1
  bool interior = false;
};

template <typename T>
inline AxisTap<T> axis_tap(T pos, int n) {
  AxisTap<T> t;
  if (n == 1) return t;
  t.interior = pos > T(0) && pos < T(n - 1);
  T pc = pos;
  if (pc < T(0)) pc = T(0);
  if (pc > T(n - 1)) pc = T(n - 1);
  int i0 = static_cast<int>(std::floor(pc));
  if (i0 > n - 2) i0 = n - 2;
  t.i0 = i0;
  t.i1 = i0 + 1;
  t.w1 = pc - static_cast<T>(i0);
  return t;
}

// out(x) = img(x + flow(x)), clamped bilinear sampling. img {H,W} row-major,
// flow planes frow/fcol {H,W}.
template <typename T>
void warp_forward(const T* img, const T* frow, const T* fcol, int H, int W,
                  T* out) {
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * W + c;
      const AxisTap<T> tr = axis_tap<T>(static_cast<T>(r) + frow[i], H);
      const AxisTap<T> tc = axis_tap<T>(static_cast<T>(c) + fcol[i], W);
      const T v00 = img[static_cast<std::size_t>(tr.i0) * W + tc.i0];
      const T v01 = img[static_cast<std::size_t>(tr.i0) * W + tc.i1];
      const T v10 = img[static_cast<std::size_t>(tr.i1) * W + tc.i0];
      const T v11 = img[static_cast<std::size_t>(tr.i1) * W + tc.i1];
      const T top = (T(1) - tc.w1) * v00 + tc.w1 * v01;
      const T bot = (T(1) - tc.w1) * v10 + tc.w1 * v11;
      out[i] = (T(1) - tr.w1) * top + tr.w1 * bot;
    }
  }
}

// Composition of backward-convention fields:
// out(x) = fab(x) + fbc(x + fab(x)), the second term sampled bilinearly.
template <typename T>
void compose_forward(const T* ab_r, const T* ab_c, const T* bc_r,
                     const T* bc_c, int H, int W, T* out_r, T* out_c) {
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * W + c;
      const AxisTap<T> tr = axis_tap<T>(static_cast<T>(r) + ab_r[i], H);
      const AxisTap<T> tc = axis_tap<T>(static_cast<T>(c) + ab_c[i], W);
      const T wr0 = T(1) - tr.w1, wc0 = T(1) - tc.w1;
      auto sample = [&](const T* p) {
        const T v00 = p[static_cast<std::size_t>(tr.i0) * W + tc.i0];
        const T v01 = p[static_cast<std::size_t>(tr.i0) * W + tc.i1];
        const T v10 = p[static_cast<std::size_t>(tr.i1) * W + tc.i0];
        const T v11 = p[static_cast<std::size_t>(tr.i1) * W + tc.i1];
        return wr0 * (wc0 * v00 + tc.w1 * v01) + tr.w1 * (wc0 * v10 + tc.w1 * v11);
      };
      out_r[i] = ab_r[i] + sample(bc_r);
      out_c[i] = ab_c[i] + sample(bc_c);
    }
  }
}

// Sample one plane at a real position with clamped bilinear interpolation.
template <typename T>
T sample_plane(const T* img, int H, int W, T row, T col) {
  const AxisTap<T> tr = axis_tap<T>(row, H);
  const AxisTap<T> tc = axis_tap<T>(col, W);
  const T v00 = img[static_cast<std::size_t>(tr.i0) * W + tc.i0];
  const T v01 = img[static_cast<std::size_t>(tr.i0) * W + tc.i1];
  const T v10 = img[static_cast<std::size_t>(tr.i1) * W + tc.i0];
  const T v11 = img[static_cast<std::size_t>(tr.i1) * W + tc.i1];
  return (T(1) - tr.w1) * ((T(1) - tc.w1) * v00 + tc.w1 * v01) +
         tr.w1 * ((T(1) - tc.w1) * v10 + tc.w1 * v11);
}

}  // namespace kernels

namespace detail {

template <typename T>
using MatRM =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unpack {C,H,W} into a (C*f*f) x (Ho*Wo) patch matrix with zero padding.
template <typename T>
void im2col(const T* in, int C, int H, int W, int f, int stride, int Ho,
            int Wo, T* col) {
  const int pad = (f - 1) / 2;
  const std::size_t N = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int u = 0; u < f; ++u) {
      for (int v = 0; v < f; ++v) {
        T* dst = col + ((static_cast<std::size_t>(c) * f + u) * f + v) * N;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) {
            std::fill(dst + static_cast<std::size_t>(oy) * Wo,
                      dst + static_cast<std::size_t>(oy + 1) * Wo, T(0));
            continue;
          }
          const T* src = in + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + v - pad;
            dst[static_cast<std::size_t>(oy) * Wo + ox] =
                (ix < 0 || ix >= W) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int f, int stride, int Ho,
                int Wo, T* in_grad) {
  const int pad = (f - 1) / 2;
  const std::size_t N = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int u = 0; u < f; ++u) {
      for (int v = 0; v < f; ++v) {
        const T* src = col + ((static_cast<std::size_t>(c) * f + u) * f + v) * N;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = in_grad + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix >= 0 && ix < W)
              dst[ix] += src[static_cast<std::size_t>(oy) * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: zero "same" padding, output H' = ceil(H/stride); taps are centered
// at r*stride. Optional fused ReLU per the layer spec.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> conv2d(const ValuePtr<T>& input, const ValuePtr<T>& weight,
                   const ValuePtr<T>& bias, const ConvSpec& spec) {
  spec.validate();
  if (input->shape.size() != 3)
    throw std::invalid_argument("conv2d: input must be {C,H,W}");
  const int C = input->shape[0], H = input->shape[1], W = input->shape[2];
  const int f = spec.filter_size, s = spec.stride, O = spec.out_channels;
  if (C != spec.in_channels)
    throw std::invalid_argument("conv2d: input channels do not match spec");
  Shape wshape{O, C, f, f};
  if (weight->shape != wshape)
    throw std::invalid_argument("conv2d: weight shape mismatch, expected " +
                                shape_str(wshape) + " got " +
                                shape_str(weight->shape));
  if (bias->shape != Shape{O})
    throw std::invalid_argument("conv2d: bias shape mismatch");

  const int Ho = (H + s - 1) / s, Wo = (W + s - 1) / s;
  const int K = C * f * f;
  const std::size_t N = static_cast<std::size_t>(Ho) * Wo;

  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(K) * N);
  detail::im2col(input->data.data(), C, H, W, f, s, Ho, Wo, col->data());

  auto out = detail::make_op<T>("conv2d", Shape{O, Ho, Wo},
                                {input, weight, bias});
  {
    Eigen::Map<const detail::MatRM<T>> Wm(weight->data.data(), O, K);
    Eigen::Map<const detail::MatRM<T>> Cm(col->data(), K,
                                          static_cast<Eigen::Index>(N));
    Eigen::Map<detail::MatRM<T>> Om(out->data.data(), O,
                                    static_cast<Eigen::Index>(N));
    Om.noalias() = Wm * Cm;
    for (int o = 0; o < O; ++o) Om.row(o).array() += bias->data[o];
    if (spec.has_relu) Om = Om.cwiseMax(T(0));
  }

  const bool relu_on = spec.has_relu;
  out->backward_fn = [col, C, H, W, f, s, Ho, Wo, K, N, O,
                      relu_on](DiffValue<T>& self) {
    auto& input = *self.inputs[0];
    auto& weight = *self.inputs[1];
    auto& bias = *self.inputs[2];

    // Fused-ReLU mask: post-activation > 0 iff pre-activation > 0.
    std::vector<T> dz(self.grad);
    if (relu_on)
      for (std::size_t i = 0; i < dz.size(); ++i)
        if (!(self.data[i] > T(0))) dz[i] = T(0);

    Eigen::Map<const detail::MatRM<T>> dOut(dz.data(), O,
                                            static_cast<Eigen::Index>(N));
    Eigen::Map<const detail::MatRM<T>> Cm(col->data(), K,
                                          static_cast<Eigen::Index>(N));
    if (weight.requires_grad) {
      Eigen::Map<detail::MatRM<T>> dW(weight.grad.data(), O, K);
      dW.noalias() += dOut * Cm.transpose();
    }
    if (bias.requires_grad) {
      // Sequential sum: a SIMD reduction here would make the addition order
      // depend on buffer alignment and break bit-reproducibility.
      for (int o = 0; o < O; ++o) {
        T acc = T(0);
        const T* row = dz.data() + static_cast<std::size_t>(o) * N;
        for (std::size_t i = 0; i < N; ++i) acc += row[i];
        bias.grad[o] += acc;
      }
    }
    if (input.requires_grad) {
      Eigen::Map<const detail::MatRM<T>> Wm(weight.data.data(), O, K);
      std::vector<T> dcol(static_cast<std::size_t>(K) * N);
      Eigen::Map<detail::MatRM<T>> dCm(dcol.data(), K,
                                       static_cast<Eigen::Index>(N));
      dCm.noalias() = Wm.transpose() * dOut;
      detail::col2im_add(dcol.data(), C, H, W, f, s, Ho, Wo,
                         input.grad.data());
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample: {C,H,W} -> {C,2H,2W}; output (r,c) samples the input at
// (r/2, c/2) with clamped bilinear interpolation.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> bilinear_upsample(const ValuePtr<T>& input) {
  if (input->shape.size() != 3)
    throw std::invalid_argument("bilinear_upsample: input must be {C,H,W}");
  const int C = input->shape[0], H = input->shape[1], W = input->shape[2];
  const int Ho = 2 * H, Wo = 2 * W;
  auto out = detail::make_op<T>("bilinear_upsample", Shape{C, Ho, Wo}, {input});

  std::vector<kernels::AxisTap<T>> rt(Ho), ct(Wo);
  for (int r = 0; r < Ho; ++r) rt[r] = kernels::axis_tap<T>(T(r) / T(2), H);
  for (int c = 0; c < Wo; ++c) ct[c] = kernels::axis_tap<T>(T(c) / T(2), W);

  for (int ch = 0; ch < C; ++ch) {
    const T* in = input->data.data() + static_cast<std::size_t>(ch) * H * W;
    T* o = out->data.data() + static_cast<std::size_t>(ch) * Ho * Wo;
    for (int r = 0; r < Ho; ++r) {
      for (int c = 0; c < Wo; ++c) {
        const auto& a = rt[r];
        const auto& b = ct[c];
        const T v00 = in[static_cast<std::size_t>(a.i0) * W + b.i0];
        const T v01 = in[static_cast<std::size_t>(a.i0) * W + b.i1];
        const T v10 = in[static_cast<std::size_t>(a.i1) * W + b.i0];
        const T v11 = in[static_cast<std::size_t>(a.i1) * W + b.i1];
        o[static_cast<std::size_t>(r) * Wo + c] =
            (T(1) - a.w1) * ((T(1) - b.w1) * v00 + b.w1 * v01) +
            a.w1 * ((T(1) - b.w1) * v10 + b.w1 * v11);
      }
    }
  }

  out->backward_fn = [C, H, W, Ho, Wo, rt = std::move(rt),
                      ct = std::move(ct)](DiffValue<T>& self) {
    auto& input = *self.inputs[0];
    if (!input.requires_grad) return;
    for (int ch = 0; ch < C; ++ch) {
      T* gi = input.grad.data() + static_cast<std::size_t>(ch) * H * W;
      const T* go = self.grad.data() + static_cast<std::size_t>(ch) * Ho * Wo;
      for (int r = 0; r < Ho; ++r) {
        for (int c = 0; c < Wo; ++c) {
          const auto& a = rt[r];
          const auto& b = ct[c];
          const T g = go[static_cast<std::size_t>(r) * Wo + c];
          gi[static_cast<std::size_t>(a.i0) * W + b.i0] +=
              (T(1) - a.w1) * (T(1) - b.w1) * g;
          gi[static_cast<std::size_t>(a.i0) * W + b.i1] +=
              (T(1) - a.w1) * b.w1 * g;
          gi[static_cast<std::size_t>(a.i1) * W + b.i0] +=
              a.w1 * (T(1) - b.w1) * g;
          gi[static_cast<std::size_t>(a.i1) * W + b.i1] += a.w1 * b.w1 * g;
        }
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_warp: out(x) = image(x + flow(x)), sample coordinates clamped to
// the image rectangle; differentiable w.r.t. both image and flow.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> bilinear_warp(const ValuePtr<T>& image, const ValuePtr<T>& flow) {
  if (image->shape.size() != 2)
    throw std::invalid_argument("bilinear_warp: image must be {H,W}");
  const int H = image->shape[0], W = image->shape[1];
  if (flow->shape != Shape{2, H, W})
    throw std::invalid_argument("bilinear_warp: flow must be {2," +
                                std::to_string(H) + "," + std::to_string(W) +
                                "}");
  auto out = detail::make_op<T>("bilinear_warp", Shape{H, W}, {image, flow});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  kernels::warp_forward(image->data.data(), flow->data.data(),
                        flow->data.data() + plane, H, W, out->data.data());

  out->backward_fn = [H, W, plane](DiffValue<T>& self) {
    auto& image = *self.inputs[0];
    auto& flow = *self.inputs[1];
    const T* img = image.data.data();
    const T* frow = flow.data.data();
    const T* fcol = flow.data.data() + plane;
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * W + c;
        const T g = self.grad[i];
        if (g == T(0)) continue;
        const auto tr = kernels::axis_tap<T>(static_cast<T>(r) + frow[i], H);
        const auto tc = kernels::axis_tap<T>(static_cast<T>(c) + fcol[i], W);
        const T wr0 = T(1) - tr.w1, wc0 = T(1) - tc.w1;
        const std::size_t i00 = static_cast<std::size_t>(tr.i0) * W + tc.i0;
        const std::size_t i01 = static_cast<std::size_t>(tr.i0) * W + tc.i1;
        const std::size_t i10 = static_cast<std::size_t>(tr.i1) * W + tc.i0;
        const std::size_t i11 = static_cast<std::size_t>(tr.i1) * W + tc.i1;
        if (image.requires_grad) {
          image.grad[i00] += g * wr0 * wc0;
          image.grad[i01] += g * wr0 * tc.w1;
          image.grad[i10] += g * tr.w1 * wc0;
          image.grad[i11] += g * tr.w1 * tc.w1;
        }
        if (flow.requires_grad) {
          if (tr.interior)
            flow.grad[i] += g * (wc0 * (img[i10] - img[i00]) +
                                 tc.w1 * (img[i11] - img[i01]));
          if (tc.interior)
            flow.grad[plane + i] += g * (wr0 * (img[i01] - img[i00]) +
                                         tr.w1 * (img[i11] - img[i10]));
        }
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// flow_compose: out(x) = f_ab(x) + f_bc(x + f_ab(x)); the second term is
// sampled bilinearly with edge clamping. Differentiable w.r.t. both fields.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> flow_compose(const ValuePtr<T>& f_ab, const ValuePtr<T>& f_bc) {
  detail::check_same_shape(f_ab, f_bc, "flow_compose");
  if (f_ab->shape.size() != 3 || f_ab->shape[0] != 2)
    throw std::invalid_argument("flow_compose: flows must be {2,H,W}");
  const int H = f_ab->shape[1], W = f_ab->shape[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto out = detail::make_op<T>("flow_compose", f_ab->shape, {f_ab, f_bc});
  kernels::compose_forward(f_ab->data.data(), f_ab->data.data() + plane,
                           f_bc->data.data(), f_bc->data.data() + plane, H, W,
                           out->data.data(), out->data.data() + plane);

  out->backward_fn = [H, W, plane](DiffValue<T>& self) {
    auto& fab = *self.inputs[0];
    auto& fbc = *self.inputs[1];
    const T* ab_r = fab.data.data();
    const T* ab_c = fab.data.data() + plane;
    const T* bc[2] = {fbc.data.data(), fbc.data.data() + plane};
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * W + c;
        const T g0 = self.grad[i];
        const T g1 = self.grad[plane + i];
        if (g0 == T(0) && g1 == T(0)) continue;
        const auto tr = kernels::axis_tap<T>(static_cast<T>(r) + ab_r[i], H);
        const auto tc = kernels::axis_tap<T>(static_cast<T>(c) + ab_c[i], W);
        const T wr0 = T(1) - tr.w1, wc0 = T(1) - tc.w1;
        const std::size_t i00 = static_cast<std::size_t>(tr.i0) * W + tc.i0;
        const std::size_t i01 = static_cast<std::size_t>(tr.i0) * W + tc.i1;
        const std::size_t i10 = static_cast<std::size_t>(tr.i1) * W + tc.i0;
        const std::size_t i11 = static_cast<std::size_t>(tr.i1) * W + tc.i1;
        const T g[2] = {g0, g1};
        if (fab.requires_grad) {
          // Identity part of out = fab + sample(fbc, x + fab).
          fab.grad[i] += g0;
          fab.grad[plane + i] += g1;
        }
        for (int k = 0; k < 2; ++k) {
          if (g[k] == T(0)) continue;
          const T* p = bc[k];
          if (fbc.requires_grad) {
            fbc.grad[k * plane + i00] += g[k] * wr0 * wc0;
            fbc.grad[k * plane + i01] += g[k] * wr0 * tc.w1;
            fbc.grad[k * plane + i10] += g[k] * tr.w1 * wc0;
            fbc.grad[k * plane + i11] += g[k] * tr.w1 * tc.w1;
          }
          if (fab.requires_grad) {
            if (tr.interior)
              fab.grad[i] += g[k] * (wc0 * (p[i10] - p[i00]) +
                                     tc.w1 * (p[i11] - p[i01]));
            if (tc.interior)
              fab.grad[plane + i] += g[k] * (wr0 * (p[i01] - p[i00]) +
                                             tr.w1 * (p[i11] - p[i10]));
          }
        }
      }
    }
  };
  return out;
}

// Tag-checked composition over FlowVar: (t->s) then (s->u) gives (t->u).
template <typename T>
FlowVar<T> flow_compose(const FlowVar<T>& f_ab, const FlowVar<T>& f_bc) {
  detail::check_flow_chain(f_ab.frame_to, f_bc.frame_from, "flow_compose");
  return FlowVar<T>{flow_compose(f_ab.field, f_bc.field), f_ab.frame_from,
                    f_bc.frame_to};
}

// Evaluation-path composition on plain fields.
template <typename T>
FlowField<T> flow_compose(const FlowField<T>& f_ab, const FlowField<T>& f_bc) {
  detail::check_flow_chain(f_ab.frame_to, f_bc.frame_from, "flow_compose");
  if (f_ab.field.shape != f_bc.field.shape)
    throw std::invalid_argument("flow_compose: shape mismatch");
  const int H = f_ab.rows(), W = f_ab.cols();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> out(f_ab.field.shape);
  kernels::compose_forward(f_ab.field.ptr(), f_ab.field.ptr() + plane,
                           f_bc.field.ptr(), f_bc.field.ptr() + plane, H, W,
                           out.ptr(), out.ptr() + plane);
  return FlowField<T>(std::move(out), f_ab.frame_from, f_bc.frame_to);
}

}  // namespace navinterp
