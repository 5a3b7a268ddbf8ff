#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "navinterp/autodiff.hpp"
#include "navinterp/flow.hpp"
#include "navinterp/layers.hpp"

namespace navinterp {

// Loss hyperparameters. The lambda defaults follow the mean-reduction
// convention used throughout (means over pixels/patches, so weights are
// resolution-independent); they were tuned at the original acquisition
// resolution and are exposed in config.
struct LossWeights {
  enum class ReconKind { L2, SSIM };

  double lambda1 = 0.001;   // motion-field TV weight
  double lambda2 = 0.0005;  // cycle-consistency weight
  double c1 = 0.0001;       // SSIM stabilizers
  double c2 = 0.0009;
  int ssim_patch = 11;
  ReconKind recon_kind = ReconKind::L2;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0)
      throw std::invalid_argument("LossWeights: lambdas must be >= 0");
    if (c1 <= 0 || c2 <= 0)
      throw std::invalid_argument("LossWeights: c1, c2 must be > 0");
    if (ssim_patch < 3 || ssim_patch % 2 == 0)
      throw std::invalid_argument("LossWeights: ssim_patch must be odd >= 3");
  }

  static LossWeights defaults_for(ReconKind kind) {
    LossWeights w;
    w.recon_kind = kind;
    if (kind == ReconKind::SSIM) {
      w.lambda1 = 0.1;
      w.lambda2 = 0.05;
    }
    return w;
  }
};

namespace detail {

// Integral image with a zero border: I has (H+1)x(W+1) entries and
// I[r+1][c+1] = sum of src[0..r][0..c].
inline void integral_image(const double* src, int H, int W,
                           std::vector<double>& out) {
  const int Wi = W + 1;
  out.assign(static_cast<std::size_t>(H + 1) * Wi, 0.0);
  for (int r = 0; r < H; ++r) {
    double rowsum = 0.0;
    for (int c = 0; c < W; ++c) {
      rowsum += src[static_cast<std::size_t>(r) * W + c];
      out[static_cast<std::size_t>(r + 1) * Wi + (c + 1)] =
          out[static_cast<std::size_t>(r) * Wi + (c + 1)] + rowsum;
    }
  }
}

inline double box_sum(const std::vector<double>& integral, int Wi, int r0,
                      int c0, int r1, int c1) {
  // Inclusive box [r0..r1] x [c0..c1].
  return integral[static_cast<std::size_t>(r1 + 1) * Wi + (c1 + 1)] -
         integral[static_cast<std::size_t>(r0) * Wi + (c1 + 1)] -
         integral[static_cast<std::size_t>(r1 + 1) * Wi + c0] +
         integral[static_cast<std::size_t>(r0) * Wi + c0];
}

// For a per-window coefficient map M ((H-k+1) x (W-k+1), indexed by window
// top-left), computes at every pixel the sum of M over all windows that
// contain the pixel.
inline void scatter_window_coeffs(const std::vector<double>& M, int H, int W,
                                  int k, std::vector<double>& out) {
  const int Hw = H - k + 1, Ww = W - k + 1;
  std::vector<double> integral;
  integral_image(M.data(), Hw, Ww, integral);
  out.assign(static_cast<std::size_t>(H) * W, 0.0);
  for (int r = 0; r < H; ++r) {
    const int a0 = std::max(0, r - k + 1), a1 = std::min(r, Hw - 1);
    if (a0 > a1) continue;
    for (int c = 0; c < W; ++c) {
      const int b0 = std::max(0, c - k + 1), b1 = std::min(c, Ww - 1);
      if (b0 > b1) continue;
      out[static_cast<std::size_t>(r) * W + c] =
          box_sum(integral, Ww + 1, a0, b0, a1, b1);
    }
  }
}

struct SsimWindowStats {
  double mux, muy, A1, A2, B1, B2, value;
};

// Window statistics at top-left (a,b) from the five integral images.
// Population variances; the A/B terms are assembled so that x == y yields a
// bitwise-equal numerator and denominator (ssim(x,x) == 1 exactly).
inline SsimWindowStats ssim_window(const std::vector<double>& ix,
                                   const std::vector<double>& iy,
                                   const std::vector<double>& ixx,
                                   const std::vector<double>& iyy,
                                   const std::vector<double>& ixy, int Wi,
                                   int a, int b, int k, double n, double c1,
                                   double c2) {
  SsimWindowStats s;
  const int r1 = a + k - 1, cc1 = b + k - 1;
  const double Sx = box_sum(ix, Wi, a, b, r1, cc1);
  const double Sy = box_sum(iy, Wi, a, b, r1, cc1);
  const double Sxx = box_sum(ixx, Wi, a, b, r1, cc1);
  const double Syy = box_sum(iyy, Wi, a, b, r1, cc1);
  const double Sxy = box_sum(ixy, Wi, a, b, r1, cc1);
  s.mux = Sx / n;
  s.muy = Sy / n;
  const double varx = Sxx / n - s.mux * s.mux;
  const double vary = Syy / n - s.muy * s.muy;
  const double covxy = Sxy / n - s.mux * s.muy;
  s.A1 = 2.0 * (s.mux * s.muy) + c1;
  s.A2 = 2.0 * covxy + c2;
  s.B1 = (s.mux * s.mux + s.muy * s.muy) + c1;
  s.B2 = (varx + vary) + c2;
  s.value = (s.A1 * s.A2) / (s.B1 * s.B2);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// l2_loss: mean over pixels of the squared intensity difference.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> l2_loss(const ValuePtr<T>& pred, const ValuePtr<T>& target) {
  detail::check_same_shape(pred, target, "l2_loss");
  auto d = sub(pred, target);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// ssim: mean structural similarity over every fully interior patch-sized
// window (stride 1, uniform weights, population variance). Internally double
// precision via integral images; the backward pass scatters per-window
// coefficients with box filters, so both directions run in O(H*W).
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> ssim(const ValuePtr<T>& x, const ValuePtr<T>& y, double c1,
                 double c2, int patch) {
  detail::check_same_shape(x, y, "ssim");
  if (x->shape.size() != 2)
    throw std::invalid_argument("ssim: images must be {H,W}");
  const int H = x->shape[0], W = x->shape[1], k = patch;
  if (k < 3 || k % 2 == 0)
    throw std::invalid_argument("ssim: patch must be odd >= 3");
  if (H < k || W < k)
    throw std::invalid_argument("ssim: image smaller than patch");

  const int Hw = H - k + 1, Ww = W - k + 1, Wi = W + 1;
  const double n = static_cast<double>(k) * k;
  const std::size_t npx = static_cast<std::size_t>(H) * W;

  std::vector<double> xd(npx), yd(npx), xx(npx), yy(npx), xy(npx);
  for (std::size_t i = 0; i < npx; ++i) {
    xd[i] = static_cast<double>(x->data[i]);
    yd[i] = static_cast<double>(y->data[i]);
    xx[i] = xd[i] * xd[i];
    yy[i] = yd[i] * yd[i];
    xy[i] = xd[i] * yd[i];
  }
  std::vector<double> ix, iy, ixx, iyy, ixy;
  detail::integral_image(xd.data(), H, W, ix);
  detail::integral_image(yd.data(), H, W, iy);
  detail::integral_image(xx.data(), H, W, ixx);
  detail::integral_image(yy.data(), H, W, iyy);
  detail::integral_image(xy.data(), H, W, ixy);

  double acc = 0.0;
  for (int a = 0; a < Hw; ++a)
    for (int b = 0; b < Ww; ++b)
      acc += detail::ssim_window(ix, iy, ixx, iyy, ixy, Wi, a, b, k, n, c1, c2)
                 .value;
  const double wn = static_cast<double>(Hw) * Ww;

  auto out = detail::make_op<T>("ssim", Shape{1}, {x, y});
  out->data[0] = static_cast<T>(acc / wn);

  out->backward_fn = [H, W, k, n, c1, c2, Hw, Ww, Wi, wn](DiffValue<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (!x.requires_grad && !y.requires_grad) return;
    const std::size_t npx = static_cast<std::size_t>(H) * W;
    std::vector<double> xd(npx), yd(npx), xx(npx), yy(npx), xy(npx);
    for (std::size_t i = 0; i < npx; ++i) {
      xd[i] = static_cast<double>(x.data[i]);
      yd[i] = static_cast<double>(y.data[i]);
      xx[i] = xd[i] * xd[i];
      yy[i] = yd[i] * yd[i];
      xy[i] = xd[i] * yd[i];
    }
    std::vector<double> ix, iy, ixx, iyy, ixy;
    detail::integral_image(xd.data(), H, W, ix);
    detail::integral_image(yd.data(), H, W, iy);
    detail::integral_image(xx.data(), H, W, ixx);
    detail::integral_image(yy.data(), H, W, iyy);
    detail::integral_image(xy.data(), H, W, ixy);

    // Per-window coefficients of the gradient's affine form:
    //   dS/dx_i ~ sum_w [ c0x_w + own_w * x_i + oth_w * y_i ]
    // and symmetrically for y with c0y/own/oth.
    const std::size_t nw = static_cast<std::size_t>(Hw) * Ww;
    std::vector<double> own(nw), oth(nw), c0x(nw), c0y(nw);
    for (int a = 0; a < Hw; ++a) {
      for (int b = 0; b < Ww; ++b) {
        const auto s = detail::ssim_window(ix, iy, ixx, iyy, ixy, Wi, a, b, k,
                                           n, c1, c2);
        const double inv = 2.0 / (n * s.B1 * s.B2);
        const double r = s.value;
        const std::size_t w = static_cast<std::size_t>(a) * Ww + b;
        own[w] = -inv * r * s.B1;
        oth[w] = inv * s.A1;
        c0x[w] = inv * (s.muy * s.A2 - s.A1 * s.muy - r * s.mux * s.B2 +
                        r * s.mux * s.B1);
        c0y[w] = inv * (s.mux * s.A2 - s.A1 * s.mux - r * s.muy * s.B2 +
                        r * s.muy * s.B1);
      }
    }
    std::vector<double> s_own, s_oth, s_c0x, s_c0y;
    detail::scatter_window_coeffs(own, H, W, k, s_own);
    detail::scatter_window_coeffs(oth, H, W, k, s_oth);
    detail::scatter_window_coeffs(c0x, H, W, k, s_c0x);
    detail::scatter_window_coeffs(c0y, H, W, k, s_c0y);

    const double g = static_cast<double>(self.grad[0]) / wn;
    for (std::size_t i = 0; i < npx; ++i) {
      if (x.requires_grad)
        x.grad[i] += static_cast<T>(
            g * (s_c0x[i] + s_own[i] * xd[i] + s_oth[i] * yd[i]));
      if (y.requires_grad)
        y.grad[i] += static_cast<T>(
            g * (s_c0y[i] + s_own[i] * yd[i] + s_oth[i] * xd[i]));
    }
  };
  return out;
}

template <typename T>
ValuePtr<T> ssim(const ValuePtr<T>& x, const ValuePtr<T>& y,
                 const LossWeights& w) {
  return ssim(x, y, w.c1, w.c2, w.ssim_patch);
}

// ---------------------------------------------------------------------------
// tv_loss: anisotropic L1 total variation of a {C,H,W} field; forward
// differences, the missing last-row/column differences are omitted, and the
// reduction is a mean over all C*H*W sites.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> tv_loss(const ValuePtr<T>& field) {
  if (field->shape.size() != 3)
    throw std::invalid_argument("tv_loss: expected {C,H,W} field");
  const int C = field->shape[0], H = field->shape[1], W = field->shape[2];
  const T norm = T(1) / static_cast<T>(static_cast<std::size_t>(C) * H * W);
  auto out = detail::make_op<T>("tv_loss", Shape{1}, {field});
  double acc = 0.0;
  for (int ch = 0; ch < C; ++ch) {
    const T* p = field->data.data() + static_cast<std::size_t>(ch) * H * W;
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * W + c;
        if (r + 1 < H) acc += std::abs(static_cast<double>(p[i + W] - p[i]));
        if (c + 1 < W) acc += std::abs(static_cast<double>(p[i + 1] - p[i]));
      }
    }
  }
  out->data[0] = static_cast<T>(acc) * norm;

  out->backward_fn = [C, H, W, norm](DiffValue<T>& self) {
    auto& field = *self.inputs[0];
    if (!field.requires_grad) return;
    const T g = self.grad[0] * norm;
    for (int ch = 0; ch < C; ++ch) {
      const std::size_t base = static_cast<std::size_t>(ch) * H * W;
      const T* p = field.data.data() + base;
      T* gr = field.grad.data() + base;
      for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * W + c;
          if (r + 1 < H) {
            const T d = p[i + W] - p[i];
            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            gr[i + W] += g * s;
            gr[i] -= g * s;
          }
          if (c + 1 < W) {
            const T d = p[i + 1] - p[i];
            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            gr[i + 1] += g * s;
            gr[i] -= g * s;
          }
        }
      }
    }
  };
  return out;
}

template <typename T>
ValuePtr<T> tv_loss(const FlowVar<T>& flow) {
  return tv_loss(flow.field);
}

// ---------------------------------------------------------------------------
// cycle_loss: mean over pixels of the squared magnitude of
// compose(f_fw, f_skip) - f_bw. Differentiable through the composition.
// ---------------------------------------------------------------------------
template <typename T>
ValuePtr<T> cycle_loss(const FlowVar<T>& f_fw, const FlowVar<T>& f_skip,
                       const FlowVar<T>& f_bw) {
  FlowVar<T> chained = flow_compose(f_fw, f_skip);
  if (chained.frame_from != f_bw.frame_from ||
      chained.frame_to != f_bw.frame_to)
    throw std::invalid_argument(
        "cycle_loss: composed flow tags do not match the direct flow");
  detail::check_same_shape(chained.field, f_bw.field, "cycle_loss");
  auto d = sub(chained.field, f_bw.field);
  const int H = f_bw.field->shape[1], W = f_bw.field->shape[2];
  return scale(sum(mul(d, d)),
               T(1) / static_cast<T>(static_cast<std::size_t>(H) * W));
}

// ---------------------------------------------------------------------------
// Combined objectives
// ---------------------------------------------------------------------------

// Reconstruction branch: L2, or (1 - SSIM) so minimizing serves both kinds.
template <typename T>
ValuePtr<T> recon_loss(const ValuePtr<T>& pred, const ValuePtr<T>& target,
                       const LossWeights& w) {
  if (w.recon_kind == LossWeights::ReconKind::L2) return l2_loss(pred, target);
  auto one = make_const<T>(Shape{1}, {T(1)});
  return sub(one, ssim(pred, target, w));
}

// Network outputs consumed by the combined losses. The third head (cycle
// variants only) predicts the field between the two known neighbours,
// F_{t+1 -> t-1}; warping the earlier neighbour with it reconstructs the
// later one (pred_between).
template <typename T>
struct InterpOutputs {
  ValuePtr<T> pred_prev;     // reconstruction of N_t from N_{t-1}
  ValuePtr<T> pred_next;     // reconstruction of N_t from N_{t+1}
  FlowVar<T> flow_to_prev;   // F_{t -> t-1}
  FlowVar<T> flow_to_next;   // F_{t -> t+1}
  ValuePtr<T> pred_between;  // reconstruction of N_{t+1} from N_{t-1}
  FlowVar<T> flow_skip;      // F_{t+1 -> t-1}
  bool has_cycle = false;
  ValuePtr<T> pred_direct;   // intensity-head output (direct variant only)
};

template <typename T>
ValuePtr<T> total_loss_mfin(const InterpOutputs<T>& out,
                            const ValuePtr<T>& target,
                            const LossWeights& w) {
  w.validate();
  if (!out.pred_prev || !out.pred_next || !out.flow_to_prev.field ||
      !out.flow_to_next.field)
    throw std::invalid_argument("total_loss_mfin: missing output");
  auto recon =
      add(recon_loss(out.pred_prev, target, w), recon_loss(out.pred_next, target, w));
  auto reg = add(tv_loss(out.flow_to_prev), tv_loss(out.flow_to_next));
  return add(recon, scale(reg, static_cast<T>(w.lambda1)));
}

template <typename T>
ValuePtr<T> total_loss_mfinc(const InterpOutputs<T>& out,
                             const ValuePtr<T>& target,
                             const ValuePtr<T>& target_next,
                             const LossWeights& w) {
  w.validate();
  if (!out.pred_prev || !out.pred_next || !out.flow_to_prev.field ||
      !out.flow_to_next.field || !out.pred_between || !out.flow_skip.field)
    throw std::invalid_argument("total_loss_mfinc: missing output");
  auto recon = add(
      add(recon_loss(out.pred_prev, target, w), recon_loss(out.pred_next, target, w)),
      recon_loss(out.pred_between, target_next, w));
  auto reg = add(add(tv_loss(out.flow_to_prev), tv_loss(out.flow_to_next)),
                 tv_loss(out.flow_skip));
  auto cyc = cycle_loss(out.flow_to_next, out.flow_skip, out.flow_to_prev);
  return add(add(recon, scale(reg, static_cast<T>(w.lambda1))),
             scale(cyc, static_cast<T>(w.lambda2)));
}

// Direct-intensity baseline objective: reconstruction only.
template <typename T>
ValuePtr<T> total_loss_scin(const ValuePtr<T>& pred, const ValuePtr<T>& target,
                            const LossWeights& w) {
  w.validate();
  if (!pred) throw std::invalid_argument("total_loss_scin: missing output");
  return recon_loss(pred, target, w);
}

}  // namespace navinterp
