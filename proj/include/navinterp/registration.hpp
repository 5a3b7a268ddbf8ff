#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "navinterp/adam.hpp"
#include "navinterp/autodiff.hpp"
#include "navinterp/layers.hpp"
#include "navinterp/losses.hpp"
#include "navinterp/models.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

// Reference deformable registration: displacements on a control-point grid,
// bilinearly interpolated to a dense field, optimized for local correlation
// coefficient with anisotropic TV on the control displacements. This
// re-implements the one-line description of the usual gold-standard tool; it
// is labeled "reference registration" in outputs and makes no claim of
// numerical equivalence with any particular package.
struct RegistrationConfig {
  int grid_spacing_px = 4;
  int lcc_window = 9;
  double tv_weight = 0.1;
  int iterations = 200;       // per pyramid level
  double learning_rate = 0.1; // linearly decayed to 0 within a level
  int pyramid_levels = 2;

  void validate() const {
    if (grid_spacing_px < 1)
      throw std::invalid_argument("RegistrationConfig: spacing must be >= 1");
    if (lcc_window < 3 || lcc_window % 2 == 0)
      throw std::invalid_argument("RegistrationConfig: window must be odd >= 3");
    if (iterations < 1)
      throw std::invalid_argument("RegistrationConfig: iterations must be >= 1");
    if (pyramid_levels < 1)
      throw std::invalid_argument("RegistrationConfig: need >= 1 level");
  }
};

// ---------------------------------------------------------------------------
// lcc: mean Pearson correlation over every fully interior window
// (population statistics, stabilizer 1e-6 added to each variance).
// ---------------------------------------------------------------------------
inline constexpr double kLccStabilizer = 1e-6;

template <typename T>
ValuePtr<T> lcc(const ValuePtr<T>& x, const ValuePtr<T>& y, int window) {
  detail::check_same_shape(x, y, "lcc");
  if (x->shape.size() != 2)
    throw std::invalid_argument("lcc: images must be {H,W}");
  const int H = x->shape[0], W = x->shape[1], k = window;
  if (k < 3 || k % 2 == 0)
    throw std::invalid_argument("lcc: window must be odd >= 3");
  if (H < k || W < k)
    throw std::invalid_argument("lcc: image smaller than window");

  const int Hw = H - k + 1, Ww = W - k + 1, Wi = W + 1;
  const double n = static_cast<double>(k) * k;
  const double eps = kLccStabilizer;
  const std::size_t npx = static_cast<std::size_t>(H) * W;

  // Captures by value: backward_fn re-runs this after lcc() has returned.
  auto stats_pass = [=](const std::vector<T>& xv, const std::vector<T>& yv,
                        auto&& per_window) {
    std::vector<double> xd(npx), yd(npx), xx(npx), yy(npx), xy(npx);
    for (std::size_t i = 0; i < npx; ++i) {
      xd[i] = static_cast<double>(xv[i]);
      yd[i] = static_cast<double>(yv[i]);
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
    for (int a = 0; a < Hw; ++a) {
      for (int b = 0; b < Ww; ++b) {
        const int r1 = a + k - 1, c1 = b + k - 1;
        const double Sx = detail::box_sum(ix, Wi, a, b, r1, c1);
        const double Sy = detail::box_sum(iy, Wi, a, b, r1, c1);
        const double Sxx = detail::box_sum(ixx, Wi, a, b, r1, c1);
        const double Syy = detail::box_sum(iyy, Wi, a, b, r1, c1);
        const double Sxy = detail::box_sum(ixy, Wi, a, b, r1, c1);
        const double mux = Sx / n, muy = Sy / n;
        const double Dx = (Sxx / n - mux * mux) + eps;
        const double Dy = (Syy / n - muy * muy) + eps;
        const double cov = Sxy / n - mux * muy;
        const double S = std::sqrt(Dx * Dy);
        per_window(a, b, mux, muy, Dx, Dy, S, cov / S);
      }
    }
    return std::make_pair(std::move(xd), std::move(yd));
  };

  auto out = detail::make_op<T>("lcc", Shape{1}, {x, y});
  {
    double acc = 0.0;
    stats_pass(x->data, y->data,
               [&](int, int, double, double, double, double, double, double r) {
                 acc += r;
               });
    out->data[0] = static_cast<T>(acc / (static_cast<double>(Hw) * Ww));
  }

  out->backward_fn = [H, W, k, n, eps, Hw, Ww, stats_pass](DiffValue<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (!x.requires_grad && !y.requires_grad) return;
    const std::size_t nw = static_cast<std::size_t>(Hw) * Ww;
    std::vector<double> ownx(nw), owny(nw), oth(nw), c0x(nw), c0y(nw);
    auto [xd, yd] = stats_pass(
        x.data, y.data,
        [&](int a, int b, double mux, double muy, double Dx, double Dy,
            double S, double r) {
          const std::size_t w = static_cast<std::size_t>(a) * Ww + b;
          ownx[w] = -r / (n * Dx);
          owny[w] = -r / (n * Dy);
          oth[w] = 1.0 / (n * S);
          c0x[w] = (-muy / S + r * mux / Dx) / n;
          c0y[w] = (-mux / S + r * muy / Dy) / n;
        });
    std::vector<double> s_ownx, s_owny, s_oth, s_c0x, s_c0y;
    detail::scatter_window_coeffs(ownx, H, W, k, s_ownx);
    detail::scatter_window_coeffs(owny, H, W, k, s_owny);
    detail::scatter_window_coeffs(oth, H, W, k, s_oth);
    detail::scatter_window_coeffs(c0x, H, W, k, s_c0x);
    detail::scatter_window_coeffs(c0y, H, W, k, s_c0y);
    const double g =
        static_cast<double>(self.grad[0]) / (static_cast<double>(Hw) * Ww);
    const std::size_t npx = static_cast<std::size_t>(H) * W;
    for (std::size_t i = 0; i < npx; ++i) {
      if (x.requires_grad)
        x.grad[i] += static_cast<T>(
            g * (s_c0x[i] + s_ownx[i] * xd[i] + s_oth[i] * yd[i]));
      if (y.requires_grad)
        y.grad[i] += static_cast<T>(
            g * (s_c0y[i] + s_owny[i] * yd[i] + s_oth[i] * xd[i]));
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Control grid to dense field: dense(r,c) bilinearly samples the control
// plane at (r/spacing, c/spacing); exactly linear in the control values.
// ---------------------------------------------------------------------------
inline int control_extent(int image_extent, int spacing) {
  return (image_extent + spacing - 1) / spacing + 1;
}

template <typename T>
ValuePtr<T> grid_expand(const ValuePtr<T>& control, int H, int W, int spacing) {
  if (control->shape.size() != 3 || control->shape[0] != 2)
    throw std::invalid_argument("grid_expand: control must be {2,GH,GW}");
  const int GH = control->shape[1], GW = control->shape[2];
  if (GH < control_extent(H, spacing) || GW < control_extent(W, spacing))
    throw std::invalid_argument("grid_expand: control grid too small");
  auto out = detail::make_op<T>("grid_expand", Shape{2, H, W}, {control});

  std::vector<kernels::AxisTap<T>> rt(H), ct(W);
  const T inv_s = T(1) / static_cast<T>(spacing);
  for (int r = 0; r < H; ++r)
    rt[r] = kernels::axis_tap<T>(static_cast<T>(r) * inv_s, GH);
  for (int c = 0; c < W; ++c)
    ct[c] = kernels::axis_tap<T>(static_cast<T>(c) * inv_s, GW);

  for (int p = 0; p < 2; ++p) {
    const T* cp = control->data.data() + static_cast<std::size_t>(p) * GH * GW;
    T* op = out->data.data() + static_cast<std::size_t>(p) * H * W;
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const auto& a = rt[r];
        const auto& b = ct[c];
        op[static_cast<std::size_t>(r) * W + c] =
            (T(1) - a.w1) * ((T(1) - b.w1) * cp[static_cast<std::size_t>(a.i0) * GW + b.i0] +
                             b.w1 * cp[static_cast<std::size_t>(a.i0) * GW + b.i1]) +
            a.w1 * ((T(1) - b.w1) * cp[static_cast<std::size_t>(a.i1) * GW + b.i0] +
                    b.w1 * cp[static_cast<std::size_t>(a.i1) * GW + b.i1]);
      }
    }
  }

  out->backward_fn = [H, W, GH, GW, rt = std::move(rt),
                      ct = std::move(ct)](DiffValue<T>& self) {
    auto& control = *self.inputs[0];
    if (!control.requires_grad) return;
    for (int p = 0; p < 2; ++p) {
      T* gc = control.grad.data() + static_cast<std::size_t>(p) * GH * GW;
      const T* go = self.grad.data() + static_cast<std::size_t>(p) * H * W;
      for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
          const auto& a = rt[r];
          const auto& b = ct[c];
          const T g = go[static_cast<std::size_t>(r) * W + c];
          gc[static_cast<std::size_t>(a.i0) * GW + b.i0] +=
              (T(1) - a.w1) * (T(1) - b.w1) * g;
          gc[static_cast<std::size_t>(a.i0) * GW + b.i1] +=
              (T(1) - a.w1) * b.w1 * g;
          gc[static_cast<std::size_t>(a.i1) * GW + b.i0] +=
              a.w1 * (T(1) - b.w1) * g;
          gc[static_cast<std::size_t>(a.i1) * GW + b.i1] += a.w1 * b.w1 * g;
        }
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// register_images: coarse-to-fine control-grid registration. Returns the
// dense backward flow (vectors at `fixed` pixels pointing into `moving`, so
// warp(moving, flow) matches fixed) and the final LCC similarity.
// ---------------------------------------------------------------------------
struct RegistrationResult {
  Tensor<double> flow;  // {2,H,W}
  double similarity = 0.0;
};

namespace detail {

inline Tensor<double> downsample2(const Tensor<double>& img) {
  const int H = img.shape[0], W = img.shape[1];
  Tensor<double> out(Shape{H / 2, W / 2});
  for (int r = 0; r < H / 2; ++r)
    for (int c = 0; c < W / 2; ++c)
      out.at(r, c) = 0.25 * (img.at(2 * r, 2 * c) + img.at(2 * r, 2 * c + 1) +
                             img.at(2 * r + 1, 2 * c) + img.at(2 * r + 1, 2 * c + 1));
  return out;
}

}  // namespace detail

inline RegistrationResult register_images(const Tensor<double>& moving,
                                          const Tensor<double>& fixed,
                                          const RegistrationConfig& cfg,
                                          std::vector<double>* objective_trace = nullptr) {
  cfg.validate();
  if (moving.shape != fixed.shape || moving.shape.size() != 2)
    throw std::invalid_argument("register_images: images must share {H,W}");
  const int H = fixed.shape[0], W = fixed.shape[1];
  if (H < cfg.grid_spacing_px || W < cfg.grid_spacing_px)
    throw std::invalid_argument("register_images: image smaller than grid spacing");

  // Pyramid of averaged images; stop early if a level would get too small
  // for the LCC window or lose divisibility.
  std::vector<Tensor<double>> mov_pyr{moving}, fix_pyr{fixed};
  for (int l = 1; l < cfg.pyramid_levels; ++l) {
    const auto& prev = fix_pyr.back();
    if (prev.shape[0] % 2 != 0 || prev.shape[1] % 2 != 0) break;
    if (prev.shape[0] / 2 < cfg.lcc_window || prev.shape[1] / 2 < cfg.lcc_window)
      break;
    mov_pyr.push_back(detail::downsample2(mov_pyr.back()));
    fix_pyr.push_back(detail::downsample2(fix_pyr.back()));
  }

  ValuePtr<double> control;
  for (int level = static_cast<int>(fix_pyr.size()) - 1; level >= 0; --level) {
    const auto& mov = mov_pyr[level];
    const auto& fix = fix_pyr[level];
    const int Hl = fix.shape[0], Wl = fix.shape[1];
    const int GH = control_extent(Hl, cfg.grid_spacing_px);
    const int GW = control_extent(Wl, cfg.grid_spacing_px);

    if (!control) {
      control = make_leaf<double>(Shape{2, GH, GW},
                                  std::vector<double>(2 * GH * GW, 0.0), true);
    } else {
      // Upsample the coarse control field: fine node (i,j) sits at fine pixel
      // (i*s, j*s) = coarse pixel (i*s/2, j*s/2) = coarse node (i/2, j/2);
      // displacements double with resolution.
      const int GHc = control->shape[1], GWc = control->shape[2];
      std::vector<double> fine(static_cast<std::size_t>(2) * GH * GW);
      for (int p = 0; p < 2; ++p) {
        const double* cp =
            control->data.data() + static_cast<std::size_t>(p) * GHc * GWc;
        for (int i = 0; i < GH; ++i)
          for (int j = 0; j < GW; ++j)
            fine[(static_cast<std::size_t>(p) * GH + i) * GW + j] =
                2.0 * kernels::sample_plane(cp, GHc, GWc, i * 0.5, j * 0.5);
      }
      control = make_leaf<double>(Shape{2, GH, GW}, std::move(fine), true);
    }

    auto mov_const = make_const(mov);
    auto fix_const = make_const(fix);
    AdamState<double> opt =
        AdamState<double>::init({control}, cfg.learning_rate);
    for (int it = 0; it < cfg.iterations; ++it) {
      auto dense = grid_expand(control, Hl, Wl, cfg.grid_spacing_px);
      auto warped = bilinear_warp(mov_const, dense);
      auto sim = lcc(warped, fix_const, cfg.lcc_window);
      auto obj = add(scale(sim, -1.0),
                     scale(tv_loss(control), cfg.tv_weight));
      if (!std::isfinite(obj->scalar()))
        throw NumericalError("register_images: non-finite objective at iteration " +
                             std::to_string(it) + " (level " +
                             std::to_string(level) + ")");
      if (objective_trace) objective_trace->push_back(obj->scalar());
      backward(obj);
      opt.learning_rate =
          cfg.learning_rate * (1.0 - static_cast<double>(it) / cfg.iterations);
      adam_step<double>({control}, opt);
      control->zero_grad();
    }
  }

  auto dense = grid_expand(control, H, W, cfg.grid_spacing_px);
  RegistrationResult out;
  out.flow = Tensor<double>(Shape{2, H, W}, dense->data);
  auto warped = bilinear_warp(make_const(moving), dense);
  out.similarity = lcc(warped, make_const(fixed), cfg.lcc_window)->scalar();
  return out;
}

}  // namespace navinterp
