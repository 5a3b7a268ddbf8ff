#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "navinterp/flow.hpp"
#include "navinterp/layers.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

struct Landmark {
  int frame = 0;
  int id = 0;
  double row = 0.0;
  double col = 0.0;
};

using Mask = Tensor<std::uint8_t>;  // {H,W}, nonzero = included

// ---------------------------------------------------------------------------
// invert_flow: fixed-point iteration g_{k+1}(x) = -f(x + g_k(x)) from
// g_0 = -f, with clamped bilinear sampling; standard for small smooth
// displacement fields and self-verifiable via the composition residual.
// ---------------------------------------------------------------------------
template <typename T>
struct InversionResult {
  FlowField<T> flow;       // tags swapped relative to the input
  double residual = 0.0;   // max |f(x + g(x)) + g(x)| over pixels
  bool converged = true;
  int iterations = 0;
};

template <typename T>
InversionResult<T> invert_flow(const FlowField<T>& f, int max_iters = 50,
                               double tol_px = 0.01) {
  const int H = f.rows(), W = f.cols();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> fr(plane), fc(plane), gr(plane), gc(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    fr[i] = static_cast<double>(f.field.data[i]);
    fc[i] = static_cast<double>(f.field.data[plane + i]);
    if (!std::isfinite(fr[i]) || !std::isfinite(fc[i]))
      throw std::invalid_argument("invert_flow: non-finite flow");
    gr[i] = -fr[i];
    gc[i] = -fc[i];
  }

  InversionResult<T> out;
  std::vector<double> nr(plane), nc(plane);
  for (int it = 0; it < max_iters; ++it) {
    double max_update = 0.0;
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * W + c;
        const double pr = static_cast<double>(r) + gr[i];
        const double pc = static_cast<double>(c) + gc[i];
        const double sr = kernels::sample_plane(fr.data(), H, W, pr, pc);
        const double sc = kernels::sample_plane(fc.data(), H, W, pr, pc);
        nr[i] = -sr;
        nc[i] = -sc;
        const double d = std::hypot(nr[i] - gr[i], nc[i] - gc[i]);
        if (d > max_update) max_update = d;
      }
    }
    gr.swap(nr);
    gc.swap(nc);
    out.iterations = it + 1;
    if (max_update < tol_px) break;
  }

  double residual = 0.0;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * W + c;
      const double pr = static_cast<double>(r) + gr[i];
      const double pc = static_cast<double>(c) + gc[i];
      const double rr = kernels::sample_plane(fr.data(), H, W, pr, pc) + gr[i];
      const double rc = kernels::sample_plane(fc.data(), H, W, pr, pc) + gc[i];
      residual = std::max(residual, std::hypot(rr, rc));
    }
  }
  out.residual = residual;
  out.converged = out.iterations < max_iters || residual < tol_px;

  Tensor<T> g(Shape{2, H, W});
  for (std::size_t i = 0; i < plane; ++i) {
    g.data[i] = static_cast<T>(gr[i]);
    g.data[plane + i] = static_cast<T>(gc[i]);
  }
  out.flow = FlowField<T>(std::move(g), f.frame_to, f.frame_from);
  return out;
}

// ---------------------------------------------------------------------------
// Magnitude statistics (mean and nearest-rank 95th percentile), in pixels
// and millimetres.
// ---------------------------------------------------------------------------
struct FlowStats {
  double mean_px = 0.0;
  double p95_px = 0.0;
  double mean_mm = 0.0;
  double p95_mm = 0.0;
};

template <typename T>
FlowStats flow_magnitude_stats(const FlowField<T>& f, const Mask* mask = nullptr,
                               double pixel_spacing_mm = 1.33) {
  const int H = f.rows(), W = f.cols();
  if (mask && mask->shape != Shape{H, W})
    throw std::invalid_argument("flow_magnitude_stats: mask shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> mags;
  mags.reserve(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    if (mask && mask->data[i] == 0) continue;
    mags.push_back(std::hypot(static_cast<double>(f.field.data[i]),
                              static_cast<double>(f.field.data[plane + i])));
  }
  if (mags.empty())
    throw std::invalid_argument("flow_magnitude_stats: empty mask");
  FlowStats s;
  s.mean_px = mean_of(mags);
  s.p95_px = nearest_rank_percentile(std::move(mags), 95.0);
  s.mean_mm = s.mean_px * pixel_spacing_mm;
  s.p95_mm = s.p95_px * pixel_spacing_mm;
  return s;
}

// ---------------------------------------------------------------------------
// sample_flow_at: bilinear interpolation of each displacement component.
// ---------------------------------------------------------------------------
template <typename T>
std::pair<double, double> sample_flow_at(const FlowField<T>& f, double row,
                                         double col) {
  const int H = f.rows(), W = f.cols();
  if (row < 0.0 || row > H - 1 || col < 0.0 || col > W - 1)
    throw std::invalid_argument("sample_flow_at: position out of bounds");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> pr(plane), pc(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    pr[i] = static_cast<double>(f.field.data[i]);
    pc[i] = static_cast<double>(f.field.data[plane + i]);
  }
  return {kernels::sample_plane(pr.data(), H, W, row, col),
          kernels::sample_plane(pc.data(), H, W, row, col)};
}

// ---------------------------------------------------------------------------
// endpoint_error: mean Euclidean norm of the per-pixel flow difference.
// ---------------------------------------------------------------------------
template <typename T>
double endpoint_error(const FlowField<T>& f, const FlowField<T>& f_ref,
                      const Mask* mask = nullptr) {
  if (f.field.shape != f_ref.field.shape)
    throw std::invalid_argument("endpoint_error: shape mismatch");
  const int H = f.rows(), W = f.cols();
  if (mask && mask->shape != Shape{H, W})
    throw std::invalid_argument("endpoint_error: mask shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (mask && mask->data[i] == 0) continue;
    const double dr = static_cast<double>(f.field.data[i]) -
                      static_cast<double>(f_ref.field.data[i]);
    const double dc = static_cast<double>(f.field.data[plane + i]) -
                      static_cast<double>(f_ref.field.data[plane + i]);
    acc += std::hypot(dr, dc);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("endpoint_error: empty mask");
  return acc / static_cast<double>(count);
}

}  // namespace navinterp
