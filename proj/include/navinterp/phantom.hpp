#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "navinterp/flow_ops.hpp"
#include "navinterp/models.hpp"
#include "navinterp/rng.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

// Synthetic breathing phantom: a textured background with an organ blob that
// moves along the superior-inferior (row) axis under a sin^2 breathing
// signal with per-cycle jitter and slow drift. The deformation is analytic,
// so inter-frame flows and landmark trajectories are exact up to the stated
// fixed-point tolerance; the generator doubles as the evaluation oracle and
// therefore computes everything in double precision.
struct PhantomConfig {
  int height = 64;
  int width = 64;
  int frames = 512;
  double amplitude_px = 8.0;
  double period_frames = 10.0;
  double drift_px_per_100frames = 1.0;
  double cycle_jitter = 0.1;      // relative std of per-cycle amplitude/period
  double noise_std = 0.02;        // additive Gaussian, on the normalized scale
  double falloff_band_px = 28.0;  // row falloff band of the deformation weight
  bool rigid = false;             // w == 1 everywhere (test variant)
  std::uint64_t seed = 0;

  void validate() const {
    if (height % 8 != 0 || width % 8 != 0 || height < 16 || width < 16)
      throw std::invalid_argument("phantom: height/width must be >=16 and divisible by 8");
    if (frames < 1) throw std::invalid_argument("phantom: frames must be >= 1");
    if (!(amplitude_px < height / 4.0))
      throw std::invalid_argument("phantom: amplitude must be < height/4");
    if (period_frames < 4.0)
      throw std::invalid_argument("phantom: period must be >= 4");
    if (cycle_jitter < 0 || noise_std < 0 || falloff_band_px < 1)
      throw std::invalid_argument("phantom: negative jitter/noise or tiny band");
  }
};

// ---------------------------------------------------------------------------
// Breathing signal: per cycle c, a_t = A_c sin^2(pi (t - S_c)/P_c) + drift
// with A_c, P_c jittered around the configured values (draws clamped to
// 2.5 sigma). sin^2 has zero slope at cycle boundaries, so the signal is C1.
// ---------------------------------------------------------------------------
class BreathingSignal {
 public:
  explicit BreathingSignal(const PhantomConfig& cfg)
      : drift_per_frame_(cfg.drift_px_per_100frames / 100.0) {
    Rng rng(splitmix64(cfg.seed ^ 0x62726561746865ULL));
    double start = 0.0;
    while (start < static_cast<double>(cfg.frames) + cfg.period_frames) {
      const double za = clamp_z(rng.normal());
      const double zp = clamp_z(rng.normal());
      Cycle c;
      c.start = start;
      c.amplitude = cfg.amplitude_px * (1.0 + cfg.cycle_jitter * za);
      if (c.amplitude < 0.0) c.amplitude = 0.0;
      c.period = std::max(4.0, cfg.period_frames * (1.0 + cfg.cycle_jitter * zp));
      cycles_.push_back(c);
      start += c.period;
    }
  }

  double operator()(double t) const {
    if (t < 0.0) throw std::invalid_argument("breathing_signal: t must be >= 0");
    std::size_t lo = 0, hi = cycles_.size();
    while (hi - lo > 1) {
      const std::size_t mid = (lo + hi) / 2;
      if (cycles_[mid].start <= t)
        lo = mid;
      else
        hi = mid;
    }
    const Cycle& c = cycles_[lo];
    const double phase = (t - c.start) / c.period;
    const double s = std::sin(3.14159265358979323846 * phase);
    return c.amplitude * s * s + drift_per_frame_ * t;
  }

  double max_over(double t_end, double step = 0.25) const {
    double m = 0.0;
    for (double t = 0.0; t <= t_end; t += step) m = std::max(m, std::abs((*this)(t)));
    return m;
  }

 private:
  struct Cycle {
    double start, period, amplitude;
  };
  static double clamp_z(double z) { return std::max(-2.5, std::min(2.5, z)); }

  std::vector<Cycle> cycles_;
  double drift_per_frame_;
};

inline double breathing_signal(double t, const PhantomConfig& cfg) {
  return BreathingSignal(cfg)(t);
}

namespace detail {

inline double smoothstep01(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return u * u * (3.0 - 2.0 * u);
}

// Geometry of the template and deformation weight, derived from the config.
struct PhantomGeometry {
  double H, W;
  double r0, c0;          // organ center
  double ar, ac;          // plateau semi-extents of the deformation weight
  double band_r, band_c;  // falloff bands
  double organ_r, organ_c;
  double v1r, v1c, v2r, v2c, sigma_v;
  double band_row_center;
  bool rigid;

  explicit PhantomGeometry(const PhantomConfig& cfg)
      : H(cfg.height),
        W(cfg.width),
        r0(0.56 * H),
        c0(0.50 * W),
        ar(0.22 * H),
        ac(0.25 * W),
        band_r(cfg.falloff_band_px),
        band_c(0.19 * W),
        organ_r(0.25 * H),
        organ_c(0.28 * W),
        v1r(r0 - 0.09 * H),
        v1c(c0 - 0.11 * W),
        v2r(r0 + 0.06 * H),
        v2c(c0 + 0.12 * W),
        sigma_v(0.035 * H),
        band_row_center(r0 - organ_r - 0.10 * H),
        rigid(cfg.rigid) {}

  // Deformation weight: 1 on the organ plateau, smoothstep falloff outside.
  double weight(double r, double c) const {
    if (rigid) return 1.0;
    const double dr = std::max(0.0, std::abs(r - r0) - ar);
    const double dc = std::max(0.0, std::abs(c - c0) - ac);
    const double fr = 1.0 - smoothstep01(dr / band_r);
    const double fc = 1.0 - smoothstep01(dc / band_c);
    return fr * fc;
  }

  // Analytic template, defined for all real coordinates so deformed frames
  // never sample outside valid content.
  double intensity(double r, double c) const {
    const double two_pi = 2.0 * 3.14159265358979323846;
    double v = 0.16 +
               0.06 * std::sin(two_pi * r / (0.25 * H)) *
                   std::cos(two_pi * c / (0.3125 * W)) +
               0.04 * std::cos(two_pi * (r + c) / (0.4 * H));
    const double nr = (r - r0) / organ_r, nc = (c - c0) / organ_c;
    const double rho = std::sqrt(nr * nr + nc * nc);
    const double blob = 1.0 - smoothstep01((rho - 1.0) / 0.35);
    v += 0.5 * blob + 0.06 * blob * (c - c0) / W;
    const double d1r = r - v1r, d1c = c - v1c;
    const double d2r = r - v2r, d2c = c - v2c;
    const double sv2 = 2.0 * sigma_v * sigma_v;
    v -= 0.4 * std::exp(-(d1r * d1r + d1c * d1c) / sv2);
    v -= 0.4 * std::exp(-(d2r * d2r + d2c * d2c) / sv2);
    const double db = r - band_row_center;
    const double sb = 0.05 * H;
    v += 0.18 * std::exp(-(db * db) / (2.0 * sb * sb));
    return v;
  }

  // phi_t(x) = x + a w(x) e_row applied to the row coordinate.
  double deform_row(double r, double c, double a) const {
    return r + a * weight(r, c);
  }

  // Fixed-point inverse of the row map (columns are not displaced).
  double invert_row(double target_r, double c, double a,
                    double tol = 1e-6) const {
    // Contraction rate is |a dw/dr| < 1 by the generation guard; plateau and
    // background pixels converge in a couple of iterations.
    double z = target_r;
    for (int it = 0; it < 1000; ++it) {
      const double next = target_r - a * weight(z, c);
      if (std::abs(next - z) < tol) return next;
      z = next;
    }
    return z;
  }

  double max_row_slope() const {
    if (rigid) return 0.0;
    // Fine-grid scan of |dw/dr|; the analytic bound is 1.5/band_r.
    double m = 0.0;
    const double h = 0.125;
    for (double r = -band_r - ar; r <= H + band_r + ar; r += 0.25) {
      const double w1 = weight(r + h, c0);
      const double w0 = weight(r - h, c0);
      m = std::max(m, std::abs(w1 - w0) / (2.0 * h));
    }
    return m;
  }
};

}  // namespace detail

struct PhantomTruth {
  PhantomConfig cfg;
  std::vector<Image> frames;                     // normalized, with noise
  std::vector<double> amplitudes;                // a_t at integer frames
  Mask roi_mask;                                 // weight > 0.5
  std::vector<std::vector<Landmark>> landmarks;  // [frame][k], K = 2

  // Analytic inter-frame flow F_{t->s}(x) = phi_s^{-1}(phi_t(x)) - x,
  // evaluated on demand in double precision.
  Flow flow(int t, int s) const {
    check_frame(t);
    check_frame(s);
    const detail::PhantomGeometry geo(cfg);
    const int H = cfg.height, W = cfg.width;
    Tensor<float> field(Shape{2, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const double y = geo.deform_row(r, c, amplitudes[t]);
        const double z = geo.invert_row(y, c, amplitudes[s]);
        field.data[static_cast<std::size_t>(r) * W + c] =
            static_cast<float>(z - r);
        field.data[plane + static_cast<std::size_t>(r) * W + c] = 0.0f;
      }
    }
    return Flow(std::move(field), t, s);
  }

  double weight_at(double r, double c) const {
    return detail::PhantomGeometry(cfg).weight(r, c);
  }

 private:
  void check_frame(int t) const {
    if (t < 0 || t >= static_cast<int>(frames.size()))
      throw std::invalid_argument("phantom flow: frame index out of range");
  }
};

inline PhantomTruth gen_sequence(const PhantomConfig& cfg) {
  cfg.validate();
  const detail::PhantomGeometry geo(cfg);
  const BreathingSignal signal(cfg);

  // Invertibility guard: the displacement is purely along rows, so the row
  // Jacobian 1 + a dw/dr must stay positive for every realized amplitude.
  const double max_a = signal.max_over(static_cast<double>(cfg.frames - 1));
  const double max_slope = geo.max_row_slope();
  if (max_a * max_slope >= 1.0)
    throw std::invalid_argument(
        "phantom: amplitude too large for invertible deformation (max|a|*max|dw/dr| = " +
        std::to_string(max_a * max_slope) + " >= 1)");

  const int H = cfg.height, W = cfg.width;
  PhantomTruth out;
  out.cfg = cfg;
  out.amplitudes.resize(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t)
    out.amplitudes[t] = signal(static_cast<double>(t));

  std::vector<Tensor<double>> raw;
  raw.reserve(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t) {
    Tensor<double> f(Shape{H, W});
    const double a = out.amplitudes[t];
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        f.at(r, c) = geo.intensity(geo.deform_row(r, c, a), c);
    if (cfg.noise_std > 0.0) {
      Rng noise(splitmix64(cfg.seed ^ (0x6e6f6973ULL + 0x9e3779b9ULL * t)));
      for (auto& x : f.data) x += cfg.noise_std * noise.normal();
    }
    raw.push_back(std::move(f));
  }
  auto normalized = normalize_block(raw);
  out.frames.reserve(cfg.frames);
  for (const auto& f : normalized.frames) out.frames.push_back(f.cast<float>());

  out.roi_mask = Mask(Shape{H, W});
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      out.roi_mask.at(r, c) = geo.weight(r, c) > 0.5 ? 1 : 0;

  const double qs[2][2] = {{geo.v1r, geo.v1c}, {geo.v2r, geo.v2c}};
  out.landmarks.resize(cfg.frames);
  for (int t = 0; t < cfg.frames; ++t) {
    for (int k = 0; k < 2; ++k) {
      Landmark lm;
      lm.frame = t;
      lm.id = k;
      lm.row = geo.invert_row(qs[k][0], qs[k][1], out.amplitudes[t]);
      lm.col = qs[k][1];
      out.landmarks[t].push_back(lm);
    }
  }
  return out;
}

}  // namespace navinterp
