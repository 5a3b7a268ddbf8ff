#include <gtest/gtest.h>

#include <cmath>

#include "navinterp/phantom.hpp"
#include "navinterp/registration.hpp"
#include "oracles.hpp"

using namespace navinterp;

namespace {

// Strong-contrast test image so patch variances dwarf the LCC stabilizer.
Tensor<double> contrast_image(int H, int W, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> img(Shape{H, W});
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      img.at(r, c) = 0.5 + 0.45 * std::sin(2 * M_PI * r / 13.0 + rng.uniform() * 0.01) *
                               std::cos(2 * M_PI * c / 17.0);
  return img;
}

Tensor<double> phantom_frame(int H, int W, std::uint64_t seed) {
  PhantomConfig cfg;
  cfg.height = H;
  cfg.width = W;
  cfg.frames = 4;
  cfg.amplitude_px = 2.0;
  cfg.noise_std = 0.0;
  cfg.seed = seed;
  auto truth = gen_sequence(cfg);
  return truth.frames[0].cast<double>();
}

// Analytic warp of a double image by a closed-form flow (pull sampling).
template <typename FlowFn>
Tensor<double> warp_by(const Tensor<double>& img, FlowFn&& flow_at) {
  const int H = img.shape[0], W = img.shape[1];
  Tensor<double> out(Shape{H, W});
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      auto [dr, dc] = flow_at(r, c);
      out.at(r, c) = oracles::sample_ref(img, r + dr, c + dc);
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// lcc
// ---------------------------------------------------------------------------

TEST(Lcc, SelfSimilarityNearOne) {
  auto img = contrast_image(24, 24, 3);
  auto v = make_const(img);
  EXPECT_NEAR(lcc(v, v, 9)->scalar(), 1.0, 1e-4);
}

TEST(Lcc, NegatedIsMinusOne) {
  auto img = contrast_image(24, 24, 4);
  Tensor<double> neg(img.shape);
  for (std::size_t i = 0; i < img.size(); ++i) neg.data[i] = -img.data[i];
  EXPECT_NEAR(lcc(make_const(img), make_const(neg), 9)->scalar(), -1.0, 1e-4);
}

TEST(Lcc, AffineInvariance) {
  auto img = contrast_image(20, 28, 5);
  Tensor<double> aff(img.shape);
  for (std::size_t i = 0; i < img.size(); ++i)
    aff.data[i] = 2.5 * img.data[i] + 0.7;
  EXPECT_NEAR(lcc(make_const(img), make_const(aff), 9)->scalar(), 1.0, 1e-4);
}

TEST(Lcc, MatchesBruteForceReference) {
  Rng rng(6);
  auto x = oracles::random_tensor<double>(Shape{20, 20}, rng, 0.0, 1.0);
  auto y = oracles::random_tensor<double>(Shape{20, 20}, rng, 0.0, 1.0);
  EXPECT_NEAR(lcc(make_const(x), make_const(y), 9)->scalar(),
              oracles::lcc_ref(x, y, 9), 1e-12);
}

TEST(Lcc, TooSmallThrows) {
  auto img = make_const<double>(Shape{6, 6}, std::vector<double>(36, 0.0));
  EXPECT_THROW(lcc(img, img, 9), std::invalid_argument);
}

TEST(Lcc, GradCheck) {
  Rng rng(7);
  auto x = oracles::random_tensor<double>(Shape{11, 11}, rng, 0.1, 0.9);
  auto y = oracles::random_tensor<double>(Shape{11, 11}, rng, 0.1, 0.9);
  const double err = grad_check<double>(
      "lcc",
      [](const std::vector<ValuePtr<double>>& in) {
        return lcc(in[0], in[1], 9);
      },
      {x, y}, {true, true});
  EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// grid_expand
// ---------------------------------------------------------------------------

TEST(GridExpand, ExactlyLinearInControls) {
  Rng rng(8);
  const int H = 24, W = 24, s = 4;
  const int GH = control_extent(H, s), GW = control_extent(W, s);
  auto control = oracles::random_tensor<double>(Shape{2, GH, GW}, rng);
  auto dense1 = grid_expand(make_const(control), H, W, s);
  Tensor<double> doubled(control.shape);
  for (std::size_t i = 0; i < control.size(); ++i)
    doubled.data[i] = 2.0 * control.data[i];
  auto dense2 = grid_expand(make_const(doubled), H, W, s);
  for (std::size_t i = 0; i < dense1->size(); ++i)
    EXPECT_NEAR(dense2->data[i], 2.0 * dense1->data[i], 1e-12);
}

TEST(GridExpand, InterpolatesControlValues) {
  const int H = 8, W = 8, s = 4;
  const int GH = control_extent(H, s), GW = control_extent(W, s);
  Tensor<double> control(Shape{2, GH, GW});
  control.at(0, 0, 0) = 4.0;
  control.at(0, 0, 1) = 8.0;
  auto dense = grid_expand(make_const(control), H, W, s);
  EXPECT_NEAR(dense->data[0], 4.0, 1e-12);           // at the node
  EXPECT_NEAR(dense->data[2], 6.0, 1e-12);           // halfway between nodes
  EXPECT_NEAR(dense->data[4], 8.0, 1e-12);           // next node
}

TEST(GridExpand, GradCheck) {
  Rng rng(9);
  const int H = 12, W = 10, s = 4;
  auto control = oracles::random_tensor<double>(
      Shape{2, control_extent(H, s), control_extent(W, s)}, rng);
  const double err = grad_check<double>(
      "grid_expand",
      [H, W, s](const std::vector<ValuePtr<double>>& in) {
        return grid_expand(in[0], H, W, s);
      },
      {control}, {true});
  EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// register_images
// ---------------------------------------------------------------------------

TEST(Register, SelfRegistrationStaysPut) {
  auto img = phantom_frame(48, 48, 11);
  RegistrationConfig cfg;
  auto res = register_images(img, img, cfg);
  double acc = 0.0;
  const std::size_t plane = static_cast<std::size_t>(48) * 48;
  for (std::size_t i = 0; i < plane; ++i)
    acc += std::hypot(res.flow.data[i], res.flow.data[plane + i]);
  EXPECT_LT(acc / plane, 0.05);
  EXPECT_GT(res.similarity, 0.99);
}

TEST(Register, SelfRegistrationKeepsTvTiny) {
  auto img = phantom_frame(48, 48, 12);
  RegistrationConfig cfg;
  auto res = register_images(img, img, cfg);
  // The regularizer keeps the zero solution: recovered-field TV stays tiny.
  double tv = 0.0;
  const int H = 48, W = 48;
  for (int p = 0; p < 2; ++p)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const std::size_t i = (static_cast<std::size_t>(p) * H + r) * W + c;
        if (r + 1 < H) tv += std::abs(res.flow.data[i + W] - res.flow.data[i]);
        if (c + 1 < W) tv += std::abs(res.flow.data[i + 1] - res.flow.data[i]);
      }
  EXPECT_LT(tv / (2.0 * H * W), 0.1);
}

TEST(Register, RecoversRigidShift) {
  auto img = phantom_frame(48, 48, 13);
  auto moved = warp_by(img, [](int, int) { return std::pair{2.0, 0.0}; });
  // warp(img, +2) shifts content up; registering moved->img must find ~(+2,0)
  // at fixed pixels? fixed=img? Here: moving=img, fixed=moved means
  // warp(img, flow) ~ moved, so flow ~ (2,0).
  RegistrationConfig cfg;
  auto res = register_images(img, moved, cfg);
  double mean_dr = 0.0, mean_dc = 0.0;
  int count = 0;
  const int H = 48, W = 48;
  for (int r = 8; r < H - 8; ++r)
    for (int c = 8; c < W - 8; ++c) {
      mean_dr += res.flow.data[static_cast<std::size_t>(r) * W + c];
      mean_dc += res.flow.data[H * W + static_cast<std::size_t>(r) * W + c];
      ++count;
    }
  mean_dr /= count;
  mean_dc /= count;
  EXPECT_NEAR(mean_dr, 2.0, 0.3);
  EXPECT_NEAR(mean_dc, 0.0, 0.3);
}

TEST(Register, ObjectiveTrendsDownward) {
  // Similarity of the final state beats the initial alignment.
  auto fixed = phantom_frame(48, 48, 14);
  auto moving = warp_by(fixed, [](int r, int c) {
    return std::pair{1.5 * std::sin(2 * M_PI * c / 48.0), 0.4};
  });
  RegistrationConfig cfg;
  const double before =
      lcc(make_const(moving), make_const(fixed), cfg.lcc_window)->scalar();
  auto res = register_images(moving, fixed, cfg);
  EXPECT_GT(res.similarity, before + 0.01);
}

TEST(Register, MismatchedShapesThrow) {
  Tensor<double> a(Shape{16, 16}), b(Shape{16, 24});
  RegistrationConfig cfg;
  EXPECT_THROW(register_images(a, b, cfg), std::invalid_argument);
}

TEST(Register, ConfigValidation) {
  RegistrationConfig cfg;
  cfg.lcc_window = 8;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = RegistrationConfig{};
  cfg.grid_spacing_px = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Register, ObjectiveNonIncreasingOverWindows) {
  auto fixed = phantom_frame(48, 48, 15);
  auto moving = warp_by(fixed, [](int r, int c) {
    return std::pair{2.0 * std::sin(2 * M_PI * r / 64.0), 0.5};
  });
  RegistrationConfig cfg;
  cfg.pyramid_levels = 1;
  std::vector<double> trace;
  register_images(moving, fixed, cfg, &trace);
  ASSERT_EQ(trace.size(), static_cast<std::size_t>(cfg.iterations));
  // Mean objective over consecutive 50-iteration windows keeps decreasing.
  auto window_mean = [&](int a) {
    double acc = 0.0;
    for (int i = a; i < a + 50; ++i) acc += trace[i];
    return acc / 50.0;
  };
  for (int a = 0; a + 100 <= cfg.iterations; a += 50)
    EXPECT_LE(window_mean(a + 50), window_mean(a) + 1e-9) << "window " << a;
}
