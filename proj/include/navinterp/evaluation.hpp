#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "navinterp/flow_ops.hpp"
#include "navinterp/losses.hpp"
#include "navinterp/registration.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

struct EvalConfig {
  RegistrationConfig reg;
  double pixel_spacing_mm = 1.33;
  int reference_frame = -1;  // -1: pick automatically (exhale proxy)
  // ref_mot_err_im reading: vector difference (||F1 - F2||, default) or the
  // literal magnitude difference (| ||F1|| - ||F2|| |).
  bool magnitude_difference_mode = false;
  int threads = 1;
  bool registration_metrics = true;  // res_mot / ref_mot_err_* (slow)
  LossWeights ssim_weights = LossWeights::defaults_for(LossWeights::ReconKind::SSIM);
};

// ---------------------------------------------------------------------------
// Per-pair measures
// ---------------------------------------------------------------------------

template <typename T>
double rmse(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape != truth.shape)
    throw std::invalid_argument("rmse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) -
                     static_cast<double>(truth.data[i]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

// SSIM metric; shares the loss implementation so metric and loss agree.
template <typename T>
double ssim_metric(const Tensor<T>& a, const Tensor<T>& b,
                   const LossWeights& w = LossWeights::defaults_for(
                       LossWeights::ReconKind::SSIM)) {
  auto va = make_const(a.template cast<double>());
  auto vb = make_const(b.template cast<double>());
  return ssim(va, vb, w.c1, w.c2, w.ssim_patch)->scalar();
}

// Residual motion: register the prediction to the truth and report the mean
// magnitude of the resulting error field.
inline FlowStats res_mot(const Image& pred, const Image& truth,
                         const RegistrationConfig& reg_cfg,
                         double pixel_spacing_mm = 1.33) {
  auto rr = register_images(pred.cast<double>(), truth.cast<double>(), reg_cfg);
  FlowField<double> f(std::move(rr.flow), 0, 1);
  return flow_magnitude_stats(f, nullptr, pixel_spacing_mm);
}

namespace detail {

inline double flow_difference_mean(const Tensor<double>& f1,
                                   const Tensor<double>& f2, const Mask* mask,
                                   bool magnitude_mode) {
  if (f1.shape != f2.shape)
    throw std::invalid_argument("flow difference: shape mismatch");
  const int H = f1.shape[1], W = f1.shape[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (mask && mask->data[i] == 0) continue;
    const double a_r = f1.data[i], a_c = f1.data[plane + i];
    const double b_r = f2.data[i], b_c = f2.data[plane + i];
    acc += magnitude_mode
               ? std::abs(std::hypot(a_r, a_c) - std::hypot(b_r, b_c))
               : std::hypot(a_r - b_r, a_c - b_c);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("flow difference: empty mask");
  return acc / static_cast<double>(count);
}

}  // namespace detail

// Error in motion to a reference image: compare reference registrations
// against the prediction and against the truth.
inline double ref_mot_err_im(const Image& pred, const Image& truth,
                             const Image& reference, const Mask* mask,
                             const RegistrationConfig& reg_cfg,
                             bool magnitude_mode = false) {
  auto ref_d = reference.cast<double>();
  auto f1 = register_images(ref_d, pred.cast<double>(), reg_cfg).flow;
  auto f2 = register_images(ref_d, truth.cast<double>(), reg_cfg).flow;
  return detail::flow_difference_mean(f1, f2, mask, magnitude_mode);
}

// Registration-halving path: invert the predicted forward flow, compose with
// the reference registration of the next frame, compare to the direct
// reference registration of the target frame.
struct RefMotErrFlResult {
  double value_px = 0.0;
  double inversion_residual = 0.0;
  bool inversion_converged = true;
};

inline RefMotErrFlResult ref_mot_err_fl(const Flow& flow_pred,
                                        const Image& truth_t,
                                        const Image& truth_next,
                                        const Image& reference,
                                        const Mask* mask,
                                        const RegistrationConfig& reg_cfg) {
  const int t = flow_pred.frame_from, t1 = flow_pred.frame_to;
  auto ref_d = reference.cast<double>();
  auto g_ref_t1 = FlowField<double>(
      register_images(truth_next.cast<double>(), ref_d, reg_cfg).flow, -1, t1);
  auto g_ref_t = FlowField<double>(
      register_images(truth_t.cast<double>(), ref_d, reg_cfg).flow, -1, t);

  auto inv = invert_flow(flow_pred);
  FlowField<double> inv_d(inv.flow.field.template cast<double>(), t1, t);
  auto estimate = flow_compose(g_ref_t1, inv_d);

  RefMotErrFlResult out;
  out.value_px =
      detail::flow_difference_mean(estimate.field, g_ref_t.field, mask, false);
  out.inversion_residual = inv.residual;
  out.inversion_converged = inv.converged;
  return out;
}

// Landmark transport error for one frame pair.
struct LandmarkErrResult {
  std::vector<double> per_landmark_px;
  double mean_px = 0.0;
};

inline LandmarkErrResult landmark_err(const Flow& flow_pred,
                                      const std::vector<Landmark>& at_t,
                                      const std::vector<Landmark>& at_next) {
  LandmarkErrResult out;
  for (const Landmark& lm : at_t) {
    const Landmark* match = nullptr;
    for (const Landmark& cand : at_next)
      if (cand.id == lm.id) match = &cand;
    if (!match)
      throw std::invalid_argument("landmark_err: missing id " +
                                  std::to_string(lm.id) + " in target frame");
    auto [dr, dc] = sample_flow_at(flow_pred, lm.row, lm.col);
    const double er = lm.row + dr - match->row;
    const double ec = lm.col + dc - match->col;
    out.per_landmark_px.push_back(std::hypot(er, ec));
  }
  if (out.per_landmark_px.empty())
    throw std::invalid_argument("landmark_err: no landmarks");
  out.mean_px = mean_of(out.per_landmark_px);
  return out;
}

// Exhale-proxy reference frame: the frame closest (mean absolute difference)
// to the per-pixel temporal median of the sequence.
inline int pick_reference_frame(const std::vector<Image>& frames) {
  if (frames.empty())
    throw std::invalid_argument("pick_reference_frame: empty sequence");
  const std::size_t npx = frames[0].size();
  std::vector<float> median(npx);
  std::vector<float> column(frames.size());
  for (std::size_t i = 0; i < npx; ++i) {
    for (std::size_t t = 0; t < frames.size(); ++t)
      column[t] = frames[t].data[i];
    auto mid = column.begin() + column.size() / 2;
    std::nth_element(column.begin(), mid, column.end());
    median[i] = *mid;
  }
  int best = 0;
  double best_score = std::numeric_limits<double>::max();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < npx; ++i)
      acc += std::abs(static_cast<double>(frames[t].data[i]) - median[i]);
    if (acc < best_score) {
      best_score = acc;
      best = static_cast<int>(t);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricValue {
  int frame = 0;
  double px = 0.0;  // carries the value for unit-less metrics as well
  double mm = std::numeric_limits<double>::quiet_NaN();
};

struct MetricAggregate {
  double mean_px = 0.0, pct_px = 0.0;
  double mean_mm = std::numeric_limits<double>::quiet_NaN();
  double pct_mm = std::numeric_limits<double>::quiet_NaN();
  int percentile = 95;  // 5 for ssim, 95 otherwise
};

struct MetricsReport {
  double pixel_spacing_mm = 1.33;
  int reference_frame = 0;
  std::vector<std::string> metric_names;  // emission order
  std::map<std::string, std::string> units;  // metric -> unit label
  std::map<std::string, std::vector<MetricValue>> per_frame;
  std::map<std::string, MetricAggregate> aggregates;
  std::vector<std::string> notes;

  void add(const std::string& metric, const std::string& unit, int frame,
           double px, double mm = std::numeric_limits<double>::quiet_NaN()) {
    if (!per_frame.count(metric)) {
      metric_names.push_back(metric);
      units[metric] = unit;
    }
    per_frame[metric].push_back({frame, px, mm});
  }

  void finalize() {
    for (const auto& name : metric_names) {
      const auto& vals = per_frame[name];
      MetricAggregate agg;
      agg.percentile = name == "ssim" ? 5 : 95;
      std::vector<double> px, mm;
      bool has_mm = true;
      for (const auto& v : vals) {
        px.push_back(v.px);
        if (std::isnan(v.mm))
          has_mm = false;
        else
          mm.push_back(v.mm);
      }
      agg.mean_px = mean_of(px);
      agg.pct_px = nearest_rank_percentile(px, agg.percentile);
      if (has_mm && !mm.empty()) {
        agg.mean_mm = mean_of(mm);
        agg.pct_mm = nearest_rank_percentile(mm, agg.percentile);
      }
      aggregates[name] = agg;
    }
  }
};

// Inputs for report evaluation: predictions aligned to truth frame indices,
// optional predicted flows (tagged with truth indices), landmarks and mask.
struct EvalInputs {
  std::vector<int> target_indices;
  std::vector<Image> predictions;
  std::vector<Flow> flows;  // empty for the direct-intensity baseline
  std::vector<std::vector<Landmark>> landmarks;  // indexed by truth frame; may be empty
  const Mask* roi_mask = nullptr;
};

inline MetricsReport evaluate_interpolation(const EvalInputs& in,
                                            const std::vector<Image>& truth,
                                            const EvalConfig& cfg) {
  if (in.target_indices.size() != in.predictions.size())
    throw std::invalid_argument("evaluate: prediction/index count mismatch");
  for (int t : in.target_indices)
    if (t < 0 || t >= static_cast<int>(truth.size()))
      throw std::invalid_argument("evaluate: target index out of range");

  MetricsReport rep;
  rep.pixel_spacing_mm = cfg.pixel_spacing_mm;
  rep.reference_frame =
      cfg.reference_frame >= 0 ? cfg.reference_frame : pick_reference_frame(truth);
  if (rep.reference_frame >= static_cast<int>(truth.size()))
    throw std::invalid_argument("evaluate: reference frame out of range");
  const Image& reference = truth[rep.reference_frame];
  const double mmpx = cfg.pixel_spacing_mm;

  // Predicted forward flows by source frame.
  std::map<int, const Flow*> fwd_flow;
  for (const auto& f : in.flows)
    if (f.frame_to == f.frame_from + 1) fwd_flow[f.frame_from] = &f;
  if (!in.flows.empty())
    for (int t : in.target_indices)
      if (!fwd_flow.count(t))
        throw std::invalid_argument(
            "evaluate: missing forward flow for target " + std::to_string(t));

  // Unique registration jobs (moving, fixed), deduplicated, then run with a
  // deterministic ordered merge regardless of thread count.
  struct Job {
    const Image* moving;
    const Image* fixed;
  };
  std::vector<std::string> job_keys;
  std::vector<Job> jobs;
  std::map<std::string, std::size_t> job_index;
  auto submit = [&](const std::string& key, const Image* moving,
                    const Image* fixed) {
    if (job_index.count(key)) return;
    job_index[key] = jobs.size();
    job_keys.push_back(key);
    jobs.push_back({moving, fixed});
  };

  if (cfg.registration_metrics) {
    for (std::size_t k = 0; k < in.target_indices.size(); ++k) {
      const int t = in.target_indices[k];
      submit("resmot:" + std::to_string(t), &in.predictions[k], &truth[t]);
      submit("ref_to_pred:" + std::to_string(t), &reference, &in.predictions[k]);
      submit("ref_to_truth:" + std::to_string(t), &reference, &truth[t]);
      if (fwd_flow.count(t) && t + 1 < static_cast<int>(truth.size())) {
        submit("from_ref:" + std::to_string(t), &truth[t], &reference);
        submit("from_ref:" + std::to_string(t + 1), &truth[t + 1], &reference);
      }
    }
  }

  std::vector<Tensor<double>> results(jobs.size());
  {
    std::atomic<std::size_t> next{0};
    const int nthreads = std::max(1, std::min<int>(cfg.threads, jobs.size()));
    auto worker = [&]() {
      for (;;) {
        const std::size_t j = next.fetch_add(1);
        if (j >= jobs.size()) return;
        results[j] = register_images(jobs[j].moving->cast<double>(),
                                     jobs[j].fixed->cast<double>(), cfg.reg)
                         .flow;
      }
    };
    if (nthreads == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }
  }
  auto job_flow = [&](const std::string& key) -> const Tensor<double>& {
    return results[job_index.at(key)];
  };

  const bool have_landmarks = !in.landmarks.empty();
  for (std::size_t k = 0; k < in.target_indices.size(); ++k) {
    const int t = in.target_indices[k];
    const Image& pred = in.predictions[k];
    const Image& tru = truth[t];

    rep.add("rmse", "intensity", t, rmse(pred, tru));
    rep.add("ssim", "unitless", t, ssim_metric(pred, tru, cfg.ssim_weights));

    if (cfg.registration_metrics) {
      FlowField<double> err_field(
          Tensor<double>(job_flow("resmot:" + std::to_string(t))), t, t);
      auto stats = flow_magnitude_stats(err_field, nullptr, mmpx);
      rep.add("res_mot", "px/mm", t, stats.mean_px, stats.mean_mm);

      const auto& f_ref_pred = job_flow("ref_to_pred:" + std::to_string(t));
      const auto& f_ref_truth = job_flow("ref_to_truth:" + std::to_string(t));
      const double im_err = detail::flow_difference_mean(
          f_ref_pred, f_ref_truth, nullptr, cfg.magnitude_difference_mode);
      rep.add("ref_mot_err_im", "px/mm", t, im_err, im_err * mmpx);
      if (in.roi_mask) {
        const double im_err_roi = detail::flow_difference_mean(
            f_ref_pred, f_ref_truth, in.roi_mask, cfg.magnitude_difference_mode);
        rep.add("ref_mot_err_im_roi", "px/mm", t, im_err_roi, im_err_roi * mmpx);
      }

      if (fwd_flow.count(t) && t + 1 < static_cast<int>(truth.size())) {
        const Flow& fp = *fwd_flow.at(t);
        auto inv = invert_flow(fp);
        if (!inv.converged)
          rep.notes.push_back("inversion residual " +
                              std::to_string(inv.residual) + " px at frame " +
                              std::to_string(t));
        FlowField<double> inv_d(inv.flow.field.cast<double>(), t + 1, t);
        FlowField<double> g_ref_t1(
            Tensor<double>(job_flow("from_ref:" + std::to_string(t + 1))), -1,
            t + 1);
        FlowField<double> g_ref_t(
            Tensor<double>(job_flow("from_ref:" + std::to_string(t))), -1, t);
        auto estimate = flow_compose(g_ref_t1, inv_d);
        const double fl_err = detail::flow_difference_mean(
            estimate.field, g_ref_t.field, nullptr, false);
        rep.add("ref_mot_err_fl", "px/mm", t, fl_err, fl_err * mmpx);
        if (in.roi_mask) {
          const double fl_err_roi = detail::flow_difference_mean(
              estimate.field, g_ref_t.field, in.roi_mask, false);
          rep.add("ref_mot_err_fl_roi", "px/mm", t, fl_err_roi,
                  fl_err_roi * mmpx);
        }
      }
    }

    if (have_landmarks && fwd_flow.count(t) &&
        t + 1 < static_cast<int>(in.landmarks.size()) &&
        !in.landmarks[t].empty() && !in.landmarks[t + 1].empty()) {
      auto le = landmark_err(*fwd_flow.at(t), in.landmarks[t],
                             in.landmarks[t + 1]);
      rep.add("landmark_err", "px/mm", t, le.mean_px, le.mean_px * mmpx);
    }
  }

  if (in.flows.empty())
    rep.notes.push_back(
        "flow-based metrics skipped: no predicted flows supplied");
  rep.finalize();
  return rep;
}

}  // namespace navinterp
