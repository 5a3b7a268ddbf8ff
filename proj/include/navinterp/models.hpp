#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "navinterp/adam.hpp"
#include "navinterp/autodiff.hpp"
#include "navinterp/layers.hpp"
#include "navinterp/losses.hpp"
#include "navinterp/rng.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// SCIN: direct intensity interpolation (single head, 1-channel output).
// MFIN: two motion-field heads warping the known neighbours.
// MFINC: MFIN plus a third head registering the two known neighbours,
//        enabling the cycle-consistency term.
enum class Variant { SCIN, MFIN, MFINC };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::SCIN: return "scin";
    case Variant::MFIN: return "mfin";
    case Variant::MFINC: return "mfinc";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "scin") return Variant::SCIN;
  if (s == "mfin") return Variant::MFIN;
  if (s == "mfinc") return Variant::MFINC;
  throw std::invalid_argument("unknown model variant: " + s);
}

// Layer plan: 5 shared layers (3 stride-2 encoder convs, then two stride-1
// convs each followed by bilinear upsampling), then per head two convs, an
// upsampling and a final conv without activation. Three upsamplings against
// three stride-2 layers keep output resolution equal to input resolution.
struct ArchitectureSpec {
  std::vector<ConvSpec> conv_specs;  // shared layers first, then each head
  int shared_prefix_len = 5;
  int head_count = 2;

  int head_len() const { return 3; }

  void validate() const {
    if (shared_prefix_len < 1 || head_count < 1 || head_count > 3)
      throw std::invalid_argument("ArchitectureSpec: bad layout");
    const int expect = shared_prefix_len + head_count * head_len();
    if (static_cast<int>(conv_specs.size()) != expect)
      throw std::invalid_argument("ArchitectureSpec: layer count mismatch");
    for (const auto& cs : conv_specs) cs.validate();
    // Channel chaining within the shared prefix and into/within each head.
    for (int i = 1; i < shared_prefix_len; ++i)
      if (conv_specs[i].in_channels != conv_specs[i - 1].out_channels)
        throw std::invalid_argument("ArchitectureSpec: broken channel chain");
    for (int h = 0; h < head_count; ++h) {
      const int base = shared_prefix_len + h * head_len();
      if (conv_specs[base].in_channels !=
          conv_specs[shared_prefix_len - 1].out_channels)
        throw std::invalid_argument("ArchitectureSpec: broken channel chain");
      for (int i = 1; i < head_len(); ++i)
        if (conv_specs[base + i].in_channels !=
            conv_specs[base + i - 1].out_channels)
          throw std::invalid_argument("ArchitectureSpec: broken channel chain");
      if (conv_specs[base + head_len() - 1].has_relu)
        throw std::invalid_argument(
            "ArchitectureSpec: final head layer must have no activation");
    }
  }

  static ArchitectureSpec standard(Variant v) {
    ArchitectureSpec a;
    a.shared_prefix_len = 5;
    a.head_count = v == Variant::SCIN ? 1 : (v == Variant::MFIN ? 2 : 3);
    a.conv_specs = {
        {7, 4, 16, 2, true},   // encoder
        {5, 16, 32, 2, true},
        {3, 32, 64, 2, true},
        {3, 64, 64, 1, true},  // + upsample
        {3, 64, 32, 1, true},  // + upsample
    };
    const int out_ch = v == Variant::SCIN ? 1 : 2;
    for (int h = 0; h < a.head_count; ++h) {
      a.conv_specs.push_back({3, 32, 32, 1, true});
      a.conv_specs.push_back({3, 32, 16, 1, true});  // + upsample
      a.conv_specs.push_back({3, 16, out_ch, 1, false});
    }
    a.validate();
    return a;
  }
};

template <typename T>
struct ModelParams {
  Variant variant = Variant::MFIN;
  ArchitectureSpec arch;
  // Trainable leaves in declaration order: weight then bias per layer.
  std::vector<ValuePtr<T>> weights;
  std::uint64_t rng_seed = 0;

  ValuePtr<T> weight(int layer) const { return weights[2 * layer]; }
  ValuePtr<T> bias(int layer) const { return weights[2 * layer + 1]; }
};

// Uniform +-sqrt(6/fan_in) hidden-layer init, zero biases. Each head's final
// layer is scaled by 1e-3 so initial flows are ~0 and the initial warp is
// close to identity.
template <typename T>
ModelParams<T> init_params(Variant variant, const ArchitectureSpec& arch,
                           std::uint64_t seed) {
  arch.validate();
  ModelParams<T> p;
  p.variant = variant;
  p.arch = arch;
  p.rng_seed = seed;
  Rng rng(splitmix64(seed ^ 0x6e617669ULL));
  for (int li = 0; li < static_cast<int>(arch.conv_specs.size()); ++li) {
    const ConvSpec& cs = arch.conv_specs[li];
    const double fan_in =
        static_cast<double>(cs.in_channels) * cs.filter_size * cs.filter_size;
    double bound = std::sqrt(6.0 / fan_in);
    const bool is_head_final =
        li >= arch.shared_prefix_len &&
        (li - arch.shared_prefix_len) % arch.head_len() == arch.head_len() - 1;
    if (is_head_final) bound *= 1e-3;
    const std::size_t wn = static_cast<std::size_t>(cs.out_channels) *
                           cs.in_channels * cs.filter_size * cs.filter_size;
    std::vector<T> w(wn);
    for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
    p.weights.push_back(make_leaf<T>(
        Shape{cs.out_channels, cs.in_channels, cs.filter_size, cs.filter_size},
        std::move(w), true));
    p.weights.push_back(make_leaf<T>(
        Shape{cs.out_channels}, std::vector<T>(cs.out_channels, T(0)), true));
  }
  return p;
}

template <typename T>
ModelParams<T> init_params(Variant variant, std::uint64_t seed) {
  return init_params<T>(variant, ArchitectureSpec::standard(variant), seed);
}

// Input stack order: N_{t-3}, N_{t-1}, N_{t+1}, N_{t+3} as channels 0..3.
inline constexpr int kInputPrev = 1;  // channel holding N_{t-1}
inline constexpr int kInputNext = 2;  // channel holding N_{t+1}

template <typename T>
InterpOutputs<T> forward(const ModelParams<T>& params,
                         const ValuePtr<T>& input) {
  if (input->shape.size() != 3 || input->shape[0] != 4)
    throw std::invalid_argument("forward: input must be {4,H,W}");
  const int H = input->shape[1], W = input->shape[2];
  if (H % 8 != 0 || W % 8 != 0)
    throw std::invalid_argument("forward: H and W must be divisible by 8");
  const auto& arch = params.arch;

  auto conv_at = [&](const ValuePtr<T>& x, int li) {
    return conv2d(x, params.weight(li), params.bias(li), arch.conv_specs[li]);
  };

  ValuePtr<T> x = input;
  for (int li = 0; li < arch.shared_prefix_len; ++li) {
    x = conv_at(x, li);
    if (li == 3 || li == 4) x = bilinear_upsample(x);
  }

  std::vector<ValuePtr<T>> head_out(arch.head_count);
  for (int h = 0; h < arch.head_count; ++h) {
    const int base = arch.shared_prefix_len + h * arch.head_len();
    ValuePtr<T> y = conv_at(x, base);
    y = conv_at(y, base + 1);
    y = bilinear_upsample(y);
    head_out[h] = conv_at(y, base + 2);
  }

  InterpOutputs<T> out;
  if (params.variant == Variant::SCIN) {
    out.pred_direct = slice_channel(head_out[0], 0);
    return out;
  }
  auto n_prev = slice_channel(input, kInputPrev);
  auto n_next = slice_channel(input, kInputNext);
  out.flow_to_prev = FlowVar<T>{head_out[0], 0, -1};
  out.flow_to_next = FlowVar<T>{head_out[1], 0, +1};
  out.pred_prev = bilinear_warp(n_prev, out.flow_to_prev.field);
  out.pred_next = bilinear_warp(n_next, out.flow_to_next.field);
  if (params.variant == Variant::MFINC) {
    out.flow_skip = FlowVar<T>{head_out[2], +1, -1};
    out.pred_between = bilinear_warp(n_prev, out.flow_skip.field);
    out.has_cycle = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block-wise linear normalization to the 2..98 percentile range (nearest
// rank over all pixels of the block; no clipping).
// ---------------------------------------------------------------------------
template <typename T>
struct NormalizedBlock {
  std::vector<Tensor<T>> frames;
  T p2 = T(0);
  T p98 = T(1);
};

template <typename T>
NormalizedBlock<T> normalize_block(const std::vector<Tensor<T>>& frames) {
  if (frames.empty())
    throw std::invalid_argument("normalize_block: empty block");
  std::vector<T> all;
  std::size_t total = 0;
  for (const auto& f : frames) total += f.size();
  all.reserve(total);
  for (const auto& f : frames)
    all.insert(all.end(), f.data.begin(), f.data.end());
  NormalizedBlock<T> out;
  out.p2 = nearest_rank_percentile(all, 2.0);
  out.p98 = nearest_rank_percentile(std::move(all), 98.0);
  if (!(out.p98 > out.p2))
    throw std::invalid_argument(
        "normalize_block: degenerate block (p2 == p98)");
  const T span = out.p98 - out.p2;
  out.frames.reserve(frames.size());
  for (const auto& f : frames) {
    Tensor<T> g(f.shape);
    for (std::size_t i = 0; i < f.size(); ++i)
      g.data[i] = (f.data[i] - out.p2) / span;
    out.frames.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-4;
  long steps = 1;
  LossWeights loss;
  std::uint64_t seed = 0;
  long checkpoint_every = 0;  // 0 disables the checkpoint callback

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    loss.validate();
  }
};

// Interpolation tuples over a fully sampled sequence: targets are the
// even-index frames with full odd-index context (t-3, t-1, t+1, t+3).
template <typename T>
struct InterpolationDataset {
  std::vector<Tensor<T>> frames;  // normalized sequence, each {H,W}
  std::vector<int> targets;

  static InterpolationDataset from_sequence(std::vector<Tensor<T>> frames,
                                            const std::vector<int>& exclude = {}) {
    InterpolationDataset d;
    d.frames = std::move(frames);
    const int T_n = static_cast<int>(d.frames.size());
    for (int t = 4; t + 3 < T_n; t += 2) {
      bool skip = false;
      for (int e : exclude) skip = skip || (e == t);
      if (!skip) d.targets.push_back(t);
    }
    return d;
  }

  // All eligible targets regardless of exclusion, for holdout selection.
  static std::vector<int> candidate_targets(int frame_count) {
    std::vector<int> out;
    for (int t = 4; t + 3 < frame_count; t += 2) out.push_back(t);
    return out;
  }
};

template <typename T>
ValuePtr<T> make_input_stack(const std::vector<Tensor<T>>& frames, int t) {
  const auto& shape = frames[t].shape;
  const int H = shape[0], W = shape[1];
  std::vector<T> stack;
  stack.reserve(static_cast<std::size_t>(4) * H * W);
  for (int off : {-3, -1, +1, +3}) {
    const auto& f = frames[t + off];
    stack.insert(stack.end(), f.data.begin(), f.data.end());
  }
  return make_const<T>(Shape{4, H, W}, std::move(stack));
}

// Runs Adam on the variant's total loss. Deterministic for a fixed seed and
// config; returns the per-step loss trace. The optional callback fires every
// checkpoint_every steps and after the final step.
template <typename T>
using TrainCallback = std::function<void(long, const ModelParams<T>&, double)>;

template <typename T>
std::vector<double> train(
    const InterpolationDataset<T>& dataset, ModelParams<T>& params,
    const TrainConfig& config,
    const std::type_identity_t<TrainCallback<T>>& on_checkpoint = nullptr) {
  config.validate();
  if (dataset.targets.empty())
    throw std::invalid_argument("train: empty dataset");
  Rng rng(splitmix64(config.seed ^ 0x747261696eULL));
  AdamState<T> opt = AdamState<T>::init(params.weights, config.learning_rate);
  std::vector<double> trace;
  trace.reserve(config.steps);
  const T inv_batch = T(1) / static_cast<T>(config.batch_size);

  for (long step = 0; step < config.steps; ++step) {
    double loss_acc = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const int t = dataset.targets[rng.below(dataset.targets.size())];
      auto input = make_input_stack(dataset.frames, t);
      auto target = make_const(dataset.frames[t]);
      ValuePtr<T> loss;
      if (params.variant == Variant::SCIN) {
        auto out = forward(params, input);
        loss = total_loss_scin(out.pred_direct, target, config.loss);
      } else if (params.variant == Variant::MFIN) {
        auto out = forward(params, input);
        loss = total_loss_mfin(out, target, config.loss);
      } else {
        auto out = forward(params, input);
        auto target_next = make_const(dataset.frames[t + 1]);
        loss = total_loss_mfinc(out, target, target_next, config.loss);
      }
      loss_acc += static_cast<double>(loss->scalar());
      backward(scale(loss, inv_batch));
    }
    const double step_loss = loss_acc / config.batch_size;
    if (!std::isfinite(step_loss))
      throw NumericalError("train: non-finite loss at step " +
                           std::to_string(step));
    adam_step(params.weights, opt);
    zero_grads(params.weights);
    trace.push_back(step_loss);
    if (on_checkpoint &&
        ((config.checkpoint_every > 0 &&
          (step + 1) % config.checkpoint_every == 0) ||
         step + 1 == config.steps))
      on_checkpoint(step + 1, params, step_loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Sequence interpolation (doubling scheme)
// ---------------------------------------------------------------------------

// The acquired list A_0..A_{M-1} is taken to be the odd-index frames of a
// doubled sequence (A_i sits at original index 2i+1). Interpolable targets
// are the interior even indices 2i+2 for i in [1, M-3]; boundary targets
// without full context are skipped rather than padded.
template <typename T>
struct InterpolationResult {
  std::vector<int> target_indices;       // original (doubled) frame indices
  std::vector<Tensor<T>> predictions;    // canonical per-target prediction
  std::vector<FlowField<T>> flows;       // all flows, tagged with original indices
};

template <typename T>
InterpolationResult<T> interpolate_sequence(
    const ModelParams<T>& params, const std::vector<Tensor<T>>& acquired) {
  const int M = static_cast<int>(acquired.size());
  if (M < 4)
    throw std::invalid_argument(
        "interpolate_sequence: need at least 4 acquired frames");
  InterpolationResult<T> out;
  for (int i = 1; i + 2 < M; ++i) {
    const int t = 2 * i + 2;  // original index of the interpolated frame
    const auto& shape = acquired[i].shape;
    const int H = shape[0], W = shape[1];
    std::vector<T> stack;
    stack.reserve(static_cast<std::size_t>(4) * H * W);
    for (int j : {i - 1, i, i + 1, i + 2})
      stack.insert(stack.end(), acquired[j].data.begin(),
                   acquired[j].data.end());
    auto input = make_const<T>(Shape{4, H, W}, std::move(stack));
    auto o = forward(params, input);
    out.target_indices.push_back(t);
    if (params.variant == Variant::SCIN) {
      out.predictions.push_back(
          Tensor<T>(o.pred_direct->shape, o.pred_direct->data));
      continue;
    }
    // Canonical output: the forward-neighbour prediction N'_{t,t+1}.
    out.predictions.push_back(Tensor<T>(o.pred_next->shape, o.pred_next->data));
    out.flows.emplace_back(
        Tensor<T>(o.flow_to_prev.field->shape, o.flow_to_prev.field->data), t,
        t - 1);
    out.flows.emplace_back(
        Tensor<T>(o.flow_to_next.field->shape, o.flow_to_next.field->data), t,
        t + 1);
    if (params.variant == Variant::MFINC)
      out.flows.emplace_back(
          Tensor<T>(o.flow_skip.field->shape, o.flow_skip.field->data), t + 1,
          t - 1);
  }
  return out;
}

}  // namespace navinterp
