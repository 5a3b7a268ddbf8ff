// navinterp command line: phantom generation, training, interpolation,
// evaluation and reference registration over the NSEQ/NFLW/NVWT formats.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.

#include <CLI11.hpp>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "navinterp/evaluation.hpp"
#include "navinterp/io.hpp"
#include "navinterp/models.hpp"
#include "navinterp/phantom.hpp"
#include "navinterp/registration.hpp"

namespace fs = std::filesystem;
using namespace navinterp;

namespace {

const std::set<std::string> kPhantomKeys = {
    "phantom.height",        "phantom.width",
    "phantom.frames",        "phantom.amplitude_px",
    "phantom.period_frames", "phantom.drift_px_per_100frames",
    "phantom.cycle_jitter",  "phantom.noise_std",
    "phantom.falloff_band_px", "phantom.rigid",
    "phantom.seed"};

const std::set<std::string> kTrainKeys = {
    "train.model", "train.loss",    "train.steps",   "train.batch_size",
    "train.lr",    "train.lambda1", "train.lambda2", "train.seed",
    "train.checkpoint_every"};

const std::set<std::string> kEvalKeys = {
    "evaluate.reference_frame", "evaluate.pixel_spacing_mm",
    "evaluate.threads",         "evaluate.magnitude_difference",
    "evaluate.reg_iterations",  "evaluate.reg_grid_spacing",
    "evaluate.reg_lcc_window",  "evaluate.reg_tv_weight",
    "evaluate.reg_lr",          "evaluate.reg_pyramid_levels"};

PhantomConfig phantom_from_config(const ConfigMap& cfg) {
  PhantomConfig pc;
  pc.height = static_cast<int>(cfg_long(cfg, "phantom.height", pc.height));
  pc.width = static_cast<int>(cfg_long(cfg, "phantom.width", pc.width));
  pc.frames = static_cast<int>(cfg_long(cfg, "phantom.frames", pc.frames));
  pc.amplitude_px = cfg_double(cfg, "phantom.amplitude_px", pc.amplitude_px);
  pc.period_frames = cfg_double(cfg, "phantom.period_frames", pc.period_frames);
  pc.drift_px_per_100frames =
      cfg_double(cfg, "phantom.drift_px_per_100frames", pc.drift_px_per_100frames);
  pc.cycle_jitter = cfg_double(cfg, "phantom.cycle_jitter", pc.cycle_jitter);
  pc.noise_std = cfg_double(cfg, "phantom.noise_std", pc.noise_std);
  pc.falloff_band_px =
      cfg_double(cfg, "phantom.falloff_band_px", pc.falloff_band_px);
  pc.rigid = cfg_long(cfg, "phantom.rigid", 0) != 0;
  pc.seed = static_cast<std::uint64_t>(cfg_long(cfg, "phantom.seed", 0));
  return pc;
}

RegistrationConfig reg_from_config(const ConfigMap& cfg,
                                   const std::string& prefix) {
  RegistrationConfig rc;
  rc.iterations =
      static_cast<int>(cfg_long(cfg, prefix + "reg_iterations", rc.iterations));
  rc.grid_spacing_px = static_cast<int>(
      cfg_long(cfg, prefix + "reg_grid_spacing", rc.grid_spacing_px));
  rc.lcc_window =
      static_cast<int>(cfg_long(cfg, prefix + "reg_lcc_window", rc.lcc_window));
  rc.tv_weight = cfg_double(cfg, prefix + "reg_tv_weight", rc.tv_weight);
  rc.learning_rate = cfg_double(cfg, prefix + "reg_lr", rc.learning_rate);
  rc.pyramid_levels = static_cast<int>(
      cfg_long(cfg, prefix + "reg_pyramid_levels", rc.pyramid_levels));
  return rc;
}

struct GenOutputs {
  fs::path truth, acquired, flows, landmarks, mask;
};

GenOutputs gen_paths(const fs::path& dir) {
  return {dir / "truth.nseq", dir / "acquired.nseq", dir / "flows.nflw",
          dir / "landmarks.csv", dir / "mask.pgm"};
}

int run_gen_data(const PhantomConfig& pc, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto truth = gen_sequence(pc);
  const auto paths = gen_paths(out_dir);
  write_nseq(paths.truth.string(), truth.frames);

  std::vector<Image> acquired;
  for (int t = 1; t < pc.frames; t += 2) acquired.push_back(truth.frames[t]);
  if (!acquired.empty()) write_nseq(paths.acquired.string(), acquired);

  std::vector<Flow> flows;
  for (int t = 0; t + 1 < pc.frames; ++t) flows.push_back(truth.flow(t, t + 1));
  if (!flows.empty()) write_nflw(paths.flows.string(), flows);

  std::vector<Landmark> flat;
  for (const auto& per_frame : truth.landmarks)
    flat.insert(flat.end(), per_frame.begin(), per_frame.end());
  write_landmarks_csv(paths.landmarks.string(), flat);
  write_mask_pgm(paths.mask.string(), truth.roi_mask);

  std::printf(
      "generated %d frames (%dx%d) -> %s\n  acquired (odd-index) frames: %zu\n"
      "  truth flows: %zu pairs\n  landmarks: %zu rows\n",
      pc.frames, pc.height, pc.width, out_dir.string().c_str(),
      acquired.size(), flows.size(), flat.size());
  return 0;
}

struct TrainArgs {
  std::string model = "mfin";
  std::string loss = "l2";
  long steps = 1000;
  int batch_size = 64;
  double lr = 1e-4;
  double lambda1 = -1.0;  // <0: use the loss-kind default
  double lambda2 = -1.0;
  std::uint64_t seed = 0;
  long checkpoint_every = 0;
};

int run_train(const std::string& data_path, const TrainArgs& a,
              const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto frames = read_nseq(data_path);
  auto normalized = normalize_block(frames);

  const Variant variant = variant_from_name(a.model);
  if (a.loss != "ssim" && a.loss != "l2")
    throw IoError("unknown loss kind: " + a.loss);
  LossWeights lw = LossWeights::defaults_for(
      a.loss == "ssim" ? LossWeights::ReconKind::SSIM
                       : LossWeights::ReconKind::L2);
  if (a.lambda1 >= 0) lw.lambda1 = a.lambda1;
  if (a.lambda2 >= 0) lw.lambda2 = a.lambda2;

  auto dataset = InterpolationDataset<float>::from_sequence(normalized.frames);
  auto params = init_params<float>(variant, a.seed);
  TrainConfig cfg;
  cfg.batch_size = a.batch_size;
  cfg.learning_rate = a.lr;
  cfg.steps = a.steps;
  cfg.loss = lw;
  cfg.seed = a.seed;
  cfg.checkpoint_every = a.checkpoint_every;

  std::printf("training %s (%s loss) for %ld steps: batch=%d lr=%g "
              "lambda1=%g lambda2=%g seed=%" PRIu64 "\n",
              a.model.c_str(), a.loss.c_str(), a.steps, a.batch_size, a.lr,
              lw.lambda1, lw.lambda2, a.seed);

  const fs::path ckpt = out_dir / "model.nvwt";
  const long report_every = std::max<long>(1, a.steps / 10);
  auto on_checkpoint = [&](long step, const ModelParams<float>& p, double loss) {
    if (a.checkpoint_every > 0 && step < a.steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "model_step%06ld.nvwt", step);
      write_checkpoint((out_dir / name).string(), p);
    }
    if (step % report_every == 0 || step == a.steps) {
      std::printf("  step %ld: loss %.6g\n", step, loss);
      std::fflush(stdout);
    }
  };
  TrainConfig cb_cfg = cfg;
  if (cb_cfg.checkpoint_every == 0) cb_cfg.checkpoint_every = report_every;
  auto trace = train(dataset, params, cb_cfg, on_checkpoint);

  write_checkpoint(ckpt.string(), params);
  write_loss_csv((out_dir / "loss.csv").string(), trace);
  std::printf("checkpoint -> %s\n", ckpt.string().c_str());
  return 0;
}

int run_interpolate(const std::string& checkpoint, const std::string& data,
                    const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto params = read_checkpoint(checkpoint);
  auto acquired_raw = read_nseq(data);
  auto normalized = normalize_block(acquired_raw);
  auto res = interpolate_sequence(params, normalized.frames);

  write_nseq((out_dir / "pred.nseq").string(), res.predictions);
  if (!res.flows.empty())
    write_nflw((out_dir / "pred.nflw").string(), res.flows);

  const fs::path previews = out_dir / "previews";
  fs::create_directories(previews);
  for (std::size_t k = 0; k < res.predictions.size(); ++k) {
    char name[64];
    std::snprintf(name, sizeof(name), "pred_%04d.pgm", res.target_indices[k]);
    write_pgm((previews / name).string(), res.predictions[k]);
  }
  for (const auto& f : res.flows) {
    const int H = f.rows(), W = f.cols();
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Image mag(Shape{H, W});
    for (std::size_t i = 0; i < plane; ++i)
      mag.data[i] = std::hypot(f.field.data[i], f.field.data[plane + i]);
    char name[64];
    std::snprintf(name, sizeof(name), "flowmag_%04d_to_%04d.pgm", f.frame_from,
                  f.frame_to);
    write_pgm((previews / name).string(), mag);
  }
  std::printf("interpolated %zu frames (%s variant), %zu flows -> %s\n",
              res.predictions.size(), variant_name(params.variant),
              res.flows.size(), out_dir.string().c_str());
  return 0;
}

struct EvalArgs {
  std::string pred, truth, flows, landmarks, mask, out;
  int reference_frame = -1;
  double pixel_spacing_mm = 1.33;
  int threads = 2;
  bool magnitude_difference = false;
  RegistrationConfig reg;
};

int run_evaluate(const EvalArgs& a) {
  auto pred = read_nseq(a.pred);
  auto truth = read_nseq(a.truth);

  // Doubling-scheme alignment: truth holds the full sequence, the acquired
  // subset sits at odd indices, and predictions cover the interior even
  // indices 2i+2 for i in [1, M-3].
  const int T = static_cast<int>(truth.size());
  const int M = T / 2;
  const int expected = M - 3;
  if (static_cast<int>(pred.size()) != expected)
    throw IoError("evaluate: index misalignment, " + std::to_string(T) +
                  " truth frames imply " + std::to_string(expected) +
                  " interpolated targets but got " + std::to_string(pred.size()));

  EvalInputs in;
  in.predictions = std::move(pred);
  for (int i = 1; i + 2 < M; ++i) in.target_indices.push_back(2 * i + 2);

  if (!a.flows.empty()) {
    in.flows = read_nflw(a.flows);
    for (const auto& f : in.flows)
      if (f.frame_from < 0 || f.frame_from >= T || f.frame_to < 0 ||
          f.frame_to >= T)
        throw IoError("evaluate: flow frame tags out of range");
  }
  if (!a.landmarks.empty())
    in.landmarks = landmarks_by_frame(read_landmarks_csv(a.landmarks), T);
  Mask mask;
  if (!a.mask.empty()) {
    mask = read_mask_pgm(a.mask);
    in.roi_mask = &mask;
  }

  EvalConfig cfg;
  cfg.reg = a.reg;
  cfg.pixel_spacing_mm = a.pixel_spacing_mm;
  cfg.reference_frame = a.reference_frame;
  cfg.magnitude_difference_mode = a.magnitude_difference;
  cfg.threads = a.threads;
  auto rep = evaluate_interpolation(in, truth, cfg);
  write_metrics_csv(a.out, rep);
  std::printf("evaluated %zu targets (reference frame %d) -> %s\n",
              in.target_indices.size(), rep.reference_frame, a.out.c_str());
  for (const auto& name : rep.metric_names) {
    const auto& agg = rep.aggregates.at(name);
    std::printf("  %-18s mean %.4g  p%d %.4g\n", name.c_str(), agg.mean_px,
                agg.percentile, agg.pct_px);
  }
  return 0;
}

int run_register(const std::string& moving_path, int moving_frame,
                 const std::string& fixed_path, int fixed_frame,
                 const std::string& out, const RegistrationConfig& reg) {
  auto moving_seq = read_nseq(moving_path);
  auto fixed_seq = read_nseq(fixed_path);
  if (moving_frame < 0 || moving_frame >= static_cast<int>(moving_seq.size()) ||
      fixed_frame < 0 || fixed_frame >= static_cast<int>(fixed_seq.size()))
    throw IoError("register: frame index out of range");
  const auto& moving = moving_seq[moving_frame];
  const auto& fixed = fixed_seq[fixed_frame];
  if (moving.shape != fixed.shape)
    throw IoError("register: image shapes differ");
  auto res = register_images(moving.cast<double>(), fixed.cast<double>(), reg);
  std::vector<Flow> flows{
      Flow(res.flow.cast<float>(), fixed_frame, moving_frame)};
  write_nflw(out, flows);
  std::printf("registered (reference registration): final lcc %.6f -> %s\n",
              res.similarity, out.c_str());
  return 0;
}

int run_pipeline(const std::string& config_path, const fs::path& out_dir) {
  auto cfg = read_config(config_path);
  std::set<std::string> allowed;
  allowed.insert(kPhantomKeys.begin(), kPhantomKeys.end());
  allowed.insert(kTrainKeys.begin(), kTrainKeys.end());
  allowed.insert(kEvalKeys.begin(), kEvalKeys.end());
  check_known_keys(cfg, allowed);

  const auto pc = phantom_from_config(cfg);
  const fs::path data_dir = out_dir / "data";
  run_gen_data(pc, data_dir);
  const auto paths = gen_paths(data_dir);

  TrainArgs ta;
  ta.model = cfg_string(cfg, "train.model", "mfin");
  ta.loss = cfg_string(cfg, "train.loss", "l2");
  ta.steps = cfg_long(cfg, "train.steps", 1000);
  ta.batch_size = static_cast<int>(cfg_long(cfg, "train.batch_size", 64));
  ta.lr = cfg_double(cfg, "train.lr", 1e-4);
  ta.lambda1 = cfg_double(cfg, "train.lambda1", -1.0);
  ta.lambda2 = cfg_double(cfg, "train.lambda2", -1.0);
  ta.seed = static_cast<std::uint64_t>(cfg_long(cfg, "train.seed", 0));
  ta.checkpoint_every = cfg_long(cfg, "train.checkpoint_every", 0);
  const fs::path model_dir = out_dir / "model";
  run_train(paths.truth.string(), ta, model_dir);

  const fs::path interp_dir = out_dir / "interp";
  run_interpolate((model_dir / "model.nvwt").string(),
                  paths.acquired.string(), interp_dir);

  EvalArgs ea;
  ea.pred = (interp_dir / "pred.nseq").string();
  ea.truth = paths.truth.string();
  if (fs::exists(interp_dir / "pred.nflw"))
    ea.flows = (interp_dir / "pred.nflw").string();
  ea.landmarks = paths.landmarks.string();
  ea.mask = paths.mask.string();
  ea.out = (out_dir / "metrics.csv").string();
  ea.reference_frame =
      static_cast<int>(cfg_long(cfg, "evaluate.reference_frame", -1));
  ea.pixel_spacing_mm = cfg_double(cfg, "evaluate.pixel_spacing_mm", 1.33);
  ea.threads = static_cast<int>(cfg_long(cfg, "evaluate.threads", 2));
  ea.magnitude_difference =
      cfg_long(cfg, "evaluate.magnitude_difference", 0) != 0;
  ea.reg = reg_from_config(cfg, "evaluate.");
  return run_evaluate(ea);
}

void add_reg_flags(CLI::App* cmd, RegistrationConfig& reg) {
  cmd->add_option("--reg-iterations", reg.iterations, "Iterations per level");
  cmd->add_option("--reg-grid-spacing", reg.grid_spacing_px,
                  "Control grid spacing (px)");
  cmd->add_option("--reg-lcc-window", reg.lcc_window, "LCC window (odd)");
  cmd->add_option("--reg-tv-weight", reg.tv_weight, "Control TV weight");
  cmd->add_option("--reg-lr", reg.learning_rate, "Registration learning rate");
  cmd->add_option("--reg-pyramid-levels", reg.pyramid_levels,
                  "Pyramid levels");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motion-field temporal interpolation of 2D image sequences"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a breathing phantom");
  std::string gen_config, gen_out;
  std::int64_t gen_seed = -1;
  gen->add_option("--config", gen_config, "Flat key=value phantom config");
  gen->add_option("--out-dir", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Override phantom.seed");

  auto* tr = app.add_subcommand("train", "Train an interpolation model");
  std::string tr_data, tr_out;
  TrainArgs ta;
  tr->add_option("--data", tr_data, "Full-sequence NSEQ file")->required();
  tr->add_option("--model", ta.model, "scin|mfin|mfinc")
      ->check(CLI::IsMember({"scin", "mfin", "mfinc"}));
  tr->add_option("--loss", ta.loss, "l2|ssim")
      ->check(CLI::IsMember({"l2", "ssim"}));
  tr->add_option("--steps", ta.steps, "Training steps");
  tr->add_option("--batch", ta.batch_size, "Batch size");
  tr->add_option("--lr", ta.lr, "Learning rate");
  tr->add_option("--lambda1", ta.lambda1, "TV weight (default per loss)");
  tr->add_option("--lambda2", ta.lambda2, "Cycle weight (default per loss)");
  tr->add_option("--seed", ta.seed, "Init and batch-sampling seed");
  tr->add_option("--checkpoint-every", ta.checkpoint_every,
                 "Write intermediate checkpoints every N steps");
  tr->add_option("--out", tr_out, "Output directory")->required();

  auto* ip = app.add_subcommand("interpolate",
                                "Double a sequence's temporal resolution");
  std::string ip_ckpt, ip_data, ip_out;
  std::int64_t ip_seed = 0;
  ip->add_option("--checkpoint", ip_ckpt, "NVWT checkpoint")->required();
  ip->add_option("--data", ip_data, "Acquired (odd-index) NSEQ file")
      ->required();
  ip->add_option("--out", ip_out, "Output directory")->required();
  ip->add_option("--seed", ip_seed,
                 "Accepted for interface symmetry (inference is deterministic)");

  auto* ev = app.add_subcommand("evaluate", "Score interpolated frames");
  EvalArgs ea;
  std::int64_t ev_seed = 0;
  ev->add_option("--pred", ea.pred, "Interpolated NSEQ")->required();
  ev->add_option("--truth", ea.truth, "Full ground-truth NSEQ")->required();
  ev->add_option("--flows", ea.flows, "Predicted NFLW (enables flow metrics)");
  ev->add_option("--landmarks", ea.landmarks, "Landmark CSV");
  ev->add_option("--mask", ea.mask, "ROI mask PGM");
  ev->add_option("--reference-frame", ea.reference_frame,
                 "Reference frame index (-1: auto exhale proxy)");
  ev->add_option("--pixel-spacing-mm", ea.pixel_spacing_mm, "mm per pixel");
  ev->add_option("--threads", ea.threads, "Parallel registrations");
  ev->add_flag("--magnitude-difference", ea.magnitude_difference,
               "Use | |F1|-|F2| | instead of |F1-F2| for ref_mot_err_im");
  ev->add_option("--out", ea.out, "Metrics CSV path")->required();
  ev->add_option("--seed", ev_seed,
                 "Accepted for interface symmetry (evaluation is deterministic)");
  add_reg_flags(ev, ea.reg);

  auto* rg = app.add_subcommand("register", "Reference deformable registration");
  std::string rg_moving, rg_fixed, rg_out;
  int rg_moving_frame = 0, rg_fixed_frame = 0;
  std::int64_t rg_seed = 0;
  RegistrationConfig rg_cfg;
  rg->add_option("--moving", rg_moving, "Moving NSEQ")->required();
  rg->add_option("--moving-frame", rg_moving_frame, "Frame in --moving");
  rg->add_option("--fixed", rg_fixed, "Fixed NSEQ")->required();
  rg->add_option("--fixed-frame", rg_fixed_frame, "Frame in --fixed");
  rg->add_option("--out", rg_out, "Output NFLW path")->required();
  rg->add_option("--seed", rg_seed,
                 "Accepted for interface symmetry (registration is deterministic)");
  add_reg_flags(rg, rg_cfg);

  auto* pl = app.add_subcommand(
      "pipeline", "gen-data -> train -> interpolate -> evaluate from one config");
  std::string pl_config, pl_out;
  pl->add_option("--config", pl_config, "Flat key=value config")->required();
  pl->add_option("--out-dir", pl_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage errors
  }

  try {
    if (*gen) {
      ConfigMap cfg;
      if (!gen_config.empty()) cfg = read_config(gen_config);
      check_known_keys(cfg, kPhantomKeys);
      auto pc = phantom_from_config(cfg);
      if (gen_seed >= 0) pc.seed = static_cast<std::uint64_t>(gen_seed);
      return run_gen_data(pc, gen_out);
    }
    if (*tr) return run_train(tr_data, ta, tr_out);
    if (*ip) return run_interpolate(ip_ckpt, ip_data, ip_out);
    if (*ev) return run_evaluate(ea);
    if (*rg)
      return run_register(rg_moving, rg_moving_frame, rg_fixed, rg_fixed_frame,
                          rg_out, rg_cfg);
    if (*pl) return run_pipeline(pl_config, pl_out);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
