#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "navinterp/io.hpp"
#include "navinterp/phantom.hpp"
#include "oracles.hpp"

using namespace navinterp;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("navi_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(is),
                           std::istreambuf_iterator<char>());
}

std::string cli_path() {
  const char* env = std::getenv("NAVI_CLI");
  return env ? env : NAVI_CLI_PATH;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = cli_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  std::string out;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) out += buf;
  if (output) *output = out;
  const int status = pclose(pipe);
  return WEXITSTATUS(status);
}

}  // namespace

// ---------------------------------------------------------------------------
// Formats: write -> read -> write round trips are bit-identical.
// ---------------------------------------------------------------------------

TEST(Formats, NseqRoundTrip) {
  auto dir = temp_dir("nseq");
  Rng rng(3);
  std::vector<Image> frames;
  for (int t = 0; t < 5; ++t)
    frames.push_back(oracles::random_tensor<float>(Shape{12, 10}, rng));
  const auto p1 = dir / "a.nseq";
  const auto p2 = dir / "b.nseq";
  write_nseq(p1.string(), frames);
  auto again = read_nseq(p1.string());
  ASSERT_EQ(again.size(), frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t)
    EXPECT_EQ(again[t].data, frames[t].data);
  write_nseq(p2.string(), again);
  EXPECT_EQ(slurp(p1), slurp(p2));
  // Byte length: 20-byte header + 4 bytes per value.
  EXPECT_EQ(fs::file_size(p1), 20u + 4u * 5 * 12 * 10);
}

TEST(Formats, NflwRoundTrip) {
  auto dir = temp_dir("nflw");
  Rng rng(4);
  std::vector<Flow> flows;
  flows.emplace_back(oracles::random_tensor<float>(Shape{2, 8, 6}, rng), 4, 5);
  flows.emplace_back(oracles::random_tensor<float>(Shape{2, 8, 6}, rng), 4, 3);
  const auto p1 = dir / "a.nflw";
  write_nflw(p1.string(), flows);
  auto again = read_nflw(p1.string());
  ASSERT_EQ(again.size(), 2u);
  EXPECT_EQ(again[0].frame_from, 4);
  EXPECT_EQ(again[0].frame_to, 5);
  EXPECT_EQ(again[1].frame_to, 3);
  for (int k = 0; k < 2; ++k) EXPECT_EQ(again[k].field.data, flows[k].field.data);
  const auto p2 = dir / "b.nflw";
  write_nflw(p2.string(), again);
  EXPECT_EQ(slurp(p1), slurp(p2));
  EXPECT_EQ(fs::file_size(p1), 20u + 2u * (8 + 4 * 2 * 8 * 6));
}

TEST(Formats, CheckpointRoundTrip) {
  auto dir = temp_dir("nvwt");
  auto params = init_params<float>(Variant::MFINC, 77);
  const auto p1 = dir / "a.nvwt";
  write_checkpoint(p1.string(), params);
  auto again = read_checkpoint(p1.string());
  EXPECT_EQ(again.variant, Variant::MFINC);
  ASSERT_EQ(again.weights.size(), params.weights.size());
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    EXPECT_EQ(again.weights[i]->shape, params.weights[i]->shape);
    EXPECT_EQ(again.weights[i]->data, params.weights[i]->data);
  }
  const auto p2 = dir / "b.nvwt";
  write_checkpoint(p2.string(), again);
  EXPECT_EQ(slurp(p1), slurp(p2));
}

TEST(Formats, BadMagicRejected) {
  auto dir = temp_dir("magic");
  const auto p = dir / "junk.nseq";
  std::ofstream(p) << "JUNKJUNKJUNKJUNKJUNKJUNK";
  EXPECT_THROW(read_nseq(p.string()), IoError);
  EXPECT_THROW(read_nflw(p.string()), IoError);
  EXPECT_THROW(read_checkpoint(p.string()), IoError);
}

TEST(Formats, LandmarkCsvRoundTripSorted) {
  auto dir = temp_dir("lmk");
  std::vector<Landmark> lms{
      {3, 1, 10.5, 20.25}, {1, 0, 5.0, 6.0}, {1, 1, 7.125, 8.0}, {3, 0, 9.0, 1.0}};
  const auto p = dir / "lm.csv";
  write_landmarks_csv(p.string(), lms);
  auto again = read_landmarks_csv(p.string());
  ASSERT_EQ(again.size(), 4u);
  EXPECT_EQ(again[0].frame, 1);
  EXPECT_EQ(again[0].id, 0);
  EXPECT_EQ(again[3].frame, 3);
  EXPECT_EQ(again[3].id, 1);
  EXPECT_DOUBLE_EQ(again[3].row, 10.5);
  EXPECT_DOUBLE_EQ(again[3].col, 20.25);
}

TEST(Formats, MaskPgmRoundTrip) {
  auto dir = temp_dir("mask");
  Mask m(Shape{6, 9});
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 9; ++c) m.at(r, c) = (r * c) % 3 == 0 ? 1 : 0;
  const auto p = dir / "m.pgm";
  write_mask_pgm(p.string(), m);
  auto again = read_mask_pgm(p.string());
  EXPECT_EQ(again.data, m.data);
}

TEST(Config, ParseAndUnknownKeys) {
  auto cfg = parse_config_text(
      "# comment\nphantom.frames = 32\nphantom.noise_std=0.05 # inline\n\n");
  EXPECT_EQ(cfg_long(cfg, "phantom.frames", 0), 32);
  EXPECT_DOUBLE_EQ(cfg_double(cfg, "phantom.noise_std", 0.0), 0.05);
  EXPECT_EQ(cfg_long(cfg, "phantom.height", 64), 64);
  EXPECT_THROW(check_known_keys(cfg, {"phantom.frames"}), IoError);
  EXPECT_THROW(parse_config_text("not a pair\n"), IoError);
  EXPECT_THROW(cfg_long(cfg, "phantom.noise_std", 0), IoError);
}

// ---------------------------------------------------------------------------
// CLI behaviors (spawns the installed binary).
// ---------------------------------------------------------------------------

TEST(Cli, GenDataWritesExpectedFiles) {
  auto dir = temp_dir("cli_gen");
  auto cfg_path = dir / "p.cfg";
  std::ofstream(cfg_path) << "phantom.frames = 16\nphantom.noise_std = 0\n";
  std::string out;
  const int rc = run_cli("gen-data --config " + cfg_path.string() +
                             " --out-dir " + (dir / "out").string() + " --seed 9",
                         &out);
  EXPECT_EQ(rc, 0) << out;
  // 16 frames of 64x64: 20 + 4*16*64*64 bytes.
  EXPECT_EQ(fs::file_size(dir / "out" / "truth.nseq"), 20u + 4u * 16 * 64 * 64);
  EXPECT_TRUE(fs::exists(dir / "out" / "acquired.nseq"));
  EXPECT_TRUE(fs::exists(dir / "out" / "flows.nflw"));
  EXPECT_TRUE(fs::exists(dir / "out" / "landmarks.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "mask.pgm"));

  // Same seed twice: byte-identical.
  const int rc2 = run_cli("gen-data --config " + cfg_path.string() +
                              " --out-dir " + (dir / "out2").string() + " --seed 9",
                          &out);
  EXPECT_EQ(rc2, 0);
  EXPECT_EQ(slurp(dir / "out" / "truth.nseq"), slurp(dir / "out2" / "truth.nseq"));
  EXPECT_EQ(slurp(dir / "out" / "flows.nflw"), slurp(dir / "out2" / "flows.nflw"));
}

TEST(Cli, UnknownConfigKeyFails) {
  auto dir = temp_dir("cli_badkey");
  auto cfg_path = dir / "p.cfg";
  std::ofstream(cfg_path) << "phantom.frames = 16\nphantom.typo = 1\n";
  std::string out;
  const int rc = run_cli("gen-data --config " + cfg_path.string() +
                             " --out-dir " + (dir / "out").string(),
                         &out);
  EXPECT_EQ(rc, 1);
  EXPECT_NE(out.find("unknown key"), std::string::npos) << out;
}

TEST(Cli, TrainInterpolateEvaluateFlow) {
  auto dir = temp_dir("cli_flow");
  auto cfg_path = dir / "p.cfg";
  std::ofstream(cfg_path)
      << "phantom.frames = 20\nphantom.noise_std = 0.01\nphantom.seed = 4\n";
  std::string out;
  ASSERT_EQ(run_cli("gen-data --config " + cfg_path.string() + " --out-dir " +
                        (dir / "d").string(),
                    &out),
            0)
      << out;

  // Effective lambda defaults per loss kind are reported.
  ASSERT_EQ(run_cli("train --data " + (dir / "d/truth.nseq").string() +
                        " --model mfinc --loss ssim --steps 1 --batch 2"
                        " --seed 3 --out " + (dir / "m").string(),
                    &out),
            0)
      << out;
  EXPECT_NE(out.find("lambda1=0.1"), std::string::npos) << out;
  EXPECT_NE(out.find("lambda2=0.05"), std::string::npos) << out;
  EXPECT_TRUE(fs::exists(dir / "m" / "model.nvwt"));
  {
    std::ifstream is(dir / "m" / "loss.csv");
    std::string header, row, extra;
    std::getline(is, header);
    std::getline(is, row);
    EXPECT_EQ(header, "step,loss");
    EXPECT_FALSE(row.empty());
    EXPECT_FALSE(std::getline(is, extra));  // exactly one step row
  }

  ASSERT_EQ(run_cli("train --data " + (dir / "d/truth.nseq").string() +
                        " --model mfin --loss l2 --steps 1 --batch 2 --out " +
                        (dir / "m2").string(),
                    &out),
            0);
  EXPECT_NE(out.find("lambda1=0.001"), std::string::npos) << out;

  ASSERT_EQ(run_cli("interpolate --checkpoint " +
                        (dir / "m" / "model.nvwt").string() + " --data " +
                        (dir / "d/acquired.nseq").string() + " --out " +
                        (dir / "i").string(),
                    &out),
            0)
      << out;
  // 10 acquired frames -> 7 predictions, 3 flows each for the cycle variant.
  auto pred = read_nseq((dir / "i" / "pred.nseq").string());
  EXPECT_EQ(pred.size(), 7u);
  auto flows = read_nflw((dir / "i" / "pred.nflw").string());
  EXPECT_EQ(flows.size(), 21u);
  EXPECT_TRUE(fs::exists(dir / "i" / "previews" / "pred_0004.pgm"));

  ASSERT_EQ(run_cli("evaluate --pred " + (dir / "i/pred.nseq").string() +
                        " --truth " + (dir / "d/truth.nseq").string() +
                        " --flows " + (dir / "i/pred.nflw").string() +
                        " --landmarks " + (dir / "d/landmarks.csv").string() +
                        " --mask " + (dir / "d/mask.pgm").string() +
                        " --reference-frame 0 --reg-iterations 40"
                        " --threads 2 --out " + (dir / "metrics.csv").string(),
                    &out),
            0)
      << out;
  EXPECT_NE(out.find("landmark_err"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
}

TEST(Cli, ScinProducesNoFlows) {
  auto dir = temp_dir("cli_scin");
  auto cfg_path = dir / "p.cfg";
  std::ofstream(cfg_path) << "phantom.frames = 16\nphantom.seed = 6\n";
  std::string out;
  ASSERT_EQ(run_cli("gen-data --config " + cfg_path.string() + " --out-dir " +
                        (dir / "d").string(),
                    &out),
            0);
  ASSERT_EQ(run_cli("train --data " + (dir / "d/truth.nseq").string() +
                        " --model scin --loss l2 --steps 1 --batch 2 --out " +
                        (dir / "m").string(),
                    &out),
            0);
  ASSERT_EQ(run_cli("interpolate --checkpoint " +
                        (dir / "m/model.nvwt").string() + " --data " +
                        (dir / "d/acquired.nseq").string() + " --out " +
                        (dir / "i").string(),
                    &out),
            0);
  EXPECT_TRUE(fs::exists(dir / "i" / "pred.nseq"));
  EXPECT_FALSE(fs::exists(dir / "i" / "pred.nflw"));

  // Without flows the flow-based metric columns are absent.
  ASSERT_EQ(run_cli("evaluate --pred " + (dir / "i/pred.nseq").string() +
                        " --truth " + (dir / "d/truth.nseq").string() +
                        " --reference-frame 0 --reg-iterations 30 --out " +
                        (dir / "metrics.csv").string(),
                    &out),
            0)
      << out;
  std::ifstream is(dir / "metrics.csv");
  std::string csv((std::istreambuf_iterator<char>(is)),
                  std::istreambuf_iterator<char>());
  EXPECT_EQ(csv.find("ref_mot_err_fl"), std::string::npos);
  EXPECT_EQ(csv.find("landmark_err"), std::string::npos);
  EXPECT_NE(csv.find("res_mot"), std::string::npos);
  EXPECT_NE(csv.find("skipped"), std::string::npos);
}

TEST(Cli, RegisterRecoversShiftAndChecksShapes) {
  auto dir = temp_dir("cli_reg");
  // A contrasty frame and a 3 px shifted copy.
  PhantomConfig pc;
  pc.frames = 4;
  pc.noise_std = 0.0;
  pc.seed = 8;
  auto truth = gen_sequence(pc);
  const auto& img = truth.frames[0];
  Tensor<double> d = img.cast<double>();
  Image shifted(img.shape);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c)
      shifted.at(r, c) = static_cast<float>(oracles::sample_ref(d, r + 3.0, c));
  write_nseq((dir / "fixed.nseq").string(), std::vector<Image>{shifted});
  write_nseq((dir / "moving.nseq").string(), std::vector<Image>{img});
  std::string out;
  ASSERT_EQ(run_cli("register --moving " + (dir / "moving.nseq").string() +
                        " --fixed " + (dir / "fixed.nseq").string() + " --out " +
                        (dir / "f.nflw").string(),
                    &out),
            0)
      << out;
  auto flows = read_nflw((dir / "f.nflw").string());
  ASSERT_EQ(flows.size(), 1u);
  double mean_dr = 0.0;
  int count = 0;
  for (int r = 12; r < 52; ++r)
    for (int c = 12; c < 52; ++c) {
      mean_dr += flows[0].field.at(0, r, c);
      ++count;
    }
  EXPECT_NEAR(mean_dr / count, 3.0, 0.3);

  // Mismatched sizes exit with the usage/IO code.
  std::vector<Image> small{Image(Shape{32, 32})};
  write_nseq((dir / "small.nseq").string(), small);
  EXPECT_EQ(run_cli("register --moving " + (dir / "small.nseq").string() +
                        " --fixed " + (dir / "fixed.nseq").string() + " --out " +
                        (dir / "g.nflw").string(),
                    &out),
            1);
}

TEST(Cli, InterpolateRejectsShortSequence) {
  auto dir = temp_dir("cli_short");
  std::string out;
  auto params = init_params<float>(Variant::MFIN, 1);
  write_checkpoint((dir / "m.nvwt").string(), params);
  Rng rng(2);
  std::vector<Image> three;
  for (int i = 0; i < 3; ++i)
    three.push_back(oracles::random_tensor<float>(Shape{64, 64}, rng, 0.0, 1.0));
  write_nseq((dir / "acq.nseq").string(), three);
  EXPECT_EQ(run_cli("interpolate --checkpoint " + (dir / "m.nvwt").string() +
                        " --data " + (dir / "acq.nseq").string() + " --out " +
                        (dir / "i").string(),
                    &out),
            1);
}

TEST(Cli, NonFiniteLossExitsWithCode2) {
  auto dir = temp_dir("cli_nan");
  auto cfg_path = dir / "p.cfg";
  std::ofstream(cfg_path) << "phantom.frames = 16\nphantom.seed = 2\n";
  std::string out;
  ASSERT_EQ(run_cli("gen-data --config " + cfg_path.string() + " --out-dir " +
                        (dir / "d").string(),
                    &out),
            0);
  const int rc = run_cli("train --data " + (dir / "d/truth.nseq").string() +
                             " --model scin --loss l2 --steps 12 --batch 2"
                             " --lr 1e30 --out " + (dir / "m").string(),
                         &out);
  EXPECT_EQ(rc, 2) << out;
  EXPECT_NE(out.find("step"), std::string::npos) << out;
}
