#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "navinterp/evaluation.hpp"
#include "navinterp/flow.hpp"
#include "navinterp/flow_ops.hpp"
#include "navinterp/models.hpp"
#include "navinterp/tensor.hpp"

namespace navinterp {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void put_f32(std::ostream& os, const float* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), 4 * n);
}
inline std::uint32_t get_u32(std::istream& is, const char* what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw IoError(std::string("truncated file while reading ") + what);
  return v;
}
inline void get_f32(std::istream& is, float* p, std::size_t n,
                    const char* what) {
  if (!is.read(reinterpret_cast<char*>(p), 4 * n))
    throw IoError(std::string("truncated file while reading ") + what);
}
inline void put_magic(std::ostream& os, const char m[5]) { os.write(m, 4); }
inline void expect_magic(std::istream& is, const char m[5], const char* what) {
  char buf[4];
  if (!is.read(buf, 4) || std::memcmp(buf, m, 4) != 0)
    throw IoError(std::string("bad magic, not a ") + what + " file");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}
inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NSEQ: "NSEQ" | version u32 | T,H,W u32 | T*H*W float32, frame-major.
// ---------------------------------------------------------------------------
inline void write_nseq(const std::string& path,
                       const std::vector<Image>& frames) {
  if (frames.empty()) throw IoError("write_nseq: empty sequence");
  const int H = frames[0].shape[0], W = frames[0].shape[1];
  auto os = detail::open_out(path);
  detail::put_magic(os, "NSEQ");
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(frames.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(H));
  detail::put_u32(os, static_cast<std::uint32_t>(W));
  for (const auto& f : frames) {
    if (f.shape != Shape{H, W}) throw IoError("write_nseq: ragged frames");
    detail::put_f32(os, f.ptr(), f.size());
  }
  if (!os) throw IoError("write_nseq: write failed: " + path);
}

inline std::vector<Image> read_nseq(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "NSEQ", "NSEQ");
  const auto version = detail::get_u32(is, "NSEQ version");
  if (version != 1) throw IoError("read_nseq: unsupported version");
  const int T = static_cast<int>(detail::get_u32(is, "NSEQ T"));
  const int H = static_cast<int>(detail::get_u32(is, "NSEQ H"));
  const int W = static_cast<int>(detail::get_u32(is, "NSEQ W"));
  if (T < 1 || H < 1 || W < 1) throw IoError("read_nseq: bad header");
  std::vector<Image> frames;
  frames.reserve(T);
  for (int t = 0; t < T; ++t) {
    Image f(Shape{H, W});
    detail::get_f32(is, f.ptr(), f.size(), "NSEQ frame");
    frames.push_back(std::move(f));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// NFLW: "NFLW" | version u32 | T_pairs,H,W u32 | per pair: from,to u32 then
// H*W interleaved (row-disp, col-disp) float32. In-memory flows are planar
// {2,H,W}; interleaving happens only on the wire.
// ---------------------------------------------------------------------------
inline void write_nflw(const std::string& path, const std::vector<Flow>& flows) {
  if (flows.empty()) throw IoError("write_nflw: no flows");
  const int H = flows[0].rows(), W = flows[0].cols();
  auto os = detail::open_out(path);
  detail::put_magic(os, "NFLW");
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(flows.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(H));
  detail::put_u32(os, static_cast<std::uint32_t>(W));
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<float> inter(2 * plane);
  for (const auto& f : flows) {
    if (f.field.shape != Shape{2, H, W}) throw IoError("write_nflw: ragged flows");
    detail::put_u32(os, static_cast<std::uint32_t>(f.frame_from));
    detail::put_u32(os, static_cast<std::uint32_t>(f.frame_to));
    for (std::size_t i = 0; i < plane; ++i) {
      inter[2 * i] = f.field.data[i];
      inter[2 * i + 1] = f.field.data[plane + i];
    }
    detail::put_f32(os, inter.data(), inter.size());
  }
  if (!os) throw IoError("write_nflw: write failed: " + path);
}

inline std::vector<Flow> read_nflw(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "NFLW", "NFLW");
  if (detail::get_u32(is, "NFLW version") != 1)
    throw IoError("read_nflw: unsupported version");
  const int P = static_cast<int>(detail::get_u32(is, "NFLW pairs"));
  const int H = static_cast<int>(detail::get_u32(is, "NFLW H"));
  const int W = static_cast<int>(detail::get_u32(is, "NFLW W"));
  if (P < 1 || H < 1 || W < 1) throw IoError("read_nflw: bad header");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<Flow> flows;
  flows.reserve(P);
  std::vector<float> inter(2 * plane);
  for (int p = 0; p < P; ++p) {
    const int from = static_cast<int>(detail::get_u32(is, "NFLW from"));
    const int to = static_cast<int>(detail::get_u32(is, "NFLW to"));
    detail::get_f32(is, inter.data(), inter.size(), "NFLW field");
    Tensor<float> field(Shape{2, H, W});
    for (std::size_t i = 0; i < plane; ++i) {
      field.data[i] = inter[2 * i];
      field.data[plane + i] = inter[2 * i + 1];
    }
    flows.emplace_back(std::move(field), from, to);
  }
  return flows;
}

// ---------------------------------------------------------------------------
// NVWT checkpoint: "NVWT" | version u32 | variant u32 | arch descriptor
// (head_count, shared_prefix_len, n_layers, then per layer f,in,out,stride,
// has_relu as u32) | each weight array as rank u32, extents u32*, float32
// payload, in declaration order.
// ---------------------------------------------------------------------------
inline void write_checkpoint(const std::string& path,
                             const ModelParams<float>& params) {
  auto os = detail::open_out(path);
  detail::put_magic(os, "NVWT");
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(params.variant));
  const auto& arch = params.arch;
  detail::put_u32(os, static_cast<std::uint32_t>(arch.head_count));
  detail::put_u32(os, static_cast<std::uint32_t>(arch.shared_prefix_len));
  detail::put_u32(os, static_cast<std::uint32_t>(arch.conv_specs.size()));
  for (const auto& cs : arch.conv_specs) {
    detail::put_u32(os, static_cast<std::uint32_t>(cs.filter_size));
    detail::put_u32(os, static_cast<std::uint32_t>(cs.in_channels));
    detail::put_u32(os, static_cast<std::uint32_t>(cs.out_channels));
    detail::put_u32(os, static_cast<std::uint32_t>(cs.stride));
    detail::put_u32(os, cs.has_relu ? 1 : 0);
  }
  for (const auto& w : params.weights) {
    detail::put_u32(os, static_cast<std::uint32_t>(w->shape.size()));
    for (int d : w->shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    detail::put_f32(os, w->data.data(), w->data.size());
  }
  if (!os) throw IoError("write_checkpoint: write failed: " + path);
}

inline ModelParams<float> read_checkpoint(const std::string& path) {
  auto is = detail::open_in(path);
  detail::expect_magic(is, "NVWT", "NVWT");
  if (detail::get_u32(is, "NVWT version") != 1)
    throw IoError("read_checkpoint: unsupported version");
  const auto vcode = detail::get_u32(is, "NVWT variant");
  if (vcode > 2) throw IoError("read_checkpoint: unknown variant code");
  ModelParams<float> params;
  params.variant = static_cast<Variant>(vcode);
  ArchitectureSpec arch;
  arch.head_count = static_cast<int>(detail::get_u32(is, "NVWT heads"));
  arch.shared_prefix_len = static_cast<int>(detail::get_u32(is, "NVWT shared"));
  const int n_layers = static_cast<int>(detail::get_u32(is, "NVWT layers"));
  for (int i = 0; i < n_layers; ++i) {
    ConvSpec cs;
    cs.filter_size = static_cast<int>(detail::get_u32(is, "NVWT f"));
    cs.in_channels = static_cast<int>(detail::get_u32(is, "NVWT in"));
    cs.out_channels = static_cast<int>(detail::get_u32(is, "NVWT out"));
    cs.stride = static_cast<int>(detail::get_u32(is, "NVWT stride"));
    cs.has_relu = detail::get_u32(is, "NVWT relu") != 0;
    arch.conv_specs.push_back(cs);
  }
  arch.validate();
  params.arch = arch;
  for (std::size_t i = 0; i < 2 * arch.conv_specs.size(); ++i) {
    const int rank = static_cast<int>(detail::get_u32(is, "NVWT rank"));
    if (rank < 1 || rank > 4) throw IoError("read_checkpoint: bad array rank");
    Shape shape(rank);
    for (int d = 0; d < rank; ++d)
      shape[d] = static_cast<int>(detail::get_u32(is, "NVWT extent"));
    std::vector<float> data(numel(shape));
    detail::get_f32(is, data.data(), data.size(), "NVWT payload");
    params.weights.push_back(make_leaf<float>(shape, std::move(data), true));
  }
  // Shape consistency against the descriptor.
  for (std::size_t li = 0; li < arch.conv_specs.size(); ++li) {
    const auto& cs = arch.conv_specs[li];
    if (params.weight(li)->shape !=
            Shape{cs.out_channels, cs.in_channels, cs.filter_size, cs.filter_size} ||
        params.bias(li)->shape != Shape{cs.out_channels})
      throw IoError("read_checkpoint: weight shapes disagree with descriptor");
  }
  return params;
}

// ---------------------------------------------------------------------------
// Landmark CSV: header "frame,id,row,col", rows sorted by (frame, id).
// ---------------------------------------------------------------------------
inline void write_landmarks_csv(const std::string& path,
                                std::vector<Landmark> landmarks) {
  std::sort(landmarks.begin(), landmarks.end(),
            [](const Landmark& a, const Landmark& b) {
              return a.frame != b.frame ? a.frame < b.frame : a.id < b.id;
            });
  auto os = detail::open_out(path);
  os << "frame,id,row,col\n";
  for (const auto& lm : landmarks)
    os << lm.frame << "," << lm.id << "," << detail::fmt_double(lm.row) << ","
       << detail::fmt_double(lm.col) << "\n";
  if (!os) throw IoError("write_landmarks_csv: write failed: " + path);
}

inline std::vector<Landmark> read_landmarks_csv(const std::string& path) {
  auto is = detail::open_in(path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("frame,id,row,col", 0) != 0)
    throw IoError("read_landmarks_csv: missing header");
  std::vector<Landmark> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    Landmark lm;
    char* end = nullptr;
    const char* s = line.c_str();
    lm.frame = static_cast<int>(std::strtol(s, &end, 10));
    if (*end != ',') throw IoError("read_landmarks_csv: bad row: " + line);
    lm.id = static_cast<int>(std::strtol(end + 1, &end, 10));
    if (*end != ',') throw IoError("read_landmarks_csv: bad row: " + line);
    lm.row = std::strtod(end + 1, &end);
    if (*end != ',') throw IoError("read_landmarks_csv: bad row: " + line);
    lm.col = std::strtod(end + 1, &end);
    out.push_back(lm);
  }
  return out;
}

// Group landmarks by frame into a dense [frame][k] table.
inline std::vector<std::vector<Landmark>> landmarks_by_frame(
    const std::vector<Landmark>& flat, int frame_count) {
  std::vector<std::vector<Landmark>> out(frame_count);
  for (const auto& lm : flat) {
    if (lm.frame < 0 || lm.frame >= frame_count)
      throw IoError("landmarks: frame index out of range");
    out[lm.frame].push_back(lm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM previews and masks (P5, maxval 255). Images map their own [p2, p98]
// range to [0, 255]; for quantitative work use the float formats.
// ---------------------------------------------------------------------------
inline void write_pgm(const std::string& path, const Image& img) {
  const int H = img.shape[0], W = img.shape[1];
  std::vector<float> vals(img.data);
  const float p2 = nearest_rank_percentile(vals, 2.0);
  const float p98 = nearest_rank_percentile(std::move(vals), 98.0);
  const float span = p98 > p2 ? p98 - p2 : 1.0f;
  auto os = detail::open_out(path);
  os << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(W);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      float v = (img.at(r, c) - p2) / span * 255.0f;
      v = std::max(0.0f, std::min(255.0f, v));
      row[c] = static_cast<unsigned char>(std::lround(v));
    }
    os.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!os) throw IoError("write_pgm: write failed: " + path);
}

inline void write_mask_pgm(const std::string& path, const Mask& mask) {
  const int H = mask.shape[0], W = mask.shape[1];
  auto os = detail::open_out(path);
  os << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(W);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) row[c] = mask.at(r, c) ? 255 : 0;
    os.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!os) throw IoError("write_mask_pgm: write failed: " + path);
}

inline Mask read_mask_pgm(const std::string& path) {
  auto is = detail::open_in(path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw IoError("read_mask_pgm: not a P5 PGM");
  int W = 0, H = 0, maxval = 0;
  is >> W >> H >> maxval;
  if (!is || W < 1 || H < 1 || maxval != 255)
    throw IoError("read_mask_pgm: bad header");
  is.get();  // single whitespace after maxval
  Mask mask(Shape{H, W});
  std::vector<unsigned char> row(W);
  for (int r = 0; r < H; ++r) {
    if (!is.read(reinterpret_cast<char*>(row.data()), W))
      throw IoError("read_mask_pgm: truncated");
    for (int c = 0; c < W; ++c) mask.at(r, c) = row[c] > 127 ? 1 : 0;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Flat key=value config. '#' starts a comment; unknown keys are hard errors.
// ---------------------------------------------------------------------------
using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("config: line " + std::to_string(lineno) +
                    " is not key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw IoError("config: empty key at line " + std::to_string(lineno));
    out[key] = val;
  }
  return out;
}

inline ConfigMap read_config(const std::string& path) {
  auto is = detail::open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

inline void check_known_keys(const ConfigMap& cfg,
                             const std::set<std::string>& allowed) {
  for (const auto& [k, v] : cfg)
    if (!allowed.count(k)) throw IoError("config: unknown key '" + k + "'");
}

inline double cfg_double(const ConfigMap& cfg, const std::string& key,
                         double fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (end == it->second.c_str() || *end != '\0')
    throw IoError("config: key '" + key + "' is not a number");
  return v;
}

inline long cfg_long(const ConfigMap& cfg, const std::string& key, long fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  char* end = nullptr;
  const long v = std::strtol(it->second.c_str(), &end, 10);
  if (end == it->second.c_str() || *end != '\0')
    throw IoError("config: key '" + key + "' is not an integer");
  return v;
}

inline std::string cfg_string(const ConfigMap& cfg, const std::string& key,
                              const std::string& fallback) {
  auto it = cfg.find(key);
  return it == cfg.end() ? fallback : it->second;
}

// ---------------------------------------------------------------------------
// Metrics CSV: "frame,metric,unit,px_value,mm_value"; per-frame rows first,
// then aggregate rows with frame = mean|p95|p5. Notes become '#' comments.
// ---------------------------------------------------------------------------
inline void write_metrics_csv(const std::string& path,
                              const MetricsReport& rep) {
  auto os = detail::open_out(path);
  os << "# reference_frame=" << rep.reference_frame
     << " pixel_spacing_mm=" << detail::fmt_double(rep.pixel_spacing_mm) << "\n";
  for (const auto& note : rep.notes) os << "# note: " << note << "\n";
  os << "frame,metric,unit,px_value,mm_value\n";
  auto mmcell = [](double v) {
    return std::isnan(v) ? std::string() : detail::fmt_double(v);
  };
  for (const auto& name : rep.metric_names) {
    for (const auto& v : rep.per_frame.at(name))
      os << v.frame << "," << name << "," << rep.units.at(name) << ","
         << detail::fmt_double(v.px) << "," << mmcell(v.mm) << "\n";
  }
  for (const auto& name : rep.metric_names) {
    const auto& a = rep.aggregates.at(name);
    os << "mean," << name << "," << rep.units.at(name) << ","
       << detail::fmt_double(a.mean_px) << "," << mmcell(a.mean_mm) << "\n";
    os << "p" << a.percentile << "," << name << "," << rep.units.at(name) << ","
       << detail::fmt_double(a.pct_px) << "," << mmcell(a.pct_mm) << "\n";
  }
  if (!os) throw IoError("write_metrics_csv: write failed: " + path);
}

// Loss trace CSV: "step,loss".
inline void write_loss_csv(const std::string& path,
                           const std::vector<double>& trace) {
  auto os = detail::open_out(path);
  os << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    os << (i + 1) << "," << detail::fmt_double(trace[i]) << "\n";
  if (!os) throw IoError("write_loss_csv: write failed: " + path);
}

}  // namespace navinterp
