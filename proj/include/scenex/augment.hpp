#pragma once

// Geometry-perturbation augmentation: identity, global affine, 3x3 blockwise
// piecewise-affine with feathered blending, and global followed by block.
// The global part is lifted to a camera perturbation; the block part warps
// predicted maps.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "scenex/autodiff.hpp"
#include "scenex/geometry.hpp"
#include "scenex/rng.hpp"

namespace scenex {

enum class AugMode { Identity = 0, Global = 1, Block = 2, GlobalBlock = 3 };

inline const char* aug_mode_name(AugMode m) {
  switch (m) {
    case AugMode::Identity: return "identity";
    case AugMode::Global: return "global";
    case AugMode::Block: return "block";
    case AugMode::GlobalBlock: return "global_block";
  }
  return "?";
}

inline bool has_global(AugMode m) { return m == AugMode::Global || m == AugMode::GlobalBlock; }
inline bool has_block(AugMode m) { return m == AugMode::Block || m == AugMode::GlobalBlock; }

struct AugConfig {
  std::array<double, 4> mode_weights{0.25, 0.25, 0.25, 0.25};
  double max_rotation = 2.0 / kDegPerRad;  // radians
  double max_translation = 0.03;           // fraction of image size
  double max_log_scale = 0.05;
  int grid = 3;
  double max_corner_jitter = 0.1;  // fraction of block size
  double feather_width = 4.0;      // pixels

  void validate() const {
    double s = 0;
    for (double w : mode_weights) {
      if (!(w >= 0)) throw ContractError("augment: negative mode weight");
      s += w;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw ContractError("augment: mode weights must sum to 1");
    if (!(max_rotation >= 0 && max_translation >= 0 && max_log_scale >= 0 && max_corner_jitter >= 0)) {
      throw ContractError("augment: maxima must be >= 0");
    }
    if (grid != 3) throw ContractError("augment: block grid is fixed at 3x3");
    if (!(feather_width >= 1)) throw ContractError("augment: feather_width must be >= 1");
  }
  bool operator==(const AugConfig&) const = default;
};

// Row-major 2x3: x' = a0 x + a1 y + a2, y' = a3 x + a4 y + a5.
using Affine2 = std::array<double, 6>;

inline Affine2 identity_affine() { return {1, 0, 0, 0, 1, 0}; }

inline std::array<double, 2> apply(const Affine2& a, double x, double y) {
  return {a[0] * x + a[1] * y + a[2], a[3] * x + a[4] * y + a[5]};
}

inline double affine_det(const Affine2& a) { return a[0] * a[4] - a[1] * a[3]; }

inline Affine2 invert(const Affine2& a) {
  const double det = affine_det(a);
  if (det == 0) throw ContractError("affine: singular");
  const double i0 = a[4] / det, i1 = -a[1] / det, i3 = -a[3] / det, i4 = a[0] / det;
  return {i0, i1, -(i0 * a[2] + i1 * a[5]), i3, i4, -(i3 * a[2] + i4 * a[5])};
}

struct PoseDelta {
  Vec3 rotation{0, 0, 0};  // camera-frame axis-angle
  Vec3 translation{0, 0, 0};
  double log_focal_scale = 0;

  bool is_zero() const {
    return rotation == Vec3{0, 0, 0} && translation == Vec3{0, 0, 0} && log_focal_scale == 0;
  }
  bool operator==(const PoseDelta&) const = default;
};

struct AugTransform {
  AugMode mode = AugMode::Identity;
  Affine2 global_affine = identity_affine();
  PoseDelta pose_delta;
  std::vector<Affine2> block_warps = std::vector<Affine2>(9, identity_affine());
  double feather_width = 4.0;
};

// Block component as consumed by the forward model.
struct MapWarp {
  std::vector<Affine2> cells;  // 9, row-major over the 3x3 grid
  double feather_width = 4.0;
};

struct Conditioning {
  PoseDelta pose;
  std::optional<MapWarp> warp;
};

inline std::vector<double> fit_affine_rows(const std::array<std::array<double, 2>, 4>& src,
                                           const std::array<double, 4>& target) {
  // Normal equations of min sum (a x + b y + c - target)^2.
  double m[3][4] = {};
  for (int k = 0; k < 4; ++k) {
    const double row[3] = {src[k][0], src[k][1], 1.0};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) m[i][j] += row[i] * row[j];
      m[i][3] += row[i] * target[k];
    }
  }
  for (int c = 0; c < 3; ++c) {
    int p = c;
    for (int r = c + 1; r < 3; ++r)
      if (std::fabs(m[r][c]) > std::fabs(m[p][c])) p = r;
    for (int j = 0; j < 4; ++j) std::swap(m[c][j], m[p][j]);
    for (int r = 0; r < 3; ++r) {
      if (r == c) continue;
      const double f = m[r][c] / m[c][c];
      for (int j = c; j < 4; ++j) m[r][j] -= f * m[c][j];
    }
  }
  return {m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]};
}

// Least-squares affine taking the four `src` corners to `dst`.
inline Affine2 fit_affine(const std::array<std::array<double, 2>, 4>& src,
                          const std::array<std::array<double, 2>, 4>& dst) {
  const auto rx = fit_affine_rows(src, {dst[0][0], dst[1][0], dst[2][0], dst[3][0]});
  const auto ry = fit_affine_rows(src, {dst[0][1], dst[1][1], dst[2][1], dst[3][1]});
  return {rx[0], rx[1], rx[2], ry[0], ry[1], ry[2]};
}

// Cell edges along one axis of length n pixels; pixel centres are integers.
inline double cell_edge(std::size_t n, int k) { return -0.5 + double(n) * k / 3.0; }

inline AugTransform sample_aug(Rng& rng, const AugConfig& cfg, const Intrinsics& k) {
  cfg.validate();
  AugTransform t;
  t.feather_width = cfg.feather_width;
  const double u = rng.uniform();
  double acc = 0;
  int mode = 3;
  for (int i = 0; i < 4; ++i) {
    acc += cfg.mode_weights[i];
    if (u < acc) {
      mode = i;
      break;
    }
  }
  while (cfg.mode_weights[mode] == 0 && mode > 0) --mode;  // rounding at the top end
  t.mode = AugMode(mode);
  if (has_global(t.mode)) {
    const double theta = rng.uniform(-cfg.max_rotation, cfg.max_rotation);
    const double tx = rng.uniform(-cfg.max_translation, cfg.max_translation) * double(k.width);
    const double ty = rng.uniform(-cfg.max_translation, cfg.max_translation) * double(k.height);
    const double ls = rng.uniform(-cfg.max_log_scale, cfg.max_log_scale);
    const double s = std::exp(ls), c = std::cos(theta), sn = std::sin(theta);
    // p' = s R (p - pp) + pp + t about the principal point pp.
    t.global_affine = {s * c, -s * sn, k.cx + tx - s * (c * k.cx - sn * k.cy),
                       s * sn, s * c,  k.cy + ty - s * (sn * k.cx + c * k.cy)};
    // Small-angle pinhole lift: image shift tx ~ yaw * fx, ty ~ -pitch * fy; roll = theta.
    t.pose_delta.rotation = {-ty / k.fy, tx / k.fx, theta};
    t.pose_delta.log_focal_scale = ls;
  }
  if (has_block(t.mode)) {
    for (int gi = 0; gi < 3; ++gi) {
      for (int gj = 0; gj < 3; ++gj) {
        const double x0 = cell_edge(k.width, gj), x1 = cell_edge(k.width, gj + 1);
        const double y0 = cell_edge(k.height, gi), y1 = cell_edge(k.height, gi + 1);
        const double jx = cfg.max_corner_jitter * (x1 - x0), jy = cfg.max_corner_jitter * (y1 - y0);
        const std::array<std::array<double, 2>, 4> src{{{x0, y0}, {x1, y0}, {x0, y1}, {x1, y1}}};
        std::array<std::array<double, 2>, 4> dst = src;
        for (auto& p : dst) {
          p[0] += rng.uniform(-jx, jx);
          p[1] += rng.uniform(-jy, jy);
        }
        t.block_warps[std::size_t(gi * 3 + gj)] = fit_affine(src, dst);
      }
    }
  }
  return t;
}

inline Conditioning lift_to_conditioning(const AugTransform& t) {
  Conditioning c;
  if (has_global(t.mode)) c.pose = t.pose_delta;
  if (has_block(t.mode)) c.warp = MapWarp{t.block_warps, t.feather_width};
  return c;
}

// ---------------------------------------------------------------------------
// Feathered 3x3 blending weights.

// Weights of the three cells along one axis at coordinate x; they telescope
// to exactly one.
inline std::array<double, 3> feather_1d(double x, std::size_t n, double width) {
  auto ramp = [&](int k) {
    const double u = std::clamp((x - cell_edge(n, k)) / width + 0.5, 0.0, 1.0);
    return u * u * (3 - 2 * u);
  };
  const double r1 = ramp(1), r2 = ramp(2);
  return {1.0 - r1, r1 - r2, r2};
}

// One H x W weight map per cell (row-major over the grid).
inline std::vector<Tensor> feather_weights(std::size_t h, std::size_t w, double width) {
  std::vector<Tensor> out(9, Tensor(Shape{h, w}, 0.0));
  for (std::size_t r = 0; r < h; ++r) {
    const auto wy = feather_1d(double(r), h, width);
    for (std::size_t c = 0; c < w; ++c) {
      const auto wx = feather_1d(double(c), w, width);
      for (int gi = 0; gi < 3; ++gi)
        for (int gj = 0; gj < 3; ++gj) out[std::size_t(gi * 3 + gj)].at(r, c) = wy[std::size_t(gi)] * wx[std::size_t(gj)];
    }
  }
  return out;
}

// Per-cell inverse-mapped sample positions for the pixels the cell touches.
struct BlockPlan {
  struct Cell {
    std::vector<std::size_t> pixels;
    std::vector<double> weights;
    Tensor queries;  // pixels.size() x 2, (x, y) source positions
  };
  std::vector<Cell> cells;
};

inline BlockPlan block_plan(const MapWarp& warp, std::size_t h, std::size_t w) {
  if (warp.cells.size() != 9) throw ContractError("block warp: expected 9 cells");
  const std::vector<Tensor> fw = feather_weights(h, w, warp.feather_width);
  BlockPlan plan;
  plan.cells.resize(9);
  for (std::size_t c = 0; c < 9; ++c) {
    const Affine2 inv = invert(warp.cells[c]);
    BlockPlan::Cell& cell = plan.cells[c];
    std::vector<double> q;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (!(fw[c][i] > 0)) continue;
      cell.pixels.push_back(i);
      cell.weights.push_back(fw[c][i]);
      const auto p = apply(inv, double(i % w), double(i / w));
      q.push_back(p[0]);
      q.push_back(p[1]);
    }
    cell.queries = Tensor(Shape{cell.pixels.size(), 2}, std::move(q));
  }
  return plan;
}

namespace detail {

// Validity of a bilinear read at (x, y): in bounds, nearest neighbour valid,
// and every tap with non-zero weight valid.
inline bool sample_valid(const Mask& valid, std::size_t h, std::size_t w, double x, double y) {
  if (!(x >= 0 && y >= 0 && x <= double(w - 1) && y <= double(h - 1))) return false;
  const std::size_t nx = std::size_t(std::lround(x)), ny = std::size_t(std::lround(y));
  if (!valid[ny * w + nx]) return false;
  const std::size_t x0 = std::min<std::size_t>(std::size_t(x), w - 2), y0 = std::min<std::size_t>(std::size_t(y), h - 2);
  const double fx = x - double(x0), fy = y - double(y0);
  const std::size_t k = y0 * w + x0;
  if ((1 - fx) * (1 - fy) > 0 && !valid[k]) return false;
  if (fx * (1 - fy) > 0 && !valid[k + 1]) return false;
  if ((1 - fx) * fy > 0 && !valid[k + w]) return false;
  if (fx * fy > 0 && !valid[k + w + 1]) return false;
  return true;
}

// Bilinear read of channel `ch` of an H x W x stride array.
inline double bilerp(const Tensor& t, std::size_t stride, std::size_t ch, std::size_t h, std::size_t w, double x,
                     double y) {
  const std::size_t x0 = std::min<std::size_t>(std::size_t(x), w - 2), y0 = std::min<std::size_t>(std::size_t(y), h - 2);
  const double fx = x - double(x0), fy = y - double(y0);
  const std::size_t k = y0 * w + x0;
  auto at = [&](std::size_t i) { return t[i * stride + ch]; };
  return (1 - fy) * ((1 - fx) * at(k) + fx * at(k + 1)) + fy * ((1 - fx) * at(k + w) + fx * at(k + w + 1));
}

}  // namespace detail

struct WarpedMaps {
  Tensor depth;
  Tensor normal;
  Mask valid;
};

inline void renormalize(Tensor& normal, Mask& valid) {
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) {
      for (int c = 0; c < 3; ++c) normal[3 * i + c] = 0;
      continue;
    }
    double* n = &normal[3 * i];
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (!(len > 1e-12)) {
      valid[i] = 0;
      n[0] = n[1] = n[2] = 0;
      continue;
    }
    for (int c = 0; c < 3; ++c) n[c] /= len;
  }
}

inline WarpedMaps warp_global(const WarpedMaps& in, const Affine2& a) {
  const std::size_t h = in.depth.dim(0), w = in.depth.dim(1);
  const Affine2 inv = invert(a);
  WarpedMaps out{Tensor(Shape{h, w}, 0.0), Tensor(Shape{h, w, 3}, 0.0), Mask(h * w, 0)};
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto q = apply(inv, double(i % w), double(i / w));
    if (!detail::sample_valid(in.valid, h, w, q[0], q[1])) continue;
    out.valid[i] = 1;
    out.depth[i] = detail::bilerp(in.depth, 1, 0, h, w, q[0], q[1]);
    for (std::size_t c = 0; c < 3; ++c) out.normal[3 * i + c] = detail::bilerp(in.normal, 3, c, h, w, q[0], q[1]);
  }
  renormalize(out.normal, out.valid);
  return out;
}

inline WarpedMaps warp_blocks(const WarpedMaps& in, const MapWarp& warp) {
  const std::size_t h = in.depth.dim(0), w = in.depth.dim(1);
  const BlockPlan plan = block_plan(warp, h, w);
  WarpedMaps out{Tensor(Shape{h, w}, 0.0), Tensor(Shape{h, w, 3}, 0.0), Mask(h * w, 1)};
  for (const BlockPlan::Cell& cell : plan.cells) {
    for (std::size_t j = 0; j < cell.pixels.size(); ++j) {
      const std::size_t i = cell.pixels[j];
      const double x = cell.queries[2 * j], y = cell.queries[2 * j + 1];
      if (!out.valid[i]) continue;
      if (!detail::sample_valid(in.valid, h, w, x, y)) {
        out.valid[i] = 0;
        continue;
      }
      const double wt = cell.weights[j];
      out.depth[i] += wt * detail::bilerp(in.depth, 1, 0, h, w, x, y);
      for (std::size_t c = 0; c < 3; ++c) out.normal[3 * i + c] += wt * detail::bilerp(in.normal, 3, c, h, w, x, y);
    }
  }
  for (std::size_t i = 0; i < h * w; ++i)
    if (!out.valid[i]) out.depth[i] = 0;
  renormalize(out.normal, out.valid);
  return out;
}

// Global warp then block warp; the identity transform returns the input as is.
inline WarpedMaps warp_maps(const Tensor& depth, const Tensor& normal, const Mask& valid, const AugTransform& t) {
  WarpedMaps m{depth, normal, valid};
  if (has_global(t.mode)) m = warp_global(m, t.global_affine);
  if (has_block(t.mode)) m = warp_blocks(m, MapWarp{t.block_warps, t.feather_width});
  return m;
}

// ---------------------------------------------------------------------------
// Block warp on the tape.

struct WarpedMapVars {
  Var depth;
  NormalVars normal;
  Mask valid;
};

inline WarpedMapVars warp_blocks(Var depth, const NormalVars& normal, const Mask& valid, const MapWarp& warp) {
  Tape& tape = *depth.tape;
  const std::size_t h = depth.shape().at(0), w = depth.shape().at(1);
  const BlockPlan plan = block_plan(warp, h, w);
  Mask out_valid(h * w, 1);
  for (const BlockPlan::Cell& cell : plan.cells) {
    for (std::size_t j = 0; j < cell.pixels.size(); ++j) {
      if (!detail::sample_valid(valid, h, w, cell.queries[2 * j], cell.queries[2 * j + 1])) out_valid[cell.pixels[j]] = 0;
    }
  }
  std::vector<Var> acc(4);
  const Var channels[4] = {depth, normal.x, normal.y, normal.z};
  for (const BlockPlan::Cell& cell : plan.cells) {
    if (cell.pixels.empty()) continue;
    Var q = tape.constant(cell.queries);
    Var wt = tape.constant(Tensor(Shape{cell.weights.size()}, cell.weights));
    for (int ch = 0; ch < 4; ++ch) {
      Var s = ad::bilinear_sample(channels[ch], q).values * wt;
      Var full = ad::scatter(s, cell.pixels, Shape{h, w}, 0.0);
      acc[std::size_t(ch)] = acc[std::size_t(ch)].tape ? acc[std::size_t(ch)] + full : full;
    }
  }
  WarpedMapVars out;
  out.valid = out_valid;
  Var len2 = acc[1] * acc[1] + acc[2] * acc[2] + acc[3] * acc[3];
  for (std::size_t i = 0; i < h * w; ++i)
    if (out_valid[i] && !(len2.value()[i] > 1e-24)) out.valid[i] = 0;
  Var inv = 1.0 / ad::sqrt(ad::where(out.valid, len2, 1.0));
  out.depth = ad::where(out.valid, acc[0], 0.0);
  out.normal.x = ad::where(out.valid, acc[1] * inv, 0.0);
  out.normal.y = ad::where(out.valid, acc[2] * inv, 0.0);
  out.normal.z = ad::where(out.valid, acc[3] * inv, 0.0);
  return out;
}

}  // namespace scenex
