#pragma once

// Analytic heightfield scenes, ground-truth renders, capture rigs, and the
// perturbed "inserted" observation.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "scenex/geometry.hpp"
#include "scenex/rng.hpp"

namespace scenex {

struct Bump {
  std::array<double, 2> center{0, 0};
  double amplitude = 0;
  double radius = 1;
  bool operator==(const Bump&) const = default;
};

// Raised box over an axis-aligned footprint. Walls are a smoothstep of width
// `edge` centred on the footprint boundary; edge = 0 gives vertical walls.
struct Block {
  std::array<double, 4> footprint{0, 0, 1, 1};  // x0, y0, x1, y1
  double height = 0;
  double edge = 0.2;
  bool operator==(const Block&) const = default;
};

struct SceneSpec {
  std::array<double, 4> extent{-4, -4, 4, 4};  // x0, y0, x1, y1
  double base_height = 0;
  std::vector<Bump> bumps;
  std::vector<Block> blocks;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(extent[2] > extent[0] && extent[3] > extent[1])) throw ContractError("scene: empty extent");
    if (!std::isfinite(base_height)) throw ContractError("scene: base_height not finite");
    for (const Bump& b : bumps) {
      if (!(b.radius > 0)) throw ContractError("scene: bump radius must be positive");
      if (!std::isfinite(b.amplitude)) throw ContractError("scene: bump amplitude not finite");
    }
    for (const Block& b : blocks) {
      if (!std::isfinite(b.height)) throw ContractError("scene: block height not finite");
      if (!(b.edge >= 0)) throw ContractError("scene: block edge must be >= 0");
      if (!(b.footprint[2] > b.footprint[0] && b.footprint[3] > b.footprint[1])) {
        throw ContractError("scene: empty block footprint");
      }
    }
  }
  bool operator==(const SceneSpec&) const = default;
};

// Random bumps and blocks inside the extent, drawn from spec.seed.
inline SceneSpec procedural_scene(std::uint64_t seed, std::array<double, 4> extent = {-4, -4, 4, 4},
                                  int n_bumps = 5, int n_blocks = 2) {
  SceneSpec s;
  s.extent = extent;
  s.seed = seed;
  Rng rng(mix_seed(seed, 0x5ce4e));
  const double w = extent[2] - extent[0], h = extent[3] - extent[1];
  for (int i = 0; i < n_bumps; ++i) {
    Bump b;
    b.center = {extent[0] + rng.uniform(0.15, 0.85) * w, extent[1] + rng.uniform(0.15, 0.85) * h};
    b.amplitude = rng.uniform(-0.4, 0.8);
    b.radius = rng.uniform(0.4, 1.2);
    s.bumps.push_back(b);
  }
  for (int i = 0; i < n_blocks; ++i) {
    Block b;
    const double x = extent[0] + rng.uniform(0.2, 0.7) * w, y = extent[1] + rng.uniform(0.2, 0.7) * h;
    b.footprint = {x, y, x + rng.uniform(0.6, 1.4), y + rng.uniform(0.6, 1.4)};
    b.height = rng.uniform(0.2, 0.5);
    b.edge = 0.3;
    s.blocks.push_back(b);
  }
  return s;
}

namespace detail {

// Smooth unit step centred at 0 with transition width `edge`, and its derivative.
inline void soft_step(double x, double edge, double& v, double& dv) {
  if (edge <= 0) {
    v = x >= 0 ? 1.0 : 0.0;
    dv = 0;
    return;
  }
  const double u = x / edge + 0.5;
  if (u <= 0) {
    v = dv = 0;
  } else if (u >= 1) {
    v = 1;
    dv = 0;
  } else {
    v = u * u * (3 - 2 * u);
    dv = 6 * u * (1 - u) / edge;
  }
}

}  // namespace detail

class HeightField {
 public:
  explicit HeightField(SceneSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    lo_ = hi_ = spec_.base_height;
    for (const Bump& b : spec_.bumps) (b.amplitude > 0 ? hi_ : lo_) += b.amplitude;
    for (const Block& b : spec_.blocks) (b.height > 0 ? hi_ : lo_) += b.height;
  }

  const SceneSpec& spec() const { return spec_; }

  double z(double x, double y) const {
    double dzdx, dzdy;
    return eval(x, y, dzdx, dzdy);
  }

  std::array<double, 2> gradient(double x, double y) const {
    std::array<double, 2> g;
    eval(x, y, g[0], g[1]);
    return g;
  }

  double eval(double x, double y, double& dzdx, double& dzdy) const {
    double z = spec_.base_height;
    dzdx = dzdy = 0;
    for (const Bump& b : spec_.bumps) {
      const double dx = x - b.center[0], dy = y - b.center[1];
      const double s2 = b.radius * b.radius;
      const double e = b.amplitude * std::exp(-(dx * dx + dy * dy) / (2 * s2));
      z += e;
      dzdx -= e * dx / s2;
      dzdy -= e * dy / s2;
    }
    for (const Block& b : spec_.blocks) {
      double ax, dax, bx, dbx, ay, day, by, dby;
      detail::soft_step(x - b.footprint[0], b.edge, ax, dax);
      detail::soft_step(x - b.footprint[2], b.edge, bx, dbx);
      detail::soft_step(y - b.footprint[1], b.edge, ay, day);
      detail::soft_step(y - b.footprint[3], b.edge, by, dby);
      const double sx = ax - bx, sy = ay - by;
      z += b.height * sx * sy;
      dzdx += b.height * (dax - dbx) * sy;
      dzdy += b.height * sx * (day - dby);
    }
    return z;
  }

  // Bounds of z over the plane (loose: sums of one-signed terms).
  double min_height() const { return lo_; }
  double max_height() const { return hi_; }

  bool inside(double x, double y) const {
    const auto& e = spec_.extent;
    return x >= e[0] && x <= e[2] && y >= e[1] && y <= e[3];
  }

 private:
  SceneSpec spec_;
  double lo_ = 0, hi_ = 0;
};

inline HeightField build_scene(const SceneSpec& spec) { return HeightField(spec); }

inline constexpr int kMarchSteps = 128;

// Ray parameter interval [near, far] inside the box extent x [zlo, zhi];
// false if the ray misses it. The ray is origin + s * dir.
inline bool clip_ray_to_box(const Vec3& o, const Vec3& d, const std::array<double, 4>& extent, double zlo,
                            double zhi, double& s0, double& s1) {
  s0 = 1e-9;
  s1 = std::numeric_limits<double>::infinity();
  const double lo[3] = {extent[0], extent[1], zlo};
  const double hi[3] = {extent[2], extent[3], zhi};
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a], t1 = (hi[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    s0 = std::max(s0, t0);
    s1 = std::min(s1, t1);
  }
  return s1 > s0;
}

inline ViewRecord render_gt_view(const HeightField& field, const CameraParams& camera, int view_id = 0) {
  camera.intrinsics.validate();
  const Vec3 o = camera.pose.center();
  if (field.inside(o[0], o[1]) && o[2] <= field.z(o[0], o[1])) {
    throw ContractError("render_gt_view: camera below the surface");
  }
  const Intrinsics& k = camera.intrinsics;
  const std::size_t h = k.height, w = k.width;
  const Mat3 r = camera.pose.matrix();
  const Mat3 rt = transpose3(r);
  ViewRecord out;
  out.depth = Tensor(Shape{h, w}, 0.0);
  out.normal = Tensor(Shape{h, w, 3}, 0.0);
  out.valid = Mask(h * w, 0);
  out.camera = camera;
  out.view_id = view_id;
  const double zlo = field.min_height() - 1e-6, zhi = field.max_height() + 1e-6;
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t col = 0; col < w; ++col) {
      // Direction with unit camera-frame z, so the ray parameter is the depth.
      const Vec3 d = matvec3(rt, Vec3{(double(col) - k.cx) / k.fx, (double(row) - k.cy) / k.fy, 1.0});
      double s0, s1;
      if (!clip_ray_to_box(o, d, field.spec().extent, zlo, zhi, s0, s1)) continue;
      const double ds = (s1 - s0) / kMarchSteps;
      auto gap = [&](double s) {
        const Vec3 p = o + s * d;
        return p[2] - field.z(p[0], p[1]);
      };
      double sa = s0, ga = gap(s0);
      if (!(ga > 0)) continue;
      for (int i = 1; i <= kMarchSteps; ++i) {
        const double sb = s0 + ds * i;
        const double gb = gap(sb);
        if (gb <= 0) {
          const double s = sa + (sb - sa) * ga / (ga - gb);
          const Vec3 p = o + s * d;
          const auto g = field.gradient(p[0], p[1]);
          const Vec3 nw = normalized({-g[0], -g[1], 1.0});
          Vec3 nc = matvec3(r, nw);
          if (dot3(nc, {(double(col) - k.cx) / k.fx, (double(row) - k.cy) / k.fy, 1.0}) > 0) nc = -1.0 * nc;
          const std::size_t idx = row * w + col;
          out.depth[idx] = s;
          for (int c = 0; c < 3; ++c) out.normal[3 * idx + c] = nc[c];
          out.valid[idx] = 1;
          break;
        }
        sa = sb;
        ga = gb;
      }
    }
  }
  return out;
}

struct Trajectory {
  enum class Kind { Orbit, Arc };
  Kind kind = Kind::Arc;
  double radius = 6.0;
  double height = 4.0;
  double start_deg = -60.0;  // arc only
  double end_deg = 60.0;
  Vec3 target{0, 0, 0};
  bool operator==(const Trajectory&) const = default;
};

struct CaptureRig {
  int n = 6;
  Trajectory trajectory;
  Intrinsics intrinsics;

  void validate() const {
    if (n < 4) throw ContractError("capture rig: n must be >= 4");
    intrinsics.validate();
  }
  CameraParams camera(int i) const {
    const double deg = trajectory.kind == Trajectory::Kind::Orbit
                           ? 360.0 * i / n
                           : trajectory.start_deg + (trajectory.end_deg - trajectory.start_deg) * i / (n - 1);
    const double a = deg / kDegPerRad;
    const Vec3& t = trajectory.target;
    const Vec3 eye{t[0] + trajectory.radius * std::cos(a), t[1] + trajectory.radius * std::sin(a),
                   t[2] + trajectory.height};
    return CameraParams{intrinsics, look_at(eye, t)};
  }
  bool operator==(const CaptureRig&) const = default;
};

inline constexpr double kMinCoverage = 0.3;

inline double valid_fraction(const ViewRecord& v) { return double(mask_count(v.valid)) / double(v.valid.size()); }

inline std::vector<ViewRecord> make_capture_set(const HeightField& field, const CaptureRig& rig) {
  rig.validate();
  std::vector<ViewRecord> views;
  for (int i = 0; i < rig.n; ++i) {
    ViewRecord v = render_gt_view(field, rig.camera(i), i);
    if (valid_fraction(v) < kMinCoverage) {
      throw ContractError("capture view " + std::to_string(i) + " sees only " +
                          std::to_string(100 * valid_fraction(v)) + "% valid pixels");
    }
    views.push_back(std::move(v));
  }
  return views;
}

struct ContentBlob {
  std::array<double, 2> center{32, 32};  // pixel (u, v)
  double radius = 8;                     // pixels
  double depth_offset = 0.5;             // world units toward the camera
  bool operator==(const ContentBlob&) const = default;
};

struct MisalignmentSpec {
  double jitter_rotation = 0;     // radians
  double jitter_translation = 0;  // world units
  double depth_warp = 0;          // relative amplitude of the multiplicative field
  std::optional<ContentBlob> blob;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(jitter_rotation >= 0 && jitter_translation >= 0 && depth_warp >= 0)) {
      throw ContractError("misalignment: amplitudes must be >= 0");
    }
    if (blob && !(blob->radius > 0 && blob->depth_offset >= 0)) {
      throw ContractError("misalignment: blob radius must be > 0 and offset >= 0");
    }
  }
  bool operator==(const MisalignmentSpec&) const = default;
};

struct InsertedView {
  ViewRecord observed;         // what the generator hands over; carries the reported camera
  ViewRecord truth;            // clean render from the reported camera
  CameraParams render_camera;  // camera actually used for `observed`
};

// Low-frequency field in [-1, 1]: product of two phase-shifted sinusoids.
inline double warp_field(double u, double v, std::size_t w, std::size_t h, const std::array<double, 4>& phase) {
  const double tau = 2 * std::numbers::pi;
  return std::sin(tau * phase[0] * u / double(w) + tau * phase[1]) *
         std::cos(tau * phase[2] * v / double(h) + tau * phase[3]);
}

inline InsertedView make_inserted_view(const HeightField& field, const CameraParams& camera,
                                       const MisalignmentSpec& mis, int view_id) {
  mis.validate();
  InsertedView out;
  out.truth = render_gt_view(field, camera, view_id);
  Rng rng(mix_seed(mis.seed, 0x1a5e));
  const Vec3 axis = normalized({rng.normal(), rng.normal(), rng.normal()});
  const Vec3 tdir = normalized({rng.normal(), rng.normal(), rng.normal()});
  const std::array<double, 4> phase{rng.uniform(0.5, 1.0), rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform()};

  out.render_camera = camera;
  if (mis.jitter_rotation == 0 && mis.jitter_translation == 0) {
    out.observed = out.truth;
  } else {
    CameraParams jittered = camera;
    jittered.pose = compose(rotation_matrix(mis.jitter_rotation * axis), camera.pose);
    jittered.pose.translation = jittered.pose.translation + mis.jitter_translation * tdir;
    out.observed = render_gt_view(field, jittered, view_id);
    out.observed.camera = camera;
    out.render_camera = jittered;
  }
  ViewRecord& obs = out.observed;
  const std::size_t h = obs.height(), w = obs.width();
  if (mis.depth_warp > 0) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t i = r * w + c;
        if (obs.valid[i]) obs.depth[i] *= 1.0 + mis.depth_warp * warp_field(double(c), double(r), w, h, phase);
      }
    }
  }
  if (mis.blob && mis.blob->depth_offset > 0) {
    const ContentBlob& b = *mis.blob;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t i = r * w + c;
        const double du = double(c) - b.center[0], dv = double(r) - b.center[1];
        const double q = (du * du + dv * dv) / (b.radius * b.radius);
        if (!obs.valid[i] || q >= 1) continue;
        // Keep the surface in front of the camera.
        obs.depth[i] = std::max(obs.depth[i] - b.depth_offset * (1 - q) * (1 - q), 0.05 * obs.depth[i]);
      }
    }
    const NormalMap n = normals_from_depth(obs.depth, obs.valid, obs.camera.intrinsics);
    const double reach = b.radius + 1.5;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const double du = double(c) - b.center[0], dv = double(r) - b.center[1];
        if (du * du + dv * dv > reach * reach) continue;
        const std::size_t i = r * w + c;
        if (!obs.valid[i]) continue;
        if (!n.valid[i]) {
          obs.valid[i] = 0;
          continue;
        }
        for (int k = 0; k < 3; ++k) obs.normal[3 * i + k] = n.normal[3 * i + k];
      }
    }
  }
  return out;
}

// Largest fraction of `view`'s valid pixels whose back-projected point is
// observed (in image, valid, depth within 2%) by any one of `others`.
inline double coverage_overlap(const ViewRecord& view, const std::vector<ViewRecord>& others) {
  const Tensor pts = unproject_depth_to_points(view, Frame::World);
  const std::size_t n_valid = mask_count(view.valid);
  if (n_valid == 0) return 0;
  double best = 0;
  for (const ViewRecord& o : others) {
    std::size_t seen = 0;
    for (std::size_t i = 0; i < view.valid.size(); ++i) {
      if (!view.valid[i]) continue;
      const Projection p = project({pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]}, o.camera);
      if (!p.in_front) continue;
      const long u = std::lround(p.u), v = std::lround(p.v);
      if (u < 0 || v < 0 || u >= long(o.width()) || v >= long(o.height())) continue;
      const std::size_t j = std::size_t(v) * o.width() + std::size_t(u);
      if (o.valid[j] && std::fabs(o.depth[j] - p.depth) < 0.02 * p.depth) ++seen;
    }
    best = std::max(best, double(seen) / double(n_valid));
  }
  return best;
}

}  // namespace scenex
