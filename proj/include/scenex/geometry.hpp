#pragma once

// Pinhole cameras, rigid transforms, normal estimation, and the camera /
// depth / normal distances used by the adaptation losses. Most operations
// come in two flavours: plain (doubles) and differentiable (Vars on a Tape).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "scenex/autodiff.hpp"
#include "scenex/error.hpp"

namespace scenex {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& a) { return (1.0 / norm3(a)) * a; }

inline Mat3 identity3() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[3 * i + j] += a[3 * i + k] * b[3 * k + j];
  return c;
}

inline Mat3 transpose3(const Mat3& a) { return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]}; }

inline Vec3 matvec3(const Mat3& a, const Vec3& v) {
  return {a[0] * v[0] + a[1] * v[1] + a[2] * v[2], a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
          a[6] * v[0] + a[7] * v[1] + a[8] * v[2]};
}

// Rodrigues formula. Series expansion below |r|^2 = 1e-12.
inline Mat3 rotation_matrix(const Vec3& r) {
  const double t2 = dot3(r, r);
  double a, b;
  if (t2 < 1e-12) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    const double t = std::sqrt(t2);
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  const double c = 1.0 - b * t2;
  return {c + b * r[0] * r[0],         -a * r[2] + b * r[0] * r[1], a * r[1] + b * r[0] * r[2],
          a * r[2] + b * r[0] * r[1],  c + b * r[1] * r[1],         -a * r[0] + b * r[1] * r[2],
          -a * r[1] + b * r[0] * r[2], a * r[0] + b * r[1] * r[2],  c + b * r[2] * r[2]};
}

// Inverse of rotation_matrix, returning |r| in [0, pi].
inline Vec3 axis_angle(const Mat3& m) {
  const double c = std::clamp((m[0] + m[4] + m[8] - 1.0) / 2.0, -1.0, 1.0);
  const double theta = std::acos(c);
  const Vec3 v{m[7] - m[5], m[2] - m[6], m[3] - m[1]};
  if (theta < 1e-9) return 0.5 * v;
  if (std::numbers::pi - theta > 1e-6) return (theta / (2.0 * std::sin(theta))) * v;
  // Near pi: axis from the dominant diagonal entry of (R + I) / 2.
  Vec3 axis;
  const int k = (m[0] >= m[4] && m[0] >= m[8]) ? 0 : (m[4] >= m[8] ? 1 : 2);
  const double d = std::sqrt(std::max(0.0, (m[4 * k] + 1.0) / 2.0));
  axis[k] = d;
  for (int j = 0; j < 3; ++j) {
    if (j != k) axis[j] = (m[3 * k + j] + m[3 * j + k]) / (4.0 * d);
  }
  axis = normalized(axis);
  if (dot3(axis, v) < 0) axis = -1.0 * axis;
  return theta * axis;
}

// Angle of the relative rotation a * b^T from the chord length:
// |a - b|_F = 2 sqrt(2) sin(angle / 2). Exact zero for identical inputs and
// well conditioned at small angles.
inline double geodesic(const Mat3& a, const Mat3& b) {
  double s = 0;
  for (int i = 0; i < 9; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return 2.0 * std::asin(std::clamp(std::sqrt(s) / (2.0 * std::numbers::sqrt2), 0.0, 1.0));
}

struct Intrinsics {
  double fx = 100, fy = 100;
  double cx = 32, cy = 32;
  std::size_t width = 64, height = 64;

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw ContractError("intrinsics: focal lengths must be positive");
    if (!(cx >= 0 && cx < double(width) && cy >= 0 && cy < double(height))) {
      throw ContractError("intrinsics: principal point outside the image");
    }
  }
  bool operator==(const Intrinsics&) const = default;
};

// World-to-camera transform: x_cam = R(rotation) * x_world + translation.
struct Pose {
  Vec3 rotation{0, 0, 0};
  Vec3 translation{0, 0, 0};

  Mat3 matrix() const { return rotation_matrix(rotation); }
  Vec3 center() const { return -1.0 * matvec3(transpose3(matrix()), translation); }
  bool operator==(const Pose&) const = default;
};

struct CameraParams {
  Intrinsics intrinsics;
  Pose pose;
  bool operator==(const CameraParams&) const = default;
};

// Camera at `eye` looking at `target`; image x right, y down, z forward.
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = {0, 0, 1}) {
  const Vec3 z = normalized(target - eye);
  const Vec3 x = normalized(cross3(z, up));
  const Vec3 y = cross3(z, x);
  const Mat3 r{x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]};
  Pose p;
  p.rotation = axis_angle(r);
  p.translation = -1.0 * matvec3(rotation_matrix(p.rotation), eye);
  return p;
}

// Applies a camera-frame rotation `delta` about the optical centre.
inline Pose compose(const Mat3& delta, const Pose& p) {
  Pose out;
  out.rotation = axis_angle(matmul3(delta, p.matrix()));
  out.translation = matvec3(delta, p.translation);
  return out;
}

struct ViewRecord {
  Tensor depth;   // H x W, camera-frame z
  Tensor normal;  // H x W x 3, unit, camera frame
  Mask valid;     // H x W
  CameraParams camera;
  int view_id = 0;

  std::size_t height() const { return depth.dim(0); }
  std::size_t width() const { return depth.dim(1); }
  std::size_t pixels() const { return depth.size(); }
};

struct Projection {
  double u = 0, v = 0;
  double depth = 0;
  bool in_front = false;
};

inline Vec3 to_camera(const Vec3& p, const CameraParams& cam) {
  return matvec3(cam.pose.matrix(), p) + cam.pose.translation;
}

inline Vec3 to_world(const Vec3& pc, const CameraParams& cam) {
  return matvec3(transpose3(cam.pose.matrix()), pc - cam.pose.translation);
}

inline Projection project(const Vec3& point, const CameraParams& cam) {
  const Vec3 pc = to_camera(point, cam);
  Projection out;
  out.depth = pc[2];
  out.in_front = pc[2] > 0;
  if (!out.in_front) return out;
  const Intrinsics& k = cam.intrinsics;
  out.u = k.fx * pc[0] / pc[2] + k.cx;
  out.v = k.fy * pc[1] / pc[2] + k.cy;
  return out;
}

inline Vec3 unproject_camera(double u, double v, double depth, const Intrinsics& k) {
  return {(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth};
}

inline Vec3 unproject(double u, double v, double depth, const CameraParams& cam) {
  return to_world(unproject_camera(u, v, depth, cam.intrinsics), cam);
}

enum class Frame { Camera, World };

// H x W x 3 point map; invalid pixels hold NaN.
inline Tensor unproject_depth_to_points(const ViewRecord& view, Frame frame) {
  const std::size_t h = view.height(), w = view.width();
  Tensor out(Shape{h, w, 3}, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      if (!view.valid[i]) continue;
      Vec3 p = unproject_camera(double(c), double(r), view.depth[i], view.camera.intrinsics);
      if (frame == Frame::World) p = to_world(p, view.camera);
      for (int k = 0; k < 3; ++k) out[3 * i + k] = p[k];
    }
  }
  return out;
}

// Neighbour indices for tangent estimation: central differences where both
// neighbours are valid, one-sided at borders and next to invalid pixels.
struct NormalStencil {
  std::vector<std::size_t> pixels;  // pixels with both tangents defined
  std::vector<std::size_t> u_plus, u_minus, v_plus, v_minus;
};

inline NormalStencil normal_stencil(const Mask& valid, std::size_t h, std::size_t w) {
  NormalStencil s;
  auto ok = [&](std::size_t r, std::size_t c) { return valid[r * w + c] != 0; };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      if (!valid[i]) continue;
      const std::size_t up = (c + 1 < w && ok(r, c + 1)) ? i + 1 : i;
      const std::size_t um = (c > 0 && ok(r, c - 1)) ? i - 1 : i;
      const std::size_t vp = (r + 1 < h && ok(r + 1, c)) ? i + w : i;
      const std::size_t vm = (r > 0 && ok(r - 1, c)) ? i - w : i;
      if (up == um || vp == vm) continue;
      s.pixels.push_back(i);
      s.u_plus.push_back(up);
      s.u_minus.push_back(um);
      s.v_plus.push_back(vp);
      s.v_minus.push_back(vm);
    }
  }
  return s;
}

inline constexpr double kDegenerateNormal = 1e-20;

struct NormalMap {
  Tensor normal;  // H x W x 3
  Mask valid;
};

// Normals from the cross product of image-space tangents of the camera-frame
// point map, oriented toward the camera.
inline NormalMap normals_from_depth(const Tensor& depth, const Mask& valid, const Intrinsics& k) {
  const std::size_t h = depth.dim(0), w = depth.dim(1);
  NormalMap out{Tensor(Shape{h, w, 3}, 0.0), Mask(h * w, 0)};
  auto point = [&](std::size_t i) {
    return unproject_camera(double(i % w), double(i / w), depth[i], k);
  };
  const NormalStencil s = normal_stencil(valid, h, w);
  for (std::size_t j = 0; j < s.pixels.size(); ++j) {
    const std::size_t i = s.pixels[j];
    const Vec3 n = cross3(point(s.u_plus[j]) - point(s.u_minus[j]), point(s.v_plus[j]) - point(s.v_minus[j]));
    const double len2 = dot3(n, n);
    if (!(len2 > kDegenerateNormal)) continue;
    const double sign = dot3(n, point(i)) > 0 ? -1.0 : 1.0;
    const double inv = sign / std::sqrt(len2);
    for (int c = 0; c < 3; ++c) out.normal[3 * i + c] = n[c] * inv;
    out.valid[i] = 1;
  }
  return out;
}

inline NormalMap normals_from_depth(const ViewRecord& view) {
  return normals_from_depth(view.depth, view.valid, view.camera.intrinsics);
}

// ---------------------------------------------------------------------------
// Distances (plain).

struct CamWeights {
  double rot = 1.0;
  double trans = 1.0;
  double focal = 0.1;
};

inline double d_cam(const CameraParams& hat, const CameraParams& ref, const CamWeights& w = {}) {
  const double rot = geodesic(hat.pose.matrix(), ref.pose.matrix());
  const double trans = norm3(hat.pose.translation - ref.pose.translation);
  const Intrinsics& a = hat.intrinsics;
  const Intrinsics& b = ref.intrinsics;
  const double focal = (std::fabs(a.fx - b.fx) + std::fabs(a.fy - b.fy)) / (b.fx + b.fy);
  return w.rot * rot + w.trans * trans + w.focal * focal;
}

enum class DepthMode { L1, ScaleInvariant };

// Median with the mean-of-middle-pair convention for even counts.
inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty set");
  const std::size_t n = v.size();
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

inline void check_depth_inputs(const char* op, const Tensor& a, const Tensor& b, const Mask& valid) {
  if (a.size() != b.size() || a.size() != valid.size()) {
    throw ShapeError(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (mask_count(valid) == 0) throw ContractError(std::string(op) + ": empty valid mask");
}

inline double d_depth(const Tensor& hat, const Tensor& ref, const Mask& valid,
                      DepthMode mode = DepthMode::ScaleInvariant) {
  check_depth_inputs("d_depth", hat, ref, valid);
  const std::size_t n = hat.size();
  std::size_t count = 0;
  double s = 0;
  if (mode == DepthMode::L1) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid[i]) continue;
      s += std::fabs(hat[i] - ref[i]);
      ++count;
    }
    return s / double(count);
  }
  std::vector<double> diff;
  diff.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    if (!(hat[i] > 0 && ref[i] > 0)) throw DomainError("d_depth", "non-positive depth on a valid pixel");
    diff.push_back(std::log(hat[i]) - std::log(ref[i]));
  }
  const double m = median(diff);
  for (double d : diff) s += std::fabs(d - m);
  return s / double(diff.size());
}

inline double d_normal(const Tensor& hat, const Tensor& ref, const Mask& valid) {
  if (hat.size() != ref.size() || hat.size() != 3 * valid.size()) {
    throw ShapeError("d_normal", shape_str(hat.shape()) + " vs " + shape_str(ref.shape()));
  }
  std::size_t count = 0;
  double s = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    s += 1.0 - (hat[3 * i] * ref[3 * i] + hat[3 * i + 1] * ref[3 * i + 1] + hat[3 * i + 2] * ref[3 * i + 2]);
    ++count;
  }
  if (count == 0) throw ContractError("d_normal: empty valid mask");
  return s / double(count);
}

inline Mask mask_and(const Mask& a, const Mask& b) {
  Mask out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] && b[i];
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable camera and distances.

// Camera whose rotation (row-major 3x3, shape {9}), translation {3} and focal
// lengths {2} live on a tape. The principal point and image size are constants.
struct CameraVar {
  Var rotation;
  Var translation;
  Var focal;
  double cx = 0, cy = 0;
  std::size_t width = 0, height = 0;

  CameraParams value() const {
    CameraParams c;
    const Tensor& r = rotation.value();
    Mat3 m;
    for (int i = 0; i < 9; ++i) m[i] = r[i];
    c.pose.rotation = axis_angle(m);
    for (int i = 0; i < 3; ++i) c.pose.translation[i] = translation.value()[i];
    c.intrinsics = Intrinsics{focal.value()[0], focal.value()[1], cx, cy, width, height};
    return c;
  }
  Mat3 rotation_value() const {
    Mat3 m;
    for (int i = 0; i < 9; ++i) m[i] = rotation.value()[i];
    return m;
  }
};

inline Var concat_scalars(const std::vector<Var>& xs) {
  return ad::reshape(ad::stack_columns(xs), Shape{xs.size()});
}

// Rodrigues formula on the tape; r has shape {3}.
inline Var rotation_matrix(Var r) {
  Var r0 = ad::element(r, 0), r1 = ad::element(r, 1), r2 = ad::element(r, 2);
  Var t2 = ad::dot(r, r);
  Var a, b;
  if (t2.item() < 1e-12) {
    a = 1.0 - t2 * (1.0 / 6.0);
    b = 0.5 - t2 * (1.0 / 24.0);
  } else {
    Var t = ad::sqrt(t2);
    a = ad::sin(t) / t;
    b = (1.0 - ad::cos(t)) / t2;
  }
  Var c = 1.0 - b * t2;
  Var b0 = b * r0, b1 = b * r1, b2 = b * r2;
  Var a0 = a * r0, a1 = a * r1, a2 = a * r2;
  return concat_scalars({c + b0 * r0, b0 * r1 - a2, b0 * r2 + a1,
                         b0 * r1 + a2, c + b1 * r1, b1 * r2 - a0,
                         b0 * r2 - a1, b1 * r2 + a0, c + b2 * r2});
}

inline Tensor mat3_tensor(const Mat3& m) { return Tensor(Shape{9}, std::vector<double>(m.begin(), m.end())); }
inline Tensor vec3_tensor(const Vec3& v) { return Tensor(Shape{3}, std::vector<double>(v.begin(), v.end())); }

// Geodesic rotation distance with a constant reference rotation.
inline Var geodesic(Var rotation, const Mat3& ref) {
  Var chord = ad::norm(rotation - rotation.tape->constant(mat3_tensor(ref)));
  return 2.0 * ad::asin_clamped(chord * (0.5 / std::numbers::sqrt2));
}

// w_rot * geodesic + w_trans * |t - t_ref| + w_focal * relative focal error;
// the reference camera is a constant (detached) target.
inline Var d_cam(const CameraVar& hat, const CameraParams& ref, const CamWeights& w = {}) {
  Tape& tape = *hat.rotation.tape;
  Var rot = geodesic(hat.rotation, ref.pose.matrix());
  Var trans = ad::norm(hat.translation - tape.constant(vec3_tensor(ref.pose.translation)));
  const Intrinsics& k = ref.intrinsics;
  Var fref = tape.constant(Tensor(Shape{2}, std::vector<double>{k.fx, k.fy}));
  Var focal = ad::sum(ad::abs(hat.focal - fref)) * (1.0 / (k.fx + k.fy));
  return w.rot * rot + w.trans * trans + w.focal * focal;
}

// Depth distance with a constant reference. In scale-invariant mode the
// median log offset is computed from values and held constant in the adjoint.
inline Var d_depth(Var hat, const Tensor& ref, const Mask& valid, DepthMode mode = DepthMode::ScaleInvariant) {
  check_depth_inputs("d_depth", hat.value(), ref, valid);
  Tape& tape = *hat.tape;
  if (mode == DepthMode::L1) {
    Var diff = hat - tape.constant(ref.reshaped(hat.shape()));
    return ad::masked_mean(ad::abs(diff), valid);
  }
  Tensor log_ref(hat.shape(), 0.0);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (!valid[i]) continue;
    if (!(ref[i] > 0)) throw DomainError("d_depth", "non-positive reference depth on a valid pixel");
    log_ref[i] = std::log(ref[i]);
  }
  Var diff = ad::log(ad::where(valid, hat, 1.0)) - tape.constant(std::move(log_ref));
  std::vector<double> dv;
  dv.reserve(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) dv.push_back(diff.value()[i]);
  }
  const double m = median(std::move(dv));
  return ad::masked_mean(ad::abs(diff - m), valid);
}

struct NormalVars {
  Var x, y, z;  // each H x W
};

inline NormalVars normal_vars(Tape& tape, const Tensor& n) {
  const std::size_t h = n.dim(0), w = n.dim(1);
  Tensor cx(Shape{h, w}), cy(Shape{h, w}), cz(Shape{h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    cx[i] = n[3 * i];
    cy[i] = n[3 * i + 1];
    cz[i] = n[3 * i + 2];
  }
  return {tape.constant(std::move(cx)), tape.constant(std::move(cy)), tape.constant(std::move(cz))};
}

inline Tensor interleave(const NormalVars& n) {
  const Tensor& x = n.x.value();
  Tensor out(Shape{x.dim(0), x.dim(1), 3});
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[3 * i] = x[i];
    out[3 * i + 1] = n.y.value()[i];
    out[3 * i + 2] = n.z.value()[i];
  }
  return out;
}

// Masked mean of (1 - n_hat . n_ref) with a constant reference map (H x W x 3).
inline Var d_normal(const NormalVars& hat, const Tensor& ref, const Mask& valid) {
  if (ref.size() != 3 * valid.size() || hat.x.size() != valid.size()) {
    throw ShapeError("d_normal", shape_str(hat.x.shape()) + " vs " + shape_str(ref.shape()));
  }
  if (mask_count(valid) == 0) throw ContractError("d_normal: empty valid mask");
  Tape& tape = *hat.x.tape;
  NormalVars r = normal_vars(tape, ref);
  Var cosine = hat.x * r.x + hat.y * r.y + hat.z * r.z;
  return ad::masked_mean(1.0 - cosine, valid);
}

struct NormalMapVar {
  NormalVars normal;
  Mask valid;
};

// Differentiable counterpart of normals_from_depth: gradients flow to the
// depth map and the focal lengths; stencil choice and orientation sign are
// constants of the evaluation point.
inline NormalMapVar normals_from_depth(Var depth, const Mask& valid, Var focal, double cx, double cy) {
  Tape& tape = *depth.tape;
  const std::size_t h = depth.shape().at(0), w = depth.shape().at(1);
  const NormalStencil s = normal_stencil(valid, h, w);
  Tensor du(Shape{h, w}), dv(Shape{h, w});
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      du[r * w + c] = double(c) - cx;
      dv[r * w + c] = double(r) - cy;
    }
  }
  Var px = depth * tape.constant(std::move(du)) / ad::element(focal, 0);
  Var py = depth * tape.constant(std::move(dv)) / ad::element(focal, 1);
  Var pz = depth;
  auto diff = [&](Var p, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    return ad::gather(p, a) - ad::gather(p, b);
  };
  NormalMapVar out;
  out.valid.assign(h * w, 0);
  if (s.pixels.empty()) {
    Var zero = tape.constant(Tensor(Shape{h, w}, 0.0));
    out.normal = {zero, zero, zero};
    return out;
  }
  Var tux = diff(px, s.u_plus, s.u_minus), tuy = diff(py, s.u_plus, s.u_minus), tuz = diff(pz, s.u_plus, s.u_minus);
  Var tvx = diff(px, s.v_plus, s.v_minus), tvy = diff(py, s.v_plus, s.v_minus), tvz = diff(pz, s.v_plus, s.v_minus);
  Var nx = tuy * tvz - tuz * tvy;
  Var ny = tuz * tvx - tux * tvz;
  Var nz = tux * tvy - tuy * tvx;
  Var len2 = nx * nx + ny * ny + nz * nz;
  const std::size_t m = s.pixels.size();
  Mask ok(m, 0);
  Tensor sign(Shape{m}, 0.0);
  Var cx_pix = ad::gather(px, s.pixels), cy_pix = ad::gather(py, s.pixels), cz_pix = ad::gather(pz, s.pixels);
  for (std::size_t j = 0; j < m; ++j) {
    if (!(len2.value()[j] > kDegenerateNormal)) continue;
    ok[j] = 1;
    const double facing = nx.value()[j] * cx_pix.value()[j] + ny.value()[j] * cy_pix.value()[j] +
                          nz.value()[j] * cz_pix.value()[j];
    sign[j] = facing > 0 ? -1.0 : 1.0;
    out.valid[s.pixels[j]] = 1;
  }
  Var inv = tape.constant(std::move(sign)) / ad::sqrt(ad::where(ok, len2, 1.0));
  out.normal.x = ad::scatter(nx * inv, s.pixels, Shape{h, w}, 0.0);
  out.normal.y = ad::scatter(ny * inv, s.pixels, Shape{h, w}, 0.0);
  out.normal.z = ad::scatter(nz * inv, s.pixels, Shape{h, w}, 0.0);
  return out;
}

inline constexpr double kDegPerRad = 180.0 / std::numbers::pi;

}  // namespace scenex
