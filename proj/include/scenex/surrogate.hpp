#pragma once

// Differentiable surrogate reconstructor: a shared height grid over the scene
// extent plus per-view camera parameters and, for inserted views, a coarse
// additive depth residual. Predictions are ray-marched depth maps, normals
// derived from them, and the (optionally perturbed) camera.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scenex/augment.hpp"
#include "scenex/autodiff.hpp"
#include "scenex/geometry.hpp"
#include "scenex/optim.hpp"
#include "scenex/rng.hpp"

namespace scenex {

struct ViewParams {
  Tensor rotation{Shape{3}, 0.0};     // axis-angle, world-to-camera
  Tensor translation{Shape{3}, 0.0};  // world-to-camera
  Tensor log_focal{Shape{2}, 0.0};
  std::optional<Tensor> residual;  // h x w additive depth, inserted views only
  double cx = 0, cy = 0;
  std::size_t width = 0, height = 0;

  static ViewParams from_camera(const CameraParams& c) {
    ViewParams v;
    v.rotation = vec3_tensor(c.pose.rotation);
    v.translation = vec3_tensor(c.pose.translation);
    v.log_focal = Tensor::vector({std::log(c.intrinsics.fx), std::log(c.intrinsics.fy)});
    v.cx = c.intrinsics.cx;
    v.cy = c.intrinsics.cy;
    v.width = c.intrinsics.width;
    v.height = c.intrinsics.height;
    return v;
  }
  CameraParams camera() const {
    CameraParams c;
    c.pose.rotation = {rotation[0], rotation[1], rotation[2]};
    c.pose.translation = {translation[0], translation[1], translation[2]};
    c.intrinsics = Intrinsics{std::exp(log_focal[0]), std::exp(log_focal[1]), cx, cy, width, height};
    return c;
  }
  bool operator==(const ViewParams&) const = default;
};

struct ModelParams {
  Tensor height_grid;                           // R x C; row <-> y, column <-> x
  std::array<double, 4> extent{-4, -4, 4, 4};  // x0, y0, x1, y1 covered by the grid
  std::map<int, ViewParams> views;

  // Parameter blocks in the fixed order used everywhere (optimizer, EMA,
  // restore, checkpoints): grid, then per view id ascending rotation,
  // translation, log_focal, residual.
  template <class F>
  void for_each_block(F&& f) {
    f(std::string("grid"), height_grid);
    for (auto& [id, v] : views) {
      const std::string p = "view" + std::to_string(id) + ".";
      f(p + "rotation", v.rotation);
      f(p + "translation", v.translation);
      f(p + "log_focal", v.log_focal);
      if (v.residual) f(p + "residual", *v.residual);
    }
  }
  template <class F>
  void for_each_block(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_block([&](const std::string& n, Tensor& t) { f(n, std::as_const(t)); });
  }

  NamedTensors blocks() {
    NamedTensors out;
    for_each_block([&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_block([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
  const ViewParams& view(int id) const {
    auto it = views.find(id);
    if (it == views.end()) throw ContractError("unknown view id " + std::to_string(id));
    return it->second;
  }
  bool operator==(const ModelParams&) const = default;
};

// Throws unless `a` and `b` have the same blocks with the same shapes.
inline void check_same_layout(const ModelParams& a, const ModelParams& b, const char* op) {
  std::vector<std::pair<std::string, Shape>> la, lb;
  a.for_each_block([&](const std::string& n, const Tensor& t) { la.emplace_back(n, t.shape()); });
  b.for_each_block([&](const std::string& n, const Tensor& t) { lb.emplace_back(n, t.shape()); });
  if (la != lb) throw ShapeError(op, "parameter layouts differ");
}

// ---------------------------------------------------------------------------
// Binding parameters to a tape.

struct ViewVars {
  Var rotation, translation, log_focal;
  std::optional<Var> residual;
};

struct ModelVars {
  const ModelParams* params = nullptr;
  Var grid;
  std::map<int, ViewVars> views;
};

using Trainable = std::function<bool(const std::string&)>;

inline bool all_trainable(const std::string&) { return true; }
inline bool none_trainable(const std::string&) { return false; }

// Registers the selected blocks as tape parameters named `prefix` + block name.
inline ModelVars bind_model(Tape& tape, const ModelParams& p, const Trainable& trainable = all_trainable,
                            const std::string& prefix = "") {
  ModelVars mv;
  mv.params = &p;
  auto leaf = [&](const std::string& name, const Tensor& t) {
    return trainable(name) ? tape.parameter(prefix + name, t) : tape.constant(t);
  };
  mv.grid = leaf("grid", p.height_grid);
  for (const auto& [id, v] : p.views) {
    const std::string pre = "view" + std::to_string(id) + ".";
    ViewVars vv{leaf(pre + "rotation", v.rotation), leaf(pre + "translation", v.translation),
                leaf(pre + "log_focal", v.log_focal), std::nullopt};
    if (v.residual) vv.residual = leaf(pre + "residual", *v.residual);
    mv.views.emplace(id, vv);
  }
  return mv;
}

// ---------------------------------------------------------------------------
// Ray marching against the bilinear height grid.

inline constexpr int kSurrogateMarchSteps = 128;
inline constexpr double kMarchLattice = 256.0;

// Same arithmetic as ad::bilinear_sample, so off-tape searches agree with
// on-tape values bit for bit.
inline double bilinear_value(const Tensor& g, double x, double y) {
  const std::size_t h = g.dim(0), w = g.dim(1);
  const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(x), w - 2);
  const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(y), h - 2);
  const double fx = x - double(x0), fy = y - double(y0);
  const double* r0 = &g.data()[y0 * w + x0];
  const double* r1 = r0 + w;
  return (1 - fy) * ((1 - fx) * r0[0] + fx * r0[1]) + fy * ((1 - fx) * r1[0] + fx * r1[1]);
}

struct DepthVar {
  Var depth;  // H x W, zero where invalid
  Mask valid;
};

// The crossing search runs on values; the tape only sees the two bracketing
// samples per pixel, whose ray parameters are constants:
// depth = s_a + (s_b - s_a) * g_a / (g_a - g_b), g = ray height - grid height.
// Directions have unit camera-frame z, so the ray parameter is the depth.
inline DepthVar raymarch_depth(Var grid, const std::array<double, 4>& extent, const CameraVar& cam) {
  Tape& tape = *grid.tape;
  const Tensor gv = grid.value();  // copies: tape storage may reallocate
  if (gv.rank() != 2 || gv.dim(0) < 2 || gv.dim(1) < 2) throw ShapeError("raymarch_depth", "grid must be R x C");
  const std::size_t rows = gv.dim(0), cols = gv.dim(1);
  const std::size_t h = cam.height, w = cam.width, n = h * w;
  const double x0 = extent[0], y0 = extent[1];
  const double sx = double(cols - 1) / (extent[2] - extent[0]);
  const double sy = double(rows - 1) / (extent[3] - extent[1]);

  Tensor du(Shape{n}), dv(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    du[i] = double(i % w) - cam.cx;
    dv[i] = double(i / w) - cam.cy;
  }
  Var a = tape.constant(std::move(du)) / ad::element(cam.focal, 0);
  Var b = tape.constant(std::move(dv)) / ad::element(cam.focal, 1);
  Var r[9];
  for (std::size_t i = 0; i < 9; ++i) r[i] = ad::element(cam.rotation, i);
  Var t0 = ad::element(cam.translation, 0), t1 = ad::element(cam.translation, 1),
      t2 = ad::element(cam.translation, 2);
  // World-frame direction R^T (a, b, 1) and centre -R^T t.
  Var dwx = a * r[0] + b * r[3] + r[6];
  Var dwy = a * r[1] + b * r[4] + r[7];
  Var dwz = a * r[2] + b * r[5] + r[8];
  Var ox = -(r[0] * t0 + r[3] * t1 + r[6] * t2);
  Var oy = -(r[1] * t0 + r[4] * t1 + r[7] * t2);
  Var oz = -(r[2] * t0 + r[5] * t1 + r[8] * t2);

  double gmin = std::numeric_limits<double>::infinity(), gmax = -gmin;
  for (double v : gv.data()) {
    gmin = std::min(gmin, v);
    gmax = std::max(gmax, v);
  }
  // Height bounds snapped outward to a coarse lattice so that small grid
  // perturbations leave the march positions unchanged. The lattice is offset
  // so round heights such as 0 do not sit on a cell boundary.
  const double zlo = (std::floor(gmin * 16.0 - 1.2345) + 0.2345) / 16.0;
  const double zhi = (std::ceil(gmax * 16.0 + 1.2345) - 0.2345) / 16.0;
  const double ex = 1e-9 * (extent[2] - extent[0]), ey = 1e-9 * (extent[3] - extent[1]);
  const std::array<double, 4> inner{extent[0] + ex, extent[1] + ey, extent[2] - ex, extent[3] - ey};
  const double o[3] = {ox.item(), oy.item(), oz.item()};
  const Tensor wx = dwx.value(), wy = dwy.value(), wz = dwz.value();

  std::vector<std::size_t> pix;
  std::vector<double> sa, sb;
  for (std::size_t i = 0; i < n; ++i) {
    const double d[3] = {wx[i], wy[i], wz[i]};
    double s0 = 1e-9, s1 = std::numeric_limits<double>::infinity();
    const double lo[3] = {inner[0], inner[1], zlo}, hi[3] = {inner[2], inner[3], zhi};
    bool hit = true;
    for (int k = 0; k < 3 && hit; ++k) {
      if (d[k] == 0) {
        hit = o[k] >= lo[k] && o[k] <= hi[k];
        continue;
      }
      double ta = (lo[k] - o[k]) / d[k], tb = (hi[k] - o[k]) / d[k];
      if (ta > tb) std::swap(ta, tb);
      s0 = std::max(s0, ta);
      s1 = std::min(s1, tb);
    }
    // Snap the march interval inward to a lattice so that the step positions
    // stay fixed under small camera perturbations, matching the adjoint.
    s0 = std::ceil(s0 * kMarchLattice) / kMarchLattice;
    s1 = std::floor(s1 * kMarchLattice) / kMarchLattice;
    if (!hit || !(s1 > s0)) continue;
    auto gap = [&](double s, bool& ok) {
      const double px = o[0] + s * d[0], py = o[1] + s * d[1], pz = o[2] + s * d[2];
      const double qx = (px + (-x0)) * sx, qy = (py + (-y0)) * sy;
      ok = qx >= 0 && qy >= 0 && qx <= double(cols - 1) && qy <= double(rows - 1);
      return ok ? pz - bilinear_value(gv, qx, qy) : 0.0;
    };
    const double ds = (s1 - s0) / kSurrogateMarchSteps;
    bool ok;
    double s_prev = s0, g_prev = gap(s0, ok);
    if (!ok || !(g_prev > 0)) continue;
    for (int k = 1; k <= kSurrogateMarchSteps; ++k) {
      const double s = s0 + ds * k;
      const double g = gap(s, ok);
      if (!ok) break;
      if (g <= 0) {
        pix.push_back(i);
        sa.push_back(s_prev);
        sb.push_back(s);
        break;
      }
      s_prev = s;
      g_prev = g;
    }
  }

  DepthVar out;
  out.valid.assign(n, 0);
  if (pix.empty()) {
    out.depth = tape.constant(Tensor(Shape{h, w}, 0.0));
    return out;
  }
  const std::size_t m = pix.size();
  Var gx = ad::gather(dwx, pix), gy = ad::gather(dwy, pix), gz = ad::gather(dwz, pix);
  auto gap_var = [&](const std::vector<double>& s, Mask& in_range) {
    Var sv = tape.constant(Tensor(Shape{m}, s));
    Var px = ox + sv * gx, py = oy + sv * gy, pz = oz + sv * gz;
    Var q = ad::stack_columns({(px + (-x0)) * sx, (py + (-y0)) * sy});
    ad::Sampled hs = ad::bilinear_sample(grid, q);
    in_range = std::move(hs.in_range);
    return pz - hs.values;
  };
  Mask ra, rb;
  Var ga = gap_var(sa, ra);
  Var gb = gap_var(sb, rb);
  std::vector<double> span(m);
  for (std::size_t j = 0; j < m; ++j) span[j] = sb[j] - sa[j];
  Var depth = tape.constant(Tensor(Shape{m}, sa)) + tape.constant(Tensor(Shape{m}, span)) * (ga / (ga - gb));
  for (std::size_t j = 0; j < m; ++j) {
    if (ra[j] && rb[j] && depth.value()[j] > 0 && std::isfinite(depth.value()[j])) out.valid[pix[j]] = 1;
  }
  out.depth = ad::where(out.valid, ad::scatter(depth, pix, Shape{h, w}, 0.0), 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Forward model.

struct Prediction {
  CameraVar camera;
  Var depth;  // H x W
  NormalVars normal;
  Mask valid;
  int view_id = 0;

  ViewRecord record() const {
    ViewRecord r;
    r.depth = depth.value();
    r.normal = interleave(normal);
    r.valid = valid;
    r.camera = camera.value();
    r.view_id = view_id;
    return r;
  }
};

// Bilinear upsampling positions of an hr x wr grid stretched over H x W pixels.
inline Tensor upsample_queries(std::size_t hr, std::size_t wr, std::size_t h, std::size_t w) {
  Tensor q(Shape{h * w, 2});
  const double fx = double(wr - 1) / double(w - 1), fy = double(hr - 1) / double(h - 1);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      q[2 * (r * w + c)] = std::min(double(c) * fx, double(wr - 1));
      q[2 * (r * w + c) + 1] = std::min(double(r) * fy, double(hr - 1));
    }
  }
  return q;
}

inline Tensor kron_rows(const Mat3& d) {
  // Row-major 9x9 matrix of X -> D X for X flattened row-major.
  Tensor m(Shape{9, 9}, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; ++k) m[(3 * i + j) * 9 + (3 * k + j)] = d[3 * i + k];
  return m;
}

inline CameraVar camera_var(const ModelVars& mv, int id, const PoseDelta* delta) {
  const ViewParams& vp = mv.params->view(id);
  const ViewVars& vv = mv.views.at(id);
  CameraVar cam;
  cam.rotation = rotation_matrix(vv.rotation);
  cam.translation = vv.translation;
  cam.focal = ad::exp(vv.log_focal);
  cam.cx = vp.cx;
  cam.cy = vp.cy;
  cam.width = vp.width;
  cam.height = vp.height;
  if (delta && !delta->is_zero()) {
    Tape& tape = *cam.rotation.tape;
    const Mat3 d = rotation_matrix(delta->rotation);
    cam.rotation = ad::matvec(kron_rows(d), cam.rotation);
    Tensor dm(Shape{3, 3}, std::vector<double>(d.begin(), d.end()));
    cam.translation = ad::matvec(dm, cam.translation) + tape.constant(vec3_tensor(delta->translation));
    cam.focal = cam.focal * std::exp(delta->log_focal_scale);
  }
  return cam;
}

inline Prediction predict_view(const ModelVars& mv, int id, const Conditioning* cond = nullptr) {
  const ViewParams& vp = mv.params->view(id);
  Tape& tape = *mv.grid.tape;
  Prediction p;
  p.view_id = id;
  p.camera = camera_var(mv, id, cond ? &cond->pose : nullptr);
  DepthVar dv = raymarch_depth(mv.grid, mv.params->extent, p.camera);
  Var depth = dv.depth;
  Mask valid = dv.valid;
  const ViewVars& vv = mv.views.at(id);
  if (vv.residual) {
    const Tensor& res = *vp.residual;
    Var q = tape.constant(upsample_queries(res.dim(0), res.dim(1), vp.height, vp.width));
    Var up = ad::reshape(ad::bilinear_sample(*vv.residual, q).values, Shape{vp.height, vp.width});
    depth = depth + up;
    for (std::size_t i = 0; i < valid.size(); ++i)
      if (valid[i] && !(depth.value()[i] > 0)) valid[i] = 0;
    depth = ad::where(valid, depth, 0.0);
  }
  NormalMapVar nm = normals_from_depth(depth, valid, p.camera.focal, vp.cx, vp.cy);
  p.valid = nm.valid;
  p.depth = ad::where(p.valid, depth, 0.0);
  p.normal = nm.normal;
  if (cond && cond->warp) {
    WarpedMapVars w = warp_blocks(p.depth, p.normal, p.valid, *cond->warp);
    p.depth = w.depth;
    p.normal = w.normal;
    p.valid = w.valid;
  }
  return p;
}

struct BatchInput {
  std::vector<int> view_ids;
  std::map<int, Conditioning> conditioning;  // absent: unperturbed

  void validate(const ModelParams& p) const {
    std::vector<int> ids = view_ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ContractError("batch: duplicate view id");
    for (int id : view_ids) p.view(id);
  }
};

inline std::vector<Prediction> forward(const ModelVars& mv, const BatchInput& batch) {
  batch.validate(*mv.params);
  std::vector<Prediction> out;
  for (int id : batch.view_ids) {
    auto it = batch.conditioning.find(id);
    out.push_back(predict_view(mv, id, it == batch.conditioning.end() ? nullptr : &it->second));
  }
  return out;
}

// Value-only forward on a private tape.
inline std::vector<ViewRecord> forward(const ModelParams& theta, const BatchInput& batch) {
  Tape tape;
  ModelVars mv = bind_model(tape, theta, none_trainable);
  std::vector<ViewRecord> out;
  for (const Prediction& p : forward(mv, batch)) out.push_back(p.record());
  return out;
}

inline ViewRecord forward_view(const ModelParams& theta, int id) { return forward(theta, BatchInput{{id}, {}}).at(0); }

// Depth-only render of the height grid from an arbitrary camera.
inline DepthVar render_grid_depth(Tape& tape, const ModelParams& theta, const CameraParams& cam) {
  Var grid = tape.constant(theta.height_grid);
  CameraVar cv{tape.constant(mat3_tensor(cam.pose.matrix())), tape.constant(vec3_tensor(cam.pose.translation)),
               tape.constant(Tensor::vector({cam.intrinsics.fx, cam.intrinsics.fy})),
               cam.intrinsics.cx, cam.intrinsics.cy, cam.intrinsics.width, cam.intrinsics.height};
  return raymarch_depth(grid, theta.extent, cv);
}

// ---------------------------------------------------------------------------
// View-level distances shared by prefit, registration and adaptation.

// d_cam + a_d * d_depth + a_n * d_normal against a fixed target view.
inline Var view_distance(const Prediction& p, const ViewRecord& ref, double a_d, double a_n, const CamWeights& cw,
                         DepthMode mode) {
  Var total = d_cam(p.camera, ref.camera, cw);
  const Mask m = mask_and(p.valid, ref.valid);
  if (mask_count(m) == 0) return total;
  if (a_d != 0) total = total + a_d * d_depth(p.depth, ref.depth, m, mode);
  if (a_n != 0) total = total + a_n * d_normal(p.normal, ref.normal, m);
  return total;
}

// ---------------------------------------------------------------------------
// Pre-fit.

// Cosine decay from `base` at step 0 towards zero at step `total`.
inline double cosine_rate(double base, int step, int total) {
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * double(step) / double(std::max(total, 1))));
}

struct PrefitConfig {
  int iterations = 150;
  double learning_rate = 0.01;
  std::size_t grid_rows = 33, grid_cols = 33;
  double rotation_noise = 1.0 / kDegPerRad;  // radians
  double translation_noise = 0.01;           // fraction of |t|
  std::uint64_t seed = 0;
  bool operator==(const PrefitConfig&) const = default;
};

struct PrefitResult {
  ModelParams theta;
  std::vector<CameraParams> init_cameras;  // the noisy initial cameras
  double initial_loss = 0, final_loss = 0;
};

// Grid heights from the median z of back-projected points near each node.
inline Tensor init_height_grid(const std::vector<ViewRecord>& views, const std::array<double, 4>& extent,
                               std::size_t rows, std::size_t cols) {
  const double cw = (extent[2] - extent[0]) / double(cols - 1), ch = (extent[3] - extent[1]) / double(rows - 1);
  std::vector<std::vector<double>> bins(rows * cols);
  std::vector<double> all;
  for (const ViewRecord& v : views) {
    const Tensor pts = unproject_depth_to_points(v, Frame::World);
    for (std::size_t i = 0; i < v.valid.size(); ++i) {
      if (!v.valid[i]) continue;
      const double x = pts[3 * i], y = pts[3 * i + 1], z = pts[3 * i + 2];
      all.push_back(z);
      const long c = std::lround((x - extent[0]) / cw), r = std::lround((y - extent[1]) / ch);
      if (c < 0 || r < 0 || c >= long(cols) || r >= long(rows)) continue;
      bins[std::size_t(r) * cols + std::size_t(c)].push_back(z);
    }
  }
  if (all.empty()) throw ContractError("prefit: no valid pixels");
  const double fallback = median(all);
  Tensor g(Shape{rows, cols}, fallback);
  for (std::size_t i = 0; i < bins.size(); ++i)
    if (!bins[i].empty()) g[i] = median(bins[i]);
  return g;
}

inline CameraParams perturb_camera(const CameraParams& c, Rng& rng, double rot, double trans_frac) {
  CameraParams out = c;
  if (rot > 0) {
    const Vec3 axis = normalized({rng.normal(), rng.normal(), rng.normal()});
    out.pose = compose(rotation_matrix(rot * axis), c.pose);
  }
  if (trans_frac > 0) {
    const Vec3 dir = normalized({rng.normal(), rng.normal(), rng.normal()});
    out.pose.translation = out.pose.translation + (trans_frac * norm3(c.pose.translation)) * dir;
  }
  return out;
}

inline PrefitResult prefit(const std::vector<ViewRecord>& captured, const std::array<double, 4>& extent,
                           const PrefitConfig& cfg) {
  if (captured.size() < 4) throw ContractError("prefit: needs at least 4 views");
  PrefitResult res;
  ModelParams& theta = res.theta;
  theta.extent = extent;
  theta.height_grid = init_height_grid(captured, extent, cfg.grid_rows, cfg.grid_cols);
  Rng rng(mix_seed(cfg.seed, 0x9ef1));
  for (const ViewRecord& v : captured) {
    const CameraParams init = perturb_camera(v.camera, rng, cfg.rotation_noise, cfg.translation_noise);
    res.init_cameras.push_back(init);
    theta.views.emplace(v.view_id, ViewParams::from_camera(init));
  }
  AdamState opt;
  const AdamWConfig acfg{cfg.learning_rate, 0.0};
  auto loss_and_grad = [&](GradientMap* grads) {
    Tape tape;
    ModelVars mv = bind_model(tape, theta);
    Var total = tape.constant(Tensor::scalar(0.0));
    for (std::size_t i = 0; i < captured.size(); ++i) {
      const ViewRecord& gt = captured[i];
      Prediction p = predict_view(mv, gt.view_id);
      const Mask m = mask_and(p.valid, gt.valid);
      Var l = d_cam(p.camera, res.init_cameras[i]);
      if (mask_count(m) > 0) l = l + d_depth(p.depth, gt.depth, m) + d_normal(p.normal, gt.normal, m);
      total = total + l;
    }
    if (!std::isfinite(total.item())) throw Error("prefit: loss diverged");
    if (grads) *grads = tape.backward(total);
    return total.item();
  };
  for (int it = 0; it < cfg.iterations; ++it) {
    GradientMap g;
    const double l = loss_and_grad(&g);
    if (it == 0) res.initial_loss = l;
    adamw_step(theta.blocks(), g, opt, AdamWConfig{cosine_rate(acfg.learning_rate, it, cfg.iterations), 0.0});
  }
  res.final_loss = loss_and_grad(nullptr);
  if (cfg.iterations == 0) res.initial_loss = res.final_loss;
  return res;
}

// ---------------------------------------------------------------------------
// Registration of the inserted view.

struct RegisterConfig {
  int iterations = 30;
  double learning_rate = 2e-3;
  double rotation_range = 5.0 / kDegPerRad;  // multi-start offsets about each camera axis
  double translation_range = 0.1;            // fraction of |t| along each camera axis
  std::size_t residual_rows = 16, residual_cols = 16;
  double residual_smoothness = 1e-3;
  DepthMode depth_mode = DepthMode::L1;  // SI leaves distance along the optical axis free
  double warning_threshold = 0.05;      // pose-only depth residual
  bool operator==(const RegisterConfig&) const = default;
};

struct RegisterResult {
  ModelParams theta;
  bool misaligned_warning = false;
  double pose_residual = 0;  // depth error after pose registration
  double residual_mean_abs = 0;  // mean |upsampled residual| over the co-valid pixels
  int best_start = 0;
};

// Least-squares coarse grid whose bilinear upsampling best matches `target`
// on `mask`, with a small membrane term so unobserved nodes interpolate.
inline Tensor fit_residual_grid(const Tensor& target, const Mask& mask, std::size_t hr, std::size_t wr,
                                double smooth) {
  const std::size_t h = target.dim(0), w = target.dim(1), n = hr * wr;
  const Tensor q = upsample_queries(hr, wr, h, w);
  std::vector<double> a(n * n, 0.0), rhs(n, 0.0);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!mask[i]) continue;
    const double x = q[2 * i], y = q[2 * i + 1];
    const std::size_t x0 = std::min<std::size_t>(std::size_t(x), wr - 2), y0 = std::min<std::size_t>(std::size_t(y), hr - 2);
    const double fx = x - double(x0), fy = y - double(y0);
    const std::size_t idx[4] = {y0 * wr + x0, y0 * wr + x0 + 1, (y0 + 1) * wr + x0, (y0 + 1) * wr + x0 + 1};
    const double wt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    for (int k = 0; k < 4; ++k) {
      rhs[idx[k]] += wt[k] * target[i];
      for (int l = 0; l < 4; ++l) a[idx[k] * n + idx[l]] += wt[k] * wt[l];
    }
  }
  auto couple = [&](std::size_t i, std::size_t j) {
    a[i * n + i] += smooth;
    a[j * n + j] += smooth;
    a[i * n + j] -= smooth;
    a[j * n + i] -= smooth;
  };
  for (std::size_t r = 0; r < hr; ++r)
    for (std::size_t c = 0; c < wr; ++c) {
      if (c + 1 < wr) couple(r * wr + c, r * wr + c + 1);
      if (r + 1 < hr) couple(r * wr + c, (r + 1) * wr + c);
    }
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1e-9;
  // Cholesky factorisation in place (lower triangle).
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0)) throw Error("residual fit: system not positive definite");
    d = std::sqrt(d);
    a[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / d;
    }
  }
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = rhs[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * y[k];
    y[i] = s / a[i * n + i];
  }
  Tensor x(Shape{hr, wr});
  for (std::size_t i = n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * x[k];
    x[i] = s / a[i * n + i];
  }
  return x;
}

inline RegisterResult register_inserted_view(const ModelParams& theta0, const ViewRecord& inserted,
                                             const RegisterConfig& cfg) {
  const int g = inserted.view_id;
  if (theta0.views.count(g)) throw ContractError("register: view id " + std::to_string(g) + " already in use");
  RegisterResult out;
  out.theta = theta0;
  const std::string pre = "view" + std::to_string(g) + ".";
  auto pose_only = [&](const std::string& n) { return n == pre + "rotation" || n == pre + "translation"; };

  auto evaluate_pose = [&](ModelParams& th, GradientMap* grads) {
    Tape tape;
    ModelVars mv = bind_model(tape, th, pose_only);
    Prediction p = predict_view(mv, g);
    const Mask m = mask_and(p.valid, inserted.valid);
    if (mask_count(m) < 16) return std::numeric_limits<double>::infinity();
    Var l = d_depth(p.depth, inserted.depth, m, cfg.depth_mode);
    if (grads) *grads = tape.backward(l);
    return l.item();
  };

  // Starts: the reported camera, then rotations and translations about each camera axis.
  const CameraParams reported = inserted.camera;
  std::vector<CameraParams> starts{reported};
  const double tn = norm3(reported.pose.translation);
  for (int axis = 0; axis < 3; ++axis) {
    for (double sgn : {-1.0, 1.0}) {
      Vec3 r{0, 0, 0};
      r[std::size_t(axis)] = sgn * cfg.rotation_range;
      CameraParams c = reported;
      c.pose = compose(rotation_matrix(r), reported.pose);
      starts.push_back(c);
    }
  }
  for (int axis = 0; axis < 3; ++axis) {
    for (double sgn : {-1.0, 1.0}) {
      Vec3 dt{0, 0, 0};
      dt[std::size_t(axis)] = sgn * cfg.translation_range * tn;
      CameraParams c = reported;
      c.pose.translation = c.pose.translation + dt;
      starts.push_back(c);
    }
  }
  double best = std::numeric_limits<double>::infinity();
  ViewParams best_params = ViewParams::from_camera(reported);
  for (std::size_t s = 0; s < starts.size(); ++s) {
    ModelParams th = theta0;
    th.views.emplace(g, ViewParams::from_camera(starts[s]));
    AdamState opt;
    ViewParams& vp = th.views.at(g);
    const NamedTensors blocks{{pre + "rotation", &vp.rotation}, {pre + "translation", &vp.translation}};
    double l = evaluate_pose(th, nullptr);
    if (!std::isfinite(l)) continue;
    for (int it = 0; it < cfg.iterations; ++it) {
      GradientMap grads;
      if (!std::isfinite(evaluate_pose(th, &grads))) break;
      adamw_step(blocks, grads, opt, AdamWConfig{cosine_rate(cfg.learning_rate, it, cfg.iterations), 0.0});
    }
    l = evaluate_pose(th, nullptr);
    if (l < best) {
      best = l;
      best_params = vp;
      out.best_start = int(s);
    }
  }
  if (!std::isfinite(best)) throw Error("register: inserted view does not overlap the reconstruction");
  out.pose_residual = best;
  out.misaligned_warning = best > cfg.warning_threshold;

  out.theta.views.emplace(g, best_params);
  const ViewRecord render = forward_view(out.theta, g);
  const Mask m = mask_and(render.valid, inserted.valid);
  Tensor disc(render.depth.shape(), 0.0);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) disc[i] = inserted.depth[i] - render.depth[i];
  out.theta.views.at(g).residual = fit_residual_grid(disc, m, cfg.residual_rows, cfg.residual_cols, cfg.residual_smoothness);
  const Tensor& res = *out.theta.views.at(g).residual;
  Tape tape;
  const Tensor up =
      ad::bilinear_sample(tape.constant(res), tape.constant(upsample_queries(res.dim(0), res.dim(1), render.camera.intrinsics.height,
                                                                             render.camera.intrinsics.width)))
          .values.value();
  double rs = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) rs += std::fabs(up[i]);
  out.residual_mean_abs = rs / double(std::max<std::size_t>(mask_count(m), 1));
  return out;
}

// ---------------------------------------------------------------------------
// Binary checkpoint.
//
// Layout (little-endian): "SXMP" magic, u32 version = 1, u64 rows, u64 cols,
// f64 x4 extent, rows*cols f64 grid, u64 view count, then per view in id
// order: i32 id, f64 cx, f64 cy, u64 width, u64 height, f64 x3 rotation,
// f64 x3 translation, f64 x2 log_focal, u8 has_residual, and if set
// u64 h, u64 w, h*w f64.

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace io {

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated stream");
  return v;
}

inline void put_doubles(std::ostream& os, const Tensor& t) {
  os.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.size() * sizeof(double)));
}

inline void get_doubles(std::istream& is, Tensor& t) {
  is.read(reinterpret_cast<char*>(t.data().data()), std::streamsize(t.size() * sizeof(double)));
  if (!is) throw IoError("checkpoint: truncated stream");
}

}  // namespace io

inline void write_model(std::ostream& os, const ModelParams& p) {
  os.write("SXMP", 4);
  io::put<std::uint32_t>(os, 1);
  io::put<std::uint64_t>(os, p.height_grid.dim(0));
  io::put<std::uint64_t>(os, p.height_grid.dim(1));
  for (double e : p.extent) io::put(os, e);
  io::put_doubles(os, p.height_grid);
  io::put<std::uint64_t>(os, p.views.size());
  for (const auto& [id, v] : p.views) {
    io::put<std::int32_t>(os, id);
    io::put(os, v.cx);
    io::put(os, v.cy);
    io::put<std::uint64_t>(os, v.width);
    io::put<std::uint64_t>(os, v.height);
    io::put_doubles(os, v.rotation);
    io::put_doubles(os, v.translation);
    io::put_doubles(os, v.log_focal);
    io::put<std::uint8_t>(os, v.residual ? 1 : 0);
    if (v.residual) {
      io::put<std::uint64_t>(os, v.residual->dim(0));
      io::put<std::uint64_t>(os, v.residual->dim(1));
      io::put_doubles(os, *v.residual);
    }
  }
}

inline ModelParams read_model(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SXMP", 4) != 0) throw IoError("checkpoint: bad magic");
  if (io::get<std::uint32_t>(is) != 1) throw IoError("checkpoint: unsupported version");
  ModelParams p;
  const auto rows = io::get<std::uint64_t>(is), cols = io::get<std::uint64_t>(is);
  if (rows < 2 || cols < 2 || rows * cols > (1u << 26)) throw IoError("checkpoint: bad grid shape");
  for (double& e : p.extent) e = io::get<double>(is);
  p.height_grid = Tensor(Shape{rows, cols});
  io::get_doubles(is, p.height_grid);
  const auto nviews = io::get<std::uint64_t>(is);
  for (std::uint64_t k = 0; k < nviews; ++k) {
    const int id = io::get<std::int32_t>(is);
    ViewParams v;
    v.cx = io::get<double>(is);
    v.cy = io::get<double>(is);
    v.width = io::get<std::uint64_t>(is);
    v.height = io::get<std::uint64_t>(is);
    io::get_doubles(is, v.rotation);
    io::get_doubles(is, v.translation);
    io::get_doubles(is, v.log_focal);
    if (io::get<std::uint8_t>(is)) {
      const auto h = io::get<std::uint64_t>(is), w = io::get<std::uint64_t>(is);
      if (h < 2 || w < 2 || h * w > (1u << 20)) throw IoError("checkpoint: bad residual shape");
      v.residual = Tensor(Shape{h, w});
      io::get_doubles(is, *v.residual);
    }
    p.views.emplace(id, std::move(v));
  }
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_model(os, p);
  if (!os) throw IoError("write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  try {
    return read_model(is);
  } catch (const IoError& e) {
    throw IoError(std::string(e.what()) + " (" + path + ")");
  }
}

}  // namespace scenex
