#pragma once

// Image-space fidelity (PSNR, SSIM) and geometric error reports for
// captured-view preservation, inserted-view fidelity and novel poses.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "scenex/geometry.hpp"
#include "scenex/surrogate.hpp"

namespace scenex {

inline constexpr double kPsnrCap = 99.0;

inline double psnr(const Tensor& a, const Tensor& b, const Mask& valid, double peak) {
  if (a.size() != b.size() || a.size() != valid.size()) {
    throw ShapeError("psnr", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (!(peak > 0)) throw ContractError("psnr: peak must be > 0");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!valid[i]) continue;
    s += (a[i] - b[i]) * (a[i] - b[i]);
    ++n;
  }
  if (n == 0) throw ContractError("psnr: empty valid mask");
  const double mse = s / double(n);
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

inline std::vector<double> ssim_kernel() {
  std::vector<double> k(kSsimWindow);
  const double c = double(kSsimWindow / 2);
  double s = 0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    k[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * kSsimSigma * kSsimSigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

// Mean SSIM over 11x11 Gaussian windows that lie entirely inside `valid`.
inline double ssim(const Tensor& a, const Tensor& b, const Mask& valid, double peak) {
  if (a.rank() != 2 || a.shape() != b.shape() || valid.size() != a.size()) {
    throw ShapeError("ssim", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (!(peak > 0)) throw ContractError("ssim: peak must be > 0");
  const std::size_t h = a.dim(0), w = a.dim(1);
  if (h < kSsimWindow || w < kSsimWindow) throw ContractError("ssim: image smaller than 11x11");
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  const std::vector<double> k = ssim_kernel();

  // Summed-area table of invalid pixels to test windows in O(1).
  std::vector<std::size_t> bad((h + 1) * (w + 1), 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      bad[(r + 1) * (w + 1) + c + 1] = bad[r * (w + 1) + c + 1] + bad[(r + 1) * (w + 1) + c] -
                                       bad[r * (w + 1) + c] + (valid[r * w + c] ? 0 : 1);
  auto window_bad = [&](std::size_t r0, std::size_t c0) {
    const std::size_t r1 = r0 + kSsimWindow, c1w = c0 + kSsimWindow;
    return bad[r1 * (w + 1) + c1w] - bad[r0 * (w + 1) + c1w] - bad[r1 * (w + 1) + c0] + bad[r0 * (w + 1) + c0];
  };

  double total = 0;
  std::size_t windows = 0;
  for (std::size_t r0 = 0; r0 + kSsimWindow <= h; ++r0) {
    for (std::size_t c0 = 0; c0 + kSsimWindow <= w; ++c0) {
      if (window_bad(r0, c0) != 0) continue;
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < kSsimWindow; ++i) {
        for (std::size_t j = 0; j < kSsimWindow; ++j) {
          const double wt = k[i] * k[j];
          const double x = a[(r0 + i) * w + c0 + j], y = b[(r0 + i) * w + c0 + j];
          ma += wt * x;
          mb += wt * y;
          saa += wt * x * x;
          sbb += wt * y * y;
          sab += wt * x * y;
        }
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  if (windows == 0) throw ContractError("ssim: no 11x11 window lies fully inside the valid mask");
  return total / double(windows);
}

// ---------------------------------------------------------------------------
// Geometric errors.

struct GeometricErrors {
  double si_depth = 0;
  double l1_depth = 0;
  double normal_mean_angle_deg = 0;
  double pose_geodesic_deg = 0;
  double trans_error = 0;
  bool operator==(const GeometricErrors&) const = default;
};

inline double normal_mean_angle_deg(const Tensor& hat, const Tensor& ref, const Mask& valid) {
  if (hat.size() != ref.size() || hat.size() != 3 * valid.size()) {
    throw ShapeError("normal_mean_angle_deg", shape_str(hat.shape()) + " vs " + shape_str(ref.shape()));
  }
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    const double c = hat[3 * i] * ref[3 * i] + hat[3 * i + 1] * ref[3 * i + 1] + hat[3 * i + 2] * ref[3 * i + 2];
    s += std::acos(std::clamp(c, -1.0, 1.0));
    ++n;
  }
  if (n == 0) throw ContractError("normal_mean_angle_deg: empty valid mask");
  return kDegPerRad * s / double(n);
}

// Depth and normal terms use pixels valid in both views.
inline GeometricErrors geometric_errors(const ViewRecord& pred, const ViewRecord& ref) {
  if (pred.depth.shape() != ref.depth.shape()) {
    throw ShapeError("geometric_errors", shape_str(pred.depth.shape()) + " vs " + shape_str(ref.depth.shape()));
  }
  const Mask m = mask_and(pred.valid, ref.valid);
  GeometricErrors e;
  e.si_depth = d_depth(pred.depth, ref.depth, m, DepthMode::ScaleInvariant);
  e.l1_depth = d_depth(pred.depth, ref.depth, m, DepthMode::L1);
  e.normal_mean_angle_deg = normal_mean_angle_deg(pred.normal, ref.normal, m);
  e.pose_geodesic_deg = kDegPerRad * geodesic(pred.camera.pose.matrix(), ref.camera.pose.matrix());
  e.trans_error = norm3(pred.camera.pose.translation - ref.camera.pose.translation);
  return e;
}

// Mean absolute difference between horizontally and vertically adjacent
// valid pixels.
inline double depth_total_variation(const Tensor& depth, const Mask& valid) {
  const std::size_t h = depth.dim(0), w = depth.dim(1);
  double s = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      if (!valid[i]) continue;
      if (c + 1 < w && valid[i + 1]) {
        s += std::fabs(depth[i + 1] - depth[i]);
        ++n;
      }
      if (r + 1 < h && valid[i + w]) {
        s += std::fabs(depth[i + w] - depth[i]);
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : s / double(n);
}

// ---------------------------------------------------------------------------
// Evaluation report.

struct DepthRange {
  double lo = 0, hi = 1;
  bool operator==(const DepthRange&) const = default;
};

// Min and max ground-truth depth over every valid pixel of the given views.
inline DepthRange scene_depth_range(const std::vector<ViewRecord>& views) {
  DepthRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const ViewRecord& v : views)
    for (std::size_t i = 0; i < v.pixels(); ++i)
      if (v.valid[i]) {
        r.lo = std::min(r.lo, v.depth[i]);
        r.hi = std::max(r.hi, v.depth[i]);
      }
  if (!(r.hi > r.lo)) throw ContractError("scene_depth_range: needs at least two distinct valid depths");
  return r;
}

inline Tensor normalize_depth(const Tensor& d, const DepthRange& r) {
  Tensor out(d.shape());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = std::clamp((d[i] - r.lo) / (r.hi - r.lo), 0.0, 1.0);
  return out;
}

struct PreservationEntry {
  int view_id = 0;
  double depth_psnr = 0, depth_ssim = 0;
  double si_depth = 0, normal_deg = 0, pose_deg = 0, trans_error = 0;
  bool operator==(const PreservationEntry&) const = default;
};

struct InsertionErrors {
  double si_depth = 0, l1_depth = 0, normal_deg = 0;
  bool operator==(const InsertionErrors&) const = default;
};

struct NovelPoseEntry {
  double valid_fraction = 0;
  double depth_tv = 0;
  bool operator==(const NovelPoseEntry&) const = default;
};

struct EvalAggregates {
  double depth_psnr = 0, depth_ssim = 0, si_depth = 0, normal_deg = 0, pose_deg = 0;
  double novel_valid_fraction = 0, novel_depth_tv = 0;
  bool operator==(const EvalAggregates&) const = default;
};

struct EvalReport {
  std::vector<PreservationEntry> preservation;
  InsertionErrors insertion_vs_observed;  // against I_g
  InsertionErrors insertion_vs_truth;     // against the clean render at the reported camera
  std::vector<NovelPoseEntry> novel_pose;
  EvalAggregates aggregates;
  bool operator==(const EvalReport&) const = default;
};

inline InsertionErrors insertion_errors(const ViewRecord& pred, const ViewRecord& target) {
  const GeometricErrors e = geometric_errors(pred, target);
  return InsertionErrors{e.si_depth, e.l1_depth, e.normal_mean_angle_deg};
}

inline EvalReport evaluate(const ModelParams& theta, const std::vector<ViewRecord>& captured_gt,
                           const ViewRecord& inserted_observed, const ViewRecord& inserted_truth,
                           const std::vector<CameraParams>& sweep) {
  if (captured_gt.empty()) throw ContractError("evaluate: no captured views");
  EvalReport rep;
  const DepthRange range = scene_depth_range(captured_gt);
  std::vector<int> ids;
  for (const ViewRecord& v : captured_gt) ids.push_back(v.view_id);
  const std::vector<ViewRecord> preds = forward(theta, BatchInput{ids, {}});
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const ViewRecord& p = preds[i];
    const ViewRecord& gt = captured_gt[i];
    const GeometricErrors e = geometric_errors(p, gt);
    const Mask m = mask_and(p.valid, gt.valid);
    const Tensor pn = normalize_depth(p.depth, range), gn = normalize_depth(gt.depth, range);
    PreservationEntry pe;
    pe.view_id = gt.view_id;
    pe.depth_psnr = psnr(pn, gn, m, 1.0);
    pe.depth_ssim = ssim(pn, gn, m, 1.0);
    pe.si_depth = e.si_depth;
    pe.normal_deg = e.normal_mean_angle_deg;
    pe.pose_deg = e.pose_geodesic_deg;
    pe.trans_error = e.trans_error;
    rep.preservation.push_back(pe);
  }
  const ViewRecord g = forward_view(theta, inserted_observed.view_id);
  rep.insertion_vs_observed = insertion_errors(g, inserted_observed);
  rep.insertion_vs_truth = insertion_errors(g, inserted_truth);
  for (const CameraParams& cam : sweep) {
    Tape tape;
    const DepthVar d = render_grid_depth(tape, theta, cam);
    NovelPoseEntry ne;
    ne.valid_fraction = double(mask_count(d.valid)) / double(d.valid.size());
    ne.depth_tv = depth_total_variation(d.depth.value(), d.valid);
    rep.novel_pose.push_back(ne);
  }

  EvalAggregates& a = rep.aggregates;
  const double n = double(rep.preservation.size());
  for (const PreservationEntry& pe : rep.preservation) {
    a.depth_psnr += pe.depth_psnr / n;
    a.depth_ssim += pe.depth_ssim / n;
    a.si_depth += pe.si_depth / n;
    a.normal_deg += pe.normal_deg / n;
    a.pose_deg += pe.pose_deg / n;
  }
  for (const NovelPoseEntry& ne : rep.novel_pose) {
    a.novel_valid_fraction += ne.valid_fraction / double(rep.novel_pose.size());
    a.novel_depth_tv += ne.depth_tv / double(rep.novel_pose.size());
  }
  return rep;
}

}  // namespace scenex
