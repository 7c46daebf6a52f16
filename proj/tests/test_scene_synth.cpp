#include <gtest/gtest.h>

#include "scenex/scene_synth.hpp"

using namespace scenex;

namespace {

CameraParams nadir_camera(double h) {
  return CameraParams{Intrinsics{}, look_at({0, 0, h}, {0, 0, 0}, {0, 1, 0})};
}

SceneSpec demo_scene() {
  SceneSpec s;
  s.bumps = {{{0.5, -0.5}, 0.6, 0.8}, {{-1.5, 1.0}, -0.3, 0.7}};
  s.blocks = {{{-1.0, -2.0, 0.2, -1.0}, 0.4, 0.3}};
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b, const Mask& valid) {
  double m = 0;
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (valid[i]) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double depth_discrepancy(const InsertedView& iv) {
  double s = 0;
  for (std::size_t i = 0; i < iv.truth.valid.size(); ++i) {
    const double a = iv.observed.valid[i] ? iv.observed.depth[i] : 0.0;
    const double b = iv.truth.valid[i] ? iv.truth.depth[i] : 0.0;
    s += (a - b) * (a - b);
  }
  return std::sqrt(s);
}

}  // namespace

TEST(Scene, AnalyticField) {
  SceneSpec empty;
  empty.base_height = 0.7;
  HeightField f(empty);
  EXPECT_EQ(f.z(1.3, -2.0), 0.7);
  SceneSpec one;
  one.bumps = {{{1.0, 2.0}, 0.8, 0.5}};
  HeightField g(one);
  EXPECT_EQ(g.z(1.0, 2.0), 0.8);
  EXPECT_EQ(g.gradient(1.0, 2.0), (std::array<double, 2>{0.0, 0.0}));
}

TEST(Scene, AnalyticGradientMatchesFiniteDifferences) {
  HeightField f(demo_scene());
  Rng rng(2);
  for (int k = 0; k < 200; ++k) {
    const double x = rng.uniform(-3, 3), y = rng.uniform(-3, 3), h = 1e-6;
    const auto g = f.gradient(x, y);
    EXPECT_NEAR(g[0], (f.z(x + h, y) - f.z(x - h, y)) / (2 * h), 1e-6);
    EXPECT_NEAR(g[1], (f.z(x, y + h) - f.z(x, y - h)) / (2 * h), 1e-6);
  }
}

TEST(Scene, InvalidSpecRejected) {
  SceneSpec s;
  s.bumps = {{{0, 0}, 1.0, 0.0}};
  EXPECT_THROW(HeightField{s}, ContractError);
}

TEST(Scene, NadirFlatPlane) {
  HeightField f(SceneSpec{});
  const double h = 3.0;
  ViewRecord v = render_gt_view(f, nadir_camera(h));
  const std::size_t pp = 32 * 64 + 32;
  ASSERT_TRUE(v.valid[pp]);
  EXPECT_NEAR(v.depth[pp], h, 1e-4);
  for (std::size_t i = 0; i < v.valid.size(); ++i) {
    ASSERT_TRUE(v.valid[i]);
    EXPECT_NEAR(v.normal[3 * i], 0, 1e-6);
    EXPECT_NEAR(v.normal[3 * i + 1], 0, 1e-6);
    EXPECT_NEAR(v.normal[3 * i + 2], -1, 1e-6);
  }
}

TEST(Scene, ObliqueFlatPlaneMatchesClosedForm) {
  HeightField f(SceneSpec{});
  const double h = 2.0;
  const double t30 = std::tan(30.0 / kDegPerRad);
  CameraParams cam{Intrinsics{}, look_at({0, 0, h}, {h * t30, 0, 0})};
  ViewRecord v = render_gt_view(f, cam);
  const std::size_t pp = 32 * 64 + 32;
  ASSERT_TRUE(v.valid[pp]);
  EXPECT_NEAR(v.depth[pp], h / std::cos(30.0 / kDegPerRad), 1e-3);
  // Oracle for every pixel: intersect the ray with z = 0 in closed form.
  const Vec3 o = cam.pose.center();
  const Mat3 rt = transpose3(cam.pose.matrix());
  double worst = 0;
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t c = 0; c < 64; ++c) {
      const Vec3 d = matvec3(rt, {(double(c) - 32) / 100, (double(r) - 32) / 100, 1});
      const double s = -o[2] / d[2];
      const Vec3 p = o + s * d;
      if (!(s > 0) || std::fabs(p[0]) > 4 || std::fabs(p[1]) > 4) continue;
      ASSERT_TRUE(v.valid[r * 64 + c]);
      worst = std::max(worst, std::fabs(v.depth[r * 64 + c] - s));
    }
  }
  EXPECT_LE(worst, 1e-3);
}

TEST(Scene, CameraBelowSurfaceIsError) {
  SceneSpec s;
  s.base_height = 5;
  EXPECT_THROW(render_gt_view(HeightField(s), nadir_camera(3.0)), ContractError);
}

TEST(Scene, CaptureSet) {
  HeightField f(demo_scene());
  CaptureRig rig;
  rig.trajectory.kind = Trajectory::Kind::Orbit;
  auto views = make_capture_set(f, rig);
  ASSERT_EQ(views.size(), 6u);
  for (const auto& v : views) EXPECT_GE(valid_fraction(v), kMinCoverage);
  auto again = make_capture_set(f, rig);
  for (std::size_t i = 0; i < views.size(); ++i) {
    EXPECT_EQ(views[i].depth, again[i].depth);
    EXPECT_EQ(views[i].normal, again[i].normal);
    EXPECT_EQ(views[i].valid, again[i].valid);
    for (std::size_t j = 0; j < i; ++j) EXPECT_GT(d_cam(views[i].camera, views[j].camera), 0.0);
  }
}

TEST(Scene, CaptureVisibilityViolationNamesView) {
  HeightField f(demo_scene());
  CaptureRig rig;
  rig.trajectory.target = {30, 0, 0};  // looking far outside the scene
  try {
    make_capture_set(f, rig);
    FAIL() << "expected error";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("capture view 0"), std::string::npos);
  }
}

TEST(Scene, ZeroMisalignmentIsIdentity) {
  HeightField f(demo_scene());
  CameraParams cam{Intrinsics{}, look_at({5, 3, 4}, {0, 0, 0})};
  InsertedView iv = make_inserted_view(f, cam, MisalignmentSpec{}, 7);
  EXPECT_EQ(iv.observed.depth, iv.truth.depth);
  EXPECT_EQ(iv.observed.normal, iv.truth.normal);
  EXPECT_EQ(iv.observed.valid, iv.truth.valid);
  EXPECT_EQ(iv.observed.camera, cam);
}

TEST(Scene, PoseJitterHasConstructedAngle) {
  HeightField f(demo_scene());
  CameraParams cam{Intrinsics{}, look_at({5, 3, 4}, {0, 0, 0})};
  MisalignmentSpec mis;
  mis.jitter_rotation = 2.0 / kDegPerRad;
  mis.seed = 3;
  InsertedView iv = make_inserted_view(f, cam, mis, 7);
  EXPECT_EQ(iv.observed.camera, cam);
  EXPECT_NEAR(geodesic(iv.render_camera.pose.matrix(), cam.pose.matrix()), 2.0 * std::numbers::pi / 180, 1e-9);
}

TEST(Scene, BlobOffsetVisible) {
  HeightField f(demo_scene());
  CameraParams cam{Intrinsics{}, look_at({5, 3, 4}, {0, 0, 0})};
  MisalignmentSpec mis;
  mis.blob = ContentBlob{{30, 34}, 8, 0.6};
  InsertedView iv = make_inserted_view(f, cam, mis, 7);
  double m = 0;
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      const double du = double(c) - 30, dv = double(r) - 34;
      const std::size_t i = r * 64 + c;
      if (du * du + dv * dv < 64 && iv.observed.valid[i]) m = std::max(m, std::fabs(iv.observed.depth[i] - iv.truth.depth[i]));
    }
  EXPECT_GE(m, 0.3);
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    if (!iv.observed.valid[i]) continue;
    const double* n = &iv.observed.normal[3 * i];
    EXPECT_NEAR(n[0] * n[0] + n[1] * n[1] + n[2] * n[2], 1.0, 1e-6);
  }
}

TEST(Scene, MisalignmentMonotoneInAmplitude) {
  HeightField f(demo_scene());
  CameraParams cam{Intrinsics{}, look_at({5, 3, 4}, {0, 0, 0})};
  const std::vector<double> amps{0, 0.25, 0.5, 1, 2, 4};
  for (int channel = 0; channel < 4; ++channel) {
    double prev = -1;
    for (double a : amps) {
      MisalignmentSpec mis;
      mis.seed = 5;
      if (channel == 0) mis.jitter_rotation = a / kDegPerRad;
      if (channel == 1) mis.jitter_translation = 0.02 * a;
      if (channel == 2) mis.depth_warp = 0.025 * a;
      if (channel == 3) mis.blob = ContentBlob{{32, 32}, 8, 0.15 * a};
      const double d = depth_discrepancy(make_inserted_view(f, cam, mis, 7));
      EXPECT_GE(d, prev) << "channel " << channel << " amplitude " << a;
      prev = d;
    }
  }
}

TEST(Scene, CoverageOverlapOfSelfIsOne) {
  HeightField f(demo_scene());
  CameraParams cam{Intrinsics{}, look_at({5, 3, 4}, {0, 0, 0})};
  ViewRecord v = render_gt_view(f, cam);
  EXPECT_NEAR(coverage_overlap(v, {v}), 1.0, 1e-12);
  (void)max_abs_diff;
}
