#include <gtest/gtest.h>

#include "scenex/geometry.hpp"
#include "scenex/rng.hpp"

using namespace scenex;

namespace {

Vec3 random_axis_angle(Rng& rng, double max_angle) {
  Vec3 axis = normalized({rng.normal(), rng.normal(), rng.normal()});
  return rng.uniform(0, max_angle) * axis;
}

CameraParams random_camera(Rng& rng) {
  CameraParams c;
  c.pose.rotation = random_axis_angle(rng, 3.0);
  c.pose.translation = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
  c.intrinsics.fx = rng.uniform(80, 120);
  c.intrinsics.fy = rng.uniform(80, 120);
  return c;
}

}  // namespace

TEST(Geometry, ProjectExamples) {
  CameraParams cam;
  Projection p = project({0, 0, 2}, cam);
  EXPECT_TRUE(p.in_front);
  EXPECT_EQ(p.u, 32.0);
  EXPECT_EQ(p.v, 32.0);
  EXPECT_EQ(p.depth, 2.0);
  p = project({1, 0, 2}, cam);
  EXPECT_EQ(p.u, 82.0);
  EXPECT_EQ(p.v, 32.0);
  EXPECT_FALSE(project({0, 0, -1}, cam).in_front);
}

TEST(Geometry, ProjectUnprojectRoundTrip) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    CameraParams cam = random_camera(rng);
    const double u = rng.uniform(0, 63), v = rng.uniform(0, 63), d = rng.uniform(0.5, 10);
    Vec3 x = unproject(u, v, d, cam);
    Projection p = project(x, cam);
    EXPECT_NEAR(p.u, u, 1e-9);
    EXPECT_NEAR(p.v, v, 1e-9);
    EXPECT_NEAR(p.depth, d, 1e-9);
    Vec3 back = unproject(p.u, p.v, p.depth, cam);
    EXPECT_NEAR(norm3(back - x), 0.0, 1e-9);
  }
}

TEST(Geometry, RotationMatrixIsOrthonormal) {
  Rng rng(2);
  for (int k = 0; k < 100; ++k) {
    const Vec3 r = random_axis_angle(rng, 3.1);
    const Mat3 m = rotation_matrix(r);
    const Mat3 mtm = matmul3(transpose3(m), m);
    const Mat3 id = identity3();
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(mtm[i], id[i], 1e-10);
    const Vec3 back = axis_angle(m);
    EXPECT_NEAR(norm3(back - r), 0.0, 1e-8);
  }
}

TEST(Geometry, PointMapFrames) {
  ViewRecord view;
  view.depth = Tensor(Shape{64, 64}, 3.0);
  view.valid = Mask(64 * 64, 1);
  view.valid[5] = 0;
  Rng rng(4);
  view.camera = random_camera(rng);
  view.camera.intrinsics.fx = view.camera.intrinsics.fy = 100;
  Tensor cam = unproject_depth_to_points(view, Frame::Camera);
  Tensor world = unproject_depth_to_points(view, Frame::World);
  const std::size_t pp = 32 * 64 + 32;
  EXPECT_EQ(cam[3 * pp], 0.0);
  EXPECT_EQ(cam[3 * pp + 1], 0.0);
  EXPECT_EQ(cam[3 * pp + 2], 3.0);
  EXPECT_TRUE(std::isnan(cam[3 * 5]));
  // Oracle: x_world = R^T (x_cam - t), evaluated by hand.
  const Mat3 r = rotation_matrix(view.camera.pose.rotation);
  const Vec3 t = view.camera.pose.translation;
  for (std::size_t i = 0; i < 64 * 64; i += 97) {
    if (!view.valid[i]) continue;
    const Vec3 d{cam[3 * i] - t[0], cam[3 * i + 1] - t[1], cam[3 * i + 2] - t[2]};
    for (int a = 0; a < 3; ++a) {
      const double expect = r[a] * d[0] + r[3 + a] * d[1] + r[6 + a] * d[2];
      EXPECT_NEAR(world[3 * i + a], expect, 1e-12);
    }
  }
}

TEST(Geometry, NormalsOfFrontoParallelPlane) {
  Intrinsics k;
  Tensor depth(Shape{64, 64}, 2.5);
  NormalMap n = normals_from_depth(depth, Mask(64 * 64, 1), k);
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    ASSERT_TRUE(n.valid[i]);
    EXPECT_NEAR(n.normal[3 * i], 0.0, 1e-6);
    EXPECT_NEAR(n.normal[3 * i + 1], 0.0, 1e-6);
    EXPECT_NEAR(n.normal[3 * i + 2], -1.0, 1e-6);
  }
}

TEST(Geometry, NormalsOfTiltedPlane) {
  // Plane Z = d0 + Y tan(45deg) in camera coordinates.
  Intrinsics k;
  const double d0 = 4.0, tana = 1.0;
  Tensor depth(Shape{64, 64});
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) depth.at(r, c) = d0 / (1.0 - (double(r) - k.cy) / k.fy * tana);
  NormalMap n = normals_from_depth(depth, Mask(64 * 64, 1), k);
  const double s = std::sqrt(0.5);
  for (std::size_t r = 1; r + 1 < 64; ++r) {
    for (std::size_t c = 1; c + 1 < 64; ++c) {
      const std::size_t i = r * 64 + c;
      ASSERT_TRUE(n.valid[i]);
      EXPECT_NEAR(n.normal[3 * i], 0.0, 1e-3);
      EXPECT_NEAR(n.normal[3 * i + 1], s, 1e-3);
      EXPECT_NEAR(n.normal[3 * i + 2], -s, 1e-3);
      EXPECT_NEAR(std::acos(-n.normal[3 * i + 2]) * kDegPerRad, 45.0, 1e-3 * kDegPerRad);
    }
  }
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    const double len = std::sqrt(n.normal[3 * i] * n.normal[3 * i] + n.normal[3 * i + 1] * n.normal[3 * i + 1] +
                                 n.normal[3 * i + 2] * n.normal[3 * i + 2]);
    EXPECT_NEAR(len, 1.0, 1e-6);
  }
}

TEST(Geometry, DegenerateTangentsInvalid) {
  Intrinsics k;
  Tensor depth(Shape{64, 64}, 1.0);
  Mask valid(64 * 64, 0);
  valid[10 * 64 + 10] = 1;  // isolated pixel
  NormalMap n = normals_from_depth(depth, valid, k);
  EXPECT_EQ(mask_count(n.valid), 0u);
}

TEST(Geometry, CamDistanceExamples) {
  CameraParams a;
  EXPECT_EQ(d_cam(a, a), 0.0);
  CameraParams b = a;
  b.pose.rotation = {0, 0, std::numbers::pi / 2};
  EXPECT_NEAR(d_cam(b, a, CamWeights{1, 0, 0}), std::numbers::pi / 2, 1e-12);
  Rng rng(6);
  for (int k = 0; k < 20; ++k) {
    CameraParams x = random_camera(rng), y = random_camera(rng);
    // The focal term is relative to the reference; the rotation and translation terms are symmetric.
    EXPECT_NEAR(d_cam(x, y, CamWeights{1, 1, 0}), d_cam(y, x, CamWeights{1, 1, 0}), 1e-12);
    y.intrinsics = x.intrinsics;
    EXPECT_NEAR(d_cam(x, y), d_cam(y, x), 1e-12);
  }
}

TEST(Geometry, GeodesicRotationInvariance) {
  Rng rng(7);
  for (int k = 0; k < 100; ++k) {
    const Mat3 a = rotation_matrix(random_axis_angle(rng, 3.0));
    const Mat3 b = rotation_matrix(random_axis_angle(rng, 3.0));
    const Mat3 q = rotation_matrix(random_axis_angle(rng, 3.0));
    EXPECT_NEAR(geodesic(matmul3(q, a), matmul3(q, b)), geodesic(a, b), 1e-9);
  }
}

TEST(Geometry, DepthDistanceExamples) {
  Tensor ones = Tensor::vector({1, 3});
  Tensor twos = Tensor::vector({2, 2});
  Mask both{1, 1};
  EXPECT_EQ(d_depth(ones, ones, both, DepthMode::L1), 0.0);
  EXPECT_EQ(d_depth(ones, ones, both, DepthMode::ScaleInvariant), 0.0);
  EXPECT_EQ(d_depth(ones, twos, both, DepthMode::L1), 1.0);
  EXPECT_THROW(d_depth(ones, twos, Mask{0, 0}), ContractError);

  Rng rng(8);
  Tensor a(Shape{8, 8}), b(Shape{8, 8});
  for (std::size_t i = 0; i < 64; ++i) {
    a[i] = rng.uniform(0.5, 5);
    b[i] = rng.uniform(0.5, 5);
  }
  Mask valid(64, 1);
  valid[9] = 0;
  for (double c : {0.01, 0.5, 3.0, 1000.0}) {
    Tensor ca = a;
    for (double& v : ca.data()) v *= c;
    EXPECT_NEAR(d_depth(ca, a, valid), 0.0, 1e-9);
    EXPECT_NEAR(d_depth(ca, b, valid), d_depth(a, b, valid), 1e-9);
  }
}

TEST(Geometry, NormalDistanceExamples) {
  Tensor n(Shape{2, 2, 3}, 0.0);
  Tensor opp(Shape{2, 2, 3}, 0.0);
  Tensor orth(Shape{2, 2, 3}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    n[3 * i + 2] = -1;
    opp[3 * i + 2] = 1;
    orth[3 * i] = 1;
  }
  Mask all(4, 1);
  EXPECT_EQ(d_normal(n, n, all), 0.0);
  EXPECT_EQ(d_normal(n, opp, all), 2.0);
  EXPECT_EQ(d_normal(n, orth, all), 1.0);
  EXPECT_THROW(d_normal(n, n, Mask(4, 0)), ContractError);
}

TEST(Geometry, TapeRotationMatchesPlain) {
  Rng rng(9);
  for (int k = 0; k < 20; ++k) {
    const Vec3 r = random_axis_angle(rng, 3.0);
    Tape tape;
    Var m = rotation_matrix(tape.constant(vec3_tensor(r)));
    const Mat3 p = rotation_matrix(r);
    for (int i = 0; i < 9; ++i) EXPECT_EQ(m.value()[i], p[i]);
  }
  Tape tape;
  Var m = rotation_matrix(tape.constant(vec3_tensor({0, 0, 0})));
  for (int i = 0; i < 9; ++i) EXPECT_EQ(m.value()[i], identity3()[i]);
}

TEST(Geometry, DifferentiableDistancesMatchPlain) {
  Rng rng(10);
  CameraParams hat = random_camera(rng), ref = random_camera(rng);
  Tape tape;
  CameraVar cv{rotation_matrix(tape.constant(vec3_tensor(hat.pose.rotation))),
               tape.constant(vec3_tensor(hat.pose.translation)),
               tape.constant(Tensor::vector({hat.intrinsics.fx, hat.intrinsics.fy})),
               hat.intrinsics.cx, hat.intrinsics.cy, hat.intrinsics.width, hat.intrinsics.height};
  EXPECT_NEAR(d_cam(cv, ref).item(), d_cam(hat, ref), 1e-12);

  Tensor a(Shape{6, 6}), b(Shape{6, 6});
  for (std::size_t i = 0; i < 36; ++i) {
    a[i] = rng.uniform(1, 4);
    b[i] = rng.uniform(1, 4);
  }
  Mask valid(36, 1);
  valid[0] = 0;
  Var av = tape.constant(a);
  EXPECT_NEAR(d_depth(av, b, valid).item(), d_depth(a, b, valid), 1e-12);
  EXPECT_NEAR(d_depth(av, b, valid, DepthMode::L1).item(), d_depth(a, b, valid, DepthMode::L1), 1e-12);
}

TEST(Geometry, DistanceGradientsMatchFiniteDifferences) {
  Rng rng(12);
  const CameraParams ref = random_camera(rng);
  Tensor dref(Shape{6, 6}), nref(Shape{6, 6, 3});
  for (std::size_t i = 0; i < 36; ++i) {
    dref[i] = rng.uniform(1, 4);
    const Vec3 n = normalized({rng.normal(), rng.normal(), rng.normal()});
    for (int c = 0; c < 3; ++c) nref[3 * i + c] = n[c];
  }
  Mask valid(36, 1);
  valid[7] = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ParamMap in;
    in["r"] = vec3_tensor(random_axis_angle(rng, 2.5));
    in["t"] = vec3_tensor({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    in["f"] = Tensor::vector({rng.uniform(80, 120), rng.uniform(80, 120)});
    Tensor d(Shape{6, 6});
    for (double& v : d.data()) v = rng.uniform(1, 4);
    in["d"] = d;
    Tensor n(Shape{6, 6, 3});
    for (double& v : n.data()) v = rng.uniform(-1, 1);
    in["nx"] = Tensor(Shape{6, 6});
    in["ny"] = Tensor(Shape{6, 6});
    in["nz"] = Tensor(Shape{6, 6});
    for (std::size_t i = 0; i < 36; ++i) {
      in["nx"][i] = n[3 * i];
      in["ny"][i] = n[3 * i + 1];
      in["nz"][i] = n[3 * i + 2];
    }
    Expression f = [&](Tape&, const VarMap& v) {
      CameraVar cv{rotation_matrix(v.at("r")), v.at("t"), v.at("f"), 32, 32, 64, 64};
      Var l = d_cam(cv, ref) + 0.2 * d_depth(v.at("d"), dref, valid) +
              0.3 * d_depth(v.at("d"), dref, valid, DepthMode::L1) +
              0.2 * d_normal(NormalVars{v.at("nx"), v.at("ny"), v.at("nz")}, nref, valid);
      return l;
    };
    GradCheckReport r = finite_diff_check(f, in, 1e-6, 1e-4);
    EXPECT_TRUE(r.pass) << "trial " << trial << " err " << r.max_rel_error;
  }
}

TEST(Geometry, DifferentiableNormalsMatchPlainAndFiniteDifferences) {
  Rng rng(13);
  Intrinsics k;
  k.width = k.height = 8;
  k.cx = k.cy = 3.5;
  k.fx = k.fy = 10;
  Tensor depth(Shape{8, 8});
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) depth.at(r, c) = 3.0 + 0.2 * std::sin(0.7 * double(r)) + 0.1 * double(c) * 0.3;
  Mask valid(64, 1);
  valid[20] = 0;
  const NormalMap plain = normals_from_depth(depth, valid, k);
  Tape tape;
  NormalMapVar nv = normals_from_depth(tape.constant(depth), valid, tape.constant(Tensor::vector({k.fx, k.fy})), k.cx, k.cy);
  EXPECT_EQ(nv.valid, plain.valid);
  const Tensor inter = interleave(nv.normal);
  for (std::size_t i = 0; i < inter.size(); ++i) EXPECT_NEAR(inter[i], plain.normal[i], 1e-12);

  Tensor nref(Shape{8, 8, 3});
  for (std::size_t i = 0; i < 64; ++i) {
    const Vec3 n = normalized({rng.normal(), rng.normal(), rng.normal()});
    for (int c = 0; c < 3; ++c) nref[3 * i + c] = n[c];
  }
  ParamMap in{{"d", depth}, {"f", Tensor::vector({k.fx, k.fy})}};
  Expression f = [&](Tape&, const VarMap& v) {
    NormalMapVar m = normals_from_depth(v.at("d"), valid, v.at("f"), k.cx, k.cy);
    return d_normal(m.normal, nref, m.valid);
  };
  GradCheckReport r = finite_diff_check(f, in, 1e-6, 1e-4);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}
