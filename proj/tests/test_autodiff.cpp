#include <gtest/gtest.h>

#include <random>

#include "scenex/autodiff.hpp"
#include "scenex/rng.hpp"

using namespace scenex;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST(Autodiff, SquareValueAndGradient) {
  Tape tape;
  Var x = tape.parameter("x", Tensor::scalar(3.0));
  Var y = x * x;
  EXPECT_EQ(y.item(), 9.0);
  EXPECT_EQ(tape.backward(y).at("x").item(), 6.0);
}

TEST(Autodiff, MaskedMeanAndSum) {
  Tape tape;
  Var a = tape.constant(Tensor::vector({1, 2, 3}));
  EXPECT_EQ(ad::masked_mean(a, Mask{1, 1, 0}).item(), 1.5);
  Var ones = tape.constant(Tensor(Shape{2, 2}, 1.0));
  EXPECT_EQ(ad::sum(ones).item(), 4.0);
}

TEST(Autodiff, AbsSubgradient) {
  Tape tape;
  Var x = tape.parameter("x", Tensor::scalar(-2.0));
  Var z = tape.parameter("z", Tensor::scalar(0.0));
  Var y = ad::abs(x) + ad::abs(z);
  GradientMap g = tape.backward(y);
  EXPECT_EQ(g.at("x").item(), -1.0);
  EXPECT_EQ(g.at("z").item(), 0.0);
}

TEST(Autodiff, NonScalarRootIsContractError) {
  Tape tape;
  Var x = tape.parameter("x", Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(x * 2.0), ContractError);
}

TEST(Autodiff, UnreachableParameterGetsZeros) {
  Tape tape;
  Var x = tape.parameter("x", Tensor::scalar(1.0));
  tape.parameter("unused", Tensor(Shape{2, 3}, 5.0));
  GradientMap g = tape.backward(x * 4.0);
  EXPECT_EQ(g.at("unused"), Tensor(Shape{2, 3}, 0.0));
  EXPECT_EQ(g.at("x").item(), 4.0);
}

TEST(Autodiff, DomainErrors) {
  Tape tape;
  Var x = tape.constant(Tensor::vector({1.0, 0.0}));
  EXPECT_THROW(ad::log(x), DomainError);
  EXPECT_THROW(ad::sqrt(x), DomainError);
  Var n = tape.constant(Tensor::vector({-1.0}));
  EXPECT_THROW(ad::log(n), DomainError);
}

TEST(Autodiff, ShapeErrorNamesPrimitive) {
  Tape tape;
  Var a = tape.constant(Tensor::vector({1, 2, 3}));
  Var b = tape.constant(Tensor::vector({1, 2}));
  try {
    ad::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "add");
  }
  EXPECT_THROW(ad::masked_mean(a, Mask{1, 1}), ShapeError);
  EXPECT_THROW(ad::masked_mean(a, Mask{0, 0, 0}), DomainError);
}

TEST(Bilinear, InterpolationIdentities) {
  Tape tape;
  Tensor g(Shape{5, 5});
  for (std::size_t i = 0; i < 25; ++i) g[i] = double(i * i % 7);
  Var grid = tape.parameter("grid", g);
  // (x=2, y=3) is column 2, row 3.
  Var q = tape.constant(Tensor(Shape{1, 2}, std::vector<double>{2.0, 3.0}));
  EXPECT_EQ(ad::bilinear_sample(grid, q).values.item(), g.at(3, 2));

  Tensor two(Shape{2, 2}, std::vector<double>{0, 4, 0, 4});
  Var g2 = tape.constant(two);
  Var mid = tape.constant(Tensor(Shape{1, 2}, std::vector<double>{0.5, 0.0}));
  EXPECT_EQ(ad::bilinear_sample(g2, mid).values.item(), 2.0);
}

TEST(Bilinear, CornerWeightsSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    Var grid = tape.parameter("grid", random_tensor({4, 6}, rng, -1, 1));
    Var q = tape.constant(Tensor(Shape{1, 2}, std::vector<double>{rng.uniform(0, 5), rng.uniform(0, 3)}));
    Tensor gg = tape.backward(ad::sum(ad::bilinear_sample(grid, q).values)).at("grid");
    double s = 0;
    for (double v : gg.data()) s += v;
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Bilinear, OutOfRangeFlaggedAndExcluded) {
  Tape tape;
  Var grid = tape.parameter("grid", Tensor(Shape{3, 3}, 1.0));
  Var q = tape.parameter("q", Tensor(Shape{2, 2}, std::vector<double>{-0.5, 1.0, 1.0, 1.0}));
  ad::Sampled s = ad::bilinear_sample(grid, q);
  EXPECT_EQ(s.in_range, (Mask{0, 1}));
  EXPECT_EQ(s.values.value()[0], ad::kOutOfRange);
  GradientMap g = tape.backward(ad::sum(s.values));
  EXPECT_EQ(g.at("q")[0], 0.0);
  EXPECT_EQ(g.at("q")[1], 0.0);
  double total = 0;
  for (double v : g.at("grid").data()) total += v;
  EXPECT_EQ(total, 1.0);
}

TEST(Bilinear, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  ParamMap in;
  in["grid"] = random_tensor({5, 5}, rng, -2, 2);
  Tensor q(Shape{10, 2});
  for (std::size_t i = 0; i < 10; ++i) {
    // Keep queries off the cell boundaries where the query adjoint jumps.
    q[2 * i] = std::floor(rng.uniform(0, 4)) + rng.uniform(0.05, 0.95);
    q[2 * i + 1] = std::floor(rng.uniform(0, 4)) + rng.uniform(0.05, 0.95);
  }
  in["q"] = q;
  Expression f = [](Tape&, const VarMap& v) { return ad::mean(ad::bilinear_sample(v.at("grid"), v.at("q")).values); };
  GradCheckReport r = finite_diff_check(f, in, 1e-6, 1e-5);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(FiniteDiff, SquarePassesTightTolerance) {
  Expression f = [](Tape&, const VarMap& v) { return v.at("x") * v.at("x"); };
  GradCheckReport r = finite_diff_check(f, {{"x", Tensor::scalar(1.0)}}, 1e-6, 1e-6);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(FiniteDiff, WrongAdjointFails) {
  // Square with the adjoint 3x instead of 2x.
  Expression f = [](Tape& tape, const VarMap& v) {
    Var x = v.at("x");
    Tensor y = x.value();
    for (double& e : y.data()) e *= e;
    return ad::sum(tape.record("bad_square", std::move(y), {x}, [](const BackwardArgs& g) {
      for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.grad_in[0])[i] += g.grad_out[i] * 3.0 * (*g.in[0])[i];
    }));
  };
  GradCheckReport r = finite_diff_check(f, {{"x", Tensor::vector({0.7, -1.3})}}, 1e-6, 1e-3);
  EXPECT_FALSE(r.pass);
}

TEST(FiniteDiff, ScaleInvariantStyleDepthComposite) {
  // log-ratio minus a detached median, abs, masked mean on an 8x8 pair.
  Rng rng(5);
  Tensor ref = random_tensor({8, 8}, rng, 1, 3);
  Mask valid(64, 1);
  valid[3] = valid[17] = 0;
  ParamMap in{{"d", random_tensor({8, 8}, rng, 1, 3)}};
  Expression f = [&](Tape& tape, const VarMap& v) {
    Var diff = ad::log(v.at("d")) - ad::log(tape.constant(ref));
    std::vector<double> vals;
    for (std::size_t i = 0; i < 64; ++i)
      if (valid[i]) vals.push_back(diff.value()[i]);
    std::nth_element(vals.begin(), vals.begin() + 31, vals.end());
    const double hi = vals[31];
    const double lo = *std::max_element(vals.begin(), vals.begin() + 31);
    return ad::masked_mean(ad::abs(diff - 0.5 * (lo + hi)), valid);
  };
  GradCheckReport r = finite_diff_check(f, in, 1e-6, 1e-4);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Autodiff, LinearityOfBackward) {
  Rng rng(21);
  ParamMap in{{"x", random_tensor({6}, rng, 0.5, 2)}, {"y", random_tensor({6}, rng, 0.5, 2)}};
  auto f = [](const VarMap& v) { return ad::sum(ad::exp(v.at("x")) * v.at("y")); };
  auto g = [](const VarMap& v) { return ad::dot(ad::log(v.at("x")), ad::sqrt(v.at("y"))); };
  const double a = 1.7, b = -0.6;
  GradientMap gf, gg, gc;
  evaluate([&](Tape&, const VarMap& v) { return f(v); }, in, &gf);
  evaluate([&](Tape&, const VarMap& v) { return g(v); }, in, &gg);
  evaluate([&](Tape&, const VarMap& v) { return a * f(v) + b * g(v); }, in, &gc);
  for (const char* id : {"x", "y"}) {
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(gc.at(id)[i], a * gf.at(id)[i] + b * gg.at(id)[i], 1e-12);
    }
  }
}

TEST(Autodiff, ReplayIsBitIdentical) {
  Rng rng(8);
  ParamMap in{{"g", random_tensor({4, 4}, rng, -1, 1)}, {"q", Tensor(Shape{3, 2}, std::vector<double>{0.3, 1.2, 2.5, 0.7, 1.1, 2.9})}};
  Expression f = [](Tape&, const VarMap& v) {
    Var s = ad::bilinear_sample(v.at("g"), v.at("q")).values;
    return ad::mean(ad::exp(ad::sin(s)) * ad::cos(s));
  };
  GradientMap g1, g2;
  const double v1 = evaluate(f, in, &g1);
  const double v2 = evaluate(f, in, &g2);
  EXPECT_EQ(v1, v2);
  EXPECT_EQ(g1, g2);
}

TEST(Autodiff, SmoothCompositesAtRandomPoints) {
  Rng rng(99);
  Expression f = [](Tape&, const VarMap& v) {
    Var x = v.at("x"), y = v.at("y");
    Var a = ad::exp(ad::sin(x) * y) + ad::log(x * x + 1.0) / ad::sqrt(y * y + 2.0);
    Var b = ad::minimum(x, 10.0) * ad::maximum(y, -10.0) - ad::neg(ad::abs(x + 5.0));
    return ad::mean(a) + ad::dot(b, x) * 0.1 + ad::norm(y) + ad::masked_mean(ad::square(x), Mask{1, 0, 1});
  };
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    ParamMap in{{"x", random_tensor({3}, rng, -2, 2)}, {"y", random_tensor({3}, rng, -2, 2)}};
    GradCheckReport r = finite_diff_check(f, in, 1e-6, 1e-4);
    worst = std::max(worst, r.max_rel_error);
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Autodiff, GatherScatterWhereRoundTrip) {
  Tape tape;
  Var x = tape.parameter("x", Tensor::vector({1, 2, 3, 4}));
  Var g = ad::gather(x, {3, 1});
  Var s = ad::scatter(g, {0, 2}, Shape{2, 2}, -1.0);
  EXPECT_EQ(s.value(), Tensor(Shape{2, 2}, std::vector<double>{4, -1, 2, -1}));
  Var w = ad::where(Mask{1, 0, 1, 0}, s, 7.0);
  EXPECT_EQ(w.value(), Tensor(Shape{2, 2}, std::vector<double>{4, 7, 2, 7}));
  GradientMap gr = tape.backward(ad::sum(w));
  EXPECT_EQ(gr.at("x"), Tensor::vector({0, 1, 0, 1}));
}
