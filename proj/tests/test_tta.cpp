#include <gtest/gtest.h>

#include <sstream>

#include "scenex/scene_synth.hpp"
#include "scenex/tta.hpp"

using namespace scenex;

namespace {

constexpr int kInserted = 100;

struct Fixture {
  std::vector<ViewRecord> captured;
  InsertedView inserted;
  ModelParams theta0_plus;
  TTAProblem problem;
};

// Small, fast problem: 32x32 views, short prefit and registration.
const Fixture& problem() {
  static const Fixture f = [] {
    const SceneSpec spec = procedural_scene(5);
    const HeightField field = build_scene(spec);
    CaptureRig rig;
    rig.intrinsics = Intrinsics{50, 50, 16, 16, 32, 32};
    std::vector<ViewRecord> cap = make_capture_set(field, rig);
    PrefitConfig pc;
    pc.iterations = 30;
    pc.grid_rows = pc.grid_cols = 17;
    const PrefitResult fit = prefit(cap, spec.extent, pc);
    MisalignmentSpec mis;
    mis.jitter_rotation = 1.0 / kDegPerRad;
    mis.depth_warp = 0.05;
    mis.seed = 5;
    const CameraParams icam{rig.intrinsics, look_at({4.5, 1.5, 4}, {3, 0, 0})};
    InsertedView ins = make_inserted_view(field, icam, mis, kInserted);
    RegisterConfig rc;
    rc.iterations = 10;
    const RegisterResult reg = register_inserted_view(fit.theta, ins.observed, rc);
    std::vector<int> ids;
    for (const ViewRecord& v : cap) ids.push_back(v.view_id);
    TTAProblem prob{ids, ins.observed};
    return Fixture{std::move(cap), std::move(ins), reg.theta, std::move(prob)};
  }();
  return f;
}

TTAConfig quick_config(int steps) {
  TTAConfig c;
  c.steps = steps;
  c.seed = 9;
  return c;
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  std::vector<const Tensor*> tb;
  b.for_each_block([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  double m = 0;
  std::size_t k = 0;
  a.for_each_block([&](const std::string&, const Tensor& t) {
    const Tensor& u = *tb[k++];
    for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::fabs(t[i] - u[i]));
  });
  return m;
}

bool same_record(const ViewRecord& a, const ViewRecord& b) {
  return a.depth == b.depth && a.normal == b.normal && a.valid == b.valid && a.camera == b.camera;
}

ModelParams constant_model(double v) {
  ModelParams p;
  p.height_grid = Tensor(Shape{4, 4}, v);
  ViewParams vp = ViewParams::from_camera(CameraParams{Intrinsics{}, look_at({0, -5, 4}, {0, 0, 0})});
  vp.rotation = Tensor(Shape{3}, v);
  vp.translation = Tensor(Shape{3}, v);
  vp.log_focal = Tensor(Shape{2}, v);
  p.views.emplace(0, vp);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Anchor references.

TEST(Tta, AnchorRefsEqualModelForward) {
  const Fixture& f = problem();
  const AnchorRefs refs = precompute_anchor_refs(f.theta0_plus, f.problem.captured_ids);
  ASSERT_EQ(refs.size(), f.captured.size());
  EXPECT_EQ(refs.count(kInserted), 0u);
  for (int id : f.problem.captured_ids) EXPECT_TRUE(same_record(refs.at(id), forward_view(f.theta0_plus, id)));
  EXPECT_EQ(checksum(refs), checksum(precompute_anchor_refs(f.theta0_plus, f.problem.captured_ids)));
}

// ---------------------------------------------------------------------------
// Batch sampling.

TEST(Tta, SampleBatchHonoursInsertProbabilityExtremes) {
  const Intrinsics k{50, 50, 16, 16, 32, 32};
  TTAConfig c;
  Rng rng(1);
  c.insert_prob = 0;
  for (int i = 0; i < 200; ++i) EXPECT_FALSE(sample_batch(rng, 6, c, k).insert);
  c.insert_prob = 1;
  for (int i = 0; i < 200; ++i) EXPECT_TRUE(sample_batch(rng, 6, c, k).insert);
}

TEST(Tta, SampleBatchFrequencies) {
  const Intrinsics k{50, 50, 16, 16, 32, 32};
  TTAConfig c;
  c.augment.mode_weights = {1, 0, 0, 0};
  Rng rng(2);
  const int draws = 10000;
  int inserts = 0;
  std::map<std::size_t, int> sizes;
  for (int i = 0; i < draws; ++i) {
    const BatchSample b = sample_batch(rng, 6, c, k);
    inserts += b.insert;
    ++sizes[b.subset.size()];
    ASSERT_EQ(b.augment.size(), b.subset.size());
    std::vector<std::size_t> s = b.subset;
    std::sort(s.begin(), s.end());
    ASSERT_TRUE(std::adjacent_find(s.begin(), s.end()) == s.end());
    ASSERT_LT(s.back(), 6u);
  }
  const double pi = double(inserts) / draws;
  EXPECT_GE(pi, 0.48);
  EXPECT_LE(pi, 0.52);
  ASSERT_EQ(sizes.size(), 3u);
  for (std::size_t s : {3u, 4u, 5u}) {
    const double fr = double(sizes[s]) / draws;
    EXPECT_GE(fr, 0.31) << "size " << s;
    EXPECT_LE(fr, 0.36) << "size " << s;
  }
}

TEST(Tta, ConfigRejectsBadSubsetSizes) {
  TTAConfig c;
  c.subset_sizes = {2};
  EXPECT_THROW(c.validate(6), ContractError);
  c.subset_sizes = {7};
  EXPECT_THROW(c.validate(6), ContractError);
  c.subset_sizes = {6};
  EXPECT_NO_THROW(c.validate(6));
  EXPECT_THROW(TTAConfig{}.validate(3), ContractError);
}

// ---------------------------------------------------------------------------
// Losses.

TEST(Tta, AnchorLossZeroAtReferenceParameters) {
  const Fixture& f = problem();
  const AnchorRefs refs = precompute_anchor_refs(f.theta0_plus, f.problem.captured_ids);
  Tape tape;
  const ModelVars mv = bind_model(tape, f.theta0_plus);
  BatchInput b{f.problem.captured_ids, {}};
  b.view_ids.push_back(kInserted);
  const auto preds = forward(mv, b);
  // References store the pose as axis-angle; the round trip costs ~1e-14.
  EXPECT_NEAR(anchor_loss(preds, refs, kInserted, 0.2, 0.2).item(), 0.0, 1e-12);
}

TEST(Tta, AnchorLossWithZeroWeightsIsCameraDistance) {
  const Fixture& f = problem();
  const AnchorRefs refs = precompute_anchor_refs(f.theta0_plus, f.problem.captured_ids);
  ModelParams moved = f.theta0_plus;
  for (auto& [id, v] : moved.views) {
    v.translation[0] += 0.05;
    v.rotation[1] += 0.01;
  }
  Tape tape;
  const ModelVars mv = bind_model(tape, moved);
  const std::vector<int> ids{f.problem.captured_ids[0], f.problem.captured_ids[2], kInserted};
  const auto preds = forward(mv, BatchInput{ids, {}});
  double expected = 0;
  for (int id : {ids[0], ids[1]}) expected += d_cam(moved.view(id).camera(), refs.at(id).camera);
  EXPECT_NEAR(anchor_loss(preds, refs, kInserted, 0, 0).item(), expected, 1e-10);
  EXPECT_GT(expected, 0.0);
  EXPECT_GT(anchor_loss(preds, refs, kInserted, 0.2, 0.2).item(), expected);
}

TEST(Tta, AnchorLossNeedsReferences) {
  const Fixture& f = problem();
  AnchorRefs refs = precompute_anchor_refs(f.theta0_plus, f.problem.captured_ids);
  refs.erase(f.problem.captured_ids[1]);
  Tape tape;
  const auto preds = forward(bind_model(tape, f.theta0_plus), BatchInput{f.problem.captured_ids, {}});
  EXPECT_THROW(anchor_loss(preds, refs, kInserted, 0.2, 0.2), ContractError);
}

TEST(Tta, GenLossZeroWhenStudentEqualsTeacher) {
  const Fixture& f = problem();
  Tape tape;
  const auto preds = forward(bind_model(tape, f.theta0_plus), BatchInput{{0, kInserted}, {}});
  const ViewRecord teacher = forward_view(f.theta0_plus, kInserted);
  EXPECT_NEAR(gen_loss(preds, kInserted, teacher, 1, 1).item(), 0.0, 1e-12);
  Tape tape2;
  const auto no_g = forward(bind_model(tape2, f.theta0_plus), BatchInput{{0}, {}});
  EXPECT_THROW(gen_loss(no_g, kInserted, teacher, 1, 1), ContractError);
}

TEST(Tta, GenLossWithZeroWeightsIsCameraDistance) {
  const Fixture& f = problem();
  ModelParams teacher_p = f.theta0_plus;
  teacher_p.views.at(kInserted).translation[2] += 0.1;
  teacher_p.height_grid[5] += 0.3;
  const ViewRecord teacher = forward_view(teacher_p, kInserted);
  Tape tape;
  const auto preds = forward(bind_model(tape, f.theta0_plus), BatchInput{{kInserted}, {}});
  const double cam = d_cam(f.theta0_plus.view(kInserted).camera(), teacher.camera);
  EXPECT_NEAR(gen_loss(preds, kInserted, teacher, 0, 0).item(), cam, 1e-10);
  EXPECT_GT(gen_loss(preds, kInserted, teacher, 1, 1).item(), cam);
}

TEST(Tta, NoGradientReachesTeacher) {
  const Fixture& f = problem();
  ModelParams student = f.theta0_plus;
  student.height_grid[40] += 0.2;
  student.views.at(kInserted).translation[0] += 0.05;
  Tape tape;
  const ModelVars sv = bind_model(tape, student);
  const ModelVars tv = bind_model(tape, f.theta0_plus, all_trainable, "teacher.");
  const ViewRecord teacher = predict_view(tv, kInserted).record();
  const auto preds = forward(sv, BatchInput{{kInserted}, {}});
  const Var loss = gen_loss(preds, kInserted, teacher, 1, 1);
  ASSERT_GT(loss.item(), 0.0);
  const GradientMap grads = tape.backward(loss);
  double student_norm = 0;
  for (const auto& [name, g] : grads) {
    double s = 0;
    for (std::size_t i = 0; i < g.size(); ++i) s += std::fabs(g[i]);
    if (name.rfind("teacher.", 0) == 0) {
      EXPECT_EQ(s, 0.0) << name;
    } else {
      student_norm += s;
    }
  }
  EXPECT_GT(student_norm, 0.0);
}

TEST(Tta, HardSupervisionZeroOnOwnPrediction) {
  const Fixture& f = problem();
  Tape tape;
  const auto preds = forward(bind_model(tape, f.theta0_plus), BatchInput{{kInserted}, {}});
  const ViewRecord self = forward_view(f.theta0_plus, kInserted);
  EXPECT_NEAR(hard_supervision_loss(preds, self).item(), 0.0, 1e-12);
  EXPECT_GT(hard_supervision_loss(preds, f.problem.inserted).item(), 0.0);
}

TEST(Tta, RegLossValues) {
  const ModelParams a = constant_model(1.0);
  EXPECT_EQ(reg_loss(a, a), 0.0);
  const ModelParams b = constant_model(3.0);
  const double n = double(a.parameter_count());
  EXPECT_NEAR(reg_loss(a, b), 4.0, 1e-12);
  EXPECT_EQ(reg_loss(a, b), reg_loss(b, a));
  ModelParams c = a;
  c.height_grid[0] = 3.0;
  EXPECT_NEAR(reg_loss(c, a), 4.0 / n, 1e-15);
  Tape tape;
  const ModelVars mv = bind_model(tape, c);
  EXPECT_NEAR(reg_loss(mv, a).item(), reg_loss(c, a), 1e-15);
  ModelParams d = a;
  d.height_grid = Tensor(Shape{5, 4}, 1.0);
  EXPECT_THROW(reg_loss(d, a), ShapeError);
}

// ---------------------------------------------------------------------------
// Parameter-space updates.

TEST(Tta, AdamWFirstStepMovesByLearningRate) {
  Tensor x(Shape{2}, std::vector<double>{1.0, -2.0});
  AdamState st;
  const GradientMap g{{"x", Tensor(Shape{2}, std::vector<double>{0.5, -3.0})}};
  adamw_step({{"x", &x}}, g, st, AdamWConfig{0.1, 0.0});
  EXPECT_NEAR(x[0], 0.9, 1e-7);
  EXPECT_NEAR(x[1], -1.9, 1e-7);
  Tensor y(Shape{1}, 2.0);
  AdamState sy;
  adamw_step({{"y", &y}}, GradientMap{{"y", Tensor(Shape{1}, 0.0)}}, sy, AdamWConfig{0.1, 0.5});
  EXPECT_NEAR(y[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-12);
  EXPECT_THROW(adamw_step({{"y", &y}}, GradientMap{}, sy, AdamWConfig{}), ContractError);
  const double before = y[0];
  EXPECT_THROW(adamw_step({{"y", &y}}, GradientMap{{"y", Tensor(Shape{1}, std::nan(""))}}, sy, AdamWConfig{}), Error);
  EXPECT_EQ(y[0], before);
}

TEST(Tta, EmaUpdate) {
  ModelParams ema = constant_model(0.0);
  const ModelParams s = constant_model(1.0);
  ema_update(ema, s, 0.9);
  EXPECT_NEAR(ema.height_grid[3], 0.1, 1e-15);
  EXPECT_NEAR(ema.view(0).translation[1], 0.1, 1e-15);
  ModelParams e2 = constant_model(0.0);
  ema_update(e2, s, 0.0);
  EXPECT_EQ(e2, s);
  // Repeated updates toward a fixed student close the gap geometrically.
  ModelParams e3 = constant_model(0.0);
  for (int k = 1; k <= 20; ++k) {
    ema_update(e3, s, 0.8);
    EXPECT_NEAR(1.0 - e3.height_grid[0], std::pow(0.8, k), 1e-12);
  }
}

TEST(Tta, StochasticRestore) {
  const ModelParams theta0 = constant_model(0.0);
  ModelParams s = constant_model(1.0);
  Rng rng(3);
  EXPECT_EQ(stochastic_restore(s, theta0, 0.0, rng), 0u);
  EXPECT_EQ(s, constant_model(1.0));
  EXPECT_EQ(stochastic_restore(s, theta0, 1.0, rng), s.parameter_count());
  EXPECT_EQ(s, theta0);
  EXPECT_THROW(stochastic_restore(s, theta0, 1.5, rng), ContractError);

  ModelParams big;
  big.height_grid = Tensor(Shape{1000, 1000}, 1.0);
  ModelParams big0;
  big0.height_grid = Tensor(Shape{1000, 1000}, 0.0);
  const std::size_t n = stochastic_restore(big, big0, 1e-3, rng);
  EXPECT_GE(n, 800u);
  EXPECT_LE(n, 1200u);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < big.height_grid.size(); ++i) zeros += big.height_grid[i] == 0.0;
  EXPECT_EQ(zeros, n);
}

// ---------------------------------------------------------------------------
// The loop.

TEST(Tta, ZeroStepsReturnsInput) {
  const Fixture& f = problem();
  const TTAResult r = run_tta(f.theta0_plus, f.problem, quick_config(0));
  EXPECT_TRUE(r.traces.empty());
  EXPECT_EQ(r.theta_star, f.theta0_plus);
}

TEST(Tta, AnchorTermPullsPerturbedStudentBack) {
  const Fixture& f = problem();
  TTAConfig c = quick_config(1);
  c.lambda_gen = 0;
  c.insert_prob = 0;
  c.weight_decay = 0;
  c.restore_rate = 0;
  c.learning_rate = 2e-3;
  c.augment.mode_weights = {1, 0, 0, 0};
  TTAState s = init_tta(f.theta0_plus, f.problem, c);
  for (auto& [id, v] : s.student.views) v.translation[0] += 0.02;
  for (std::size_t i = 0; i < s.student.height_grid.size(); i += 3) s.student.height_grid[i] += 0.05;
  std::vector<double> totals;
  for (int t = 0; t < 25; ++t) {
    const StepTrace tr = tta_step(s, f.problem, c);
    totals.push_back(tr.loss_anchor / double(tr.subset.size()));
  }
  const double first = (totals[0] + totals[1] + totals[2]) / 3;
  const double last = (totals[22] + totals[23] + totals[24]) / 3;
  EXPECT_LT(last, 0.7 * first);
}

TEST(Tta, RunIsDeterministic) {
  const Fixture& f = problem();
  const TTAConfig c = quick_config(8);
  const TTAResult a = run_tta(f.theta0_plus, f.problem, c);
  const TTAResult b = run_tta(f.theta0_plus, f.problem, c);
  EXPECT_EQ(a.theta_star, b.theta_star);
  EXPECT_EQ(a.traces, b.traces);
  TTAConfig other = c;
  other.seed = 10;
  EXPECT_NE(run_tta(f.theta0_plus, f.problem, other).traces, a.traces);
}

TEST(Tta, LoopInvariants) {
  const Fixture& f = problem();
  TTAConfig c = quick_config(20);
  c.restore_period = 4;
  c.restore_rate = 0.05;
  TTAState s = init_tta(f.theta0_plus, f.problem, c);
  const std::uint64_t refs = checksum(s.anchor_refs);
  const ModelParams theta0 = s.theta0;
  int inserts = 0;
  for (int t = 0; t < c.steps; ++t) {
    const StepTrace tr = tta_step(s, f.problem, c);
    EXPECT_EQ(tr.step, t + 1);
    EXPECT_EQ(checksum(s.anchor_refs), refs);
    EXPECT_EQ(s.theta0, theta0);
    if (!tr.inserted) {
      EXPECT_EQ(tr.loss_gen, 0.0);
    }
    inserts += tr.inserted;
    EXPECT_EQ(tr.restored, tr.step % 4 == 0);
    if (!tr.restored) {
      EXPECT_EQ(tr.restored_count, 0u);
    }
    EXPECT_NEAR(tr.total, objective_total(c, tr.loss_anchor, tr.loss_gen, tr.loss_reg), 1e-12);
    EXPECT_EQ(tr.aug_modes.size(), tr.subset.size());
    EXPECT_GE(tr.subset.size(), 3u);
    EXPECT_LE(tr.subset.size(), 5u);
  }
  EXPECT_GT(inserts, 0);
  EXPECT_LT(inserts, c.steps);
}

TEST(Tta, TeacherFrozenInMomentumLimit) {
  const Fixture& f = problem();
  TTAConfig c = quick_config(6);
  c.ema_momentum = 1.0 - 1e-12;
  c.insert_prob = 1.0;
  TTAState s = init_tta(f.theta0_plus, f.problem, c);
  for (int t = 0; t < c.steps; ++t) tta_step(s, f.problem, c);
  EXPECT_LT(max_abs_diff(s.ema_teacher, s.theta0), 1e-12);
  EXPECT_GT(max_abs_diff(s.student, s.theta0), 1e-6);
  c.ema_momentum = 1.0;
  EXPECT_THROW(c.validate(6), ContractError);
}

TEST(Tta, CheckpointResumeMatchesUninterruptedRun) {
  const Fixture& f = problem();
  TTAConfig c = quick_config(10);
  c.restore_period = 3;
  c.restore_rate = 0.01;
  const TTAResult full = run_tta(f.theta0_plus, f.problem, c);

  TTAState s = init_tta(f.theta0_plus, f.problem, c);
  std::vector<StepTrace> traces;
  for (int t = 0; t < 4; ++t) traces.push_back(tta_step(s, f.problem, c));
  std::stringstream buf;
  write_tta_state(buf, s);
  TTAState r = read_tta_state(buf, f.problem.captured_ids);
  EXPECT_EQ(r.step, 4);
  EXPECT_EQ(r.optimizer, s.optimizer);
  EXPECT_EQ(r.rng, s.rng);
  EXPECT_EQ(checksum(r.anchor_refs), checksum(s.anchor_refs));
  for (int t = 4; t < c.steps; ++t) traces.push_back(tta_step(r, f.problem, c));
  EXPECT_EQ(r.student, full.theta_star);
  EXPECT_EQ(traces, full.traces);

  std::stringstream bad("SXTX");
  EXPECT_THROW(read_tta_state(bad, f.problem.captured_ids), IoError);
}

TEST(Tta, HardSupervisionRunFitsObservation) {
  const Fixture& f = problem();
  TTAConfig c = quick_config(15);
  c.objective = Objective::HardSupervision;
  c.lambda_anchor = 0;
  c.lambda_gen = 1;
  c.insert_prob = 1;
  c.restore_rate = 0;
  c.learning_rate = 2e-3;
  const TTAResult r = run_tta(f.theta0_plus, f.problem, c);
  EXPECT_LT(r.traces.back().loss_gen, r.traces.front().loss_gen);
}
