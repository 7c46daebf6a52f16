#pragma once

// Test-time adaptation of the surrogate after a view insertion: anchor
// distillation on captured views, self-distillation of the inserted view
// against an EMA teacher, drift regularisation, AdamW, EMA update and
// periodic stochastic restoration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scenex/augment.hpp"
#include "scenex/optim.hpp"
#include "scenex/rng.hpp"
#include "scenex/surrogate.hpp"

namespace scenex {

enum class Objective {
  Distill,         // anchor + self-distillation (the method)
  HardSupervision  // inserted-view term fits the observed maps directly with L1
};

inline const char* objective_name(Objective o) { return o == Objective::Distill ? "distill" : "hard_supervision"; }

struct TTAConfig {
  int steps = 300;
  double insert_prob = 0.5;
  double ema_momentum = 0.999;
  int restore_period = 10;
  double restore_rate = 1e-3;
  double learning_rate = 3e-4;
  double weight_decay = 1e-2;
  double alpha_depth = 0.2, alpha_normal = 0.2;
  double beta_depth = 1.0, beta_normal = 1.0;
  double lambda_anchor = 1.0, lambda_gen = 5e-2, lambda_reg = 1e-4;
  std::vector<int> subset_sizes;  // empty: {n-1, n-2, n-3}
  AugConfig augment;
  Objective objective = Objective::Distill;
  std::uint64_t seed = 0;

  // Allowed sizes for n captured views. Size n (no subsampling) is accepted
  // for the anchor-only ablation.
  std::vector<int> resolved_subset_sizes(int n) const {
    std::vector<int> s = subset_sizes;
    if (s.empty()) s = {n - 1, n - 2, n - 3};
    return s;
  }

  void validate(int n_captured) const {
    if (steps < 0) throw ContractError("tta: steps must be >= 0");
    if (!(insert_prob >= 0 && insert_prob <= 1)) throw ContractError("tta: insert_prob must be in [0, 1]");
    if (!(ema_momentum >= 0 && ema_momentum < 1)) throw ContractError("tta: ema_momentum must be in [0, 1)");
    if (!(restore_rate >= 0 && restore_rate <= 1)) throw ContractError("tta: restore_rate must be in [0, 1]");
    if (restore_period < 1) throw ContractError("tta: restore_period must be >= 1");
    if (!(learning_rate > 0) || !(weight_decay >= 0)) throw ContractError("tta: bad optimizer settings");
    for (double w : {alpha_depth, alpha_normal, beta_depth, beta_normal, lambda_anchor, lambda_gen, lambda_reg}) {
      if (!(w >= 0)) throw ContractError("tta: loss weights must be >= 0");
    }
    if (n_captured < 4) throw ContractError("tta: needs at least 4 captured views");
    const std::vector<int> s = resolved_subset_sizes(n_captured);
    if (s.empty()) throw ContractError("tta: subset_sizes must be nonempty");
    for (int k : s) {
      if (k < n_captured - 3 || k > n_captured) {
        throw ContractError("tta: subset size " + std::to_string(k) + " outside [n-3, n] for n = " +
                            std::to_string(n_captured));
      }
    }
    augment.validate();
  }
  bool operator==(const TTAConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Anchor references.

using AnchorRefs = std::map<int, ViewRecord>;

inline AnchorRefs precompute_anchor_refs(const ModelParams& theta0_plus, const std::vector<int>& captured_ids) {
  AnchorRefs refs;
  const auto recs = forward(theta0_plus, BatchInput{captured_ids, {}});
  for (std::size_t i = 0; i < captured_ids.size(); ++i) refs.emplace(captured_ids[i], recs[i]);
  return refs;
}

// FNV-1a over the raw bytes of every reference map.
inline std::uint64_t checksum(const AnchorRefs& refs) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& [id, r] : refs) {
    mix(&id, sizeof id);
    mix(r.depth.data().data(), r.depth.size() * sizeof(double));
    mix(r.normal.data().data(), r.normal.size() * sizeof(double));
    mix(r.valid.data(), r.valid.size());
  }
  return h;
}

// ---------------------------------------------------------------------------
// Batch sampling.

struct BatchSample {
  std::vector<std::size_t> subset;  // indices into the captured list
  bool insert = false;
  std::vector<AugTransform> augment;  // one per subset entry
};

inline BatchSample sample_batch(Rng& rng, int n, const TTAConfig& cfg, const Intrinsics& k) {
  if (n < 4) throw ContractError("sample_batch: needs at least 4 captured views");
  const std::vector<int> sizes = cfg.resolved_subset_sizes(n);
  const int size = sizes[rng.below(sizes.size())];
  std::vector<std::size_t> pool(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  BatchSample b;
  for (int i = 0; i < size; ++i) {
    const std::size_t j = std::size_t(i) + rng.below(pool.size() - std::size_t(i));
    std::swap(pool[std::size_t(i)], pool[j]);
    b.subset.push_back(pool[std::size_t(i)]);
  }
  b.insert = rng.uniform() < cfg.insert_prob;
  for (std::size_t i = 0; i < b.subset.size(); ++i) b.augment.push_back(sample_aug(rng, cfg.augment, k));
  return b;
}

// ---------------------------------------------------------------------------
// Losses.

// Sum over captured views in the batch; the inserted view is skipped.
inline Var anchor_loss(const std::vector<Prediction>& preds, const AnchorRefs& refs, int inserted_id,
                       double alpha_depth, double alpha_normal) {
  if (preds.empty()) throw ContractError("anchor_loss: empty batch");
  Tape& tape = *preds.front().depth.tape;
  Var total = tape.constant(Tensor::scalar(0.0));
  for (const Prediction& p : preds) {
    if (p.view_id == inserted_id) continue;
    auto it = refs.find(p.view_id);
    if (it == refs.end()) throw ContractError("anchor_loss: no reference for view " + std::to_string(p.view_id));
    total = total + view_distance(p, it->second, alpha_depth, alpha_normal, CamWeights{}, DepthMode::ScaleInvariant);
  }
  return total;
}

inline const Prediction& find_prediction(const std::vector<Prediction>& preds, int id, const char* op) {
  for (const Prediction& p : preds)
    if (p.view_id == id) return p;
  throw ContractError(std::string(op) + ": view " + std::to_string(id) + " is not in the batch");
}

// Teacher maps enter as constants, so no gradient reaches the teacher.
inline Var gen_loss(const std::vector<Prediction>& preds, int inserted_id, const ViewRecord& teacher, double beta_depth,
                    double beta_normal) {
  const Prediction& s = find_prediction(preds, inserted_id, "gen_loss");
  return view_distance(s, teacher, beta_depth, beta_normal, CamWeights{}, DepthMode::ScaleInvariant);
}

// L1 fit of the observed depth and normal maps of the inserted view.
inline Var hard_supervision_loss(const std::vector<Prediction>& preds, const ViewRecord& observed) {
  const Prediction& s = find_prediction(preds, observed.view_id, "hard_supervision_loss");
  Tape& tape = *s.depth.tape;
  const Mask m = mask_and(s.valid, observed.valid);
  if (mask_count(m) == 0) return tape.constant(Tensor::scalar(0.0));
  const std::size_t n = observed.depth.size();
  Tensor nx(observed.depth.shape()), ny(observed.depth.shape()), nz(observed.depth.shape());
  for (std::size_t i = 0; i < n; ++i) {
    nx[i] = observed.normal[3 * i];
    ny[i] = observed.normal[3 * i + 1];
    nz[i] = observed.normal[3 * i + 2];
  }
  Var dn = ad::abs(s.normal.x - tape.constant(nx)) + ad::abs(s.normal.y - tape.constant(ny)) +
           ad::abs(s.normal.z - tape.constant(nz));
  return d_depth(s.depth, observed.depth, m, DepthMode::L1) + ad::masked_mean(dn, m);
}

inline void check_layout(const ModelParams& a, const ModelParams& b, const char* op) { check_same_layout(a, b, op); }

// Mean squared drift from theta0 over all parameters.
inline double reg_loss(const ModelParams& theta, const ModelParams& theta0) {
  check_layout(theta, theta0, "reg_loss");
  std::vector<const Tensor*> ref;
  theta0.for_each_block([&](const std::string&, const Tensor& t) { ref.push_back(&t); });
  double s = 0;
  std::size_t k = 0, n = 0;
  theta.for_each_block([&](const std::string&, const Tensor& t) {
    const Tensor& r = *ref[k++];
    for (std::size_t i = 0; i < t.size(); ++i) s += (t[i] - r[i]) * (t[i] - r[i]);
    n += t.size();
  });
  return s / double(n);
}

// Tape form over bound student variables.
inline Var reg_loss(const ModelVars& mv, const ModelParams& theta0) {
  check_layout(*mv.params, theta0, "reg_loss");
  Tape& tape = *mv.grid.tape;
  const double n = double(theta0.parameter_count());
  Var total = ad::sum(ad::square(mv.grid - tape.constant(theta0.height_grid)));
  for (const auto& [id, vv] : mv.views) {
    const ViewParams& v0 = theta0.views.at(id);
    total = total + ad::sum(ad::square(vv.rotation - tape.constant(v0.rotation)));
    total = total + ad::sum(ad::square(vv.translation - tape.constant(v0.translation)));
    total = total + ad::sum(ad::square(vv.log_focal - tape.constant(v0.log_focal)));
    if (vv.residual) total = total + ad::sum(ad::square(*vv.residual - tape.constant(*v0.residual)));
  }
  return total * (1.0 / n);
}

// ---------------------------------------------------------------------------
// Parameter-space updates.

inline void ema_update(ModelParams& ema, const ModelParams& student, double mu) {
  check_layout(ema, student, "ema_update");
  std::vector<const Tensor*> src;
  student.for_each_block([&](const std::string&, const Tensor& t) { src.push_back(&t); });
  std::size_t k = 0;
  ema.for_each_block([&](const std::string&, Tensor& t) {
    const Tensor& s = *src[k++];
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = mu * t[i] + (1 - mu) * s[i];
  });
}

// Each scalar is independently reset to theta0 with probability r.
// Returns the number of restored entries.
inline std::size_t stochastic_restore(ModelParams& student, const ModelParams& theta0, double r, Rng& rng) {
  if (!(r >= 0 && r <= 1)) throw ContractError("stochastic_restore: r must be in [0, 1]");
  check_layout(student, theta0, "stochastic_restore");
  std::vector<const Tensor*> src;
  theta0.for_each_block([&](const std::string&, const Tensor& t) { src.push_back(&t); });
  std::size_t k = 0, count = 0;
  student.for_each_block([&](const std::string&, Tensor& t) {
    const Tensor& s = *src[k++];
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (rng.uniform() < r) {
        t[i] = s[i];
        ++count;
      }
    }
  });
  return count;
}

// ---------------------------------------------------------------------------
// State and the adaptation loop.

struct TTAState {
  ModelParams student, theta0, ema_teacher;
  AnchorRefs anchor_refs;
  AdamState optimizer;
  long step = 0;
  Rng rng;
};

struct StepTrace {
  long step = 0;
  std::vector<std::size_t> subset;
  bool inserted = false;
  std::vector<std::string> aug_modes;
  double loss_anchor = 0, loss_gen = 0, loss_reg = 0, total = 0;
  bool restored = false;
  std::size_t restored_count = 0;
  bool operator==(const StepTrace&) const = default;
};

inline double objective_total(const TTAConfig& c, double la, double lg, double lr) {
  return c.lambda_anchor * la + c.lambda_gen * lg + c.lambda_reg * lr;
}

struct TTAProblem {
  std::vector<int> captured_ids;
  ViewRecord inserted;  // observed I_g; used by the hard-supervision objective
};

inline TTAState init_tta(const ModelParams& theta0_plus, const TTAProblem& prob, const TTAConfig& cfg) {
  cfg.validate(int(prob.captured_ids.size()));
  theta0_plus.view(prob.inserted.view_id);
  TTAState s;
  s.student = s.theta0 = s.ema_teacher = theta0_plus;
  s.anchor_refs = precompute_anchor_refs(theta0_plus, prob.captured_ids);
  s.rng = Rng(mix_seed(cfg.seed, 0x77a));
  return s;
}

// One iteration of the loop; returns its trace.
inline StepTrace tta_step(TTAState& s, const TTAProblem& prob, const TTAConfig& cfg) {
  const int g = prob.inserted.view_id;
  const int n = int(prob.captured_ids.size());
  StepTrace tr;
  tr.step = ++s.step;

  const Intrinsics k = s.student.view(prob.captured_ids.front()).camera().intrinsics;
  BatchSample b = sample_batch(s.rng, n, cfg, k);
  tr.subset = b.subset;
  tr.inserted = b.insert;
  BatchInput batch;
  for (std::size_t i = 0; i < b.subset.size(); ++i) {
    const int id = prob.captured_ids[b.subset[i]];
    batch.view_ids.push_back(id);
    tr.aug_modes.emplace_back(aug_mode_name(b.augment[i].mode));
    if (b.augment[i].mode != AugMode::Identity) batch.conditioning.emplace(id, lift_to_conditioning(b.augment[i]));
  }
  if (b.insert) batch.view_ids.push_back(g);

  Tape tape;
  ModelVars mv = bind_model(tape, s.student);
  const std::vector<Prediction> preds = forward(mv, batch);
  Var la = anchor_loss(preds, s.anchor_refs, g, cfg.alpha_depth, cfg.alpha_normal);
  Var lg = tape.constant(Tensor::scalar(0.0));
  if (b.insert) {
    if (cfg.objective == Objective::Distill) {
      const ViewRecord teacher = forward_view(s.ema_teacher, g);
      lg = gen_loss(preds, g, teacher, cfg.beta_depth, cfg.beta_normal);
    } else {
      lg = hard_supervision_loss(preds, prob.inserted);
    }
  }
  Var lr = reg_loss(mv, s.theta0);
  Var total = cfg.lambda_anchor * la + cfg.lambda_gen * lg + cfg.lambda_reg * lr;
  tr.loss_anchor = la.item();
  tr.loss_gen = lg.item();
  tr.loss_reg = lr.item();
  tr.total = total.item();
  if (!std::isfinite(tr.total)) {
    throw Error("tta: non-finite loss at step " + std::to_string(tr.step) + " (anchor " +
                std::to_string(tr.loss_anchor) + ", gen " + std::to_string(tr.loss_gen) + ", reg " +
                std::to_string(tr.loss_reg) + ")");
  }
  const GradientMap grads = tape.backward(total);
  try {
    adamw_step(s.student.blocks(), grads, s.optimizer, AdamWConfig{cfg.learning_rate, cfg.weight_decay});
  } catch (const Error& e) {
    throw Error("tta: step " + std::to_string(tr.step) + ": " + e.what());
  }
  ema_update(s.ema_teacher, s.student, cfg.ema_momentum);
  if (s.step % cfg.restore_period == 0) {
    tr.restored = true;
    tr.restored_count = stochastic_restore(s.student, s.theta0, cfg.restore_rate, s.rng);
  }
  return tr;
}

struct TTAResult {
  ModelParams theta_star;
  std::vector<StepTrace> traces;
};

using TraceSink = std::function<void(const StepTrace&)>;

inline TTAResult run_tta(const ModelParams& theta0_plus, const TTAProblem& prob, const TTAConfig& cfg,
                         const TraceSink& sink = nullptr) {
  TTAState s = init_tta(theta0_plus, prob, cfg);
  TTAResult out;
  for (int t = 0; t < cfg.steps; ++t) {
    out.traces.push_back(tta_step(s, prob, cfg));
    if (sink) sink(out.traces.back());
  }
  out.theta_star = std::move(s.student);
  return out;
}

// ---------------------------------------------------------------------------
// State checkpoint. Layout: "SXTS", u32 version = 1, i64 step, rng state
// (u64 length + bytes), optimizer step (i64) and moment tensors by block name,
// then student, theta0 and EMA teacher as model checkpoints. Anchor references
// are recomputed from theta0 on load (bit-identical by determinism).

inline void write_tta_state(std::ostream& os, const TTAState& s) {
  os.write("SXTS", 4);
  io::put<std::uint32_t>(os, 1);
  io::put<std::int64_t>(os, s.step);
  const std::string rs = s.rng.state();
  io::put<std::uint64_t>(os, rs.size());
  os.write(rs.data(), std::streamsize(rs.size()));
  io::put<std::int64_t>(os, s.optimizer.step);
  io::put<std::uint64_t>(os, s.optimizer.m.size());
  for (const auto& [name, m] : s.optimizer.m) {
    io::put<std::uint64_t>(os, name.size());
    os.write(name.data(), std::streamsize(name.size()));
    io::put<std::uint64_t>(os, m.size());
    io::put_doubles(os, m);
    io::put_doubles(os, s.optimizer.v.at(name));
  }
  write_model(os, s.student);
  write_model(os, s.theta0);
  write_model(os, s.ema_teacher);
}

inline TTAState read_tta_state(std::istream& is, const std::vector<int>& captured_ids) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SXTS", 4) != 0) throw IoError("tta checkpoint: bad magic");
  if (io::get<std::uint32_t>(is) != 1) throw IoError("tta checkpoint: unsupported version");
  TTAState s;
  s.step = io::get<std::int64_t>(is);
  auto read_string = [&](std::uint64_t limit) {
    const auto len = io::get<std::uint64_t>(is);
    if (len > limit) throw IoError("tta checkpoint: bad string length");
    std::string str(len, '\0');
    is.read(str.data(), std::streamsize(len));
    if (!is) throw IoError("tta checkpoint: truncated stream");
    return str;
  };
  s.rng.set_state(read_string(1u << 16));
  s.optimizer.step = io::get<std::int64_t>(is);
  const auto blocks = io::get<std::uint64_t>(is);
  for (std::uint64_t b = 0; b < blocks; ++b) {
    const std::string name = read_string(1024);
    const auto size = io::get<std::uint64_t>(is);
    if (size > (1u << 26)) throw IoError("tta checkpoint: bad moment size");
    Tensor m(Shape{size}), v(Shape{size});
    io::get_doubles(is, m);
    io::get_doubles(is, v);
    s.optimizer.m.emplace(name, std::move(m));
    s.optimizer.v.emplace(name, std::move(v));
  }
  s.student = read_model(is);
  s.theta0 = read_model(is);
  s.ema_teacher = read_model(is);
  // Moments are stored flat; restore the parameter shapes.
  s.student.for_each_block([&](const std::string& name, const Tensor& t) {
    auto it = s.optimizer.m.find(name);
    if (it == s.optimizer.m.end()) return;
    if (it->second.size() != t.size()) throw IoError("tta checkpoint: moment size mismatch for " + name);
    it->second = it->second.reshaped(t.shape());
    s.optimizer.v.at(name) = s.optimizer.v.at(name).reshaped(t.shape());
  });
  check_layout(s.student, s.theta0, "tta checkpoint");
  check_layout(s.ema_teacher, s.theta0, "tta checkpoint");
  s.anchor_refs = precompute_anchor_refs(s.theta0, captured_ids);
  return s;
}

}  // namespace scenex
