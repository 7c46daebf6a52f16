#pragma once

// Experiment runner: strict JSON configs, ablation presets, the end-to-end
// pipeline (synthesize, prefit, register, adapt, evaluate), artifact output
// and a seed-parallel suite driver.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "scenex/metrics.hpp"
#include "scenex/scene_synth.hpp"
#include "scenex/surrogate.hpp"
#include "scenex/tta.hpp"

namespace scenex {

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage failed for one seed.
class StageError : public Error {
 public:
  StageError(const std::string& stage, std::uint64_t seed, const std::string& what)
      : Error("stage '" + stage + "' failed for seed " + std::to_string(seed) + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Configuration types not already defined by the pipeline modules.

struct SceneConfig {
  bool procedural = true;  // true: procedural_scene(run seed); false: `spec` as given
  std::array<double, 4> extent{-4, -4, 4, 4};
  int n_bumps = 5, n_blocks = 2;
  SceneSpec spec;

  SceneSpec resolve(std::uint64_t seed) const {
    return procedural ? procedural_scene(seed, extent, n_bumps, n_blocks) : spec;
  }
  bool operator==(const SceneConfig&) const = default;
};

struct InsertedCameraConfig {
  Vec3 eye{4.5, 1.5, 4.0};
  Vec3 target{3.0, 0.0, 0.0};
  Vec3 up{0, 0, 1};
  int view_id = 100;

  CameraParams camera(const Intrinsics& k) const { return CameraParams{k, look_at(eye, target, up)}; }
  bool operator==(const InsertedCameraConfig&) const = default;
};

struct MisalignmentConfig {
  double jitter_rotation_rad = 2.0 / kDegPerRad;
  double jitter_translation = 0.0;
  double depth_warp = 0.05;
  std::optional<ContentBlob> blob = ContentBlob{};

  MisalignmentSpec resolve(std::uint64_t seed) const {
    MisalignmentSpec m;
    m.jitter_rotation = jitter_rotation_rad;
    m.jitter_translation = jitter_translation;
    m.depth_warp = depth_warp;
    m.blob = blob;
    m.seed = seed;
    return m;
  }
  bool is_zero() const {
    return jitter_rotation_rad == 0 && jitter_translation == 0 && depth_warp == 0 &&
           (!blob || blob->depth_offset == 0);
  }
  bool operator==(const MisalignmentConfig&) const = default;
};

// Novel-pose cameras on an arc around the rig target.
struct SweepConfig {
  int count = 8;
  double start_deg = -90, end_deg = 90;
  double radius = 6, height = 4;

  std::vector<CameraParams> cameras(const CaptureRig& rig) const {
    std::vector<CameraParams> out;
    for (int i = 0; i < count; ++i) {
      const double t = count == 1 ? 0.5 : double(i) / double(count - 1);
      const double a = (start_deg + (end_deg - start_deg) * t) / kDegPerRad;
      const Vec3& c = rig.trajectory.target;
      const Vec3 eye{c[0] + radius * std::cos(a), c[1] + radius * std::sin(a), c[2] + height};
      out.push_back(CameraParams{rig.intrinsics, look_at(eye, c)});
    }
    return out;
  }
  bool operator==(const SweepConfig&) const = default;
};

inline const std::vector<std::string>& suite_presets() {
  static const std::vector<std::string> names{"baseline",        "anchor", "subset_aug",      "self_distill",
                                              "self_distill_p1", "full",   "hard_supervision"};
  return names;
}

inline const std::vector<std::string>& known_presets() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n = suite_presets();
    n.push_back("no_anchor");
    n.push_back("custom");
    return n;
  }();
  return names;
}

struct ExperimentConfig {
  SceneConfig scene;
  CaptureRig rig;
  InsertedCameraConfig inserted_camera;
  MisalignmentConfig misalignment;
  PrefitConfig prefit;
  RegisterConfig registration;
  TTAConfig tta;  // tta.augment holds the augmentation settings; tta.seed is set per run
  SweepConfig sweep;
  std::string preset = "full";
  std::vector<std::string> suite = suite_presets();
  std::optional<std::vector<std::uint64_t>> seeds;
  std::string output_dir = "runs";
  bool write_images = true;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Presets. Each pins the fields that define its ablation row on top of the
// configured adaptation settings.

inline TTAConfig resolve_preset(const TTAConfig& base, const std::string& preset, int n_captured) {
  TTAConfig c = base;
  if (preset == "baseline") {
    c.steps = 0;
  } else if (preset == "anchor") {
    c.subset_sizes = {n_captured};
    c.augment.mode_weights = {1, 0, 0, 0};
    c.insert_prob = 0;
    c.lambda_gen = 0;
    c.restore_rate = 0;
  } else if (preset == "subset_aug") {
    c.insert_prob = 0;
    c.lambda_gen = 0;
    c.restore_rate = 0;
  } else if (preset == "self_distill") {
    c.insert_prob = 0.5;
    c.restore_rate = 0;
  } else if (preset == "self_distill_p1") {
    c.insert_prob = 1.0;
    c.restore_rate = 0;
  } else if (preset == "full") {
  } else if (preset == "hard_supervision") {
    c.objective = Objective::HardSupervision;
    c.lambda_anchor = 0;
    c.lambda_gen = 1;
    c.insert_prob = 1;
    c.restore_rate = 0;
  } else if (preset == "no_anchor") {
    c.lambda_anchor = 0;
  } else if (preset == "custom") {
  } else {
    throw ConfigError("unknown preset '" + preset + "'");
  }
  return c;
}

inline void ExperimentConfig::validate() const {
  try {
    rig.validate();
    scene.resolve(0).validate();
    if (inserted_camera.view_id >= 0 && inserted_camera.view_id < rig.n) {
      throw ConfigError("inserted_camera.view_id collides with a captured view id");
    }
    misalignment.resolve(0).validate();
    if (prefit.iterations < 0 || prefit.grid_rows < 2 || prefit.grid_cols < 2) {
      throw ConfigError("prefit: iterations >= 0 and a grid of at least 2x2 required");
    }
    if (registration.iterations < 0) throw ConfigError("registration: iterations must be >= 0");
    if (sweep.count < 0) throw ConfigError("sweep: count must be >= 0");
    for (const std::string& p : suite) resolve_preset(tta, p, rig.n).validate(rig.n);
    resolve_preset(tta, preset, rig.n).validate(rig.n);
    if (seeds && seeds->empty()) throw ConfigError("seeds: list must be nonempty");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Strict JSON reading. Missing keys keep their defaults; unknown keys and type
// mismatches are errors naming the JSON path.

inline void read_value(const json& j, double& out, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  out = j.get<double>();
}
inline void read_value(const json& j, bool& out, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected a boolean");
  out = j.get<bool>();
}
inline void read_value(const json& j, std::string& out, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  out = j.get<std::string>();
}
template <class T>
  requires(std::is_integral_v<T> && !std::is_same_v<T, bool>)
inline void read_value(const json& j, T& out, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
  if constexpr (std::is_unsigned_v<T>) {
    if (!j.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    const auto v = j.get<std::uint64_t>();
    if (v > std::uint64_t(std::numeric_limits<T>::max())) throw ConfigError(path + ": integer out of range");
    out = T(v);
  } else {
    const auto v = j.get<std::int64_t>();
    if (v < std::int64_t(std::numeric_limits<T>::min()) || v > std::int64_t(std::numeric_limits<T>::max())) {
      throw ConfigError(path + ": integer out of range");
    }
    out = T(v);
  }
}
template <class T, std::size_t N>
inline void read_value(const json& j, std::array<T, N>& out, const std::string& path) {
  if (!j.is_array() || j.size() != N) throw ConfigError(path + ": expected an array of " + std::to_string(N));
  for (std::size_t i = 0; i < N; ++i) read_value(j[i], out[i], path + "[" + std::to_string(i) + "]");
}
template <class T>
inline void read_value(const json& j, std::vector<T>& out, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  out.assign(j.size(), T{});
  for (std::size_t i = 0; i < j.size(); ++i) read_value(j[i], out[i], path + "[" + std::to_string(i) + "]");
}
template <class T>
inline void read_value(const json& j, std::optional<T>& out, const std::string& path) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  T v = out.value_or(T{});
  read_value(j, v, path);
  out = std::move(v);
}

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }
  template <class T>
  ObjectReader& operator()(const char* key, T& out) {
    keys_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) read_value(*it, out, path_ + "." + key);
    return *this;
  }
  // Marks a key handled by the caller.
  ObjectReader& known(const char* key) {
    keys_.insert(key);
    return *this;
  }
  void done() const {
    for (const auto& item : j_.items()) {
      if (!keys_.count(item.key())) throw ConfigError(path_ + ": unknown key '" + item.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> keys_;
};

template <class E>
inline void read_enum(const json& j, E& out, const std::string& path,
                      const std::vector<std::pair<std::string, E>>& names) {
  std::string s;
  read_value(j, s, path);
  for (const auto& [n, v] : names)
    if (n == s) {
      out = v;
      return;
    }
  std::string all;
  for (const auto& [n, v] : names) all += (all.empty() ? "" : ", ") + n;
  throw ConfigError(path + ": '" + s + "' is not one of " + all);
}

inline const std::vector<std::pair<std::string, Trajectory::Kind>> kTrajectoryKinds{
    {"arc", Trajectory::Kind::Arc}, {"orbit", Trajectory::Kind::Orbit}};
inline const std::vector<std::pair<std::string, DepthMode>> kDepthModes{{"l1", DepthMode::L1},
                                                                         {"scale_invariant", DepthMode::ScaleInvariant}};
inline const std::vector<std::pair<std::string, Objective>> kObjectives{
    {"distill", Objective::Distill}, {"hard_supervision", Objective::HardSupervision}};

inline void read_value(const json& j, Trajectory::Kind& out, const std::string& path) {
  read_enum(j, out, path, kTrajectoryKinds);
}
inline void read_value(const json& j, DepthMode& out, const std::string& path) { read_enum(j, out, path, kDepthModes); }
inline void read_value(const json& j, Objective& out, const std::string& path) { read_enum(j, out, path, kObjectives); }

template <class E>
inline std::string enum_name(E v, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [n, e] : names)
    if (e == v) return n;
  throw Error("enum_name: unnamed value");
}

inline void read_value(const json& j, Bump& b, const std::string& path) {
  ObjectReader(j, path)("center", b.center)("amplitude", b.amplitude)("radius", b.radius).done();
}
inline void read_value(const json& j, Block& b, const std::string& path) {
  ObjectReader(j, path)("footprint", b.footprint)("height", b.height)("edge", b.edge).done();
}
inline void read_value(const json& j, SceneSpec& s, const std::string& path) {
  ObjectReader(j, path)("extent", s.extent)("base_height", s.base_height)("bumps", s.bumps)("blocks", s.blocks)(
      "seed", s.seed)
      .done();
}
inline void read_value(const json& j, SceneConfig& s, const std::string& path) {
  ObjectReader(j, path)("procedural", s.procedural)("extent", s.extent)("n_bumps", s.n_bumps)("n_blocks", s.n_blocks)(
      "spec", s.spec)
      .done();
}
inline void read_value(const json& j, Intrinsics& k, const std::string& path) {
  ObjectReader(j, path)("fx", k.fx)("fy", k.fy)("cx", k.cx)("cy", k.cy)("width", k.width)("height", k.height).done();
}
inline void read_value(const json& j, Trajectory& t, const std::string& path) {
  ObjectReader(j, path)("kind", t.kind)("radius", t.radius)("height", t.height)("start_deg", t.start_deg)(
      "end_deg", t.end_deg)("target", t.target)
      .done();
}
inline void read_value(const json& j, CaptureRig& r, const std::string& path) {
  ObjectReader(j, path)("n", r.n)("trajectory", r.trajectory)("intrinsics", r.intrinsics).done();
}
inline void read_value(const json& j, InsertedCameraConfig& c, const std::string& path) {
  ObjectReader(j, path)("eye", c.eye)("target", c.target)("up", c.up)("view_id", c.view_id).done();
}
inline void read_value(const json& j, ContentBlob& b, const std::string& path) {
  ObjectReader(j, path)("center", b.center)("radius", b.radius)("depth_offset", b.depth_offset).done();
}
inline void read_value(const json& j, MisalignmentConfig& m, const std::string& path) {
  ObjectReader(j, path)("jitter_rotation_rad", m.jitter_rotation_rad)("jitter_translation", m.jitter_translation)(
      "depth_warp", m.depth_warp)("blob", m.blob)
      .done();
}
inline void read_value(const json& j, PrefitConfig& p, const std::string& path) {
  ObjectReader(j, path)("iterations", p.iterations)("learning_rate", p.learning_rate)("grid_rows", p.grid_rows)(
      "grid_cols", p.grid_cols)("rotation_noise_rad", p.rotation_noise)("translation_noise", p.translation_noise)
      .done();
}
inline void read_value(const json& j, RegisterConfig& r, const std::string& path) {
  ObjectReader(j, path)("iterations", r.iterations)("learning_rate", r.learning_rate)(
      "rotation_range_rad", r.rotation_range)("translation_range", r.translation_range)("residual_rows",
                                                                                        r.residual_rows)(
      "residual_cols", r.residual_cols)("residual_smoothness", r.residual_smoothness)("depth_mode", r.depth_mode)(
      "warning_threshold", r.warning_threshold)
      .done();
}
inline void read_value(const json& j, AugConfig& a, const std::string& path) {
  ObjectReader(j, path)("mode_weights", a.mode_weights)("max_rotation_rad", a.max_rotation)(
      "max_translation", a.max_translation)("max_log_scale", a.max_log_scale)("grid", a.grid)(
      "max_corner_jitter", a.max_corner_jitter)("feather_width", a.feather_width)
      .done();
}

// `with_run_fields` also reads augment and seed (used for resolved snapshots).
inline void read_tta(const json& j, TTAConfig& t, const std::string& path, bool with_run_fields) {
  ObjectReader r(j, path);
  r("steps", t.steps)("insert_prob", t.insert_prob)("ema_momentum", t.ema_momentum)("restore_period",
                                                                                     t.restore_period)(
      "restore_rate", t.restore_rate)("learning_rate", t.learning_rate)("weight_decay", t.weight_decay)(
      "alpha_depth", t.alpha_depth)("alpha_normal", t.alpha_normal)("beta_depth", t.beta_depth)(
      "beta_normal", t.beta_normal)("lambda_anchor", t.lambda_anchor)("lambda_gen", t.lambda_gen)(
      "lambda_reg", t.lambda_reg)("subset_sizes", t.subset_sizes)("objective", t.objective);
  if (with_run_fields) r("augment", t.augment)("seed", t.seed);
  r.done();
}
inline void read_value(const json& j, SweepConfig& s, const std::string& path) {
  ObjectReader(j, path)("count", s.count)("start_deg", s.start_deg)("end_deg", s.end_deg)("radius", s.radius)(
      "height", s.height)
      .done();
}


inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  ObjectReader r(j, "config");
  r("scene", c.scene)("rig", c.rig)("inserted_camera", c.inserted_camera)("misalignment", c.misalignment)(
      "prefit", c.prefit)("registration", c.registration)("augment", c.tta.augment)("sweep", c.sweep)(
      "preset", c.preset)("suite", c.suite)("seeds", c.seeds)("output_dir", c.output_dir)("write_images",
                                                                                           c.write_images);
  r.known("tta");
  r.done();
  if (auto it = j.find("tta"); it != j.end()) read_tta(*it, c.tta, "config.tta", false);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// JSON writing. Angles in radians are written as stored so that reading a
// written config reproduces it bit for bit.

inline json to_json_value(const SceneSpec& s) {
  json bumps = json::array(), blocks = json::array();
  for (const Bump& b : s.bumps) bumps.push_back({{"center", b.center}, {"amplitude", b.amplitude}, {"radius", b.radius}});
  for (const Block& b : s.blocks)
    blocks.push_back({{"footprint", b.footprint}, {"height", b.height}, {"edge", b.edge}});
  return {{"extent", s.extent}, {"base_height", s.base_height}, {"bumps", bumps}, {"blocks", blocks}, {"seed", s.seed}};
}
inline json to_json_value(const SceneConfig& s) {
  return {{"procedural", s.procedural}, {"extent", s.extent},           {"n_bumps", s.n_bumps},
          {"n_blocks", s.n_blocks},     {"spec", to_json_value(s.spec)}};
}
inline json to_json_value(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}
inline json to_json_value(const CaptureRig& r) {
  const Trajectory& t = r.trajectory;
  return {{"n", r.n},
          {"trajectory",
           {{"kind", enum_name(t.kind, kTrajectoryKinds)},
            {"radius", t.radius},
            {"height", t.height},
            {"start_deg", t.start_deg},
            {"end_deg", t.end_deg},
            {"target", t.target}}},
          {"intrinsics", to_json_value(r.intrinsics)}};
}
inline json to_json_value(const InsertedCameraConfig& c) {
  return {{"eye", c.eye}, {"target", c.target}, {"up", c.up}, {"view_id", c.view_id}};
}
inline json to_json_value(const MisalignmentConfig& m) {
  json blob = nullptr;
  if (m.blob) blob = {{"center", m.blob->center}, {"radius", m.blob->radius}, {"depth_offset", m.blob->depth_offset}};
  return {{"jitter_rotation_rad", m.jitter_rotation_rad},
          {"jitter_translation", m.jitter_translation},
          {"depth_warp", m.depth_warp},
          {"blob", blob}};
}
inline json to_json_value(const PrefitConfig& p) {
  return {{"iterations", p.iterations},         {"learning_rate", p.learning_rate},
          {"grid_rows", p.grid_rows},           {"grid_cols", p.grid_cols},
          {"rotation_noise_rad", p.rotation_noise}, {"translation_noise", p.translation_noise}};
}
inline json to_json_value(const RegisterConfig& r) {
  return {{"iterations", r.iterations},
          {"learning_rate", r.learning_rate},
          {"rotation_range_rad", r.rotation_range},
          {"translation_range", r.translation_range},
          {"residual_rows", r.residual_rows},
          {"residual_cols", r.residual_cols},
          {"residual_smoothness", r.residual_smoothness},
          {"depth_mode", enum_name(r.depth_mode, kDepthModes)},
          {"warning_threshold", r.warning_threshold}};
}
inline json to_json_value(const AugConfig& a) {
  return {{"mode_weights", a.mode_weights},       {"max_rotation_rad", a.max_rotation},
          {"max_translation", a.max_translation}, {"max_log_scale", a.max_log_scale},
          {"grid", a.grid},                       {"max_corner_jitter", a.max_corner_jitter},
          {"feather_width", a.feather_width}};
}
inline json to_json_value(const TTAConfig& t, bool with_run_fields) {
  json j = {{"steps", t.steps},
            {"insert_prob", t.insert_prob},
            {"ema_momentum", t.ema_momentum},
            {"restore_period", t.restore_period},
            {"restore_rate", t.restore_rate},
            {"learning_rate", t.learning_rate},
            {"weight_decay", t.weight_decay},
            {"alpha_depth", t.alpha_depth},
            {"alpha_normal", t.alpha_normal},
            {"beta_depth", t.beta_depth},
            {"beta_normal", t.beta_normal},
            {"lambda_anchor", t.lambda_anchor},
            {"lambda_gen", t.lambda_gen},
            {"lambda_reg", t.lambda_reg},
            {"subset_sizes", t.subset_sizes},
            {"objective", enum_name(t.objective, kObjectives)}};
  if (with_run_fields) {
    j["augment"] = to_json_value(t.augment);
    j["seed"] = t.seed;
  }
  return j;
}
inline json to_json_value(const SweepConfig& s) {
  return {{"count", s.count},
          {"start_deg", s.start_deg},
          {"end_deg", s.end_deg},
          {"radius", s.radius},
          {"height", s.height}};
}
inline json config_to_json(const ExperimentConfig& c) {
  json j = {{"scene", to_json_value(c.scene)},
            {"rig", to_json_value(c.rig)},
            {"inserted_camera", to_json_value(c.inserted_camera)},
            {"misalignment", to_json_value(c.misalignment)},
            {"prefit", to_json_value(c.prefit)},
            {"registration", to_json_value(c.registration)},
            {"tta", to_json_value(c.tta, false)},
            {"augment", to_json_value(c.tta.augment)},
            {"sweep", to_json_value(c.sweep)},
            {"preset", c.preset},
            {"suite", c.suite},
            {"output_dir", c.output_dir},
            {"write_images", c.write_images}};
  j["seeds"] = c.seeds ? json(*c.seeds) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Reports.

struct RegistrationSummary {
  bool misaligned_warning = false;
  double pose_residual = 0, residual_mean_abs = 0;
  int best_start = 0;
  bool operator==(const RegistrationSummary&) const = default;
};

struct RunSummary {
  double captured_si_prefit = 0;       // mean captured-view SI depth error before insertion
  double captured_si_final = 0;        // after adaptation
  double captured_si_degradation = 0;  // final minus prefit
  double insertion_vs_observed_si = 0, insertion_vs_truth_si = 0;
  double registered_vs_observed_si = 0, registered_vs_truth_si = 0;  // before adaptation
  double insert_rate = 0;
  int restore_events = 0;
  int steps = 0;
  bool operator==(const RunSummary&) const = default;
};

struct RunReport {
  ExperimentConfig config;  // snapshot; re-running it with `seed` reproduces this report
  std::string preset;
  std::uint64_t seed = 0;
  std::string seed_source = "config";  // config, cli or entropy
  TTAConfig tta;                       // resolved preset settings
  double prefit_initial_loss = 0, prefit_final_loss = 0;
  RegistrationSummary registration;
  EvalReport reference;  // registered model before adaptation
  EvalReport final;      // adapted model
  RunSummary summary;
  bool operator==(const RunReport&) const = default;
};

inline json to_json_value(const InsertionErrors& e) {
  return {{"si_depth", e.si_depth}, {"l1_depth", e.l1_depth}, {"normal_deg", e.normal_deg}};
}
inline json to_json_value(const EvalReport& r) {
  json pres = json::array(), novel = json::array();
  for (const PreservationEntry& p : r.preservation) {
    pres.push_back({{"view_id", p.view_id},
                    {"depth_psnr", p.depth_psnr},
                    {"depth_ssim", p.depth_ssim},
                    {"si_depth", p.si_depth},
                    {"normal_deg", p.normal_deg},
                    {"pose_deg", p.pose_deg},
                    {"trans_error", p.trans_error}});
  }
  for (const NovelPoseEntry& n : r.novel_pose) novel.push_back({{"valid_fraction", n.valid_fraction}, {"depth_tv", n.depth_tv}});
  const EvalAggregates& a = r.aggregates;
  return {{"preservation", pres},
          {"insertion_vs_observed", to_json_value(r.insertion_vs_observed)},
          {"insertion_vs_truth", to_json_value(r.insertion_vs_truth)},
          {"novel_pose", novel},
          {"aggregates",
           {{"depth_psnr", a.depth_psnr},
            {"depth_ssim", a.depth_ssim},
            {"si_depth", a.si_depth},
            {"normal_deg", a.normal_deg},
            {"pose_deg", a.pose_deg},
            {"novel_valid_fraction", a.novel_valid_fraction},
            {"novel_depth_tv", a.novel_depth_tv}}}};
}
inline void read_value(const json& j, PreservationEntry& p, const std::string& path) {
  ObjectReader(j, path)("view_id", p.view_id)("depth_psnr", p.depth_psnr)("depth_ssim", p.depth_ssim)(
      "si_depth", p.si_depth)("normal_deg", p.normal_deg)("pose_deg", p.pose_deg)("trans_error", p.trans_error)
      .done();
}
inline void read_value(const json& j, NovelPoseEntry& n, const std::string& path) {
  ObjectReader(j, path)("valid_fraction", n.valid_fraction)("depth_tv", n.depth_tv).done();
}
inline void read_value(const json& j, InsertionErrors& e, const std::string& path) {
  ObjectReader(j, path)("si_depth", e.si_depth)("l1_depth", e.l1_depth)("normal_deg", e.normal_deg).done();
}
inline void read_value(const json& j, EvalAggregates& a, const std::string& path) {
  ObjectReader(j, path)("depth_psnr", a.depth_psnr)("depth_ssim", a.depth_ssim)("si_depth", a.si_depth)(
      "normal_deg", a.normal_deg)("pose_deg", a.pose_deg)("novel_valid_fraction", a.novel_valid_fraction)(
      "novel_depth_tv", a.novel_depth_tv)
      .done();
}
inline void read_value(const json& j, EvalReport& r, const std::string& path) {
  ObjectReader(j, path)("preservation", r.preservation)("insertion_vs_observed", r.insertion_vs_observed)(
      "insertion_vs_truth", r.insertion_vs_truth)("novel_pose", r.novel_pose)("aggregates", r.aggregates)
      .done();
}
inline json to_json_value(const RegistrationSummary& r) {
  return {{"misaligned_warning", r.misaligned_warning},
          {"pose_residual", r.pose_residual},
          {"residual_mean_abs", r.residual_mean_abs},
          {"best_start", r.best_start}};
}
inline void read_value(const json& j, RegistrationSummary& r, const std::string& path) {
  ObjectReader(j, path)("misaligned_warning", r.misaligned_warning)("pose_residual", r.pose_residual)(
      "residual_mean_abs", r.residual_mean_abs)("best_start", r.best_start)
      .done();
}
inline json to_json_value(const RunSummary& s) {
  return {{"captured_si_prefit", s.captured_si_prefit},
          {"captured_si_final", s.captured_si_final},
          {"captured_si_degradation", s.captured_si_degradation},
          {"insertion_vs_observed_si", s.insertion_vs_observed_si},
          {"insertion_vs_truth_si", s.insertion_vs_truth_si},
          {"registered_vs_observed_si", s.registered_vs_observed_si},
          {"registered_vs_truth_si", s.registered_vs_truth_si},
          {"insert_rate", s.insert_rate},
          {"restore_events", s.restore_events},
          {"steps", s.steps}};
}
inline void read_value(const json& j, RunSummary& s, const std::string& path) {
  ObjectReader(j, path)("captured_si_prefit", s.captured_si_prefit)("captured_si_final", s.captured_si_final)(
      "captured_si_degradation", s.captured_si_degradation)("insertion_vs_observed_si", s.insertion_vs_observed_si)(
      "insertion_vs_truth_si", s.insertion_vs_truth_si)("registered_vs_observed_si", s.registered_vs_observed_si)(
      "registered_vs_truth_si", s.registered_vs_truth_si)("insert_rate", s.insert_rate)("restore_events",
                                                                                        s.restore_events)(
      "steps", s.steps)
      .done();
}

inline json report_to_json(const RunReport& r) {
  return {{"config", config_to_json(r.config)},
          {"preset", r.preset},
          {"seed", r.seed},
          {"seed_source", r.seed_source},
          {"tta", to_json_value(r.tta, true)},
          {"prefit", {{"initial_loss", r.prefit_initial_loss}, {"final_loss", r.prefit_final_loss}}},
          {"registration", to_json_value(r.registration)},
          {"reference", to_json_value(r.reference)},
          {"final", to_json_value(r.final)},
          {"summary", to_json_value(r.summary)}};
}

inline RunReport report_from_json(const json& j) {
  RunReport r;
  ObjectReader rd(j, "report");
  rd("preset", r.preset)("seed", r.seed)("seed_source", r.seed_source)("registration", r.registration)(
      "reference", r.reference)("final", r.final)("summary", r.summary);
  rd.known("config").known("tta").known("prefit");
  rd.done();
  r.config = config_from_json(j.at("config"));
  read_tta(j.at("tta"), r.tta, "report.tta", true);
  ObjectReader(j.at("prefit"), "report.prefit")("initial_loss", r.prefit_initial_loss)("final_loss",
                                                                                      r.prefit_final_loss)
      .done();
  return r;
}

inline json trace_to_json(const StepTrace& t) {
  return {{"step", t.step},
          {"subset", t.subset},
          {"inserted", t.inserted},
          {"aug_modes", t.aug_modes},
          {"loss_anchor", t.loss_anchor},
          {"loss_gen", t.loss_gen},
          {"loss_reg", t.loss_reg},
          {"total", t.total},
          {"restored", t.restored},
          {"restored_count", t.restored_count}};
}

inline StepTrace trace_from_json(const json& j) {
  StepTrace t;
  ObjectReader(j, "trace")("step", t.step)("subset", t.subset)("inserted", t.inserted)("aug_modes", t.aug_modes)(
      "loss_anchor", t.loss_anchor)("loss_gen", t.loss_gen)("loss_reg", t.loss_reg)("total", t.total)(
      "restored", t.restored)("restored_count", t.restored_count)
      .done();
  return t;
}

// ---------------------------------------------------------------------------
// Pipeline.

// Everything shared by the presets of one seed: scene, captures, prefit,
// inserted view and its registration.
struct SeedContext {
  std::uint64_t seed = 0;
  SceneSpec scene;
  std::vector<ViewRecord> captured;
  PrefitResult fit;
  InsertedView inserted;
  RegisterResult reg;
  std::vector<CameraParams> sweep;
  EvalReport reference;
  std::vector<int> captured_ids() const {
    std::vector<int> ids;
    for (const ViewRecord& v : captured) ids.push_back(v.view_id);
    return ids;
  }
};

template <class F>
auto run_stage(const char* stage, std::uint64_t seed, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, seed, e.what());
  }
}

inline SeedContext build_seed_context(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedContext ctx;
  ctx.seed = seed;
  ctx.scene = cfg.scene.resolve(seed);
  const HeightField field = run_stage("synthesize", seed, [&] { return build_scene(ctx.scene); });
  ctx.captured = run_stage("synthesize", seed, [&] { return make_capture_set(field, cfg.rig); });
  PrefitConfig pc = cfg.prefit;
  pc.seed = seed;
  ctx.fit = run_stage("prefit", seed, [&] { return prefit(ctx.captured, ctx.scene.extent, pc); });
  ctx.inserted = run_stage("synthesize", seed, [&] {
    return make_inserted_view(field, cfg.inserted_camera.camera(cfg.rig.intrinsics), cfg.misalignment.resolve(seed),
                              cfg.inserted_camera.view_id);
  });
  ctx.reg = run_stage("register", seed,
                      [&] { return register_inserted_view(ctx.fit.theta, ctx.inserted.observed, cfg.registration); });
  ctx.sweep = cfg.sweep.cameras(cfg.rig);
  ctx.reference = run_stage("evaluate", seed, [&] {
    return evaluate(ctx.reg.theta, ctx.captured, ctx.inserted.observed, ctx.inserted.truth, ctx.sweep);
  });
  return ctx;
}

struct RunArtifact {
  RunReport report;
  std::vector<StepTrace> traces;
  ModelParams theta_star;
};

inline RunArtifact run_preset(const SeedContext& ctx, const ExperimentConfig& cfg, const std::string& preset,
                              const std::string& seed_source = "config") {
  RunArtifact a;
  RunReport& r = a.report;
  r.config = cfg;
  r.config.preset = preset;
  r.config.seeds = std::vector<std::uint64_t>{ctx.seed};
  r.preset = preset;
  r.seed = ctx.seed;
  r.seed_source = seed_source;
  r.tta = resolve_preset(cfg.tta, preset, cfg.rig.n);
  r.tta.seed = ctx.seed;
  r.prefit_initial_loss = ctx.fit.initial_loss;
  r.prefit_final_loss = ctx.fit.final_loss;
  r.registration = RegistrationSummary{ctx.reg.misaligned_warning, ctx.reg.pose_residual, ctx.reg.residual_mean_abs,
                                       ctx.reg.best_start};
  r.reference = ctx.reference;

  const TTAProblem prob{ctx.captured_ids(), ctx.inserted.observed};
  TTAResult res = run_stage("tta", ctx.seed, [&] { return run_tta(ctx.reg.theta, prob, r.tta); });
  r.final = run_stage("evaluate", ctx.seed, [&] {
    return evaluate(res.theta_star, ctx.captured, ctx.inserted.observed, ctx.inserted.truth, ctx.sweep);
  });

  RunSummary& s = r.summary;
  s.captured_si_prefit = r.reference.aggregates.si_depth;
  s.captured_si_final = r.final.aggregates.si_depth;
  s.captured_si_degradation = s.captured_si_final - s.captured_si_prefit;
  s.insertion_vs_observed_si = r.final.insertion_vs_observed.si_depth;
  s.insertion_vs_truth_si = r.final.insertion_vs_truth.si_depth;
  s.registered_vs_observed_si = r.reference.insertion_vs_observed.si_depth;
  s.registered_vs_truth_si = r.reference.insertion_vs_truth.si_depth;
  s.steps = int(res.traces.size());
  int inserts = 0;
  for (const StepTrace& t : res.traces) {
    inserts += t.inserted;
    s.restore_events += t.restored;
  }
  s.insert_rate = res.traces.empty() ? 0.0 : double(inserts) / double(res.traces.size());
  a.traces = std::move(res.traces);
  a.theta_star = std::move(res.theta_star);
  return a;
}

// ---------------------------------------------------------------------------
// Output files.

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw IoError("cannot write '" + path.string() + "'");
}

// Binary 16-bit PGM, big-endian samples.
inline void write_pgm16(const std::filesystem::path& path, std::size_t w, std::size_t h,
                        const std::vector<std::uint16_t>& gray) {
  if (gray.size() != w * h) throw ShapeError("write_pgm16", "pixel count");
  std::ofstream os(path, std::ios::binary);
  os << "P5\n" << w << " " << h << "\n65535\n";
  for (std::uint16_t g : gray) {
    const char b[2] = {char(g >> 8), char(g & 0xff)};
    os.write(b, 2);
  }
  if (!os) throw IoError("cannot write '" + path.string() + "'");
}

// Valid pixels map linearly from [lo, hi] onto [1, 65535]; invalid pixels are 0.
inline std::vector<std::uint16_t> to_gray(const Tensor& v, const Mask& valid, double lo, double hi) {
  std::vector<std::uint16_t> g(v.size(), 0);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!valid[i]) continue;
    const double t = std::clamp((v[i] - lo) / span, 0.0, 1.0);
    g[i] = std::uint16_t(1 + std::lround(65534.0 * t));
  }
  return g;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_images(const std::filesystem::path& dir, const RunArtifact& a, const SeedContext& ctx) {
  const DepthRange range = scene_depth_range(ctx.captured);
  const int g = ctx.inserted.observed.view_id;
  const ViewRecord pred = forward_view(a.theta_star, g);
  const ViewRecord& obs = ctx.inserted.observed;
  const Mask both = mask_and(pred.valid, obs.valid);
  Tensor err(pred.depth.shape(), 0.0);
  double emax = 0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    if (!both[i]) continue;
    err[i] = std::fabs(pred.depth[i] - obs.depth[i]);
    emax = std::max(emax, err[i]);
  }
  if (emax == 0) emax = 1;
  const std::size_t w = pred.width(), h = pred.height();
  write_pgm16(dir / "depth_inserted_pred.pgm", w, h, to_gray(pred.depth, pred.valid, range.lo, range.hi));
  write_pgm16(dir / "depth_inserted_observed.pgm", w, h, to_gray(obs.depth, obs.valid, range.lo, range.hi));
  write_pgm16(dir / "error_inserted.pgm", w, h, to_gray(err, both, 0.0, emax));
  std::ostringstream os;
  os << "# Linear mapping of 16-bit PGM samples. 0 marks an invalid pixel.\n"
     << "# Valid pixels: gray = 1 + round(65534 * clamp((value - lo) / (hi - lo), 0, 1)).\n"
     << "# value = lo + (gray - 1) / 65534 * (hi - lo)\n"
     << "file,quantity,lo,hi\n"
     << "depth_inserted_pred.pgm,camera-frame depth of the adapted model at the inserted view," << fmt_double(range.lo)
     << "," << fmt_double(range.hi) << "\n"
     << "depth_inserted_observed.pgm,camera-frame depth of the inserted observation," << fmt_double(range.lo) << ","
     << fmt_double(range.hi) << "\n"
     << "error_inserted.pgm,absolute depth difference prediction vs observation,0," << fmt_double(emax) << "\n";
  write_text(dir / "images.txt", os.str());
}

inline std::string trace_jsonl(const std::vector<StepTrace>& traces) {
  std::string s;
  for (const StepTrace& t : traces) s += trace_to_json(t).dump() + "\n";
  return s;
}

inline std::filesystem::path run_dir(const std::filesystem::path& out, const std::string& preset, std::uint64_t seed) {
  return out / preset / ("seed_" + std::to_string(seed));
}

inline void write_run(const std::filesystem::path& dir, const RunArtifact& a, const SeedContext& ctx,
                      bool images) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  write_text(dir / "report.json", report_to_json(a.report).dump(2) + "\n");
  write_text(dir / "trace.jsonl", trace_jsonl(a.traces));
  save_checkpoint(a.theta_star, (dir / "theta_star.sxmp").string());
  if (images) write_images(dir, a, ctx);
}

// ---------------------------------------------------------------------------
// Suite driver.

struct SuiteResult {
  std::vector<std::string> presets;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<RunReport>> reports;         // [preset][seed]
  std::vector<std::vector<std::vector<StepTrace>>> traces;  // [preset][seed]

  const RunReport& at(const std::string& preset, std::size_t seed_index) const {
    for (std::size_t p = 0; p < presets.size(); ++p)
      if (presets[p] == preset) return reports[p][seed_index];
    throw ContractError("suite has no preset '" + preset + "'");
  }
  bool has(const std::string& preset) const {
    return std::find(presets.begin(), presets.end(), preset) != presets.end();
  }
};

using ProgressFn = std::function<void(const std::string&)>;

struct SuiteOptions {
  std::vector<std::string> presets;
  std::vector<std::uint64_t> seeds;
  std::string seed_source = "config";
  unsigned threads = 1;
  std::optional<std::filesystem::path> out_dir;  // nothing is written when empty
  bool write_images = true;
  ProgressFn progress;
};

// Seeds run in parallel; each seed builds its context once and then runs every
// preset in order. Results are independent of the thread count.
inline SuiteResult run_suite(const ExperimentConfig& cfg, const SuiteOptions& opt) {
  cfg.validate();
  for (const std::string& p : opt.presets) resolve_preset(cfg.tta, p, cfg.rig.n);
  SuiteResult out;
  out.presets = opt.presets;
  out.seeds = opt.seeds;
  out.reports.assign(opt.presets.size(), std::vector<RunReport>(opt.seeds.size()));
  out.traces.assign(opt.presets.size(), std::vector<std::vector<StepTrace>>(opt.seeds.size()));

  std::mutex mu;
  auto report = [&](const std::string& msg) {
    if (!opt.progress) return;
    std::lock_guard<std::mutex> lock(mu);
    opt.progress(msg);
  };
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(opt.seeds.size());
  auto worker = [&] {
    for (std::size_t si = next++; si < opt.seeds.size(); si = next++) {
      const std::uint64_t seed = opt.seeds[si];
      try {
        const SeedContext ctx = build_seed_context(cfg, seed);
        report("seed " + std::to_string(seed) + ": prefit and registration done");
        for (std::size_t pi = 0; pi < opt.presets.size(); ++pi) {
          RunArtifact a = run_preset(ctx, cfg, opt.presets[pi], opt.seed_source);
          if (opt.out_dir) {
            run_stage("write", seed, [&] {
              write_run(run_dir(*opt.out_dir, opt.presets[pi], seed), a, ctx, opt.write_images);
              return 0;
            });
          }
          report("seed " + std::to_string(seed) + ": " + opt.presets[pi] + " done");
          out.reports[pi][si] = std::move(a.report);
          out.traces[pi][si] = std::move(a.traces);
        }
      } catch (const std::exception& e) {
        errors[si] = e.what();
        report(std::string("error: ") + e.what());
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(opt.threads, unsigned(opt.seeds.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (const std::string& e : errors)
    if (!e.empty()) throw Error(e);
  return out;
}

struct Spread {
  double mean = 0, std = 0;
};

// Mean and sample standard deviation.
inline Spread spread(const std::vector<double>& v) {
  Spread s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x / double(v.size());
  if (v.size() > 1) {
    double q = 0;
    for (double x : v) q += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(q / double(v.size() - 1));
  }
  return s;
}

struct TableColumn {
  const char* name;
  double (*get)(const RunReport&);
};

inline const std::vector<TableColumn>& table_columns() {
  static const std::vector<TableColumn> cols{
      {"captured_si_degradation", [](const RunReport& r) { return r.summary.captured_si_degradation; }},
      {"captured_depth_psnr", [](const RunReport& r) { return r.final.aggregates.depth_psnr; }},
      {"captured_depth_ssim", [](const RunReport& r) { return r.final.aggregates.depth_ssim; }},
      {"captured_normal_deg", [](const RunReport& r) { return r.final.aggregates.normal_deg; }},
      {"insertion_vs_observed_si", [](const RunReport& r) { return r.summary.insertion_vs_observed_si; }},
      {"insertion_vs_truth_si", [](const RunReport& r) { return r.summary.insertion_vs_truth_si; }},
      {"insertion_vs_observed_normal_deg",
       [](const RunReport& r) { return r.final.insertion_vs_observed.normal_deg; }},
      {"novel_depth_tv", [](const RunReport& r) { return r.final.aggregates.novel_depth_tv; }},
  };
  return cols;
}

// One row per preset, in suite order, with mean and standard deviation over seeds.
inline std::string suite_table_csv(const SuiteResult& s) {
  std::ostringstream os;
  os << "preset,seeds";
  for (const TableColumn& c : table_columns()) os << "," << c.name << "_mean," << c.name << "_std";
  os << "\n";
  for (std::size_t p = 0; p < s.presets.size(); ++p) {
    os << s.presets[p] << "," << s.seeds.size();
    for (const TableColumn& c : table_columns()) {
      std::vector<double> v;
      for (const RunReport& r : s.reports[p]) v.push_back(c.get(r));
      const Spread sp = spread(v);
      os << "," << fmt_double(sp.mean) << "," << fmt_double(sp.std);
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checks reported through --check.

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline bool report_is_finite(const RunReport& r) {
  bool ok = true;
  auto visit = [&](const json& j, auto&& self) -> void {
    if (j.is_number_float()) ok = ok && std::isfinite(j.get<double>());
    if (j.is_structured())
      for (const json& c : j) self(c, self);
  };
  visit(report_to_json(r), visit);
  return ok;
}

// Per-run invariants visible in the report and trace.
inline std::vector<CheckResult> run_checks(const RunReport& r, const std::vector<StepTrace>& traces) {
  std::vector<CheckResult> out;
  const std::string tag = r.preset + "/seed_" + std::to_string(r.seed) + ": ";
  out.push_back({tag + "one trace per step", int(traces.size()) == r.tta.steps,
                 std::to_string(traces.size()) + " traces for " + std::to_string(r.tta.steps) + " steps"});
  out.push_back({tag + "report values finite", report_is_finite(r), ""});
  bool gen_zero = true, restore_ok = true, insert_ok = true;
  for (const StepTrace& t : traces) {
    if (!t.inserted && t.loss_gen != 0) gen_zero = false;
    if (t.restored != (t.step % r.tta.restore_period == 0)) restore_ok = false;
    if (r.tta.insert_prob == 1 && !t.inserted) insert_ok = false;
    if (r.tta.insert_prob == 0 && t.inserted) insert_ok = false;
  }
  out.push_back({tag + "inserted-view loss zero on non-insertion steps", gen_zero, ""});
  out.push_back({tag + "restoration exactly every K-th step", restore_ok, ""});
  out.push_back({tag + "insertion frequency matches p in {0, 1}", insert_ok,
                 "insert rate " + fmt_double(r.summary.insert_rate)});
  if (r.config.misalignment.is_zero()) {
    const double thr = r.config.registration.warning_threshold;
    out.push_back({tag + "aligned insertion stays below the registration threshold",
                   r.summary.insertion_vs_truth_si < thr,
                   "insertion-vs-truth SI " + fmt_double(r.summary.insertion_vs_truth_si) + " vs " + fmt_double(thr)});
  }
  return out;
}

// Seed-majority comparisons between presets; only those whose presets ran.
inline std::vector<CheckResult> suite_checks(const SuiteResult& s) {
  std::vector<CheckResult> out;
  const std::size_t n = s.seeds.size();
  auto count = [&](const std::string& a, const std::string& b, auto pred) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) k += pred(s.at(a, i), s.at(b, i)) ? 1 : 0;
    return k;
  };
  auto majority = [&](const std::string& name, std::size_t k, double frac) {
    const std::size_t need = std::size_t(std::ceil(frac * double(n) - 1e-9));
    out.push_back({name, k >= need, std::to_string(k) + "/" + std::to_string(n) + " seeds (need " +
                                        std::to_string(need) + ")"});
  };
  auto deg = [](const RunReport& r) { return r.summary.captured_si_degradation; };
  auto ins = [](const RunReport& r) { return r.summary.insertion_vs_observed_si; };
  if (s.has("full") && s.has("hard_supervision")) {
    majority("full degrades captured views less than hard supervision",
             count("full", "hard_supervision", [&](auto& a, auto& b) { return deg(a) < deg(b); }), 0.8);
  }
  if (s.has("full") && s.has("baseline")) {
    majority("full has lower insertion residual than no adaptation",
             count("full", "baseline", [&](auto& a, auto& b) { return ins(a) < ins(b); }), 0.8);
  }
  if (s.has("full") && s.has("no_anchor")) {
    majority("removing anchor distillation worsens captured degradation",
             count("no_anchor", "full", [&](auto& a, auto& b) { return deg(a) > deg(b); }), 0.8);
  }
  if (s.has("self_distill_p1") && s.has("self_distill")) {
    majority("p=1 has lower insertion residual and higher degradation than p=0.5",
             count("self_distill_p1", "self_distill",
                   [&](auto& a, auto& b) { return ins(a) < ins(b) && deg(a) > deg(b); }),
             0.7);
  }
  for (std::size_t p = 0; p < s.presets.size(); ++p)
    for (std::size_t i = 0; i < n; ++i)
      for (CheckResult& c : run_checks(s.reports[p][i], s.traces[p][i]))
        if (!c.pass) out.push_back(std::move(c));
  return out;
}

// Seeds: explicit list, or `count` consecutive seeds from `base`. Without
// either, the base comes from system entropy.
struct SeedChoice {
  std::vector<std::uint64_t> seeds;
  std::string source;
};

inline SeedChoice choose_seeds(const ExperimentConfig& cfg, std::optional<std::uint64_t> cli_seed,
                               std::optional<int> cli_count) {
  SeedChoice c;
  if (cli_seed) {
    for (int i = 0; i < cli_count.value_or(1); ++i) c.seeds.push_back(*cli_seed + std::uint64_t(i));
    c.source = "cli";
  } else if (cfg.seeds) {
    c.seeds = *cfg.seeds;
    if (cli_count) c.seeds.resize(std::min<std::size_t>(c.seeds.size(), std::size_t(*cli_count)));
    c.source = "config";
  } else {
    std::random_device rd;
    const std::uint64_t base = (std::uint64_t(rd()) << 32) ^ rd();
    for (int i = 0; i < cli_count.value_or(10); ++i) c.seeds.push_back(base + std::uint64_t(i));
    c.source = "entropy";
  }
  if (c.seeds.empty()) throw ConfigError("no seeds selected");
  return c;
}

}  // namespace scenex
