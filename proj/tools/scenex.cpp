// Command-line driver: run, ablate, check, render, config.
// Exit codes: 0 success, 1 error, 2 a requested check failed.

#include <iostream>

#include "CLI11.hpp"
#include "scenex/acceptance.hpp"

namespace {

using namespace scenex;
namespace fs = std::filesystem;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> seeds;
  std::string out;
  unsigned threads = 1;
  bool no_images = false;
  bool check = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON); built-in defaults when omitted")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "first seed; overrides the config seeds");
  cmd->add_option("--seeds", a.seeds, "number of seeds")->check(CLI::PositiveNumber);
  cmd->add_option("--out", a.out, "output directory (default: config output_dir)");
  cmd->add_option("--threads", a.threads, "worker threads over seeds")->check(CLI::PositiveNumber);
  cmd->add_flag("--no-images", a.no_images, "skip PGM outputs");
  cmd->add_flag("--check", a.check, "evaluate run invariants and seed-majority comparisons; exit 2 on failure");
}

ExperimentConfig load(const CommonArgs& a) { return a.config.empty() ? ExperimentConfig{} : load_config(a.config); }

std::vector<std::string> split_presets(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void progress(const std::string& msg) { std::cerr << "[scenex] " << msg << std::endl; }

int report_checks(const std::vector<CheckResult>& checks) {
  bool ok = true;
  for (const CheckResult& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : ": " + c.detail) << "\n";
    ok = ok && c.pass;
  }
  return ok ? 0 : 2;
}

int run_presets(const CommonArgs& a, const std::vector<std::string>& presets, bool table) {
  const ExperimentConfig cfg = load(a);
  const SeedChoice seeds = choose_seeds(cfg, a.seed, a.seeds);
  const fs::path out = a.out.empty() ? fs::path(cfg.output_dir) : fs::path(a.out);
  SuiteOptions opt;
  opt.presets = presets;
  opt.seeds = seeds.seeds;
  opt.seed_source = seeds.source;
  opt.threads = a.threads;
  opt.out_dir = out;
  opt.write_images = cfg.write_images && !a.no_images;
  opt.progress = progress;
  std::string seed_list;
  for (std::uint64_t s : seeds.seeds) seed_list += (seed_list.empty() ? "" : ",") + std::to_string(s);
  progress("seeds (" + seeds.source + "): " + seed_list);
  const SuiteResult res = run_suite(cfg, opt);
  if (table) {
    write_text(out / "table.csv", suite_table_csv(res));
    std::cout << suite_table_csv(res);
  }
  for (std::size_t p = 0; p < res.presets.size(); ++p)
    for (std::size_t s = 0; s < res.seeds.size(); ++s)
      progress("wrote " + run_dir(out, res.presets[p], res.seeds[s]).string());
  if (!a.check) return 0;
  std::vector<CheckResult> checks = suite_checks(res);
  if (res.seeds.size() == 1 || presets.size() == 1) {
    // Majority comparisons need several presets; report the per-run invariants instead.
    checks.clear();
    for (std::size_t p = 0; p < res.presets.size(); ++p)
      for (std::size_t s = 0; s < res.seeds.size(); ++s)
        for (CheckResult& c : run_checks(res.reports[p][s], res.traces[p][s])) checks.push_back(std::move(c));
  }
  return report_checks(checks);
}

int render(const std::string& checkpoint, const std::string& out_dir) {
  const ModelParams theta = load_checkpoint(checkpoint);
  const fs::path out(out_dir);
  fs::create_directories(out);
  std::vector<ViewRecord> views;
  for (const auto& [id, v] : theta.views) views.push_back(forward_view(theta, id));
  const DepthRange range = scene_depth_range(views);
  std::ostringstream side;
  side << "# Linear mapping of 16-bit PGM samples. 0 marks an invalid pixel.\n"
       << "# value = lo + (gray - 1) / 65534 * (hi - lo)\n"
       << "file,view_id,lo,hi,valid_fraction\n";
  for (const ViewRecord& v : views) {
    const std::string name = "depth_view" + std::to_string(v.view_id) + ".pgm";
    write_pgm16(out / name, v.width(), v.height(), to_gray(v.depth, v.valid, range.lo, range.hi));
    side << name << "," << v.view_id << "," << fmt_double(range.lo) << "," << fmt_double(range.hi) << ","
         << fmt_double(valid_fraction(v)) << "\n";
  }
  write_text(out / "render.txt", side.str());
  std::cerr << "[scenex] rendered " << views.size() << " views to " << out.string() << std::endl;
  return 0;
}

int check(const CommonArgs& a, const std::string& details) {
  acceptance::Options opt;
  if (!a.config.empty()) opt.config = load_config(a.config);
  if (a.seed) opt.base_seed = *a.seed;
  if (a.seeds) opt.seeds = *a.seeds;
  opt.threads = a.threads;
  std::ofstream det(details);
  opt.details = &det;
  bool ok = true;
  acceptance::run_all(opt, [&](const acceptance::CriterionResult& r) {
    std::cout << acceptance::line(r) << std::endl;
    det << acceptance::line(r) << "\n";
    ok = ok && r.pass;
  });
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depth-scene adaptation experiments"};
  app.require_subcommand(1);

  CommonArgs run_args;
  std::string run_preset_name;
  CLI::App* run = app.add_subcommand("run", "run one preset over the selected seeds");
  add_common(run, run_args);
  run->add_option("--preset", run_preset_name, "preset (default: config preset)");

  CommonArgs ablate_args;
  std::string ablate_presets;
  CLI::App* ablate = app.add_subcommand("ablate", "run a preset suite and write table.csv");
  add_common(ablate, ablate_args);
  ablate->add_option("--preset", ablate_presets, "comma-separated presets (default: config suite)");

  CommonArgs check_args;
  std::string details = "acceptance_details.txt";
  CLI::App* chk = app.add_subcommand("check", "run the acceptance suite");
  chk->add_option("--config", check_args.config, "benchmark config")->check(CLI::ExistingFile);
  chk->add_option("--seed", check_args.seed, "first seed");
  chk->add_option("--seeds", check_args.seeds, "number of seeds")->check(CLI::PositiveNumber);
  chk->add_option("--threads", check_args.threads, "worker threads")->check(CLI::PositiveNumber);
  chk->add_option("--details", details, "file for per-seed numbers");

  std::string checkpoint, render_out = "render";
  CLI::App* rnd = app.add_subcommand("render", "render depth maps of every view in a checkpoint");
  rnd->add_option("checkpoint", checkpoint, "theta_star.sxmp")->required()->check(CLI::ExistingFile);
  rnd->add_option("--out", render_out, "output directory");

  std::string cfg_in, cfg_out;
  CLI::App* cfg = app.add_subcommand("config", "print the resolved config as JSON");
  cfg->add_option("--config", cfg_in, "config to resolve (default: built-in defaults)")->check(CLI::ExistingFile);
  cfg->add_option("--out", cfg_out, "write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*run) {
      const std::string preset = run_preset_name.empty() ? load(run_args).preset : run_preset_name;
      return run_presets(run_args, {preset}, false);
    }
    if (*ablate) {
      const std::vector<std::string> presets =
          ablate_presets.empty() ? load(ablate_args).suite : split_presets(ablate_presets);
      return run_presets(ablate_args, presets, true);
    }
    if (*chk) return check(check_args, details);
    if (*rnd) return render(checkpoint, render_out);
    if (*cfg) {
      const ExperimentConfig c = cfg_in.empty() ? ExperimentConfig{} : load_config(cfg_in);
      const std::string text = config_to_json(c).dump(2) + "\n";
      if (cfg_out.empty()) {
        std::cout << text;
      } else {
        write_text(cfg_out, text);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
