// Acceptance binary: one PASS/FAIL line per criterion on stdout, per-seed
// numbers in the details file. Exit status is nonzero if any criterion fails.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "scenex/acceptance.hpp"

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  scenex::acceptance::Options opt;
  std::string details = "acceptance_details.txt";
  std::string config;
  std::vector<int> only;
  app.add_option("--seeds", opt.seeds, "number of seeds")->check(CLI::PositiveNumber);
  app.add_option("--seed", opt.base_seed, "first seed");
  app.add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--config", config, "benchmark config (defaults to the built-in misaligned benchmark)");
  app.add_option("--details", details, "file for per-seed numbers");
  app.add_option("--only", only, "run only these criteria (1, 2, 3, 5, 6, 7 individually; 4 and 8 together)");
  CLI11_PARSE(app, argc, argv);

  try {
    if (!config.empty()) opt.config = scenex::load_config(config);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  std::ofstream det(details);
  opt.details = &det;
  auto emit = [&](const scenex::acceptance::CriterionResult& r) {
    std::cout << scenex::acceptance::line(r) << std::endl;
    det << scenex::acceptance::line(r) << "\n";
    det.flush();
  };

  namespace A = scenex::acceptance;
  std::vector<A::CriterionResult> results;
  if (only.empty()) {
    results = A::run_all(opt, emit);
  } else {
    for (int id : only) {
      std::vector<A::CriterionResult> rs;
      switch (id) {
        case 1: rs = {A::gradient_correctness(opt)}; break;
        case 2: rs = {A::exact_semantics(opt)}; break;
        case 3: rs = {A::consistency(opt)}; break;
        case 4:
        case 8: {
          const A::SuiteRun run = A::run_benchmark(opt);
          rs = {A::directional(opt, run), A::runtime(opt, run)};
          break;
        }
        case 5: rs = {A::augmentation(opt)}; break;
        case 6: rs = {A::determinism(opt)}; break;
        case 7: rs = {A::metric_selftests(opt)}; break;
        default: std::cerr << "unknown criterion " << id << "\n"; return 1;
      }
      for (const auto& r : rs) {
        emit(r);
        results.push_back(r);
      }
    }
  }
  bool ok = true;
  for (const auto& r : results) ok = ok && r.pass;
  return ok ? 0 : 1;
}
