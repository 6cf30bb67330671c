#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "neuropipe/error.hpp"
#include "neuropipe/gradcheck.hpp"
#include "neuropipe/harness.hpp"

using namespace neuropipe;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kCheckFailure = 3;

std::vector<std::set<Modality>> parse_subsets(const std::string& text) {
  std::vector<std::set<Modality>> out;
  std::stringstream ss(text);
  std::string group;
  while (std::getline(ss, group, ';')) {
    std::set<Modality> s;
    std::stringstream gs(group);
    std::string name;
    while (std::getline(gs, name, '+')) {
      if (name.empty()) continue;
      const auto m = parse_modality(name);
      require(m.has_value(), Errc::BadConfig, "unknown modality '" + name + "' in --subsets");
      s.insert(*m);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neuropipe: lesion classification, detection and segmentation on MR slices"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "key = value config file");
    sub->add_option("-s,--set", overrides, "override, key=value (repeatable)");
  };
  auto* train = app.add_subcommand("train", "train the configured model and write a checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate the checkpoint and write metrics.csv");
  auto* predict = app.add_subcommand("predict", "write predictions for the evaluation split");
  auto* ablate = app.add_subcommand("ablate", "modality-subset ablation table");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset and manifest");
  for (auto* s : {train, evaluate, predict, ablate, gen}) with_config(s);
  std::string subsets;
  ablate->add_option("--subsets", subsets, "e.g. 'T1;FLAIR;T1+T2+FLAIR' (default: the nine-row table)");
  std::vector<int> seeds{1, 2, 3};
  gradcheck->add_option("--seeds", seeds, "seeds to run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  if (gradcheck->parsed()) {
    bool ok = true;
    try {
      for (int seed : seeds)
        for (const auto& r : run_gradient_suite(static_cast<std::uint64_t>(seed))) {
          std::printf("%s seed %d %-40s max rel error %.3e (tol %.0e)\n", r.passed() ? "PASS" : "FAIL", seed,
                      r.name.c_str(), r.max_rel_error, r.tolerance);
          ok = ok && r.passed();
        }
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kRuntimeError;
    }
    return ok ? 0 : kCheckFailure;
  }

  RunConfig rc;
  try {
    Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    rc = resolve_run_config(cfg);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (train->parsed()) {
      const RunOutputs out = run_train(rc);
      std::cout << "checkpoint " << out.checkpoint.string() << "\nhistory " << out.history.string() << "\n";
      if (!out.history_rows.rows.empty()) {
        const auto& last = out.history_rows.rows.back();
        std::cout << "final iteration " << last.iteration << " train_loss " << last.train_loss << " accuracy "
                  << last.accuracy << "\n";
      }
    } else if (evaluate->parsed()) {
      run_evaluate(rc).write(std::cout);
    } else if (predict->parsed()) {
      std::cout << run_predict(rc).string() << "\n";
    } else if (gen->parsed()) {
      std::cout << run_generate_data(rc).string() << "\n";
    } else if (ablate->parsed()) {
      std::vector<std::set<Modality>> sets;
      try {
        sets = subsets.empty() ? table3_subsets() : parse_subsets(subsets);
      } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
      }
      run_ablation(rc, sets).write(std::cout);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    const bool config = e.code() == Errc::BadConfig || e.code() == Errc::ParseError;
    return config ? kConfigError : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
