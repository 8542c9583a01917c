#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sts/harness.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int fail(const std::string& kind, const std::string& message, int code = 1) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

std::vector<sts::TriggerSetConfig> parse_trigger_sets(const std::vector<std::string>& rows) {
  std::vector<sts::TriggerSetConfig> out;
  for (const auto& row : rows) {
    sts::TriggerSetConfig t;
    char extra = 0;
    if (std::sscanf(row.c_str(), "%zu:%lf:%zu%c", &t.size, &t.alpha, &t.count, &extra) != 3) {
      throw sts::Error("config", "trigger set '" + row + "' is not SIZE:ALPHA:COUNT");
    }
    out.push_back(t);
  }
  return out;
}

struct Options {
  sts::ExperimentConfig config;
  std::vector<std::string> trigger_sets;
  std::string scan_mode = "regularized";
  std::size_t scan_size = 2;
  std::string run_dir;
};

std::vector<CLI::Option*> add_experiment_options(CLI::App& app, Options& o) {
  auto& c = o.config;
  app.add_option("--dataset-format", c.dataset_format, "synthetic, sts-raw or cifar10-binary")
      ->check(CLI::IsMember({"synthetic", "sts-raw", "cifar10-binary"}));
  app.add_option("--dataset", c.dataset_paths, "dataset files (sts-raw or CIFAR-10 batches)");
  app.add_option("--test-dataset", c.test_paths, "clean test files, same format");
  app.add_option("--synthetic-images", c.synthetic.num_images);
  app.add_option("--synthetic-test-images", c.synthetic_test_images);
  app.add_option("--synthetic-seed", c.synthetic.seed);
  app.add_option("--classes", c.arch.num_classes, "class count C (model and synthetic data)");
  app.add_option("--split-ratio", c.split_ratio, "attacking share of the dataset");
  app.add_option("--val-fraction", c.val_fraction);
  app.add_option("--pure-models", c.pure_models);
  app.add_option("--trigger-set", o.trigger_sets, "SIZE:ALPHA:COUNT, repeatable");
  app.add_option("--target-class", c.target_class);
  app.add_option("--poison-rate", c.poison_rate);
  app.add_option("--epochs", c.train.epochs);
  app.add_option("--train-lr", c.train.lr);
  app.add_option("--train-batch", c.train.batch);
  app.add_option("--weight-decay", c.train.weight_decay, "decoupled weight decay");
  app.add_option("--hidden", c.arch.hidden, "dense hidden widths");
  app.add_option("--min-tmtd", c.min_tmtd);
  app.add_option("--max-tmpd-drop", c.max_tmpd_drop);
  app.add_flag("!--no-gates", c.enforce_gates, "record attack gates without aborting");
  app.add_option("--scan-mode", o.scan_mode)->check(CLI::IsMember({"regularized", "fixed-size"}));
  app.add_option("--scan-size", o.scan_size, "patch side for fixed-size scans");
  app.add_option("--scan-lambda", c.scan.mode.lambda);
  app.add_option("--scan-restarts", c.scan.restarts);
  app.add_option("--scan-steps", c.scan.steps);
  app.add_option("--scan-batch", c.scan.batch);
  app.add_option("--scan-lr", c.scan.lr);
  app.add_option("--delta", c.delta);
  app.add_flag("--analyze", c.analyze, "include the patch-analysis phase");
  app.add_option("--analysis-models", c.analysis_models);
  app.add_option("--analysis-size", c.analysis_scan.mode.size);
  app.add_option("--analysis-restarts", c.analysis_scan.restarts);
  app.add_option("--analysis-steps", c.analysis_scan.steps);
  app.add_option("--analysis-effectiveness", c.analysis_effectiveness);
  app.add_option("--k-max", c.cluster.k_max);
  app.add_option("--seed", c.seed);
  return app.get_options([](const CLI::Option* opt) { return opt->get_configurable() && !opt->get_lnames().empty(); });
}

sts::ExperimentConfig finish(Options& o) {
  auto c = o.config;
  c.synthetic.num_classes = c.arch.num_classes;
  if (!o.trigger_sets.empty()) c.trigger_sets = parse_trigger_sets(o.trigger_sets);
  if (o.scan_mode == "fixed-size") {
    c.scan.mode = sts::ScanMode::fixed_size(o.scan_size);
  } else {
    c.scan.mode = sts::ScanMode::regularized(c.scan.mode.lambda);
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trigger-scanning toolkit: trains pure and Trojan models, scans them and reports entropy verdicts"};
  app.set_version_flag("--version", sts::kToolVersion);
  app.require_subcommand(1);

  Options o;
  std::size_t workers = 1;
  app.set_config("--config", "", "TOML file of long-option values");
  const auto experiment_options = add_experiment_options(app, o);
  app.add_option("--run-dir", o.run_dir, "run directory");
  app.add_option("-j,--workers", workers, "model-level worker threads (0 = all cores)");

  auto* show = app.add_subcommand("show-config", "print the effective config as JSON");
  std::vector<CLI::App*> phases;
  for (const auto& name : sts::protocol_phases()) phases.push_back(app.add_subcommand(name)->fallthrough());
  auto* run_all = app.add_subcommand("run-all", "every phase in order, resuming verified work")->fallthrough();
  show->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    const fs::path dir = o.run_dir;
    const auto config = finish(o);
    if (show->parsed()) {
      config.validate();
      std::cout << sts::to_json(config).dump(2) << '\n';
      return 0;
    }
    if (o.run_dir.empty()) return fail("usage", "--run-dir is required", 2);
    if (app.got_subcommand("report")) {
      auto report = sts::build_report(dir);
      auto run = sts::Run::open(dir);
      run.run_phase("report");
      std::cout << report.dump(2) << '\n';
      return 0;
    }
    // A fresh directory takes the command-line config; an existing run keeps
    // its snapshot and rejects a conflicting one.
    const bool fresh = !fs::exists(dir / "config.json");
    bool configured = false;
    for (const auto* opt : experiment_options) configured = configured || opt->count() > 0;
    auto run = fresh || configured ? sts::Run::create(dir, config) : sts::Run::open(dir);
    run.set_workers(workers);
    if (run_all->parsed()) {
      run.run_all();
    } else {
      for (auto* p : phases) {
        if (p->parsed()) run.run_phase(p->get_name());
      }
    }
    std::cerr << "done: " << dir.string() << '\n';
    return 0;
  } catch (const sts::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
}
