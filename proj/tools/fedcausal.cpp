// fedcausal: Monte Carlo runner and data utilities.
#include "fedcausal/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fc = fedcausal;

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct RunArgs {
  std::string config;
  bool full_scale = false;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  int replications = 0;
};

/// Config file, then FEDCAUSAL_SEED, then command-line flags.
fc::ScenarioConfig resolve(const RunArgs& a) {
  fc::ScenarioConfig cfg = a.config.empty() ? fc::ScenarioConfig{} : fc::load_config(a.config);
  if (const char* env = std::getenv("FEDCAUSAL_SEED")) {
    try {
      std::size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      fc::fail(fc::ErrorCode::ConfigError, std::string("FEDCAUSAL_SEED is not an unsigned integer: ") + env);
    }
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.full_scale) cfg.replications = fc::kFullScaleReplications;
  if (a.replications > 0) cfg.replications = a.replications;
  if (!a.out.empty()) cfg.output_dir = a.out;
  fc::check_config(cfg);
  return cfg;
}

void print_summary(const fc::RunSummary& s) {
  std::cout << "[" << s.name << "] true ATE " << fc::format_double(s.truth.value) << " (se "
            << fc::format_double(s.truth.se) << "), " << s.replications << " replications, " << s.aborted
            << " aborted, " << s.regenerated << " regenerated\n";
  for (const auto& e : s.estimators) {
    std::cout << "  " << e.estimator << ": ";
    if (e.ok == 0) {
      std::cout << "undefined in " << e.undefined << ", failed in " << e.failed << "\n";
      continue;
    }
    std::cout << "mean " << e.mean << " bias " << e.bias << " var " << e.mc_variance << " (ok " << e.ok
              << ", undefined " << e.undefined << ", failed " << e.failed << ")";
    if (e.ci_count > 0) std::cout << " coverage " << e.coverage;
    std::cout << "\n";
  }
  if (!s.output_dir.empty()) std::cout << "  wrote " << s.output_dir << "\n";
}

void add_run_flags(CLI::App* cmd, RunArgs& a) {
  cmd->add_flag("--paper-scale", a.full_scale, "Use 1500 replications");
  cmd->add_option("--out", a.out, "Output directory");
  cmd->add_option("--seed", a.seed, "Master seed (overrides FEDCAUSAL_SEED and the config)");
  cmd->add_option("--jobs", a.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--replications", a.replications, "Override the replication count")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated ATE estimation: simulations and estimators"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run one scenario");
  run->add_option("--config", run_args.config, "Scenario JSON")->required()->check(CLI::ExistingFile);
  add_run_flags(run, run_args);

  RunArgs panel_args;
  bool all = false;
  auto* panels = app.add_subcommand("panels", "Run the (A, B) x (none, poor, good) grid");
  panels->add_flag("--all", all, "Run all six panels")->required();
  panels->add_option("--config", panel_args.config, "Base settings applied to every panel")
      ->check(CLI::ExistingFile);
  add_run_flags(panels, panel_args);

  RunArgs gen_args;
  std::string gen_dgp = "A", gen_regime = "good", gen_file;
  std::uint64_t gen_rep = 1;
  auto* gen = app.add_subcommand("generate", "Write one synthetic dataset as CSV");
  gen->add_option("--config", gen_args.config, "Scenario JSON")->check(CLI::ExistingFile);
  gen->add_option("--dgp", gen_dgp, "A or B (without --config)");
  gen->add_option("--regime", gen_regime, "none, poor or good (without --config)");
  gen->add_option("--seed", gen_args.seed, "Master seed");
  gen->add_option("--replication", gen_rep, "Replication index");
  gen->add_option("--output", gen_file, "CSV path")->required();

  std::string est_data, est_json;
  int est_rounds = 5000, est_boot = 0;
  std::uint64_t est_seed = 1;
  auto* est = app.add_subcommand("estimate", "Federated estimators on a site,w,y,x1..xd CSV");
  est->add_option("--data", est_data, "Input CSV")->required()->check(CLI::ExistingFile);
  est->add_option("--rounds", est_rounds, "FedAvg rounds")->check(CLI::PositiveNumber);
  est->add_option("--bootstrap", est_boot, "Bootstrap resamples (0 = none)");
  est->add_option("--seed", est_seed, "Seed for minibatches and bootstrap");
  est->add_option("--json", est_json, "Write full reports as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  fc::ScenarioConfig cfg;
  try {
    if (*run) cfg = resolve(run_args);
    if (*panels) cfg = resolve(panel_args);
    if (*gen) {
      cfg = resolve(gen_args);
      if (gen_args.config.empty()) {
        if (gen_dgp != "A" && gen_dgp != "B") fc::fail(fc::ErrorCode::ConfigError, "--dgp must be A or B");
        cfg.dgp = gen_dgp == "A" ? fc::DgpKind::A : fc::DgpKind::B;
        cfg.regime = fc::parse_overlap_regime(gen_regime);
        fc::apply_regime(cfg);
      }
    }
  } catch (const fc::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (*run) {
      print_summary(fc::run_scenario(cfg, fc::RunOptions{run_args.jobs, true, false}));
    } else if (*panels) {
      const auto runs = fc::run_matrix(fc::standard_panels(cfg), fc::RunOptions{panel_args.jobs, true, false});
      for (const auto& r : runs) print_summary(r);
      const auto path = (std::filesystem::path(cfg.output_dir) / "panels_summary.csv").string();
      fc::write_combined_summary(runs, path);
      std::cout << "combined summary: " << path << "\n";
    } else if (*gen) {
      fc::write_csv_file(gen_file, fc::generate(cfg, fc::ReplicationKey{cfg.seed, gen_rep, 0}));
    } else if (*est) {
      const auto fd = fc::read_csv_file(est_data);
      fc::EstimationSettings s;
      s.fedavg.rounds = est_rounds;
      s.fedavg.seed = est_seed;
      const auto nu = fc::fit_nuisances(fd, s);
      fc::Json reports = fc::Json::array();
      std::cout << fc::report_csv_header(fd.num_sites()) << "\n";
      std::size_t index = 0;
      for (const auto& name : fc::known_estimators()) {
        if (name.rfind("Centralized", 0) == 0) continue;
        auto out = fc::evaluate_estimator(name, fd, nu, est_boot > 0);
        if (!out.report) {
          std::cerr << name << ": " << out.message << "\n";
          continue;
        }
        if (est_boot > 0) {
          fc::RngHandle rng(est_seed, fc::stream_id(fc::StreamPurpose::Bootstrap, 0, index));
          out.report->ci = fc::bootstrap_terms(out.terms, est_boot, 0.95, rng).interval;
        }
        ++index;
        std::cout << fc::report_csv_row(*out.report, fd.num_sites()) << "\n";
        reports.push_back(fc::to_json(*out.report));
      }
      if (!est_json.empty()) {
        std::ofstream f(est_json);
        fc::Json doc{{"reports", reports}};
        if (nu.mw) doc["mw_model"] = fc::to_json(*nu.mw);
        if (nu.dw) doc["dw_model"] = fc::to_json(*nu.dw);
        f << doc.dump(2) << "\n";
      }
    }
  } catch (const fc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == fc::ErrorCode::ConfigError ? kConfigError : kRuntimeError;
  }
  return 0;
}
