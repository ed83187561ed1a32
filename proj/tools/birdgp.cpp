// Command-line front end: simulate | fit | predict | importance | evaluate |
// export-basis. Exit codes: 0 success, 2 usage or configuration error,
// 3 data error, 4 numerical failure.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "birdgp/cli.hpp"

namespace {

birdgp::ExperimentConfig resolve_config(const std::string& config_path,
                                        std::int64_t seed_override,
                                        int threads_override,
                                        const std::string& out_override) {
  birdgp::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = birdgp::load_config(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  if (threads_override > 0) cfg.threads = threads_override;
  if (!out_override.empty()) cfg.output_dir = out_override;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bird-gp: two-stage Bayesian image-on-image regression"};
  app.require_subcommand(1);

  std::string config_path, data_dir, model_dir, out_path;
  std::string pred_path, obs_path, labels_path, lo_path, hi_path;
  std::string target = "outcome", importance_csv;
  std::int64_t seed_override = -1;
  int threads_override = 0;
  double interval_level = 0.0;
  std::size_t interval_replicates = 20;
  std::uint64_t predict_seed = 1;

  auto* sim = app.add_subcommand("simulate", "generate synthetic datasets");
  sim->add_option("--config", config_path, "key=value config file");
  sim->add_option("--out", out_path, "output directory (default: config output_dir)");
  sim->add_option("--seed", seed_override, "override config seed");

  auto* fit = app.add_subcommand("fit", "fit the two-stage model");
  fit->add_option("--config", config_path, "key=value config file");
  fit->add_option("--data", data_dir, "training dataset directory")->required();
  fit->add_option("--out", out_path, "output directory (default: config output_dir)");
  fit->add_option("--seed", seed_override, "override config seed");
  fit->add_option("--threads", threads_override, "override config threads");

  auto* pre = app.add_subcommand("predict", "predict outcome images");
  pre->add_option("--model", model_dir, "fitted model directory")->required();
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--out", out_path, "output directory")->required();
  pre->add_option("--interval", interval_level,
                  "credible level in (0,1); omit to skip intervals");
  pre->add_option("--replicates", interval_replicates,
                  "noise replicates per particle for intervals");
  pre->add_option("--seed", predict_seed, "seed for interval draws");

  auto* imp = app.add_subcommand("importance", "predictor importance measure");
  imp->add_option("--model", model_dir, "fitted model directory")->required();
  imp->add_option("--data", data_dir, "dataset directory")->required();
  imp->add_option("--out", out_path, "output CSV path")->required();

  auto* ev = app.add_subcommand("evaluate", "metrics for predictions");
  ev->add_option("--pred", pred_path, "predictions tensor")->required();
  ev->add_option("--obs", obs_path, "observed outcomes tensor")->required();
  ev->add_option("--out", out_path, "output directory")->required();
  ev->add_option("--labels", labels_path, "labels CSV (index,label)");
  ev->add_option("--lo", lo_path, "interval lower-bound tensor");
  ev->add_option("--hi", hi_path, "interval upper-bound tensor");

  auto* exb = app.add_subcommand("export-basis", "render basis images as PGM");
  exb->add_option("--model", model_dir, "fitted model directory")->required();
  exb->add_option("--target", target, "'outcome' or 'channel<k>'");
  exb->add_option("--out", out_path, "output directory")->required();
  exb->add_option("--importance", importance_csv,
                  "importance CSV; reorders components by rank");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*sim) {
      const auto cfg = resolve_config(config_path, seed_override, 0, out_path);
      return birdgp::cmd_simulate(cfg, cfg.output_dir);
    }
    if (*fit) {
      const auto cfg =
          resolve_config(config_path, seed_override, threads_override, out_path);
      return birdgp::cmd_fit(cfg, data_dir, cfg.output_dir);
    }
    if (*pre) {
      if (interval_level < 0.0 || interval_level >= 1.0)
        throw birdgp::InvalidConfig("--interval must lie in (0,1)");
      return birdgp::cmd_predict(model_dir, data_dir, out_path, interval_level,
                                 interval_replicates, predict_seed);
    }
    if (*imp) return birdgp::cmd_importance(model_dir, data_dir, out_path);
    if (*ev)
      return birdgp::cmd_evaluate(pred_path, obs_path, out_path, labels_path,
                                  lo_path, hi_path);
    if (*exb)
      return birdgp::cmd_export_basis(model_dir, target, out_path, importance_csv);
  } catch (const birdgp::InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const birdgp::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const birdgp::RankDeficient& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const birdgp::ResourceLimit& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const birdgp::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
