#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualcycle/pipeline.hpp"

namespace dc = dualcycle;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string methods;
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config_path, "Experiment config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--out", f.out_dir, "Override output directory");
  cmd->add_option("--seed", f.seed, "Override the base random seed");
  cmd->add_option("--methods", f.methods, "Comma-separated method list override");
}

dc::ExperimentConfig resolve_config(const CommonFlags& f) {
  dc::ExperimentConfig cfg = f.config_path.empty()
                                 ? dc::parse_experiment_config("{}")
                                 : dc::load_experiment_config(f.config_path);
  if (!f.out_dir.empty()) cfg.output_dir = f.out_dir;
  if (f.seed >= 0) {
    const auto s = static_cast<std::uint64_t>(f.seed);
    cfg.train.seed = s;
    cfg.simulation.mismatch.seed = s;
    cfg.simulation.noise.seed = s;
    for (std::size_t i = 0; i < cfg.phantoms.size(); ++i)
      cfg.phantoms[i].seed = s + i;
  }
  if (!f.methods.empty()) {
    cfg.methods.clear();
    std::stringstream ss(f.methods);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.methods.push_back(item);
  }
  cfg.validate();
  return cfg;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Dual-view 3D deconvolution and fusion pipeline"};
  app.require_subcommand(1);

  CommonFlags flags;
  int index = 0;
  std::string ckpt, in_path, out_path;
  double floor = 78.0, spacing = 0.1625;
  bool parallel = false;

  auto* phantom = app.add_subcommand("phantom", "Generate synthetic phantom volumes");
  add_common(phantom, flags, false);

  auto* simulate = app.add_subcommand("simulate", "Simulate dual-view measurements");
  add_common(simulate, flags, false);

  auto* preprocess =
      app.add_subcommand("preprocess", "Truncate, normalize and resample a real volume");
  preprocess->add_option("input", in_path, "Input RV1 volume")->required();
  preprocess->add_option("output", out_path, "Output RV1 volume")->required();
  preprocess->add_option("--floor", floor, "Brightness truncation floor");
  preprocess->add_option("--spacing", spacing, "Target isotropic voxel size [um]");

  auto* train = app.add_subcommand("train", "Train the Dual-Cycle model on one pair");
  add_common(train, flags, false);
  train->add_option("--index", index, "View-pair index");

  auto* reconstruct =
      app.add_subcommand("reconstruct", "Reconstruct one pair from a checkpoint");
  add_common(reconstruct, flags, false);
  reconstruct->add_option("--index", index, "View-pair index");
  reconstruct->add_option("--checkpoint", ckpt, "Checkpoint path")->required();

  auto* evaluate = app.add_subcommand("evaluate", "PSNR/SSIM of a volume vs. a reference");
  evaluate->add_option("result", in_path, "Result RV1 volume")->required();
  evaluate->add_option("reference", out_path, "Reference RV1 volume")->required();

  auto* run = app.add_subcommand("run", "Full experiment: phantoms through metrics");
  add_common(run, flags, false);
  run->add_flag("--parallel", parallel, "Process independent volumes in parallel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? dc::kOk : dc::kConfigError;
  }

  if (phantom->parsed()) {
    auto paths = cmd_phantom(resolve_config(flags));
    std::cout << "wrote " << paths.size() << " phantom volume(s)\n";
  } else if (simulate->parsed()) {
    auto paths = cmd_simulate(resolve_config(flags));
    std::cout << "wrote " << paths.size() << " view volume(s)\n";
  } else if (preprocess->parsed()) {
    dc::cmd_preprocess(in_path, out_path, floor, spacing);
    std::cout << "wrote " << out_path << "\n";
  } else if (train->parsed()) {
    const std::string path = dc::cmd_train(resolve_config(flags), index);
    std::cout << "checkpoint: " << path << "\n";
  } else if (reconstruct->parsed()) {
    const std::string path = dc::cmd_reconstruct(resolve_config(flags), index, ckpt);
    std::cout << "reconstruction: " << path << "\n";
  } else if (evaluate->parsed()) {
    const dc::Volume3D result = dc::load_volume(in_path);
    const dc::Volume3D reference = dc::load_volume(out_path);
    const dc::MetricReport report = dc::evaluate(reference, result);
    std::printf("psnr_db %.4f\nssim %.6f\n", report.psnr_db, report.ssim);
  } else if (run->parsed()) {
    dc::ExperimentConfig cfg = resolve_config(flags);
    if (parallel) cfg.parallel_volumes = true;
    const auto rows = dc::cmd_run(cfg);
    std::cout << dc::render_summary_table(rows, "");
    bool any_ok = false;
    for (const auto& r : rows) any_ok = any_ok || !r.failed;
    if (!rows.empty() && !any_ok) {
      std::cerr << "error: all methods failed\n";
      return dc::kDataError;
    }
  }
  return dc::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const dc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return dc::kConfigError;
  } catch (const dc::TrainingError& e) {
    std::cerr << "training fault: " << e.what() << "\n";
    return dc::kTrainingFault;
  } catch (const dc::ReconError& e) {
    std::cerr << "training fault: " << e.what() << "\n";
    return dc::kTrainingFault;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return dc::kDataError;
  }
}
