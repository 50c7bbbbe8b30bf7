#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "dualcycle/classical.hpp"
#include "dualcycle/dual_cycle.hpp"
#include "dualcycle/forward_model.hpp"
#include "dualcycle/metrics.hpp"
#include "dualcycle/phantom.hpp"
#include "dualcycle/volume.hpp"

namespace dualcycle {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// CLI exit-code contract.
enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kDataError = 3,
  kTrainingFault = 4,
};

struct SimulationConfig {
  double sigma_a = 3.0;  // Gaussian PSF stddev, View A (blur along z)
  double sigma_b = 3.0;  // View B (blur along x)
  AffineMismatchSpec mismatch;
  NoiseSpec noise;
  bool apply_rotation = false;
};

struct ExperimentConfig {
  std::vector<PhantomSpec> phantoms;
  SimulationConfig simulation;
  TrainConfig train;
  RLConfig rl;
  std::vector<std::string> methods{"view_a", "view_b", "fuse_average", "joint_rl"};
  std::string output_dir = "out";
  bool parallel_volumes = false;
  std::string echo;  // the raw config document, embedded in reports

  void validate() const;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

struct MetricRow {
  std::string method;
  int volume_id = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  bool failed = false;
  std::string error;
};

// Generate phantoms onto disk; returns the written volume paths.
// Writes <output_dir>/phantoms/phantom_###.rv1 and manifest.json.
std::vector<std::string> cmd_phantom(const ExperimentConfig& cfg);

// Simulate view pairs for every phantom on disk; writes
// <output_dir>/views/pair_###_{a,b}.rv1, the PSFs and manifest.json.
std::vector<std::string> cmd_simulate(const ExperimentConfig& cfg);

// Truncate at the floor value, rescale to [0,1], resample isotropic.
Volume3D preprocess_volume(const Volume3D& in, double truncate_floor,
                           double target_spacing_um);
void cmd_preprocess(const std::string& in_path, const std::string& out_path,
                    double truncate_floor = 78.0, double target_spacing_um = 0.1625);

// Train the Dual-Cycle model on pair `index`; writes checkpoint and
// loss history. Returns the checkpoint path.
std::string cmd_train(const ExperimentConfig& cfg, int index);

// Reconstruct pair `index` with the checkpointed model.
std::string cmd_reconstruct(const ExperimentConfig& cfg, int index,
                            const std::string& checkpoint_path);

// Run every selected method on every pair; writes metrics.json,
// summary.txt and per-method figures. Returns all metric rows.
std::vector<MetricRow> cmd_run(const ExperimentConfig& cfg);

// Metric table (one row per
// method, averaged over volumes).
std::string render_summary_table(const std::vector<MetricRow>& rows,
                                 const std::string& config_echo);
void write_metric_rows(const std::vector<MetricRow>& rows, const std::string& path);

// Registered (view-A frame) copy of a simulated pair, using the known
// simulation transforms.
ViewPair register_views(const ViewPair& pair, bool was_rotated);

}  // namespace dualcycle
