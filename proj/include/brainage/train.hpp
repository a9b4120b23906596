#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "brainage/loss.hpp"
#include "brainage/net.hpp"
#include "brainage/phantom.hpp"
#include "brainage/volume.hpp"

namespace brainage {

struct Sample {
  std::string id;
  Volume image;
  BrainMask mask;
  LabelVolume tissues;
  double age = 0.0;
};

// Ids are "<prefix><index>" with zero padding.
std::vector<Sample> phantom_samples(std::vector<PhantomSample> phantoms, const std::string& prefix = "ph");

// Manifest CSV row: id,age,image,mask,tissues. Relative paths resolve against
// the manifest's directory.
struct ManifestEntry {
  std::string id;
  double age = 0.0;
  std::string image;
  std::string mask;
  std::string tissues;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<Sample> load_samples(const std::filesystem::path& manifest_path);

struct SplitSpec {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  // Disjoint lists whose union is exactly `ids`.
  void validate(const std::vector<std::string>& ids) const;
  // Shuffles ids with `seed`, then cuts by the given ratios (rounded counts;
  // the test list takes the remainder).
  static SplitSpec from_ratios(const std::vector<std::string>& ids, double train, double val, double test,
                               std::uint64_t seed);
  nlohmann::json to_json() const;
  static SplitSpec from_json(const nlohmann::json& j);
};

struct TrainConfig {
  int epochs = 300;
  int batch_size = 2;
  double lr0 = 1e-3;
  double weight_decay = 1e-5;
  std::array<double, 2> betas{0.5, 0.999};
  std::array<double, 2> ablation_betas{0.9, 0.999};
  int lr_step = 70;
  double lr_gamma = 0.6;
  Dims3 patch_size{128, 128, 128};
  NoiseSpec noise;
  LossWeightSchedule schedule = LossWeightSchedule::standard();
  NetConfig net;
  // Sets net.age_prior to the mean training age before building the model.
  bool fit_age_prior = true;
  std::uint64_t seed = 0;

  // Small-CPU configuration: 48^3 patches, 40 epochs, proportionally scaled
  // weight schedule and a narrow network.
  static TrainConfig desk();

  const TaskSet& task_set() const { return net.task_set; }
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// lr0 * lr_gamma^floor(epoch / lr_step)
double lr_at(int epoch, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossWeights weights;
  double train_total = 0.0;
  double train_mae_voxel = 0.0;
  double val_mae_voxel = 0.0;
  std::optional<double> val_dice;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  double final_val_mae = 0.0;
  double best_val_mae = 0.0;
  int best_epoch = 0;
  std::uint64_t final_checksum = 0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path step_log;
  std::filesystem::path epoch_log;
  double seconds = 0.0;  // wall time, not written to any log
};

std::string epoch_log_header();
std::string epoch_log_row(const EpochRecord& r);

// Writes checkpoint_best.ckpt, checkpoint_final.ckpt, train_log.csv (one row
// per step) and epoch_log.csv into `out_dir`. Validation uses clean labels.
TrainResult train_model(const TrainConfig& cfg, const std::vector<Sample>& data, const SplitSpec& split,
                        const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

// Trains on one sample for `epochs` epochs and returns its mae_voxel against
// clean labels in evaluation mode after each epoch.
std::vector<double> overfit_sentinel(const TrainConfig& cfg, const Sample& sample, int epochs,
                                     const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

struct AblationRow {
  TaskSet tasks;
  std::vector<double> per_sample_mae;
  double mean = 0.0;
  double sd = 0.0;
  TrainResult train;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  std::string to_table() const;
  std::string to_csv() const;
};

// Trains V, S+V, G+V, S+G+V with identical data and seed; the three-task
// model keeps cfg.betas, the others use cfg.ablation_betas. Test MAE comes
// from each variant's best-validation checkpoint.
AblationReport run_ablation(const TrainConfig& base, const std::vector<Sample>& data, const SplitSpec& split,
                            const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

struct RegressorTrainConfig {
  int epochs = 20;
  int batch_size = 2;
  double lr0 = 1e-3;
  double weight_decay = 1e-5;
  std::array<double, 2> betas{0.9, 0.999};
  RegressorConfig net;
  bool fit_age_prior = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Global-age regressor trained on whole volumes with the global MAE.
// Writes regressor.ckpt and regressor_log.csv into `out_dir`.
std::unique_ptr<GlobalRegressor> train_global_regressor(const RegressorTrainConfig& cfg,
                                                        const std::vector<Sample>& data, const SplitSpec& split,
                                                        const std::filesystem::path& out_dir,
                                                        std::ostream* progress = nullptr);

// Sample mean and sample SD (n-1; 0 for a single value).
std::pair<double, double> mean_sd(const std::vector<double>& values);
// "%.2f±%.2f"
std::string format_mean_sd(double mean, double sd);

}  // namespace brainage
