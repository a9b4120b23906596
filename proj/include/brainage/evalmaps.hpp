#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "brainage/net.hpp"
#include "brainage/train.hpp"
#include "brainage/volume.hpp"

namespace brainage {

// Zero-pads `v` symmetrically (extra voxel on the high side) up to `target`.
Volume pad_symmetric(const Volume& v, const Dims3& target, Index3* offset = nullptr);

// Whole-volume inference. Inputs whose dims are not divisible by the model's
// divisor are padded and the outputs cropped back to the input grid.
MultitaskOutput predict_full_volume(MultitaskUNet& model, const Volume& image);

struct PADMap {
  Volume data;
  BrainMask mask;
  double chronological_age = 0.0;
  double sample_mae = 0.0;
  bool adjusted = false;   // visualization only
  bool corrected = false;  // bias-corrected predictions
};

PADMap compute_pad(const Volume& predicted, double chronological_age, const BrainMask& mask);
// Subtracts sample_mae from every brain voxel; outside voxels are unchanged.
PADMap adjust_pad(const PADMap& pad);

// Writes the map plus "<path>.json" holding chronological_age, sample_mae,
// corrected and adjusted.
void save_pad_map(const PADMap& pad, const std::filesystem::path& path);

enum class BiasMode { kRegression, kAgeBins };
BiasMode parse_bias_mode(const std::string& s);
std::string to_string(BiasMode m);

struct CalibrationPair {
  double age = 0.0;
  double predicted = 0.0;
};

struct BiasCorrectionModel {
  BiasMode mode = BiasMode::kRegression;
  double slope = 1.0;
  double intercept = 0.0;
  // Bin i covers [edges[i], edges[i+1]); the last bin also includes its end.
  std::vector<double> edges;
  std::vector<double> offsets;
  std::vector<std::size_t> bin_counts;
  double age_min = 0.0;
  double age_max = 0.0;
  std::size_t calibration_n = 0;

  nlohmann::json to_json() const;
  static BiasCorrectionModel from_json(const nlohmann::json& j);
};

struct BinSpec {
  double low = 18.0;
  double high = 88.0;
  double width = 10.0;
};

// Regression: least-squares predicted = slope * age + intercept.
// Age bins: per-bin mean of (predicted - age).
BiasCorrectionModel fit_bias_correction(const std::vector<CalibrationPair>& pairs, BiasMode mode,
                                        const BinSpec& bins = {});

// Ages outside the calibration range throw RangeError.
double apply_bias_correction(const BiasCorrectionModel& bc, double raw, double chronological_age);
Volume apply_bias_correction(const BiasCorrectionModel& bc, const Volume& raw, double chronological_age);

struct SampleEval {
  std::string id;
  double age = 0.0;
  double mae_voxel = 0.0;
  std::optional<double> global_pred;
  std::optional<double> mean_voxel_pred;
  std::optional<double> dice;
  std::optional<double> corrected_mae_voxel;
};

struct TestReport {
  std::string label;
  std::vector<SampleEval> samples;
  double mean = 0.0;
  double sd = 0.0;
  std::optional<double> dice_mean;
  std::optional<double> corrected_mean;
  std::optional<double> corrected_sd;

  std::string to_table() const;
  std::string to_csv() const;
};

TestReport evaluate_testset(MultitaskUNet& model, const std::vector<const Sample*>& samples,
                            const BiasCorrectionModel* bias = nullptr, const std::string& label = "test");

}  // namespace brainage
