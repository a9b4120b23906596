#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "brainage/net.hpp"
#include "brainage/volume.hpp"

namespace brainage {

// (w_s, w_g, w_v)
struct LossWeights {
  double seg = 1.0;
  double global = 1.0;
  double voxel = 1.0;
  bool operator==(const LossWeights&) const = default;
};

struct ScheduleSegment {
  int begin = 0;
  int end = 0;  // exclusive, except for the final segment
  LossWeights weights;
  bool operator==(const ScheduleSegment&) const = default;
};

// Epoch-dependent loss weights. Segments are half-open [begin, end) except
// the last, which also includes its end epoch.
class LossWeightSchedule {
 public:
  LossWeightSchedule() = default;
  explicit LossWeightSchedule(std::vector<ScheduleSegment> segments);

  // [0,50) -> (80,1,1); [50,130) -> (40,1,1); [130,300] -> (15,0.7,1.3)
  static LossWeightSchedule standard();
  // The standard table with boundaries rescaled to `total_epochs`.
  static LossWeightSchedule scaled(int total_epochs);
  // "0:50:80:1:1,50:130:40:1:1,130:300:15:0.7:1.3" (begin:end:w_s:w_g:w_v)
  static LossWeightSchedule parse(const std::string& text);

  LossWeights at(int epoch) const;
  int total_epochs() const { return segments_.empty() ? 0 : segments_.back().end; }
  const std::vector<ScheduleSegment>& segments() const { return segments_; }
  std::string to_string() const;
  bool operator==(const LossWeightSchedule&) const = default;

 private:
  std::vector<ScheduleSegment> segments_;
};

struct NoiseSpec {
  bool enabled = true;
  double low = -2.0;
  double high = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossBreakdown {
  std::optional<double> dice_loss;
  double mae_voxel = 0.0;
  std::optional<double> mae_global;
  double total = 0.0;
  LossWeights weights_used;
};

// Batch of m samples; grids are flattened per sample. Segmentation logits are
// class-major (classes * voxels).
struct LossInputs {
  std::vector<std::vector<double>> voxel_pred;
  std::vector<std::vector<double>> voxel_truth;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<double> global_pred;
  std::vector<double> global_truth;
  std::vector<std::vector<double>> seg_logits;
  std::vector<std::vector<std::uint8_t>> seg_truth;
  int seg_classes = 4;
};

struct LossGradients {
  std::vector<std::vector<double>> voxel_pred;
  std::vector<double> global_pred;
  std::vector<std::vector<double>> seg_logits;
};

inline const std::vector<int> kTissueClasses{kGM, kWM, kCSF};

// 1 - mean over batch of the mean soft Dice over `foreground` classes.
// probs[i] is class-major with `classes` entries per voxel, each voxel summing
// to 1 within 1e-3. `grad` (optional) receives d(loss)/d(probs).
double dice_loss(const std::vector<std::vector<double>>& probs, const std::vector<std::vector<std::uint8_t>>& truth,
                 int classes, const std::vector<int>& foreground = kTissueClasses,
                 std::vector<std::vector<double>>* grad = nullptr);

// Hard Dice of a label map against truth, averaged over `foreground` classes.
double hard_dice(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& truth,
                 const std::vector<int>& foreground = kTissueClasses);

// (1/m) sum_i (1/n_i) sum_{j in mask_i} |pred_ij - truth_ij|
double mae_voxel(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth,
                 const std::vector<std::vector<std::uint8_t>>& masks,
                 std::vector<std::vector<double>>* grad = nullptr);

double mae_global(const std::vector<double>& pred, const std::vector<double>& truth,
                  std::vector<double>* grad = nullptr);

// Class-major softmax over `classes` per voxel.
std::vector<double> softmax_classes(const std::vector<double>& logits, int classes);

// Weighted sum over the enabled tasks with weights looked up at `epoch`.
LossBreakdown combined_loss(const LossInputs& in, const TaskSet& tasks, const LossWeightSchedule& schedule,
                            int epoch, LossGradients* grad = nullptr);

// Brain voxels get truth + u, u ~ U(low, high) i.i.d.; other voxels are
// copied unchanged. Disabled noise returns `truth` unchanged.
Volume inject_label_noise(const Volume& truth, const BrainMask& mask, const NoiseSpec& spec);

std::string loss_log_header();
std::string loss_log_row(int epoch, int step, const LossBreakdown& b);

}  // namespace brainage
