#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "brainage/evalmaps.hpp"
#include "brainage/net.hpp"
#include "brainage/volume.hpp"

namespace brainage {

enum class SaliencyMethod { kGradCam, kOcclusion, kSmoothGrad, kGradient };
std::string to_string(SaliencyMethod m);

struct SaliencyMap {
  Volume data;
  SaliencyMethod method = SaliencyMethod::kGradient;
  // "raw" or "unit-range". Gradient-based maps are not comparable across
  // samples in either form.
  std::string normalization = "raw";
  std::string sample_id;
  nlohmann::json params = nlohmann::json::object();
};

// Rescales to [0, 1] (signed maps: divides by max |value| into [-1, 1]).
SaliencyMap normalize_unit_range(const SaliencyMap& m);

// Scalar-output model seen by the saliency methods.
class SaliencyModel {
 public:
  virtual ~SaliencyModel() = default;
  virtual double predict(const Volume& x) = 0;
  // d(output)/d(input) on the input grid.
  virtual Volume input_gradient(const Volume& x) = 0;
  // Final convolutional feature maps (1,K,d,h,w) and d(output)/d(maps).
  // The default throws CapabilityError.
  virtual void feature_maps(const Volume& x, Tensor& features, Tensor& gradients);
};

// Evaluation-mode adapter over a trained global regressor.
class RegressorSaliencyModel final : public SaliencyModel {
 public:
  explicit RegressorSaliencyModel(GlobalRegressor& model) : model_(model) {}
  double predict(const Volume& x) override;
  Volume input_gradient(const Volume& x) override;
  void feature_maps(const Volume& x, Tensor& features, Tensor& gradients) override;

 private:
  GlobalRegressor& model_;
};

// Rectified, gradient-weighted sum of the final feature maps, trilinearly
// upsampled to the input grid.
SaliencyMap gradcam(SaliencyModel& model, const Volume& input);

struct OcclusionSpec {
  Dims3 size{8, 8, 8};
  Dims3 stride{4, 4, 4};
  float fill_value = 0.0f;

  void validate(const Dims3& input) const;
};

// Start offsets along one axis: 0, stride, ... plus dim - size when the
// stride grid misses the far edge.
std::vector<int> occlusion_offsets(int dim, int size, int stride);

// Signed change of the prediction when each cuboid is filled, averaged over
// overlapping footprints (positive: occluding raises the predicted age).
SaliencyMap occlusion_sensitivity(SaliencyModel& model, const Volume& input, const OcclusionSpec& spec = {});

// |d(output)/d(input)|
SaliencyMap vanilla_gradient(SaliencyModel& model, const Volume& input);

// Mean |gradient| over n_samples noisy copies; the noise SD is noise_sd times
// the input intensity range.
SaliencyMap smoothgrad(SaliencyModel& model, const Volume& input, int n_samples = 25, double noise_sd = 0.10,
                       std::uint64_t seed = 0);

// Map plus "<path>.json" with method, normalization, sample_id and params.
void save_saliency(const SaliencyMap& m, const std::filesystem::path& path);

struct ColorScale {
  std::string panel;
  std::string kind;  // "diverging" or "sequential"
  double low = 0.0;
  double high = 0.0;
};

struct PanelOutput {
  std::vector<std::filesystem::path> panels;
  std::filesystem::path combined;
  std::filesystem::path legend;
  std::vector<ColorScale> scales;
};

// Slice renderings (binary PPM) of the PAD map, regional atlas volume and
// each saliency map, every panel with a vertical color bar, plus one combined
// row image and a JSON legend with the color-bar limits. axis: 0=x, 1=y, 2=z.
PanelOutput comparison_panel(const PADMap& pad, const Volume& regional, const std::vector<SaliencyMap>& saliencies,
                             int axis, int index, const std::filesystem::path& out_dir,
                             const std::string& prefix = "panel");

}  // namespace brainage
