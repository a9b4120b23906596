#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "brainage/layers.hpp"
#include "brainage/volume.hpp"

namespace brainage {

// Output heads of a model. Voxel-level age is always present.
struct TaskSet {
  bool voxel_age = true;
  bool global_age = false;
  bool segmentation = false;

  static TaskSet v() { return {true, false, false}; }
  static TaskSet sv() { return {true, false, true}; }
  static TaskSet gv() { return {true, true, false}; }
  static TaskSet sgv() { return {true, true, true}; }
  static std::vector<TaskSet> all() { return {v(), sv(), gv(), sgv()}; }
  // "V", "S+V", "G+V", "S+G+V"
  static TaskSet parse(const std::string& label);

  std::string label() const;
  void validate() const;
  bool operator==(const TaskSet&) const = default;
};

struct NetConfig {
  int in_channels = 1;
  int base_channels = 16;
  int depth = 4;
  TaskSet task_set = TaskSet::sgv();
  int seg_classes = 4;
  bool batch_norm = true;
  int global_hidden = 32;
  // Age heads emit age_prior + age_scale * (raw head output), in years.
  double age_prior = 0.0;
  double age_scale = 1.0;
  Dims3 patch{48, 48, 48};

  void validate() const;
  // Input spatial dims must be divisible by 2^(depth-1).
  void check_input(const Dims3& dims) const;
  int divisor() const { return 1 << (depth - 1); }
  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
  bool operator==(const NetConfig&) const = default;
};

struct MultitaskOutput {
  Volume voxel_age;
  std::optional<double> global_age;
  std::vector<Volume> seg_logits;

  // Softmax over classes per voxel.
  std::vector<Volume> seg_probabilities() const;
  LabelVolume seg_labels() const;
};

// Raw head tensors for a batch: voxel (n,1,D,H,W), global (n,1,1,1,1),
// seg (n,C,D,H,W). Disabled heads are empty tensors.
struct HeadTensors {
  Tensor voxel;
  Tensor global;
  Tensor seg;
};

class Model {
 public:
  virtual ~Model() = default;
  std::vector<Param*> params();
  std::vector<Buffer> buffers();
  void zero_grad();
  std::size_t parameter_count();
  // Order-sensitive FNV-1a hash of all parameter values.
  std::uint64_t checksum();

 protected:
  virtual void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) = 0;
};

// Encoder-decoder with skip connections at every level and up to three heads.
class MultitaskUNet final : public Model {
 public:
  MultitaskUNet(const NetConfig& cfg, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  HeadTensors forward_batch(const Tensor& x, Mode mode);
  // Gradients for disabled heads (or heads without loss) may be empty.
  void backward(const HeadTensors& grads);

  std::vector<MultitaskOutput> forward(const std::vector<const Volume*>& inputs, Mode mode = Mode::kEval);

 protected:
  void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) override;

 private:
  NetConfig cfg_;
  std::vector<std::unique_ptr<Sequential>> encoders_;
  std::vector<std::unique_ptr<MaxPool3d>> pools_;
  std::vector<std::unique_ptr<Upsample>> ups_;
  std::vector<std::unique_ptr<Sequential>> decoders_;
  std::unique_ptr<Conv3d> voxel_head_;
  std::unique_ptr<Conv3d> seg_head_;
  std::unique_ptr<Sequential> global_head_;
  std::unique_ptr<GlobalAvgPool> global_pool_;
  std::vector<int> skip_channels_;
  Shape bottleneck_shape_{};
  Shape top_shape_{};
};

std::unique_ptr<MultitaskUNet> build_model(const NetConfig& cfg, std::uint64_t seed);

// Fully convolutional global-age regressor: conv-BN-maxpool-ReLU blocks, a
// final 1x1 conv block whose maps are exposed, global pooling, linear head.
struct RegressorConfig {
  int in_channels = 1;
  std::vector<int> channels{8, 16, 32, 64};
  bool batch_norm = true;
  double age_prior = 0.0;
  double age_scale = 1.0;

  void validate() const;
  void check_input(const Dims3& dims) const;
  int divisor() const { return 1 << (static_cast<int>(channels.size()) - 1); }
  nlohmann::json to_json() const;
  static RegressorConfig from_json(const nlohmann::json& j);
  bool operator==(const RegressorConfig&) const = default;
};

class GlobalRegressor final : public Model {
 public:
  GlobalRegressor(const RegressorConfig& cfg, std::uint64_t seed);

  const RegressorConfig& config() const { return cfg_; }
  // (n,1,1,1,1) ages in years.
  Tensor forward_batch(const Tensor& x, Mode mode);
  // Returns d(output)/d(input); afterwards feature_gradients() holds
  // d(output)/d(final feature maps).
  Tensor backward(const Tensor& grad_out);

  const Tensor& features() const { return features_; }
  const Tensor& feature_gradients() const { return feature_grad_; }
  Linear& head() { return *head_; }

 protected:
  void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) override;

 private:
  RegressorConfig cfg_;
  std::unique_ptr<Sequential> extractor_;
  std::unique_ptr<GlobalAvgPool> pool_;
  std::unique_ptr<Linear> head_;
  Tensor features_;
  Tensor feature_grad_;
};

std::unique_ptr<GlobalRegressor> build_global_regressor(const RegressorConfig& cfg, std::uint64_t seed);

// Versioned binary checkpoint: magic, version, JSON header, named tensors.
struct CheckpointHeader {
  std::string kind;  // "multitask" or "regressor"
  nlohmann::json config;
  int epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
};

// Written atomically (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointHeader& header);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);
// Loads parameters into `model`; throws ConfigError when the stored config or
// any tensor name/size disagrees.
void load_checkpoint(const std::filesystem::path& path, Model& model, const CheckpointHeader& expected);

std::unique_ptr<MultitaskUNet> load_multitask(const std::filesystem::path& path, CheckpointHeader* header = nullptr);
std::unique_ptr<GlobalRegressor> load_regressor(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

}  // namespace brainage
