#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "brainage/tensor.hpp"

namespace brainage {

enum class Mode { kTrain, kEval };

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  // Accumulates parameter gradients and returns the gradient w.r.t. the input
  // of the most recent forward call.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect(std::vector<Param*>& /*params*/, std::vector<Buffer>& /*buffers*/) {}
};

// Same-padded 3D convolution with kernel 1 or 3 and unit stride. Without a
// bias the bias vector stays zero and is not trainable (for conv + batch norm).
class Conv3d final : public Layer {
 public:
  Conv3d(std::string name, int in_channels, int out_channels, int kernel, std::mt19937_64& rng, bool bias = true);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) override;

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }

 private:
  int cin_;
  int cout_;
  int k_;
  Param weight_;
  Param bias_;
  bool use_bias_;
  Tensor input_;
};

class BatchNorm3d final : public Layer {
 public:
  BatchNorm3d(std::string name, int channels, float momentum = 0.1f, float eps = 1e-5f);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) override;

 private:
  std::string name_;
  int channels_;
  float momentum_;
  float eps_;
  Param gamma_;
  Param beta_;
  std::vector<float> running_mean_;
  std::vector<float> running_var_;
  Tensor xhat_;
  std::vector<float> inv_std_;
  Mode last_mode_ = Mode::kEval;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Tensor output_;
};

// 2x2x2 max pooling; spatial dims must be even.
class MaxPool3d final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Shape in_shape_{};
  std::vector<std::uint8_t> argmax_;
};

// Trilinear resampling to a fixed output size (x2 inside the U-Net decoder).
class Upsample final : public Layer {
 public:
  Upsample() = default;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void set_target(Dims3 target) { target_ = target; }

 private:
  Dims3 target_{};
  Shape in_shape_{};
};

// Mean over all spatial positions: (n, c, d, h, w) -> (n, c, 1, 1, 1).
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Shape in_shape_{};
};

// Fully connected layer on (n, c, 1, 1, 1) tensors.
class Linear final : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features, std::mt19937_64& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) override;

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  int in_;
  int out_;
  Param weight_;
  Param bias_;
  Tensor input_;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential& add(std::unique_ptr<Layer> layer);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// conv3 -> (batch norm) -> relu
std::unique_ptr<Sequential> conv_block(const std::string& name, int cin, int cout, bool batch_norm,
                                       std::mt19937_64& rng, int kernel = 3);

}  // namespace brainage
