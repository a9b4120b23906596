#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "brainage/volume.hpp"

namespace brainage {

// NCDHW shape; w (x) is the fastest axis, matching Grid's x-fastest layout.
struct Shape {
  int n = 0;
  int c = 0;
  int d = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Shape&) const = default;
  std::size_t spatial() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t numel() const { return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * spatial(); }
  Dims3 dims() const { return {w, h, d}; }
};

std::string to_string(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }

  float* channel(int n, int c) { return data_.data() + offset(n, c); }
  const float* channel(int n, int c) const { return data_.data() + offset(n, c); }
  float* sample(int n) { return channel(n, 0); }
  const float* sample(int n) const { return channel(n, 0); }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

 private:
  std::size_t offset(int n, int c) const {
    return (static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_.c) + static_cast<std::size_t>(c)) *
           shape_.spatial();
  }

  Shape shape_{};
  std::vector<float> data_;
};

// Batch of single-channel volumes with identical dims.
Tensor stack_volumes(const std::vector<const Volume*>& volumes);
Volume channel_volume(const Tensor& t, int n, int c, const Spacing& spacing = {1.0f, 1.0f, 1.0f});

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& ab, int channels_a, Tensor& a, Tensor& b);

// Trainable parameter with its accumulated gradient.
struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;

  explicit Param(std::string n = {}, std::size_t size = 0)
      : name(std::move(n)), value(size, 0.0f), grad(size, 0.0f) {}
};

// Non-trainable state saved with a model (batch-norm running statistics).
struct Buffer {
  std::string name;
  std::vector<float>* values;
};

}  // namespace brainage
