#pragma once

#include <vector>

#include "brainage/tensor.hpp"

namespace brainage {

// Adaptive-moment gradient descent with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<Param*> params, double beta1, double beta2, double weight_decay, double eps = 1e-8);

  void step(double lr);
  long steps() const { return t_; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  double beta1_;
  double beta2_;
  double weight_decay_;
  double eps_;
  long t_ = 0;
};

}  // namespace brainage
