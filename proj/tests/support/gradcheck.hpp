#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "brainage/loss.hpp"

namespace gradcheck {

// Random batch for combined_loss with voxel predictions kept away from the
// |pred - truth| kink so central differences are well defined.
inline brainage::LossInputs random_inputs(std::mt19937_64& rng, int m, int voxels, int classes = 4) {
  std::uniform_real_distribution<double> age(20.0, 80.0);
  std::uniform_real_distribution<double> off(0.05, 5.0);
  std::uniform_real_distribution<double> logit(-2.0, 2.0);
  std::uniform_int_distribution<int> label(0, classes - 1);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution in_mask(0.8);
  brainage::LossInputs in;
  in.seg_classes = classes;
  for (int i = 0; i < m; ++i) {
    const double a = age(rng);
    std::vector<double> p(voxels), t(voxels, a);
    std::vector<std::uint8_t> mk(voxels), y(voxels);
    for (int j = 0; j < voxels; ++j) {
      p[j] = a + (coin(rng) ? 1.0 : -1.0) * off(rng);
      mk[j] = in_mask(rng) ? 1 : 0;
      y[j] = static_cast<std::uint8_t>(label(rng));
    }
    mk[0] = 1;
    in.voxel_pred.push_back(p);
    in.voxel_truth.push_back(t);
    in.masks.push_back(mk);
    in.global_truth.push_back(a);
    in.global_pred.push_back(a + (coin(rng) ? 1.0 : -1.0) * off(rng));
    std::vector<double> z(static_cast<std::size_t>(classes) * voxels);
    for (auto& v : z) v = logit(rng);
    in.seg_logits.push_back(z);
    in.seg_truth.push_back(y);
  }
  return in;
}

struct Result {
  double rel_error = 0.0;
  std::size_t coordinates = 0;
};

// Norm-wise relative error ||g - g_fd|| / max(||g||, ||g_fd||) over every
// input coordinate of the enabled tasks.
inline Result check(brainage::LossInputs in, const brainage::TaskSet& tasks,
                    const brainage::LossWeightSchedule& schedule, int epoch, double h = 1e-6) {
  brainage::LossGradients g;
  brainage::combined_loss(in, tasks, schedule, epoch, &g);
  double diff2 = 0.0;
  double a2 = 0.0;
  double f2 = 0.0;
  Result r;
  auto probe = [&](double& x, double analytic) {
    const double keep = x;
    x = keep + h;
    const double up = brainage::combined_loss(in, tasks, schedule, epoch).total;
    x = keep - h;
    const double down = brainage::combined_loss(in, tasks, schedule, epoch).total;
    x = keep;
    const double fd = (up - down) / (2.0 * h);
    diff2 += (fd - analytic) * (fd - analytic);
    a2 += analytic * analytic;
    f2 += fd * fd;
    ++r.coordinates;
  };
  for (std::size_t i = 0; i < in.voxel_pred.size(); ++i) {
    for (std::size_t j = 0; j < in.voxel_pred[i].size(); ++j) probe(in.voxel_pred[i][j], g.voxel_pred[i][j]);
  }
  if (tasks.global_age) {
    for (std::size_t i = 0; i < in.global_pred.size(); ++i) probe(in.global_pred[i], g.global_pred[i]);
  }
  if (tasks.segmentation) {
    for (std::size_t i = 0; i < in.seg_logits.size(); ++i) {
      for (std::size_t j = 0; j < in.seg_logits[i].size(); ++j) probe(in.seg_logits[i][j], g.seg_logits[i][j]);
    }
  }
  const double denom = std::max(std::sqrt(a2), std::sqrt(f2));
  r.rel_error = denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
  return r;
}

}  // namespace gradcheck
