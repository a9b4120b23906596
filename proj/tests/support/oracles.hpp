#pragma once

// Straightforward reference implementations used to cross-check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "brainage/interpret.hpp"
#include "brainage/regional.hpp"
#include "brainage/volume.hpp"

namespace oracle {

inline double dice_loss(const std::vector<std::vector<double>>& probs,
                        const std::vector<std::vector<std::uint8_t>>& truth, int classes,
                        const std::vector<int>& fg) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const std::size_t n = truth[i].size();
    double per_sample = 0.0;
    for (int c : fg) {
      double inter = 0.0;
      double psum = 0.0;
      double ysum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p = probs[i][static_cast<std::size_t>(c) * n + j];
        const double y = truth[i][j] == c ? 1.0 : 0.0;
        inter += p * y;
        psum += p;
        ysum += y;
      }
      per_sample += (psum + ysum) == 0.0 ? 1.0 : 2.0 * inter / (psum + ysum);
    }
    total += per_sample / static_cast<double>(fg.size());
  }
  return 1.0 - total / static_cast<double>(probs.size());
}

inline double mae_voxel(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth,
                        const std::vector<std::vector<std::uint8_t>>& masks) {
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double s = 0.0;
    double n = 0.0;
    for (std::size_t j = 0; j < pred[i].size(); ++j) {
      if (masks[i][j] == 0) continue;
      s += std::fabs(pred[i][j] - truth[i][j]);
      n += 1.0;
    }
    total += s / n;
  }
  return total / static_cast<double>(pred.size());
}

inline double mae_global(const std::vector<double>& pred, const std::vector<double>& truth) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::fabs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

// Per-region (mean, sd n-1, count) by looping over every voxel for every code.
struct RegionRef {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t count = 0;
};

inline std::map<int, RegionRef> regional(const brainage::Volume& pad, const brainage::BrainMask& mask,
                                         const brainage::RegionAtlas& atlas) {
  std::map<int, RegionRef> out;
  const auto d = pad.dims();
  for (const auto& [code, name] : atlas.names) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int z = 0; z < d.z; ++z) {
      for (int y = 0; y < d.y; ++y) {
        for (int x = 0; x < d.x; ++x) {
          const std::size_t i = pad.data.index(x, y, z);
          if (atlas.labels[i] == code && mask.inside(i)) {
            sum += pad.data[i];
            ++n;
          }
        }
      }
    }
    RegionRef r;
    r.count = n;
    if (n > 0) {
      r.mean = sum / static_cast<double>(n);
      double ss = 0.0;
      for (int z = 0; z < d.z; ++z) {
        for (int y = 0; y < d.y; ++y) {
          for (int x = 0; x < d.x; ++x) {
            const std::size_t i = pad.data.index(x, y, z);
            if (atlas.labels[i] == code && mask.inside(i)) ss += (pad.data[i] - r.mean) * (pad.data[i] - r.mean);
          }
        }
      }
      r.sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    }
    out[code] = r;
  }
  return out;
}

inline std::vector<int> grid_offsets(int dim, int size, int stride) {
  std::vector<int> o;
  int last = -1;
  for (int s = 0; s + size <= dim; s += stride) {
    o.push_back(s);
    last = s;
  }
  if (last + size != dim) o.push_back(dim - size);
  return o;
}

// Re-copies the input for every cuboid and accumulates voxel by voxel.
inline brainage::Volume occlusion(brainage::SaliencyModel& model, const brainage::Volume& input,
                                  const brainage::OcclusionSpec& spec) {
  const auto d = input.dims();
  const double base = model.predict(input);
  std::vector<double> sum(d.voxels(), 0.0);
  std::vector<int> count(d.voxels(), 0);
  for (int z0 : grid_offsets(d.z, spec.size.z, spec.stride.z)) {
    for (int y0 : grid_offsets(d.y, spec.size.y, spec.stride.y)) {
      for (int x0 : grid_offsets(d.x, spec.size.x, spec.stride.x)) {
        brainage::Volume occluded = input;
        auto inside = [&](int x, int y, int z) {
          return x >= x0 && x < x0 + spec.size.x && y >= y0 && y < y0 + spec.size.y && z >= z0 &&
                 z < z0 + spec.size.z;
        };
        for (int z = 0; z < d.z; ++z)
          for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x)
              if (inside(x, y, z)) occluded.at(x, y, z) = spec.fill_value;
        const double delta = model.predict(occluded) - base;
        for (int z = 0; z < d.z; ++z)
          for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x)
              if (inside(x, y, z)) {
                sum[input.data.index(x, y, z)] += delta;
                ++count[input.data.index(x, y, z)];
              }
      }
    }
  }
  brainage::Volume out(d, 0.0f, input.spacing);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] > 0) out.data[i] = static_cast<float>(sum[i] / count[i]);
  }
  return out;
}

// Two-sided signed-rank p-value by enumerating all 2^n sign assignments of
// the average ranks of |a - b| (zero differences dropped).
inline double wilcoxon_enumerated(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  }
  const std::size_t n = d.size();
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0.0;
    double equal = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::fabs(d[j]) < std::fabs(d[i])) less += 1.0;
      if (std::fabs(d[j]) == std::fabs(d[i])) equal += 1.0;
    }
    ranks[i] = less + (equal + 1.0) / 2.0;
  }
  double w_plus = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += ranks[i];
    if (d[i] > 0) w_plus += ranks[i];
  }
  const double observed = std::min(w_plus, total - w_plus);
  const std::uint64_t combos = std::uint64_t{1} << n;
  std::uint64_t at_or_below = 0;
  for (std::uint64_t mask = 0; mask < combos; ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::uint64_t{1} << i)) w += ranks[i];
    }
    if (w <= observed + 1e-9) ++at_or_below;
  }
  return std::min(1.0, 2.0 * static_cast<double>(at_or_below) / static_cast<double>(combos));
}

inline brainage::Volume random_volume(brainage::Dims3 d, std::mt19937_64& rng, float lo = -1.0f,
                                      float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  brainage::Volume v(d);
  for (auto& x : v.data.storage()) x = u(rng);
  return v;
}

}  // namespace oracle

// Fresh scratch directory under the system temp dir, removed on destruction.
struct ScratchDir {
  std::filesystem::path path;
  explicit ScratchDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("brainage_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
};
