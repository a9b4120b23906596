#pragma once

#include <cstdint>
#include <vector>

#include "brainage/volume.hpp"

namespace brainage {

// Concentric head phantom. Lengths are in phantom millimetres over a nominal
// 64 mm field of view, so `dims` only changes the sampling resolution
// (voxel spacing = 64 mm / dim).
struct PhantomSpec {
  Dims3 dims{64, 64, 64};
  double age = 18.0;
  double ventricle_gain = 0.10;  // mm/year
  double gm_thin_rate = 0.05;    // mm/year
  double noise_sd = 0.05;
  std::uint64_t seed = 0;

  double brain_radius = 27.0;
  double ventricle_base = 4.0;
  double gm_base = 7.0;
  double rim = 1.5;
  // Per-subject jitter of head position and shape, drawn from the seed.
  double shape_jitter = 1.0;

  static constexpr double kMinAge = 18.0;
  static constexpr double kMaxAge = 88.0;
  static constexpr double kFieldOfViewMm = 64.0;

  double ventricle_radius() const { return ventricle_base + ventricle_gain * (age - kMinAge); }
  double gm_thickness() const { return gm_base - gm_thin_rate * (age - kMinAge); }

  // Throws ConfigError when the parameters break an invariant.
  void validate() const;
};

inline constexpr float kWmIntensity = 1.0f;
inline constexpr float kGmIntensity = 0.7f;
inline constexpr float kCsfIntensity = 0.2f;

struct PhantomSample {
  Volume image;
  BrainMask mask;
  LabelVolume tissues;
  double age = 0.0;
};

PhantomSample generate_phantom(const PhantomSpec& spec);

// Ages uniform on [age_low, age_high]; sample i uses a seed derived from the
// master seed, so cohorts are reproducible and order-stable.
std::vector<PhantomSample> generate_cohort(std::size_t n, double age_low, double age_high,
                                           std::uint64_t seed, const PhantomSpec& base = {});

// Per-sample specs that generate_cohort would use (ages + derived seeds).
std::vector<PhantomSpec> cohort_specs(std::size_t n, double age_low, double age_high,
                                      std::uint64_t seed, const PhantomSpec& base = {});

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

}  // namespace brainage
