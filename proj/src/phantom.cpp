#include "brainage/phantom.hpp"

#include <cmath>
#include <random>
#include <string>

#include "brainage/error.hpp"

namespace brainage {

namespace {
// Ventricles are elongated along the anterior-posterior axis.
constexpr double kVentricleElongation = 1.6;
}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 finaliser over (master, stream)
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void PhantomSpec::validate() const {
  if (dims.x < 8 || dims.y < 8 || dims.z < 8) throw ConfigError("phantom dims must be >= 8 per axis");
  if (!(age >= kMinAge && age <= kMaxAge)) {
    throw ConfigError("phantom age " + std::to_string(age) + " outside [18, 88]");
  }
  if (ventricle_gain <= 0.0 || gm_thin_rate <= 0.0) {
    throw ConfigError("ventricle_gain and gm_thin_rate must be > 0 so structure is monotone in age");
  }
  if (noise_sd < 0.0) throw ConfigError("noise_sd must be >= 0");
  const double gm_at_max = gm_base - gm_thin_rate * (kMaxAge - kMinAge);
  if (gm_thickness() <= 0.0 || gm_at_max <= 0.0) {
    throw ConfigError("phantom GM thickness is non-positive within the age range");
  }
  const double wm_outer = brain_radius - shape_jitter - rim - gm_at_max;
  const double vent_at_max = ventricle_base + ventricle_gain * (kMaxAge - kMinAge);
  if (ventricle_base <= 0.0 || kVentricleElongation * vent_at_max >= wm_outer) {
    throw ConfigError("phantom ventricle radius exceeds the white-matter core within the age range");
  }
  if (brain_radius + 2.0 * shape_jitter >= 0.5 * kFieldOfViewMm) {
    throw ConfigError("phantom brain radius does not fit the field of view");
  }
}

PhantomSample generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Dims3 d = spec.dims;
  const Spacing spacing{static_cast<float>(PhantomSpec::kFieldOfViewMm / d.x),
                        static_cast<float>(PhantomSpec::kFieldOfViewMm / d.y),
                        static_cast<float>(PhantomSpec::kFieldOfViewMm / d.z)};

  std::mt19937_64 shape_rng(derive_seed(spec.seed, 1));
  std::uniform_real_distribution<double> jitter(-spec.shape_jitter, spec.shape_jitter);
  const double cx = 0.5 * PhantomSpec::kFieldOfViewMm + jitter(shape_rng);
  const double cy = 0.5 * PhantomSpec::kFieldOfViewMm + jitter(shape_rng);
  const double cz = 0.5 * PhantomSpec::kFieldOfViewMm + jitter(shape_rng);
  const double radius = spec.brain_radius + jitter(shape_rng);
  const double ax = 1.0 + 0.03 * jitter(shape_rng);
  const double ay = 1.0 + 0.03 * jitter(shape_rng);
  const double az = 1.0 + 0.03 * jitter(shape_rng);

  const double r_vent = spec.ventricle_radius();
  const double gm = spec.gm_thickness();
  const double wm_outer = radius - spec.rim - gm;
  const double gm_outer = radius - spec.rim;

  Volume image(d, 0.0f, spacing);
  Grid<std::uint8_t> mask(d);
  Grid<std::uint8_t> labels(d);
  for (int z = 0; z < d.z; ++z) {
    const double pz = (z + 0.5) * spacing[2] - cz;
    for (int y = 0; y < d.y; ++y) {
      const double py = (y + 0.5) * spacing[1] - cy;
      for (int x = 0; x < d.x; ++x) {
        const double px = (x + 0.5) * spacing[0] - cx;
        const double rho = std::sqrt((px / ax) * (px / ax) + (py / ay) * (py / ay) + (pz / az) * (pz / az));
        if (rho > radius) continue;
        const double vent = std::sqrt(px * px + (py / kVentricleElongation) * (py / kVentricleElongation) + pz * pz);
        std::uint8_t t = kWM;
        if (vent < r_vent || rho > gm_outer) {
          t = kCSF;
        } else if (rho > wm_outer) {
          t = kGM;
        }
        const std::size_t i = mask.index(x, y, z);
        mask[i] = 1;
        labels[i] = t;
        image.data[i] = t == kWM ? kWmIntensity : t == kGM ? kGmIntensity : kCsfIntensity;
      }
    }
  }
  if (spec.noise_sd > 0.0) {
    std::mt19937_64 noise_rng(derive_seed(spec.seed, 2));
    std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_sd));
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] != 0) image.data[i] += noise(noise_rng);
    }
  }
  PhantomSample s{std::move(image), BrainMask(std::move(mask)),
                  LabelVolume(std::move(labels), default_tissue_map()), spec.age};
  for (int code : {kGM, kWM, kCSF}) {
    if (s.tissues.count(code) == 0) {
      throw ConfigError("phantom resolution too coarse: tissue class " + std::to_string(code) + " is empty");
    }
  }
  return s;
}

std::vector<PhantomSpec> cohort_specs(std::size_t n, double age_low, double age_high,
                                      std::uint64_t seed, const PhantomSpec& base) {
  if (n < 1) throw ConfigError("cohort size must be >= 1");
  if (!(age_low < age_high) || age_low < PhantomSpec::kMinAge || age_high > PhantomSpec::kMaxAge) {
    throw ConfigError("cohort age range must satisfy 18 <= low < high <= 88");
  }
  std::mt19937_64 rng(derive_seed(seed, 0));
  std::uniform_real_distribution<double> age(age_low, age_high);
  std::vector<PhantomSpec> specs;
  specs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PhantomSpec s = base;
    s.age = age(rng);
    s.seed = derive_seed(seed, 1000 + i);
    specs.push_back(s);
  }
  return specs;
}

std::vector<PhantomSample> generate_cohort(std::size_t n, double age_low, double age_high,
                                           std::uint64_t seed, const PhantomSpec& base) {
  std::vector<PhantomSample> out;
  for (const auto& s : cohort_specs(n, age_low, age_high, seed, base)) out.push_back(generate_phantom(s));
  return out;
}

}  // namespace brainage
