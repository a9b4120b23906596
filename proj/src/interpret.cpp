#include "brainage/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "brainage/error.hpp"
#include "brainage/volume_io.hpp"

namespace brainage {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SaliencyMethod m) {
  switch (m) {
    case SaliencyMethod::kGradCam:
      return "gradcam";
    case SaliencyMethod::kOcclusion:
      return "occlusion";
    case SaliencyMethod::kSmoothGrad:
      return "smoothgrad";
    case SaliencyMethod::kGradient:
      return "gradient";
  }
  return "unknown";
}

SaliencyMap normalize_unit_range(const SaliencyMap& m) {
  SaliencyMap out = m;
  out.normalization = "unit-range";
  const auto& v = m.data.data.storage();
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  auto& o = out.data.data.storage();
  if (*lo < 0.0f) {
    const float a = std::max(std::abs(*lo), std::abs(*hi));
    if (a > 0.0f) {
      for (auto& x : o) x /= a;
    }
  } else if (*hi > *lo) {
    for (auto& x : o) x = (x - *lo) / (*hi - *lo);
  } else {
    std::fill(o.begin(), o.end(), 0.0f);
  }
  return out;
}

void SaliencyModel::feature_maps(const Volume&, Tensor&, Tensor&) {
  throw CapabilityError("model does not expose convolutional feature maps");
}

double RegressorSaliencyModel::predict(const Volume& x) {
  return model_.forward_batch(stack_volumes({&x}), Mode::kEval)[0];
}

Volume RegressorSaliencyModel::input_gradient(const Volume& x) {
  const Tensor y = model_.forward_batch(stack_volumes({&x}), Mode::kEval);
  const Tensor g = model_.backward(Tensor(y.shape(), 1.0f));
  return channel_volume(g, 0, 0, x.spacing);
}

void RegressorSaliencyModel::feature_maps(const Volume& x, Tensor& features, Tensor& gradients) {
  const Tensor y = model_.forward_batch(stack_volumes({&x}), Mode::kEval);
  model_.backward(Tensor(y.shape(), 1.0f));
  features = model_.features();
  gradients = model_.feature_gradients();
}

SaliencyMap gradcam(SaliencyModel& model, const Volume& input) {
  Tensor f;
  Tensor g;
  model.feature_maps(input, f, g);
  if (f.numel() == 0 || !(f.shape() == g.shape())) throw CapabilityError("feature maps and gradients unavailable");
  const Shape s = f.shape();
  const std::size_t sp = s.spatial();
  std::vector<double> cam(sp, 0.0);
  for (int k = 0; k < s.c; ++k) {
    const float* gk = g.channel(0, k);
    double alpha = 0.0;
    for (std::size_t i = 0; i < sp; ++i) alpha += gk[i];
    alpha /= static_cast<double>(sp);
    const float* fk = f.channel(0, k);
    for (std::size_t i = 0; i < sp; ++i) cam[i] += alpha * fk[i];
  }
  Volume low(s.dims());
  for (std::size_t i = 0; i < sp; ++i) low.data[i] = static_cast<float>(std::max(0.0, cam[i]));
  SaliencyMap m;
  m.method = SaliencyMethod::kGradCam;
  m.data = resize_trilinear(low, input.dims());
  m.data.spacing = input.spacing;
  for (auto& v : m.data.data.storage()) v = std::max(0.0f, v);
  m.params = {{"feature_dims", {s.w, s.h, s.d}}, {"channels", s.c}};
  return m;
}

void OcclusionSpec::validate(const Dims3& input) const {
  if (size.x < 1 || size.y < 1 || size.z < 1 || stride.x < 1 || stride.y < 1 || stride.z < 1) {
    throw ConfigError("occlusion size and stride must be >= 1 per axis");
  }
  if (size.x > input.x || size.y > input.y || size.z > input.z) {
    throw ConfigError("occlusion cuboid " + to_string(size) + " exceeds input " + to_string(input));
  }
}

std::vector<int> occlusion_offsets(int dim, int size, int stride) {
  std::vector<int> o;
  for (int p = 0; p + size <= dim; p += stride) o.push_back(p);
  if (o.back() != dim - size) o.push_back(dim - size);
  return o;
}

SaliencyMap occlusion_sensitivity(SaliencyModel& model, const Volume& input, const OcclusionSpec& spec) {
  const Dims3 d = input.dims();
  spec.validate(d);
  const double base = model.predict(input);
  std::vector<double> sum(d.voxels(), 0.0);
  std::vector<int> count(d.voxels(), 0);
  const auto ox = occlusion_offsets(d.x, spec.size.x, spec.stride.x);
  const auto oy = occlusion_offsets(d.y, spec.size.y, spec.stride.y);
  const auto oz = occlusion_offsets(d.z, spec.size.z, spec.stride.z);
  Volume work = input;
  for (int z0 : oz) {
    for (int y0 : oy) {
      for (int x0 : ox) {
        for (int z = z0; z < z0 + spec.size.z; ++z) {
          for (int y = y0; y < y0 + spec.size.y; ++y) {
            for (int x = x0; x < x0 + spec.size.x; ++x) work.at(x, y, z) = spec.fill_value;
          }
        }
        const double delta = model.predict(work) - base;
        for (int z = z0; z < z0 + spec.size.z; ++z) {
          for (int y = y0; y < y0 + spec.size.y; ++y) {
            for (int x = x0; x < x0 + spec.size.x; ++x) {
              const std::size_t i = input.data.index(x, y, z);
              sum[i] += delta;
              ++count[i];
              work.data[i] = input.data[i];
            }
          }
        }
      }
    }
  }
  SaliencyMap m;
  m.method = SaliencyMethod::kOcclusion;
  m.data = Volume(d, 0.0f, input.spacing);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] > 0) m.data.data[i] = static_cast<float>(sum[i] / count[i]);
  }
  m.params = {{"size", {spec.size.x, spec.size.y, spec.size.z}},
              {"stride", {spec.stride.x, spec.stride.y, spec.stride.z}},
              {"fill_value", spec.fill_value},
              {"baseline", base}};
  return m;
}

SaliencyMap vanilla_gradient(SaliencyModel& model, const Volume& input) {
  SaliencyMap m;
  m.method = SaliencyMethod::kGradient;
  m.data = model.input_gradient(input);
  for (auto& v : m.data.data.storage()) v = std::abs(v);
  return m;
}

SaliencyMap smoothgrad(SaliencyModel& model, const Volume& input, int n_samples, double noise_sd, std::uint64_t seed) {
  if (n_samples < 1) throw ConfigError("smoothgrad needs n_samples >= 1");
  if (!(noise_sd >= 0.0)) throw ConfigError("smoothgrad noise_sd must be >= 0");
  const auto& v = input.data.storage();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double sd = noise_sd * static_cast<double>(*hi - *lo);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sd > 0.0 ? sd : 1.0);
  std::vector<double> acc(v.size(), 0.0);
  Volume work = input;
  for (int s = 0; s < n_samples; ++s) {
    if (sd > 0.0) {
      for (std::size_t i = 0; i < v.size(); ++i) work.data[i] = static_cast<float>(v[i] + noise(rng));
    }
    const Volume g = model.input_gradient(work);
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += std::abs(static_cast<double>(g.data[i]));
  }
  SaliencyMap m;
  m.method = SaliencyMethod::kSmoothGrad;
  m.data = Volume(input.dims(), 0.0f, input.spacing);
  for (std::size_t i = 0; i < acc.size(); ++i) m.data.data[i] = static_cast<float>(acc[i] / n_samples);
  m.params = {{"n_samples", n_samples}, {"noise_sd", noise_sd}, {"noise_sd_abs", sd}, {"seed", seed}};
  return m;
}

void save_saliency(const SaliencyMap& m, const fs::path& path) {
  save_volume(m.data, path);
  const json j{{"method", to_string(m.method)},
               {"normalization", m.normalization},
               {"sample_id", m.sample_id},
               {"params", m.params}};
  std::ofstream os(path.string() + ".json");
  if (!os) throw IoError("cannot write saliency sidecar for '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

namespace {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
};

struct Image {
  int w = 0;
  int h = 0;
  std::vector<Rgb> px;
  Image(int width, int height, Rgb fill = {}) : w(width), h(height), px(static_cast<std::size_t>(width * height), fill) {}
  Rgb& at(int x, int y) { return px[static_cast<std::size_t>(y * w + x)]; }
};

std::uint8_t byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)); }

// t in [-1, 1]: blue, white, red
Rgb diverging(double t) {
  t = std::clamp(t, -1.0, 1.0);
  if (t < 0.0) return {byte(1.0 + t), byte(1.0 + t), 255};
  return {255, byte(1.0 - t), byte(1.0 - t)};
}

// t in [0, 1]: black, red, yellow, white
Rgb sequential(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {byte(3.0 * t), byte(3.0 * t - 1.0), byte(3.0 * t - 2.0)};
}

constexpr Rgb kNoData{128, 128, 128};
constexpr int kScale = 4;
constexpr int kBarWidth = 12;
constexpr int kGap = 4;

void write_ppm(const fs::path& path, const Image& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image '" + path.string() + "'");
  os << "P6\n" << im.w << " " << im.h << "\n255\n";
  for (const auto& p : im.px) os.put(static_cast<char>(p.r)).put(static_cast<char>(p.g)).put(static_cast<char>(p.b));
}

struct SliceView {
  int w = 0;
  int h = 0;
  std::vector<float> v;
};

SliceView take_slice(const Volume& vol, int axis, int index) {
  const Dims3 d = vol.dims();
  SliceView s;
  if (axis == 0) {
    s.w = d.y;
    s.h = d.z;
  } else if (axis == 1) {
    s.w = d.x;
    s.h = d.z;
  } else {
    s.w = d.x;
    s.h = d.y;
  }
  s.v.resize(static_cast<std::size_t>(s.w * s.h));
  for (int r = 0; r < s.h; ++r) {
    for (int c = 0; c < s.w; ++c) {
      float x = 0.0f;
      if (axis == 0) x = vol.at(index, c, r);
      if (axis == 1) x = vol.at(c, index, r);
      if (axis == 2) x = vol.at(c, r, index);
      // Flip rows so the superior/anterior side renders on top.
      s.v[static_cast<std::size_t>((s.h - 1 - r) * s.w + c)] = x;
    }
  }
  return s;
}

Image render(const SliceView& s, const ColorScale& cs) {
  const int pw = s.w * kScale;
  const int ph = s.h * kScale;
  Image im(pw + kGap + kBarWidth, ph, Rgb{255, 255, 255});
  const bool div = cs.kind == "diverging";
  auto color = [&](double x) {
    if (!std::isfinite(x)) return kNoData;
    if (div) return diverging(cs.high > 0.0 ? x / cs.high : 0.0);
    return sequential(cs.high > cs.low ? (x - cs.low) / (cs.high - cs.low) : 0.0);
  };
  for (int y = 0; y < ph; ++y) {
    for (int x = 0; x < pw; ++x) im.at(x, y) = color(s.v[static_cast<std::size_t>((y / kScale) * s.w + x / kScale)]);
  }
  for (int y = 0; y < ph; ++y) {
    const double t = 1.0 - static_cast<double>(y) / std::max(1, ph - 1);
    const Rgb c = color(cs.low + t * (cs.high - cs.low));
    for (int x = pw + kGap; x < im.w; ++x) im.at(x, y) = c;
  }
  return im;
}

ColorScale scale_for(const std::string& name, const SliceView& s, bool signed_map) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  double amax = 0.0;
  for (float x : s.v) {
    if (!std::isfinite(x)) continue;
    lo = std::min(lo, static_cast<double>(x));
    hi = std::max(hi, static_cast<double>(x));
    amax = std::max(amax, std::abs(static_cast<double>(x)));
  }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  if (signed_map) return {name, "diverging", -amax, amax};
  return {name, "sequential", lo, hi};
}

}  // namespace

PanelOutput comparison_panel(const PADMap& pad, const Volume& regional, const std::vector<SaliencyMap>& saliencies,
                             int axis, int index, const fs::path& out_dir, const std::string& prefix) {
  const Dims3 d = pad.data.dims();
  if (regional.dims() != d) throw ShapeError("regional volume " + to_string(regional.dims()) + " vs PAD " + to_string(d));
  for (const auto& s : saliencies) {
    if (s.data.dims() != d) throw ShapeError(to_string(s.method) + " map " + to_string(s.data.dims()) + " vs PAD " + to_string(d));
  }
  if (axis < 0 || axis > 2) throw ValidationError("slice axis must be 0, 1 or 2");
  const int extent = axis == 0 ? d.x : axis == 1 ? d.y : d.z;
  if (index < 0 || index >= extent) {
    throw RangeError("slice index " + std::to_string(index) + " outside [0, " + std::to_string(extent - 1) + "]");
  }
  fs::create_directories(out_dir);

  Volume pad_view = pad.data;
  for (std::size_t i = 0; i < pad_view.data.size(); ++i) {
    if (!pad.mask.inside(i)) pad_view.data[i] = std::numeric_limits<float>::quiet_NaN();
  }
  struct Entry {
    std::string name;
    SliceView slice;
    bool signed_map;
  };
  std::vector<Entry> entries;
  entries.push_back({pad.adjusted ? "pad_adjusted" : "pad", take_slice(pad_view, axis, index), true});
  entries.push_back({"regional", take_slice(regional, axis, index), true});
  for (const auto& s : saliencies) {
    entries.push_back({to_string(s.method), take_slice(s.data, axis, index), s.method == SaliencyMethod::kOcclusion});
  }

  PanelOutput out;
  std::vector<Image> images;
  for (const auto& e : entries) {
    const ColorScale cs = scale_for(e.name, e.slice, e.signed_map);
    images.push_back(render(e.slice, cs));
    const fs::path p = out_dir / (prefix + "_" + e.name + ".ppm");
    write_ppm(p, images.back());
    out.panels.push_back(p);
    out.scales.push_back(cs);
  }
  int width = 0;
  int height = 0;
  for (const auto& im : images) {
    width += im.w + 2 * kGap;
    height = std::max(height, im.h);
  }
  Image row(width, height, Rgb{255, 255, 255});
  int x0 = 0;
  for (const auto& im : images) {
    x0 += kGap;
    for (int y = 0; y < im.h; ++y) {
      for (int x = 0; x < im.w; ++x) row.at(x0 + x, y) = im.px[static_cast<std::size_t>(y * im.w + x)];
    }
    x0 += im.w + kGap;
  }
  out.combined = out_dir / (prefix + "_combined.ppm");
  write_ppm(out.combined, row);

  json legend = json::array();
  for (const auto& cs : out.scales) legend.push_back({{"panel", cs.panel}, {"kind", cs.kind}, {"low", cs.low}, {"high", cs.high}});
  out.legend = out_dir / (prefix + "_legend.json");
  std::ofstream os(out.legend);
  if (!os) throw IoError("cannot write legend '" + out.legend.string() + "'");
  os << json{{"axis", axis}, {"index", index}, {"units", {{"pad", "years"}, {"regional", "years"}}}, {"scales", legend}}
            .dump(2)
     << "\n";
  return out;
}

}  // namespace brainage
