#include "brainage/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "brainage/error.hpp"
#include "brainage/resample.hpp"

namespace brainage {

std::string to_string(const Index3& v) {
  std::ostringstream os;
  os << "(" << v.x << "," << v.y << "," << v.z << ")";
  return os.str();
}

template <class T>
Grid<T>::Grid(Dims3 dims, T fill) : dims_(dims) {
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) {
    throw ShapeError("grid dimensions must be >= 1, got " + to_string(dims));
  }
  values_.assign(dims.voxels(), fill);
}

template class Grid<float>;
template class Grid<std::uint8_t>;

Volume::Volume(Dims3 dims, float fill, Spacing sp) : data(dims, fill), spacing(sp) {}

void Volume::validate() const {
  const auto& d = dims();
  if (d.x < 1 || d.y < 1 || d.z < 1) {
    throw ValidationError("volume dimensions must be >= 1, got " + to_string(d));
  }
  for (float s : spacing) {
    if (!(s > 0.0f) || !std::isfinite(s)) {
      throw ValidationError("volume spacing components must be finite and > 0");
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      const auto x = static_cast<int>(i % d.x);
      const auto y = static_cast<int>((i / d.x) % d.y);
      const auto z = static_cast<int>(i / (static_cast<std::size_t>(d.x) * d.y));
      throw IngestError("non-finite voxel value at index " + to_string({x, y, z}));
    }
  }
}

BrainMask::BrainMask(Grid<std::uint8_t> grid) : grid_(std::move(grid)) {
  for (auto v : grid_.values()) {
    if (v > 1) throw ValidationError("brain mask must be strictly binary");
    count_ += v;
  }
  if (count_ == 0) throw ValidationError("brain mask has no brain voxels");
}

BrainMask BrainMask::from_volume(const Volume& v) {
  Grid<std::uint8_t> g(v.dims());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float x = v.data[i];
    if (x != 0.0f && x != 1.0f) {
      throw ValidationError("brain mask volume holds a non-binary value " + std::to_string(x));
    }
    g[i] = x != 0.0f ? 1 : 0;
  }
  return BrainMask(std::move(g));
}

Volume BrainMask::to_volume() const {
  Volume v(dims());
  for (std::size_t i = 0; i < grid_.size(); ++i) v.data[i] = grid_[i];
  return v;
}

std::map<int, std::string> default_tissue_map() {
  return {{kBackground, "background"}, {kGM, "GM"}, {kWM, "WM"}, {kCSF, "CSF"}};
}

LabelVolume::LabelVolume(Grid<std::uint8_t> grid, std::map<int, std::string> label_map)
    : grid_(std::move(grid)), label_map_(std::move(label_map)) {
  for (auto v : grid_.values()) {
    if (!label_map_.contains(v)) {
      throw ValidationError("label value " + std::to_string(v) + " missing from label map");
    }
  }
}

LabelVolume LabelVolume::from_volume(const Volume& v, std::map<int, std::string> label_map) {
  Grid<std::uint8_t> g(v.dims());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float x = v.data[i];
    if (x < 0.0f || x > 255.0f || std::nearbyint(x) != x) {
      throw ValidationError("label volume holds a non-integer value " + std::to_string(x));
    }
    g[i] = static_cast<std::uint8_t>(x);
  }
  return LabelVolume(std::move(g), std::move(label_map));
}

std::size_t LabelVolume::count(int code) const {
  return static_cast<std::size_t>(
      std::count(grid_.values().begin(), grid_.values().end(), static_cast<std::uint8_t>(code)));
}

Volume LabelVolume::to_volume() const {
  Volume v(dims());
  for (std::size_t i = 0; i < grid_.size(); ++i) v.data[i] = grid_[i];
  return v;
}

void check_patch(const Dims3& dims, const Patch& p) {
  const bool ok = p.origin.x >= 0 && p.origin.y >= 0 && p.origin.z >= 0 && p.size.x >= 1 &&
                  p.size.y >= 1 && p.size.z >= 1 && p.origin.x + p.size.x <= dims.x &&
                  p.origin.y + p.size.y <= dims.y && p.origin.z + p.size.z <= dims.z;
  if (!ok) {
    throw ShapeError("patch origin " + to_string(p.origin) + " size " + to_string(p.size) +
                     " does not fit volume " + to_string(dims));
  }
}

Volume apply_mask(const Volume& v, const BrainMask& m) {
  if (v.dims() != m.dims()) {
    throw ShapeError("mask shape " + to_string(m.dims()) + " differs from volume shape " +
                     to_string(v.dims()));
  }
  Volume out = v;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (!m.inside(i)) out.data[i] = 0.0f;
  }
  return out;
}

Patch sample_random_patch(const Dims3& dims, const Dims3& size, std::mt19937_64& rng) {
  if (size.x < 1 || size.y < 1 || size.z < 1 || size.x > dims.x || size.y > dims.y || size.z > dims.z) {
    throw ShapeError("patch size " + to_string(size) + " exceeds volume dims " + to_string(dims));
  }
  auto draw = [&rng](int slack) {
    std::uniform_int_distribution<int> u(0, slack);
    return u(rng);
  };
  Patch p;
  p.size = size;
  p.origin.x = draw(dims.x - size.x);
  p.origin.y = draw(dims.y - size.y);
  p.origin.z = draw(dims.z - size.z);
  return p;
}

namespace {

template <class T>
Grid<T> crop_grid(const Grid<T>& g, const Patch& p) {
  check_patch(g.dims(), p);
  Grid<T> out(p.size);
  for (int z = 0; z < p.size.z; ++z) {
    for (int y = 0; y < p.size.y; ++y) {
      const T* src = &g.at(p.origin.x, p.origin.y + y, p.origin.z + z);
      std::copy(src, src + p.size.x, &out.at(0, y, z));
    }
  }
  return out;
}

}  // namespace

Volume crop(const Volume& v, const Patch& p) {
  Volume out;
  out.data = crop_grid(v.data, p);
  out.spacing = v.spacing;
  out.orientation = v.orientation;
  return out;
}

BrainMask crop(const BrainMask& m, const Patch& p) { return BrainMask(crop_grid(m.grid(), p)); }

LabelVolume crop(const LabelVolume& l, const Patch& p) {
  return LabelVolume(crop_grid(l.grid(), p), l.label_map());
}

double masked_mean(std::span<const float> values, const BrainMask& m) {
  if (values.size() != m.grid().size()) throw ShapeError("masked_mean: size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (m.inside(i)) sum += values[i];
  }
  return sum / static_cast<double>(m.count());
}

namespace detail {

std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const auto w1 = static_cast<float>(src - i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0f - w1, w1};
  }
  return taps;
}

void resample_axis(std::span<const float> src, std::span<float> dst, int outer, int in_len,
                   int out_len, int inner, const std::vector<LinearTap>& taps) {
  for (int a = 0; a < outer; ++a) {
    const float* s = src.data() + static_cast<std::size_t>(a) * in_len * inner;
    float* d = dst.data() + static_cast<std::size_t>(a) * out_len * inner;
    for (int o = 0; o < out_len; ++o) {
      const auto& t = taps[static_cast<std::size_t>(o)];
      const float* s0 = s + static_cast<std::size_t>(t.i0) * inner;
      const float* s1 = s + static_cast<std::size_t>(t.i1) * inner;
      float* dd = d + static_cast<std::size_t>(o) * inner;
      for (int i = 0; i < inner; ++i) dd[i] = t.w0 * s0[i] + t.w1 * s1[i];
    }
  }
}

void resample_axis_adjoint(std::span<const float> grad_dst, std::span<float> grad_src, int outer,
                           int in_len, int out_len, int inner, const std::vector<LinearTap>& taps) {
  std::fill(grad_src.begin(), grad_src.end(), 0.0f);
  for (int a = 0; a < outer; ++a) {
    float* s = grad_src.data() + static_cast<std::size_t>(a) * in_len * inner;
    const float* d = grad_dst.data() + static_cast<std::size_t>(a) * out_len * inner;
    for (int o = 0; o < out_len; ++o) {
      const auto& t = taps[static_cast<std::size_t>(o)];
      float* s0 = s + static_cast<std::size_t>(t.i0) * inner;
      float* s1 = s + static_cast<std::size_t>(t.i1) * inner;
      const float* dd = d + static_cast<std::size_t>(o) * inner;
      for (int i = 0; i < inner; ++i) {
        s0[i] += t.w0 * dd[i];
        s1[i] += t.w1 * dd[i];
      }
    }
  }
}

}  // namespace detail

Volume resize_trilinear(const Volume& v, const Dims3& out) {
  const auto& in = v.dims();
  if (out.x < 1 || out.y < 1 || out.z < 1) throw ShapeError("resize target must be >= 1");
  std::vector<float> a(v.data.storage());
  // x axis: outer = ny*nz, inner = 1
  std::vector<float> b(static_cast<std::size_t>(out.x) * in.y * in.z);
  detail::resample_axis(a, b, in.y * in.z, in.x, out.x, 1, detail::linear_taps(in.x, out.x));
  std::vector<float> c(static_cast<std::size_t>(out.x) * out.y * in.z);
  detail::resample_axis(b, c, in.z, in.y, out.y, out.x, detail::linear_taps(in.y, out.y));
  Volume r(out, 0.0f, v.spacing);
  detail::resample_axis(c, r.data.storage(), 1, in.z, out.z, out.x * out.y,
                        detail::linear_taps(in.z, out.z));
  for (int k = 0; k < 3; ++k) {
    const int i = (k == 0 ? in.x : k == 1 ? in.y : in.z);
    const int o = (k == 0 ? out.x : k == 1 ? out.y : out.z);
    r.spacing[static_cast<std::size_t>(k)] = v.spacing[static_cast<std::size_t>(k)] * static_cast<float>(i) / static_cast<float>(o);
  }
  r.orientation = v.orientation;
  return r;
}

}  // namespace brainage
