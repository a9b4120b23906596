#include "brainage/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "brainage/error.hpp"
#include "brainage/resample.hpp"

namespace brainage {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.d) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor stack_volumes(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw ShapeError("cannot stack an empty batch");
  const Dims3 d = volumes.front()->dims();
  Tensor t(Shape{static_cast<int>(volumes.size()), 1, d.z, d.y, d.x});
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    if (volumes[i]->dims() != d) {
      throw ShapeError("batch volume " + std::to_string(i) + " has dims " + to_string(volumes[i]->dims()) +
                       ", expected " + to_string(d));
    }
    const auto& src = volumes[i]->data.storage();
    std::copy(src.begin(), src.end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

Volume channel_volume(const Tensor& t, int n, int c, const Spacing& spacing) {
  Volume v(t.shape().dims(), 0.0f, spacing);
  const float* src = t.channel(n, c);
  std::copy(src, src + t.shape().spatial(), v.data.storage().begin());
  return v;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat shape mismatch " + to_string(sa) + " vs " + to_string(sb));
  }
  Tensor out(Shape{sa.n, sa.c + sb.c, sa.d, sa.h, sa.w});
  for (int n = 0; n < sa.n; ++n) {
    std::copy(a.sample(n), a.sample(n) + sa.c * sa.spatial(), out.sample(n));
    std::copy(b.sample(n), b.sample(n) + sb.c * sb.spatial(), out.channel(n, sa.c));
  }
  return out;
}

void split_channels(const Tensor& ab, int channels_a, Tensor& a, Tensor& b) {
  const Shape s = ab.shape();
  a = Tensor(Shape{s.n, channels_a, s.d, s.h, s.w});
  b = Tensor(Shape{s.n, s.c - channels_a, s.d, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    std::copy(ab.sample(n), ab.channel(n, channels_a), a.sample(n));
    std::copy(ab.channel(n, channels_a), ab.sample(n) + s.c * s.spatial(), b.sample(n));
  }
}

namespace {

inline float dot(const float* __restrict a, const float* __restrict b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

inline void axpy(float* __restrict y, const float* __restrict x, float a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

constexpr int kLanes = 16;
using vf = float __attribute__((vector_size(kLanes * sizeof(float))));

inline vf vload(const float* p) {
  vf v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline float hsum(vf v) {
  float s = 0.0f;
  for (int l = 0; l < kLanes; ++l) s += v[l];
  return s;
}

// One sample's channels with a one-voxel zero halo. Rows are padded to a
// multiple of kLanes plus slack so lane chunks may read past the row end.
struct Padded {
  int channels = 0;
  int d = 0;
  int h = 0;
  int w = 0;
  int row_stride = 0;
  std::size_t plane = 0;    // (h + 2) * row_stride
  std::size_t channel = 0;  // (d + 2) * plane
  std::vector<float> data;

  // Row holding input (z - 1, y - 1, x - 1) at offset x.
  const float* row(int c, int z, int y) const {
    return data.data() + static_cast<std::size_t>(c) * channel + static_cast<std::size_t>(z) * plane +
           static_cast<std::size_t>(y) * row_stride;
  }
};

int round_up(int v, int m) { return (v + m - 1) / m * m; }

Padded pad_sample(const Tensor& t, int n) {
  const Shape s = t.shape();
  Padded p;
  p.channels = s.c;
  p.d = s.d;
  p.h = s.h;
  p.w = s.w;
  p.row_stride = round_up(s.w, kLanes) + kLanes;
  p.plane = static_cast<std::size_t>(s.h + 2) * p.row_stride;
  p.channel = static_cast<std::size_t>(s.d + 2) * p.plane;
  p.data.assign(p.channel * s.c, 0.0f);
  for (int c = 0; c < s.c; ++c) {
    const float* src = t.channel(n, c);
    for (int z = 0; z < s.d; ++z) {
      for (int y = 0; y < s.h; ++y) {
        float* dst = p.data.data() + static_cast<std::size_t>(c) * p.channel +
                     static_cast<std::size_t>(z + 1) * p.plane + static_cast<std::size_t>(y + 1) * p.row_stride + 1;
        std::memcpy(dst, src + (static_cast<std::size_t>(z) * s.h + y) * s.w, sizeof(float) * s.w);
      }
    }
  }
  return p;
}

// out[co] = bias[co] + sum_ci sum_k w[co][ci][k] * in[ci] shifted by k, for a
// block of CB output channels held in registers.
template <int CB>
void conv3_block(const Padded& in, const float* w, const float* bias, int co0, float* out) {
  const int cin = in.channels;
  const int W = in.w;
  const std::size_t out_plane = static_cast<std::size_t>(in.h) * W * in.d;
  for (int z = 0; z < in.d; ++z) {
    for (int y = 0; y < in.h; ++y) {
      const std::size_t orow = (static_cast<std::size_t>(z) * in.h + y) * W;
      for (int xc = 0; xc < W; xc += kLanes) {
        vf acc[CB];
        for (int b = 0; b < CB; ++b) acc[b] = vf{} + (bias != nullptr ? bias[co0 + b] : 0.0f);
        for (int ci = 0; ci < cin; ++ci) {
          for (int kz = 0; kz < 3; ++kz) {
            for (int ky = 0; ky < 3; ++ky) {
              const float* r = in.row(ci, z + kz, y + ky) + xc;
              const vf p0 = vload(r);
              const vf p1 = vload(r + 1);
              const vf p2 = vload(r + 2);
              for (int b = 0; b < CB; ++b) {
                const float* k = w + (static_cast<std::size_t>((co0 + b) * cin + ci) * 9 + kz * 3 + ky) * 3;
                acc[b] += k[0] * p0 + k[1] * p1 + k[2] * p2;
              }
            }
          }
        }
        const int lanes = std::min(kLanes, W - xc);
        for (int b = 0; b < CB; ++b) {
          float tmp[kLanes];
          std::memcpy(tmp, &acc[b], sizeof tmp);
          std::memcpy(out + static_cast<std::size_t>(co0 + b) * out_plane + orow + xc, tmp, sizeof(float) * lanes);
        }
      }
    }
  }
}

void conv3_same(const Padded& in, const float* w, const float* bias, int cout, float* out) {
  int co = 0;
  for (; co + 4 <= cout; co += 4) conv3_block<4>(in, w, bias, co, out);
  for (; co + 2 <= cout; co += 2) conv3_block<2>(in, w, bias, co, out);
  for (; co < cout; ++co) conv3_block<1>(in, w, bias, co, out);
}

// gw[co][ci][kz][ky][kx] += sum over voxels of g[co] * in[ci] shifted.
// Works through z-slabs small enough to stay cache resident.
template <int CB>
void conv3_wgrad_block(const Padded& in, const Padded& g, int co0, int z0, int z1, float* gw) {
  const int cin = in.channels;
  const int W = in.w;
  for (int ci = 0; ci < cin; ++ci) {
    for (int kz = 0; kz < 3; ++kz) {
      for (int ky = 0; ky < 3; ++ky) {
        vf acc[CB][3];
        for (int b = 0; b < CB; ++b) acc[b][0] = acc[b][1] = acc[b][2] = vf{};
        for (int z = z0; z < z1; ++z) {
          for (int y = 0; y < in.h; ++y) {
            const float* r = in.row(ci, z + kz, y + ky);
            for (int xc = 0; xc < W; xc += kLanes) {
              const vf p0 = vload(r + xc);
              const vf p1 = vload(r + xc + 1);
              const vf p2 = vload(r + xc + 2);
              for (int b = 0; b < CB; ++b) {
                const vf gv = vload(g.row(co0 + b, z + 1, y + 1) + 1 + xc);
                acc[b][0] += gv * p0;
                acc[b][1] += gv * p1;
                acc[b][2] += gv * p2;
              }
            }
          }
        }
        for (int b = 0; b < CB; ++b) {
          float* k = gw + (static_cast<std::size_t>((co0 + b) * cin + ci) * 9 + kz * 3 + ky) * 3;
          for (int kx = 0; kx < 3; ++kx) k[kx] += hsum(acc[b][kx]);
        }
      }
    }
  }
}

void conv3_weight_grad(const Padded& in, const Padded& g, float* gw) {
  const int cout = g.channels;
  constexpr std::size_t kSlabBytes = 384 * 1024;
  const std::size_t plane_bytes = in.plane * sizeof(float) * 5;
  const int slab = static_cast<int>(std::clamp<std::size_t>(kSlabBytes / std::max<std::size_t>(plane_bytes, 1), 1, 64));
  for (int z0 = 0; z0 < in.d; z0 += slab) {
    const int z1 = std::min(in.d, z0 + slab);
    int co = 0;
    for (; co + 4 <= cout; co += 4) conv3_wgrad_block<4>(in, g, co, z0, z1, gw);
    for (; co + 2 <= cout; co += 2) conv3_wgrad_block<2>(in, g, co, z0, z1, gw);
    for (; co < cout; ++co) conv3_wgrad_block<1>(in, g, co, z0, z1, gw);
  }
}

void init_normal(std::vector<float>& v, float sd, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, sd);
  for (auto& x : v) x = dist(rng);
}

}  // namespace

Conv3d::Conv3d(std::string name, int in_channels, int out_channels, int kernel, std::mt19937_64& rng, bool bias)
    : cin_(in_channels),
      cout_(out_channels),
      k_(kernel),
      weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)),
      use_bias_(bias) {
  if (kernel != 1 && kernel != 3) throw ConfigError("Conv3d supports kernel 1 or 3");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("Conv3d channel counts must be >= 1");
  const float fan_in = static_cast<float>(in_channels * kernel * kernel * kernel);
  init_normal(weight_.value, std::sqrt(2.0f / fan_in), rng);
}

Tensor Conv3d::forward(const Tensor& x, Mode /*mode*/) {
  const Shape s = x.shape();
  if (s.c != cin_) throw ShapeError("Conv3d expects " + std::to_string(cin_) + " channels, got " + to_string(s));
  input_ = x;
  Tensor out(Shape{s.n, cout_, s.d, s.h, s.w});
  const std::size_t sp = s.spatial();
  const float* wt = weight_.value.data();
  if (k_ == 1) {
    for (int n = 0; n < s.n; ++n) {
      for (int co = 0; co < cout_; ++co) {
        float* o = out.channel(n, co);
        std::fill(o, o + sp, bias_.value[static_cast<std::size_t>(co)]);
        for (int ci = 0; ci < cin_; ++ci) axpy(o, x.channel(n, ci), wt[co * cin_ + ci], sp);
      }
    }
    return out;
  }
  for (int n = 0; n < s.n; ++n) {
    const Padded p = pad_sample(x, n);
    conv3_same(p, wt, bias_.value.data(), cout_, out.sample(n));
  }
  return out;
}

Tensor Conv3d::backward(const Tensor& grad_out) {
  const Shape s = input_.shape();
  if (grad_out.shape() != Shape{s.n, cout_, s.d, s.h, s.w}) throw ShapeError("Conv3d backward shape mismatch");
  Tensor gin(s);
  const std::size_t sp = s.spatial();
  const float* wt = weight_.value.data();
  float* gw = weight_.grad.data();
  for (int n = 0; n < s.n && use_bias_; ++n) {
    for (int co = 0; co < cout_; ++co) {
      const float* g = grad_out.channel(n, co);
      double b = 0.0;
      for (std::size_t i = 0; i < sp; ++i) b += g[i];
      bias_.grad[static_cast<std::size_t>(co)] += static_cast<float>(b);
    }
  }
  if (k_ == 1) {
    for (int n = 0; n < s.n; ++n) {
      for (int co = 0; co < cout_; ++co) {
        const float* g = grad_out.channel(n, co);
        for (int ci = 0; ci < cin_; ++ci) {
          axpy(gin.channel(n, ci), g, wt[co * cin_ + ci], sp);
          gw[co * cin_ + ci] += dot(g, input_.channel(n, ci), sp);
        }
      }
    }
    return gin;
  }
  // Input gradient is a same-padded convolution of the output gradient with
  // the spatially flipped, channel-transposed kernel.
  std::vector<float> flipped(weight_.value.size());
  for (int co = 0; co < cout_; ++co) {
    for (int ci = 0; ci < cin_; ++ci) {
      const float* src = wt + static_cast<std::size_t>(co * cin_ + ci) * 27;
      float* dst = flipped.data() + static_cast<std::size_t>(ci * cout_ + co) * 27;
      for (int k = 0; k < 27; ++k) dst[k] = src[26 - k];
    }
  }
  for (int n = 0; n < s.n; ++n) {
    const Padded g = pad_sample(grad_out, n);
    conv3_same(g, flipped.data(), nullptr, cin_, gin.sample(n));
    const Padded p = pad_sample(input_, n);
    conv3_weight_grad(p, g, gw);
  }
  return gin;
}

void Conv3d::collect(std::vector<Param*>& params, std::vector<Buffer>& /*buffers*/) {
  params.push_back(&weight_);
  if (use_bias_) params.push_back(&bias_);
}

BatchNorm3d::BatchNorm3d(std::string name, int channels, float momentum, float eps)
    : name_(std::move(name)),
      channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(name_ + ".gamma", static_cast<std::size_t>(channels)),
      beta_(name_ + ".beta", static_cast<std::size_t>(channels)),
      running_mean_(static_cast<std::size_t>(channels), 0.0f),
      running_var_(static_cast<std::size_t>(channels), 1.0f) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
}

Tensor BatchNorm3d::forward(const Tensor& x, Mode mode) {
  const Shape s = x.shape();
  if (s.c != channels_) throw ShapeError("BatchNorm3d channel mismatch " + to_string(s));
  const std::size_t sp = s.spatial();
  const double count = static_cast<double>(sp) * s.n;
  last_mode_ = mode;
  xhat_ = Tensor(s);
  inv_std_.assign(static_cast<std::size_t>(channels_), 0.0f);
  Tensor out(s);
  for (int c = 0; c < channels_; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    float mean = running_mean_[cu];
    float var = running_var_[cu];
    if (mode == Mode::kTrain) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = x.channel(n, c);
        for (std::size_t i = 0; i < sp; ++i) sum += p[i];
      }
      const double m = sum / count;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = x.channel(n, c);
        for (std::size_t i = 0; i < sp; ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      mean = static_cast<float>(m);
      var = static_cast<float>(sq / count);
      const double unbiased = count > 1.0 ? sq / (count - 1.0) : sq;
      running_mean_[cu] = (1.0f - momentum_) * running_mean_[cu] + momentum_ * mean;
      running_var_[cu] = (1.0f - momentum_) * running_var_[cu] + momentum_ * static_cast<float>(unbiased);
    }
    const float inv = 1.0f / std::sqrt(var + eps_);
    inv_std_[cu] = inv;
    const float g = gamma_.value[cu];
    const float b = beta_.value[cu];
    for (int n = 0; n < s.n; ++n) {
      const float* p = x.channel(n, c);
      float* xh = xhat_.channel(n, c);
      float* o = out.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) {
        xh[i] = (p[i] - mean) * inv;
        o[i] = g * xh[i] + b;
      }
    }
  }
  return out;
}

Tensor BatchNorm3d::backward(const Tensor& grad_out) {
  const Shape s = xhat_.shape();
  const std::size_t sp = s.spatial();
  const double count = static_cast<double>(sp) * s.n;
  Tensor gin(s);
  for (int c = 0; c < channels_; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const float* g = grad_out.channel(n, c);
      const float* xh = xhat_.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * xh[i];
      }
    }
    gamma_.grad[cu] += static_cast<float>(sum_gx);
    beta_.grad[cu] += static_cast<float>(sum_g);
    const float scale = gamma_.value[cu] * inv_std_[cu];
    if (last_mode_ == Mode::kEval) {
      for (int n = 0; n < s.n; ++n) {
        const float* g = grad_out.channel(n, c);
        float* gi = gin.channel(n, c);
        for (std::size_t i = 0; i < sp; ++i) gi[i] = scale * g[i];
      }
      continue;
    }
    const auto mean_g = static_cast<float>(sum_g / count);
    const auto mean_gx = static_cast<float>(sum_gx / count);
    for (int n = 0; n < s.n; ++n) {
      const float* g = grad_out.channel(n, c);
      const float* xh = xhat_.channel(n, c);
      float* gi = gin.channel(n, c);
      for (std::size_t i = 0; i < sp; ++i) gi[i] = scale * (g[i] - mean_g - xh[i] * mean_gx);
    }
  }
  return gin;
}

void BatchNorm3d::collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) {
  params.push_back(&gamma_);
  params.push_back(&beta_);
  buffers.push_back({name_ + ".running_mean", &running_mean_});
  buffers.push_back({name_ + ".running_var", &running_var_});
}

Tensor ReLU::forward(const Tensor& x, Mode /*mode*/) {
  output_ = x;
  for (auto& v : output_.data()) v = v > 0.0f ? v : 0.0f;
  return output_;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor gin = grad_out;
  const auto& y = output_.data();
  auto& g = gin.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = y[i] > 0.0f ? g[i] : 0.0f;
  return gin;
}

Tensor MaxPool3d::forward(const Tensor& x, Mode /*mode*/) {
  const Shape s = x.shape();
  if (s.d % 2 != 0 || s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("MaxPool3d needs even spatial dims, got " + to_string(s));
  }
  in_shape_ = s;
  const Shape o{s.n, s.c, s.d / 2, s.h / 2, s.w / 2};
  Tensor out(o);
  argmax_.assign(o.numel(), 0);
  std::size_t k = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* in = x.channel(n, c);
      float* op = out.channel(n, c);
      for (int z = 0; z < o.d; ++z) {
        for (int y = 0; y < o.h; ++y) {
          for (int xx = 0; xx < o.w; ++xx, ++k) {
            float best = -INFINITY;
            std::uint8_t arg = 0;
            for (std::uint8_t j = 0; j < 8; ++j) {
              const int dz = j >> 2;
              const int dy = (j >> 1) & 1;
              const int dx = j & 1;
              const float v = in[(static_cast<std::size_t>(2 * z + dz) * s.h + (2 * y + dy)) * s.w + (2 * xx + dx)];
              if (v > best) {
                best = v;
                arg = j;
              }
            }
            op[(static_cast<std::size_t>(z) * o.h + y) * o.w + xx] = best;
            argmax_[k] = arg;
          }
        }
      }
    }
  }
  return out;
}

Tensor MaxPool3d::backward(const Tensor& grad_out) {
  const Shape s = in_shape_;
  const Shape o = grad_out.shape();
  Tensor gin(s);
  std::size_t k = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* g = grad_out.channel(n, c);
      float* gi = gin.channel(n, c);
      for (int z = 0; z < o.d; ++z) {
        for (int y = 0; y < o.h; ++y) {
          for (int xx = 0; xx < o.w; ++xx, ++k) {
            const std::uint8_t j = argmax_[k];
            gi[(static_cast<std::size_t>(2 * z + (j >> 2)) * s.h + (2 * y + ((j >> 1) & 1))) * s.w + (2 * xx + (j & 1))] +=
                g[(static_cast<std::size_t>(z) * o.h + y) * o.w + xx];
          }
        }
      }
    }
  }
  return gin;
}

Tensor Upsample::forward(const Tensor& x, Mode /*mode*/) {
  const Shape s = x.shape();
  in_shape_ = s;
  const Dims3 t = target_;
  if (t.x < 1 || t.y < 1 || t.z < 1) throw ShapeError("Upsample target not set");
  Tensor out(Shape{s.n, s.c, t.z, t.y, t.x});
  const auto tx = detail::linear_taps(s.w, t.x);
  const auto ty = detail::linear_taps(s.h, t.y);
  const auto tz = detail::linear_taps(s.d, t.z);
  std::vector<float> a(static_cast<std::size_t>(t.x) * s.h * s.d);
  std::vector<float> b(static_cast<std::size_t>(t.x) * t.y * s.d);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      std::span<const float> src(x.channel(n, c), s.spatial());
      detail::resample_axis(src, a, s.h * s.d, s.w, t.x, 1, tx);
      detail::resample_axis(a, b, s.d, s.h, t.y, t.x, ty);
      detail::resample_axis(b, std::span<float>(out.channel(n, c), out.shape().spatial()), 1, s.d, t.z,
                            t.x * t.y, tz);
    }
  }
  return out;
}

Tensor Upsample::backward(const Tensor& grad_out) {
  const Shape s = in_shape_;
  const Dims3 t = target_;
  Tensor gin(s);
  const auto tx = detail::linear_taps(s.w, t.x);
  const auto ty = detail::linear_taps(s.h, t.y);
  const auto tz = detail::linear_taps(s.d, t.z);
  std::vector<float> a(static_cast<std::size_t>(t.x) * s.h * s.d);
  std::vector<float> b(static_cast<std::size_t>(t.x) * t.y * s.d);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      std::span<const float> g(grad_out.channel(n, c), grad_out.shape().spatial());
      detail::resample_axis_adjoint(g, b, 1, s.d, t.z, t.x * t.y, tz);
      detail::resample_axis_adjoint(b, a, s.d, s.h, t.y, t.x, ty);
      detail::resample_axis_adjoint(a, std::span<float>(gin.channel(n, c), s.spatial()), s.h * s.d, s.w, t.x, 1, tx);
    }
  }
  return gin;
}

Tensor GlobalAvgPool::forward(const Tensor& x, Mode /*mode*/) {
  const Shape s = x.shape();
  in_shape_ = s;
  Tensor out(Shape{s.n, s.c, 1, 1, 1});
  const std::size_t sp = s.spatial();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* p = x.channel(n, c);
      double sum = 0.0;
      for (std::size_t i = 0; i < sp; ++i) sum += p[i];
      *out.channel(n, c) = static_cast<float>(sum / static_cast<double>(sp));
    }
  }
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  const Shape s = in_shape_;
  Tensor gin(s);
  const std::size_t sp = s.spatial();
  const float inv = 1.0f / static_cast<float>(sp);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float g = *grad_out.channel(n, c) * inv;
      std::fill(gin.channel(n, c), gin.channel(n, c) + sp, g);
    }
  }
  return gin;
}

Linear::Linear(std::string name, int in_features, int out_features, std::mt19937_64& rng)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", static_cast<std::size_t>(in_features) * out_features),
      bias_(name + ".bias", static_cast<std::size_t>(out_features)) {
  init_normal(weight_.value, std::sqrt(2.0f / static_cast<float>(in_features)), rng);
}

Tensor Linear::forward(const Tensor& x, Mode /*mode*/) {
  const Shape s = x.shape();
  if (s.c != in_ || s.spatial() != 1) throw ShapeError("Linear expects (n," + std::to_string(in_) + ",1,1,1), got " + to_string(s));
  input_ = x;
  Tensor out(Shape{s.n, out_, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    const float* in = x.sample(n);
    for (int o = 0; o < out_; ++o) {
      float acc = bias_.value[static_cast<std::size_t>(o)];
      for (int i = 0; i < in_; ++i) acc += weight_.value[static_cast<std::size_t>(o * in_ + i)] * in[i];
      out.sample(n)[o] = acc;
    }
  }
  return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const Shape s = input_.shape();
  Tensor gin(s);
  for (int n = 0; n < s.n; ++n) {
    const float* in = input_.sample(n);
    const float* g = grad_out.sample(n);
    float* gi = gin.sample(n);
    for (int o = 0; o < out_; ++o) {
      bias_.grad[static_cast<std::size_t>(o)] += g[o];
      for (int i = 0; i < in_; ++i) {
        weight_.grad[static_cast<std::size_t>(o * in_ + i)] += g[o] * in[i];
        gi[i] += weight_.value[static_cast<std::size_t>(o * in_ + i)] * g[o];
      }
    }
  }
  return gin;
}

void Linear::collect(std::vector<Param*>& params, std::vector<Buffer>& /*buffers*/) {
  params.push_back(&weight_);
  params.push_back(&bias_);
}

Sequential& Sequential::add(std::unique_ptr<Layer> layer) {
  layers_.push_back(std::move(layer));
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor t = x;
  for (auto& l : layers_) t = l->forward(t, mode);
  return t;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) {
  for (auto& l : layers_) l->collect(params, buffers);
}

std::unique_ptr<Sequential> conv_block(const std::string& name, int cin, int cout, bool batch_norm,
                                       std::mt19937_64& rng, int kernel) {
  auto s = std::make_unique<Sequential>();
  s->add(std::make_unique<Conv3d>(name + ".conv", cin, cout, kernel, rng, !batch_norm));
  if (batch_norm) s->add(std::make_unique<BatchNorm3d>(name + ".bn", cout));
  s->add(std::make_unique<ReLU>());
  return s;
}

}  // namespace brainage
