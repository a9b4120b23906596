#include <cmath>
#include <random>

#include "doctest.h"

#include "brainage/error.hpp"
#include "brainage/layers.hpp"

using namespace brainage;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(s);
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

double weighted_sum(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * r[i];
  return s;
}

struct GradError {
  double input = 0.0;
  double params = 0.0;
};

// Compares backward() against central differences of L = sum(r * forward(x)).
GradError fd_check(Layer& layer, Tensor x, Mode mode, std::mt19937_64& rng, float h = 1e-2f) {
  const Tensor y0 = layer.forward(x, mode);
  const Tensor r = random_tensor(y0.shape(), rng);
  std::vector<Param*> params;
  std::vector<Buffer> buffers;
  layer.collect(params, buffers);
  for (Param* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
  layer.forward(x, mode);
  const Tensor gx = layer.backward(r);

  auto rel = [](double d2, double n2) { return n2 == 0.0 ? std::sqrt(d2) : std::sqrt(d2 / n2); };
  GradError e;
  double d2 = 0.0;
  double n2 = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float keep = x[i];
    x[i] = keep + h;
    const double up = weighted_sum(layer.forward(x, mode), r);
    x[i] = keep - h;
    const double down = weighted_sum(layer.forward(x, mode), r);
    x[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    d2 += (fd - gx[i]) * (fd - gx[i]);
    n2 += static_cast<double>(gx[i]) * gx[i];
  }
  e.input = rel(d2, n2);
  d2 = 0.0;
  n2 = 0.0;
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const float keep = p->value[i];
      p->value[i] = keep + h;
      const double up = weighted_sum(layer.forward(x, mode), r);
      p->value[i] = keep - h;
      const double down = weighted_sum(layer.forward(x, mode), r);
      p->value[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      d2 += (fd - p->grad[i]) * (fd - p->grad[i]);
      n2 += static_cast<double>(p->grad[i]) * p->grad[i];
    }
  }
  e.params = rel(d2, n2);
  return e;
}

// Direct same-padded convolution.
Tensor naive_conv(const Tensor& x, Conv3d& conv, int k) {
  const Shape s = x.shape();
  const int cout = conv.out_channels();
  Tensor y(Shape{s.n, cout, s.d, s.h, s.w});
  const int r = k / 2;
  for (int n = 0; n < s.n; ++n)
    for (int co = 0; co < cout; ++co)
      for (int z = 0; z < s.d; ++z)
        for (int yy = 0; yy < s.h; ++yy)
          for (int xx = 0; xx < s.w; ++xx) {
            double acc = conv.bias().value[co];
            for (int ci = 0; ci < s.c; ++ci)
              for (int dz = 0; dz < k; ++dz)
                for (int dy = 0; dy < k; ++dy)
                  for (int dx = 0; dx < k; ++dx) {
                    const int iz = z + dz - r, iy = yy + dy - r, ix = xx + dx - r;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= s.d || iy >= s.h || ix >= s.w) continue;
                    const float w = conv.weight().value[(((static_cast<std::size_t>(co) * s.c + ci) * k + dz) * k + dy) * k + dx];
                    acc += static_cast<double>(w) * x.channel(n, ci)[(static_cast<std::size_t>(iz) * s.h + iy) * s.w + ix];
                  }
            y.channel(n, co)[(static_cast<std::size_t>(z) * s.h + yy) * s.w + xx] = static_cast<float>(acc);
          }
  return y;
}

}  // namespace

TEST_CASE("convolution matches a direct implementation") {
  std::mt19937_64 rng(1);
  for (int k : {1, 3}) {
    for (Shape s : {Shape{2, 3, 5, 6, 7}, Shape{1, 2, 4, 4, 19}, Shape{1, 5, 3, 2, 33}}) {
      Conv3d conv("c", s.c, 4, k, rng);
      for (auto& b : conv.bias().value) b = 0.1f;
      const Tensor x = random_tensor(s, rng);
      const Tensor y = conv.forward(x, Mode::kEval);
      const Tensor ref = naive_conv(x, conv, k);
      REQUIRE(y.shape() == ref.shape());
      double worst = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) worst = std::max(worst, static_cast<double>(std::fabs(y[i] - ref[i])));
      CHECK(worst < 1e-5);
    }
  }
}

TEST_CASE("layer gradients match central differences") {
  std::mt19937_64 rng(2);
  SUBCASE("conv k3") {
    Conv3d conv("c", 2, 3, 3, rng);
    const auto e = fd_check(conv, random_tensor({2, 2, 4, 3, 5}, rng), Mode::kTrain, rng);
    CHECK(e.input < 2e-3);
    CHECK(e.params < 2e-3);
  }
  SUBCASE("conv k1") {
    Conv3d conv("c", 3, 2, 1, rng);
    const auto e = fd_check(conv, random_tensor({1, 3, 2, 3, 4}, rng), Mode::kTrain, rng);
    CHECK(e.input < 2e-3);
    CHECK(e.params < 2e-3);
  }
  SUBCASE("batch norm, training statistics") {
    BatchNorm3d bn("bn", 3);
    std::vector<Param*> ps;
    std::vector<Buffer> bs;
    bn.collect(ps, bs);
    for (Param* p : ps)
      for (auto& v : p->value) v = std::uniform_real_distribution<float>(0.5f, 1.5f)(rng);
    const auto e = fd_check(bn, random_tensor({2, 3, 2, 3, 3}, rng), Mode::kTrain, rng, 1e-2f);
    CHECK(e.input < 5e-3);
    CHECK(e.params < 2e-3);
  }
  SUBCASE("batch norm, running statistics") {
    BatchNorm3d bn("bn", 2);
    const auto e = fd_check(bn, random_tensor({1, 2, 2, 2, 2}, rng), Mode::kEval, rng);
    CHECK(e.input < 2e-3);
    CHECK(e.params < 2e-3);
  }
  SUBCASE("relu away from zero") {
    ReLU relu;
    Tensor x = random_tensor({1, 2, 3, 3, 3}, rng, 0.1f, 1.0f);
    for (std::size_t i = 0; i < x.numel(); i += 2) x[i] = -x[i];
    CHECK(fd_check(relu, x, Mode::kTrain, rng).input < 1e-3);
  }
  SUBCASE("max pool with separated values") {
    MaxPool3d pool;
    Tensor x({1, 2, 4, 4, 2});
    std::vector<float> vals(x.numel());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1f * static_cast<float>(i);
    std::shuffle(vals.begin(), vals.end(), rng);
    x.data() = vals;
    CHECK(fd_check(pool, x, Mode::kTrain, rng).input < 1e-3);
  }
  SUBCASE("trilinear upsampling") {
    Upsample up;
    up.set_target({6, 4, 5});
    CHECK(fd_check(up, random_tensor({1, 2, 3, 2, 3}, rng), Mode::kTrain, rng).input < 1e-3);
  }
  SUBCASE("global average pooling") {
    GlobalAvgPool gap;
    CHECK(fd_check(gap, random_tensor({2, 3, 2, 3, 4}, rng), Mode::kTrain, rng).input < 1e-3);
  }
  SUBCASE("linear") {
    Linear lin("fc", 5, 3, rng);
    const auto e = fd_check(lin, random_tensor({2, 5, 1, 1, 1}, rng), Mode::kTrain, rng);
    CHECK(e.input < 1e-3);
    CHECK(e.params < 1e-3);
  }
}

TEST_CASE("max pool needs even dims") {
  MaxPool3d pool;
  CHECK_THROWS_AS(pool.forward(Tensor({1, 1, 3, 4, 4}), Mode::kEval), ShapeError);
}

TEST_CASE("layer initialization is deterministic per seed") {
  std::mt19937_64 a(5);
  std::mt19937_64 b(5);
  Conv3d ca("c", 2, 3, 3, a);
  Conv3d cb("c", 2, 3, 3, b);
  CHECK(ca.weight().value == cb.weight().value);
}
