#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"

#include "brainage/error.hpp"
#include "brainage/interpret.hpp"
#include "brainage/regional.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "toy_models.hpp"

using namespace brainage;
using toy::ConstantModel;
using toy::LinearModel;
using toy::MeanModel;

namespace {

RegressorConfig small_regressor() {
  RegressorConfig cfg;
  cfg.channels = {4, 8, 8};
  return cfg;
}

}  // namespace

TEST_CASE("occlusion offsets cover the far edge") {
  CHECK(occlusion_offsets(16, 8, 4) == std::vector<int>{0, 4, 8});
  CHECK(occlusion_offsets(18, 8, 4) == std::vector<int>{0, 4, 8, 10});
  CHECK(occlusion_offsets(8, 8, 4) == std::vector<int>{0});
  OcclusionSpec spec;
  CHECK_THROWS_AS(spec.validate(Dims3{4, 16, 16}), ValidationError);
  spec.stride = {0, 4, 4};
  CHECK_THROWS_AS(spec.validate(Dims3{16, 16, 16}), ValidationError);
}

TEST_CASE("occlusion equals a naive re-implementation") {
  std::mt19937_64 rng(41);
  auto reg = build_global_regressor(small_regressor(), 5);
  RegressorSaliencyModel model(*reg);
  LinearModel lin(oracle::random_volume(Dims3{16, 16, 16}, rng), 3.0);
  for (SaliencyModel* m : std::vector<SaliencyModel*>{&model, &lin}) {
    const Volume x = oracle::random_volume(Dims3{16, 16, 16}, rng);
    OcclusionSpec spec;
    spec.size = {6, 8, 5};
    spec.stride = {4, 3, 5};
    spec.fill_value = 0.25f;
    const auto map = occlusion_sensitivity(*m, x, spec);
    CHECK(map.data.data == oracle::occlusion(*m, x, spec).data);
  }
}

TEST_CASE("occlusion of a mean model") {
  MeanModel model;
  const Volume x(Dims3{16, 16, 16}, 1.0f);
  OcclusionSpec spec;
  spec.size = {8, 8, 8};
  spec.stride = {8, 8, 8};
  const auto map = occlusion_sensitivity(model, x, spec);
  // Each tile removes 512 of 4096 unit voxels.
  for (float v : map.data.data.storage()) CHECK(v == doctest::Approx(-512.0 / 4096.0));

  ConstantModel flat;
  const auto flat_map = occlusion_sensitivity(flat, x);
  for (float v : flat_map.data.data.storage()) CHECK(v == 0.0f);
}

TEST_CASE("smoothgrad with one noiseless sample is the vanilla gradient") {
  std::mt19937_64 rng(42);
  auto reg = build_global_regressor(small_regressor(), 6);
  RegressorSaliencyModel model(*reg);
  const Volume x = oracle::random_volume(Dims3{16, 16, 16}, rng);
  CHECK(smoothgrad(model, x, 1, 0.0, 9).data.data == vanilla_gradient(model, x).data.data);
  const auto a = smoothgrad(model, x, 4, 0.1, 9);
  const auto b = smoothgrad(model, x, 4, 0.1, 9);
  CHECK(a.data.data == b.data.data);
}

TEST_CASE("smoothgrad recovers |w| of a linear model") {
  std::mt19937_64 rng(43);
  Volume w = oracle::random_volume(Dims3{8, 8, 8}, rng, 0.5f, 2.0f);
  for (std::size_t i = 0; i < w.data.size(); i += 3) w.data[i] = -w.data[i];
  LinearModel model(w, 1.0);
  const auto m = smoothgrad(model, oracle::random_volume(Dims3{8, 8, 8}, rng), 64, 0.1, 1);
  for (std::size_t i = 0; i < w.data.size(); ++i) {
    CHECK(std::fabs(m.data.data[i] - std::fabs(w.data[i])) <= 0.02 * std::fabs(w.data[i]));
  }
}

TEST_CASE("regressor input gradient matches central differences") {
  // The evaluation-mode regressor is piecewise linear in its input. Probes
  // whose one-sided slopes disagree straddle a ReLU or max-pool switch and are
  // skipped.
  std::mt19937_64 rng(44);
  auto reg = build_global_regressor(small_regressor(), 7);
  RegressorSaliencyModel model(*reg);
  const Volume x = oracle::random_volume(Dims3{8, 8, 8}, rng);
  const Volume g = model.input_gradient(x);
  const double f0 = model.predict(x);
  const float h = 1e-2f;
  double diff2 = 0.0;
  double norm2 = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    Volume up = x;
    Volume down = x;
    up.data[i] += h;
    down.data[i] -= h;
    const double fu = model.predict(up);
    const double fd = model.predict(down);
    const double hu = static_cast<double>(up.data[i]) - x.data[i];
    const double hd = static_cast<double>(x.data[i]) - down.data[i];
    const double right = (fu - f0) / hu;
    const double left = (f0 - fd) / hd;
    if (std::fabs(right - left) > 1e-3 * std::fabs(g.data[i]) + 1e-7) continue;
    const double central = (fu - fd) / (hu + hd);
    diff2 += (central - g.data[i]) * (central - g.data[i]);
    norm2 += static_cast<double>(g.data[i]) * g.data[i];
    ++used;
  }
  CHECK(used > x.data.size() / 3);
  CHECK(std::sqrt(diff2 / norm2) < 1e-3);
}

TEST_CASE("grad-cam is nonnegative, input-sized and vanishes for a feature-independent head") {
  std::mt19937_64 rng(45);
  auto reg = build_global_regressor(small_regressor(), 8);
  RegressorSaliencyModel model(*reg);
  for (int trial = 0; trial < 20; ++trial) {
    const Volume x = oracle::random_volume(Dims3{16, 16, 16}, rng);
    const auto map = gradcam(model, x);
    CHECK(map.data.dims() == x.dims());
    for (float v : map.data.data.storage()) REQUIRE(v >= 0.0f);
  }
  std::fill(reg->head().weight().value.begin(), reg->head().weight().value.end(), 0.0f);
  const auto zero = gradcam(model, oracle::random_volume(Dims3{16, 16, 16}, rng));
  for (float v : zero.data.data.storage()) CHECK(v == 0.0f);

  MeanModel plain;
  CHECK_THROWS_AS(gradcam(plain, Volume(Dims3{8, 8, 8})), CapabilityError);
}

TEST_CASE("unit-range normalization") {
  SaliencyMap m;
  m.data = Volume(Dims3{3, 1, 1});
  m.data.data.storage() = {1.0f, 3.0f, 5.0f};
  const auto n = normalize_unit_range(m);
  CHECK(n.data.data.storage() == std::vector<float>{0.0f, 0.5f, 1.0f});
  CHECK(n.normalization == "unit-range");
}

TEST_CASE("comparison panel writes one image per input plus a combined row") {
  ScratchDir dir("panel");
  const Dims3 d{16, 16, 16};
  std::mt19937_64 rng(46);
  const BrainMask mask(Grid<std::uint8_t>(d, 1));
  const PADMap pad = compute_pad(oracle::random_volume(d, rng, 40.0f, 60.0f), 50.0, mask);
  const auto atlas = phantom_atlas(d);
  const Volume regional = build_regional_atlas_volume(cohort_regional_report({pad}, atlas), atlas);
  MeanModel model;
  const Volume x = oracle::random_volume(d, rng);
  std::vector<SaliencyMap> sal{occlusion_sensitivity(model, x), smoothgrad(model, x, 2, 0.1, 0),
                               vanilla_gradient(model, x)};
  const auto out = comparison_panel(pad, regional, sal, 2, 8, dir.path, "cmp");
  CHECK(out.panels.size() == 5);
  for (const auto& p : out.panels) CHECK(std::filesystem::exists(p));
  CHECK(std::filesystem::exists(out.combined));
  std::ifstream is(out.legend);
  const auto legend = nlohmann::json::parse(is);
  CHECK(legend.is_object());
  REQUIRE(out.scales.size() == 5);
  CHECK(out.scales[0].kind == "diverging");
  CHECK(out.scales[0].low == -out.scales[0].high);

  CHECK_THROWS_AS(comparison_panel(pad, regional, sal, 2, 16, dir.path), RangeError);
  CHECK_THROWS_AS(comparison_panel(pad, Volume(Dims3{8, 8, 8}), sal, 2, 4, dir.path), ShapeError);
}
