#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"

#include "brainage/error.hpp"
#include "brainage/volume.hpp"
#include "brainage/volume_io.hpp"
#include "oracles.hpp"

using namespace brainage;

TEST_CASE("apply_mask") {
  const Dims3 d{4, 4, 4};
  std::mt19937_64 rng(1);
  const Volume v = oracle::random_volume(d, rng);
  CHECK(apply_mask(v, BrainMask(Grid<std::uint8_t>(d, 1))).data == v.data);

  Grid<std::uint8_t> checker(d, 0);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) checker.at(x, y, z) = (x + y + z) % 2;
  const Volume five(d, 5.0f);
  const Volume out = apply_mask(five, BrainMask(checker));
  for (std::size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == (checker[i] ? 5.0f : 0.0f));

  CHECK_THROWS_AS(apply_mask(v, BrainMask(Grid<std::uint8_t>(Dims3{4, 4, 5}, 1))), ShapeError);
}

TEST_CASE("masks and label volumes are validated") {
  CHECK_THROWS_AS(BrainMask(Grid<std::uint8_t>(Dims3{2, 2, 2}, 0)), ValidationError);
  CHECK_THROWS_AS(BrainMask(Grid<std::uint8_t>(Dims3{2, 2, 2}, 2)), ValidationError);
  Volume half(Dims3{2, 2, 2}, 1.0f);
  half.data[0] = 0.5f;
  CHECK_THROWS_AS(BrainMask::from_volume(half), ValidationError);
  CHECK_THROWS_AS(LabelVolume(Grid<std::uint8_t>(Dims3{2, 2, 2}, 7), default_tissue_map()), ValidationError);
  const LabelVolume l(Grid<std::uint8_t>(Dims3{2, 2, 2}, 2), default_tissue_map());
  CHECK(l.count(2) == 8);
  CHECK(l.count(1) == 0);

  Volume bad(Dims3{2, 2, 2});
  bad.data[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("random patches stay in bounds") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Patch p = sample_random_patch(Dims3{160, 160, 160}, Dims3{128, 128, 128}, rng);
    CHECK(p.origin.x >= 0);
    CHECK(p.origin.x <= 32);
    CHECK(p.origin.y <= 32);
    CHECK(p.origin.z <= 32);
  }
  for (int i = 0; i < 10; ++i) {
    CHECK(sample_random_patch(Dims3{48, 48, 48}, Dims3{48, 48, 48}, rng).origin == Index3{0, 0, 0});
  }
  CHECK_THROWS_AS(sample_random_patch(Dims3{48, 48, 48}, Dims3{64, 48, 48}, rng), ShapeError);
}

TEST_CASE("patch origins are uniform on each axis") {
  std::mt19937_64 rng(3);
  constexpr int kDraws = 10000;
  std::array<std::array<int, 33>, 3> counts{};
  for (int i = 0; i < kDraws; ++i) {
    const Patch p = sample_random_patch(Dims3{160, 160, 160}, Dims3{128, 128, 128}, rng);
    ++counts[0][p.origin.x];
    ++counts[1][p.origin.y];
    ++counts[2][p.origin.z];
  }
  // Chi-square critical value for 32 degrees of freedom at alpha = 0.01.
  const double critical = 53.486;
  const double expected = kDraws / 33.0;
  for (const auto& axis : counts) {
    double chi2 = 0.0;
    for (int c : axis) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < critical);
  }
}

TEST_CASE("crop") {
  std::mt19937_64 rng(4);
  const Volume v = oracle::random_volume(Dims3{6, 7, 8}, rng);
  CHECK(crop(v, Patch{{0, 0, 0}, v.dims()}).data == v.data);
  const Volume one = crop(v, Patch{{2, 3, 4}, {1, 1, 1}});
  CHECK(one.data.size() == 1);
  CHECK(one.data[0] == v.at(2, 3, 4));
  const Volume sub = crop(v, Patch{{1, 2, 3}, {3, 2, 4}});
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 3; ++x) CHECK(sub.at(x, y, z) == v.at(x + 1, y + 2, z + 3));
  const Volume zero_crop = crop(Volume(Dims3{4, 4, 4}), Patch{{1, 1, 1}, {2, 2, 2}});
  for (float x : zero_crop.data.storage()) CHECK(x == 0.0f);
  CHECK_THROWS_AS(crop(v, Patch{{5, 0, 0}, {2, 1, 1}}), ShapeError);
}

TEST_CASE("masked mean ignores voxels outside the mask") {
  Grid<std::uint8_t> g(Dims3{4, 1, 1}, 1);
  g[3] = 0;
  const BrainMask m(g);
  Volume v(Dims3{4, 1, 1});
  v.data.storage() = {1, 2, 3, 1000};
  CHECK(masked_mean(v.data.values(), m) == 2.0);
  v.data[3] = -5e6f;
  CHECK(masked_mean(v.data.values(), m) == 2.0);
}

TEST_CASE("trilinear resize of constants and identities") {
  std::mt19937_64 rng(5);
  const Volume v = oracle::random_volume(Dims3{5, 6, 7}, rng);
  CHECK(resize_trilinear(v, v.dims()).data == v.data);
  const Volume c = resize_trilinear(Volume(Dims3{3, 3, 3}, 2.5f), Dims3{8, 5, 4});
  for (float x : c.data.storage()) CHECK(x == doctest::Approx(2.5f));
}

TEST_CASE("volume files round-trip bitwise") {
  ScratchDir dir("io");
  std::mt19937_64 rng(6);
  Volume v = oracle::random_volume(Dims3{16, 16, 16}, rng);
  v.spacing = {1.0f, 1.5f, 2.0f};
  for (const char* name : {"a.nii", "a.nii.gz", "a.raw"}) {
    save_volume(v, dir.path / name);
    const Volume back = load_volume(dir.path / name);
    CHECK(back.data == v.data);
    CHECK(back.spacing == v.spacing);
  }
  const Volume zeros(Dims3{8, 8, 8});
  save_volume(zeros, dir.path / "z.raw");
  const Volume z = load_volume(dir.path / "z.raw");
  CHECK(z.dims() == Dims3{8, 8, 8});
  CHECK(z.data == zeros.data);

  Volume labels(Dims3{4, 4, 4}, 2.0f);
  labels.data[5] = 3.0f;
  save_volume(labels, dir.path / "l.nii.gz", DiskType::kUint8);
  CHECK(load_volume(dir.path / "l.nii.gz").data == labels.data);
}

TEST_CASE("volume ingestion errors") {
  ScratchDir dir("ioerr");
  Volume v(Dims3{4, 4, 4}, 1.0f);
  CHECK_THROWS_AS(save_volume(v, dir.path / "x.nii", VolumeFormat::kRaw), ValidationError);
  CHECK_THROWS_AS(load_volume(dir.path / "missing.nii"), IngestError);
  CHECK_THROWS_AS(save_volume(v, dir.path / "no_such_dir" / "x.nii"), IoError);

  // One NaN voxel in an otherwise valid raw file.
  save_volume(v, dir.path / "nan.raw");
  {
    std::fstream f(dir.path / "nan.raw", std::ios::in | std::ios::out | std::ios::binary);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    f.seekp(4 * 7);
    f.write(reinterpret_cast<const char*>(&nan), 4);
  }
  try {
    load_volume(dir.path / "nan.raw");
    FAIL("NaN voxel accepted");
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find("(3,1,0)") != std::string::npos);
  }

  // Sidecar without spacing.
  save_volume(v, dir.path / "side.raw");
  {
    std::ofstream side(raw_sidecar_path(dir.path / "side.raw"), std::ios::trunc);
    side << "dims 4 4 4\ndtype float32\n";
  }
  try {
    load_volume(dir.path / "side.raw");
    FAIL("missing field accepted");
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find("spacing") != std::string::npos);
  }

  // Axis-permuting affine in the NIfTI header.
  save_volume(v, dir.path / "perm.nii");
  {
    std::fstream f(dir.path / "perm.nii", std::ios::in | std::ios::out | std::ios::binary);
    const float rows[12] = {0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0};
    f.seekp(280);
    f.write(reinterpret_cast<const char*>(rows), sizeof rows);
  }
  CHECK_THROWS_AS(load_volume(dir.path / "perm.nii"), IngestError);
}
