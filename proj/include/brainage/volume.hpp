#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace brainage {

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  auto operator<=>(const Index3&) const = default;
  std::size_t voxels() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
};

using Dims3 = Index3;

std::string to_string(const Index3& v);

// Dense 3D grid stored x-fastest (x + nx * (y + ny * z)).
template <class T>
class Grid {
 public:
  Grid() = default;
  explicit Grid(Dims3 dims, T fill = T{});

  const Dims3& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.x) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.y) * static_cast<std::size_t>(z));
  }
  T& at(int x, int y, int z) { return values_[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return values_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::vector<T>& storage() { return values_; }
  const std::vector<T>& storage() const { return values_; }

  bool operator==(const Grid&) const = default;

 private:
  Dims3 dims_{};
  std::vector<T> values_;
};

extern template class Grid<float>;
extern template class Grid<std::uint8_t>;

using Spacing = std::array<float, 3>;

// Scalar image in canonical axis order. Default spacing is 1 mm isotropic.
struct Volume {
  Grid<float> data;
  Spacing spacing{1.0f, 1.0f, 1.0f};
  std::string orientation = "RAS";

  Volume() = default;
  explicit Volume(Dims3 dims, float fill = 0.0f, Spacing sp = {1.0f, 1.0f, 1.0f});

  const Dims3& dims() const { return data.dims(); }
  float& at(int x, int y, int z) { return data.at(x, y, z); }
  float at(int x, int y, int z) const { return data.at(x, y, z); }

  // Throws ValidationError on non-positive dims/spacing or non-finite values.
  void validate() const;
};

// Strictly binary brain mask with at least one brain voxel.
class BrainMask {
 public:
  BrainMask() = default;
  explicit BrainMask(Grid<std::uint8_t> grid);
  static BrainMask from_volume(const Volume& v);

  const Dims3& dims() const { return grid_.dims(); }
  const Grid<std::uint8_t>& grid() const { return grid_; }
  bool inside(std::size_t i) const { return grid_[i] != 0; }
  std::size_t count() const { return count_; }
  Volume to_volume() const;

 private:
  Grid<std::uint8_t> grid_;
  std::size_t count_ = 0;
};

enum Tissue : std::uint8_t { kBackground = 0, kGM = 1, kWM = 2, kCSF = 3 };

std::map<int, std::string> default_tissue_map();

class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Grid<std::uint8_t> grid, std::map<int, std::string> label_map);
  static LabelVolume from_volume(const Volume& v, std::map<int, std::string> label_map = default_tissue_map());

  const Dims3& dims() const { return grid_.dims(); }
  const Grid<std::uint8_t>& grid() const { return grid_; }
  const std::map<int, std::string>& label_map() const { return label_map_; }
  std::size_t count(int code) const;
  Volume to_volume() const;

 private:
  Grid<std::uint8_t> grid_;
  std::map<int, std::string> label_map_;
};

struct Patch {
  Index3 origin;
  Dims3 size{128, 128, 128};

  bool operator==(const Patch&) const = default;
};

void check_patch(const Dims3& dims, const Patch& p);

Volume apply_mask(const Volume& v, const BrainMask& m);

Patch sample_random_patch(const Dims3& dims, const Dims3& size, std::mt19937_64& rng);

Volume crop(const Volume& v, const Patch& p);
BrainMask crop(const BrainMask& m, const Patch& p);
LabelVolume crop(const LabelVolume& l, const Patch& p);

// Mean over mask voxels, accumulated in double.
double masked_mean(std::span<const float> values, const BrainMask& m);

// Linear resampling to new dims with half-voxel-centred coordinates.
Volume resize_trilinear(const Volume& v, const Dims3& out);

}  // namespace brainage
