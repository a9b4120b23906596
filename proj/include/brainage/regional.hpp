#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "brainage/evalmaps.hpp"
#include "brainage/volume.hpp"

namespace brainage {

// Region codes over a voxel grid; code 0 lies outside every region.
struct RegionAtlas {
  Grid<std::uint8_t> labels;
  std::map<int, std::string> names;  // nonzero code -> region name

  const Dims3& dims() const { return labels.dims(); }
  void validate() const;

  static const std::vector<std::string>& standard_names();
  // Label volume plus "<path>.regions.txt" with "code name" lines.
  static RegionAtlas load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Nine standard regions laid out over the phantom field of view (deep nuclei
// near the centre, lobes by position, cerebellum inferior-posterior).
RegionAtlas phantom_atlas(const Dims3& dims);

struct RegionStat {
  int code = 0;
  std::string name;
  double mean = 0.0;
  double sd = 0.0;  // voxelwise, n-1
  std::size_t count = 0;
  bool present = false;  // region and brain mask overlap
};

// Statistics of PAD over (region ∩ brain mask), one entry per atlas region in
// code order.
std::vector<RegionStat> regional_means(const PADMap& pad, const RegionAtlas& atlas);

struct RegionalRow {
  int code = 0;
  std::string name;
  double pad_mean = 0.0;  // across subjects of per-subject regional means
  double pad_sd = 0.0;
  double sd_mean = 0.0;  // across subjects of per-subject regional SDs
  double sd_sd = 0.0;
  std::size_t subjects = 0;  // subjects in which the region is present
};

struct RegionalReport {
  std::vector<RegionalRow> rows;
  std::size_t cohort_n = 0;
  bool bias_corrected = false;

  std::string to_csv() const;
  std::string to_table() const;
};

RegionalReport cohort_regional_report(const std::vector<PADMap>& pads, const RegionAtlas& atlas);

// Region voxels carry the region's cohort mean PAD; voxels outside every
// region (and regions no subject covered) are NaN.
Volume build_regional_atlas_volume(const RegionalReport& report, const RegionAtlas& atlas);

}  // namespace brainage
