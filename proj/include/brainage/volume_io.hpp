#pragma once

#include <filesystem>
#include <string>

#include "brainage/volume.hpp"

namespace brainage {

enum class VolumeFormat { kNifti1, kRaw };

// On-disk element type. Masks and label maps are written as uint8.
enum class DiskType { kFloat32, kUint8 };

// .nii / .nii.gz -> nifti1, .raw -> raw (sidecar at "<path>.txt").
VolumeFormat format_from_path(const std::filesystem::path& path);

// Loads a volume, casting voxels to float. Rejects non-canonical axis order
// and non-finite values.
Volume load_volume(const std::filesystem::path& path, VolumeFormat format);
Volume load_volume(const std::filesystem::path& path);

void save_volume(const Volume& v, const std::filesystem::path& path, VolumeFormat format,
                 DiskType type = DiskType::kFloat32);
void save_volume(const Volume& v, const std::filesystem::path& path,
                 DiskType type = DiskType::kFloat32);

std::filesystem::path raw_sidecar_path(const std::filesystem::path& raw_path);

}  // namespace brainage
