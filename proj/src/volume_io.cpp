#include "brainage/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "brainage/error.hpp"

namespace fs = std::filesystem;

namespace brainage {
namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;
constexpr std::int16_t kDtInt8 = 256;
constexpr std::int16_t kDtUint16 = 512;

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<char> read_all(const fs::path& path) {
  const std::string name = path.string();
  if (!fs::exists(path)) throw IngestError("cannot read '" + name + "': file does not exist");
  std::vector<char> buf;
  if (has_suffix(name, ".gz")) {
    gzFile f = gzopen(name.c_str(), "rb");
    if (f == nullptr) throw IngestError("cannot open '" + name + "'");
    std::array<char, 1 << 16> chunk{};
    int n = 0;
    while ((n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()))) > 0) {
      buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
    }
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw IngestError("corrupt gzip stream in '" + name + "'");
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open '" + name + "'");
    buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return buf;
}

void write_all(const fs::path& path, const std::vector<char>& bytes) {
  const std::string name = path.string();
  if (has_suffix(name, ".gz")) {
    gzFile f = gzopen(name.c_str(), "wb");
    if (f == nullptr) throw IoError("cannot write '" + name + "'");
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    const int rc = gzclose(f);
    if (n != static_cast<int>(bytes.size()) || rc != Z_OK) throw IoError("write failed for '" + name + "'");
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + name + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + name + "'");
}

template <class T>
T byteswap_value(T v) {
  std::array<char, sizeof(T)> b{};
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

void swap_header(Nifti1Header& h) {
  h.sizeof_hdr = byteswap_value(h.sizeof_hdr);
  for (auto& d : h.dim) d = byteswap_value(d);
  h.datatype = byteswap_value(h.datatype);
  h.bitpix = byteswap_value(h.bitpix);
  for (auto& p : h.pixdim) p = byteswap_value(p);
  h.vox_offset = byteswap_value(h.vox_offset);
  h.scl_slope = byteswap_value(h.scl_slope);
  h.scl_inter = byteswap_value(h.scl_inter);
  h.qform_code = byteswap_value(h.qform_code);
  h.sform_code = byteswap_value(h.sform_code);
  h.quatern_b = byteswap_value(h.quatern_b);
  h.quatern_c = byteswap_value(h.quatern_c);
  h.quatern_d = byteswap_value(h.quatern_d);
  for (int i = 0; i < 4; ++i) {
    h.srow_x[i] = byteswap_value(h.srow_x[i]);
    h.srow_y[i] = byteswap_value(h.srow_y[i]);
    h.srow_z[i] = byteswap_value(h.srow_z[i]);
  }
}

using Mat3 = std::array<std::array<double, 3>, 3>;

// Column j is the world direction of voxel axis j.
Mat3 direction_from_quaternion(const Nifti1Header& h) {
  const double b = h.quatern_b;
  const double c = h.quatern_c;
  const double d = h.quatern_d;
  const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
  Mat3 r{{{a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c},
          {2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b},
          {2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - c * c - b * b}}};
  const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  for (int i = 0; i < 3; ++i) r[i][2] *= qfac;
  return r;
}

std::string orientation_tag(const Mat3& m, const std::string& name) {
  static const char* kPos = "RAS";
  static const char* kNeg = "LPI";
  std::string tag;
  for (int j = 0; j < 3; ++j) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (std::abs(m[i][j]) > std::abs(m[best][j])) best = i;
    }
    if (best != j) {
      throw IngestError("'" + name +
                        "' is not in canonical axis order (voxel axis " + std::to_string(j) +
                        " maps to world axis " + std::to_string(best) +
                        "); reorient to standard before ingestion");
    }
    tag += m[best][j] >= 0 ? kPos[j] : kNeg[j];
  }
  return tag;
}

template <class T>
void decode(const char* src, std::size_t n, bool swap, std::vector<float>& out) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    if (swap) v = byteswap_value(v);
    out[i] = static_cast<float>(v);
  }
}

void decode_voxels(const char* src, std::size_t n, std::int16_t datatype, bool swap,
                   std::vector<float>& out, const std::string& name) {
  switch (datatype) {
    case kDtUint8: decode<std::uint8_t>(src, n, false, out); break;
    case kDtInt8: decode<std::int8_t>(src, n, false, out); break;
    case kDtInt16: decode<std::int16_t>(src, n, swap, out); break;
    case kDtUint16: decode<std::uint16_t>(src, n, swap, out); break;
    case kDtInt32: decode<std::int32_t>(src, n, swap, out); break;
    case kDtFloat32: decode<float>(src, n, swap, out); break;
    case kDtFloat64: decode<double>(src, n, swap, out); break;
    default:
      throw IngestError("'" + name + "' has unsupported NIfTI datatype " + std::to_string(datatype));
  }
}

std::size_t datatype_size(std::int16_t datatype) {
  switch (datatype) {
    case kDtUint8:
    case kDtInt8: return 1;
    case kDtInt16:
    case kDtUint16: return 2;
    case kDtInt32:
    case kDtFloat32: return 4;
    case kDtFloat64: return 8;
    default: return 0;
  }
}

Volume load_nifti(const fs::path& path) {
  const std::string name = path.string();
  const auto bytes = read_all(path);
  if (bytes.size() < sizeof(Nifti1Header)) throw IngestError("'" + name + "' is too short for a NIfTI-1 header");
  Nifti1Header h{};
  std::memcpy(&h, bytes.data(), sizeof h);
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    if (byteswap_value(h.sizeof_hdr) != 348) throw IngestError("'" + name + "' is not a NIfTI-1 file (sizeof_hdr)");
    swap = true;
    swap_header(h);
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0 && std::memcmp(h.magic, "ni1", 4) != 0) {
    throw IngestError("'" + name + "' lacks NIfTI-1 magic");
  }
  const int ndim = h.dim[0];
  if (ndim < 3 || ndim > 7) throw IngestError("'" + name + "' missing field dim (dim[0]=" + std::to_string(ndim) + ")");
  for (int i = 4; i <= ndim; ++i) {
    if (h.dim[i] > 1) throw IngestError("'" + name + "' is not a 3D volume (dim[" + std::to_string(i) + "]>1)");
  }
  const Dims3 dims{h.dim[1], h.dim[2], h.dim[3]};
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) throw IngestError("'" + name + "' missing field dim (non-positive extent)");
  Spacing spacing{};
  for (int i = 0; i < 3; ++i) {
    const float p = h.pixdim[i + 1];
    if (!(p > 0.0f) || !std::isfinite(p)) throw IngestError("'" + name + "' missing field pixdim[" + std::to_string(i + 1) + "]");
    spacing[static_cast<std::size_t>(i)] = p;
  }
  const std::size_t esize = datatype_size(h.datatype);
  if (esize == 0) throw IngestError("'" + name + "' has unsupported NIfTI datatype " + std::to_string(h.datatype));

  Mat3 dir{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  if (h.sform_code > 0) {
    for (int j = 0; j < 3; ++j) {
      dir[0][j] = h.srow_x[j];
      dir[1][j] = h.srow_y[j];
      dir[2][j] = h.srow_z[j];
    }
  } else if (h.qform_code > 0) {
    dir = direction_from_quaternion(h);
  }
  Volume v(dims, 0.0f, spacing);
  v.orientation = orientation_tag(dir, name);

  const auto offset = static_cast<std::size_t>(h.vox_offset < 352.0f ? 352.0f : h.vox_offset);
  const std::size_t n = dims.voxels();
  if (bytes.size() < offset + n * esize) throw IngestError("'" + name + "' is truncated (voxel data)");
  decode_voxels(bytes.data() + offset, n, h.datatype, swap, v.data.storage(), name);
  if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && (h.scl_slope != 1.0f || h.scl_inter != 0.0f)) {
    for (auto& x : v.data.storage()) x = x * h.scl_slope + h.scl_inter;
  }
  return v;
}

void save_nifti(const Volume& v, const fs::path& path, DiskType type) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(v.dims().x);
  h.dim[2] = static_cast<std::int16_t>(v.dims().y);
  h.dim[3] = static_cast<std::int16_t>(v.dims().z);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = type == DiskType::kFloat32 ? kDtFloat32 : kDtUint8;
  h.bitpix = type == DiskType::kFloat32 ? 32 : 8;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = v.spacing[static_cast<std::size_t>(i)];
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 1;
  std::array<float, 3> sign{1.0f, 1.0f, 1.0f};
  const std::string neg = "LPI";
  for (std::size_t i = 0; i < 3 && i < v.orientation.size(); ++i) {
    if (v.orientation[i] == neg[i]) sign[i] = -1.0f;
  }
  h.srow_x[0] = sign[0] * v.spacing[0];
  h.srow_y[1] = sign[1] * v.spacing[1];
  h.srow_z[2] = sign[2] * v.spacing[2];
  std::memcpy(h.magic, "n+1", 4);

  const std::size_t n = v.data.size();
  const std::size_t esize = type == DiskType::kFloat32 ? 4 : 1;
  std::vector<char> bytes(352 + n * esize, 0);
  std::memcpy(bytes.data(), &h, sizeof h);
  char* dst = bytes.data() + 352;
  if (type == DiskType::kFloat32) {
    std::memcpy(dst, v.data.storage().data(), n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const float x = v.data[i];
      if (x < 0.0f || x > 255.0f || std::nearbyint(x) != x) {
        throw ValidationError("value " + std::to_string(x) + " cannot be stored as uint8");
      }
      dst[i] = static_cast<char>(static_cast<std::uint8_t>(x));
    }
  }
  write_all(path, bytes);
}

Volume load_raw(const fs::path& path) {
  const std::string name = path.string();
  const fs::path side = raw_sidecar_path(path);
  std::ifstream in(side);
  if (!in) throw IngestError("cannot read sidecar '" + side.string() + "' for '" + name + "'");
  std::map<std::string, std::vector<std::string>> fields;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key) || key[0] == '#') continue;
    std::vector<std::string> vals;
    std::string tok;
    while (ls >> tok) vals.push_back(tok);
    fields[key] = vals;
  }
  auto need = [&](const std::string& key, std::size_t count) -> const std::vector<std::string>& {
    auto it = fields.find(key);
    if (it == fields.end() || it->second.size() != count) {
      throw IngestError("raw sidecar '" + side.string() + "' missing field '" + key + "'");
    }
    return it->second;
  };
  const auto& d = need("dims", 3);
  const auto& s = need("spacing", 3);
  const std::string dtype = need("dtype", 1)[0];
  Dims3 dims{};
  Spacing spacing{};
  try {
    dims = {std::stoi(d[0]), std::stoi(d[1]), std::stoi(d[2])};
    for (std::size_t i = 0; i < 3; ++i) spacing[i] = std::stof(s[i]);
  } catch (const std::exception&) {
    throw IngestError("raw sidecar '" + side.string() + "' has malformed dims/spacing");
  }
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) throw IngestError("raw sidecar '" + side.string() + "' missing field 'dims' (non-positive)");
  for (float sp : spacing) {
    if (!(sp > 0.0f)) throw IngestError("raw sidecar '" + side.string() + "' missing field 'spacing' (non-positive)");
  }
  std::string orientation = "RAS";
  if (auto it = fields.find("orientation"); it != fields.end() && !it->second.empty()) {
    orientation = it->second[0];
    if (orientation.size() != 3 || std::string("RL").find(orientation[0]) == std::string::npos ||
        std::string("AP").find(orientation[1]) == std::string::npos ||
        std::string("SI").find(orientation[2]) == std::string::npos) {
      throw IngestError("'" + name + "' has non-canonical orientation '" + orientation +
                        "'; reorient to standard before ingestion");
    }
  }
  const auto bytes = read_all(path);
  Volume v(dims, 0.0f, spacing);
  v.orientation = orientation;
  const std::size_t n = dims.voxels();
  std::size_t esize = 0;
  if (dtype == "float32") esize = 4;
  else if (dtype == "uint8") esize = 1;
  else throw IngestError("raw sidecar '" + side.string() + "' has unsupported dtype '" + dtype + "'");
  if (bytes.size() != n * esize) {
    throw IngestError("'" + name + "' holds " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(n * esize));
  }
  if (esize == 4) {
    decode<float>(bytes.data(), n, std::endian::native != std::endian::little, v.data.storage());
  } else {
    decode<std::uint8_t>(bytes.data(), n, false, v.data.storage());
  }
  return v;
}

void save_raw(const Volume& v, const fs::path& path, DiskType type) {
  const std::size_t n = v.data.size();
  std::vector<char> bytes;
  if (type == DiskType::kFloat32) {
    bytes.resize(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      float x = v.data[i];
      if constexpr (std::endian::native != std::endian::little) x = byteswap_value(x);
      std::memcpy(bytes.data() + i * 4, &x, 4);
    }
  } else {
    bytes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const float x = v.data[i];
      if (x < 0.0f || x > 255.0f || std::nearbyint(x) != x) {
        throw ValidationError("value " + std::to_string(x) + " cannot be stored as uint8");
      }
      bytes[i] = static_cast<char>(static_cast<std::uint8_t>(x));
    }
  }
  write_all(path, bytes);
  std::ofstream side(raw_sidecar_path(path), std::ios::trunc);
  if (!side) throw IoError("cannot write sidecar for '" + path.string() + "'");
  side.precision(9);
  side << "dims " << v.dims().x << " " << v.dims().y << " " << v.dims().z << "\n";
  side << "spacing " << v.spacing[0] << " " << v.spacing[1] << " " << v.spacing[2] << "\n";
  side << "dtype " << (type == DiskType::kFloat32 ? "float32" : "uint8") << "\n";
  side << "orientation " << v.orientation << "\n";
  if (!side) throw IoError("write failed for sidecar of '" + path.string() + "'");
}

void check_extension(const fs::path& path, VolumeFormat format) {
  const std::string name = path.string();
  const bool nifti_ext = has_suffix(name, ".nii") || has_suffix(name, ".nii.gz");
  const bool raw_ext = has_suffix(name, ".raw");
  if (format == VolumeFormat::kNifti1 && !nifti_ext) {
    throw ValidationError("'" + name + "' does not have a .nii/.nii.gz extension for format nifti1");
  }
  if (format == VolumeFormat::kRaw && !raw_ext) {
    throw ValidationError("'" + name + "' does not have a .raw extension for format raw");
  }
}

}  // namespace

VolumeFormat format_from_path(const fs::path& path) {
  const std::string name = path.string();
  if (has_suffix(name, ".nii") || has_suffix(name, ".nii.gz")) return VolumeFormat::kNifti1;
  if (has_suffix(name, ".raw")) return VolumeFormat::kRaw;
  throw ValidationError("cannot infer volume format from '" + name + "'");
}

fs::path raw_sidecar_path(const fs::path& raw_path) { return fs::path(raw_path.string() + ".txt"); }

Volume load_volume(const fs::path& path, VolumeFormat format) {
  check_extension(path, format);
  Volume v = format == VolumeFormat::kNifti1 ? load_nifti(path) : load_raw(path);
  try {
    v.validate();
  } catch (const ValidationError& e) {
    throw IngestError("'" + path.string() + "': " + e.what());
  }
  return v;
}

Volume load_volume(const fs::path& path) { return load_volume(path, format_from_path(path)); }

void save_volume(const Volume& v, const fs::path& path, VolumeFormat format, DiskType type) {
  check_extension(path, format);
  if (path.has_parent_path() && !fs::exists(path.parent_path())) {
    throw IoError("cannot write '" + path.string() + "': directory does not exist");
  }
  if (format == VolumeFormat::kNifti1) {
    save_nifti(v, path, type);
  } else {
    save_raw(v, path, type);
  }
}

void save_volume(const Volume& v, const fs::path& path, DiskType type) {
  save_volume(v, path, format_from_path(path), type);
}

}  // namespace brainage
