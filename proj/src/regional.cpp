#include "brainage/regional.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "brainage/error.hpp"
#include "brainage/phantom.hpp"
#include "brainage/volume_io.hpp"

namespace brainage {

namespace fs = std::filesystem;

const std::vector<std::string>& RegionAtlas::standard_names() {
  static const std::vector<std::string> names{"Caudate",        "Cerebellum",    "Frontal Lobe",
                                              "Insula",         "Occipital Lobe", "Parietal Lobe",
                                              "Putamen",        "Temporal Lobe", "Thalamus"};
  return names;
}

void RegionAtlas::validate() const {
  if (labels.size() == 0) throw ValidationError("atlas has an empty label grid");
  if (names.count(0) != 0) throw ValidationError("atlas code 0 is reserved for outside-all-regions");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && names.count(labels[i]) == 0) {
      throw ValidationError("atlas voxel " + std::to_string(i) + " has unnamed code " + std::to_string(labels[i]));
    }
  }
}

RegionAtlas RegionAtlas::load(const fs::path& path) {
  const Volume v = load_volume(path);
  RegionAtlas a;
  a.labels = Grid<std::uint8_t>(v.dims());
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const float x = v.data[i];
    if (x < 0.0f || x > 255.0f || x != std::floor(x)) {
      throw IngestError("atlas '" + path.string() + "' voxel " + std::to_string(i) + " is not a region code");
    }
    a.labels[i] = static_cast<std::uint8_t>(x);
  }
  const fs::path side = path.string() + ".regions.txt";
  std::ifstream in(side);
  if (!in) throw IngestError("atlas region-name sidecar '" + side.string() + "' missing");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    int code = 0;
    if (!(is >> code)) throw IngestError("bad line in '" + side.string() + "': " + line);
    std::string name;
    std::getline(is >> std::ws, name);
    a.names[code] = name;
  }
  a.validate();
  return a;
}

void RegionAtlas::save(const fs::path& path) const {
  Volume v(dims());
  for (std::size_t i = 0; i < labels.size(); ++i) v.data[i] = labels[i];
  save_volume(v, path, format_from_path(path), DiskType::kUint8);
  std::ofstream os(path.string() + ".regions.txt");
  if (!os) throw IoError("cannot write atlas sidecar for '" + path.string() + "'");
  for (const auto& [code, name] : names) os << code << " " << name << "\n";
}

RegionAtlas phantom_atlas(const Dims3& dims) {
  const auto& std_names = RegionAtlas::standard_names();
  RegionAtlas a;
  for (std::size_t k = 0; k < std_names.size(); ++k) a.names[static_cast<int>(k) + 1] = std_names[k];
  auto code = [&](const char* name) {
    for (const auto& [c, n] : a.names) {
      if (n == name) return static_cast<std::uint8_t>(c);
    }
    return std::uint8_t{0};
  };
  const std::uint8_t caudate = code("Caudate");
  const std::uint8_t cerebellum = code("Cerebellum");
  const std::uint8_t frontal = code("Frontal Lobe");
  const std::uint8_t insula = code("Insula");
  const std::uint8_t occipital = code("Occipital Lobe");
  const std::uint8_t parietal = code("Parietal Lobe");
  const std::uint8_t putamen = code("Putamen");
  const std::uint8_t temporal = code("Temporal Lobe");
  const std::uint8_t thalamus = code("Thalamus");

  a.labels = Grid<std::uint8_t>(dims);
  const double fov = PhantomSpec::kFieldOfViewMm;
  const double c = 0.5 * fov;
  for (int z = 0; z < dims.z; ++z) {
    const double pz = (z + 0.5) * fov / dims.z - c;
    for (int y = 0; y < dims.y; ++y) {
      const double py = (y + 0.5) * fov / dims.y - c;
      for (int x = 0; x < dims.x; ++x) {
        const double px = (x + 0.5) * fov / dims.x - c;
        const double r = std::sqrt(px * px + py * py + pz * pz);
        std::uint8_t t = 0;
        if (r > 30.0) {
          t = 0;
        } else if (r < 12.0) {
          t = std::abs(px) < 5.0 ? thalamus : py >= 0.0 ? caudate : putamen;
        } else if (r < 16.0 && std::abs(px) >= std::max(std::abs(py), std::abs(pz))) {
          t = insula;
        } else if (pz < -8.0 && py < 0.0) {
          t = cerebellum;
        } else if (pz < -4.0) {
          t = temporal;
        } else if (py > 6.0) {
          t = frontal;
        } else if (py < -6.0) {
          t = occipital;
        } else {
          t = parietal;
        }
        a.labels.at(x, y, z) = t;
      }
    }
  }
  return a;
}

std::vector<RegionStat> regional_means(const PADMap& pad, const RegionAtlas& atlas) {
  if (pad.data.dims() != atlas.dims() || pad.mask.dims() != atlas.dims()) {
    throw ShapeError("PAD map " + to_string(pad.data.dims()) + " is not aligned with atlas " +
                     to_string(atlas.dims()));
  }
  std::map<int, std::size_t> slot;
  std::vector<RegionStat> out;
  for (const auto& [code, name] : atlas.names) {
    slot[code] = out.size();
    out.push_back(RegionStat{code, name, 0.0, 0.0, 0, false});
  }
  std::vector<double> sum(out.size(), 0.0);
  for (std::size_t i = 0; i < atlas.labels.size(); ++i) {
    const int code = atlas.labels[i];
    if (code == 0 || !pad.mask.inside(i)) continue;
    const std::size_t k = slot.at(code);
    sum[k] += pad.data.data[i];
    ++out[k].count;
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (out[k].count == 0) {
      out[k].mean = std::numeric_limits<double>::quiet_NaN();
      out[k].sd = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    out[k].present = true;
    out[k].mean = sum[k] / static_cast<double>(out[k].count);
  }
  std::vector<double> ss(out.size(), 0.0);
  for (std::size_t i = 0; i < atlas.labels.size(); ++i) {
    const int code = atlas.labels[i];
    if (code == 0 || !pad.mask.inside(i)) continue;
    const std::size_t k = slot.at(code);
    const double d = pad.data.data[i] - out[k].mean;
    ss[k] += d * d;
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (out[k].present) out[k].sd = out[k].count > 1 ? std::sqrt(ss[k] / static_cast<double>(out[k].count - 1)) : 0.0;
  }
  return out;
}

RegionalReport cohort_regional_report(const std::vector<PADMap>& pads, const RegionAtlas& atlas) {
  if (pads.empty()) throw InsufficientDataError("regional report needs at least one subject");
  RegionalReport rep;
  rep.cohort_n = pads.size();
  rep.bias_corrected = pads.front().corrected;
  std::vector<std::vector<double>> means(atlas.names.size());
  std::vector<std::vector<double>> sds(atlas.names.size());
  std::vector<RegionStat> first;
  for (const auto& p : pads) {
    const auto stats = regional_means(p, atlas);
    for (std::size_t k = 0; k < stats.size(); ++k) {
      if (!stats[k].present) continue;
      means[k].push_back(stats[k].mean);
      sds[k].push_back(stats[k].sd);
    }
    if (first.empty()) first = stats;
  }
  for (std::size_t k = 0; k < first.size(); ++k) {
    RegionalRow row;
    row.code = first[k].code;
    row.name = first[k].name;
    row.subjects = means[k].size();
    if (means[k].empty()) {
      row.pad_mean = row.pad_sd = row.sd_mean = row.sd_sd = std::numeric_limits<double>::quiet_NaN();
    } else {
      std::tie(row.pad_mean, row.pad_sd) = mean_sd(means[k]);
      std::tie(row.sd_mean, row.sd_sd) = mean_sd(sds[k]);
    }
    rep.rows.push_back(row);
  }
  return rep;
}

std::string RegionalReport::to_csv() const {
  std::ostringstream os;
  os << "region,avg_regional_pad_mean,avg_regional_pad_sd,regional_sd_mean,regional_sd_sd,subjects,cohort_n,"
        "bias_corrected\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%d\n", r.name.c_str(), r.pad_mean, r.pad_sd,
                  r.sd_mean, r.sd_sd, r.subjects, cohort_n, bias_corrected ? 1 : 0);
    os << buf;
  }
  return os.str();
}

std::string RegionalReport::to_table() const {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %-16s %-16s\n", "Region", "Avg. PAD", "S.D.");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %-17s %-17s\n", r.name.c_str(), format_mean_sd(r.pad_mean, r.pad_sd).c_str(),
                  format_mean_sd(r.sd_mean, r.sd_sd).c_str());
    os << buf;
  }
  os << "n=" << cohort_n << (bias_corrected ? " (bias corrected)" : "") << "\n";
  return os.str();
}

Volume build_regional_atlas_volume(const RegionalReport& report, const RegionAtlas& atlas) {
  std::map<int, double> value;
  for (const auto& r : report.rows) value[r.code] = r.pad_mean;
  for (const auto& [code, name] : atlas.names) {
    if (value.count(code) == 0) throw ValidationError("report has no row for atlas region '" + name + "'");
  }
  const auto nan = std::numeric_limits<float>::quiet_NaN();
  Volume v(atlas.dims(), nan);
  for (std::size_t i = 0; i < atlas.labels.size(); ++i) {
    const int code = atlas.labels[i];
    if (code != 0) v.data[i] = static_cast<float>(value.at(code));
  }
  return v;
}

}  // namespace brainage
