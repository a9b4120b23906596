#include "brainage/evalmaps.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "brainage/error.hpp"
#include "brainage/loss.hpp"
#include "brainage/volume_io.hpp"

namespace brainage {

using nlohmann::json;

Volume pad_symmetric(const Volume& v, const Dims3& target, Index3* offset) {
  const Dims3 d = v.dims();
  if (target.x < d.x || target.y < d.y || target.z < d.z) {
    throw ShapeError("cannot pad " + to_string(d) + " down to " + to_string(target));
  }
  const Index3 o{(target.x - d.x) / 2, (target.y - d.y) / 2, (target.z - d.z) / 2};
  if (offset != nullptr) *offset = o;
  Volume out(target, 0.0f, v.spacing);
  out.orientation = v.orientation;
  for (int z = 0; z < d.z; ++z) {
    for (int y = 0; y < d.y; ++y) {
      for (int x = 0; x < d.x; ++x) out.at(x + o.x, y + o.y, z + o.z) = v.at(x, y, z);
    }
  }
  return out;
}

MultitaskOutput predict_full_volume(MultitaskUNet& model, const Volume& image) {
  const int k = model.config().divisor();
  auto up = [k](int n) { return ((n + k - 1) / k) * k; };
  const Dims3 d = image.dims();
  const Dims3 target{up(d.x), up(d.y), up(d.z)};
  if (target == d) return std::move(model.forward({&image}, Mode::kEval).front());

  Index3 o;
  const Volume padded = pad_symmetric(image, target, &o);
  MultitaskOutput full = std::move(model.forward({&padded}, Mode::kEval).front());
  const Patch p{o, d};
  MultitaskOutput out;
  out.voxel_age = crop(full.voxel_age, p);
  out.global_age = full.global_age;
  for (const auto& s : full.seg_logits) out.seg_logits.push_back(crop(s, p));
  return out;
}

PADMap compute_pad(const Volume& predicted, double chronological_age, const BrainMask& mask) {
  if (predicted.dims() != mask.dims()) {
    throw ShapeError("prediction " + to_string(predicted.dims()) + " and mask " + to_string(mask.dims()) + " differ");
  }
  if (mask.count() == 0) throw ValidationError("compute_pad: empty brain mask");
  PADMap pad;
  pad.data = predicted;
  pad.mask = mask;
  pad.chronological_age = chronological_age;
  double sum = 0.0;
  for (std::size_t i = 0; i < pad.data.data.size(); ++i) {
    const double d = static_cast<double>(predicted.data[i]) - chronological_age;
    pad.data.data[i] = static_cast<float>(d);
    if (mask.inside(i)) sum += std::abs(d);
  }
  pad.sample_mae = sum / static_cast<double>(mask.count());
  return pad;
}

PADMap adjust_pad(const PADMap& pad) {
  PADMap out = pad;
  const auto shift = static_cast<float>(pad.sample_mae);
  for (std::size_t i = 0; i < out.data.data.size(); ++i) {
    if (out.mask.inside(i)) out.data.data[i] -= shift;
  }
  out.adjusted = true;
  return out;
}

void save_pad_map(const PADMap& pad, const std::filesystem::path& path) {
  save_volume(pad.data, path);
  const json j{{"chronological_age", pad.chronological_age},
               {"sample_mae", pad.sample_mae},
               {"corrected", pad.corrected},
               {"adjusted", pad.adjusted}};
  std::ofstream os(path.string() + ".json");
  if (!os) throw IoError("cannot write PAD sidecar for '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

BiasMode parse_bias_mode(const std::string& s) {
  if (s == "regression") return BiasMode::kRegression;
  if (s == "age_bins") return BiasMode::kAgeBins;
  throw ConfigError("unknown bias-correction mode '" + s + "' (expected regression or age_bins)");
}

std::string to_string(BiasMode m) { return m == BiasMode::kRegression ? "regression" : "age_bins"; }

json BiasCorrectionModel::to_json() const {
  return json{{"mode", to_string(mode)},     {"slope", slope},         {"intercept", intercept},
              {"edges", edges},              {"offsets", offsets},     {"bin_counts", bin_counts},
              {"age_min", age_min},          {"age_max", age_max},     {"calibration_n", calibration_n}};
}

BiasCorrectionModel BiasCorrectionModel::from_json(const json& j) {
  BiasCorrectionModel m;
  m.mode = parse_bias_mode(j.at("mode").get<std::string>());
  m.slope = j.at("slope").get<double>();
  m.intercept = j.at("intercept").get<double>();
  m.edges = j.at("edges").get<std::vector<double>>();
  m.offsets = j.at("offsets").get<std::vector<double>>();
  m.bin_counts = j.at("bin_counts").get<std::vector<std::size_t>>();
  m.age_min = j.at("age_min").get<double>();
  m.age_max = j.at("age_max").get<double>();
  m.calibration_n = j.at("calibration_n").get<std::size_t>();
  return m;
}

namespace {

int bin_of(const BiasCorrectionModel& bc, double age) {
  const auto nb = static_cast<int>(bc.edges.size()) - 1;
  for (int b = 0; b < nb; ++b) {
    const auto bu = static_cast<std::size_t>(b);
    if (age >= bc.edges[bu] && (age < bc.edges[bu + 1] || (b == nb - 1 && age == bc.edges[bu + 1]))) return b;
  }
  return -1;
}

void check_age(const BiasCorrectionModel& bc, double age) {
  if (!(age >= bc.age_min && age <= bc.age_max)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "age %.2f outside calibration range [%.2f, %.2f]", age, bc.age_min, bc.age_max);
    throw RangeError(buf);
  }
}

}  // namespace

BiasCorrectionModel fit_bias_correction(const std::vector<CalibrationPair>& pairs, BiasMode mode,
                                        const BinSpec& bins) {
  if (pairs.size() < 2) throw FitError("bias correction needs at least 2 calibration pairs");
  BiasCorrectionModel bc;
  bc.mode = mode;
  bc.calibration_n = pairs.size();
  bc.age_min = pairs.front().age;
  bc.age_max = pairs.front().age;
  for (const auto& p : pairs) {
    if (!std::isfinite(p.age) || !std::isfinite(p.predicted)) throw FitError("non-finite calibration pair");
    bc.age_min = std::min(bc.age_min, p.age);
    bc.age_max = std::max(bc.age_max, p.age);
  }
  if (mode == BiasMode::kRegression) {
    const auto n = static_cast<double>(pairs.size());
    double ma = 0.0;
    double mp = 0.0;
    for (const auto& p : pairs) {
      ma += p.age;
      mp += p.predicted;
    }
    ma /= n;
    mp /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    for (const auto& p : pairs) {
      sxx += (p.age - ma) * (p.age - ma);
      sxy += (p.age - ma) * (p.predicted - mp);
    }
    if (sxx <= 0.0) throw FitError("degenerate calibration: all ages are equal");
    bc.slope = sxy / sxx;
    bc.intercept = mp - bc.slope * ma;
    if (bc.slope == 0.0) throw FitError("fitted slope is zero; correction is not invertible");
    return bc;
  }
  if (!(bins.width > 0.0) || !(bins.high > bins.low)) throw ConfigError("invalid age-bin specification");
  for (double e = bins.low; e < bins.high - 1e-9; e += bins.width) bc.edges.push_back(e);
  bc.edges.push_back(bins.high);
  const std::size_t nb = bc.edges.size() - 1;
  bc.offsets.assign(nb, 0.0);
  bc.bin_counts.assign(nb, 0);
  for (const auto& p : pairs) {
    const int b = bin_of(bc, p.age);
    if (b < 0) {
      throw FitError("calibration age " + std::to_string(p.age) + " outside bin range [" + std::to_string(bins.low) +
                     ", " + std::to_string(bins.high) + "]");
    }
    bc.offsets[static_cast<std::size_t>(b)] += p.predicted - p.age;
    ++bc.bin_counts[static_cast<std::size_t>(b)];
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (bc.bin_counts[b] > 0) bc.offsets[b] /= static_cast<double>(bc.bin_counts[b]);
  }
  return bc;
}

namespace {

// Returns (scale, shift) so that corrected = scale * raw + shift.
std::pair<double, double> correction_for(const BiasCorrectionModel& bc, double age) {
  check_age(bc, age);
  if (bc.mode == BiasMode::kRegression) return {1.0 / bc.slope, -bc.intercept / bc.slope};
  const int b = bin_of(bc, age);
  if (b < 0 || bc.bin_counts[static_cast<std::size_t>(b)] == 0) {
    throw RangeError("age " + std::to_string(age) + " falls in an age bin without calibration samples");
  }
  return {1.0, -bc.offsets[static_cast<std::size_t>(b)]};
}

}  // namespace

double apply_bias_correction(const BiasCorrectionModel& bc, double raw, double chronological_age) {
  const auto [scale, shift] = correction_for(bc, chronological_age);
  if (bc.mode == BiasMode::kRegression) return (raw - bc.intercept) / bc.slope;
  return scale * raw + shift;
}

Volume apply_bias_correction(const BiasCorrectionModel& bc, const Volume& raw, double chronological_age) {
  correction_for(bc, chronological_age);
  Volume out = raw;
  for (auto& v : out.data.storage()) {
    v = static_cast<float>(apply_bias_correction(bc, static_cast<double>(v), chronological_age));
  }
  return out;
}

std::string TestReport::to_table() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %8s %12s %12s %8s%s\n", "id", "age", "mae_voxel", "global_pred", "dice",
                corrected_mean ? "  mae_voxel_bias_corrected" : "");
  os << buf;
  for (const auto& s : samples) {
    char g[32] = "NA";
    char d[32] = "NA";
    if (s.global_pred) std::snprintf(g, sizeof g, "%.2f", *s.global_pred);
    if (s.dice) std::snprintf(d, sizeof d, "%.4f", *s.dice);
    std::snprintf(buf, sizeof buf, "%-12s %8.2f %12.2f %12s %8s", s.id.c_str(), s.age, s.mae_voxel, g, d);
    os << buf;
    if (s.corrected_mae_voxel) {
      std::snprintf(buf, sizeof buf, "  %.2f", *s.corrected_mae_voxel);
      os << buf;
    }
    os << "\n";
  }
  os << "\n" << label << " MAE_voxel (n=" << samples.size() << "): " << format_mean_sd(mean, sd) << "\n";
  if (dice_mean) {
    std::snprintf(buf, sizeof buf, "%s hard Dice (GM/WM/CSF mean): %.4f\n", label.c_str(), *dice_mean);
    os << buf;
  }
  if (corrected_mean) {
    os << label << " MAE_voxel, bias corrected: " << format_mean_sd(*corrected_mean, *corrected_sd) << "\n";
  }
  return os.str();
}

std::string TestReport::to_csv() const {
  std::ostringstream os;
  os << "id,age,mae_voxel,global_pred,mean_voxel_pred,dice,mae_voxel_bias_corrected\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    char b[32];
    std::snprintf(b, sizeof b, "%.6f", *v);
    return std::string(b);
  };
  for (const auto& s : samples) {
    char b[64];
    std::snprintf(b, sizeof b, "%.6f,%.6f", s.age, s.mae_voxel);
    os << s.id << "," << b << "," << opt(s.global_pred) << "," << opt(s.mean_voxel_pred) << "," << opt(s.dice) << ","
       << opt(s.corrected_mae_voxel) << "\n";
  }
  return os.str();
}

TestReport evaluate_testset(MultitaskUNet& model, const std::vector<const Sample*>& samples,
                            const BiasCorrectionModel* bias, const std::string& label) {
  if (samples.empty()) throw ValidationError("evaluate_testset: empty test set");
  TestReport r;
  r.label = label;
  std::vector<double> maes;
  std::vector<double> corrected;
  std::vector<double> dices;
  for (const Sample* s : samples) {
    const MultitaskOutput out = predict_full_volume(model, s->image);
    const PADMap pad = compute_pad(out.voxel_age, s->age, s->mask);
    SampleEval e;
    e.id = s->id;
    e.age = s->age;
    e.mae_voxel = pad.sample_mae;
    e.global_pred = out.global_age;
    e.mean_voxel_pred = masked_mean(out.voxel_age.data.values(), s->mask);
    if (!out.seg_logits.empty()) {
      e.dice = hard_dice(out.seg_labels().grid(), s->tissues.grid());
      dices.push_back(*e.dice);
    }
    if (bias != nullptr) {
      const Volume c = apply_bias_correction(*bias, out.voxel_age, s->age);
      e.corrected_mae_voxel = compute_pad(c, s->age, s->mask).sample_mae;
      corrected.push_back(*e.corrected_mae_voxel);
    }
    maes.push_back(e.mae_voxel);
    r.samples.push_back(std::move(e));
  }
  std::tie(r.mean, r.sd) = mean_sd(maes);
  if (!dices.empty()) r.dice_mean = mean_sd(dices).first;
  if (!corrected.empty()) {
    const auto [m, sd] = mean_sd(corrected);
    r.corrected_mean = m;
    r.corrected_sd = sd;
  }
  return r;
}

}  // namespace brainage
