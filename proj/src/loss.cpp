#include "brainage/loss.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "brainage/error.hpp"
#include "brainage/phantom.hpp"

namespace brainage {

LossWeightSchedule::LossWeightSchedule(std::vector<ScheduleSegment> segments) : segments_(std::move(segments)) {
  if (segments_.empty()) throw ScheduleError("loss weight schedule needs at least one segment");
  if (segments_.front().begin != 0) throw ScheduleError("loss weight schedule must start at epoch 0");
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& s = segments_[i];
    const bool last = i + 1 == segments_.size();
    if (last ? s.end < s.begin : s.end <= s.begin) {
      throw ScheduleError("schedule segment " + std::to_string(i) + " has an empty or inverted range");
    }
    if (!last && segments_[i + 1].begin != s.end) {
      throw ScheduleError("schedule segments " + std::to_string(i) + " and " + std::to_string(i + 1) +
                          " leave a gap or overlap");
    }
  }
}

LossWeightSchedule LossWeightSchedule::standard() {
  return LossWeightSchedule({{0, 50, {80.0, 1.0, 1.0}}, {50, 130, {40.0, 1.0, 1.0}}, {130, 300, {15.0, 0.7, 1.3}}});
}

LossWeightSchedule LossWeightSchedule::scaled(int total_epochs) {
  if (total_epochs < 1) throw ScheduleError("schedule needs total_epochs >= 1");
  const double t = total_epochs;
  const int b1 = std::clamp(static_cast<int>(std::lround(50.0 * t / 300.0)), 1, total_epochs);
  const int b2 = std::clamp(static_cast<int>(std::lround(130.0 * t / 300.0)), b1, total_epochs);
  std::vector<ScheduleSegment> segs{{0, b1, {80.0, 1.0, 1.0}}};
  if (b2 > b1) segs.push_back({b1, b2, {40.0, 1.0, 1.0}});
  segs.push_back({b2, total_epochs, {15.0, 0.7, 1.3}});
  return LossWeightSchedule(std::move(segs));
}

LossWeightSchedule LossWeightSchedule::parse(const std::string& text) {
  std::vector<ScheduleSegment> segs;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    ScheduleSegment s;
    char c1 = 0;
    char c2 = 0;
    char c3 = 0;
    char c4 = 0;
    std::istringstream is(item);
    if (!(is >> s.begin >> c1 >> s.end >> c2 >> s.weights.seg >> c3 >> s.weights.global >> c4 >> s.weights.voxel) ||
        c1 != ':' || c2 != ':' || c3 != ':' || c4 != ':') {
      throw ScheduleError("malformed schedule segment '" + item + "' (expected begin:end:w_s:w_g:w_v)");
    }
    segs.push_back(s);
  }
  return LossWeightSchedule(std::move(segs));
}

LossWeights LossWeightSchedule::at(int epoch) const {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& s = segments_[i];
    const bool last = i + 1 == segments_.size();
    if (epoch >= s.begin && (epoch < s.end || (last && epoch == s.end))) return s.weights;
  }
  throw ScheduleError("epoch " + std::to_string(epoch) + " outside schedule domain [0, " +
                      std::to_string(total_epochs()) + "]");
}

std::string LossWeightSchedule::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& s = segments_[i];
    if (i > 0) os << ",";
    os << s.begin << ":" << s.end << ":" << s.weights.seg << ":" << s.weights.global << ":" << s.weights.voxel;
  }
  return os.str();
}

void NoiseSpec::validate() const {
  if (!(low < high)) throw ConfigError("noise range requires low < high");
}

namespace {

void check_batch(std::size_t m, std::size_t other, const char* what) {
  if (m == 0) throw ShapeError(std::string(what) + ": empty batch");
  if (m != other) throw ShapeError(std::string(what) + ": batch size mismatch");
}

}  // namespace

double dice_loss(const std::vector<std::vector<double>>& probs, const std::vector<std::vector<std::uint8_t>>& truth,
                 int classes, const std::vector<int>& foreground, std::vector<std::vector<double>>* grad) {
  check_batch(probs.size(), truth.size(), "dice_loss");
  if (foreground.empty()) throw ValidationError("dice_loss needs at least one foreground class");
  for (int c : foreground) {
    if (c < 0 || c >= classes) throw ValidationError("dice_loss foreground class out of range");
  }
  const std::size_t m = probs.size();
  if (grad != nullptr) grad->assign(m, {});
  double dice_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t v = truth[i].size();
    if (probs[i].size() != v * static_cast<std::size_t>(classes)) {
      throw ShapeError("dice_loss: sample " + std::to_string(i) + " probability grid does not match its labels");
    }
    for (std::size_t j = 0; j < v; ++j) {
      double s = 0.0;
      for (int c = 0; c < classes; ++c) s += probs[i][static_cast<std::size_t>(c) * v + j];
      if (std::abs(s - 1.0) > 1e-3) {
        throw ValidationError("dice_loss: probabilities at voxel " + std::to_string(j) + " of sample " +
                              std::to_string(i) + " sum to " + std::to_string(s));
      }
    }
    if (grad != nullptr) (*grad)[i].assign(probs[i].size(), 0.0);
    double sample = 0.0;
    for (int c : foreground) {
      const double* p = probs[i].data() + static_cast<std::size_t>(c) * v;
      double inter = 0.0;
      double sum_p = 0.0;
      double sum_y = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        const double y = truth[i][j] == c ? 1.0 : 0.0;
        inter += p[j] * y;
        sum_p += p[j];
        sum_y += y;
      }
      const double denom = sum_p + sum_y;
      if (denom <= 0.0) {
        sample += 1.0;  // class absent from both
        continue;
      }
      sample += 2.0 * inter / denom;
      if (grad != nullptr) {
        const double scale = -1.0 / (static_cast<double>(m) * static_cast<double>(foreground.size()));
        double* g = (*grad)[i].data() + static_cast<std::size_t>(c) * v;
        for (std::size_t j = 0; j < v; ++j) {
          const double y = truth[i][j] == c ? 1.0 : 0.0;
          g[j] += scale * 2.0 * (y * denom - inter) / (denom * denom);
        }
      }
    }
    dice_sum += sample / static_cast<double>(foreground.size());
  }
  return 1.0 - dice_sum / static_cast<double>(m);
}

double hard_dice(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& truth, const std::vector<int>& foreground) {
  if (pred.dims() != truth.dims()) throw ShapeError("hard_dice: shape mismatch");
  double total = 0.0;
  for (int c : foreground) {
    std::size_t inter = 0;
    std::size_t sp = 0;
    std::size_t st = 0;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const bool a = pred[j] == c;
      const bool b = truth[j] == c;
      inter += static_cast<std::size_t>(a && b);
      sp += static_cast<std::size_t>(a);
      st += static_cast<std::size_t>(b);
    }
    total += sp + st == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sp + st);
  }
  return total / static_cast<double>(foreground.size());
}

double mae_voxel(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth,
                 const std::vector<std::vector<std::uint8_t>>& masks, std::vector<std::vector<double>>* grad) {
  check_batch(pred.size(), truth.size(), "mae_voxel");
  check_batch(pred.size(), masks.size(), "mae_voxel");
  const std::size_t m = pred.size();
  if (grad != nullptr) grad->assign(m, {});
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t v = pred[i].size();
    if (truth[i].size() != v || masks[i].size() != v) {
      throw ShapeError("mae_voxel: sample " + std::to_string(i) + " grids differ in size");
    }
    std::size_t n = 0;
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      if (masks[i][j] == 0) continue;
      ++n;
      sum += std::abs(pred[i][j] - truth[i][j]);
    }
    if (n == 0) throw ValidationError("mae_voxel: sample " + std::to_string(i) + " has an empty brain mask");
    total += sum / static_cast<double>(n);
    if (grad != nullptr) {
      auto& g = (*grad)[i];
      g.assign(v, 0.0);
      const double scale = 1.0 / (static_cast<double>(m) * static_cast<double>(n));
      for (std::size_t j = 0; j < v; ++j) {
        if (masks[i][j] == 0) continue;
        const double d = pred[i][j] - truth[i][j];
        g[j] = d > 0.0 ? scale : d < 0.0 ? -scale : 0.0;
      }
    }
  }
  return total / static_cast<double>(m);
}

double mae_global(const std::vector<double>& pred, const std::vector<double>& truth, std::vector<double>* grad) {
  check_batch(pred.size(), truth.size(), "mae_global");
  const auto m = static_cast<double>(pred.size());
  double sum = 0.0;
  if (grad != nullptr) grad->assign(pred.size(), 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    sum += std::abs(d);
    if (grad != nullptr) (*grad)[i] = d > 0.0 ? 1.0 / m : d < 0.0 ? -1.0 / m : 0.0;
  }
  return sum / m;
}

std::vector<double> softmax_classes(const std::vector<double>& logits, int classes) {
  const std::size_t v = logits.size() / static_cast<std::size_t>(classes);
  std::vector<double> p(logits.size());
  for (std::size_t j = 0; j < v; ++j) {
    double mx = -INFINITY;
    for (int c = 0; c < classes; ++c) mx = std::max(mx, logits[static_cast<std::size_t>(c) * v + j]);
    double sum = 0.0;
    for (int c = 0; c < classes; ++c) {
      const double e = std::exp(logits[static_cast<std::size_t>(c) * v + j] - mx);
      p[static_cast<std::size_t>(c) * v + j] = e;
      sum += e;
    }
    for (int c = 0; c < classes; ++c) p[static_cast<std::size_t>(c) * v + j] /= sum;
  }
  return p;
}

LossBreakdown combined_loss(const LossInputs& in, const TaskSet& tasks, const LossWeightSchedule& schedule, int epoch,
                            LossGradients* grad) {
  tasks.validate();
  LossBreakdown b;
  b.weights_used = schedule.at(epoch);
  const LossWeights& w = b.weights_used;

  std::vector<std::vector<double>> g_voxel;
  b.mae_voxel = mae_voxel(in.voxel_pred, in.voxel_truth, in.masks, grad != nullptr ? &g_voxel : nullptr);
  b.total = w.voxel * b.mae_voxel;
  if (grad != nullptr) {
    grad->voxel_pred = std::move(g_voxel);
    for (auto& g : grad->voxel_pred) {
      for (auto& x : g) x *= w.voxel;
    }
    grad->global_pred.clear();
    grad->seg_logits.clear();
  }
  if (tasks.global_age) {
    std::vector<double> g_global;
    b.mae_global = mae_global(in.global_pred, in.global_truth, grad != nullptr ? &g_global : nullptr);
    b.total += w.global * *b.mae_global;
    if (grad != nullptr) {
      for (auto& x : g_global) x *= w.global;
      grad->global_pred = std::move(g_global);
    }
  }
  if (tasks.segmentation) {
    const int classes = in.seg_classes;
    std::vector<std::vector<double>> probs;
    probs.reserve(in.seg_logits.size());
    for (const auto& l : in.seg_logits) probs.push_back(softmax_classes(l, classes));
    std::vector<std::vector<double>> g_probs;
    b.dice_loss = dice_loss(probs, in.seg_truth, classes, kTissueClasses, grad != nullptr ? &g_probs : nullptr);
    b.total += w.seg * *b.dice_loss;
    if (grad != nullptr) {
      grad->seg_logits.assign(probs.size(), {});
      for (std::size_t i = 0; i < probs.size(); ++i) {
        const auto& p = probs[i];
        const auto& gp = g_probs[i];
        const std::size_t v = p.size() / static_cast<std::size_t>(classes);
        auto& gz = grad->seg_logits[i];
        gz.assign(p.size(), 0.0);
        for (std::size_t j = 0; j < v; ++j) {
          double dot = 0.0;
          for (int c = 0; c < classes; ++c) dot += p[static_cast<std::size_t>(c) * v + j] * gp[static_cast<std::size_t>(c) * v + j];
          for (int c = 0; c < classes; ++c) {
            const std::size_t k = static_cast<std::size_t>(c) * v + j;
            gz[k] = w.seg * p[k] * (gp[k] - dot);
          }
        }
      }
    }
  }
  return b;
}

Volume inject_label_noise(const Volume& truth, const BrainMask& mask, const NoiseSpec& spec) {
  spec.validate();
  if (truth.dims() != mask.dims()) {
    throw ShapeError("label grid " + to_string(truth.dims()) + " and mask " + to_string(mask.dims()) + " differ");
  }
  Volume out = truth;
  if (!spec.enabled) return out;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(spec.low, spec.high);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (mask.inside(i)) out.data[i] = static_cast<float>(static_cast<double>(truth.data[i]) + u(rng));
  }
  return out;
}

std::string loss_log_header() { return "epoch,step,dice_loss,mae_voxel,mae_global,total,w_s,w_g,w_v"; }

std::string loss_log_row(int epoch, int step, const LossBreakdown& b) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  auto opt = [&num](const std::optional<double>& v) { return v ? num(*v) : std::string("NA"); };
  std::ostringstream os;
  os << epoch << "," << step << "," << opt(b.dice_loss) << "," << num(b.mae_voxel) << "," << opt(b.mae_global) << ","
     << num(b.total) << "," << num(b.weights_used.seg) << "," << num(b.weights_used.global) << ","
     << num(b.weights_used.voxel);
  return os.str();
}

}  // namespace brainage
