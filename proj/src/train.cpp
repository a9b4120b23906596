#include "brainage/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "brainage/error.hpp"
#include "brainage/evalmaps.hpp"
#include "brainage/optim.hpp"
#include "brainage/volume_io.hpp"

namespace brainage {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Sample> phantom_samples(std::vector<PhantomSample> phantoms, const std::string& prefix) {
  std::vector<Sample> out;
  out.reserve(phantoms.size());
  for (std::size_t i = 0; i < phantoms.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%04zu", i);
    auto& p = phantoms[i];
    out.push_back(Sample{prefix + id, std::move(p.image), std::move(p.mask), std::move(p.tissues), p.age});
  }
  return out;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open manifest '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,age,image,mask,tissues", 0) != 0) {
    throw IngestError("manifest '" + path.string() + "' lacks the header id,age,image,mask,tissues");
  }
  std::vector<ManifestEntry> entries;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) {
      throw IngestError("manifest '" + path.string() + "' row " + std::to_string(row) + " has " +
                        std::to_string(f.size()) + " fields, expected 5");
    }
    ManifestEntry e;
    e.id = f[0];
    try {
      e.age = std::stod(f[1]);
    } catch (const std::exception&) {
      throw IngestError("manifest row " + std::to_string(row) + ": bad age '" + f[1] + "'");
    }
    e.image = f[2];
    e.mask = f[3];
    e.tissues = f[4];
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw IngestError("manifest '" + path.string() + "' has no samples");
  return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest '" + path.string() + "'");
  os << "id,age,image,mask,tissues\n";
  for (const auto& e : entries) {
    char age[32];
    std::snprintf(age, sizeof age, "%.6f", e.age);
    os << e.id << "," << age << "," << e.image << "," << e.mask << "," << e.tissues << "\n";
  }
}

std::vector<Sample> load_samples(const fs::path& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  auto resolve = [&base](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  std::vector<Sample> out;
  for (const auto& e : entries) {
    Sample s;
    s.id = e.id;
    s.age = e.age;
    s.image = load_volume(resolve(e.image));
    s.mask = BrainMask::from_volume(load_volume(resolve(e.mask)));
    s.tissues = LabelVolume::from_volume(load_volume(resolve(e.tissues)));
    if (s.mask.dims() != s.image.dims() || s.tissues.dims() != s.image.dims()) {
      throw ShapeError("sample '" + e.id + "' has image, mask and tissue grids of different sizes");
    }
    out.push_back(std::move(s));
  }
  return out;
}

void SplitSpec::validate(const std::vector<std::string>& ids) const {
  std::set<std::string> seen;
  for (const auto* list : {&train, &val, &test}) {
    for (const auto& id : *list) {
      if (!seen.insert(id).second) throw ValidationError("split lists share or repeat id '" + id + "'");
    }
  }
  const std::set<std::string> all(ids.begin(), ids.end());
  if (seen != all) throw ValidationError("split does not cover the manifest exactly");
  if (train.empty()) throw ValidationError("split has no training samples");
}

SplitSpec SplitSpec::from_ratios(const std::vector<std::string>& ids, double train, double val, double test,
                                 std::uint64_t seed) {
  if (train <= 0.0 || val < 0.0 || test < 0.0) throw ConfigError("split ratios must be non-negative, train > 0");
  const double sum = train + val + test;
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(order.size());
  const auto n_train = static_cast<std::size_t>(std::lround(n * train / sum));
  const auto n_val = std::min(order.size() - n_train, static_cast<std::size_t>(std::lround(n * val / sum)));
  SplitSpec s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

json SplitSpec::to_json() const { return json{{"train", train}, {"val", val}, {"test", test}}; }

SplitSpec SplitSpec::from_json(const json& j) {
  SplitSpec s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 40;
  c.patch_size = {48, 48, 48};
  c.schedule = LossWeightSchedule::scaled(c.epochs);
  c.net.base_channels = 4;
  c.net.patch = c.patch_size;
  c.net.age_scale = 10.0;
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw ConfigError("lr_gamma must lie in (0, 1]");
  if (lr_step < 1) throw ConfigError("lr_step must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  for (const auto* b : {&betas, &ablation_betas}) {
    for (double v : *b) {
      if (!(v >= 0.0 && v < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    }
  }
  noise.validate();
  if (schedule.total_epochs() < epochs - 1) {
    throw ScheduleError("weight schedule covers epochs up to " + std::to_string(schedule.total_epochs()) +
                        " but training runs " + std::to_string(epochs) + " epochs");
  }
  NetConfig n = net;
  n.patch = patch_size;
  n.validate();
}

json TrainConfig::to_json() const {
  return json{{"epochs", epochs},
              {"batch_size", batch_size},
              {"lr0", lr0},
              {"weight_decay", weight_decay},
              {"betas", betas},
              {"ablation_betas", ablation_betas},
              {"lr_step", lr_step},
              {"lr_gamma", lr_gamma},
              {"patch_size", {patch_size.x, patch_size.y, patch_size.z}},
              {"noise", {{"enabled", noise.enabled}, {"low", noise.low}, {"high", noise.high}}},
              {"schedule", schedule.to_string()},
              {"net", net.to_json()},
              {"fit_age_prior", fit_age_prior},
              {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr0 = j.at("lr0").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.betas = j.at("betas").get<std::array<double, 2>>();
  c.ablation_betas = j.at("ablation_betas").get<std::array<double, 2>>();
  c.lr_step = j.at("lr_step").get<int>();
  c.lr_gamma = j.at("lr_gamma").get<double>();
  const auto& p = j.at("patch_size");
  c.patch_size = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
  const auto& n = j.at("noise");
  c.noise.enabled = n.at("enabled").get<bool>();
  c.noise.low = n.at("low").get<double>();
  c.noise.high = n.at("high").get<double>();
  c.schedule = LossWeightSchedule::parse(j.at("schedule").get<std::string>());
  c.net = NetConfig::from_json(j.at("net"));
  c.fit_age_prior = j.at("fit_age_prior").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.lr_gamma, static_cast<double>(epoch / cfg.lr_step));
}

std::pair<double, double> mean_sd(const std::vector<double>& values) {
  if (values.empty()) throw InsufficientDataError("mean/SD of an empty list");
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  if (values.size() == 1) return {m, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

std::string format_mean_sd(double mean, double sd) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", mean, sd);
  return buf;
}

std::string epoch_log_header() { return "epoch,lr,w_s,w_g,w_v,train_total,train_mae_voxel,val_mae_voxel,val_dice"; }

std::string epoch_log_row(const EpochRecord& r) {
  char buf[256];
  char dice[32] = "NA";
  if (r.val_dice) std::snprintf(dice, sizeof dice, "%.6f", *r.val_dice);
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s", r.epoch, r.lr, r.weights.seg,
                r.weights.global, r.weights.voxel, r.train_total, r.train_mae_voxel, r.val_mae_voxel, dice);
  return buf;
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kPatchStream = 0x5041544348ULL;
constexpr std::uint64_t kNoiseStream = 0x4E4F495345ULL;
constexpr std::uint64_t kModelStream = 0x4D4F44454CULL;

struct Batch {
  Tensor x;
  LossInputs loss;
};

Batch make_batch(const TrainConfig& cfg, const std::vector<const Sample*>& members,
                 const std::vector<std::size_t>& ids, int epoch) {
  Batch b;
  std::vector<Volume> patches;
  b.loss.seg_classes = cfg.net.seg_classes;
  const std::uint64_t epoch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
  for (std::size_t k = 0; k < members.size(); ++k) {
    const Sample& s = *members[k];
    std::mt19937_64 rng(derive_seed(derive_seed(epoch_seed, kPatchStream), ids[k]));
    const Patch p = sample_random_patch(s.image.dims(), cfg.patch_size, rng);
    patches.push_back(crop(s.image, p));
    const Grid<std::uint8_t> mask = crop(s.mask, p).grid();
    const LabelVolume tissues = crop(s.tissues, p);

    NoiseSpec noise = cfg.noise;
    noise.seed = derive_seed(derive_seed(epoch_seed, kNoiseStream), ids[k]);
    const Volume truth = inject_label_noise(Volume(p.size, static_cast<float>(s.age)), BrainMask(mask), noise);
    b.loss.voxel_truth.emplace_back(truth.data.storage().begin(), truth.data.storage().end());
    b.loss.masks.push_back(mask.storage());
    b.loss.global_truth.push_back(s.age);
    b.loss.seg_truth.push_back(tissues.grid().storage());
  }
  std::vector<const Volume*> ptrs;
  for (const auto& v : patches) ptrs.push_back(&v);
  b.x = stack_volumes(ptrs);
  return b;
}

std::vector<double> to_double(const float* p, std::size_t n) { return std::vector<double>(p, p + n); }

HeadTensors to_head_grads(const LossGradients& g, const HeadTensors& out) {
  HeadTensors h;
  auto fill = [](Tensor& t, const Shape& s, const std::vector<std::vector<double>>& rows) {
    t = Tensor(s);
    const std::size_t per = s.numel() / static_cast<std::size_t>(s.n);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      float* dst = t.data().data() + i * per;
      for (std::size_t j = 0; j < per; ++j) dst[j] = static_cast<float>(rows[i][j]);
    }
  };
  fill(h.voxel, out.voxel.shape(), g.voxel_pred);
  if (!g.seg_logits.empty()) fill(h.seg, out.seg.shape(), g.seg_logits);
  if (!g.global_pred.empty()) {
    h.global = Tensor(out.global.shape());
    for (std::size_t i = 0; i < g.global_pred.size(); ++i) h.global[i] = static_cast<float>(g.global_pred[i]);
  }
  return h;
}

struct Validation {
  double mae = 0.0;
  std::optional<double> dice;
};

Validation validate_on(MultitaskUNet& model, const std::vector<const Sample*>& samples) {
  Validation v;
  if (samples.empty()) return v;
  std::vector<double> maes;
  std::vector<double> dices;
  for (const Sample* s : samples) {
    const MultitaskOutput out = predict_full_volume(model, s->image);
    maes.push_back(compute_pad(out.voxel_age, s->age, s->mask).sample_mae);
    if (!out.seg_logits.empty()) dices.push_back(hard_dice(out.seg_labels().grid(), s->tissues.grid()));
  }
  v.mae = mean_sd(maes).first;
  if (!dices.empty()) v.dice = mean_sd(dices).first;
  return v;
}

std::ofstream open_log(const fs::path& path, const std::string& header) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write log '" + path.string() + "'");
  os << header << "\n";
  return os;
}

struct LoopResult {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val = 0.0;
};

// Shared training loop. `val` may alias `train`; checkpoints are written only
// when `ckpt_dir` is non-empty.
LoopResult run_loop(const TrainConfig& cfg, MultitaskUNet& model, const std::vector<const Sample*>& train,
                    const std::vector<std::size_t>& train_ids, const std::vector<const Sample*>& val,
                    std::ostream& step_log, std::ostream& epoch_log, const fs::path& ckpt_dir,
                    std::ostream* progress) {
  AdamW opt(model.params(), cfg.betas[0], cfg.betas[1], cfg.weight_decay);
  LoopResult r;
  const CheckpointHeader base{"multitask", model.config().to_json(), 0, json::object()};
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)), kShuffleStream));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at(epoch, cfg);
    rec.weights = cfg.schedule.at(epoch);
    int step = 0;
    double sum_total = 0.0;
    double sum_mae = 0.0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> members;
      std::vector<std::size_t> ids;
      for (std::size_t k = first; k < last; ++k) {
        members.push_back(train[order[k]]);
        ids.push_back(train_ids[order[k]]);
      }
      Batch b = make_batch(cfg, members, ids, epoch);
      const HeadTensors out = model.forward_batch(b.x, Mode::kTrain);
      const std::size_t vox = b.x.shape().spatial();
      for (std::size_t i = 0; i < members.size(); ++i) {
        const auto n = static_cast<int>(i);
        b.loss.voxel_pred.push_back(to_double(out.voxel.sample(n), vox));
        if (out.seg.numel() > 0) {
          b.loss.seg_logits.push_back(to_double(out.seg.sample(n), vox * static_cast<std::size_t>(out.seg.shape().c)));
        }
        if (out.global.numel() > 0) b.loss.global_pred.push_back(out.global[i]);
      }
      LossGradients g;
      const LossBreakdown lb = combined_loss(b.loss, cfg.task_set(), cfg.schedule, epoch, &g);
      if (!std::isfinite(lb.total)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + " step " +
                              std::to_string(step) + ": total loss is not finite");
      }
      model.zero_grad();
      model.backward(to_head_grads(g, out));
      opt.step(rec.lr);
      step_log << loss_log_row(epoch, step, lb) << "\n";
      sum_total += lb.total;
      sum_mae += lb.mae_voxel;
      ++step;
    }
    rec.train_total = sum_total / step;
    rec.train_mae_voxel = sum_mae / step;
    const Validation v = validate_on(model, val);
    rec.val_mae_voxel = v.mae;
    rec.val_dice = v.dice;
    epoch_log << epoch_log_row(rec) << "\n";
    epoch_log.flush();
    step_log.flush();
    if (!val.empty() && (r.best_epoch < 0 || v.mae < r.best_val)) {
      r.best_epoch = epoch;
      r.best_val = v.mae;
      if (!ckpt_dir.empty()) {
        CheckpointHeader h = base;
        h.epoch = epoch;
        h.extra = {{"val_mae_voxel", v.mae}, {"selection", "best_validation"}};
        save_checkpoint(ckpt_dir / "checkpoint_best.ckpt", model, h);
      }
    }
    if (progress != nullptr) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "epoch %3d  lr %.6f  loss %.4f  train_mae %.3f  val_mae %.3f", epoch, rec.lr,
                    rec.train_total, rec.train_mae_voxel, rec.val_mae_voxel);
      *progress << buf;
      if (v.dice) *progress << "  val_dice " << *v.dice;
      *progress << std::endl;
    }
    r.epochs.push_back(rec);
  }
  if (!ckpt_dir.empty()) {
    CheckpointHeader h = base;
    h.epoch = cfg.epochs - 1;
    h.extra = {{"val_mae_voxel", r.epochs.back().val_mae_voxel}, {"selection", "final"}};
    save_checkpoint(ckpt_dir / "checkpoint_final.ckpt", model, h);
  }
  return r;
}

NetConfig net_for(const TrainConfig& cfg, const std::vector<const Sample*>& train) {
  NetConfig n = cfg.net;
  n.patch = cfg.patch_size;
  if (cfg.fit_age_prior) {
    double m = 0.0;
    for (const Sample* s : train) m += s->age;
    n.age_prior = m / static_cast<double>(train.size());
  }
  return n;
}

}  // namespace

TrainResult train_model(const TrainConfig& cfg, const std::vector<Sample>& data, const SplitSpec& split,
                        const fs::path& out_dir, std::ostream* progress) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  if (data.empty()) throw ValidationError("train_model: empty dataset");
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ids.push_back(data[i].id);
    if (!index.emplace(data[i].id, i).second) throw ValidationError("duplicate sample id '" + data[i].id + "'");
  }
  split.validate(ids);
  std::vector<const Sample*> train;
  std::vector<std::size_t> train_ids;
  for (const auto& id : split.train) {
    train.push_back(&data[index.at(id)]);
    train_ids.push_back(index.at(id));
  }
  std::vector<const Sample*> val;
  for (const auto& id : split.val) val.push_back(&data[index.at(id)]);
  if (val.empty()) throw ValidationError("train_model needs at least one validation sample");

  fs::create_directories(out_dir);
  auto model = build_model(net_for(cfg, train), derive_seed(cfg.seed, kModelStream));
  TrainResult res;
  res.step_log = out_dir / "train_log.csv";
  res.epoch_log = out_dir / "epoch_log.csv";
  std::ofstream step_log = open_log(res.step_log, loss_log_header());
  std::ofstream epoch_log = open_log(res.epoch_log, epoch_log_header());
  const LoopResult r = run_loop(cfg, *model, train, train_ids, val, step_log, epoch_log, out_dir, progress);
  res.epochs = r.epochs;
  res.final_val_mae = r.epochs.back().val_mae_voxel;
  res.best_val_mae = r.best_val;
  res.best_epoch = r.best_epoch;
  res.final_checksum = model->checksum();
  res.best_checkpoint = out_dir / "checkpoint_best.ckpt";
  res.final_checkpoint = out_dir / "checkpoint_final.ckpt";
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

std::vector<double> overfit_sentinel(const TrainConfig& cfg, const Sample& sample, int epochs, const fs::path& out_dir,
                                     std::ostream* progress) {
  TrainConfig c = cfg;
  c.epochs = epochs;
  c.validate();
  fs::create_directories(out_dir);
  const std::vector<const Sample*> one{&sample};
  auto model = build_model(net_for(c, one), derive_seed(c.seed, kModelStream));
  std::ofstream step_log = open_log(out_dir / "train_log.csv", loss_log_header());
  std::ofstream epoch_log = open_log(out_dir / "epoch_log.csv", epoch_log_header());
  const LoopResult r = run_loop(c, *model, one, {0}, one, step_log, epoch_log, {}, progress);
  std::vector<double> curve;
  for (const auto& e : r.epochs) curve.push_back(e.val_mae_voxel);
  return curve;
}

std::string AblationReport::to_table() const {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-8s %-16s %10s %10s\n", "Model", "MAE_voxel", "best_epoch", "n_test");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8s %-17s %10d %10zu\n", r.tasks.label().c_str(),
                  format_mean_sd(r.mean, r.sd).c_str(), r.train.best_epoch, r.per_sample_mae.size());
    os << buf;
  }
  return os.str();
}

std::string AblationReport::to_csv() const {
  std::ostringstream os;
  os << "model,mae_voxel_mean,mae_voxel_sd,best_epoch,n_test\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%d,%zu\n", r.tasks.label().c_str(), r.mean, r.sd, r.train.best_epoch,
                  r.per_sample_mae.size());
    os << buf;
  }
  return os.str();
}

AblationReport run_ablation(const TrainConfig& base, const std::vector<Sample>& data, const SplitSpec& split,
                            const fs::path& out_dir, std::ostream* progress) {
  std::map<std::string, const Sample*> index;
  for (const auto& s : data) index[s.id] = &s;
  std::vector<const Sample*> test;
  for (const auto& id : split.test) test.push_back(index.at(id));
  if (test.empty()) throw ValidationError("ablation needs a nonempty test split");

  AblationReport report;
  for (const TaskSet& ts : TaskSet::all()) {
    TrainConfig cfg = base;
    cfg.net.task_set = ts;
    if (!(ts == TaskSet::sgv())) cfg.betas = base.ablation_betas;
    std::string dir = ts.label();
    std::replace(dir.begin(), dir.end(), '+', '_');
    if (progress != nullptr) *progress << "== variant " << ts.label() << " ==" << std::endl;
    AblationRow row;
    row.tasks = ts;
    row.train = train_model(cfg, data, split, out_dir / dir, progress);
    auto model = load_multitask(row.train.best_checkpoint);
    const TestReport t = evaluate_testset(*model, test, nullptr, ts.label());
    for (const auto& s : t.samples) row.per_sample_mae.push_back(s.mae_voxel);
    row.mean = t.mean;
    row.sd = t.sd;
    report.rows.push_back(std::move(row));
  }
  return report;
}

void RegressorTrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw ConfigError("regressor epochs and batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  net.validate();
}

json RegressorTrainConfig::to_json() const {
  return json{{"epochs", epochs}, {"batch_size", batch_size}, {"lr0", lr0}, {"weight_decay", weight_decay},
              {"betas", betas},   {"net", net.to_json()},     {"fit_age_prior", fit_age_prior}, {"seed", seed}};
}

std::unique_ptr<GlobalRegressor> train_global_regressor(const RegressorTrainConfig& cfg,
                                                        const std::vector<Sample>& data, const SplitSpec& split,
                                                        const fs::path& out_dir, std::ostream* progress) {
  cfg.validate();
  std::map<std::string, const Sample*> index;
  for (const auto& s : data) index[s.id] = &s;
  std::vector<const Sample*> train;
  for (const auto& id : split.train) train.push_back(index.at(id));
  if (train.empty()) throw ValidationError("regressor training needs training samples");

  RegressorConfig net = cfg.net;
  if (cfg.fit_age_prior) {
    double m = 0.0;
    for (const Sample* s : train) m += s->age;
    net.age_prior = m / static_cast<double>(train.size());
  }
  auto model = build_global_regressor(net, derive_seed(cfg.seed, kModelStream));
  AdamW opt(model->params(), cfg.betas[0], cfg.betas[1], cfg.weight_decay);
  fs::create_directories(out_dir);
  std::ofstream log = open_log(out_dir / "regressor_log.csv", "epoch,step,mae_global");
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)), kShuffleStream));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int step = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Volume*> xs;
      std::vector<double> truth;
      for (std::size_t k = first; k < last; ++k) {
        xs.push_back(&train[order[k]]->image);
        truth.push_back(train[order[k]]->age);
      }
      const Tensor y = model->forward_batch(stack_volumes(xs), Mode::kTrain);
      std::vector<double> pred(y.data().begin(), y.data().end());
      std::vector<double> g;
      const double loss = mae_global(pred, truth, &g);
      if (!std::isfinite(loss)) throw DivergenceError("regressor diverged at epoch " + std::to_string(epoch));
      Tensor gy(y.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] = static_cast<float>(g[i]);
      model->zero_grad();
      model->backward(gy);
      opt.step(cfg.lr0);
      char buf[96];
      std::snprintf(buf, sizeof buf, "%d,%d,%.6f", epoch, step, loss);
      log << buf << "\n";
      sum += loss;
      ++step;
    }
    if (progress != nullptr) *progress << "regressor epoch " << epoch << "  mae_global " << sum / step << std::endl;
  }
  CheckpointHeader h{"regressor", model->config().to_json(), cfg.epochs - 1, {{"train", cfg.to_json()}}};
  save_checkpoint(out_dir / "regressor.ckpt", *model, h);
  return model;
}

}  // namespace brainage
