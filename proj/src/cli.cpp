#include "brainage/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "brainage/error.hpp"
#include "brainage/evalmaps.hpp"
#include "brainage/interpret.hpp"
#include "brainage/phantom.hpp"
#include "brainage/regional.hpp"
#include "brainage/stats.hpp"
#include "brainage/train.hpp"
#include "brainage/volume_io.hpp"

namespace brainage {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << text;
}

std::string default_out_root() {
  const char* env = std::getenv("BRAINAGE_OUT");
  return env != nullptr && *env != '\0' ? env : "out";
}

struct Global {
  std::string out = default_out_root();
  std::uint64_t seed = 0;
  int verbosity = 0;
  int workers = 1;
};

// Written before the command runs and rewritten with status "completed" at
// the end, so a failed run still leaves its configuration behind.
class RunManifest {
 public:
  RunManifest(const fs::path& out, const std::string& command, const std::string& config, std::uint64_t seed)
      : path_(out / "run.json") {
    j_ = {{"command", command}, {"config_hash", hex(fnv1a(config))}, {"seed", seed}, {"config", config},
          {"status", "started"}};
    flush();
  }
  void complete(const json& outputs) {
    j_["status"] = "completed";
    j_["outputs"] = outputs;
    flush();
  }

 private:
  void flush() const { write_text(path_, j_.dump(2) + "\n"); }
  fs::path path_;
  json j_;
};

std::ostream* progress_stream(const Global& g) { return g.verbosity > 0 ? &std::cerr : nullptr; }

Dims3 dims_from(const std::vector<int>& v, const std::string& what) {
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw ConfigError(what + " takes 1 or 3 integers");
}

// Options mirroring TrainConfig; only values that were supplied override the
// chosen preset.
struct TrainOptions {
  std::string manifest;
  std::string split_file;
  std::vector<double> split_ratios{0.8, 0.1, 0.1};
  bool desk = false;
  int epochs = 0;
  int batch_size = 0;
  double lr0 = 0;
  double weight_decay = 0;
  std::vector<double> betas;
  std::vector<double> ablation_betas;
  int lr_step = 0;
  double lr_gamma = 0;
  std::vector<int> patch_size;
  bool noise = true;
  double noise_low = 0;
  double noise_high = 0;
  std::string schedule;
  std::string task_set;
  int base_channels = 0;
  int depth = 0;
  double age_scale = 0;
  bool fit_age_prior = true;
  std::map<std::string, CLI::Option*> opt;

  void add(CLI::App* sub, bool with_task_set) {
    // Unset options stay blank in the run manifest; the preset fills them.
    sub->option_defaults()->always_capture_default(false);
    opt["manifest"] = sub->add_option("--manifest", manifest, "Sample manifest CSV")->required();
    opt["split_file"] = sub->add_option("--split-file", split_file, "JSON split with train/val/test id lists");
    opt["split_ratios"] = sub->add_option("--split-ratios", split_ratios, "train val test ratios")->expected(3);
    opt["desk"] = sub->add_flag("--desk", desk, "Desk-scale preset (48^3 patches, 40 epochs, narrow network)");
    opt["epochs"] = sub->add_option("--epochs", epochs);
    opt["batch_size"] = sub->add_option("--batch-size", batch_size);
    opt["lr0"] = sub->add_option("--lr0", lr0);
    opt["weight_decay"] = sub->add_option("--weight-decay", weight_decay);
    opt["betas"] = sub->add_option("--betas", betas)->expected(2);
    opt["ablation_betas"] = sub->add_option("--ablation-betas", ablation_betas)->expected(2);
    opt["lr_step"] = sub->add_option("--lr-step", lr_step);
    opt["lr_gamma"] = sub->add_option("--lr-gamma", lr_gamma);
    opt["patch_size"] = sub->add_option("--patch-size", patch_size)->expected(1, 3);
    opt["noise"] = sub->add_option("--noise", noise, "Inject uniform voxel label noise");
    opt["noise_low"] = sub->add_option("--noise-low", noise_low);
    opt["noise_high"] = sub->add_option("--noise-high", noise_high);
    opt["schedule"] = sub->add_option("--schedule", schedule, "begin:end:w_s:w_g:w_v,...");
    if (with_task_set) opt["task_set"] = sub->add_option("--task-set", task_set, "V, S+V, G+V or S+G+V");
    opt["base_channels"] = sub->add_option("--base-channels", base_channels);
    opt["depth"] = sub->add_option("--depth", depth);
    opt["age_scale"] = sub->add_option("--age-scale", age_scale);
    opt["fit_age_prior"] = sub->add_option("--fit-age-prior", fit_age_prior);
  }

  bool given(const std::string& k) const {
    auto it = opt.find(k);
    return it != opt.end() && it->second->count() > 0;
  }

  TrainConfig build(std::uint64_t seed) const {
    TrainConfig c = desk ? TrainConfig::desk() : TrainConfig();
    c.seed = seed;
    if (given("epochs")) c.epochs = epochs;
    if (given("batch_size")) c.batch_size = batch_size;
    if (given("lr0")) c.lr0 = lr0;
    if (given("weight_decay")) c.weight_decay = weight_decay;
    if (given("betas")) c.betas = {betas[0], betas[1]};
    if (given("ablation_betas")) c.ablation_betas = {ablation_betas[0], ablation_betas[1]};
    if (given("lr_step")) c.lr_step = lr_step;
    if (given("lr_gamma")) c.lr_gamma = lr_gamma;
    if (given("patch_size")) c.patch_size = dims_from(patch_size, "--patch-size");
    if (given("noise")) c.noise.enabled = noise;
    if (given("noise_low")) c.noise.low = noise_low;
    if (given("noise_high")) c.noise.high = noise_high;
    if (given("schedule")) {
      c.schedule = LossWeightSchedule::parse(schedule);
    } else if (c.epochs != c.schedule.total_epochs()) {
      c.schedule = c.epochs == LossWeightSchedule::standard().total_epochs() ? LossWeightSchedule::standard()
                                                                               : LossWeightSchedule::scaled(c.epochs);
    }
    if (given("task_set")) c.net.task_set = TaskSet::parse(task_set);
    if (given("base_channels")) c.net.base_channels = base_channels;
    if (given("depth")) c.net.depth = depth;
    if (given("age_scale")) c.net.age_scale = age_scale;
    if (given("fit_age_prior")) c.fit_age_prior = fit_age_prior;
    c.net.patch = c.patch_size;
    c.validate();
    return c;
  }

  SplitSpec split(const std::vector<Sample>& data, std::uint64_t seed) const {
    std::vector<std::string> ids;
    for (const auto& s : data) ids.push_back(s.id);
    SplitSpec s;
    if (!split_file.empty()) {
      std::ifstream in(split_file);
      if (!in) throw IngestError("cannot open split file '" + split_file + "'");
      s = SplitSpec::from_json(json::parse(in));
    } else {
      s = SplitSpec::from_ratios(ids, split_ratios[0], split_ratios[1], split_ratios[2], seed);
    }
    s.validate(ids);
    return s;
  }
};

std::vector<const Sample*> select(const std::vector<Sample>& data, const std::vector<std::string>& ids) {
  std::map<std::string, const Sample*> index;
  for (const auto& s : data) index[s.id] = &s;
  std::vector<const Sample*> out;
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ValidationError("sample id '" + id + "' not found in manifest");
    out.push_back(it->second);
  }
  return out;
}

// Samples chosen by --split-file/--split-list (defaults to the whole manifest).
struct SampleSelection {
  std::string manifest;
  std::string split_file;
  std::string split_list = "test";

  void add(CLI::App* sub, const std::string& manifest_flag) {
    sub->add_option(manifest_flag, manifest, "Sample manifest CSV")->required();
    sub->add_option("--split-file", split_file, "Restrict to one list of a split JSON");
    sub->add_option("--split-list", split_list, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  }

  std::vector<const Sample*> pick(const std::vector<Sample>& data) const {
    if (split_file.empty()) {
      std::vector<const Sample*> all;
      for (const auto& s : data) all.push_back(&s);
      return all;
    }
    std::ifstream in(split_file);
    if (!in) throw IngestError("cannot open split file '" + split_file + "'");
    const SplitSpec s = SplitSpec::from_json(json::parse(in));
    return select(data, split_list == "train" ? s.train : split_list == "val" ? s.val : s.test);
  }
};

std::optional<BiasCorrectionModel> load_bias(const std::string& path) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open bias model '" + path + "'");
  return BiasCorrectionModel::from_json(json::parse(in));
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    rows.push_back(std::move(f));
  }
  if (rows.empty()) throw IngestError("'" + path.string() + "' is empty");
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& path) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw IngestError("'" + path.string() + "' has no column '" + name + "'");
}

double number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IngestError("bad number '" + s + "' in " + what);
  }
}

std::string ext_for(const std::string& format) {
  if (format == "nii.gz") return ".nii.gz";
  if (format == "nii") return ".nii";
  return ".raw";
}

int cmd_phantom_gen(const Global& g, int n, int dim, double age_low, double age_high, double noise_sd,
                    const std::string& format) {
  const fs::path out(g.out);
  PhantomSpec base;
  base.dims = {dim, dim, dim};
  base.noise_sd = noise_sd;
  const auto cohort = phantom_samples(generate_cohort(static_cast<std::size_t>(n), age_low, age_high, g.seed, base));
  std::vector<ManifestEntry> entries;
  const std::string ext = ext_for(format);
  for (const auto& s : cohort) {
    ManifestEntry e{s.id, s.age, s.id + "_image" + ext, s.id + "_mask" + ext, s.id + "_tissues" + ext};
    save_volume(s.image, out / e.image);
    save_volume(s.mask.to_volume(), out / e.mask, DiskType::kUint8);
    save_volume(s.tissues.to_volume(), out / e.tissues, DiskType::kUint8);
    entries.push_back(std::move(e));
  }
  write_manifest(out / "manifest.csv", entries);
  std::cout << "wrote " << cohort.size() << " phantoms and " << (out / "manifest.csv").string() << "\n";
  return 0;
}

void write_split(const fs::path& out, const SplitSpec& s) { write_text(out / "split.json", s.to_json().dump(2) + "\n"); }

int cmd_train(const Global& g, const TrainOptions& o, RunManifest& run) {
  const fs::path out(g.out);
  const auto data = load_samples(o.manifest);
  const TrainConfig cfg = o.build(g.seed);
  const SplitSpec split = o.split(data, g.seed);
  write_split(out, split);
  write_text(out / "train_config.json", cfg.to_json().dump(2) + "\n");
  const TrainResult r = train_model(cfg, data, split, out, progress_stream(g));
  char buf[160];
  std::snprintf(buf, sizeof buf, "final val MAE_voxel %.4f; best %.4f at epoch %d\n", r.final_val_mae, r.best_val_mae,
                r.best_epoch);
  std::cout << buf;
  run.complete({{"best_checkpoint", r.best_checkpoint.string()},
                {"final_checkpoint", r.final_checkpoint.string()},
                {"train_log", r.step_log.string()},
                {"epoch_log", r.epoch_log.string()}});
  return 0;
}

int cmd_ablate(const Global& g, const TrainOptions& o, RunManifest& run) {
  const fs::path out(g.out);
  const auto data = load_samples(o.manifest);
  const TrainConfig cfg = o.build(g.seed);
  const SplitSpec split = o.split(data, g.seed);
  write_split(out, split);
  write_text(out / "train_config.json", cfg.to_json().dump(2) + "\n");
  const AblationReport rep = run_ablation(cfg, data, split, out, progress_stream(g));
  write_text(out / "ablation.csv", rep.to_csv());
  write_text(out / "ablation.txt", rep.to_table());
  std::cout << rep.to_table();
  run.complete({{"report", (out / "ablation.csv").string()}});
  return 0;
}

int cmd_eval(const Global& g, const std::string& checkpoint, const SampleSelection& sel, const std::string& bias_path,
             const std::string& label, RunManifest& run) {
  const fs::path out(g.out);
  auto model = load_multitask(checkpoint);
  const auto data = load_samples(sel.manifest);
  const auto bias = load_bias(bias_path);
  const TestReport rep = evaluate_testset(*model, sel.pick(data), bias ? &*bias : nullptr, label);
  write_text(out / "report.csv", rep.to_csv());
  write_text(out / "report.txt", rep.to_table());
  std::cout << rep.to_table();
  run.complete({{"report", (out / "report.csv").string()}});
  return 0;
}

int cmd_padmap(const Global& g, const std::string& checkpoint, const SampleSelection& sel, const std::string& bias_path,
               const std::string& format, RunManifest& run) {
  const fs::path out(g.out);
  auto model = load_multitask(checkpoint);
  const auto data = load_samples(sel.manifest);
  const auto bias = load_bias(bias_path);
  const std::string ext = ext_for(format);
  json written = json::array();
  for (const Sample* s : sel.pick(data)) {
    const MultitaskOutput o = predict_full_volume(*model, s->image);
    const PADMap pad = compute_pad(o.voxel_age, s->age, s->mask);
    save_pad_map(pad, out / (s->id + "_pad" + ext));
    save_pad_map(adjust_pad(pad), out / (s->id + "_pad_adjusted" + ext));
    written.push_back(s->id + "_pad" + ext);
    if (bias) {
      PADMap c = compute_pad(apply_bias_correction(*bias, o.voxel_age, s->age), s->age, s->mask);
      c.corrected = true;
      save_pad_map(c, out / (s->id + "_pad_corrected" + ext));
      save_pad_map(adjust_pad(c), out / (s->id + "_pad_corrected_adjusted" + ext));
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s age %.2f sample MAE %.3f\n", s->id.c_str(), s->age, pad.sample_mae);
    std::cout << buf;
  }
  run.complete({{"pad_maps", written}});
  return 0;
}

int cmd_bias_fit(const Global& g, const std::string& checkpoint, const SampleSelection& sel, const std::string& pairs_csv,
                 const std::string& mode, const std::string& source, const BinSpec& bins, RunManifest& run) {
  const fs::path out(g.out);
  std::vector<CalibrationPair> pairs;
  if (!pairs_csv.empty()) {
    const auto rows = read_csv(pairs_csv);
    const std::size_t ca = column(rows[0], "age", pairs_csv);
    const std::size_t cp = column(rows[0], "predicted", pairs_csv);
    for (std::size_t r = 1; r < rows.size(); ++r) {
      pairs.push_back({number(rows[r].at(ca), pairs_csv), number(rows[r].at(cp), pairs_csv)});
    }
  } else {
    if (checkpoint.empty() || sel.manifest.empty()) {
      throw ConfigError("bias-fit needs --pairs or both --checkpoint and --manifest");
    }
    auto model = load_multitask(checkpoint);
    const auto data = load_samples(sel.manifest);
    if (source == "global" && !model->config().task_set.global_age) {
      throw ConfigError("checkpoint has no global-age head; use --source mean_voxel");
    }
    std::ostringstream csv;
    csv << "id,age,predicted\n";
    for (const Sample* s : sel.pick(data)) {
      const MultitaskOutput o = predict_full_volume(*model, s->image);
      const double p = source == "global" ? *o.global_age : masked_mean(o.voxel_age.data.values(), s->mask);
      pairs.push_back({s->age, p});
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", s->id.c_str(), s->age, p);
      csv << buf;
    }
    write_text(out / "calibration.csv", csv.str());
  }
  const BiasCorrectionModel bc = fit_bias_correction(pairs, parse_bias_mode(mode), bins);
  write_text(out / "bias.json", bc.to_json().dump(2) + "\n");
  std::cout << bc.to_json().dump(2) << "\n";
  run.complete({{"bias_model", (out / "bias.json").string()}});
  return 0;
}

int cmd_bias_apply(const Global& g, const std::string& bias_path, const std::string& input, RunManifest& run) {
  const fs::path out(g.out);
  const auto bias = load_bias(bias_path);
  if (!bias) throw ConfigError("--bias is required");
  const auto rows = read_csv(input);
  const std::size_t ca = column(rows[0], "age", input);
  const std::size_t cp = column(rows[0], "predicted", input);
  std::optional<std::size_t> cid;
  for (std::size_t i = 0; i < rows[0].size(); ++i) {
    if (rows[0][i] == "id") cid = i;
  }
  std::ostringstream csv;
  csv << "id,age,predicted,corrected\n";
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const double age = number(rows[r].at(ca), input);
    const double p = number(rows[r].at(cp), input);
    const double c = apply_bias_correction(*bias, p, age);
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f\n", age, p, c);
    csv << (cid ? rows[r].at(*cid) : std::to_string(r)) << buf;
  }
  write_text(out / "corrected.csv", csv.str());
  std::cout << csv.str();
  run.complete({{"corrected", (out / "corrected.csv").string()}});
  return 0;
}

RegionAtlas atlas_for(const std::string& path, const Dims3& dims) {
  return path.empty() ? phantom_atlas(dims) : RegionAtlas::load(path);
}

int cmd_atlas(const Global& g, const std::string& checkpoint, const SampleSelection& sel, const std::string& atlas_path,
              const std::string& bias_path, RunManifest& run) {
  const fs::path out(g.out);
  auto model = load_multitask(checkpoint);
  const auto data = load_samples(sel.manifest);
  const auto bias = load_bias(bias_path);
  const auto samples = sel.pick(data);
  if (samples.empty()) throw ValidationError("no samples selected");
  const RegionAtlas atlas = atlas_for(atlas_path, samples.front()->image.dims());
  std::vector<PADMap> pads;
  for (const Sample* s : samples) {
    const MultitaskOutput o = predict_full_volume(*model, s->image);
    if (bias) {
      PADMap p = compute_pad(apply_bias_correction(*bias, o.voxel_age, s->age), s->age, s->mask);
      p.corrected = true;
      pads.push_back(std::move(p));
    } else {
      pads.push_back(compute_pad(o.voxel_age, s->age, s->mask));
    }
  }
  const RegionalReport rep = cohort_regional_report(pads, atlas);
  write_text(out / "regional.csv", rep.to_csv());
  write_text(out / "regional.txt", rep.to_table());
  save_volume(build_regional_atlas_volume(rep, atlas), out / "regional_atlas.nii.gz");
  if (atlas_path.empty()) atlas.save(out / "atlas.nii.gz");
  std::cout << rep.to_table();
  run.complete({{"report", (out / "regional.csv").string()}, {"atlas_volume", (out / "regional_atlas.nii.gz").string()}});
  return 0;
}

struct InterpretOptions {
  std::string checkpoint;
  std::string regressor;
  std::string manifest;
  std::string split_file;
  std::string sample;
  std::string atlas;
  int regressor_epochs = 20;
  std::vector<int> regressor_channels{8, 16, 32, 64};
  int axis = 2;
  int slice = -1;
  std::vector<int> occlusion_size{8};
  std::vector<int> occlusion_stride{4};
  float occlusion_fill = 0.0f;
  int smoothgrad_n = 25;
  double smoothgrad_sd = 0.10;
};

int cmd_interpret(const Global& g, const InterpretOptions& o, RunManifest& run) {
  const fs::path out(g.out);
  const auto data = load_samples(o.manifest);
  std::vector<std::string> ids;
  for (const auto& s : data) ids.push_back(s.id);
  SplitSpec split;
  if (!o.split_file.empty()) {
    std::ifstream in(o.split_file);
    if (!in) throw IngestError("cannot open split file '" + o.split_file + "'");
    split = SplitSpec::from_json(json::parse(in));
  } else {
    split = SplitSpec::from_ratios(ids, 0.8, 0.1, 0.1, g.seed);
  }
  split.validate(ids);

  std::unique_ptr<GlobalRegressor> reg;
  if (!o.regressor.empty()) {
    reg = load_regressor(o.regressor);
  } else {
    RegressorTrainConfig rc;
    rc.epochs = o.regressor_epochs;
    rc.net.channels = o.regressor_channels;
    rc.seed = g.seed;
    reg = train_global_regressor(rc, data, split, out, progress_stream(g));
  }
  const std::string id = o.sample.empty() ? (split.test.empty() ? split.train.front() : split.test.front()) : o.sample;
  const Sample& s = *select(data, {id}).front();

  auto model = load_multitask(o.checkpoint);
  const MultitaskOutput pred = predict_full_volume(*model, s.image);
  const PADMap pad = compute_pad(pred.voxel_age, s.age, s.mask);
  const RegionAtlas atlas = atlas_for(o.atlas, s.image.dims());
  const Volume regional = build_regional_atlas_volume(cohort_regional_report({pad}, atlas), atlas);

  RegressorSaliencyModel sm(*reg);
  OcclusionSpec os;
  os.size = dims_from(o.occlusion_size, "--occlusion-size");
  os.stride = dims_from(o.occlusion_stride, "--occlusion-stride");
  os.fill_value = o.occlusion_fill;
  std::vector<SaliencyMap> maps;
  maps.push_back(gradcam(sm, s.image));
  maps.push_back(occlusion_sensitivity(sm, s.image, os));
  maps.push_back(smoothgrad(sm, s.image, o.smoothgrad_n, o.smoothgrad_sd, derive_seed(g.seed, 7)));
  for (auto& m : maps) {
    m.sample_id = s.id;
    save_saliency(m, out / (s.id + "_" + to_string(m.method) + ".nii.gz"));
  }
  save_pad_map(pad, out / (s.id + "_pad.nii.gz"));
  const int extent = o.axis == 0 ? s.image.dims().x : o.axis == 1 ? s.image.dims().y : s.image.dims().z;
  const int slice = o.slice >= 0 ? o.slice : extent / 2;
  const PanelOutput panel = comparison_panel(pad, regional, maps, o.axis, slice, out, s.id);
  std::cout << "sample " << s.id << " (age " << s.age << ", predicted global " << sm.predict(s.image)
            << "): panel " << panel.combined.string() << "\n";
  run.complete({{"panel", panel.combined.string()}, {"legend", panel.legend.string()}});
  return 0;
}

int cmd_stats(const Global& g, const std::vector<std::string>& metrics, const std::string& col, double alpha,
              const std::string& pairs, RunManifest& run) {
  const fs::path out(g.out);
  if (metrics.size() < 2) throw ConfigError("stats needs at least two --metrics label=path entries");
  std::vector<std::string> labels;
  std::map<std::string, std::map<std::string, double>> values;
  for (const auto& m : metrics) {
    const auto eq = m.find('=');
    const std::string label = eq == std::string::npos ? fs::path(m).stem().string() : m.substr(0, eq);
    const fs::path path = eq == std::string::npos ? m : m.substr(eq + 1);
    const auto rows = read_csv(path);
    const std::size_t ci = column(rows[0], "id", path);
    const std::size_t cv = column(rows[0], col, path);
    for (std::size_t r = 1; r < rows.size(); ++r) values[label][rows[r].at(ci)] = number(rows[r].at(cv), path.string());
    labels.push_back(label);
  }
  std::vector<std::pair<std::string, std::string>> family;
  if (!pairs.empty()) {
    std::stringstream ss(pairs);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto c = item.find(':');
      if (c == std::string::npos) throw ConfigError("--pairs entries look like A:B");
      family.emplace_back(item.substr(0, c), item.substr(c + 1));
    }
  } else {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      for (std::size_t j = i + 1; j < labels.size(); ++j) family.emplace_back(labels[i], labels[j]);
    }
  }
  std::vector<PairedComparison> tests;
  for (const auto& [la, lb] : family) {
    if (values.count(la) == 0 || values.count(lb) == 0) throw ConfigError("unknown label in pair " + la + ":" + lb);
    std::vector<double> a;
    std::vector<double> b;
    for (const auto& [id, v] : values[la]) {
      auto it = values[lb].find(id);
      if (it == values[lb].end()) continue;
      a.push_back(v);
      b.push_back(it->second);
    }
    tests.push_back(wilcoxon_signed_rank(a, b, la, lb));
  }
  std::vector<double> p;
  for (const auto& t : tests) p.push_back(t.p_value);
  const CorrectionResult holm = holm_bonferroni(p, alpha);
  std::vector<double> thr(p.size());
  for (std::size_t k = 0; k < holm.order.size(); ++k) thr[holm.order[k]] = holm.thresholds[k];
  std::ostringstream csv;
  std::ostringstream txt;
  csv << "a,b,n_effective,w_plus,w_minus,p_value,exact,holm_threshold,holm_adjusted,reject_raw,reject_holm\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %-10s %5s %9s %10s %10s %4s %4s\n", "A", "B", "n", "W", "p", "p_holm", "raw",
                "holm");
  txt << buf;
  for (std::size_t i = 0; i < tests.size(); ++i) {
    const auto& t = tests[i];
    const bool raw = t.p_value < alpha;
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6f,%.6f,%.12g,%d,%.12g,%.12g,%d,%d\n", t.label_a.c_str(),
                  t.label_b.c_str(), t.n_effective, t.w_plus, t.w_minus, t.p_value, t.exact ? 1 : 0, thr[i],
                  holm.adjusted[i], raw ? 1 : 0, holm.reject[i] ? 1 : 0);
    csv << buf;
    std::snprintf(buf, sizeof buf, "%-10s %-10s %5zu %9.1f %10.4g %10.4g %4s %4s\n", t.label_a.c_str(),
                  t.label_b.c_str(), t.n_effective, t.statistic, t.p_value, holm.adjusted[i], raw ? "*" : "",
                  holm.reject[i] ? "*" : "");
    txt << buf;
  }
  txt << "* - p<" << alpha << "\n";
  write_text(out / "stats.csv", csv.str());
  write_text(out / "stats.txt", txt.str());
  std::cout << txt.str();
  run.complete({{"report", (out / "stats.csv").string()}});
  return 0;
}

// Global options plus those of the invoked subcommand, as config-file lines.
std::string resolved_config(const CLI::App& app, const std::string& sub) {
  std::istringstream all(app.config_to_str(true, false));
  std::string out;
  std::string line;
  while (std::getline(all, line)) {
    const auto eq = line.find('=');
    const std::string key = line.substr(0, eq);
    const auto dot = key.find('.');
    if (key == "config" || key == "out" || (dot != std::string::npos && key.substr(0, dot) != sub)) continue;
    out += line + "\n";
  }
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multitask voxel-level brain-age pipeline"};
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Config file (TOML/INI); CLI flags take precedence");
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "Master seed for all randomness");
  app.add_option("--out", g.out, "Output directory (default: $BRAINAGE_OUT or ./out)");
  app.add_flag("-v,--verbose", g.verbosity, "Progress output on stderr");
  app.add_option("--workers", g.workers, "Worker threads (1 = reproducible mode)")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("phantom-gen", "Generate a synthetic phantom cohort");
  int n = 0;
  int dim = 64;
  double age_low = PhantomSpec::kMinAge;
  double age_high = PhantomSpec::kMaxAge;
  double noise_sd = PhantomSpec{}.noise_sd;
  std::string format = "nii.gz";
  gen->add_option("--n", n, "Number of phantoms")->required()->check(CLI::PositiveNumber);
  gen->add_option("--dims", dim, "Cube edge in voxels")->check(CLI::PositiveNumber);
  gen->add_option("--age-low", age_low);
  gen->add_option("--age-high", age_high);
  gen->add_option("--noise-sd", noise_sd);
  gen->add_option("--format", format)->check(CLI::IsMember({"nii.gz", "nii", "raw"}));

  auto* train = app.add_subcommand("train", "Train one multitask model");
  TrainOptions train_opts;
  train_opts.add(train, true);

  auto* ablate = app.add_subcommand("ablate", "Train the four task-set variants and compare them");
  TrainOptions ablate_opts;
  ablate_opts.add(ablate, false);

  auto* eval = app.add_subcommand("eval", "Per-sample and aggregate test-set report");
  std::string checkpoint;
  std::string bias_path;
  std::string label = "test";
  SampleSelection eval_sel;
  eval->add_option("--checkpoint", checkpoint)->required();
  eval_sel.add(eval, "--testset");
  eval->add_option("--bias", bias_path, "Bias model JSON (adds a corrected column)");
  eval->add_option("--label", label);

  auto* padmap = app.add_subcommand("padmap", "Write PAD and adjusted PAD maps");
  SampleSelection pad_sel;
  std::string pad_format = "nii.gz";
  padmap->add_option("--checkpoint", checkpoint)->required();
  pad_sel.add(padmap, "--testset");
  padmap->add_option("--bias", bias_path);
  padmap->add_option("--format", pad_format)->check(CLI::IsMember({"nii.gz", "nii", "raw"}));

  auto* bias_fit = app.add_subcommand("bias-fit", "Fit a bias-correction model");
  SampleSelection fit_sel;
  std::string pairs_csv;
  std::string mode = "regression";
  std::string source = "global";
  BinSpec bins;
  bias_fit->add_option("--checkpoint", checkpoint);
  bias_fit->add_option("--manifest", fit_sel.manifest);
  bias_fit->add_option("--split-file", fit_sel.split_file);
  bias_fit->add_option("--split-list", fit_sel.split_list)->check(CLI::IsMember({"train", "val", "test"}));
  bias_fit->add_option("--pairs", pairs_csv, "CSV with age,predicted columns");
  bias_fit->add_option("--mode", mode)->check(CLI::IsMember({"regression", "age_bins"}));
  bias_fit->add_option("--source", source)->check(CLI::IsMember({"global", "mean_voxel"}));
  bias_fit->add_option("--bin-low", bins.low);
  bias_fit->add_option("--bin-high", bins.high);
  bias_fit->add_option("--bin-width", bins.width);

  auto* bias_apply = app.add_subcommand("bias-apply", "Apply a bias-correction model to predictions");
  std::string input_csv;
  bias_apply->add_option("--bias", bias_path)->required();
  bias_apply->add_option("--input", input_csv, "CSV with id,age,predicted")->required();

  auto* atlas = app.add_subcommand("atlas", "Regional PAD report and atlas volume");
  SampleSelection atlas_sel;
  std::string atlas_path;
  atlas->add_option("--checkpoint", checkpoint)->required();
  atlas_sel.add(atlas, "--testset");
  atlas->add_option("--atlas", atlas_path, "Region label volume (default: phantom atlas)");
  atlas->add_option("--bias", bias_path);

  auto* interpret = app.add_subcommand("interpret", "Saliency maps next to PAD maps");
  InterpretOptions io;
  interpret->add_option("--checkpoint", io.checkpoint)->required();
  interpret->add_option("--manifest", io.manifest)->required();
  interpret->add_option("--split-file", io.split_file);
  interpret->add_option("--regressor", io.regressor, "Trained regressor checkpoint (trained here if absent)");
  interpret->add_option("--regressor-epochs", io.regressor_epochs);
  interpret->add_option("--regressor-channels", io.regressor_channels);
  interpret->add_option("--sample", io.sample);
  interpret->add_option("--atlas", io.atlas);
  interpret->add_option("--axis", io.axis)->check(CLI::Range(0, 2));
  interpret->add_option("--slice", io.slice);
  interpret->add_option("--occlusion-size", io.occlusion_size)->expected(1, 3);
  interpret->add_option("--occlusion-stride", io.occlusion_stride)->expected(1, 3);
  interpret->add_option("--occlusion-fill", io.occlusion_fill);
  interpret->add_option("--smoothgrad-n", io.smoothgrad_n);
  interpret->add_option("--smoothgrad-sd", io.smoothgrad_sd);

  auto* stats = app.add_subcommand("stats", "Paired signed-rank tests with Holm correction");
  std::vector<std::string> metrics;
  std::string col = "mae_voxel";
  double alpha = 0.05;
  std::string pairs;
  stats->add_option("--metrics", metrics, "label=path to a per-sample CSV (repeatable)")->required();
  stats->add_option("--column", col);
  stats->add_option("--alpha", alpha);
  stats->add_option("--pairs", pairs, "Comparison family, e.g. A:B,A:C (default: all pairs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    fs::create_directories(g.out);
    RunManifest run(g.out, sub->get_name(), resolved_config(app, sub->get_name()), g.seed);
    if (sub == gen) {
      const int rc = cmd_phantom_gen(g, n, dim, age_low, age_high, noise_sd, format);
      run.complete({{"manifest", (fs::path(g.out) / "manifest.csv").string()}});
      return rc;
    }
    if (sub == train) return cmd_train(g, train_opts, run);
    if (sub == ablate) return cmd_ablate(g, ablate_opts, run);
    if (sub == eval) return cmd_eval(g, checkpoint, eval_sel, bias_path, label, run);
    if (sub == padmap) return cmd_padmap(g, checkpoint, pad_sel, bias_path, pad_format, run);
    if (sub == bias_fit) return cmd_bias_fit(g, checkpoint, fit_sel, pairs_csv, mode, source, bins, run);
    if (sub == bias_apply) return cmd_bias_apply(g, bias_path, input_csv, run);
    if (sub == atlas) return cmd_atlas(g, checkpoint, atlas_sel, atlas_path, bias_path, run);
    if (sub == interpret) return cmd_interpret(g, io, run);
    if (sub == stats) return cmd_stats(g, metrics, col, alpha, pairs, run);
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace brainage
