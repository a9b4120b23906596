#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"

#include "brainage/error.hpp"
#include "brainage/optim.hpp"
#include "brainage/phantom.hpp"
#include "brainage/train.hpp"
#include "brainage/volume_io.hpp"
#include "oracles.hpp"

using namespace brainage;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<Sample> tiny_cohort(std::size_t n) {
  PhantomSpec base;
  base.dims = {16, 16, 16};
  return phantom_samples(generate_cohort(n, 18, 88, 5, base));
}

TrainConfig tiny_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.patch_size = {16, 16, 16};
  cfg.schedule = LossWeightSchedule::scaled(epochs);
  cfg.net.base_channels = 2;
  cfg.net.depth = 3;
  cfg.net.age_scale = 10.0;
  cfg.seed = 3;
  return cfg;
}

SplitSpec split_of(const std::vector<Sample>& data, std::size_t n_train, std::size_t n_val) {
  SplitSpec s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (i < n_train ? s.train : i < n_train + n_val ? s.val : s.test).push_back(data[i].id);
  }
  return s;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 1e-3);
  CHECK(lr_at(69, cfg) == 1e-3);
  CHECK(lr_at(70, cfg) == 1e-3 * 0.6);
  CHECK(lr_at(140, cfg) == 1e-3 * std::pow(0.6, 2));
  CHECK(lr_at(299, cfg) == 1e-3 * std::pow(0.6, 4));
}

TEST_CASE("training configuration defaults and validation") {
  const TrainConfig d;
  CHECK(d.epochs == 300);
  CHECK(d.batch_size == 2);
  CHECK(d.betas == std::array<double, 2>{0.5, 0.999});
  CHECK(d.weight_decay == 1e-5);
  CHECK(d.patch_size == Dims3{128, 128, 128});
  d.validate();

  const TrainConfig desk = TrainConfig::desk();
  CHECK(desk.epochs == 40);
  CHECK(desk.patch_size == Dims3{48, 48, 48});
  desk.validate();

  const TrainConfig back = TrainConfig::from_json(desk.to_json());
  CHECK(back.to_json() == desk.to_json());

  TrainConfig bad = desk;
  bad.epochs = 100;
  CHECK_THROWS_AS(bad.validate(), ScheduleError);
  bad = desk;
  bad.patch_size = {50, 48, 48};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.betas = {1.0, 0.999};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.noise.low = 3.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("splits") {
  std::vector<std::string> ids;
  for (int i = 0; i < 200; ++i) ids.push_back("s" + std::to_string(i));
  const auto s = SplitSpec::from_ratios(ids, 0.8, 0.1, 0.1, 42);
  CHECK(s.train.size() == 160);
  CHECK(s.val.size() == 20);
  CHECK(s.test.size() == 20);
  s.validate(ids);
  std::set<std::string> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 200);

  const auto again = SplitSpec::from_ratios(ids, 0.8, 0.1, 0.1, 42);
  CHECK(again.train == s.train);
  const auto j = SplitSpec::from_json(s.to_json());
  CHECK(j.test == s.test);

  SplitSpec overlap = s;
  overlap.val.push_back(s.train[0]);
  CHECK_THROWS_AS(overlap.validate(ids), ValidationError);
  SplitSpec missing = s;
  missing.test.pop_back();
  CHECK_THROWS_AS(missing.validate(ids), ValidationError);
}

TEST_CASE("manifest round trip") {
  ScratchDir dir("manifest");
  const auto data = tiny_cohort(2);
  std::vector<ManifestEntry> entries;
  for (const auto& s : data) {
    save_volume(s.image, dir.path / (s.id + "_image.nii.gz"));
    save_volume(s.mask.to_volume(), dir.path / (s.id + "_mask.nii.gz"), DiskType::kUint8);
    save_volume(s.tissues.to_volume(), dir.path / (s.id + "_tissues.nii.gz"), DiskType::kUint8);
    entries.push_back({s.id, s.age, s.id + "_image.nii.gz", s.id + "_mask.nii.gz", s.id + "_tissues.nii.gz"});
  }
  write_manifest(dir.path / "manifest.csv", entries);
  const auto back = load_samples(dir.path / "manifest.csv");
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].id == data[i].id);
    CHECK(back[i].age == doctest::Approx(data[i].age).epsilon(1e-7));
    CHECK(back[i].image.data == data[i].image.data);
    CHECK(back[i].tissues.grid() == data[i].tissues.grid());
  }
  std::ofstream(dir.path / "bad.csv") << "id,age\n";
  CHECK_THROWS_AS(read_manifest(dir.path / "bad.csv"), IngestError);
}

TEST_CASE("adamw first step") {
  Param p("w", 2);
  p.value = {1.0f, -2.0f};
  p.grad = {0.5f, -0.25f};
  AdamW opt({&p}, 0.5, 0.999, 0.01);
  opt.step(0.1);
  // Bias-corrected first step moves each weight by lr * sign(grad) after decay.
  CHECK(p.value[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.01) - 0.1).epsilon(1e-6));
  CHECK(p.value[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.01) + 0.1).epsilon(1e-6));
  CHECK(opt.steps() == 1);
}

TEST_CASE("smoke training run writes logs and loadable checkpoints") {
  ScratchDir dir("smoke");
  const auto data = tiny_cohort(8);
  const auto cfg = tiny_config(2);
  const auto split = split_of(data, 6, 2);
  const auto r = train_model(cfg, data, split, dir.path / "a");
  REQUIRE(r.epochs.size() == 2);
  for (const auto& e : r.epochs) {
    CHECK(e.lr == lr_at(e.epoch, cfg));
    CHECK(e.weights == cfg.schedule.at(e.epoch));
    CHECK(std::isfinite(e.val_mae_voxel));
    CHECK(e.val_dice.has_value());
  }
  for (const char* f : {"checkpoint_best.ckpt", "checkpoint_final.ckpt", "train_log.csv", "epoch_log.csv"}) {
    CHECK(std::filesystem::exists(dir.path / "a" / f));
  }
  auto model = load_multitask(r.final_checkpoint);
  CHECK(model->checksum() == r.final_checksum);
  const auto out = model->forward({&data[7].image});
  CHECK(out[0].voxel_age.dims() == data[7].image.dims());

  // Step log: one header plus 3 steps per epoch (6 samples, batch 2).
  std::istringstream log(slurp(dir.path / "a" / "train_log.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 1 + 2 * 3);

  const auto again = train_model(cfg, data, split, dir.path / "b");
  CHECK(again.final_checksum == r.final_checksum);
  CHECK(slurp(dir.path / "a" / "epoch_log.csv") == slurp(dir.path / "b" / "epoch_log.csv"));
  CHECK(slurp(dir.path / "a" / "train_log.csv") == slurp(dir.path / "b" / "train_log.csv"));

  TrainConfig other = cfg;
  other.seed = 4;
  CHECK(train_model(other, data, split, dir.path / "c").final_checksum != r.final_checksum);
}

TEST_CASE("training aborts on a non-finite loss") {
  ScratchDir dir("diverge");
  auto data = tiny_cohort(4);
  data[0].age = std::numeric_limits<double>::quiet_NaN();
  data[1].age = std::numeric_limits<double>::quiet_NaN();
  SplitSpec s;
  s.train = {data[0].id, data[1].id};
  s.val = {data[2].id, data[3].id};
  CHECK_THROWS_AS(train_model(tiny_config(1), data, s, dir.path), DivergenceError);
}

TEST_CASE("split must match the data") {
  ScratchDir dir("badsplit");
  const auto data = tiny_cohort(4);
  SplitSpec s;
  s.train = {data[0].id, data[1].id};
  s.val = {"nope"};
  CHECK_THROWS_AS(train_model(tiny_config(1), data, s, dir.path), ValidationError);
}

TEST_CASE("overfit sentinel returns one clean error per epoch") {
  ScratchDir dir("sentinel");
  const auto data = tiny_cohort(1);
  const auto curve = overfit_sentinel(tiny_config(3), data[0], 3, dir.path);
  CHECK(curve.size() == 3);
  for (double v : curve) CHECK(std::isfinite(v));
}

TEST_CASE("ablation report layout") {
  AblationReport rep;
  for (const auto& t : TaskSet::all()) {
    AblationRow row;
    row.tasks = t;
    row.per_sample_mae = {2.0, 4.0};
    row.mean = 3.0;
    row.sd = std::sqrt(2.0);
    rep.rows.push_back(row);
  }
  const std::string table = rep.to_table();
  CHECK(table.find("S+G+V") != std::string::npos);
  CHECK(table.find("3.00±1.41") != std::string::npos);
}
