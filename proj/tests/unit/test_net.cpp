#include <cmath>
#include <random>

#include "doctest.h"

#include "brainage/error.hpp"
#include "brainage/loss.hpp"
#include "brainage/net.hpp"
#include "oracles.hpp"

using namespace brainage;

namespace {

NetConfig small_config(TaskSet tasks) {
  NetConfig cfg;
  cfg.base_channels = 2;
  cfg.depth = 3;
  cfg.task_set = tasks;
  cfg.age_prior = 50.0;
  return cfg;
}

std::vector<double> to_double(const float* p, std::size_t n) { return std::vector<double>(p, p + n); }

}  // namespace

TEST_CASE("task sets") {
  CHECK(TaskSet::parse("S+G+V") == TaskSet::sgv());
  CHECK(TaskSet::parse("V") == TaskSet::v());
  CHECK(TaskSet::sv().label() == "S+V");
  CHECK_THROWS_AS(TaskSet::parse("S+G"), ConfigError);
  CHECK_THROWS_AS((TaskSet{false, true, true}).validate(), ConfigError);
}

TEST_CASE("heads present exactly per task set") {
  std::mt19937_64 rng(1);
  const Volume x = oracle::random_volume(Dims3{16, 16, 16}, rng);
  for (const auto& tasks : TaskSet::all()) {
    auto model = build_model(small_config(tasks), 3);
    const auto out = model->forward({&x});
    REQUIRE(out.size() == 1);
    CHECK(out[0].voxel_age.dims() == x.dims());
    CHECK(out[0].global_age.has_value() == tasks.global_age);
    CHECK(out[0].seg_logits.empty() == !tasks.segmentation);
    if (tasks.segmentation) {
      CHECK(out[0].seg_logits.size() == 4);
      const auto probs = out[0].seg_probabilities();
      for (std::size_t i = 0; i < x.data.size(); i += 97) {
        double s = 0.0;
        for (const auto& p : probs) s += p.data[i];
        CHECK(std::fabs(s - 1.0) < 1e-5);
      }
    }
  }
}

TEST_CASE("initialization and evaluation are deterministic") {
  auto a = build_model(small_config(TaskSet::sgv()), 7);
  auto b = build_model(small_config(TaskSet::sgv()), 7);
  auto c = build_model(small_config(TaskSet::sgv()), 8);
  CHECK(a->checksum() == b->checksum());
  CHECK(a->checksum() != c->checksum());

  std::mt19937_64 rng(2);
  const Volume x = oracle::random_volume(Dims3{16, 16, 16}, rng);
  const auto o1 = a->forward({&x});
  const auto o2 = a->forward({&x});
  CHECK(o1[0].voxel_age.data == o2[0].voxel_age.data);
  CHECK(*o1[0].global_age == *o2[0].global_age);

  const auto pair = a->forward({&x, &x});
  CHECK(pair[0].voxel_age.data == pair[1].voxel_age.data);
  CHECK(pair[0].seg_logits[2].data == pair[1].seg_logits[2].data);
}

TEST_CASE("zero input gives finite outputs with the input shape") {
  NetConfig cfg;
  cfg.task_set = TaskSet::sgv();
  cfg.base_channels = 4;
  auto model = build_model(cfg, 1);
  const Volume zero(Dims3{64, 64, 64});
  const auto out = model->forward({&zero});
  CHECK(out[0].voxel_age.dims() == zero.dims());
  for (float v : out[0].voxel_age.data.storage()) REQUIRE(std::isfinite(v));
  CHECK(std::isfinite(*out[0].global_age));
}

TEST_CASE("input dims must be divisible by the pooling factor") {
  NetConfig cfg;
  CHECK_THROWS_AS(cfg.check_input(Dims3{50, 50, 50}), ConfigError);
  cfg.check_input(Dims3{64, 64, 64});
  NetConfig shallow;
  shallow.depth = 1;
  CHECK_THROWS_AS(shallow.validate(), ConfigError);
  auto model = build_model(small_config(TaskSet::v()), 1);
  const Volume odd(Dims3{10, 16, 16});
  CHECK_THROWS_AS(model->forward({&odd}), ConfigError);
}

TEST_CASE("every parameter receives gradient under the combined loss") {
  std::mt19937_64 rng(3);
  const Dims3 d{8, 8, 8};
  for (const auto& tasks : TaskSet::all()) {
    auto model = build_model(small_config(tasks), 11);
    const Volume a = oracle::random_volume(d, rng);
    const Volume b = oracle::random_volume(d, rng);
    const Tensor x = stack_volumes({&a, &b});
    model->zero_grad();
    const HeadTensors h = model->forward_batch(x, Mode::kTrain);
    LossInputs in;
    const std::size_t v = d.voxels();
    std::uniform_int_distribution<int> label(0, 3);
    for (int i = 0; i < 2; ++i) {
      in.voxel_pred.push_back(to_double(h.voxel.sample(i), v));
      in.voxel_truth.emplace_back(v, 30.0 + 20.0 * i);
      in.masks.emplace_back(v, 1);
      if (tasks.global_age) {
        in.global_pred.push_back(h.global[static_cast<std::size_t>(i)]);
        in.global_truth.push_back(30.0 + 20.0 * i);
      }
      if (tasks.segmentation) {
        in.seg_logits.push_back(to_double(h.seg.sample(i), 4 * v));
        std::vector<std::uint8_t> y(v);
        for (auto& l : y) l = static_cast<std::uint8_t>(label(rng));
        in.seg_truth.push_back(y);
      }
    }
    LossGradients g;
    combined_loss(in, tasks, LossWeightSchedule::standard(), 0, &g);
    HeadTensors hg;
    hg.voxel = Tensor(h.voxel.shape());
    for (int i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < v; ++j) hg.voxel.sample(i)[j] = static_cast<float>(g.voxel_pred[i][j]);
    if (tasks.global_age) {
      hg.global = Tensor(h.global.shape());
      for (int i = 0; i < 2; ++i) hg.global[static_cast<std::size_t>(i)] = static_cast<float>(g.global_pred[i]);
    }
    if (tasks.segmentation) {
      hg.seg = Tensor(h.seg.shape());
      for (int i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4 * v; ++j) hg.seg.sample(i)[j] = static_cast<float>(g.seg_logits[i][j]);
    }
    model->backward(hg);
    for (Param* p : model->params()) {
      bool nonzero = false;
      for (float gv : p->grad) nonzero = nonzero || gv != 0.0f;
      INFO(tasks.label() << " " << p->name);
      CHECK(nonzero);
    }
  }
}

TEST_CASE("global regressor") {
  RegressorConfig cfg;
  cfg.channels = {4, 8, 8, 8};
  auto reg = build_global_regressor(cfg, 2);
  std::mt19937_64 rng(4);
  const Volume v = oracle::random_volume(Dims3{64, 64, 64}, rng);
  const Tensor x = stack_volumes({&v});
  const Tensor y = reg->forward_batch(x, Mode::kEval);
  CHECK(y.numel() == 1);
  CHECK(reg->features().shape() == Shape{1, 8, 8, 8, 8});

  std::fill(reg->head().weight().value.begin(), reg->head().weight().value.end(), 0.0f);
  std::fill(reg->head().bias().value.begin(), reg->head().bias().value.end(), 0.0f);
  for (int t = 0; t < 3; ++t) {
    const Volume r = oracle::random_volume(Dims3{16, 16, 16}, rng);
    CHECK(reg->forward_batch(stack_volumes({&r}), Mode::kEval)[0] == 0.0f);
  }
}

TEST_CASE("checkpoints round-trip and reject mismatched configs") {
  ScratchDir dir("ckpt");
  auto model = build_model(small_config(TaskSet::sgv()), 5);
  CheckpointHeader h;
  h.kind = "multitask";
  h.config = model->config().to_json();
  h.epoch = 3;
  save_checkpoint(dir.path / "m.ckpt", *model, h);
  CheckpointHeader back;
  auto loaded = load_multitask(dir.path / "m.ckpt", &back);
  CHECK(back.epoch == 3);
  CHECK(loaded->checksum() == model->checksum());
  CHECK(loaded->config() == model->config());

  auto other = build_model(small_config(TaskSet::v()), 5);
  CheckpointHeader expect;
  expect.kind = "multitask";
  expect.config = other->config().to_json();
  CHECK_THROWS_AS(load_checkpoint(dir.path / "m.ckpt", *other, expect), ConfigError);
  CHECK_THROWS_AS(load_regressor(dir.path / "m.ckpt"), ConfigError);
}
