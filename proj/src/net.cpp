#include "brainage/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "brainage/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace brainage {

TaskSet TaskSet::parse(const std::string& label) {
  for (const auto& t : all()) {
    if (t.label() == label) return t;
  }
  throw ConfigError("unknown task set '" + label + "' (expected V, S+V, G+V or S+G+V)");
}

std::string TaskSet::label() const {
  std::string s;
  if (segmentation) s += "S+";
  if (global_age) s += "G+";
  s += "V";
  return s;
}

void TaskSet::validate() const {
  if (!voxel_age) throw ConfigError("voxel-level age is required in every task set");
}

void NetConfig::validate() const {
  task_set.validate();
  if (in_channels < 1 || base_channels < 1) throw ConfigError("channel counts must be >= 1");
  if (depth < 2) throw ConfigError("depth must be >= 2, got " + std::to_string(depth));
  if (depth > 8) throw ConfigError("depth must be <= 8");
  if (task_set.segmentation && seg_classes < 2) throw ConfigError("seg_classes must be >= 2");
  if (task_set.global_age && global_hidden < 1) throw ConfigError("global_hidden must be >= 1");
  if (!(age_scale > 0.0)) throw ConfigError("age_scale must be > 0");
  check_input(patch);
}

void NetConfig::check_input(const Dims3& dims) const {
  const int k = divisor();
  if (dims.x < k || dims.y < k || dims.z < k || dims.x % k != 0 || dims.y % k != 0 || dims.z % k != 0) {
    throw ConfigError("input dims " + to_string(dims) + " not divisible by 2^(depth-1) = " + std::to_string(k));
  }
}

json NetConfig::to_json() const {
  return json{{"in_channels", in_channels},
              {"base_channels", base_channels},
              {"depth", depth},
              {"task_set", task_set.label()},
              {"seg_classes", seg_classes},
              {"batch_norm", batch_norm},
              {"global_hidden", global_hidden},
              {"age_prior", age_prior},
              {"age_scale", age_scale},
              {"patch", {patch.x, patch.y, patch.z}}};
}

NetConfig NetConfig::from_json(const json& j) {
  NetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.task_set = TaskSet::parse(j.at("task_set").get<std::string>());
  c.seg_classes = j.at("seg_classes").get<int>();
  c.batch_norm = j.at("batch_norm").get<bool>();
  c.global_hidden = j.at("global_hidden").get<int>();
  c.age_prior = j.at("age_prior").get<double>();
  c.age_scale = j.at("age_scale").get<double>();
  const auto& p = j.at("patch");
  c.patch = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
  return c;
}

std::vector<Volume> MultitaskOutput::seg_probabilities() const {
  std::vector<Volume> probs = seg_logits;
  if (probs.empty()) return probs;
  const std::size_t n = probs.front().data.size();
  for (std::size_t i = 0; i < n; ++i) {
    float mx = -INFINITY;
    for (const auto& l : seg_logits) mx = std::max(mx, l.data[i]);
    double sum = 0.0;
    for (auto& p : probs) {
      p.data[i] = std::exp(p.data[i] - mx);
      sum += p.data[i];
    }
    for (auto& p : probs) p.data[i] = static_cast<float>(p.data[i] / sum);
  }
  return probs;
}

LabelVolume MultitaskOutput::seg_labels() const {
  if (seg_logits.empty()) throw CapabilityError("model has no segmentation head");
  Grid<std::uint8_t> g(seg_logits.front().dims());
  std::map<int, std::string> names;
  for (std::size_t c = 0; c < seg_logits.size(); ++c) names[static_cast<int>(c)] = "class" + std::to_string(c);
  if (seg_logits.size() == 4) names = default_tissue_map();
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < seg_logits.size(); ++c) {
      if (seg_logits[c].data[i] > seg_logits[best].data[i]) best = c;
    }
    g[i] = static_cast<std::uint8_t>(best);
  }
  return LabelVolume(std::move(g), std::move(names));
}

std::vector<Param*> Model::params() {
  std::vector<Param*> p;
  std::vector<Buffer> b;
  collect(p, b);
  return p;
}

std::vector<Buffer> Model::buffers() {
  std::vector<Param*> p;
  std::vector<Buffer> b;
  collect(p, b);
  return b;
}

void Model::zero_grad() {
  for (auto* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto* p : params()) n += p->value.size();
  return n;
}

std::uint64_t Model::checksum() {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto* p : params()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->value.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

MultitaskUNet::MultitaskUNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int L = cfg_.depth;
  std::vector<int> ch(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) ch[static_cast<std::size_t>(l)] = cfg_.base_channels << l;
  int cin = cfg_.in_channels;
  for (int l = 0; l < L; ++l) {
    const int c = ch[static_cast<std::size_t>(l)];
    auto enc = std::make_unique<Sequential>();
    const std::string name = "enc" + std::to_string(l);
    enc->add(conv_block(name + ".0", cin, c, cfg_.batch_norm, rng));
    enc->add(conv_block(name + ".1", c, c, cfg_.batch_norm, rng));
    encoders_.push_back(std::move(enc));
    if (l < L - 1) {
      pools_.push_back(std::make_unique<MaxPool3d>());
      skip_channels_.push_back(c);
    }
    cin = c;
  }
  for (int l = 0; l < L - 1; ++l) {
    const int c = ch[static_cast<std::size_t>(l)];
    const int below = ch[static_cast<std::size_t>(l + 1)];
    ups_.push_back(std::make_unique<Upsample>());
    auto dec = std::make_unique<Sequential>();
    const std::string name = "dec" + std::to_string(l);
    dec->add(conv_block(name + ".0", c + below, c, cfg_.batch_norm, rng));
    dec->add(conv_block(name + ".1", c, c, cfg_.batch_norm, rng));
    decoders_.push_back(std::move(dec));
  }
  const int top = ch[0];
  voxel_head_ = std::make_unique<Conv3d>("head.voxel", top, 1, 1, rng);
  if (cfg_.task_set.segmentation) {
    seg_head_ = std::make_unique<Conv3d>("head.seg", top, cfg_.seg_classes, 1, rng);
  }
  if (cfg_.task_set.global_age) {
    const int bottom = ch[static_cast<std::size_t>(L - 1)];
    global_pool_ = std::make_unique<GlobalAvgPool>();
    global_head_ = std::make_unique<Sequential>();
    global_head_->add(std::make_unique<Linear>("head.global.0", bottom, cfg_.global_hidden, rng));
    global_head_->add(std::make_unique<ReLU>());
    auto out = std::make_unique<Linear>("head.global.1", cfg_.global_hidden, 1, rng);
    global_head_->add(std::move(out));
  }
}

namespace {
void to_years(Tensor& t, double prior, double scale) {
  const auto p = static_cast<float>(prior);
  const auto s = static_cast<float>(scale);
  for (auto& v : t.data()) v = p + s * v;
}

Tensor scaled(const Tensor& t, double scale) {
  Tensor out = t;
  const auto s = static_cast<float>(scale);
  for (auto& v : out.data()) v *= s;
  return out;
}
}  // namespace

HeadTensors MultitaskUNet::forward_batch(const Tensor& x, Mode mode) {
  const Shape s = x.shape();
  if (s.c != cfg_.in_channels) {
    throw ShapeError("model expects " + std::to_string(cfg_.in_channels) + " input channels, got " + to_string(s));
  }
  cfg_.check_input(s.dims());
  const int L = cfg_.depth;
  std::vector<Tensor> skips;
  Tensor h = x;
  for (int l = 0; l < L; ++l) {
    h = encoders_[static_cast<std::size_t>(l)]->forward(h, mode);
    if (l < L - 1) {
      skips.push_back(h);
      h = pools_[static_cast<std::size_t>(l)]->forward(h, mode);
    }
  }
  bottleneck_shape_ = h.shape();
  HeadTensors out;
  if (global_head_) {
    out.global = global_head_->forward(global_pool_->forward(h, mode), mode);
    to_years(out.global, cfg_.age_prior, cfg_.age_scale);
  }
  for (int l = L - 2; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    ups_[lu]->set_target(skips[lu].shape().dims());
    Tensor u = ups_[lu]->forward(h, mode);
    h = decoders_[lu]->forward(concat_channels(skips[lu], u), mode);
  }
  top_shape_ = h.shape();
  out.voxel = voxel_head_->forward(h, mode);
  to_years(out.voxel, cfg_.age_prior, cfg_.age_scale);
  if (seg_head_) out.seg = seg_head_->forward(h, mode);
  return out;
}

namespace {
void add_into(Tensor& a, const Tensor& b) {
  auto& x = a.data();
  const auto& y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}
}  // namespace

void MultitaskUNet::backward(const HeadTensors& grads) {
  const int L = cfg_.depth;
  Tensor g_top(top_shape_);
  if (grads.voxel.numel() > 0) {
    add_into(g_top, voxel_head_->backward(scaled(grads.voxel, cfg_.age_scale)));
  } else {
    voxel_head_->backward(Tensor(Shape{top_shape_.n, 1, top_shape_.d, top_shape_.h, top_shape_.w}));
  }
  if (seg_head_ && grads.seg.numel() > 0) add_into(g_top, seg_head_->backward(grads.seg));

  std::vector<Tensor> g_skip(static_cast<std::size_t>(L - 1));
  Tensor g = g_top;
  for (int l = 0; l < L - 1; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    Tensor g_cat = decoders_[lu]->backward(g);
    Tensor g_up;
    split_channels(g_cat, skip_channels_[lu], g_skip[lu], g_up);
    g = ups_[lu]->backward(g_up);
  }
  if (global_head_ && grads.global.numel() > 0) {
    add_into(g, global_pool_->backward(global_head_->backward(scaled(grads.global, cfg_.age_scale))));
  }
  for (int l = L - 1; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    if (l < L - 1) {
      g = pools_[lu]->backward(g);
      add_into(g, g_skip[lu]);
    }
    g = encoders_[lu]->backward(g);
  }
}

std::vector<MultitaskOutput> MultitaskUNet::forward(const std::vector<const Volume*>& inputs, Mode mode) {
  const Tensor x = stack_volumes(inputs);
  const HeadTensors h = forward_batch(x, mode);
  std::vector<MultitaskOutput> outs;
  for (int n = 0; n < x.shape().n; ++n) {
    const Spacing sp = inputs[static_cast<std::size_t>(n)]->spacing;
    MultitaskOutput o;
    o.voxel_age = channel_volume(h.voxel, n, 0, sp);
    if (h.global.numel() > 0) o.global_age = *h.global.channel(n, 0);
    for (int c = 0; c < h.seg.shape().c && h.seg.numel() > 0; ++c) o.seg_logits.push_back(channel_volume(h.seg, n, c, sp));
    outs.push_back(std::move(o));
  }
  return outs;
}

void MultitaskUNet::collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) {
  for (auto& e : encoders_) e->collect(params, buffers);
  for (auto& d : decoders_) d->collect(params, buffers);
  voxel_head_->collect(params, buffers);
  if (seg_head_) seg_head_->collect(params, buffers);
  if (global_head_) global_head_->collect(params, buffers);
}

std::unique_ptr<MultitaskUNet> build_model(const NetConfig& cfg, std::uint64_t seed) {
  return std::make_unique<MultitaskUNet>(cfg, seed);
}

void RegressorConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (channels.size() < 2) throw ConfigError("regressor needs at least two conv blocks");
  for (int c : channels) {
    if (c < 1) throw ConfigError("regressor channel counts must be >= 1");
  }
  if (!(age_scale > 0.0)) throw ConfigError("age_scale must be > 0");
}

void RegressorConfig::check_input(const Dims3& dims) const {
  const int k = divisor();
  if (dims.x % k != 0 || dims.y % k != 0 || dims.z % k != 0) {
    throw ConfigError("input dims " + to_string(dims) + " not divisible by " + std::to_string(k));
  }
}

json RegressorConfig::to_json() const {
  return json{{"in_channels", in_channels}, {"channels", channels}, {"batch_norm", batch_norm}, {"age_prior", age_prior},
              {"age_scale", age_scale}};
}

RegressorConfig RegressorConfig::from_json(const json& j) {
  RegressorConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.batch_norm = j.at("batch_norm").get<bool>();
  c.age_prior = j.at("age_prior").get<double>();
  c.age_scale = j.at("age_scale").get<double>();
  return c;
}

GlobalRegressor::GlobalRegressor(const RegressorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  extractor_ = std::make_unique<Sequential>();
  int cin = cfg_.in_channels;
  const std::size_t last = cfg_.channels.size() - 1;
  for (std::size_t i = 0; i < last; ++i) {
    const std::string name = "block" + std::to_string(i);
    const int c = cfg_.channels[i];
    extractor_->add(std::make_unique<Conv3d>(name + ".conv", cin, c, 3, rng, !cfg_.batch_norm));
    if (cfg_.batch_norm) extractor_->add(std::make_unique<BatchNorm3d>(name + ".bn", c));
    extractor_->add(std::make_unique<MaxPool3d>());
    extractor_->add(std::make_unique<ReLU>());
    cin = c;
  }
  extractor_->add(conv_block("block" + std::to_string(last), cin, cfg_.channels[last], cfg_.batch_norm, rng, 1));
  pool_ = std::make_unique<GlobalAvgPool>();
  head_ = std::make_unique<Linear>("head", cfg_.channels[last], 1, rng);
}

Tensor GlobalRegressor::forward_batch(const Tensor& x, Mode mode) {
  if (x.shape().c != cfg_.in_channels) throw ShapeError("regressor input channel mismatch " + to_string(x.shape()));
  cfg_.check_input(x.shape().dims());
  features_ = extractor_->forward(x, mode);
  Tensor y = head_->forward(pool_->forward(features_, mode), mode);
  to_years(y, cfg_.age_prior, cfg_.age_scale);
  return y;
}

Tensor GlobalRegressor::backward(const Tensor& grad_out) {
  feature_grad_ = pool_->backward(head_->backward(scaled(grad_out, cfg_.age_scale)));
  return extractor_->backward(feature_grad_);
}

void GlobalRegressor::collect(std::vector<Param*>& params, std::vector<Buffer>& buffers) {
  extractor_->collect(params, buffers);
  head_->collect(params, buffers);
}

std::unique_ptr<GlobalRegressor> build_global_regressor(const RegressorConfig& cfg, std::uint64_t seed) {
  return std::make_unique<GlobalRegressor>(cfg, seed);
}

namespace {

constexpr char kMagic[8] = {'B', 'A', 'G', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& name) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IngestError("checkpoint '" + name + "' is truncated");
  return v;
}

json header_json(const CheckpointHeader& h) {
  return json{{"kind", h.kind}, {"config", h.config}, {"epoch", h.epoch}, {"extra", h.extra}};
}

struct RawCheckpoint {
  CheckpointHeader header;
  std::vector<std::pair<std::string, std::vector<float>>> tensors;
};

RawCheckpoint read_raw(const fs::path& path, bool with_tensors) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open checkpoint '" + name + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IngestError("'" + name + "' is not a checkpoint");
  const auto version = get<std::uint32_t>(in, name);
  if (version != kVersion) {
    throw IngestError("checkpoint '" + name + "' has version " + std::to_string(version) + ", expected " +
                      std::to_string(kVersion));
  }
  const auto len = get<std::uint64_t>(in, name);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IngestError("checkpoint '" + name + "' is truncated");
  RawCheckpoint raw;
  const json j = json::parse(text);
  raw.header.kind = j.at("kind").get<std::string>();
  raw.header.config = j.at("config");
  raw.header.epoch = j.at("epoch").get<int>();
  raw.header.extra = j.at("extra");
  if (!with_tensors) return raw;
  const auto count = get<std::uint32_t>(in, name);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto nlen = get<std::uint32_t>(in, name);
    std::string tname(nlen, '\0');
    in.read(tname.data(), nlen);
    const auto n = get<std::uint64_t>(in, name);
    std::vector<float> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw IngestError("checkpoint '" + name + "' is truncated");
    raw.tensors.emplace_back(std::move(tname), std::move(values));
  }
  return raw;
}

}  // namespace

void save_checkpoint(const fs::path& path, Model& model, const CheckpointHeader& header) {
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(kMagic, 8);
    put(out, kVersion);
    const std::string text = header_json(header).dump();
    put(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<std::pair<std::string, const std::vector<float>*>> tensors;
    for (auto* p : model.params()) tensors.emplace_back(p->name, &p->value);
    for (const auto& b : model.buffers()) tensors.emplace_back(b.name, b.values);
    put(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, values] : tensors) {
      put(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put(out, static_cast<std::uint64_t>(values->size()));
      out.write(reinterpret_cast<const char*>(values->data()), static_cast<std::streamsize>(values->size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for checkpoint '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

CheckpointHeader read_checkpoint_header(const fs::path& path) { return read_raw(path, false).header; }

void load_checkpoint(const fs::path& path, Model& model, const CheckpointHeader& expected) {
  RawCheckpoint raw = read_raw(path, true);
  if (raw.header.kind != expected.kind) {
    throw ConfigError("checkpoint '" + path.string() + "' holds a " + raw.header.kind + " model, expected " + expected.kind);
  }
  if (raw.header.config != expected.config) {
    throw ConfigError("checkpoint '" + path.string() + "' config mismatch: stored " + raw.header.config.dump() +
                      ", expected " + expected.config.dump());
  }
  std::vector<std::pair<std::string, std::vector<float>*>> targets;
  for (auto* p : model.params()) targets.emplace_back(p->name, &p->value);
  for (const auto& b : model.buffers()) targets.emplace_back(b.name, b.values);
  if (targets.size() != raw.tensors.size()) throw ConfigError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i].first != raw.tensors[i].first || targets[i].second->size() != raw.tensors[i].second.size()) {
      throw ConfigError("checkpoint tensor '" + raw.tensors[i].first + "' does not match model tensor '" +
                        targets[i].first + "'");
    }
    *targets[i].second = raw.tensors[i].second;
  }
}

std::unique_ptr<MultitaskUNet> load_multitask(const fs::path& path, CheckpointHeader* header) {
  CheckpointHeader h = read_checkpoint_header(path);
  if (h.kind != "multitask") throw ConfigError("checkpoint '" + path.string() + "' is not a multitask model");
  auto model = build_model(NetConfig::from_json(h.config), 0);
  load_checkpoint(path, *model, h);
  if (header != nullptr) *header = h;
  return model;
}

std::unique_ptr<GlobalRegressor> load_regressor(const fs::path& path, CheckpointHeader* header) {
  CheckpointHeader h = read_checkpoint_header(path);
  if (h.kind != "regressor") throw ConfigError("checkpoint '" + path.string() + "' is not a regressor model");
  auto model = build_global_regressor(RegressorConfig::from_json(h.config), 0);
  load_checkpoint(path, *model, h);
  if (header != nullptr) *header = h;
  return model;
}

}  // namespace brainage
