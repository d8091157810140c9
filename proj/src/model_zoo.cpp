#include "latinf/model_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "latinf/errors.hpp"
#include "latinf/serialize.hpp"

namespace latinf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// conv -> act -> pool, three stages, global average pool, linear head.
class SmallCnn final : public Network {
 public:
  SmallCnn(std::vector<std::int64_t> widths, nn::Activation act, std::int64_t labels, std::int64_t in_channels,
           std::uint64_t seed)
      : widths_(std::move(widths)), act_(act), labels_(labels), in_channels_(in_channels) {
    LATINF_EXPECT(widths_.size() == 3, "smallcnn needs exactly three stage widths");
    Rng rng(seed);
    const double gain = act_ == nn::Activation::kRelu ? std::sqrt(2.0) : 1.0;
    std::int64_t in = in_channels_;
    for (std::size_t i = 0; i < widths_.size(); ++i) {
      convs_.push_back(nn::make_conv(params_, "conv" + std::to_string(i + 1), in, widths_[i], 3, rng, gain));
      in = widths_[i];
    }
    fc_ = nn::make_linear(params_, "fc", in, labels_, rng);
  }

  ag::Var features(const ag::Var& x) const override {
    ag::Var h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = nn::activate(convs_[i](h), act_);
      if (i + 1 < convs_.size()) h = ag::avg_pool2d(h, 2);
    }
    return ag::global_avg_pool(h);
  }
  ag::Var head(const ag::Var& f) const override { return fc_(f); }
  std::int64_t feature_dim() const override { return widths_.back(); }
  std::int64_t num_labels() const override { return labels_; }
  std::string arch() const override { return "smallcnn"; }
  json arch_params() const override {
    return {{"widths", widths_}, {"activation", nn::to_string(act_)}, {"num_labels", labels_},
            {"in_channels", in_channels_}};
  }

 private:
  std::vector<std::int64_t> widths_;
  nn::Activation act_;
  std::int64_t labels_, in_channels_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear fc_;
};

// Inference-mode batch norm: stored statistics and affine, folded per call.
struct FrozenBatchNorm {
  ag::Var weight, bias, running_mean, running_var;

  static FrozenBatchNorm make(nn::ParamSet& p, const std::string& name, std::int64_t c) {
    FrozenBatchNorm bn;
    bn.weight = p.add(name + ".weight", Tensor({c}, 1.0));
    bn.bias = p.add(name + ".bias", Tensor::zeros({c}));
    bn.running_mean = p.add(name + ".running_mean", Tensor::zeros({c}));
    bn.running_var = p.add(name + ".running_var", Tensor({c}, 1.0));
    return bn;
  }
  ag::Var operator()(const ag::Var& x) const {
    const auto c = weight.value().numel();
    std::vector<double> scale(c), shift(c);
    for (std::int64_t i = 0; i < c; ++i) {
      scale[i] = weight.value()[i] / std::sqrt(running_var.value()[i] + 1e-5);
      shift[i] = bias.value()[i] - running_mean.value()[i] * scale[i];
    }
    return ag::channel_affine(x, std::move(scale), std::move(shift));
  }
};

nn::Conv2d conv_nobias(nn::ParamSet& p, const std::string& name, std::int64_t in, std::int64_t out, int k, int stride,
                       Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  Tensor w({out, in, k, k});
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  nn::Conv2d c;
  c.weight = p.add(name + ".weight", std::move(w));
  c.stride = stride;
  c.padding = k / 2;
  return c;
}

// ResNet with bottleneck blocks; parameter names follow the torchvision
// state-dict layout so exported weights load unchanged.
class ResNet final : public Network {
 public:
  ResNet(std::vector<std::int64_t> layers, std::int64_t width, std::int64_t labels, std::uint64_t seed)
      : layers_(std::move(layers)), width_(width), labels_(labels) {
    LATINF_EXPECT(layers_.size() == 4, "resnet needs four stage depths");
    Rng rng(seed);
    stem_ = conv_nobias(params_, "conv1", 3, width_, 7, 2, rng);
    stem_bn_ = FrozenBatchNorm::make(params_, "bn1", width_);
    std::int64_t in = width_;
    for (int s = 0; s < 4; ++s) {
      const std::int64_t planes = width_ << s;
      for (std::int64_t b = 0; b < layers_[s]; ++b) {
        const std::string n = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        Block blk;
        blk.conv1 = conv_nobias(params_, n + ".conv1", in, planes, 1, 1, rng);
        blk.bn1 = FrozenBatchNorm::make(params_, n + ".bn1", planes);
        blk.conv2 = conv_nobias(params_, n + ".conv2", planes, planes, 3, stride, rng);
        blk.bn2 = FrozenBatchNorm::make(params_, n + ".bn2", planes);
        blk.conv3 = conv_nobias(params_, n + ".conv3", planes, planes * 4, 1, 1, rng);
        blk.bn3 = FrozenBatchNorm::make(params_, n + ".bn3", planes * 4);
        if (b == 0) {
          blk.has_down = true;
          blk.down = conv_nobias(params_, n + ".downsample.0", in, planes * 4, 1, stride, rng);
          blk.down.padding = 0;
          blk.down_bn = FrozenBatchNorm::make(params_, n + ".downsample.1", planes * 4);
        }
        blocks_.push_back(std::move(blk));
        in = planes * 4;
      }
    }
    feature_dim_ = in;
    fc_ = nn::make_linear(params_, "fc", in, labels_, rng);
  }

  ag::Var features(const ag::Var& x) const override {
    ag::Var h = ag::relu(stem_bn_(stem_(x)));
    h = ag::max_pool2d(h, 3, 2, 1);
    for (const auto& b : blocks_) {
      ag::Var y = ag::relu(b.bn1(b.conv1(h)));
      y = ag::relu(b.bn2(b.conv2(y)));
      y = b.bn3(b.conv3(y));
      ag::Var skip = b.has_down ? b.down_bn(b.down(h)) : h;
      h = ag::relu(ag::add(y, skip));
    }
    return ag::global_avg_pool(h);
  }
  ag::Var head(const ag::Var& f) const override { return fc_(f); }
  std::int64_t feature_dim() const override { return feature_dim_; }
  std::int64_t num_labels() const override { return labels_; }
  std::string arch() const override { return "resnet"; }
  json arch_params() const override { return {{"layers", layers_}, {"width", width_}, {"num_labels", labels_}}; }

 private:
  struct Block {
    nn::Conv2d conv1, conv2, conv3, down;
    FrozenBatchNorm bn1, bn2, bn3, down_bn;
    bool has_down = false;
  };
  std::vector<std::int64_t> layers_;
  std::int64_t width_, labels_, feature_dim_ = 0;
  nn::Conv2d stem_;
  FrozenBatchNorm stem_bn_;
  std::vector<Block> blocks_;
  nn::Linear fc_;
};

void json_to_spec(const json& j, InputSpec& s) {
  const auto size = j.at("input_size").get<std::vector<std::int64_t>>();
  if (size.size() != 2) throw ConfigError("input_size must be [height, width]");
  s.height = size[0];
  s.width = size[1];
  s.channels = j.value("channels", std::int64_t{3});
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  if (static_cast<std::int64_t>(s.mean.size()) != s.channels ||
      static_cast<std::int64_t>(s.stddev.size()) != s.channels)
    throw ConfigError("normalization constants must have one entry per channel");
}

}  // namespace

std::unique_ptr<Network> build_network(const std::string& arch, const json& p, std::uint64_t init_seed) {
  try {
    if (arch == "smallcnn") {
      return std::make_unique<SmallCnn>(p.value("widths", std::vector<std::int64_t>{16, 32, 64}),
                                        nn::parse_activation(p.value("activation", std::string("relu"))),
                                        p.value("num_labels", std::int64_t{10}), p.value("in_channels", std::int64_t{3}),
                                        init_seed);
    }
    if (arch == "resnet") {
      return std::make_unique<ResNet>(p.value("layers", std::vector<std::int64_t>{3, 4, 6, 3}),
                                      p.value("width", std::int64_t{64}), p.value("num_labels", std::int64_t{1000}),
                                      init_seed);
    }
  } catch (const json::exception& e) {
    throw ConfigError("invalid parameters for architecture '" + arch + "': " + e.what());
  }
  throw RegistryError("unknown architecture '" + arch + "'");
}

std::string to_string(ModelRole role) { return role == ModelRole::kExtractor ? "extractor" : "victim"; }

ModelRole parse_role(const std::string& s) {
  if (s == "extractor") return ModelRole::kExtractor;
  if (s == "victim") return ModelRole::kVictim;
  throw ConfigError("unknown model role '" + s + "'");
}

std::vector<int> Logits::argmax() const {
  const std::int64_t n = values.dim(0), k = values.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const double* row = values.data() + r * k;
    // max_element returns the first maximum, i.e. the lowest index.
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

ModelHandle::ModelHandle(std::string id, ModelRole role, InputSpec spec, std::shared_ptr<Network> net)
    : id_(std::move(id)), role_(role), spec_(std::move(spec)), net_(std::move(net)) {
  LATINF_EXPECT(net_ != nullptr, "model handle needs a network");
  net_->params().set_trainable(false);
}

void ModelHandle::check_input(const Shape& s) const {
  LATINF_EXPECT(s.size() == 4 && s[1] == spec_.channels && s[2] == spec_.height && s[3] == spec_.width,
                "model '" + id_ + "' expects [B, " + std::to_string(spec_.channels) + ", " +
                    std::to_string(spec_.height) + ", " + std::to_string(spec_.width) + "], got " + shape_str(s));
}

ag::Var ModelHandle::normalize(const ag::Var& x) const {
  check_input(x.shape());
  return ag::normalize_channels(x, spec_.mean, spec_.stddev);
}

ag::Var ModelHandle::features(const ag::Var& x) const {
  if (x.shape().at(0) == 0) {
    check_input(x.shape());
    return ag::Var(Tensor({0, feature_dim()}));
  }
  return net_->features(normalize(x));
}

ag::Var ModelHandle::logits(const ag::Var& x) const {
  if (x.shape().at(0) == 0) {
    check_input(x.shape());
    return ag::Var(Tensor({0, num_labels()}));
  }
  return net_->head(net_->features(normalize(x)));
}

std::string ModelHandle::parameter_checksum() const { return params_checksum(net_->params()); }

Tensor extract_features(const ModelHandle& m, const ImageBatch& x) {
  LATINF_EXPECT(m.role() == ModelRole::kExtractor, "extract_features needs an extractor handle, '" + m.id() +
                                                        "' was loaded as victim");
  ag::NoGradGuard guard;
  return m.features(ag::Var(x.tensor())).value();
}

Logits classify(const ModelHandle& m, const ImageBatch& x) {
  ag::NoGradGuard guard;
  return Logits{m.logits(ag::Var(x.tensor())).value()};
}

std::vector<double> classification_loss(const ModelHandle& m, const ImageBatch& x, std::span<const int> labels) {
  LATINF_EXPECT(static_cast<std::int64_t>(labels.size()) == x.size(), "one label per image required");
  for (int l : labels)
    LATINF_EXPECT(l >= 0 && l < m.num_labels(), "label " + std::to_string(l) + " outside model '" + m.id() +
                                                    "' label space of size " + std::to_string(m.num_labels()));
  if (x.size() == 0) return {};
  ag::NoGradGuard guard;
  const Tensor ce = ag::cross_entropy(m.logits(ag::Var(x.tensor())), labels).value();
  return {ce.values().begin(), ce.values().end()};
}

std::vector<int> predict(const ModelHandle& m, const ImageBatch& x, std::int64_t chunk) {
  const auto& spec = m.input_spec();
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(x.size()));
  for (std::int64_t b = 0; b < x.size(); b += chunk) {
    ImageBatch part = x.slice(b, std::min(x.size(), b + chunk));
    if (part.height() != spec.height || part.width() != spec.width) {
      std::vector<Tensor> resized;
      for (std::int64_t i = 0; i < part.size(); ++i)
        resized.push_back(resize_bilinear(part.image(i), spec.height, spec.width));
      part = stack_images(resized);
    }
    const auto labels = classify(m, part).argmax();
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

// ---- registry ---------------------------------------------------------------

ModelRegistry ModelRegistry::load(const fs::path& file) {
  json j;
  try {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open model registry " + file.string());
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed model registry " + file.string() + ": " + e.what());
  }
  ModelRegistry reg(file.parent_path());
  try {
    for (const auto& m : j.at("models")) {
      RegistryEntry e;
      e.id = m.at("id").get<std::string>();
      e.arch = m.at("arch").get<std::string>();
      e.arch_params = m.value("arch_params", json::object());
      e.weights = m.at("weights").get<std::string>();
      e.sha256 = m.value("sha256", std::string());
      e.num_labels = m.at("num_labels").get<std::int64_t>();
      json_to_spec(m, e.input);
      reg.add(std::move(e));
    }
  } catch (const json::exception& e) {
    throw ConfigError("invalid model registry entry in " + file.string() + ": " + e.what());
  }
  return reg;
}

void ModelRegistry::save(const fs::path& file) const {
  json models = json::array();
  for (const auto& e : entries_) {
    models.push_back({{"id", e.id},
                      {"arch", e.arch},
                      {"arch_params", e.arch_params},
                      {"weights", e.weights},
                      {"sha256", e.sha256},
                      {"num_labels", e.num_labels},
                      {"channels", e.input.channels},
                      {"input_size", {e.input.height, e.input.width}},
                      {"mean", e.input.mean},
                      {"std", e.input.stddev}});
  }
  write_file_atomic(file, json{{"models", models}}.dump(2) + "\n");
}

void ModelRegistry::add(RegistryEntry entry) {
  if (entry.id.empty()) throw ConfigError("model id must not be empty");
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const RegistryEntry& e) { return e.id == entry.id; });
  if (it != entries_.end())
    *it = std::move(entry);
  else
    entries_.push_back(std::move(entry));
}

const RegistryEntry& ModelRegistry::entry(const std::string& id) const {
  for (const auto& e : entries_)
    if (e.id == id) return e;
  throw RegistryError("model '" + id + "' is not registered");
}

bool ModelRegistry::contains(const std::string& id) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const RegistryEntry& e) { return e.id == id; });
}

std::vector<std::string> ModelRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.id);
  return out;
}

fs::path ModelRegistry::weights_path(const RegistryEntry& e) const {
  fs::path p(e.weights);
  return p.is_absolute() ? p : base_dir_ / p;
}

ModelHandle ModelRegistry::load_model(const std::string& id, ModelRole role) const {
  const RegistryEntry& e = entry(id);
  const fs::path wp = weights_path(e);
  std::string blob;
  try {
    blob = read_file_bytes(wp);
  } catch (const DataError&) {
    throw RegistryError("weights for model '" + id + "' not found at " + wp.string());
  }
  if (!e.sha256.empty() && sha256_hex(blob) != e.sha256)
    throw IntegrityError("weights for model '" + id + "' do not match the recorded content hash");
  std::shared_ptr<Network> net = build_network(e.arch, e.arch_params, 0);
  if (net->num_labels() != e.num_labels)
    throw ConfigError("model '" + id + "' registry says " + std::to_string(e.num_labels) +
                      " labels, architecture has " + std::to_string(net->num_labels()));
  try {
    decode_params(blob, net->params());
  } catch (const ContractError& err) {
    throw IntegrityError("weights for model '" + id + "' do not fit architecture: " + err.what());
  }
  return ModelHandle(id, role, e.input, std::move(net));
}

RegistryEntry register_network(ModelRegistry& registry, const std::string& id, const Network& net,
                               const InputSpec& spec, const fs::path& weights_file) {
  const std::string blob = encode_params(net.params());
  const fs::path target = weights_file.is_absolute() ? weights_file : registry.base_dir() / weights_file;
  write_file_atomic(target, blob);
  RegistryEntry e;
  e.id = id;
  e.arch = net.arch();
  e.arch_params = net.arch_params();
  e.weights = weights_file.generic_string();
  e.sha256 = sha256_hex(blob);
  e.input = spec;
  e.num_labels = net.num_labels();
  registry.add(e);
  return e;
}

}  // namespace latinf
