#include "latinf/generator.hpp"

#include <algorithm>
#include <cmath>

#include "latinf/errors.hpp"

namespace latinf {

using nlohmann::json;

namespace {
constexpr double kLogitClamp = 1e-3;
constexpr double kHeadGain = 0.1;
}  // namespace

std::string to_string(OutputMapping m) {
  switch (m) {
    case OutputMapping::kResidualSigmoid: return "residual-sigmoid";
    case OutputMapping::kTanh: return "tanh";
    case OutputMapping::kBoundedResidual: return "bounded-residual";
  }
  return "residual-sigmoid";
}

OutputMapping parse_output_mapping(const std::string& s) {
  if (s == "residual-sigmoid") return OutputMapping::kResidualSigmoid;
  if (s == "tanh") return OutputMapping::kTanh;
  if (s == "bounded-residual") return OutputMapping::kBoundedResidual;
  throw ConfigError("unknown output mapping '" + s + "'");
}

void GeneratorConfig::validate() const {
  if (!(epsilon > 0)) throw ConfigError("generator epsilon must be positive");
  if (injection_dim <= 0) throw ConfigError("injection_dim must be positive");
  if (depth < 1) throw ConfigError("generator depth must be at least 1");
  if (base_width <= 0 || feature_dim <= 0 || image_channels <= 0)
    throw ConfigError("generator widths must be positive");
}

json GeneratorConfig::to_json() const {
  return {{"image_channels", image_channels},
          {"base_width", base_width},
          {"depth", depth},
          {"injection_dim", injection_dim},
          {"feature_dim", feature_dim},
          {"epsilon", epsilon},
          {"output_mapping", to_string(output_mapping)},
          {"injection_activation", nn::to_string(injection_activation)},
          {"init_seed", init_seed}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c;
  try {
    c.image_channels = j.value("image_channels", c.image_channels);
    c.base_width = j.value("base_width", c.base_width);
    c.depth = j.value("depth", c.depth);
    c.injection_dim = j.value("injection_dim", c.injection_dim);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.output_mapping = parse_output_mapping(j.value("output_mapping", to_string(c.output_mapping)));
    c.injection_activation = nn::parse_activation(j.value("injection_activation", std::string("gelu")));
    c.init_seed = j.value("init_seed", c.init_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid generator config: ") + e.what());
  }
  c.validate();
  return c;
}

Generator::Generator(GeneratorConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.init_seed);
  const auto& c = config_;
  ftm1_ = nn::make_linear(params_, "ftm.0", c.feature_dim, c.injection_dim, rng);
  ftm2_ = nn::make_linear(params_, "ftm.2", c.injection_dim, c.injection_dim, rng);
  stem_ = nn::make_conv(params_, "stem", c.image_channels, c.base_width, 3, rng);

  auto width_at = [&](int level) { return c.base_width << level; };
  auto make_block = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    ResBlock b;
    b.conv1 = nn::make_conv(params_, name + ".conv1", in, out, 3, rng);
    b.dmm = nn::make_linear(params_, name + ".dmm", c.injection_dim, out, rng);
    b.conv2 = nn::make_conv(params_, name + ".conv2", out, out, 3, rng);
    if (in != out) {
      b.skip = nn::make_conv(params_, name + ".skip", in, out, 1, rng);
      b.has_skip = true;
    }
    blocks_.push_back(std::move(b));
  };
  std::int64_t ch = c.base_width;
  for (int l = 0; l < c.depth; ++l) {
    make_block("down" + std::to_string(l), ch, width_at(l));
    ch = width_at(l);
  }
  make_block("mid", ch, ch);
  for (int l = c.depth - 1; l >= 0; --l) {
    make_block("up" + std::to_string(l), ch + width_at(l), width_at(l));
    ch = width_at(l);
  }
  head_ = nn::make_conv(params_, "head", ch, c.image_channels, 3, rng, kHeadGain);
}

std::int64_t Generator::block_width(std::size_t block) const {
  LATINF_EXPECT(block < blocks_.size(), "block index " + std::to_string(block) + " out of range (" +
                                            std::to_string(blocks_.size()) + " blocks)");
  return blocks_[block].conv1.out_channels();
}

ag::Var Generator::ftm(const ag::Var& f) const {
  LATINF_EXPECT(f.value().rank() == 2 && f.shape()[1] == config_.feature_dim,
                "target features must be [B, " + std::to_string(config_.feature_dim) + "], got " + shape_str(f.shape()));
  return ftm2_(nn::activate(ftm1_(f), config_.injection_activation));
}

ag::Var Generator::dmm_preactivation(std::size_t block, const ag::Var& e) const {
  LATINF_EXPECT(block < blocks_.size(), "block index " + std::to_string(block) + " out of range (" +
                                            std::to_string(blocks_.size()) + " blocks)");
  LATINF_EXPECT(e.value().rank() == 2 && e.shape()[1] == config_.injection_dim,
                "injection embedding must be [B, " + std::to_string(config_.injection_dim) + "]");
  return blocks_[block].dmm(e);
}

ag::Var Generator::dmm(std::size_t block, const ag::Var& e) const {
  return nn::activate(dmm_preactivation(block, e), config_.injection_activation);
}

ag::Var Generator::run_block(const ResBlock& b, const ag::Var& x, const ag::Var& e) const {
  ag::Var h = b.conv1(ag::gelu(x));
  h = ag::add_channel_vector(h, nn::activate(b.dmm(e), config_.injection_activation));
  h = b.conv2(ag::gelu(h));
  return ag::add(b.has_skip ? b.skip(x) : x, h);
}

void Generator::check_inputs(const Shape& s, const Shape& f) const {
  LATINF_EXPECT(s.size() == 4 && s[1] == config_.image_channels,
                "source batch must be [B, " + std::to_string(config_.image_channels) + ", H, W], got " + shape_str(s));
  const std::int64_t m = std::int64_t{1} << config_.depth;
  LATINF_EXPECT(s[2] % m == 0 && s[3] % m == 0,
                "image size " + shape_str(s) + " must be divisible by " + std::to_string(m) + " for depth " +
                    std::to_string(config_.depth));
  LATINF_EXPECT(f.size() == 2 && f[0] == s[0] && f[1] == config_.feature_dim,
                "target features " + shape_str(f) + " do not pair with source batch " + shape_str(s));
}

ag::Var Generator::generate_raw(const ag::Var& source, const ag::Var& target_features) const {
  check_inputs(source.shape(), target_features.shape());
  const auto& s = source.shape();
  if (s[0] == 0) return ag::Var(Tensor(s));

  const ag::Var e = ftm(target_features);
  ag::Var h = stem_(source);
  std::vector<ag::Var> skips;
  std::size_t bi = 0;
  for (int l = 0; l < config_.depth; ++l) {
    h = run_block(blocks_[bi++], h, e);
    skips.push_back(h);
    h = ag::avg_pool2d(h, 2);
  }
  h = run_block(blocks_[bi++], h, e);
  for (int l = config_.depth - 1; l >= 0; --l) {
    h = ag::upsample_nearest(h, 2);
    h = ag::concat_channels(h, skips[static_cast<std::size_t>(l)]);
    h = run_block(blocks_[bi++], h, e);
  }
  ag::Var d = head_(ag::gelu(h));

  if (config_.output_mapping == OutputMapping::kTanh) return ag::scale(ag::add_scalar(ag::tanh(d), 1.0), 0.5);
  if (config_.output_mapping == OutputMapping::kBoundedResidual) {
    const ag::Var shifted = ag::add(ag::Var(source.value()), ag::scale(ag::tanh(d), config_.epsilon));
    return ag::clip_to_budget(shifted, source.value(), config_.epsilon);
  }
  Tensor base(s);
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    const double p = std::clamp(source.value()[i], kLogitClamp, 1.0 - kLogitClamp);
    base[i] = std::log(p / (1.0 - p));
  }
  return ag::sigmoid(ag::add(ag::Var(std::move(base)), d));
}

ag::Var Generator::craft(const ag::Var& source, const ag::Var& target_features) const {
  return ag::clip_to_budget(generate_raw(source, target_features), source.value(), config_.epsilon);
}

Tensor ftm_transform(const Generator& g, const Tensor& f) {
  ag::NoGradGuard guard;
  return g.ftm(ag::Var(f)).value();
}

Tensor dmm_project(const Generator& g, std::size_t block, const Tensor& e) {
  ag::NoGradGuard guard;
  return g.dmm(block, ag::Var(e)).value();
}

ImageBatch generate_raw(const Generator& g, const ImageBatch& source, const Tensor& f) {
  ag::NoGradGuard guard;
  return ImageBatch(g.generate_raw(ag::Var(source.tensor()), ag::Var(f)).value());
}

ImageBatch clip_to_budget(const ImageBatch& raw, const ImageBatch& source, double eps) {
  ag::NoGradGuard guard;
  return ImageBatch(ag::clip_to_budget(ag::Var(raw.tensor()), source.tensor(), eps).value());
}

ImageBatch craft(const Generator& g, const ImageBatch& source, const Tensor& f) {
  ag::NoGradGuard guard;
  return ImageBatch(g.craft(ag::Var(source.tensor()), ag::Var(f)).value());
}

}  // namespace latinf
