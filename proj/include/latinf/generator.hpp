#pragma once

#include <nlohmann/json.hpp>
#include <vector>

#include "latinf/autograd.hpp"
#include "latinf/image_io.hpp"
#include "latinf/layers.hpp"

namespace latinf {

// How decoder output becomes an image before budget clipping.
//   residual-sigmoid: sigmoid(logit(x_s) + decoder)   (starts near x_s)
//   tanh:             (tanh(decoder) + 1) / 2
//   bounded-residual: x_s + eps * tanh(decoder), clamped to [0, 1]  (never
//                     leaves the budget band, so clipping keeps its gradient)
enum class OutputMapping { kResidualSigmoid, kTanh, kBoundedResidual };

std::string to_string(OutputMapping m);
OutputMapping parse_output_mapping(const std::string& s);

struct GeneratorConfig {
  std::int64_t image_channels = 3;
  std::int64_t base_width = 64;
  int depth = 3;
  std::int64_t injection_dim = 256;
  std::int64_t feature_dim = 2048;
  // Budget in unit-interval pixel units (16/255 for the usual setting).
  double epsilon = 16.0 / 255.0;
  OutputMapping output_mapping = OutputMapping::kBoundedResidual;
  // Nonlinearity inside FTM and DMM. identity is only for wiring probes.
  nn::Activation injection_activation = nn::Activation::kGelu;
  std::uint64_t init_seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

// Target-conditioned UNet. The target feature vector passes through a shared
// feature transform (Linear-act-Linear) and then one dimension-matching map
// (Linear-act) per residual block, whose output is added to that block's
// feature map after its first convolution, broadcast over space.
class Generator {
 public:
  explicit Generator(GeneratorConfig config);
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const GeneratorConfig& config() const { return config_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  // Residual blocks in forward order: encoder levels, bottleneck, decoder levels.
  std::size_t num_blocks() const { return blocks_.size(); }
  std::int64_t block_width(std::size_t block) const;

  ag::Var ftm(const ag::Var& target_features) const;
  ag::Var dmm(std::size_t block, const ag::Var& embedding) const;
  // DMM affine output before its activation.
  ag::Var dmm_preactivation(std::size_t block, const ag::Var& embedding) const;

  // Bounded generator output G(x_s, f_t) in [0, 1], before budget clipping.
  ag::Var generate_raw(const ag::Var& source, const ag::Var& target_features) const;
  // clip_to_budget(generate_raw(...), source, epsilon).
  ag::Var craft(const ag::Var& source, const ag::Var& target_features) const;

 private:
  struct ResBlock {
    nn::Conv2d conv1, conv2, skip;
    bool has_skip = false;
    nn::Linear dmm;
  };
  ag::Var run_block(const ResBlock& b, const ag::Var& x, const ag::Var& embedding) const;
  void check_inputs(const Shape& source, const Shape& features) const;

  GeneratorConfig config_;
  nn::ParamSet params_;
  nn::Linear ftm1_, ftm2_;
  nn::Conv2d stem_, head_;
  std::vector<ResBlock> blocks_;
};

// Tensor-level conveniences (no graph is recorded).
Tensor ftm_transform(const Generator& g, const Tensor& target_features);
Tensor dmm_project(const Generator& g, std::size_t block, const Tensor& embedding);
ImageBatch generate_raw(const Generator& g, const ImageBatch& source, const Tensor& target_features);
// min(x_s + eps, max(raw, x_s - eps)) clamped to [0, 1].
ImageBatch clip_to_budget(const ImageBatch& raw, const ImageBatch& source, double eps);
ImageBatch craft(const Generator& g, const ImageBatch& source, const Tensor& target_features);

}  // namespace latinf
