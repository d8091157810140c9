#pragma once

#include <string>
#include <vector>

#include "latinf/autograd.hpp"
#include "latinf/rng.hpp"

namespace latinf::nn {

struct NamedParam {
  std::string name;
  ag::Var var;
};

// Ordered, named parameter collection. Order is the serialization order.
class ParamSet {
 public:
  ag::Var add(std::string name, Tensor init);

  std::vector<NamedParam>& items() { return params_; }
  const std::vector<NamedParam>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::int64_t scalar_count() const;

  const ag::Var& at(const std::string& name) const;
  void set_trainable(bool on);
  void zero_grad();

 private:
  std::vector<NamedParam> params_;
};

enum class Activation { kRelu, kGelu, kIdentity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
ag::Var activate(const ag::Var& x, Activation a);

struct Linear {
  ag::Var weight;  // [out, in]
  ag::Var bias;    // [out]
  ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
  std::int64_t out_features() const { return weight.shape()[0]; }
};

struct Conv2d {
  ag::Var weight;  // [out, in, k, k]
  ag::Var bias;    // [out]
  int stride = 1;
  int padding = 0;
  ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, padding); }
  std::int64_t out_channels() const { return weight.shape()[0]; }
};

// Uniform init with bound gain * sqrt(3 / fan_in); biases start at zero.
Linear make_linear(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
                   double gain = 1.0);
Conv2d make_conv(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, int kernel, Rng& rng,
                 double gain = 1.0, int stride = 1);

}  // namespace latinf::nn
