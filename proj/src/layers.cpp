#include "latinf/layers.hpp"

#include <cmath>

#include "latinf/errors.hpp"

namespace latinf::nn {

ag::Var ParamSet::add(std::string name, Tensor init) {
  for (const auto& p : params_) LATINF_EXPECT(p.name != name, "duplicate parameter name " + name);
  params_.push_back({std::move(name), ag::Var(std::move(init), true)});
  return params_.back().var;
}

std::int64_t ParamSet::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.var.value().numel();
  return n;
}

const ag::Var& ParamSet::at(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.var;
  throw ContractError("no parameter named " + name);
}

void ParamSet::set_trainable(bool on) {
  for (auto& p : params_) p.var.set_requires_grad(on);
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  if (name == "identity") return Activation::kIdentity;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

ag::Var activate(const ag::Var& x, Activation a) {
  switch (a) {
    case Activation::kRelu: return ag::relu(x);
    case Activation::kGelu: return ag::gelu(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

namespace {
Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}
}  // namespace

Linear make_linear(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
                   double gain) {
  LATINF_EXPECT(in > 0 && out > 0, "linear layer dimensions must be positive");
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(in));
  Linear l;
  l.weight = params.add(name + ".weight", uniform_tensor({out, in}, bound, rng));
  l.bias = params.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

Conv2d make_conv(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, int kernel, Rng& rng,
                 double gain, int stride) {
  LATINF_EXPECT(in > 0 && out > 0 && kernel > 0, "conv layer dimensions must be positive");
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(in * kernel * kernel));
  Conv2d c;
  c.weight = params.add(name + ".weight", uniform_tensor({out, in, kernel, kernel}, bound, rng));
  c.bias = params.add(name + ".bias", Tensor::zeros({out}));
  c.stride = stride;
  c.padding = kernel / 2;
  return c;
}

}  // namespace latinf::nn
