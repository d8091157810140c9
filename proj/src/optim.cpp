#include "latinf/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace latinf::nn {

AdamW::AdamW(ParamSet& params, AdamWOptions options) : params_(params), options_(options) {
  for (const auto& p : params_.items()) {
    m_.add(p.name, Tensor::zeros(p.var.shape()));
    v_.add(p.name, Tensor::zeros(p.var.shape()));
  }
  m_.set_trainable(false);
  v_.set_trainable(false);
}

void AdamW::step(double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& var = items[i].var;
    if (!var.requires_grad() || !var.has_grad()) continue;
    const Tensor& g = var.grad();
    Tensor& w = var.mutable_value();
    Tensor& m = m_.items()[i].var.mutable_value();
    Tensor& v = v_.items()[i].var.mutable_value();
    for (std::int64_t k = 0; k < w.numel(); ++k) {
      w[k] -= lr * options_.weight_decay * w[k];
      m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * g[k];
      v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + options_.eps);
    }
  }
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace latinf::nn
