#pragma once

#include <cstdint>

#include "latinf/layers.hpp"

namespace latinf::nn {

struct AdamWOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay. Moments live in ParamSets that mirror the
// optimized set, so they serialize with the same blob format.
class AdamW {
 public:
  AdamW(ParamSet& params, AdamWOptions options);

  // One update using the gradients currently held by the parameters.
  void step(double lr);
  std::int64_t step_count() const { return steps_; }
  void set_step_count(std::int64_t n) { steps_ = n; }

  ParamSet& first_moments() { return m_; }
  ParamSet& second_moments() { return v_; }
  const ParamSet& first_moments() const { return m_; }
  const ParamSet& second_moments() const { return v_; }
  const AdamWOptions& options() const { return options_; }

 private:
  ParamSet& params_;
  AdamWOptions options_;
  ParamSet m_, v_;
  std::int64_t steps_ = 0;
};

// Cosine decay from base_lr to 0 over total_steps.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

}  // namespace latinf::nn
