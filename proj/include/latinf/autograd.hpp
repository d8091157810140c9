#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "latinf/tensor.hpp"

// Reverse-mode differentiation over a dynamic graph of Vars.
// Each op records its inputs and a closure that maps the output gradient
// to input gradients; backward() walks the graph in reverse topological order.
namespace latinf::ag {

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  // Direct write access for optimizers and weight loading; never call on a
  // Var that is part of a live graph.
  Tensor& mutable_value();
  const Shape& shape() const { return value().shape(); }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Gradient accumulated by backward(); zeros of value's shape if none yet.
  const Tensor& grad() const;
  void zero_grad();

  // Seeds d(self)/d(self) = 1; self must hold a single element.
  void backward() const;
  // Seeds with an explicit upstream gradient of value's shape.
  void backward(const Tensor& seed) const;

  Var detach() const { return Var(value(), false); }

  Node* node() const { return node_.get(); }

 private:
  friend Var make_op(Tensor, std::vector<Var>, std::function<void(const Tensor&)>);
  std::shared_ptr<Node> node_;
};

// Disables graph construction in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an op result. backward receives the output gradient and must call
// accumulate() on the inputs that require gradients.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward);
void accumulate(const Var& v, const Tensor& g);

// ---- elementwise --------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var identity(const Var& a);

// ---- reductions ---------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);

// ---- shape ---------------------------------------------------------------
Var reshape(const Var& a, Shape shape);
Var concat_channels(const Var& a, const Var& b);

// ---- dense / conv --------------------------------------------------------
// x [B, in], weight [out, in], bias [out] (may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias);
// x [B, C, H, W], weight [O, C, k, k], bias [O] (may be undefined).
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
Var avg_pool2d(const Var& x, int kernel);
Var upsample_nearest(const Var& x, int factor);
Var global_avg_pool(const Var& x);
// x [B, C, H, W] + v [B, C] broadcast over spatial positions.
Var add_channel_vector(const Var& x, const Var& v);
// (x - mean[c]) / stddev[c]
Var normalize_channels(const Var& x, std::span<const double> mean, std::span<const double> stddev);
// x * scale[c] + shift[c] with constant per-channel coefficients.
Var channel_affine(const Var& x, std::vector<double> scale, std::vector<double> shift);
// Max over kernel x kernel windows; padded cells never win.
Var max_pool2d(const Var& x, int kernel, int stride, int padding);

// ---- adversarial / losses -----------------------------------------------
// clamp01(min(anchor + eps, max(raw, anchor - eps))); gradient flows to raw
// only where no bound is active. anchor is a constant.
Var clip_to_budget(const Var& raw, const Tensor& anchor, double eps);
// Per-row 1 - <a,b> / (max(|a|,floor) * max(|b|,floor)); a, b are [B, D].
// floor_hits (optional) receives the number of norms that hit the floor.
Var row_cosine_distance(const Var& a, const Var& b, double norm_floor, int* floor_hits = nullptr);
// Per-row softmax cross-entropy of logits [B, K] against labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);
// logits[b, labels[b]] -> [B]
Var gather_rows(const Var& logits, std::span<const int> labels);

}  // namespace latinf::ag
