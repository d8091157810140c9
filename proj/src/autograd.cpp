#include "latinf/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "latinf/errors.hpp"

namespace latinf::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Tensor&)> backward;
};

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  LATINF_EXPECT(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                            " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t r, const char* op) {
  LATINF_EXPECT(a.value().rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                           shape_str(a.shape()));
}

template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return make_op(std::move(y), {a}, [a, df](const Tensor& g) {
    const Tensor& x = a.value();
    Tensor gx(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] = g[i] * df(x[i]);
    accumulate(a, gx);
  });
}

double gelu_fn(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
double sigmoid_fn(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConvGeometry {
  std::int64_t batch, in_c, in_h, in_w, out_c, k, out_h, out_w;
  int stride, pad;
  std::int64_t ckk() const { return in_c * k * k; }
  std::int64_t out_hw() const { return out_h * out_w; }
};

// col [C*k*k, out_h*out_w] for one image
void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::int64_t ohw = g.out_hw();
  for (std::int64_t c = 0; c < g.in_c; ++c) {
    const double* plane = img + c * g.in_h * g.in_w;
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        double* dst = col + ((c * g.k + ky) * g.k + kx) * ohw;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          double* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(row, row + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + iy * g.in_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            row[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* img) {
  const std::int64_t ohw = g.out_hw();
  for (std::int64_t c = 0; c < g.in_c; ++c) {
    double* plane = img + c * g.in_h * g.in_w;
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const double* src = col + ((c * g.k + ky) * g.k + kx) * ohw;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          double* dst = plane + iy * g.in_w;
          const double* row = src + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- Var ------------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  LATINF_EXPECT(node_, "undefined Var");
  return node_->value;
}

Tensor& Var::mutable_value() {
  LATINF_EXPECT(node_, "undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

void Var::set_requires_grad(bool on) {
  LATINF_EXPECT(node_ && !node_->backward, "requires_grad can only be set on leaf Vars");
  node_->requires_grad = on;
}

bool Var::has_grad() const { return node_ && !node_->grad.empty(); }

const Tensor& Var::grad() const {
  LATINF_EXPECT(node_, "undefined Var");
  if (node_->grad.shape() != node_->value.shape()) node_->grad = Tensor::zeros(node_->value.shape());
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

void Var::backward() const {
  LATINF_EXPECT(value().numel() == 1, "backward() without seed needs a single-element Var");
  backward(Tensor(value().shape(), 1.0));
}

void Var::backward(const Tensor& seed) const {
  LATINF_EXPECT(node_, "undefined Var");
  LATINF_EXPECT(seed.shape() == value().shape(), "seed shape mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS to get a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && child->backward && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  accumulate(*this, seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(n->grad);
    // Interior gradients are not needed once propagated.
    n->grad = Tensor();
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->backward = std::move(backward);
  for (auto& v : inputs)
    if (v.defined()) out.node_->inputs.push_back(v.node_);
  return out;
}

void accumulate(const Var& v, const Tensor& g) {
  if (!v.requires_grad()) return;
  Node* n = v.node();
  LATINF_EXPECT(g.shape() == n->value.shape(), "gradient shape mismatch " + shape_str(g.shape()) + " vs " +
                                                   shape_str(n->value.shape()));
  if (n->grad.empty() && n->value.numel() > 0) {
    n->grad = g;
    return;
  }
  if (n->grad.shape() != n->value.shape()) n->grad = Tensor::zeros(n->value.shape());
  for (std::int64_t i = 0; i < g.numel(); ++i) n->grad[i] += g[i];
}

// ---- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
  return make_op(std::move(y), {a, b}, [a, b](const Tensor& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return make_op(std::move(y), {a, b}, [a, b](const Tensor& g) {
    accumulate(a, g);
    if (b.requires_grad()) {
      Tensor n = g;
      for (auto& v : n.values()) v = -v;
      accumulate(b, n);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return make_op(std::move(y), {a, b}, [a, b](const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = g;
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] *= b.value()[i];
      accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = g;
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] *= a.value()[i];
      accumulate(b, gb);
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) { return unary(a, gelu_fn, gelu_grad); }

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_fn, [](double x) {
    const double s = sigmoid_fn(x);
    return s * (1.0 - s);
  });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double x) {
    const double t = std::tanh(x);
    return 1.0 - t * t;
  });
}

Var identity(const Var& a) { return a; }

// ---- reductions -------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op(Tensor::scalar(s), {a}, [a](const Tensor& g) { accumulate(a, Tensor(a.shape(), g[0])); });
}

Var mean(const Var& a) {
  const auto n = a.value().numel();
  LATINF_EXPECT(n > 0, "mean of empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op(Tensor::scalar(s / static_cast<double>(n)), {a}, [a, n](const Tensor& g) {
    accumulate(a, Tensor(a.shape(), g[0] / static_cast<double>(n)));
  });
}

// ---- shape ------------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_op(std::move(y), {a}, [a](const Tensor& g) { accumulate(a, g.reshaped(a.shape())); });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  LATINF_EXPECT(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat_channels: batch/spatial mismatch");
  const std::int64_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor y({n, ca + cb, sa[2], sa[3]});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw, y.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw, y.data() + i * (ca + cb) * hw + ca * hw);
  }
  return make_op(std::move(y), {a, b}, [a, b, n, ca, cb, hw](const Tensor& g) {
    Tensor ga(a.shape()), gb(b.shape());
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy_n(g.data() + i * (ca + cb) * hw, ca * hw, ga.data() + i * ca * hw);
      std::copy_n(g.data() + i * (ca + cb) * hw + ca * hw, cb * hw, gb.data() + i * cb * hw);
    }
    accumulate(a, ga);
    accumulate(b, gb);
  });
}

// ---- dense / conv -----------------------------------------------------------

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::int64_t batch = x.shape()[0], in = x.shape()[1], out = weight.shape()[0];
  LATINF_EXPECT(weight.shape()[1] == in, "linear: input width " + std::to_string(in) +
                                             " does not match weight " + shape_str(weight.shape()));
  if (bias.defined()) LATINF_EXPECT(bias.shape() == Shape{out}, "linear: bias shape mismatch");
  Tensor y({batch, out});
  if (batch > 0) {
    CMapMat X(x.value().data(), batch, in);
    CMapMat W(weight.value().data(), out, in);
    MapMat Y(y.data(), batch, out);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> b(bias.value().data(), out);
      Y.rowwise() += b;
    }
  }
  return make_op(std::move(y), {x, weight, bias}, [x, weight, bias, batch, in, out](const Tensor& g) {
    if (batch == 0) return;
    CMapMat G(g.data(), batch, out);
    if (x.requires_grad()) {
      Tensor gx({batch, in});
      MapMat(gx.data(), batch, in).noalias() = G * CMapMat(weight.value().data(), out, in);
      accumulate(x, gx);
    }
    if (weight.requires_grad()) {
      Tensor gw({out, in});
      MapMat(gw.data(), out, in).noalias() = G.transpose() * CMapMat(x.value().data(), batch, in);
      accumulate(weight, gw);
    }
    if (bias.requires_grad()) {
      Tensor gb({out});
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), out) = G.colwise().sum();
      accumulate(bias, gb);
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  LATINF_EXPECT(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  LATINF_EXPECT(ws[1] == xs[1], "conv2d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                                    std::to_string(ws[1]));
  LATINF_EXPECT(ws[2] == ws[3], "conv2d: only square kernels are supported");
  ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], 0, 0, stride, padding};
  geo.out_h = (geo.in_h + 2 * padding - geo.k) / stride + 1;
  geo.out_w = (geo.in_w + 2 * padding - geo.k) / stride + 1;
  LATINF_EXPECT(geo.out_h > 0 && geo.out_w > 0, "conv2d: kernel larger than padded input");
  if (bias.defined()) LATINF_EXPECT(bias.shape() == Shape{geo.out_c}, "conv2d: bias shape mismatch");

  Tensor y({geo.batch, geo.out_c, geo.out_h, geo.out_w});
  {
    AlignedBuffer col(static_cast<std::size_t>(geo.ckk() * geo.out_hw()));
    CMapMat W(weight.value().data(), geo.out_c, geo.ckk());
    const std::int64_t in_sz = geo.in_c * geo.in_h * geo.in_w;
    const std::int64_t out_sz = geo.out_c * geo.out_hw();
    for (std::int64_t b = 0; b < geo.batch; ++b) {
      double* yb = y.data() + b * out_sz;
      MapMat Y(yb, geo.out_c, geo.out_hw());
      if (geo.k == 1 && stride == 1 && padding == 0) {
        Y.noalias() = W * CMapMat(x.value().data() + b * in_sz, geo.in_c, geo.out_hw());
      } else {
        im2col(x.value().data() + b * in_sz, geo, col.data());
        Y.noalias() = W * CMapMat(col.data(), geo.ckk(), geo.out_hw());
      }
      if (bias.defined()) {
        Eigen::Map<const Eigen::VectorXd> bv(bias.value().data(), geo.out_c);
        Y.colwise() += bv;
      }
    }
  }
  return make_op(std::move(y), {x, weight, bias}, [x, weight, bias, geo](const Tensor& g) {
    const bool direct = geo.k == 1 && geo.stride == 1 && geo.pad == 0;
    const std::int64_t in_sz = geo.in_c * geo.in_h * geo.in_w;
    const std::int64_t out_sz = geo.out_c * geo.out_hw();
    AlignedBuffer col(static_cast<std::size_t>(geo.ckk() * geo.out_hw()));
    AlignedBuffer dcol(col.size());
    CMapMat W(weight.value().data(), geo.out_c, geo.ckk());
    Tensor gx, gw, gb;
    if (x.requires_grad()) gx = Tensor(x.shape());
    if (weight.requires_grad()) gw = Tensor(weight.shape());
    if (bias.requires_grad()) gb = Tensor(bias.shape());
    for (std::int64_t b = 0; b < geo.batch; ++b) {
      CMapMat G(g.data() + b * out_sz, geo.out_c, geo.out_hw());
      if (!gw.empty()) {
        MapMat GW(gw.data(), geo.out_c, geo.ckk());
        if (direct) {
          GW.noalias() += G * CMapMat(x.value().data() + b * in_sz, geo.in_c, geo.out_hw()).transpose();
        } else {
          im2col(x.value().data() + b * in_sz, geo, col.data());
          GW.noalias() += G * CMapMat(col.data(), geo.ckk(), geo.out_hw()).transpose();
        }
      }
      if (!gb.empty()) {
        Eigen::Map<Eigen::VectorXd>(gb.data(), geo.out_c) += G.rowwise().sum();
      }
      if (!gx.empty()) {
        if (direct) {
          MapMat(gx.data() + b * in_sz, geo.in_c, geo.out_hw()).noalias() += W.transpose() * G;
        } else {
          MapMat(dcol.data(), geo.ckk(), geo.out_hw()).noalias() = W.transpose() * G;
          col2im_add(dcol.data(), geo, gx.data() + b * in_sz);
        }
      }
    }
    if (!gx.empty()) accumulate(x, gx);
    if (!gw.empty()) accumulate(weight, gw);
    if (!gb.empty()) accumulate(bias, gb);
  });
}

Var avg_pool2d(const Var& x, int kernel) {
  require_rank(x, 4, "avg_pool2d");
  const auto& s = x.shape();
  LATINF_EXPECT(kernel >= 1 && s[2] % kernel == 0 && s[3] % kernel == 0,
                "avg_pool2d: spatial size " + shape_str(s) + " not divisible by " + std::to_string(kernel));
  const std::int64_t oh = s[2] / kernel, ow = s[3] / kernel, planes = s[0] * s[1];
  const double inv = 1.0 / (kernel * kernel);
  Tensor y({s[0], s[1], oh, ow});
  const double* in = x.value().data();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int dy = 0; dy < kernel; ++dy)
          for (int dx = 0; dx < kernel; ++dx) acc += in[(p * s[2] + i * kernel + dy) * s[3] + j * kernel + dx];
        y[(p * oh + i) * ow + j] = acc * inv;
      }
  return make_op(std::move(y), {x}, [x, kernel, oh, ow, planes, inv](const Tensor& g) {
    const auto& s = x.shape();
    Tensor gx(s);
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          const double v = g[(p * oh + i) * ow + j] * inv;
          for (int dy = 0; dy < kernel; ++dy)
            for (int dx = 0; dx < kernel; ++dx) gx[(p * s[2] + i * kernel + dy) * s[3] + j * kernel + dx] = v;
        }
    accumulate(x, gx);
  });
}

Var upsample_nearest(const Var& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  LATINF_EXPECT(factor >= 1, "upsample_nearest: factor must be positive");
  const auto& s = x.shape();
  const std::int64_t oh = s[2] * factor, ow = s[3] * factor, planes = s[0] * s[1];
  Tensor y({s[0], s[1], oh, ow});
  const double* in = x.value().data();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) y[(p * oh + i) * ow + j] = in[(p * s[2] + i / factor) * s[3] + j / factor];
  return make_op(std::move(y), {x}, [x, factor, oh, ow, planes](const Tensor& g) {
    const auto& s = x.shape();
    Tensor gx(s);
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) gx[(p * s[2] + i / factor) * s[3] + j / factor] += g[(p * oh + i) * ow + j];
    accumulate(x, gx);
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const auto& s = x.shape();
  const std::int64_t planes = s[0] * s[1], hw = s[2] * s[3];
  LATINF_EXPECT(hw > 0, "global_avg_pool: empty spatial extent");
  Tensor y({s[0], s[1]});
  for (std::int64_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    const double* src = x.value().data() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += src[i];
    y[p] = acc / static_cast<double>(hw);
  }
  return make_op(std::move(y), {x}, [x, planes, hw](const Tensor& g) {
    Tensor gx(x.shape());
    for (std::int64_t p = 0; p < planes; ++p) {
      const double v = g[p] / static_cast<double>(hw);
      std::fill_n(gx.data() + p * hw, hw, v);
    }
    accumulate(x, gx);
  });
}

Var add_channel_vector(const Var& x, const Var& v) {
  require_rank(x, 4, "add_channel_vector");
  require_rank(v, 2, "add_channel_vector");
  const auto& s = x.shape();
  LATINF_EXPECT(v.shape()[0] == s[0] && v.shape()[1] == s[1],
                "add_channel_vector: vector " + shape_str(v.shape()) + " does not match feature map " + shape_str(s));
  const std::int64_t planes = s[0] * s[1], hw = s[2] * s[3];
  Tensor y = x.value();
  for (std::int64_t p = 0; p < planes; ++p) {
    const double add = v.value()[p];
    double* dst = y.data() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] += add;
  }
  return make_op(std::move(y), {x, v}, [x, v, planes, hw](const Tensor& g) {
    accumulate(x, g);
    if (v.requires_grad()) {
      Tensor gv(v.shape());
      for (std::int64_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        const double* src = g.data() + p * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += src[i];
        gv[p] = acc;
      }
      accumulate(v, gv);
    }
  });
}

Var normalize_channels(const Var& x, std::span<const double> mean, std::span<const double> stddev) {
  require_rank(x, 4, "normalize_channels");
  const auto& s = x.shape();
  LATINF_EXPECT(static_cast<std::int64_t>(mean.size()) == s[1] && static_cast<std::int64_t>(stddev.size()) == s[1],
                "normalize_channels: constants do not match channel count " + std::to_string(s[1]));
  const std::int64_t hw = s[2] * s[3];
  std::vector<double> inv(stddev.size());
  for (std::size_t c = 0; c < stddev.size(); ++c) {
    LATINF_EXPECT(stddev[c] > 0, "normalize_channels: non-positive stddev");
    inv[c] = 1.0 / stddev[c];
  }
  Tensor y(s);
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t c = 0; c < s[1]; ++c) {
      const double* src = x.value().data() + (n * s[1] + c) * hw;
      double* dst = y.data() + (n * s[1] + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = (src[i] - mean[c]) * inv[c];
    }
  return make_op(std::move(y), {x}, [x, inv, hw](const Tensor& g) {
    const auto& s = x.shape();
    Tensor gx(s);
    for (std::int64_t n = 0; n < s[0]; ++n)
      for (std::int64_t c = 0; c < s[1]; ++c)
        for (std::int64_t i = 0; i < hw; ++i) gx[(n * s[1] + c) * hw + i] = g[(n * s[1] + c) * hw + i] * inv[c];
    accumulate(x, gx);
  });
}

Var channel_affine(const Var& x, std::vector<double> scale, std::vector<double> shift) {
  require_rank(x, 4, "channel_affine");
  const auto& s = x.shape();
  LATINF_EXPECT(static_cast<std::int64_t>(scale.size()) == s[1] && static_cast<std::int64_t>(shift.size()) == s[1],
                "channel_affine: coefficients do not match channel count");
  const std::int64_t hw = s[2] * s[3];
  Tensor y(s);
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t c = 0; c < s[1]; ++c) {
      const double* src = x.value().data() + (n * s[1] + c) * hw;
      double* dst = y.data() + (n * s[1] + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * scale[c] + shift[c];
    }
  return make_op(std::move(y), {x}, [x, scale = std::move(scale), hw](const Tensor& g) {
    const auto& s = x.shape();
    Tensor gx(s);
    for (std::int64_t n = 0; n < s[0]; ++n)
      for (std::int64_t c = 0; c < s[1]; ++c)
        for (std::int64_t i = 0; i < hw; ++i) gx[(n * s[1] + c) * hw + i] = g[(n * s[1] + c) * hw + i] * scale[c];
    accumulate(x, gx);
  });
}

Var max_pool2d(const Var& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "max_pool2d");
  LATINF_EXPECT(kernel >= 1 && stride >= 1 && padding >= 0 && padding < kernel, "max_pool2d: invalid geometry");
  const auto& s = x.shape();
  const std::int64_t oh = (s[2] + 2 * padding - kernel) / stride + 1;
  const std::int64_t ow = (s[3] + 2 * padding - kernel) / stride + 1;
  LATINF_EXPECT(oh > 0 && ow > 0, "max_pool2d: window larger than input");
  const std::int64_t planes = s[0] * s[1];
  Tensor y({s[0], s[1], oh, ow});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(y.numel()));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_idx = -1;
        for (int dy = 0; dy < kernel; ++dy) {
          const std::int64_t iy = i * stride - padding + dy;
          if (iy < 0 || iy >= s[2]) continue;
          for (int dx = 0; dx < kernel; ++dx) {
            const std::int64_t ix = j * stride - padding + dx;
            if (ix < 0 || ix >= s[3]) continue;
            const std::int64_t idx = (p * s[2] + iy) * s[3] + ix;
            if (x.value()[idx] > best) {
              best = x.value()[idx];
              best_idx = idx;
            }
          }
        }
        const std::int64_t o = (p * oh + i) * ow + j;
        y[o] = best;
        arg[static_cast<std::size_t>(o)] = best_idx;
      }
  return make_op(std::move(y), {x}, [x, arg = std::move(arg)](const Tensor& g) {
    Tensor gx(x.shape());
    for (std::int64_t o = 0; o < g.numel(); ++o) gx[arg[static_cast<std::size_t>(o)]] += g[o];
    accumulate(x, gx);
  });
}

// ---- adversarial / losses -----------------------------------------------------

Var clip_to_budget(const Var& raw, const Tensor& anchor, double eps) {
  LATINF_EXPECT(raw.shape() == anchor.shape(), "clip_to_budget: raw " + shape_str(raw.shape()) +
                                                   " vs anchor " + shape_str(anchor.shape()));
  LATINF_EXPECT(eps > 0, "clip_to_budget: eps must be positive");
  const Tensor& r = raw.value();
  Tensor y(r.shape());
  std::vector<char> pass(static_cast<std::size_t>(r.numel()));
  for (std::int64_t i = 0; i < r.numel(); ++i) {
    const double lo = anchor[i] - eps, hi = anchor[i] + eps;
    const double v = std::min(hi, std::max(r[i], lo));
    y[i] = std::min(1.0, std::max(0.0, v));
    pass[static_cast<std::size_t>(i)] = r[i] > lo && r[i] < hi && r[i] > 0.0 && r[i] < 1.0;
  }
  return make_op(std::move(y), {raw}, [raw, pass = std::move(pass)](const Tensor& g) {
    Tensor gr(g.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) gr[i] = pass[static_cast<std::size_t>(i)] ? g[i] : 0.0;
    accumulate(raw, gr);
  });
}

Var row_cosine_distance(const Var& a, const Var& b, double norm_floor, int* floor_hits) {
  require_rank(a, 2, "row_cosine_distance");
  require_same_shape(a, b, "row_cosine_distance");
  const std::int64_t rows = a.shape()[0], d = a.shape()[1];
  std::vector<double> na(rows), nb(rows), dot(rows);
  std::vector<char> fa(rows), fb(rows);
  Tensor y({rows});
  int hits = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* pa = a.value().data() + r * d;
    const double* pb = b.value().data() + r * d;
    double saa = 0, sbb = 0, sab = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      saa += pa[i] * pa[i];
      sbb += pb[i] * pb[i];
      sab += pa[i] * pb[i];
    }
    const double ra = std::sqrt(saa), rb = std::sqrt(sbb);
    fa[r] = ra < norm_floor;
    fb[r] = rb < norm_floor;
    hits += fa[r] + fb[r];
    na[r] = std::max(ra, norm_floor);
    nb[r] = std::max(rb, norm_floor);
    dot[r] = sab;
    y[r] = 1.0 - sab / (na[r] * nb[r]);
  }
  if (floor_hits) *floor_hits = hits;
  return make_op(std::move(y), {a, b}, [a, b, rows, d, na, nb, dot, fa, fb](const Tensor& g) {
    // d/da [-<a,b>/(|a||b|)] = -b/(|a||b|) + <a,b> a/(|a|^3 |b|); floored norms are constants.
    auto side = [&](const Var& self, const Var& other, const std::vector<double>& ns, const std::vector<double>& no,
                    const std::vector<char>& floored) {
      if (!self.requires_grad()) return;
      Tensor gs(self.shape());
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* ps = self.value().data() + r * d;
        const double* po = other.value().data() + r * d;
        const double inv = 1.0 / (ns[r] * no[r]);
        const double radial = floored[r] ? 0.0 : dot[r] * inv / (ns[r] * ns[r]);
        for (std::int64_t i = 0; i < d; ++i) gs[r * d + i] = g[r] * (-po[i] * inv + radial * ps[i]);
      }
      accumulate(self, gs);
    };
    side(a, b, na, nb, fa);
    side(b, a, nb, na, fb);
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::int64_t rows = logits.shape()[0], k = logits.shape()[1];
  LATINF_EXPECT(static_cast<std::int64_t>(labels.size()) == rows, "cross_entropy: label count mismatch");
  Tensor probs({rows, k});
  Tensor y({rows});
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::int64_t r = 0; r < rows; ++r) {
    LATINF_EXPECT(lab[r] >= 0 && lab[r] < k, "cross_entropy: label " + std::to_string(lab[r]) + " out of range [0, " +
                                                 std::to_string(k) + ")");
    const double* z = logits.value().data() + r * k;
    const double m = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::int64_t i = 0; i < k; ++i) s += std::exp(z[i] - m);
    const double lse = m + std::log(s);
    for (std::int64_t i = 0; i < k; ++i) probs[r * k + i] = std::exp(z[i] - lse);
    y[r] = lse - z[lab[r]];
  }
  return make_op(std::move(y), {logits}, [logits, probs = std::move(probs), lab, rows, k](const Tensor& g) {
    Tensor gl = probs;
    for (std::int64_t r = 0; r < rows; ++r) {
      gl[r * k + lab[r]] -= 1.0;
      for (std::int64_t i = 0; i < k; ++i) gl[r * k + i] *= g[r];
    }
    accumulate(logits, gl);
  });
}

Var gather_rows(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "gather_rows");
  const std::int64_t rows = logits.shape()[0], k = logits.shape()[1];
  LATINF_EXPECT(static_cast<std::int64_t>(labels.size()) == rows, "gather_rows: label count mismatch");
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor y({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    LATINF_EXPECT(lab[r] >= 0 && lab[r] < k, "gather_rows: label out of range");
    y[r] = logits.value()[r * k + lab[r]];
  }
  return make_op(std::move(y), {logits}, [logits, lab, rows, k](const Tensor& g) {
    Tensor gl(logits.shape());
    for (std::int64_t r = 0; r < rows; ++r) gl[r * k + lab[r]] = g[r];
    accumulate(logits, gl);
  });
}

}  // namespace latinf::ag
