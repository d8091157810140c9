#include "latinf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "latinf/errors.hpp"

namespace latinf {

namespace detail {
void throw_contract(const std::string& where, const std::string& what) {
  throw ContractError(where + ": " + what);
}
}  // namespace detail

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    LATINF_EXPECT(d >= 0, "negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  LATINF_EXPECT(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
                "value count " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
}

std::int64_t Tensor::dim(std::size_t i) const {
  LATINF_EXPECT(i < shape_.size(), "dimension index out of range");
  return shape_[i];
}

double& Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

double Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

Tensor Tensor::reshaped(Shape shape) const {
  LATINF_EXPECT(shape_numel(shape) == numel(),
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor Tensor::slice_rows(std::int64_t begin, std::int64_t end) const {
  LATINF_EXPECT(rank() >= 1, "slice_rows needs rank >= 1");
  LATINF_EXPECT(0 <= begin && begin <= end && end <= shape_[0], "row range out of bounds");
  const std::int64_t row = shape_[0] == 0 ? 0 : numel() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  Tensor t;
  t.shape_ = std::move(s);
  t.data_.assign(data_.begin() + begin * row, data_.begin() + end * row);
  return t;
}

Tensor Tensor::stack_rows(std::span<const Tensor> parts) {
  LATINF_EXPECT(!parts.empty(), "stack_rows needs at least one part");
  Shape s = parts.front().shape();
  LATINF_EXPECT(!s.empty(), "stack_rows needs rank >= 1");
  std::int64_t rows = 0;
  AlignedBuffer out;
  for (const auto& p : parts) {
    LATINF_EXPECT(p.rank() == s.size() && std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1),
                  "stack_rows trailing shape mismatch");
    rows += p.dim(0);
    out.insert(out.end(), p.data_.begin(), p.data_.end());
  }
  s[0] = rows;
  Tensor t;
  t.shape_ = std::move(s);
  t.data_ = std::move(out);
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  LATINF_EXPECT(a.shape() == b.shape(), "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace latinf
