#include "cimdd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cimdd/error.hpp"

namespace cimdd {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {
void validate_shape(const Shape& s) {
  if (s.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : s)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(s));
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  validate_shape(shape_);
  if (data_.size() != shape_numel(shape_))
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  check_finite("tensor construction");
}

Tensor Tensor::filled(Shape shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  t.check_finite("tensor fill");
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> d;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    d.insert(d.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(d));
}

Tensor Tensor::vector(std::initializer_list<double> v) {
  return Tensor({v.size()}, std::vector<double>(v));
}

Tensor Tensor::row(std::span<const double> v) {
  return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& x : t.data_) x = nd(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> ud(-bound, bound);
  for (auto& x : t.data_) x = ud(rng);
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw DimensionError("expected rank-1 or rank-2 tensor, got " + shape_str(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw DimensionError("expected rank-1 or rank-2 tensor, got " + shape_str(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
  validate_shape(shape);
  if (shape_numel(shape) != numel())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor Tensor::transposed() const {
  const std::size_t r = rows(), c = cols();
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.data_[j * r + i] = data_[i * c + j];
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void Tensor::check_finite(const std::string& where) const {
  if (!all_finite()) throw NumericError("non-finite value in " + where);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cimdd
