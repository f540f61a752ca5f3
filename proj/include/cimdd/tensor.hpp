#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cimdd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense row-major f64 array. Values are required to be finite whenever a
/// tensor is built from caller-supplied data.
class Tensor {
 public:
  // Storage starts on a 64-byte boundary. Eigen's vectorized kernels peel
  // unaligned heads, so a varying start address changes rounding run to run.
  template <class T>
  struct AlignedAlloc {
    using value_type = T;
    AlignedAlloc() = default;
    template <class U>
    AlignedAlloc(const AlignedAlloc<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64})); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{64}); }
    bool operator==(const AlignedAlloc&) const noexcept { return true; }
  };
  using Storage = std::vector<double, AlignedAlloc<double>>;

  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> v);
  static Tensor row(std::span<const double> v);
  /// N(0, stddev^2) entries drawn from `rng`.
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  /// U(-bound, bound) entries drawn from `rng`.
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double bound);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  /// Rows/cols of a rank-2 tensor; a rank-1 tensor is treated as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  Storage& storage() noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<const double> row_span(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row_span(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }

  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;  // rank-2 only
  void fill(double v);
  bool all_finite() const noexcept;
  /// Throws NumericError naming `where` if any entry is NaN/Inf.
  void check_finite(const std::string& where) const;

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  Storage data_;
};

/// Maximum absolute elementwise difference; shapes must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace cimdd
