#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace moe {

using Shape = std::vector<std::size_t>;
using Token = std::int32_t;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float32 tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor of(Shape shape, std::initializer_list<float> values);
  static Tensor scalar(float value) { return Tensor({1}, std::vector<float>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  // Leading dims folded into rows; last dim is the row width.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* row(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const float* row(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_.at(r * cols() + c); }
  float at(std::size_t r, std::size_t c) const { return data_.at(r * cols() + c); }

  std::vector<float> to_vector() const { return data_; }

  // Element-wise value comparison; -0.0f == 0.0f.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

using TensorMap = std::map<std::string, Tensor, std::less<>>;

// Byte-level equality, distinguishing -0.0f from 0.0f and NaN payloads.
bool bit_equal(const Tensor& a, const Tensor& b);
bool bit_equal(const TensorMap& a, const TensorMap& b);

bool all_finite(std::span<const float> values);
// Throws ErrorKind::NonFinite naming `op` if any value is NaN or Inf.
void check_finite(const Tensor& t, std::string_view op);

std::size_t parameter_count(const TensorMap& tensors);

// Forward-only primitives. The differentiable versions live in autodiff.hpp
// and share these kernels.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& gain);
float cross_entropy(const Tensor& logits, std::span<const Token> targets);

inline constexpr float kRmsNormEps = 1e-6f;

namespace kernels {

// Dot product with eight independent partial sums; the summation order is a
// function of n only, so each output row is reproducible regardless of how
// many rows a matrix has.
float dot(const float* a, const float* b, std::size_t n) noexcept;

// out[m x n] = a[m x k] * b[k x n]; out is overwritten.
void matmul(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
            std::size_t n) noexcept;
// out[m x n] = a[m x k] * b[n x k]^T.
void matmul_bt(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
               std::size_t n) noexcept;
// out[k x n] += a[m x k]^T * b[m x n].
void matmul_at_acc(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
                   std::size_t n) noexcept;
// out[m x k] += a[m x n] * b[n x k].
void matmul_acc(const float* a, const float* b, float* out, std::size_t m, std::size_t n,
                std::size_t k) noexcept;

void softmax_inplace(float* x, std::size_t n) noexcept;
// Returns 1/rms for the row and writes the normalized, gained row to out.
float rms_norm_row(const float* x, const float* gain, float* out, std::size_t n) noexcept;

}  // namespace kernels

}  // namespace moe
