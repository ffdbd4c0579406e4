#include "moe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "moe/error.hpp"

namespace moe {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  require(!shape_.empty(), ErrorKind::InvalidArgument, "tensor shape must have rank >= 1");
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(!shape_.empty(), ErrorKind::InvalidArgument, "tensor shape must have rank >= 1");
  require(element_count(shape_) == data_.size(), ErrorKind::ShapeMismatch,
          "shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
              " values");
}

Tensor Tensor::of(Shape shape, std::initializer_list<float> values) {
  return Tensor(std::move(shape), std::vector<float>(values));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

bool bit_equal(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !bit_equal(ia->second, ib->second)) return false;
  }
  return true;
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

void check_finite(const Tensor& t, std::string_view op) {
  if (!all_finite(t.data())) {
    fail(ErrorKind::NonFinite, "non-finite value produced by " + std::string(op));
  }
}

std::size_t parameter_count(const TensorMap& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

namespace kernels {

float dot(const float* a, const float* b, std::size_t n) noexcept {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

void matmul(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
            std::size_t n) noexcept {
  std::fill(out, out + m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    float* o = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      const float* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

void matmul_bt(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
               std::size_t n) noexcept {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ar = a + i * k;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = dot(ar, b + j * k, k);
  }
}

void matmul_at_acc(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
                   std::size_t n) noexcept {
  for (std::size_t i = 0; i < m; ++i) {
    const float* br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      if (av == 0.0f) continue;
      float* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

void matmul_acc(const float* a, const float* b, float* out, std::size_t m, std::size_t n,
                std::size_t k) noexcept {
  for (std::size_t i = 0; i < m; ++i) {
    float* o = out + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float av = a[i * n + j];
      if (av == 0.0f) continue;
      const float* br = b + j * k;
      for (std::size_t p = 0; p < k; ++p) o[p] += av * br[p];
    }
  }
}

void softmax_inplace(float* x, std::size_t n) noexcept {
  const float mx = *std::max_element(x, x + n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    total += x[i];
  }
  const float inv = static_cast<float>(1.0 / total);
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

float rms_norm_row(const float* x, const float* gain, float* out, std::size_t n) noexcept {
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += static_cast<double>(x[i]) * x[i];
  const float inv = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(n) + kRmsNormEps));
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * inv * gain[i];
  return inv;
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorKind::ShapeMismatch,
          "matmul: cannot multiply " + shape_string(a.shape()) + " by " +
              shape_string(b.shape()));
  Tensor out({a.dim(0), b.dim(1)});
  kernels::matmul(a.data().data(), b.data().data(), out.data().data(), a.dim(0), a.dim(1),
                  b.dim(1));
  check_finite(out, "matmul");
  return out;
}

Tensor softmax(const Tensor& x) {
  check_finite(x, "softmax input");
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) kernels::softmax_inplace(out.row(r), out.cols());
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  require(gain.size() == x.cols(), ErrorKind::ShapeMismatch,
          "rms_norm: gain " + shape_string(gain.shape()) + " vs input " +
              shape_string(x.shape()));
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    kernels::rms_norm_row(x.row(r), gain.data().data(), out.row(r), x.cols());
  }
  check_finite(out, "rms_norm");
  return out;
}

float cross_entropy(const Tensor& logits, std::span<const Token> targets) {
  require(logits.rank() == 2 && logits.dim(0) == targets.size(), ErrorKind::ShapeMismatch,
          "cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
              std::to_string(targets.size()) + " targets");
  require(!targets.empty(), ErrorKind::InvalidArgument, "cross_entropy: no targets");
  const std::size_t vocab = logits.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto target = targets[r];
    require(target >= 0 && static_cast<std::size_t>(target) < vocab, ErrorKind::InvalidArgument,
            "cross_entropy: target " + std::to_string(target) + " outside [0," +
                std::to_string(vocab) + ")");
    const float* row = logits.row(r);
    const float mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(z) + mx - row[target];
  }
  const float loss = static_cast<float>(total / static_cast<double>(targets.size()));
  require(std::isfinite(loss), ErrorKind::NonFinite, "cross_entropy produced a non-finite loss");
  return loss;
}

}  // namespace moe
