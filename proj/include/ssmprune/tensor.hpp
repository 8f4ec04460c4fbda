#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ssmprune {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major fp32 array. Always has at least one dimension; the data
/// length equals the product of the extents.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, float fill = 0.0F);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(values_.size()); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<const float> values() const noexcept { return values_; }
  std::span<float> values() noexcept { return values_; }
  const float* data() const noexcept { return values_.data(); }
  float* data() noexcept { return values_.data(); }

  float operator[](std::size_t i) const { return values_[i]; }
  float& operator[](std::size_t i) { return values_[i]; }

  // Rank-2 element access.
  float at(std::int64_t row, std::int64_t col) const;
  float& at(std::int64_t row, std::int64_t col);

  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> values_;
};

enum class ElementwiseKind { Silu, Softplus, Exp, Mul, Add };

// Throws NumericError naming `where` if any value is NaN/Inf.
void require_finite(const Tensor& t, const char* where);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Depthwise causal convolution over time. x is [C, T], w is [C, K], bias is [C].
/// y[c, t] = bias[c] + sum_k w[c, k] * x[c, t - K + 1 + k], zero-padded on the left.
Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& bias);

float sigmoid(float x) noexcept;
float softplus(float x) noexcept;
float silu(float x) noexcept;

Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b = nullptr);

/// RMS normalization over contiguous groups of the last axis.
/// group_size 0 means one group spanning the whole last axis. Each group is
/// divided by sqrt(sum(x^2) / divisor + eps); divisor 0 means the group size.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps, std::int64_t group_size = 0,
               std::int64_t divisor = 0);

// Columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t end);
// Adds a row vector to every row of a rank-2 tensor.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);
Tensor sum(const Tensor& a);
Tensor embedding_lookup(const Tensor& table, std::span<const std::uint32_t> ids);
/// Mean over rows of -log softmax(logits[t])[targets[t]].
Tensor cross_entropy_mean(const Tensor& logits, std::span<const std::uint32_t> targets);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ssmprune
