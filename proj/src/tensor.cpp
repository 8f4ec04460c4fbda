#include "ssmprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ssmprune/error.hpp"

namespace ssmprune {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& x, F f, const char* op) {
  Tensor out(x.shape());
  auto in = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  require_finite(out, op);
  return out;
}

}  // namespace

Tensor::Tensor() : shape_{0} {}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (static_cast<std::int64_t>(values_.size()) != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(values_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(float value) { return Tensor({1}, std::vector<float>{value}); }

Tensor Tensor::vector(std::vector<float> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  return Tensor({n}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const auto r = static_cast<std::int64_t>(rows.size());
  const auto c = r ? static_cast<std::int64_t>(rows.begin()->size()) : 0;
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<std::int64_t>(row.size()) != c) throw DimensionError("ragged rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

float Tensor::at(std::int64_t row, std::int64_t col) const {
  return values_[static_cast<std::size_t>(row * shape_[1] + col)];
}

float& Tensor::at(std::int64_t row, std::int64_t col) {
  return values_[static_cast<std::size_t>(row * shape_[1] + col)];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite value");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = a.dim(0);
  const auto k = a.dim(1);
  const auto n = b.dim(1);
  Tensor c({m, n});
  std::vector<double> acc(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      if (av == 0.0) continue;
      const float* brow = b.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] += av * brow[j];
    }
    for (std::int64_t j = 0; j < n; ++j) c.at(i, j) = static_cast<float>(acc[static_cast<std::size_t>(j)]);
  }
  require_finite(c, "matmul");
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto r = a.dim(0);
  const auto c = a.dim(1);
  Tensor t({c, r});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "conv1d");
  require_rank(w, 2, "conv1d");
  require_rank(bias, 1, "conv1d");
  const auto channels = x.dim(0);
  const auto steps = x.dim(1);
  const auto taps = w.dim(1);
  if (w.dim(0) != channels || bias.dim(0) != channels) {
    throw DimensionError("conv1d: channel mismatch x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", bias " + shape_str(bias.shape()));
  }
  if (taps < 1) throw DimensionError("conv1d: kernel width must be >= 1");
  Tensor y({channels, steps});
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t t = 0; t < steps; ++t) {
      double acc = bias[static_cast<std::size_t>(c)];
      for (std::int64_t k = 0; k < taps; ++k) {
        const auto src = t - taps + 1 + k;
        if (src < 0) continue;
        acc += static_cast<double>(w.at(c, k)) * x.at(c, src);
      }
      y.at(c, t) = static_cast<float>(acc);
    }
  }
  require_finite(y, "conv1d");
  return y;
}

float sigmoid(float x) noexcept {
  if (x >= 0.0F) return 1.0F / (1.0F + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0F + e);
}

float softplus(float x) noexcept {
  if (x > 20.0F) return x;
  return std::log1p(std::exp(x));
}

float silu(float x) noexcept { return x * sigmoid(x); }

Tensor silu(const Tensor& x) {
  return map_unary(x, [](float v) { return silu(v); }, "silu");
}

Tensor softplus(const Tensor& x) {
  return map_unary(x, [](float v) { return softplus(v); }, "softplus");
}

Tensor exp(const Tensor& x) {
  return map_unary(x, [](float v) { return std::exp(v); }, "exp");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < static_cast<std::size_t>(a.numel()); ++i) out[i] = a[i] * b[i];
  require_finite(out, "mul");
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < static_cast<std::size_t>(a.numel()); ++i) out[i] = a[i] + b[i];
  require_finite(out, "add");
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  return map_unary(a, [factor](float v) { return v * factor; }, "scale");
}

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b) {
  switch (kind) {
    case ElementwiseKind::Silu:
      return silu(a);
    case ElementwiseKind::Softplus:
      return softplus(a);
    case ElementwiseKind::Exp:
      return exp(a);
    case ElementwiseKind::Mul:
    case ElementwiseKind::Add:
      if (b == nullptr) throw ContractError("elementwise: binary kind needs two operands");
      return kind == ElementwiseKind::Mul ? mul(a, *b) : add(a, *b);
  }
  throw ContractError("elementwise: unknown kind");
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, float eps, std::int64_t group_size,
               std::int64_t divisor) {
  const auto d = x.shape().back();
  if (weight.rank() != 1 || weight.dim(0) != d) {
    throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) +
                         " does not match last extent of " + shape_str(x.shape()));
  }
  if (group_size == 0) group_size = d;
  if (group_size <= 0 || d % group_size != 0) {
    throw DimensionError("rmsnorm: group size " + std::to_string(group_size) +
                         " does not divide " + std::to_string(d));
  }
  if (divisor == 0) divisor = group_size;
  if (divisor < 0) throw ContractError("rmsnorm: negative divisor");
  Tensor y(x.shape());
  const auto rows = x.numel() / std::max<std::int64_t>(d, 1);
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * d;
    float* yr = y.data() + r * d;
    for (std::int64_t g0 = 0; g0 < d; g0 += group_size) {
      double ss = 0.0;
      for (std::int64_t i = g0; i < g0 + group_size; ++i) ss += static_cast<double>(xr[i]) * xr[i];
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(divisor) + eps);
      for (std::int64_t i = g0; i < g0 + group_size; ++i) {
        yr[i] = static_cast<float>(weight[static_cast<std::size_t>(i)] * (xr[i] * inv));
      }
    }
  }
  require_finite(y, "rmsnorm");
  return y;
}

Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin < 0 || end < begin || end > a.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") out of bounds for " + shape_str(a.shape()));
  }
  const auto rows = a.dim(0);
  Tensor out({rows, end - begin});
  for (std::int64_t i = 0; i < rows; ++i)
    std::copy(a.data() + i * a.dim(1) + begin, a.data() + i * a.dim(1) + end,
              out.data() + i * (end - begin));
  return out;
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_row_bias");
  if (bias.rank() != 1 || bias.dim(0) != a.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs " +
                         shape_str(a.shape()));
  }
  Tensor out = a;
  for (std::int64_t i = 0; i < a.dim(0); ++i)
    for (std::int64_t j = 0; j < a.dim(1); ++j) out.at(i, j) += bias[static_cast<std::size_t>(j)];
  require_finite(out, "add_row_bias");
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.values()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  require_finite(out, "sum");
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_rank(table, 2, "embedding_lookup");
  const auto vocab = table.dim(0);
  const auto d = table.dim(1);
  Tensor out({static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (static_cast<std::int64_t>(ids[t]) >= vocab) {
      throw ContractError("token id " + std::to_string(ids[t]) + " out of range for vocab " +
                          std::to_string(vocab));
    }
    std::copy(table.data() + ids[t] * d, table.data() + (ids[t] + 1) * d,
              out.data() + static_cast<std::int64_t>(t) * d);
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const std::uint32_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const auto steps = logits.dim(0);
  const auto vocab = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != steps || steps == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()) + " logits");
  }
  require_finite(logits, "cross_entropy");
  double total = 0.0;
  for (std::int64_t t = 0; t < steps; ++t) {
    const float* row = logits.data() + t * vocab;
    const float mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::int64_t v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
    const auto target = static_cast<std::int64_t>(targets[static_cast<std::size_t>(t)]);
    if (target >= vocab) throw ContractError("cross_entropy: target out of range");
    total += std::log(z) + mx - row[target];
  }
  return Tensor::scalar(static_cast<float>(total / static_cast<double>(steps)));
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  float m = 0.0F;
  for (std::size_t i = 0; i < static_cast<std::size_t>(a.numel()); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace ssmprune
