#pragma once

#include <cmath>
#include <cstdint>

#include "ssmprune/rng.hpp"
#include "ssmprune/tensor.hpp"

namespace testutil {

inline ssmprune::Tensor uniform_tensor(ssmprune::Shape shape, ssmprune::Rng& rng, double lo = -2.0,
                                       double hi = 2.0) {
  ssmprune::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Norm-wise relative error |a - b| / max(|a|, |b|, floor).
inline double rel_error(const ssmprune::Tensor& a, const ssmprune::Tensor& b, double floor = 1e-6) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    diff += (x - y) * (x - y);
    na += x * x;
    nb += y * y;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace testutil
