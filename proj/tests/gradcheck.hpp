#pragma once

// Random operation graphs evaluated twice: on the library tape in fp32 and by
// a separate fp64 interpreter whose central differences are the oracle.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "reference.hpp"
#include "ssmprune/autograd.hpp"
#include "ssmprune/mamba2.hpp"
#include "ssmprune/rng.hpp"
#include "test_util.hpp"

namespace gradcheck {

using ssmprune::Shape;
using ssmprune::Tensor;
using ssmprune::Var;

struct D {
  Shape shape;
  std::vector<double> v;
  std::size_t rows() const { return static_cast<std::size_t>(shape[0]); }
  std::size_t cols() const { return shape.size() > 1 ? static_cast<std::size_t>(shape[1]) : 1; }
};

inline D promote(const Tensor& t) { return {t.shape(), std::vector<double>(t.values().begin(), t.values().end())}; }

// One step of a graph: how to run it on the tape and in fp64.
struct Step {
  std::string name;
  std::function<Var(Var, const std::vector<Var>&)> tape;
  std::function<D(const D&, const std::vector<D>&)> exact;
};

struct Graph {
  std::vector<Tensor> leaves;  // leaf 0 is the chain input
  std::vector<Step> steps;
  std::vector<std::uint32_t> targets;  // non-empty: finish with cross-entropy
  std::string describe() const {
    std::string s;
    for (const auto& st : steps) s += st.name + " ";
    return s + (targets.empty() ? "weighted-sum" : "cross-entropy");
  }
};

namespace detail {

inline D map(const D& a, double (*f)(double)) {
  D o = a;
  for (auto& x : o.v) x = f(x);
  return o;
}

inline double exp_fn(double x) { return std::exp(x); }
inline double silu_fn(double x) { return ref::silu(x); }
inline double softplus_fn(double x) { return ref::softplus(x); }

inline D matmul(const D& a, const D& b) {
  D o{{a.shape[0], b.shape[1]}, std::vector<double>(a.rows() * b.cols(), 0.0)};
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      for (std::size_t j = 0; j < b.cols(); ++j) o.v[i * b.cols() + j] += a.v[i * a.cols() + k] * b.v[k * b.cols() + j];
    }
  }
  return o;
}

inline D transpose(const D& a) {
  D o{{a.shape[1], a.shape[0]}, std::vector<double>(a.v.size())};
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) o.v[j * a.rows() + i] = a.v[i * a.cols() + j];
  }
  return o;
}

inline D conv(const D& x, const D& w, const D& b) {
  const std::size_t C = x.rows(), T = x.cols(), K = w.cols();
  D o{x.shape, std::vector<double>(C * T, 0.0)};
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      double acc = b.v[c];
      for (std::size_t k = 0; k < K; ++k) {
        const long s = static_cast<long>(t + k) - static_cast<long>(K) + 1;
        if (s >= 0) acc += w.v[c * K + k] * x.v[c * T + static_cast<std::size_t>(s)];
      }
      o.v[c * T + t] = acc;
    }
  }
  return o;
}

inline D rmsnorm(const D& x, const D& w, double eps, std::size_t group) {
  D o = x;
  const std::size_t width = x.cols();
  const std::size_t gs = group == 0 ? width : group;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t g0 = 0; g0 < width; g0 += gs) {
      double ss = 0.0;
      for (std::size_t j = g0; j < g0 + gs; ++j) ss += x.v[r * width + j] * x.v[r * width + j];
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(gs) + eps);
      for (std::size_t j = g0; j < g0 + gs; ++j) o.v[r * width + j] = x.v[r * width + j] * inv * w.v[j];
    }
  }
  return o;
}

inline double cross_entropy(const D& logits, const std::vector<std::uint32_t>& targets) {
  double total = 0.0;
  const std::size_t V = logits.cols();
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    double mx = -1e300;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, logits.v[t * V + v]);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(logits.v[t * V + v] - mx);
    total += std::log(z) + mx - logits.v[t * V + targets[t]];
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace detail

/// Builds a random chain of 2-5 operations over small random tensors.
inline Graph random_graph(std::uint64_t seed) {
  ssmprune::Rng rng(seed);
  Graph g;
  auto dim = [&](int lo, int hi) { return static_cast<std::int64_t>(lo + rng.below(static_cast<std::uint64_t>(hi - lo + 1))); };
  std::int64_t r = dim(2, 4), c = dim(2, 4);
  if (rng.uniform() < 0.2) {
    // Start from an embedding lookup instead of a plain leaf.
    const std::int64_t vocab = dim(4, 6);
    std::vector<std::uint32_t> ids;
    for (std::int64_t i = 0; i < r; ++i) ids.push_back(static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(vocab))));
    g.leaves.push_back(testutil::uniform_tensor({vocab, c}, rng));
    g.steps.push_back({"embedding",
                       [ids](Var v, const std::vector<Var>&) { return ssmprune::ad::embedding_lookup(v, ids); },
                       [ids, c](const D& t, const std::vector<D>&) {
                         D o{{static_cast<std::int64_t>(ids.size()), c}, {}};
                         for (auto id : ids) {
                           for (std::int64_t j = 0; j < c; ++j) o.v.push_back(t.v[id * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)]);
                         }
                         return o;
                       }});
  } else {
    g.leaves.push_back(testutil::uniform_tensor({r, c}, rng));
  }
  auto new_leaf = [&](Shape s) {
    g.leaves.push_back(testutil::uniform_tensor(std::move(s), rng));
    return g.leaves.size() - 1;
  };
  const int n_ops = static_cast<int>(dim(2, 5));
  bool used_exp = false;
  for (int i = 0; i < n_ops; ++i) {
    int kind = static_cast<int>(rng.below(12));
    // One exponential per chain keeps magnitudes, and thereby the
    // finite-difference truncation error, bounded.
    if (kind == 2 && used_exp) kind = 0;
    if (kind == 2) used_exp = true;
    switch (kind) {
      case 0:
        g.steps.push_back({"silu", [](Var v, const std::vector<Var>&) { return ssmprune::ad::silu(v); },
                           [](const D& v, const std::vector<D>&) { return detail::map(v, detail::silu_fn); }});
        break;
      case 1:
        g.steps.push_back({"softplus", [](Var v, const std::vector<Var>&) { return ssmprune::ad::softplus(v); },
                           [](const D& v, const std::vector<D>&) { return detail::map(v, detail::softplus_fn); }});
        break;
      case 2: {
        g.steps.push_back({"exp(silu)",
                           [](Var v, const std::vector<Var>&) { return ssmprune::ad::exp(ssmprune::ad::silu(v)); },
                           [](const D& v, const std::vector<D>&) {
                             return detail::map(detail::map(v, detail::silu_fn), detail::exp_fn);
                           }});
        break;
      }
      case 3: {
        const auto k = new_leaf({r, c});
        g.steps.push_back({"mul", [k](Var v, const std::vector<Var>& l) { return ssmprune::ad::mul(v, l[k]); },
                           [k](const D& v, const std::vector<D>& l) {
                             D o = v;
                             for (std::size_t j = 0; j < o.v.size(); ++j) o.v[j] *= l[k].v[j];
                             return o;
                           }});
        break;
      }
      case 4: {
        const auto k = new_leaf({r, c});
        g.steps.push_back({"add", [k](Var v, const std::vector<Var>& l) { return ssmprune::ad::add(v, l[k]); },
                           [k](const D& v, const std::vector<D>& l) {
                             D o = v;
                             for (std::size_t j = 0; j < o.v.size(); ++j) o.v[j] += l[k].v[j];
                             return o;
                           }});
        break;
      }
      case 5: {
        const auto c2 = dim(2, 4);
        const auto k = new_leaf({c, c2});
        g.steps.push_back({"matmul", [k](Var v, const std::vector<Var>& l) { return ssmprune::ad::matmul(v, l[k]); },
                           [k](const D& v, const std::vector<D>& l) { return detail::matmul(v, l[k]); }});
        c = c2;
        break;
      }
      case 6:
        g.steps.push_back({"transpose", [](Var v, const std::vector<Var>&) { return ssmprune::ad::transpose(v); },
                           [](const D& v, const std::vector<D>&) { return detail::transpose(v); }});
        std::swap(r, c);
        break;
      case 7: {
        const auto k = new_leaf({c});
        const std::int64_t group = (c % 2 == 0 && rng.uniform() < 0.5) ? c / 2 : 0;
        g.steps.push_back({"rmsnorm",
                           [k, group](Var v, const std::vector<Var>& l) {
                             return ssmprune::ad::rmsnorm(v, l[k], 1e-5F, group);
                           },
                           [k, group](const D& v, const std::vector<D>& l) {
                             return detail::rmsnorm(v, l[k], static_cast<double>(1e-5F), static_cast<std::size_t>(group));
                           }});
        break;
      }
      case 8: {
        if (c < 2) break;
        const auto b = dim(0, static_cast<int>(c) - 2);
        const auto e = b + dim(1, static_cast<int>(c - b));
        const auto cc = c;
        g.steps.push_back({"slice", [b, e](Var v, const std::vector<Var>&) { return ssmprune::ad::slice_cols(v, b, e); },
                           [b, e, cc](const D& v, const std::vector<D>&) {
                             D o{{v.shape[0], e - b}, {}};
                             for (std::size_t i = 0; i < v.rows(); ++i) {
                               for (auto j = b; j < e; ++j) o.v.push_back(v.v[i * static_cast<std::size_t>(cc) + static_cast<std::size_t>(j)]);
                             }
                             return o;
                           }});
        c = e - b;
        break;
      }
      case 9: {
        const auto k = new_leaf({c});
        g.steps.push_back({"row_bias",
                           [k](Var v, const std::vector<Var>& l) { return ssmprune::ad::add_row_bias(v, l[k]); },
                           [k](const D& v, const std::vector<D>& l) {
                             D o = v;
                             for (std::size_t j = 0; j < o.v.size(); ++j) o.v[j] += l[k].v[j % v.cols()];
                             return o;
                           }});
        break;
      }
      case 10: {
        const auto kw = new_leaf({r, dim(1, 3)});
        const auto kb = new_leaf({r});
        g.steps.push_back({"conv1d",
                           [kw, kb](Var v, const std::vector<Var>& l) {
                             return ssmprune::ad::conv1d_depthwise_causal(v, l[kw], l[kb]);
                           },
                           [kw, kb](const D& v, const std::vector<D>& l) { return detail::conv(v, l[kw], l[kb]); }});
        break;
      }
      default: {
        const Shape s{c, r};
        g.steps.push_back({"reshape", [s](Var v, const std::vector<Var>&) { return ssmprune::ad::reshape(v, s); },
                           [s](const D& v, const std::vector<D>&) { return D{s, v.v}; }});
        std::swap(r, c);
        break;
      }
    }
  }
  if (rng.uniform() < 0.3) {
    for (std::int64_t i = 0; i < r; ++i) g.targets.push_back(static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(c))));
  } else {
    g.leaves.push_back(testutil::uniform_tensor({r, c}, rng));  // weights of the final sum
  }
  return g;
}

inline double exact_loss(const Graph& g, const std::vector<D>& leaves) {
  D v = leaves[0];
  for (const auto& st : g.steps) v = st.exact(v, leaves);
  if (!g.targets.empty()) return detail::cross_entropy(v, g.targets);
  double s = 0.0;
  for (std::size_t j = 0; j < v.v.size(); ++j) s += v.v[j] * leaves.back().v[j];
  return s;
}

/// Norm-wise relative error between tape gradients and fp64 central
/// differences (step h) over every leaf element.
inline double graph_error(const Graph& g, double h = 1e-3) {
  ssmprune::Tape tape;
  std::vector<Var> vars;
  for (const auto& t : g.leaves) vars.push_back(tape.leaf(t));
  Var v = vars[0];
  for (const auto& st : g.steps) v = st.tape(v, vars);
  Var loss = g.targets.empty() ? ssmprune::ad::sum(ssmprune::ad::mul(v, vars.back()))
                               : ssmprune::ad::cross_entropy_mean(v, g.targets);
  tape.backward(loss);

  std::vector<D> leaves;
  for (const auto& t : g.leaves) leaves.push_back(promote(t));
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const Tensor grad = tape.grad(vars[i]);
    for (std::size_t j = 0; j < leaves[i].v.size(); ++j) {
      const double orig = leaves[i].v[j];
      auto at = [&](double step) {
        leaves[i].v[j] = orig + step;
        return exact_loss(g, leaves);
      };
      // Fourth-order central stencil; narrow norms have sharp curvature.
      const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      leaves[i].v[j] = orig;
      const double ad = grad[j];
      diff += (fd - ad) * (fd - ad);
      na += fd * fd;
      nb += ad * ad;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

/// Gradient of sum(block_forward(u) * R) with respect to every block
/// parameter and u, checked against the fp64 straight-line block.
inline double block_error(const ssmprune::Model& model, std::uint64_t seed, std::int64_t steps, double h = 1e-3) {
  ssmprune::Rng rng(seed);
  const auto& dims = model.dims;
  const auto& layer = dims.layers[0];
  const Tensor u = testutil::uniform_tensor({steps, dims.d_model}, rng, -1.0, 1.0);
  const Tensor weights = testutil::uniform_tensor({steps, dims.d_model}, rng, -1.0, 1.0);
  ssmprune::Tape tape;
  const auto vars = ssmprune::ad::record_params(tape, model);
  Var uv = tape.leaf(u);
  Var out = ssmprune::ad::block_forward(vars.layers[0], layer, dims, uv);
  tape.backward(ssmprune::ad::sum(ssmprune::ad::mul(out, tape.leaf(weights))));

  ssmprune::Model m = model;
  auto& p = m.params.layers[0];
  std::vector<std::pair<Tensor*, Var>> params{{&p.in_proj, vars.layers[0].in_proj}, {&p.conv_w, vars.layers[0].conv_w},
                                              {&p.conv_b, vars.layers[0].conv_b},   {&p.a_log, vars.layers[0].a_log},
                                              {&p.d, vars.layers[0].d},             {&p.dt_bias, vars.layers[0].dt_bias},
                                              {&p.norm_w, vars.layers[0].norm_w},   {&p.out_proj, vars.layers[0].out_proj}};
  ref::Mat uin = ref::from_tensor(u);
  auto objective = [&](const ref::Mat& input) {
    const ref::Mat o = ref::block(m.params.layers[0], layer, dims, input);
    double s = 0.0;
    for (std::size_t t = 0; t < o.size(); ++t) {
      for (std::size_t j = 0; j < o[t].size(); ++j) s += o[t][j] * weights.at(static_cast<std::int64_t>(t), static_cast<std::int64_t>(j));
    }
    return s;
  };
  double diff = 0.0, na = 0.0, nb = 0.0;
  auto accumulate = [&](double fd, double ad) {
    diff += (fd - ad) * (fd - ad);
    na += fd * fd;
    nb += ad * ad;
  };
  // The oracle reads fp32 parameter storage, so parameters step by 2^-10
  // (about 1e-3), which fp32 represents exactly for these magnitudes.
  const double hp = std::ldexp(1.0, -10);
  for (auto& [tensor, var] : params) {
    const Tensor grad = tape.grad(var);
    for (std::int64_t j = 0; j < tensor->numel(); ++j) {
      const float orig = tensor->data()[j];
      tensor->data()[j] = static_cast<float>(orig + hp);
      const double up = objective(uin);
      tensor->data()[j] = static_cast<float>(orig - hp);
      const double down = objective(uin);
      tensor->data()[j] = orig;
      accumulate((up - down) / (2 * hp), grad[static_cast<std::size_t>(j)]);
    }
  }
  const Tensor gu = tape.grad(uv);
  for (std::size_t t = 0; t < uin.size(); ++t) {
    for (std::size_t j = 0; j < uin[t].size(); ++j) {
      const double orig = uin[t][j];
      uin[t][j] = orig + h;
      const double up = objective(uin);
      uin[t][j] = orig - h;
      const double down = objective(uin);
      uin[t][j] = orig;
      accumulate((up - down) / (2 * h), gu[t * uin[t].size() + j]);
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

}  // namespace gradcheck
