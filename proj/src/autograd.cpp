#include "ssmprune/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "ssmprune/error.hpp"

namespace ssmprune {

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("Var is not attached to a tape");
  return tape->value(id);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, Backward backward) {
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw ContractError("tape: input node recorded after its consumer");
  }
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward)});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  if (id >= nodes_.size()) throw ContractError("tape: node " + std::to_string(id) + " not on tape");
  return nodes_[id].value;
}

void Tape::accumulate(std::size_t id, const Tensor& grad) {
  auto& g = grads_.at(id);
  if (grad.shape() != nodes_[id].value.shape()) {
    throw DimensionError("tape: gradient shape " + shape_str(grad.shape()) + " for node of shape " +
                         shape_str(nodes_[id].value.shape()));
  }
  if (g.empty()) {
    g = grad;
    return;
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(g.numel()); ++i) g[i] += grad[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) {
    throw ContractError("backward: loss node is not on this tape");
  }
  if (nodes_[loss.id].value.numel() != 1) {
    throw DimensionError("backward: loss must be scalar, got " +
                         shape_str(nodes_[loss.id].value.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  grads_[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0F);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || grads_[i].empty()) continue;
    node.backward(grads_[i], *this);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractError("grad: node not on this tape");
  if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
  return Tensor(nodes_[v.id].value.shape());
}

namespace ad {

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  Tensor out = ssmprune::matmul(a.value(), b.value());
  return tape.record(std::move(out), {a.id, b.id}, [a, b](const Tensor& g, Tape& t) {
    t.accumulate(a.id, ssmprune::matmul(g, ssmprune::transpose(t.value(b.id))));
    t.accumulate(b.id, ssmprune::matmul(ssmprune::transpose(t.value(a.id)), g));
  });
}

Var transpose(Var a) {
  return a.tape->record(ssmprune::transpose(a.value()), {a.id}, [a](const Tensor& g, Tape& t) {
    t.accumulate(a.id, ssmprune::transpose(g));
  });
}

Var conv1d_depthwise_causal(Var x, Var w, Var bias) {
  Tape& tape = same_tape(x, w);
  same_tape(x, bias);
  Tensor out = ssmprune::conv1d_depthwise_causal(x.value(), w.value(), bias.value());
  return tape.record(std::move(out), {x.id, w.id, bias.id}, [x, w, bias](const Tensor& g, Tape& t) {
    const Tensor& xv = t.value(x.id);
    const Tensor& wv = t.value(w.id);
    const auto channels = xv.dim(0);
    const auto steps = xv.dim(1);
    const auto taps = wv.dim(1);
    Tensor gx(xv.shape());
    Tensor gw(wv.shape());
    Tensor gb({channels});
    for (std::int64_t c = 0; c < channels; ++c) {
      double bsum = 0.0;
      for (std::int64_t s = 0; s < steps; ++s) {
        const float gy = g.at(c, s);
        bsum += gy;
        for (std::int64_t k = 0; k < taps; ++k) {
          const auto src = s - taps + 1 + k;
          if (src < 0) continue;
          gx.at(c, src) += wv.at(c, k) * gy;
          gw.at(c, k) += xv.at(c, src) * gy;
        }
      }
      gb[static_cast<std::size_t>(c)] = static_cast<float>(bsum);
    }
    t.accumulate(x.id, gx);
    t.accumulate(w.id, gw);
    t.accumulate(bias.id, gb);
  });
}

Var silu(Var x) {
  return x.tape->record(ssmprune::silu(x.value()), {x.id}, [x](const Tensor& g, Tape& t) {
    const Tensor& xv = t.value(x.id);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < static_cast<std::size_t>(xv.numel()); ++i) {
      const float s = sigmoid(xv[i]);
      gx[i] = g[i] * s * (1.0F + xv[i] * (1.0F - s));
    }
    t.accumulate(x.id, gx);
  });
}

Var softplus(Var x) {
  return x.tape->record(ssmprune::softplus(x.value()), {x.id}, [x](const Tensor& g, Tape& t) {
    const Tensor& xv = t.value(x.id);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < static_cast<std::size_t>(xv.numel()); ++i) {
      gx[i] = g[i] * (xv[i] > 20.0F ? 1.0F : sigmoid(xv[i]));
    }
    t.accumulate(x.id, gx);
  });
}

Var exp(Var x) {
  Tensor out = ssmprune::exp(x.value());
  const std::size_t out_id = x.tape->size();
  return x.tape->record(std::move(out), {x.id}, [x, out_id](const Tensor& g, Tape& t) {
    t.accumulate(x.id, ssmprune::mul(g, t.value(out_id)));
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  return tape.record(ssmprune::mul(a.value(), b.value()), {a.id, b.id},
                     [a, b](const Tensor& g, Tape& t) {
                       t.accumulate(a.id, ssmprune::mul(g, t.value(b.id)));
                       t.accumulate(b.id, ssmprune::mul(g, t.value(a.id)));
                     });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  return tape.record(ssmprune::add(a.value(), b.value()), {a.id, b.id},
                     [a, b](const Tensor& g, Tape& t) {
                       t.accumulate(a.id, g);
                       t.accumulate(b.id, g);
                     });
}

Var rmsnorm(Var x, Var weight, float eps, std::int64_t group_size, std::int64_t divisor) {
  Tape& tape = same_tape(x, weight);
  Tensor out = ssmprune::rmsnorm(x.value(), weight.value(), eps, group_size, divisor);
  const auto d = x.shape().back();
  if (group_size == 0) group_size = d;
  if (divisor == 0) divisor = group_size;
  return tape.record(
      std::move(out), {x.id, weight.id},
      [x, weight, eps, group_size, divisor, d](const Tensor& g, Tape& t) {
        const Tensor& xv = t.value(x.id);
        const Tensor& wv = t.value(weight.id);
        Tensor gx(xv.shape());
        Tensor gw(wv.shape());
        const auto rows = xv.numel() / d;
        const double div = static_cast<double>(divisor);
        for (std::int64_t r = 0; r < rows; ++r) {
          const float* xr = xv.data() + r * d;
          const float* gr = g.data() + r * d;
          float* gxr = gx.data() + r * d;
          for (std::int64_t g0 = 0; g0 < d; g0 += group_size) {
            double ss = 0.0;
            double dot = 0.0;
            for (std::int64_t i = g0; i < g0 + group_size; ++i) {
              ss += static_cast<double>(xr[i]) * xr[i];
              dot += static_cast<double>(gr[i]) * wv[static_cast<std::size_t>(i)] * xr[i];
            }
            const double inv = 1.0 / std::sqrt(ss / div + eps);
            const double inv3 = inv * inv * inv;
            for (std::int64_t i = g0; i < g0 + group_size; ++i) {
              const auto iu = static_cast<std::size_t>(i);
              const double gi = static_cast<double>(gr[i]);
              const double xi = static_cast<double>(xr[i]);
              gw[iu] += static_cast<float>(gi * xi * inv);
              gxr[i] = static_cast<float>(static_cast<double>(wv[iu]) * gi * inv - xi * inv3 * dot / div);
            }
          }
        }
        t.accumulate(x.id, gx);
        t.accumulate(weight.id, gw);
      });
}

Var slice_cols(Var a, std::int64_t begin, std::int64_t end) {
  return a.tape->record(ssmprune::slice_cols(a.value(), begin, end), {a.id},
                        [a, begin, end](const Tensor& g, Tape& t) {
                          const Tensor& av = t.value(a.id);
                          Tensor ga(av.shape());
                          const auto w = end - begin;
                          for (std::int64_t i = 0; i < av.dim(0); ++i)
                            for (std::int64_t j = 0; j < w; ++j) ga.at(i, begin + j) = g.at(i, j);
                          t.accumulate(a.id, ga);
                        });
}

Var reshape(Var a, Shape shape) {
  return a.tape->record(a.value().reshaped(std::move(shape)), {a.id},
                        [a](const Tensor& g, Tape& t) {
                          t.accumulate(a.id, g.reshaped(t.value(a.id).shape()));
                        });
}

Var add_row_bias(Var a, Var bias) {
  Tape& tape = same_tape(a, bias);
  return tape.record(ssmprune::add_row_bias(a.value(), bias.value()), {a.id, bias.id},
                     [a, bias](const Tensor& g, Tape& t) {
                       t.accumulate(a.id, g);
                       Tensor gb(t.value(bias.id).shape());
                       for (std::int64_t i = 0; i < g.dim(0); ++i)
                         for (std::int64_t j = 0; j < g.dim(1); ++j)
                           gb[static_cast<std::size_t>(j)] += g.at(i, j);
                       t.accumulate(bias.id, gb);
                     });
}

Var sum(Var a) {
  return a.tape->record(ssmprune::sum(a.value()), {a.id}, [a](const Tensor& g, Tape& t) {
    t.accumulate(a.id, Tensor(t.value(a.id).shape(), g[0]));
  });
}

Var embedding_lookup(Var table, std::span<const std::uint32_t> ids) {
  std::vector<std::uint32_t> kept(ids.begin(), ids.end());
  return table.tape->record(
      ssmprune::embedding_lookup(table.value(), ids), {table.id},
      [table, kept = std::move(kept)](const Tensor& g, Tape& t) {
        Tensor gt(t.value(table.id).shape());
        const auto d = gt.dim(1);
        for (std::size_t s = 0; s < kept.size(); ++s)
          for (std::int64_t j = 0; j < d; ++j)
            gt.at(kept[s], j) += g.at(static_cast<std::int64_t>(s), j);
        t.accumulate(table.id, gt);
      });
}

Var cross_entropy_mean(Var logits, std::span<const std::uint32_t> targets) {
  std::vector<std::uint32_t> kept(targets.begin(), targets.end());
  return logits.tape->record(
      ssmprune::cross_entropy_mean(logits.value(), targets), {logits.id},
      [logits, kept = std::move(kept)](const Tensor& g, Tape& t) {
        const Tensor& lv = t.value(logits.id);
        const auto steps = lv.dim(0);
        const auto vocab = lv.dim(1);
        Tensor gl(lv.shape());
        const double scale_factor = g[0] / static_cast<double>(steps);
        for (std::int64_t s = 0; s < steps; ++s) {
          const float* row = lv.data() + s * vocab;
          const float mx = *std::max_element(row, row + vocab);
          double z = 0.0;
          for (std::int64_t v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
          for (std::int64_t v = 0; v < vocab; ++v) {
            double p = std::exp(static_cast<double>(row[v]) - mx) / z;
            if (v == static_cast<std::int64_t>(kept[static_cast<std::size_t>(s)])) p -= 1.0;
            gl.at(s, v) = static_cast<float>(p * scale_factor);
          }
        }
        t.accumulate(logits.id, gl);
      });
}

}  // namespace ad

}  // namespace ssmprune
