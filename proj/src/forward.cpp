// Block and model forward passes. One generic definition serves both the
// eager path (plain tensors, no tape) and the taped path used for gradients.

#include <string>

#include "ssmprune/error.hpp"
#include "ssmprune/mamba2.hpp"

namespace ssmprune {

namespace {

struct EagerOps {
  using Value = Tensor;
  static constexpr bool kObservable = true;

  static const Shape& shape(const Tensor& t) { return t.shape(); }
  static Tensor matmul(const Tensor& a, const Tensor& b) { return ssmprune::matmul(a, b); }
  static Tensor transpose(const Tensor& a) { return ssmprune::transpose(a); }
  static Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    return conv1d_depthwise_causal(x, w, b);
  }
  static Tensor silu(const Tensor& x) { return ssmprune::silu(x); }
  static Tensor mul(const Tensor& a, const Tensor& b) { return ssmprune::mul(a, b); }
  static Tensor add(const Tensor& a, const Tensor& b) { return ssmprune::add(a, b); }
  static Tensor rmsnorm(const Tensor& x, const Tensor& w, float eps, std::int64_t group,
                        std::int64_t divisor) {
    return ssmprune::rmsnorm(x, w, eps, group, divisor);
  }
  static Tensor slice_cols(const Tensor& a, std::int64_t b, std::int64_t e) {
    return ssmprune::slice_cols(a, b, e);
  }
  static Tensor reshape(const Tensor& a, Shape s) { return a.reshaped(std::move(s)); }
  static Tensor add_row_bias(const Tensor& a, const Tensor& b) {
    return ssmprune::add_row_bias(a, b);
  }
  static Tensor ssd(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& dt,
                    const Tensor& a_log, const Tensor& d, const Tensor& dt_bias, const Tensor& h0) {
    return ssd_sequential(x, b, c, dt, a_log, d, dt_bias, h0).y;
  }
  static Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
    return embedding_lookup(table, ids);
  }
};

struct TapeOps {
  using Value = Var;
  static constexpr bool kObservable = false;

  static const Shape& shape(const Var& v) { return v.shape(); }
  static Var matmul(Var a, Var b) { return ad::matmul(a, b); }
  static Var transpose(Var a) { return ad::transpose(a); }
  static Var conv1d(Var x, Var w, Var b) { return ad::conv1d_depthwise_causal(x, w, b); }
  static Var silu(Var x) { return ad::silu(x); }
  static Var mul(Var a, Var b) { return ad::mul(a, b); }
  static Var add(Var a, Var b) { return ad::add(a, b); }
  static Var rmsnorm(Var x, Var w, float eps, std::int64_t group, std::int64_t divisor) {
    return ad::rmsnorm(x, w, eps, group, divisor);
  }
  static Var slice_cols(Var a, std::int64_t b, std::int64_t e) { return ad::slice_cols(a, b, e); }
  static Var reshape(Var a, Shape s) { return ad::reshape(a, std::move(s)); }
  static Var add_row_bias(Var a, Var b) { return ad::add_row_bias(a, b); }
  static Var ssd(Var x, Var b, Var c, Var dt, Var a_log, Var d, Var dt_bias, const Tensor& h0) {
    return ad::ssd_sequential(x, b, c, dt, a_log, d, dt_bias, h0).y;
  }
  static Var embedding(Var table, std::span<const std::uint32_t> ids) {
    return ad::embedding_lookup(table, ids);
  }
};

template <class Ops>
void observe(const LinearObserver* observer, const std::string& name,
             const typename Ops::Value& input) {
  if constexpr (Ops::kObservable) {
    if (observer != nullptr && *observer) (*observer)(name, input);
  }
}

template <class Ops, class Block>
typename Ops::Value block_forward_generic(const Block& p, const LayerDims& ld,
                                          const ModelDims& md, const typename Ops::Value& u,
                                          const LinearObserver* observer,
                                          const std::string& prefix) {
  using V = typename Ops::Value;
  const auto& ushape = Ops::shape(u);
  if (ushape.size() != 2 || ushape[1] != md.d_model) {
    throw DimensionError("block_forward: input " + shape_str(ushape) + " is not [T, d_model]");
  }
  const std::int64_t steps = ushape[0];
  const HeadView view(ld);
  const auto hp = ld.d_inner();
  const auto gn = ld.n_groups * ld.d_state;

  observe<Ops>(observer, prefix + "in_proj", u);
  V proj = Ops::matmul(u, p.in_proj);
  V z = Ops::slice_cols(proj, view.z_section().begin, view.z_section().end);
  V xbc = Ops::slice_cols(proj, view.x_section().begin, view.c_section().end);
  V dt = Ops::slice_cols(proj, view.dt_section().begin, view.dt_section().end);

  // Depthwise causal conv runs over [x | B | C] channels only.
  V conv = Ops::silu(Ops::transpose(Ops::conv1d(Ops::transpose(xbc), p.conv_w, p.conv_b)));
  V x = Ops::reshape(Ops::slice_cols(conv, 0, hp), {steps, ld.n_heads, ld.head_dim});
  V b = Ops::reshape(Ops::slice_cols(conv, hp, hp + gn), {steps, ld.n_groups, ld.d_state});
  V c = Ops::reshape(Ops::slice_cols(conv, hp + gn, hp + 2 * gn), {steps, ld.n_groups, ld.d_state});

  const Tensor h0({ld.n_heads, ld.head_dim, ld.d_state});
  V y = Ops::reshape(Ops::ssd(x, b, c, dt, p.a_log, p.d, p.dt_bias, h0), {steps, hp});
  V gated = Ops::mul(y, Ops::silu(z));
  V normed = Ops::rmsnorm(gated, p.norm_w, md.norm_eps, ld.norm_group_size(), ld.rms_width);

  observe<Ops>(observer, prefix + "out_proj", normed);
  V mixed = Ops::matmul(normed, p.out_proj);
  if (p.out_bias) mixed = Ops::add_row_bias(mixed, *p.out_bias);
  V h = Ops::add(u, mixed);

  if (p.mlp) {
    observe<Ops>(observer, prefix + "mlp.gate", h);
    observe<Ops>(observer, prefix + "mlp.up", h);
    V act = Ops::mul(Ops::silu(Ops::matmul(h, p.mlp->gate)), Ops::matmul(h, p.mlp->up));
    observe<Ops>(observer, prefix + "mlp.down", act);
    h = Ops::add(h, Ops::matmul(act, p.mlp->down));
  }
  return h;
}

template <class Ops, class Params>
typename Ops::Value model_forward_generic(const Params& p, const ModelDims& dims,
                                          std::span<const std::uint32_t> tokens,
                                          const LinearObserver* observer) {
  using V = typename Ops::Value;
  if (tokens.empty()) throw ContractError("model_forward: empty token sequence");
  for (auto id : tokens) {
    if (static_cast<std::int64_t>(id) >= dims.vocab_size) {
      throw ContractError("model_forward: token id " + std::to_string(id) +
                          " out of range for vocab " + std::to_string(dims.vocab_size));
    }
  }
  V h = Ops::embedding(p.embedding, tokens);
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    h = block_forward_generic<Ops>(p.layers[static_cast<std::size_t>(i)],
                                   dims.layers[static_cast<std::size_t>(i)], dims, h, observer,
                                   layer_prefix(i));
  }
  V normed = Ops::rmsnorm(h, p.norm_f, dims.norm_eps, 0, 0);
  observe<Ops>(observer, "lm_head", normed);
  return Ops::matmul(normed, Ops::transpose(p.embedding));
}

}  // namespace

Tensor block_forward(const BlockParams& params, const LayerDims& layer, const ModelDims& dims,
                     const Tensor& u) {
  return block_forward_generic<EagerOps>(params, layer, dims, u, nullptr, "");
}

Tensor model_forward(const Model& model, std::span<const std::uint32_t> tokens,
                     const LinearObserver* observer) {
  return model_forward_generic<EagerOps>(model.params, model.dims, tokens, observer);
}

double sequence_loss(const Model& model, std::span<const std::uint32_t> tokens) {
  if (tokens.size() < 2) throw ContractError("sequence_loss: need at least two tokens");
  const Tensor logits = model_forward(model, tokens.first(tokens.size() - 1));
  return cross_entropy_mean(logits, tokens.subspan(1))[0];
}

namespace ad {

ModelVars record_params(Tape& tape, const Model& model) {
  const auto& p = model.params;
  ModelVars vars{tape.leaf(p.embedding), tape.leaf(p.norm_f), {}};
  for (const auto& b : p.layers) {
    BlockVars bv{tape.leaf(b.in_proj), tape.leaf(b.conv_w), tape.leaf(b.conv_b),
                 tape.leaf(b.a_log),   tape.leaf(b.d),      tape.leaf(b.dt_bias),
                 tape.leaf(b.norm_w),  tape.leaf(b.out_proj), std::nullopt, std::nullopt};
    if (b.out_bias) bv.out_bias = tape.leaf(*b.out_bias);
    if (b.mlp) bv.mlp = MlpVars{tape.leaf(b.mlp->gate), tape.leaf(b.mlp->up), tape.leaf(b.mlp->down)};
    vars.layers.push_back(bv);
  }
  return vars;
}

Var block_forward(const BlockVars& params, const LayerDims& layer, const ModelDims& dims, Var u) {
  return block_forward_generic<TapeOps>(params, layer, dims, u, nullptr, "");
}

Var model_forward(const ModelVars& params, const ModelDims& dims,
                  std::span<const std::uint32_t> tokens) {
  return model_forward_generic<TapeOps>(params, dims, tokens, nullptr);
}

Var sequence_loss(const ModelVars& params, const ModelDims& dims,
                  std::span<const std::uint32_t> tokens) {
  if (tokens.size() < 2) throw ContractError("sequence_loss: need at least two tokens");
  Var logits = model_forward(params, dims, tokens.first(tokens.size() - 1));
  return cross_entropy_mean(logits, tokens.subspan(1));
}

}  // namespace ad

}  // namespace ssmprune
