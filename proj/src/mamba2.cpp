#include "ssmprune/mamba2.hpp"

#include <string>

#include "ssmprune/error.hpp"

namespace ssmprune {

const char* head_pattern_name(HeadPattern pattern) {
  switch (pattern) {
    case HeadPattern::MultiHead:
      return "multi-head";
    case HeadPattern::GroupedValue:
      return "grouped-value";
    case HeadPattern::MultiValue:
      return "multi-value";
  }
  return "unknown";
}

HeadPattern LayerDims::pattern() const {
  if (n_groups == n_heads) return HeadPattern::MultiHead;
  if (n_groups == 1) return HeadPattern::MultiValue;
  return HeadPattern::GroupedValue;
}

ModelDims ModelDims::uniform(std::int64_t d_model, std::int64_t n_layers, std::int64_t n_heads,
                             std::int64_t head_dim, std::int64_t d_state, std::int64_t n_groups,
                             std::int64_t d_conv, std::int64_t vocab_size, bool has_mlp,
                             std::int64_t d_mlp) {
  ModelDims dims;
  dims.d_model = d_model;
  dims.d_conv = d_conv;
  dims.vocab_size = vocab_size;
  dims.has_mlp = has_mlp;
  dims.d_mlp = has_mlp ? d_mlp : 0;
  LayerDims layer{n_heads, head_dim, d_state, n_groups, 0, false};
  layer.rms_width = n_groups > 0 ? n_heads * head_dim / n_groups : 0;
  dims.layers.assign(static_cast<std::size_t>(n_layers), layer);
  dims.validate();
  return dims;
}

void ModelDims::validate() const {
  auto fail = [](const std::string& what) { throw DimensionError("invalid dims: " + what); };
  if (d_model <= 0) fail("d_model must be positive");
  if (d_conv <= 0) fail("d_conv must be positive");
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (has_mlp && d_mlp <= 0) fail("d_mlp must be positive when has_mlp is set");
  if (!has_mlp && d_mlp != 0) fail("d_mlp must be 0 when has_mlp is unset");
  if (layers.empty()) fail("n_layers must be positive");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string at = " (layer " + std::to_string(i) + ")";
    if (l.n_heads <= 0 || l.head_dim <= 0 || l.d_state <= 0 || l.n_groups <= 0) {
      fail("head/state/group extents must be positive" + at);
    }
    if (l.n_heads % l.n_groups != 0) fail("n_heads must be a multiple of n_groups" + at);
    if (l.rms_width <= 0) fail("rms_width must be positive" + at);
  }
}

std::string layer_prefix(std::int64_t layer) { return "layers." + std::to_string(layer) + "."; }

namespace {

void expect_shape(const Tensor& t, const Shape& want, const std::string& name) {
  if (t.shape() != want) {
    throw DimensionError(name + " has shape " + shape_str(t.shape()) + ", expected " +
                         shape_str(want));
  }
}

}  // namespace

void validate_model(const Model& model) {
  const auto& dims = model.dims;
  dims.validate();
  const auto& p = model.params;
  expect_shape(p.embedding, {dims.vocab_size, dims.d_model}, "embedding.weight");
  expect_shape(p.norm_f, {dims.d_model}, "norm_f.weight");
  if (static_cast<std::int64_t>(p.layers.size()) != dims.n_layers()) {
    throw DimensionError("model has " + std::to_string(p.layers.size()) + " layers, dims say " +
                         std::to_string(dims.n_layers()));
  }
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    const auto& l = dims.layers[static_cast<std::size_t>(i)];
    const auto& b = p.layers[static_cast<std::size_t>(i)];
    const auto pre = layer_prefix(i);
    expect_shape(b.in_proj, {dims.d_model, l.in_proj_width()}, pre + "in_proj.weight");
    expect_shape(b.conv_w, {l.conv_channels(), dims.d_conv}, pre + "conv1d.weight");
    expect_shape(b.conv_b, {l.conv_channels()}, pre + "conv1d.bias");
    expect_shape(b.a_log, {l.n_heads}, pre + "A_log");
    expect_shape(b.d, {l.n_heads}, pre + "D");
    expect_shape(b.dt_bias, {l.n_heads}, pre + "dt_bias");
    expect_shape(b.norm_w, {l.d_inner()}, pre + "norm.weight");
    expect_shape(b.out_proj, {l.d_inner(), dims.d_model}, pre + "out_proj.weight");
    if (b.out_bias.has_value() != l.out_bias) {
      throw DimensionError(pre + "out_proj.bias presence disagrees with dims");
    }
    if (b.out_bias) expect_shape(*b.out_bias, {dims.d_model}, pre + "out_proj.bias");
    if (b.mlp.has_value() != dims.has_mlp) {
      throw DimensionError(pre + "mlp presence disagrees with dims");
    }
    if (b.mlp) {
      expect_shape(b.mlp->gate, {dims.d_model, dims.d_mlp}, pre + "mlp.gate.weight");
      expect_shape(b.mlp->up, {dims.d_model, dims.d_mlp}, pre + "mlp.up.weight");
      expect_shape(b.mlp->down, {dims.d_mlp, dims.d_model}, pre + "mlp.down.weight");
    }
  }
}

HeadView::HeadView(const LayerDims& dims) : dims_(dims) {
  if (dims.n_heads <= 0 || dims.n_groups <= 0 || dims.n_heads % dims.n_groups != 0) {
    throw DimensionError("HeadView: invalid head/group counts");
  }
}

Range HeadView::z_section() const { return {0, dims_.d_inner()}; }
Range HeadView::x_section() const { return {dims_.d_inner(), 2 * dims_.d_inner()}; }
Range HeadView::b_section() const {
  const auto b0 = 2 * dims_.d_inner();
  return {b0, b0 + dims_.n_groups * dims_.d_state};
}
Range HeadView::c_section() const {
  const auto c0 = b_section().end;
  return {c0, c0 + dims_.n_groups * dims_.d_state};
}
Range HeadView::dt_section() const {
  const auto d0 = c_section().end;
  return {d0, d0 + dims_.n_heads};
}

Range HeadView::z_cols(std::int64_t h) const {
  return {h * dims_.head_dim, (h + 1) * dims_.head_dim};
}
Range HeadView::x_cols(std::int64_t h) const {
  const auto r = z_cols(h);
  return {r.begin + dims_.d_inner(), r.end + dims_.d_inner()};
}
Range HeadView::b_cols(std::int64_t g) const {
  const auto b0 = b_section().begin;
  return {b0 + g * dims_.d_state, b0 + (g + 1) * dims_.d_state};
}
Range HeadView::c_cols(std::int64_t g) const {
  const auto c0 = c_section().begin;
  return {c0 + g * dims_.d_state, c0 + (g + 1) * dims_.d_state};
}
Range HeadView::dt_col(std::int64_t h) const {
  const auto d0 = dt_section().begin;
  return {d0 + h, d0 + h + 1};
}

Range HeadView::conv_x(std::int64_t h) const { return z_cols(h); }
Range HeadView::conv_b(std::int64_t g) const {
  const auto b0 = dims_.d_inner();
  return {b0 + g * dims_.d_state, b0 + (g + 1) * dims_.d_state};
}
Range HeadView::conv_c(std::int64_t g) const {
  const auto c0 = dims_.d_inner() + dims_.n_groups * dims_.d_state;
  return {c0 + g * dims_.d_state, c0 + (g + 1) * dims_.d_state};
}

Range HeadView::out_rows(std::int64_t h) const { return z_cols(h); }

InProjSlices split_in_proj(const BlockParams& params, const LayerDims& dims) {
  if (params.in_proj.rank() != 2 || params.in_proj.dim(1) != dims.in_proj_width()) {
    throw DimensionError("split_in_proj: in_proj " + shape_str(params.in_proj.shape()) +
                         " does not have width 2HP+2GN+H = " +
                         std::to_string(dims.in_proj_width()));
  }
  const HeadView view(dims);
  auto take = [&](Range r) { return slice_cols(params.in_proj, r.begin, r.end); };
  return {take(view.z_section()), take(view.x_section()), take(view.b_section()),
          take(view.c_section()), take(view.dt_section())};
}

}  // namespace ssmprune
