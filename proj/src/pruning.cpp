#include "ssmprune/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <tuple>

#include "ssmprune/error.hpp"
#include "ssmprune/parallel.hpp"

namespace ssmprune {

namespace {

using Index = std::vector<std::int64_t>;

constexpr double kCountSlack = 1e-9;

Index iota_index(std::int64_t n) {
  Index v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void check_index_list(const Index& list, std::int64_t extent, const std::string& what) {
  if (list.empty()) throw ContractError(what + ": keeps nothing");
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (list[i] < 0 || list[i] >= extent) {
      throw ContractError(what + ": index " + std::to_string(list[i]) + " outside [0, " +
                          std::to_string(extent) + ")");
    }
    if (i > 0 && list[i] <= list[i - 1]) throw ContractError(what + ": indices not strictly increasing");
  }
}

void check_ratio(double ratio, const char* where) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ContractError(std::string(where) + ": ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
}

bool is_power_of_two(std::int64_t f) { return f > 0 && (f & (f - 1)) == 0; }

Tensor gather_cols(const Tensor& a, const Index& cols) {
  Tensor out({a.dim(0), static_cast<std::int64_t>(cols.size())});
  for (std::int64_t r = 0; r < a.dim(0); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) out.at(r, static_cast<std::int64_t>(c)) = a.at(r, cols[c]);
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const Index& rows) {
  const auto width = a.numel() / std::max<std::int64_t>(a.dim(0), 1);
  Shape shape = a.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(a.data() + rows[r] * width, width, out.data() + static_cast<std::int64_t>(r) * width);
  }
  return out;
}

// Resolved index selection of one block, in new-axis order.
struct Selection {
  Index heads;
  Index groups;
  std::vector<Index> headdims;  // per kept head
  std::vector<Index> states;    // per kept group
  LayerDims dims;
};

Selection resolve_selection(const LayerDims& l, const LayerPlan& p, const std::string& where) {
  Selection s;
  s.heads = p.kept_heads ? *p.kept_heads : iota_index(l.n_heads);
  s.groups = p.kept_groups ? *p.kept_groups : iota_index(l.n_groups);
  check_index_list(s.heads, l.n_heads, where + " kept_heads");
  check_index_list(s.groups, l.n_groups, where + " kept_groups");
  if (p.kept_headdims && static_cast<std::int64_t>(p.kept_headdims->size()) != l.n_heads) {
    throw ContractError(where + " kept_headdims needs one list per head (" + std::to_string(l.n_heads) + ")");
  }
  if (p.kept_states && static_cast<std::int64_t>(p.kept_states->size()) != l.n_groups) {
    throw ContractError(where + " kept_states needs one list per group (" + std::to_string(l.n_groups) + ")");
  }
  for (auto h : s.heads) {
    s.headdims.push_back(p.kept_headdims ? (*p.kept_headdims)[static_cast<std::size_t>(h)]
                                         : iota_index(l.head_dim));
    check_index_list(s.headdims.back(), l.head_dim, where + " kept_headdims[" + std::to_string(h) + "]");
    if (s.headdims.back().size() != s.headdims.front().size()) {
      throw ContractError(where + " kept_headdims: heads keep different channel counts");
    }
  }
  for (auto g : s.groups) {
    s.states.push_back(p.kept_states ? (*p.kept_states)[static_cast<std::size_t>(g)] : iota_index(l.d_state));
    check_index_list(s.states.back(), l.d_state, where + " kept_states[" + std::to_string(g) + "]");
    if (s.states.back().size() != s.states.front().size()) {
      throw ContractError(where + " kept_states: groups keep different state counts");
    }
  }
  const auto h_new = static_cast<std::int64_t>(s.heads.size());
  const auto g_new = static_cast<std::int64_t>(s.groups.size());
  if (h_new % g_new != 0) {
    throw ContractError(where + ": kept head count " + std::to_string(h_new) +
                        " is not a multiple of kept group count " + std::to_string(g_new));
  }
  for (std::int64_t k = 0; k < h_new; ++k) {
    if (l.group_of(s.heads[static_cast<std::size_t>(k)]) != s.groups[static_cast<std::size_t>(k * g_new / h_new)]) {
      throw ContractError(where + ": kept heads do not map onto kept groups contiguously");
    }
  }
  s.dims = l;
  s.dims.n_heads = h_new;
  s.dims.n_groups = g_new;
  s.dims.head_dim = static_cast<std::int64_t>(s.headdims.front().size());
  s.dims.d_state = static_cast<std::int64_t>(s.states.front().size());
  const auto old_hpg = l.heads_per_group();
  const auto new_hpg = h_new / g_new;
  if ((l.rms_width * new_hpg) % old_hpg != 0) {
    throw ContractError(where + ": norm width " + std::to_string(l.rms_width) + " cannot follow " +
                        std::to_string(old_hpg) + " -> " + std::to_string(new_hpg) + " heads per group");
  }
  s.dims.rms_width = l.rms_width * new_hpg / old_hpg;
  return s;
}

LayerDims merged_dims(const LayerDims& l, std::int64_t f, const std::string& where) {
  if (f <= 0) throw ContractError(where + ": merge factor must be positive, got " + std::to_string(f));
  if (!is_power_of_two(f)) throw ContractError(where + ": merge factor " + std::to_string(f) + " is not a power of 2");
  if (f == 1) return l;
  LayerDims out = l;
  if (l.n_groups > 1) {
    if (l.n_groups % f != 0) {
      throw ContractError(where + ": " + std::to_string(l.n_groups) + " groups not divisible by " + std::to_string(f));
    }
    out.n_groups = l.n_groups / f;
    out.rms_width = l.rms_width * f;
  } else {
    if (l.n_heads % f != 0) {
      throw ContractError(where + ": " + std::to_string(l.n_heads) + " heads not divisible by " + std::to_string(f));
    }
    if (l.rms_width % f != 0) throw ContractError(where + ": norm width not divisible by merge factor");
    out.n_heads = l.n_heads / f;
    out.rms_width = l.rms_width / f;
  }
  return out;
}

const std::set<std::string>& mask_names() {
  static const std::set<std::string> names{"in_proj.weight", "out_proj.weight", "mlp.gate.weight",
                                           "mlp.up.weight", "mlp.down.weight"};
  return names;
}

void check_mask(const Index& mask, std::int64_t numel, const std::string& what) {
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] >= numel) throw ContractError(what + ": mask index out of range");
    if (i > 0 && mask[i] <= mask[i - 1]) throw ContractError(what + ": mask indices not strictly increasing");
  }
}

BlockParams apply_selection(const BlockParams& b, const LayerDims& l, const Selection& s) {
  const HeadView v(l);
  Index z, x, bc_b, bc_c, dt, conv_x, conv_b, conv_c, rows;
  for (std::size_t k = 0; k < s.heads.size(); ++k) {
    const auto h = s.heads[k];
    for (auto p : s.headdims[k]) {
      z.push_back(v.z_cols(h).begin + p);
      x.push_back(v.x_cols(h).begin + p);
      conv_x.push_back(v.conv_x(h).begin + p);
      rows.push_back(v.out_rows(h).begin + p);
    }
    dt.push_back(v.dt_col(h).begin);
  }
  for (std::size_t k = 0; k < s.groups.size(); ++k) {
    const auto g = s.groups[k];
    for (auto n : s.states[k]) {
      bc_b.push_back(v.b_cols(g).begin + n);
      bc_c.push_back(v.c_cols(g).begin + n);
      conv_b.push_back(v.conv_b(g).begin + n);
      conv_c.push_back(v.conv_c(g).begin + n);
    }
  }
  Index in_cols;
  for (const Index* part : {&z, &x, &bc_b, &bc_c, &dt}) in_cols.insert(in_cols.end(), part->begin(), part->end());
  Index conv;
  for (const Index* part : {&conv_x, &conv_b, &conv_c}) conv.insert(conv.end(), part->begin(), part->end());
  BlockParams out;
  out.in_proj = gather_cols(b.in_proj, in_cols);
  out.conv_w = gather_rows(b.conv_w, conv);
  out.conv_b = gather_rows(b.conv_b, conv);
  out.a_log = gather_rows(b.a_log, s.heads);
  out.d = gather_rows(b.d, s.heads);
  out.dt_bias = gather_rows(b.dt_bias, s.heads);
  out.norm_w = gather_rows(b.norm_w, rows);
  out.out_proj = gather_rows(b.out_proj, rows);
  out.out_bias = b.out_bias;
  out.mlp = b.mlp;
  return out;
}

// Mean of columns (or rows/elements) over `f` consecutive blocks.
void pool_cols(const Tensor& src, Tensor& dst, std::int64_t src_col, std::int64_t dst_col, std::int64_t stride,
               std::int64_t f) {
  for (std::int64_t r = 0; r < src.dim(0); ++r) {
    double acc = 0.0;
    for (std::int64_t k = 0; k < f; ++k) acc += src.at(r, src_col + k * stride);
    dst.at(r, dst_col) = static_cast<float>(acc / static_cast<double>(f));
  }
}

void pool_rows(const Tensor& src, Tensor& dst, std::int64_t src_row, std::int64_t dst_row, std::int64_t stride,
               std::int64_t f, bool sum) {
  const auto width = src.numel() / src.dim(0);
  for (std::int64_t c = 0; c < width; ++c) {
    double acc = 0.0;
    for (std::int64_t k = 0; k < f; ++k) acc += src.data()[(src_row + k * stride) * width + c];
    dst.data()[dst_row * width + c] = static_cast<float>(sum ? acc : acc / static_cast<double>(f));
  }
}

BlockParams apply_merge(const BlockParams& b, const LayerDims& l, const LayerDims& m, std::int64_t f,
                        std::int64_t d_model, std::int64_t d_conv) {
  if (f == 1) return b;
  const HeadView v(l);
  const HeadView w(m);
  BlockParams out = b;
  out.in_proj = Tensor({d_model, m.in_proj_width()});
  out.conv_w = Tensor({m.conv_channels(), d_conv});
  out.conv_b = Tensor({m.conv_channels()});
  // Copies column ranges that the merge leaves alone.
  auto copy_cols = [&](Range from, Range to) {
    for (std::int64_t r = 0; r < d_model; ++r) {
      for (std::int64_t c = 0; c < from.size(); ++c) out.in_proj.at(r, to.begin + c) = b.in_proj.at(r, from.begin + c);
    }
  };
  auto copy_conv = [&](Range from, Range to) {
    for (std::int64_t c = 0; c < from.size(); ++c) {
      for (std::int64_t k = 0; k < d_conv; ++k) out.conv_w.at(to.begin + c, k) = b.conv_w.at(from.begin + c, k);
      out.conv_b[static_cast<std::size_t>(to.begin + c)] = b.conv_b[static_cast<std::size_t>(from.begin + c)];
    }
  };
  if (l.n_groups > 1) {
    copy_cols(v.z_section(), w.z_section());
    copy_cols(v.x_section(), w.x_section());
    copy_cols(v.dt_section(), w.dt_section());
    copy_conv({0, l.d_inner()}, {0, m.d_inner()});
    for (std::int64_t g = 0; g < m.n_groups; ++g) {
      for (std::int64_t n = 0; n < l.d_state; ++n) {
        pool_cols(b.in_proj, out.in_proj, v.b_cols(g * f).begin + n, w.b_cols(g).begin + n, l.d_state, f);
        pool_cols(b.in_proj, out.in_proj, v.c_cols(g * f).begin + n, w.c_cols(g).begin + n, l.d_state, f);
        pool_rows(b.conv_w, out.conv_w, v.conv_b(g * f).begin + n, w.conv_b(g).begin + n, l.d_state, f, false);
        pool_rows(b.conv_w, out.conv_w, v.conv_c(g * f).begin + n, w.conv_c(g).begin + n, l.d_state, f, false);
        pool_rows(b.conv_b, out.conv_b, v.conv_b(g * f).begin + n, w.conv_b(g).begin + n, l.d_state, f, false);
        pool_rows(b.conv_b, out.conv_b, v.conv_c(g * f).begin + n, w.conv_c(g).begin + n, l.d_state, f, false);
      }
    }
    return out;
  }
  const auto p_dim = l.head_dim;
  copy_cols(v.b_section(), w.b_section());
  copy_cols(v.c_section(), w.c_section());
  copy_conv({l.d_inner(), l.conv_channels()}, {m.d_inner(), m.conv_channels()});
  out.a_log = Tensor({m.n_heads});
  out.d = Tensor({m.n_heads});
  out.dt_bias = Tensor({m.n_heads});
  out.norm_w = Tensor({m.d_inner()});
  out.out_proj = Tensor({m.d_inner(), d_model});
  for (std::int64_t h = 0; h < m.n_heads; ++h) {
    for (std::int64_t p = 0; p < p_dim; ++p) {
      pool_cols(b.in_proj, out.in_proj, v.z_cols(h * f).begin + p, w.z_cols(h).begin + p, p_dim, f);
      pool_cols(b.in_proj, out.in_proj, v.x_cols(h * f).begin + p, w.x_cols(h).begin + p, p_dim, f);
      pool_rows(b.conv_w, out.conv_w, v.conv_x(h * f).begin + p, w.conv_x(h).begin + p, p_dim, f, false);
      pool_rows(b.conv_b, out.conv_b, v.conv_x(h * f).begin + p, w.conv_x(h).begin + p, p_dim, f, false);
      pool_rows(b.norm_w, out.norm_w, v.out_rows(h * f).begin + p, w.out_rows(h).begin + p, p_dim, f, false);
      pool_rows(b.out_proj, out.out_proj, v.out_rows(h * f).begin + p, w.out_rows(h).begin + p, p_dim, f, true);
    }
    pool_cols(b.in_proj, out.in_proj, v.dt_col(h * f).begin, w.dt_col(h).begin, 1, f);
    pool_rows(b.a_log, out.a_log, h * f, h, 1, f, false);
    pool_rows(b.d, out.d, h * f, h, 1, f, false);
    pool_rows(b.dt_bias, out.dt_bias, h * f, h, 1, f, false);
  }
  return out;
}

template <typename Block>
auto block_tensor(Block& b, const std::string& name) -> decltype(&b.in_proj) {
  if (name == "in_proj.weight") return &b.in_proj;
  if (name == "out_proj.weight") return &b.out_proj;
  if (!b.mlp) return nullptr;
  if (name == "mlp.gate.weight") return &b.mlp->gate;
  if (name == "mlp.up.weight") return &b.mlp->up;
  if (name == "mlp.down.weight") return &b.mlp->down;
  return nullptr;
}

}  // namespace

bool LayerPlan::is_identity() const {
  if (selects() || merge_factor != 1 || out_bias_delta) return false;
  return std::all_of(masks.begin(), masks.end(), [](const auto& kv) { return kv.second.empty(); });
}

bool PrunePlan::is_identity() const {
  if (!std::all_of(model_masks.begin(), model_masks.end(), [](const auto& kv) { return kv.second.empty(); })) {
    return false;
  }
  return std::all_of(layers.begin(), layers.end(), [](const LayerPlan& l) { return l.is_identity(); });
}

std::int64_t PrunePlan::masked_count() const {
  std::int64_t n = 0;
  for (const auto& [_, m] : model_masks) n += static_cast<std::int64_t>(m.size());
  for (const auto& l : layers) {
    for (const auto& [_, m] : l.masks) n += static_cast<std::int64_t>(m.size());
  }
  return n;
}

ComponentCounts ssm_counts(const LayerDims& l, const ModelDims& dims) {
  ComponentCounts c;
  c.in_proj = dims.d_model * l.in_proj_width();
  c.conv = l.conv_channels() * (dims.d_conv + 1);
  c.out_proj = l.d_inner() * dims.d_model;
  c.misc = 3 * l.n_heads + l.d_inner() + (l.out_bias ? dims.d_model : 0);
  return c;
}

std::int64_t ssm_param_count(const ModelDims& dims) {
  std::int64_t n = 0;
  for (const auto& l : dims.layers) n += ssm_counts(l, dims).total();
  return n;
}

std::int64_t model_param_count(const ModelDims& dims) {
  const auto mlp = dims.has_mlp ? 3 * dims.d_model * dims.d_mlp : 0;
  return dims.vocab_size * dims.d_model + dims.d_model + ssm_param_count(dims) + mlp * dims.n_layers();
}

std::int64_t count_elements(const Model& model) {
  const auto& p = model.params;
  std::int64_t n = p.embedding.numel() + p.norm_f.numel();
  for (const auto& b : p.layers) {
    for (const Tensor* t : {&b.in_proj, &b.conv_w, &b.conv_b, &b.a_log, &b.d, &b.dt_bias, &b.norm_w, &b.out_proj}) {
      n += t->numel();
    }
    if (b.out_bias) n += b.out_bias->numel();
    if (b.mlp) n += b.mlp->gate.numel() + b.mlp->up.numel() + b.mlp->down.numel();
  }
  return n;
}

PruneReport compression_report(const ModelDims& before, const ModelDims& after, std::int64_t masked_weights) {
  before.validate();
  after.validate();
  PruneReport r;
  for (const auto& l : before.layers) {
    r.layers_before.push_back(ssm_counts(l, before));
    auto& t = r.ssm_before;
    const auto& c = r.layers_before.back();
    t.in_proj += c.in_proj;
    t.conv += c.conv;
    t.out_proj += c.out_proj;
    t.misc += c.misc;
  }
  for (const auto& l : after.layers) {
    r.layers_after.push_back(ssm_counts(l, after));
    auto& t = r.ssm_after;
    const auto& c = r.layers_after.back();
    t.in_proj += c.in_proj;
    t.conv += c.conv;
    t.out_proj += c.out_proj;
    t.misc += c.misc;
  }
  r.model_before = model_param_count(before);
  r.model_after = model_param_count(after);
  r.masked_weights = masked_weights;
  const double sb = static_cast<double>(r.ssm_before.total());
  const double mb = static_cast<double>(r.model_before);
  r.ssm_compression = 1.0 - static_cast<double>(r.ssm_after.total()) / sb;
  r.whole_model_compression = 1.0 - static_cast<double>(r.model_after) / mb;
  r.whole_model_sparsity = static_cast<double>(r.model_before - r.model_after + masked_weights) / mb;
  r.in_proj_fraction = static_cast<double>(r.ssm_before.in_proj) / sb;
  r.out_proj_fraction = static_cast<double>(r.ssm_before.out_proj) / sb;
  r.conv_fraction = static_cast<double>(r.ssm_before.conv) / sb;
  return r;
}

std::vector<std::int64_t> wanda_mask(const Tensor& scores, double ratio, WandaGrouping grouping) {
  check_ratio(ratio, "wanda");
  if (scores.rank() != 2) throw DimensionError("wanda: scores must be 2-D, got " + shape_str(scores.shape()));
  require_finite(scores, "wanda scores");
  const auto rows = scores.dim(0);
  const auto cols = scores.dim(1);
  const bool per_output = grouping == WandaGrouping::PerOutput;
  const auto groups = per_output ? cols : rows;
  const auto size = per_output ? rows : cols;
  const auto k = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(size) + kCountSlack));
  Index mask;
  if (k == 0) return mask;
  mask.reserve(static_cast<std::size_t>(k * groups));
  Index order(static_cast<std::size_t>(size));
  for (std::int64_t g = 0; g < groups; ++g) {
    auto flat = [&](std::int64_t i) { return per_output ? i * cols + g : g * cols + i; };
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
      const float sa = scores[static_cast<std::size_t>(flat(a))];
      const float sb = scores[static_cast<std::size_t>(flat(b))];
      return sa != sb ? sa < sb : a > b;
    });
    for (std::int64_t i = 0; i < k; ++i) mask.push_back(flat(order[static_cast<std::size_t>(i)]));
  }
  std::sort(mask.begin(), mask.end());
  return mask;
}

Tensor wanda_apply(const Tensor& w, const Tensor& scores, double ratio, WandaGrouping grouping) {
  if (w.shape() != scores.shape()) {
    throw DimensionError("wanda_apply: weight " + shape_str(w.shape()) + " vs scores " + shape_str(scores.shape()));
  }
  Tensor out = w;
  for (auto i : wanda_mask(scores, ratio, grouping)) out[static_cast<std::size_t>(i)] = 0.0F;
  return out;
}

PrunePlan plan_wanda(const Model& model, const ActivationStats& stats, double ratio, const TargetFilter& targets,
                     int threads) {
  check_ratio(ratio, "wanda");
  validate_model(model);
  const auto names = linear_layer_names(model.dims, targets);
  if (names.empty()) throw ContractError("wanda: no target layers selected");
  std::vector<Index> masks(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    const auto& name = names[i];
    const auto& l2 = stats.at(name).feature_l2;
    if (name == "lm_head") {
      // The tied head computes x * E^T: rows of E are its output units.
      const Tensor scores = wanda_scores(transpose(model.params.embedding), l2);
      const auto d = model.dims.d_model;
      const auto vocab = model.dims.vocab_size;
      for (auto f : wanda_mask(scores, ratio)) masks[i].push_back((f % vocab) * d + f / vocab);
      std::sort(masks[i].begin(), masks[i].end());
      return;
    }
    const auto layer = std::stoll(name.substr(7, name.find('.', 7) - 7));
    const auto tensor = name.substr(name.find('.', 7) + 1) + ".weight";
    const auto* w = block_tensor(model.params.layers[static_cast<std::size_t>(layer)], tensor);
    masks[i] = wanda_mask(wanda_scores(*w, l2), ratio);
  });
  PrunePlan plan;
  plan.method = "wanda";
  plan.targets = targets;
  plan.layers.resize(static_cast<std::size_t>(model.dims.n_layers()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (masks[i].empty()) continue;
    const auto& name = names[i];
    if (name == "lm_head") {
      plan.model_masks["embedding.weight"] = std::move(masks[i]);
      continue;
    }
    const auto layer = std::stoll(name.substr(7, name.find('.', 7) - 7));
    plan.layers[static_cast<std::size_t>(layer)].masks[name.substr(name.find('.', 7) + 1) + ".weight"] =
        std::move(masks[i]);
  }
  return plan;
}

std::int64_t structured_keep(std::int64_t n, double ratio) {
  check_ratio(ratio, "structured pruning");
  const auto keep = static_cast<std::int64_t>(std::ceil((1.0 - ratio) * static_cast<double>(n) - kCountSlack));
  if (keep <= 0) {
    throw ContractError("ratio " + std::to_string(ratio) + " would leave zero of " + std::to_string(n) + " channels");
  }
  return std::min(keep, n);
}

namespace {

PrunePlan plan_channels(const ImportanceScores& scores, const ModelDims& dims, double ratio, bool states) {
  check_ratio(ratio, states ? "state pruning" : "head-dim pruning");
  PrunePlan plan;
  plan.method = states ? "state" : "headdim";
  plan.targets = TargetFilter::ssm();
  plan.layers.resize(static_cast<std::size_t>(dims.n_layers()));
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    const auto& l = dims.layers[static_cast<std::size_t>(i)];
    const auto key = "layers." + std::to_string(i);
    const Tensor& s = scores.at(key);
    const auto units = states ? l.n_groups : l.n_heads;
    const auto width = states ? l.d_state : l.head_dim;
    if (s.shape() != Shape{units, width}) {
      throw DimensionError(key + ": scores " + shape_str(s.shape()) + ", expected " + shape_str({units, width}));
    }
    require_finite(s, "channel scores");
    const auto keep = structured_keep(width, ratio);
    if (keep == width) continue;
    std::vector<Index> kept;
    for (std::int64_t u = 0; u < units; ++u) {
      std::vector<double> row(s.data() + u * width, s.data() + (u + 1) * width);
      kept.push_back(top_k_sorted(row, keep));
    }
    auto& lp = plan.layers[static_cast<std::size_t>(i)];
    (states ? lp.kept_states : lp.kept_headdims) = std::move(kept);
  }
  return plan;
}

}  // namespace

PrunePlan plan_state_pruning(const ImportanceScores& scores, const ModelDims& dims, double ratio) {
  return plan_channels(scores, dims, ratio, true);
}

PrunePlan plan_headdim_pruning(const ImportanceScores& scores, const ModelDims& dims, double ratio) {
  return plan_channels(scores, dims, ratio, false);
}

PrunePlan plan_merge(const ModelDims& dims, std::int64_t factor) {
  PrunePlan plan;
  plan.method = "merge";
  plan.targets = TargetFilter::ssm();
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    merged_dims(dims.layers[static_cast<std::size_t>(i)], factor, layer_prefix(i) + "merge");
    LayerPlan lp;
    lp.merge_factor = factor;
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

ModelDims planned_dims(const ModelDims& dims, const PrunePlan& plan) {
  dims.validate();
  if (!plan.layers.empty() && static_cast<std::int64_t>(plan.layers.size()) != dims.n_layers()) {
    throw ContractError("plan has " + std::to_string(plan.layers.size()) + " layers, model has " +
                        std::to_string(dims.n_layers()));
  }
  for (const auto& [name, _] : plan.model_masks) {
    if (name != "embedding.weight") throw ContractError("plan masks unknown model tensor '" + name + "'");
  }
  ModelDims out = dims;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const auto& lp = plan.layers[i];
    const auto where = layer_prefix(static_cast<std::int64_t>(i));
    LayerDims l = resolve_selection(dims.layers[i], lp, where).dims;
    l = merged_dims(l, lp.merge_factor, where);
    for (const auto& [name, _] : lp.masks) {
      if (!mask_names().count(name)) throw ContractError(where + ": plan masks unknown tensor '" + name + "'");
      if (name.rfind("mlp.", 0) == 0 && !dims.has_mlp) throw ContractError(where + ": model has no MLP to mask");
    }
    if (lp.out_bias_delta) {
      if (lp.out_bias_delta->shape() != Shape{dims.d_model}) {
        throw ContractError(where + ": out_bias_delta has shape " + shape_str(lp.out_bias_delta->shape()));
      }
      l.out_bias = true;
    }
    out.layers[i] = l;
  }
  out.validate();
  return out;
}

Model apply_plan(const Model& model, const PrunePlan& plan) {
  validate_model(model);
  const ModelDims dims = planned_dims(model.dims, plan);
  Model out;
  out.dims = dims;
  out.params.embedding = model.params.embedding;
  out.params.norm_f = model.params.norm_f;
  for (const auto& [name, mask] : plan.model_masks) {
    check_mask(mask, out.params.embedding.numel(), name);
    for (auto i : mask) out.params.embedding[static_cast<std::size_t>(i)] = 0.0F;
  }
  for (std::size_t i = 0; i < model.params.layers.size(); ++i) {
    const auto& src = model.params.layers[i];
    if (plan.layers.empty()) {
      out.params.layers.push_back(src);
      continue;
    }
    const auto& lp = plan.layers[i];
    const auto where = layer_prefix(static_cast<std::int64_t>(i));
    const auto& l0 = model.dims.layers[i];
    BlockParams b = src;
    LayerDims l = l0;
    if (lp.selects()) {
      const auto sel = resolve_selection(l0, lp, where);
      b = apply_selection(src, l0, sel);
      l = sel.dims;
    }
    if (lp.merge_factor != 1) {
      const auto m = merged_dims(l, lp.merge_factor, where);
      b = apply_merge(b, l, m, lp.merge_factor, model.dims.d_model, model.dims.d_conv);
    }
    for (const auto& [name, mask] : lp.masks) {
      Tensor* t = block_tensor(b, name);
      check_mask(mask, t->numel(), where + name);
      for (auto k : mask) (*t)[static_cast<std::size_t>(k)] = 0.0F;
    }
    if (lp.out_bias_delta) {
      if (!b.out_bias) b.out_bias = Tensor({model.dims.d_model});
      *b.out_bias = add(*b.out_bias, *lp.out_bias_delta);
    }
    out.params.layers.push_back(std::move(b));
  }
  validate_model(out);
  return out;
}

PruneResult execute_plan(const Model& model, const PrunePlan& plan) {
  PruneResult r;
  r.model = apply_plan(model, plan);
  r.plan = plan;
  r.report = compression_report(model.dims, r.model.dims, plan.masked_count());
  r.report.method = plan.method;
  r.report.notes = plan.notes;
  return r;
}

Model merge_heads(const Model& model, std::int64_t factor) { return apply_plan(model, plan_merge(model.dims, factor)); }

PruneResult flap_prune(const Model& model, const ActivationStats& stats, double target_ratio) {
  check_ratio(target_ratio, "flap");
  validate_model(model);
  const auto& dims = model.dims;
  PrunePlan plan;
  plan.method = "flap";
  plan.targets = TargetFilter{false, true, false, false};
  if (target_ratio == 0.0) return execute_plan(model, plan);

  const auto n_layers = static_cast<std::size_t>(dims.n_layers());
  std::vector<FlapHeadScores> scores(n_layers);
  std::vector<std::int64_t> head_cost(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& l = dims.layers[i];
    scores[i] = flap_head_scores(stats.at(layer_prefix(static_cast<std::int64_t>(i)) + "out_proj"),
                                 model.params.layers[i].out_proj, l);
    const auto p = l.head_dim;
    head_cost[i] = dims.d_model * (2 * p + 1) + p * (dims.d_conv + 1) + 3 + p + p * dims.d_model;
    if (l.pattern() == HeadPattern::MultiHead) head_cost[i] += 2 * l.d_state * (dims.d_model + dims.d_conv + 1);
  }

  // Global removal order: least important standardized score first; ties
  // remove later layers and higher heads first. Standardized scores are
  // snapped to a 1e-9 grid so layers that differ only by a scale factor tie
  // exactly and fall back to the raw score.
  using Candidate = std::tuple<double, double, std::int64_t, std::int64_t>;
  std::vector<Candidate> order;
  for (std::size_t i = 0; i < n_layers; ++i) {
    for (std::size_t h = 0; h < scores[i].raw.size(); ++h) {
      order.emplace_back(std::round(scores[i].standardized[h] * 1e9) / 1e9, scores[i].raw[h], -static_cast<std::int64_t>(i),
                         -static_cast<std::int64_t>(h));
    }
  }
  std::sort(order.begin(), order.end());

  const double budget = target_ratio * static_cast<double>(ssm_param_count(dims));
  std::vector<std::vector<bool>> removed(n_layers);
  std::vector<std::int64_t> remaining(n_layers);
  std::vector<bool> clamped(n_layers, false);
  for (std::size_t i = 0; i < n_layers; ++i) {
    removed[i].assign(static_cast<std::size_t>(dims.layers[i].n_heads), false);
    remaining[i] = dims.layers[i].n_heads;
  }
  double removed_cost = 0.0;
  for (const auto& [z, raw, neg_layer, neg_head] : order) {
    if (removed_cost >= budget) break;
    const auto i = static_cast<std::size_t>(-neg_layer);
    const auto& l = dims.layers[i];
    const auto floor = l.pattern() == HeadPattern::GroupedValue ? l.n_groups : 1;
    if (remaining[i] - 1 < floor) {
      clamped[i] = true;
      continue;
    }
    removed[i][static_cast<std::size_t>(-neg_head)] = true;
    --remaining[i];
    removed_cost += static_cast<double>(head_cost[i]);
  }
  if (removed_cost < budget) {
    plan.notes.push_back("budget not reached: every layer is at its minimum head count");
  }

  plan.layers.resize(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& l = dims.layers[i];
    if (clamped[i]) {
      plan.notes.push_back(layer_prefix(static_cast<std::int64_t>(i)) + "mixer clamped to its minimum head count");
    }
    if (remaining[i] == l.n_heads) continue;
    Index kept;
    if (l.pattern() == HeadPattern::GroupedValue) {
      // Round up to a multiple of G and keep each group's best heads so the
      // head-to-group mapping stays contiguous.
      const auto per_group = (remaining[i] + l.n_groups - 1) / l.n_groups;
      const auto hpg = l.heads_per_group();
      for (std::int64_t g = 0; g < l.n_groups; ++g) {
        std::vector<double> local(scores[i].raw.begin() + g * hpg, scores[i].raw.begin() + (g + 1) * hpg);
        for (auto h : top_k_sorted(local, per_group)) kept.push_back(g * hpg + h);
      }
      if (per_group * l.n_groups != remaining[i]) {
        plan.notes.push_back(layer_prefix(static_cast<std::int64_t>(i)) + "kept heads rounded up from " +
                             std::to_string(remaining[i]) + " to " + std::to_string(per_group * l.n_groups));
      }
    } else {
      for (std::int64_t h = 0; h < l.n_heads; ++h) {
        if (!removed[i][static_cast<std::size_t>(h)]) kept.push_back(h);
      }
    }
    auto& lp = plan.layers[i];
    if (static_cast<std::int64_t>(kept.size()) == l.n_heads) continue;
    if (l.pattern() == HeadPattern::MultiHead) lp.kept_groups = kept;
    // Bias compensation with the pruned channels' calibration means.
    const auto& mean = stats.at(layer_prefix(static_cast<std::int64_t>(i)) + "out_proj").feature_mean;
    const auto& w = model.params.layers[i].out_proj;
    const HeadView view(l);
    std::vector<double> delta(static_cast<std::size_t>(dims.d_model), 0.0);
    std::size_t next = 0;
    for (std::int64_t h = 0; h < l.n_heads; ++h) {
      if (next < kept.size() && kept[next] == h) {
        ++next;
        continue;
      }
      const auto rows = view.out_rows(h);
      for (auto j = rows.begin; j < rows.end; ++j) {
        const double m = mean[static_cast<std::size_t>(j)];
        for (std::int64_t c = 0; c < dims.d_model; ++c) delta[static_cast<std::size_t>(c)] += m * w.at(j, c);
      }
    }
    lp.kept_heads = std::move(kept);
    lp.out_bias_delta = Tensor({dims.d_model}, std::vector<float>(delta.begin(), delta.end()));
  }
  return execute_plan(model, plan);
}

PrunePlan compose_plans(const PrunePlan& first, const PrunePlan& second, const ModelDims& dims) {
  for (const PrunePlan* p : {&first, &second}) {
    if (!p->model_masks.empty()) throw ContractError("compose_plans: only index-selection plans compose");
    for (const auto& l : p->layers) {
      if (l.merge_factor != 1 || !l.masks.empty() || l.out_bias_delta) {
        throw ContractError("compose_plans: only index-selection plans compose");
      }
    }
  }
  const ModelDims mid = planned_dims(dims, first);
  planned_dims(mid, second);
  PrunePlan out;
  out.method = first.method == second.method ? first.method : first.method + "+" + second.method;
  out.targets = first.targets;
  out.notes = first.notes;
  out.notes.insert(out.notes.end(), second.notes.begin(), second.notes.end());
  if (first.layers.empty() && second.layers.empty()) return out;
  static const LayerPlan identity;
  out.layers.resize(static_cast<std::size_t>(dims.n_layers()));
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    const auto& a = first.layers.empty() ? identity : first.layers[i];
    const auto& b = second.layers.empty() ? identity : second.layers[i];
    const auto& l = dims.layers[i];
    auto& o = out.layers[i];
    auto through = [](const Index& outer, const Index& inner) {
      Index r;
      for (auto k : inner) r.push_back(outer[static_cast<std::size_t>(k)]);
      return r;
    };
    const Index heads_a = a.kept_heads ? *a.kept_heads : iota_index(l.n_heads);
    const Index groups_a = a.kept_groups ? *a.kept_groups : iota_index(l.n_groups);
    if (a.kept_heads || b.kept_heads) o.kept_heads = b.kept_heads ? through(heads_a, *b.kept_heads) : heads_a;
    if (a.kept_groups || b.kept_groups) o.kept_groups = b.kept_groups ? through(groups_a, *b.kept_groups) : groups_a;
    // Per-original-unit channel lists; units dropped by `first` get a
    // placeholder of the right length.
    auto compose_channels = [&](const auto& a_lists, const auto& b_lists, const Index& kept_a, std::int64_t units,
                                std::int64_t width) {
      std::vector<Index> r(static_cast<std::size_t>(units));
      for (std::int64_t u = 0; u < units; ++u) {
        const Index base = a_lists ? (*a_lists)[static_cast<std::size_t>(u)] : iota_index(width);
        const auto pos = std::find(kept_a.begin(), kept_a.end(), u);
        if (pos != kept_a.end()) {
          const auto k = static_cast<std::size_t>(pos - kept_a.begin());
          r[static_cast<std::size_t>(u)] = b_lists ? through(base, (*b_lists)[k]) : base;
        } else {
          const auto len = b_lists ? b_lists->front().size() : base.size();
          r[static_cast<std::size_t>(u)] = Index(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(len));
        }
      }
      return r;
    };
    if (a.kept_headdims || b.kept_headdims) {
      o.kept_headdims = compose_channels(a.kept_headdims, b.kept_headdims, heads_a, l.n_heads, l.head_dim);
    }
    if (a.kept_states || b.kept_states) {
      o.kept_states = compose_channels(a.kept_states, b.kept_states, groups_a, l.n_groups, l.d_state);
    }
  }
  return out;
}

}  // namespace ssmprune
