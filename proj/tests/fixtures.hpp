#pragma once

// Model constructions shared by the pruning unit tests and the acceptance
// checks. Each builds the dense-side oracle independently of apply_plan.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "ssmprune/calibration.hpp"
#include "ssmprune/importance.hpp"
#include "ssmprune/mamba2.hpp"
#include "ssmprune/pruning.hpp"
#include "ssmprune/rng.hpp"
#include "ssmprune/toy.hpp"

namespace fixtures {

using ssmprune::HeadView;
using ssmprune::Model;
using ssmprune::Range;
using ssmprune::Tensor;

inline void set_cols(Tensor& w, Range cols, float value) {
  for (std::int64_t r = 0; r < w.dim(0); ++r) {
    for (auto c = cols.begin; c < cols.end; ++c) w.at(r, c) = value;
  }
}

inline void set_rows(Tensor& w, Range rows, float value) {
  const std::int64_t width = w.numel() / w.dim(0);
  std::fill(w.data() + rows.begin * width, w.data() + rows.end * width, value);
}

inline void copy_cols(Tensor& w, Range from, Range to) {
  for (std::int64_t r = 0; r < w.dim(0); ++r) {
    for (std::int64_t k = 0; k < from.size(); ++k) w.at(r, to.begin + k) = w.at(r, from.begin + k);
  }
}

inline void copy_rows(Tensor& w, Range from, Range to) {
  const std::int64_t width = w.numel() / w.dim(0);
  std::copy_n(w.data() + from.begin * width, from.size() * width, w.data() + to.begin * width);
}

// Random seeded model whose X heads come in runs of `factor` identical copies
// (x, z, dt columns, x conv channels, A_log, D, dt_bias, norm_w). out_proj rows
// stay distinct: the merge sums them.
inline Model duplicated_heads_model(const ssmprune::ModelDims& dims, std::uint64_t seed, std::int64_t factor) {
  Model m = ssmprune::make_toy_model(dims, seed);
  for (std::size_t i = 0; i < m.params.layers.size(); ++i) {
    auto& p = m.params.layers[i];
    const auto& l = m.dims.layers[i];
    const HeadView v(l);
    for (std::int64_t h = 0; h < l.n_heads; ++h) {
      const std::int64_t src = h - h % factor;
      if (src == h) continue;
      copy_cols(p.in_proj, v.x_cols(src), v.x_cols(h));
      copy_cols(p.in_proj, v.z_cols(src), v.z_cols(h));
      copy_cols(p.in_proj, v.dt_col(src), v.dt_col(h));
      copy_rows(p.conv_w, v.conv_x(src), v.conv_x(h));
      for (std::int64_t k = 0; k < l.head_dim; ++k) {
        p.conv_b[static_cast<std::size_t>(v.conv_x(h).begin + k)] = p.conv_b[static_cast<std::size_t>(v.conv_x(src).begin + k)];
        p.norm_w[static_cast<std::size_t>(v.out_rows(h).begin + k)] = p.norm_w[static_cast<std::size_t>(v.out_rows(src).begin + k)];
      }
      for (Tensor* t : {&p.a_log, &p.d, &p.dt_bias}) (*t)[static_cast<std::size_t>(h)] = (*t)[static_cast<std::size_t>(src)];
    }
  }
  return m;
}

// Uniform random channel scores for every layer.
inline ssmprune::ImportanceScores random_channel_scores(const ssmprune::ModelDims& dims, ssmprune::TaylorAxis axis,
                                                        std::uint64_t seed) {
  ssmprune::Rng rng(seed);
  ssmprune::ImportanceScores s;
  s.granularity = axis == ssmprune::TaylorAxis::StateChannel ? ssmprune::Granularity::PerStateChannel
                                                             : ssmprune::Granularity::PerHeadDimChannel;
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    const auto& l = dims.layers[static_cast<std::size_t>(i)];
    Tensor t = axis == ssmprune::TaylorAxis::StateChannel ? Tensor({l.n_groups, l.d_state}) : Tensor({l.n_heads, l.head_dim});
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform());
    s.layers.emplace("layers." + std::to_string(i), std::move(t));
  }
  return s;
}

inline bool contains(const std::vector<std::int64_t>& v, std::int64_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

// Dense model with every state channel the plan drops zeroed in B, C (in_proj
// columns and conv taps plus bias), so those channels output silu(0) = 0.
inline Model mask_dropped_states(const Model& model, const ssmprune::PrunePlan& plan) {
  Model m = model;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    if (!plan.layers[i].kept_states) continue;
    auto& p = m.params.layers[i];
    const auto& l = m.dims.layers[i];
    const HeadView v(l);
    for (std::int64_t g = 0; g < l.n_groups; ++g) {
      const auto& kept = (*plan.layers[i].kept_states)[static_cast<std::size_t>(g)];
      for (std::int64_t n = 0; n < l.d_state; ++n) {
        if (contains(kept, n)) continue;
        for (const auto& [cols, conv] : {std::pair{v.b_cols(g), v.conv_b(g)}, std::pair{v.c_cols(g), v.conv_c(g)}}) {
          set_cols(p.in_proj, Range{cols.begin + n, cols.begin + n + 1}, 0.0F);
          set_rows(p.conv_w, Range{conv.begin + n, conv.begin + n + 1}, 0.0F);
          p.conv_b[static_cast<std::size_t>(conv.begin + n)] = 0.0F;
        }
      }
    }
  }
  return m;
}

// Dense model with every dropped head-dim channel zeroed in x, z, the x conv
// channel, and the out_proj row.
inline Model mask_dropped_headdims(const Model& model, const ssmprune::PrunePlan& plan) {
  Model m = model;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    if (!plan.layers[i].kept_headdims) continue;
    auto& p = m.params.layers[i];
    const auto& l = m.dims.layers[i];
    const HeadView v(l);
    for (std::int64_t h = 0; h < l.n_heads; ++h) {
      const auto& kept = (*plan.layers[i].kept_headdims)[static_cast<std::size_t>(h)];
      for (std::int64_t q = 0; q < l.head_dim; ++q) {
        if (contains(kept, q)) continue;
        const Range one_x{v.x_cols(h).begin + q, v.x_cols(h).begin + q + 1};
        const Range one_z{v.z_cols(h).begin + q, v.z_cols(h).begin + q + 1};
        set_cols(p.in_proj, one_x, 0.0F);
        set_cols(p.in_proj, one_z, 0.0F);
        const auto ch = v.conv_x(h).begin + q;
        set_rows(p.conv_w, Range{ch, ch + 1}, 0.0F);
        p.conv_b[static_cast<std::size_t>(ch)] = 0.0F;
        const auto row = v.out_rows(h).begin + q;
        set_rows(p.out_proj, Range{row, row + 1}, 0.0F);
      }
    }
  }
  return m;
}

struct FlapSetup {
  Model model;
  ssmprune::CalibSet calib;
  std::vector<std::int64_t> constant_heads;
  double ratio = 0.0;
};

// One-layer multi-head model in which two heads feed out_proj a constant
// vector on every token. Their x, B, C inputs come only from positive conv
// biases, their dt columns are zero, and their z columns read a planted
// positive embedding feature, so y * silu(z) is a positive multiple of a
// fixed vector and the per-head norm removes the scale. The target ratio sits
// between the cost of one and two heads.
inline FlapSetup flap_constant_heads(std::uint64_t seed) {
  auto dims = ssmprune::ModelDims::uniform(16, 1, 4, 8, 8, 4, 4, 32);
  dims.norm_eps = 1e-12F;
  FlapSetup s;
  s.model = ssmprune::make_toy_model(dims, seed);
  s.constant_heads = {1, 3};
  auto& emb = s.model.params.embedding;
  for (std::int64_t t = 0; t < dims.vocab_size; ++t) emb.at(t, 0) = 2.0F;
  auto& p = s.model.params.layers[0];
  const auto& l = s.model.dims.layers[0];
  const HeadView v(l);
  ssmprune::Rng rng(seed + 17);
  for (auto h : s.constant_heads) {
    for (Range cols : {v.x_cols(h), v.b_cols(h), v.c_cols(h), v.dt_col(h)}) set_cols(p.in_proj, cols, 0.0F);
    for (Range conv : {v.conv_x(h), v.conv_b(h), v.conv_c(h)}) {
      for (auto c = conv.begin; c < conv.end; ++c) p.conv_b[static_cast<std::size_t>(c)] = static_cast<float>(rng.uniform(0.5, 1.5));
    }
    const Range z = v.z_cols(h);
    set_cols(p.in_proj, z, 0.0F);
    for (auto c = z.begin; c < z.end; ++c) p.in_proj.at(0, c) = 1.0F;
  }
  s.calib = ssmprune::random_corpus(dims.vocab_size, 8, 24, seed + 5);
  const auto total = static_cast<double>(ssmprune::ssm_param_count(dims));
  const auto head = static_cast<double>(dims.d_model * (2 * l.head_dim + 1) + l.head_dim * (dims.d_conv + 1) + 3 +
                                        l.head_dim + l.head_dim * dims.d_model +
                                        2 * l.d_state * (dims.d_model + dims.d_conv + 1));
  s.ratio = 1.5 * head / total;
  return s;
}

}  // namespace fixtures
