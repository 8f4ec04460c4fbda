#include "ssmprune/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssmprune/error.hpp"

namespace ssmprune {

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerWeight: return "per_weight";
    case Granularity::PerStateChannel: return "per_state_channel";
    case Granularity::PerHeadDimChannel: return "per_headdim_channel";
    case Granularity::PerHead: return "per_head";
  }
  return "unknown";
}

const Tensor& ImportanceScores::at(const std::string& key) const {
  auto it = layers.find(key);
  if (it == layers.end()) throw ContractError("no importance scores for '" + key + "'");
  return it->second;
}

Tensor wanda_scores(const Tensor& w, const Tensor& feature_l2) {
  if (w.rank() != 2) throw DimensionError("wanda_scores: weight must be 2-D, got " + shape_str(w.shape()));
  if (feature_l2.rank() != 1 || feature_l2.dim(0) != w.dim(0)) {
    throw DimensionError("wanda_scores: feature_l2 " + shape_str(feature_l2.shape()) +
                         " does not match input width of " + shape_str(w.shape()));
  }
  Tensor s(w.shape());
  for (std::int64_t i = 0; i < w.dim(0); ++i) {
    const float a = feature_l2[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < w.dim(1); ++j) s.at(i, j) = std::fabs(w.at(i, j)) * a;
  }
  return s;
}

namespace {

double column_block_mean(const std::vector<double>& v, std::int64_t cols, std::int64_t rows,
                         std::initializer_list<std::int64_t> columns) {
  double sum = 0.0;
  for (auto col : columns) {
    for (std::int64_t r = 0; r < rows; ++r) sum += v[static_cast<std::size_t>(r * cols + col)];
  }
  return sum / static_cast<double>(rows * static_cast<std::int64_t>(columns.size()));
}

}  // namespace

ImportanceScores taylor_group_scores(const TaylorAccumulator& acc, const ModelDims& dims,
                                     TaylorAxis axis) {
  ImportanceScores out;
  out.granularity =
      axis == TaylorAxis::StateChannel ? Granularity::PerStateChannel : Granularity::PerHeadDimChannel;
  out.method = "taylor";
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    const auto& l = dims.layers[static_cast<std::size_t>(i)];
    const auto name = layer_prefix(i) + "in_proj.weight";
    if (!acc.contains(name)) throw ContractError("taylor_group_scores: accumulator lacks " + name);
    const Shape expect{dims.d_model, l.in_proj_width()};
    if (acc.shape(name) != expect) {
      throw DimensionError("taylor_group_scores: " + name + " has shape " + shape_str(acc.shape(name)));
    }
    const auto v = acc.values(name);
    const auto cols = l.in_proj_width();
    const HeadView view(l);
    Tensor s;
    if (axis == TaylorAxis::StateChannel) {
      s = Tensor({l.n_groups, l.d_state});
      for (std::int64_t g = 0; g < l.n_groups; ++g) {
        for (std::int64_t n = 0; n < l.d_state; ++n) {
          s.at(g, n) = static_cast<float>(column_block_mean(
              v, cols, dims.d_model, {view.b_cols(g).begin + n, view.c_cols(g).begin + n}));
        }
      }
    } else {
      s = Tensor({l.n_heads, l.head_dim});
      for (std::int64_t h = 0; h < l.n_heads; ++h) {
        for (std::int64_t p = 0; p < l.head_dim; ++p) {
          s.at(h, p) = static_cast<float>(column_block_mean(
              v, cols, dims.d_model, {view.x_cols(h).begin + p, view.z_cols(h).begin + p}));
        }
      }
    }
    out.layers.emplace(layer_prefix(i).substr(0, layer_prefix(i).size() - 1), std::move(s));
  }
  return out;
}

std::vector<double> standardize(const std::vector<double>& scores) {
  std::vector<double> z(scores.size(), 0.0);
  if (scores.empty()) return z;
  const double n = static_cast<double>(scores.size());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  const double sd = std::sqrt(var / n);
  const bool degenerate =
      std::all_of(scores.begin(), scores.end(), [&](double s) { return s == scores.front(); });
  if (degenerate || sd == 0.0) return z;
  for (std::size_t i = 0; i < scores.size(); ++i) z[i] = (scores[i] - mean) / sd;
  return z;
}

FlapHeadScores flap_head_scores(const LayerStats& stats, const Tensor& out_proj, const LayerDims& layer) {
  const auto width = layer.d_inner();
  if (stats.feature_var.numel() != width) {
    throw DimensionError("flap_head_scores: statistics cover " + std::to_string(stats.feature_var.numel()) +
                         " features, layer has " + std::to_string(width));
  }
  if (out_proj.rank() != 2 || out_proj.dim(0) != width) {
    throw DimensionError("flap_head_scores: out_proj " + shape_str(out_proj.shape()));
  }
  const HeadView view(layer);
  FlapHeadScores out;
  out.raw.assign(static_cast<std::size_t>(layer.n_heads), 0.0);
  for (std::int64_t h = 0; h < layer.n_heads; ++h) {
    const auto rows = view.out_rows(h);
    double total = 0.0;
    for (auto j = rows.begin; j < rows.end; ++j) {
      double norm2 = 0.0;
      for (std::int64_t c = 0; c < out_proj.dim(1); ++c) {
        const double w = out_proj.at(j, c);
        norm2 += w * w;
      }
      total += static_cast<double>(stats.feature_var[static_cast<std::size_t>(j)]) * norm2;
    }
    out.raw[static_cast<std::size_t>(h)] = total;
  }
  out.standardized = standardize(out.raw);
  return out;
}

ImportanceScores flap_scores(const Model& model, const ActivationStats& stats) {
  ImportanceScores out;
  out.granularity = Granularity::PerHead;
  out.method = "flap";
  for (std::int64_t i = 0; i < model.dims.n_layers(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const auto pre = layer_prefix(i);
    const auto f = flap_head_scores(stats.at(pre + "out_proj"), model.params.layers[iu].out_proj,
                                    model.dims.layers[iu]);
    out.layers.emplace(pre.substr(0, pre.size() - 1),
                       Tensor({static_cast<std::int64_t>(f.raw.size())},
                              std::vector<float>(f.raw.begin(), f.raw.end())));
  }
  return out;
}

std::vector<std::int64_t> rank_descending(const std::vector<double>& scores) {
  std::vector<std::int64_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return idx;
}

std::vector<std::int64_t> top_k_sorted(const std::vector<double>& scores, std::int64_t k) {
  if (k < 0 || k > static_cast<std::int64_t>(scores.size())) {
    throw ContractError("top_k_sorted: k=" + std::to_string(k) + " out of range");
  }
  auto idx = rank_descending(scores);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace ssmprune
