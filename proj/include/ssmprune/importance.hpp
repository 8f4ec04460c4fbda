#pragma once

#include <map>
#include <string>
#include <vector>

#include "ssmprune/calibration.hpp"
#include "ssmprune/mamba2.hpp"

namespace ssmprune {

enum class Granularity { PerWeight, PerStateChannel, PerHeadDimChannel, PerHead };

const char* granularity_name(Granularity g);

/// Saliency scores keyed by layer prefix ("layers.0") or, for per-weight
/// scores, by linear layer name ("layers.0.in_proj").
///   PerStateChannel:   [G, N]
///   PerHeadDimChannel: [H, P]
///   PerHead:           [H]
struct ImportanceScores {
  Granularity granularity = Granularity::PerWeight;
  std::map<std::string, Tensor> layers;
  std::string method;
  std::string calibration;

  const Tensor& at(const std::string& key) const;
};

// S[i,j] = |W[i,j]| * feature_l2[i] for W oriented [d_in, d_out].
Tensor wanda_scores(const Tensor& w, const Tensor& feature_l2);

enum class TaylorAxis { StateChannel, HeadDimChannel };

/// Averages accumulated (g*w)^2 over the in_proj columns of each structural
/// channel: B and C columns of (group, state), or x and z columns of
/// (head, channel).
ImportanceScores taylor_group_scores(const TaylorAccumulator& acc, const ModelDims& dims,
                                     TaylorAxis axis);

struct FlapHeadScores {
  std::vector<double> raw;           // per head
  std::vector<double> standardized;  // (raw - mean) / std within the layer
};

/// Head score = sum over the head's channels of feature_var[j] * |W_out[j,:]|^2.
FlapHeadScores flap_head_scores(const LayerStats& out_proj_stats, const Tensor& out_proj,
                                const LayerDims& layer);

// Population standardization; a layer whose scores are all equal maps to zeros.
std::vector<double> standardize(const std::vector<double>& scores);

/// Raw FLAP head scores of every layer as PerHead scores.
ImportanceScores flap_scores(const Model& model, const ActivationStats& stats);

/// Indices of `scores` from most to least important; ties rank the lower
/// index first.
std::vector<std::int64_t> rank_descending(const std::vector<double>& scores);

/// The k most important indices, returned in increasing order.
std::vector<std::int64_t> top_k_sorted(const std::vector<double>& scores, std::int64_t k);

}  // namespace ssmprune
