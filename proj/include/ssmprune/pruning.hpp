#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssmprune/calibration.hpp"
#include "ssmprune/importance.hpp"
#include "ssmprune/mamba2.hpp"

namespace ssmprune {

/// Edits to one block. Index lists refer to the block's axes before the plan
/// is applied. Stages run in order: index selection, merge, masks, bias.
struct LayerPlan {
  std::optional<std::vector<std::int64_t>> kept_heads;
  std::optional<std::vector<std::int64_t>> kept_groups;
  // One list per original group / head; all lists have equal length.
  std::optional<std::vector<std::vector<std::int64_t>>> kept_states;
  std::optional<std::vector<std::vector<std::int64_t>>> kept_headdims;
  std::int64_t merge_factor = 1;
  // Tensor name within the block ("in_proj.weight", "mlp.up.weight", ...) to
  // sorted flat indices that are set to zero.
  std::map<std::string, std::vector<std::int64_t>> masks;
  // Added to out_proj's bias, creating the bias if the block has none.
  std::optional<Tensor> out_bias_delta;

  bool is_identity() const;
  bool selects() const { return kept_heads || kept_groups || kept_states || kept_headdims; }

  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

struct PrunePlan {
  std::string method = "identity";
  TargetFilter targets;
  // Empty means no per-layer edits; otherwise one entry per block.
  std::vector<LayerPlan> layers;
  // Masks on model-level tensors; only "embedding.weight" (the tied head).
  std::map<std::string, std::vector<std::int64_t>> model_masks;
  std::vector<std::string> notes;

  bool is_identity() const;
  std::int64_t masked_count() const;
};

struct ComponentCounts {
  std::int64_t in_proj = 0;
  std::int64_t conv = 0;
  std::int64_t out_proj = 0;
  std::int64_t misc = 0;  // A_log, D, dt_bias, norm, out_proj bias

  std::int64_t total() const { return in_proj + conv + out_proj + misc; }
  friend bool operator==(const ComponentCounts&, const ComponentCounts&) = default;
};

// Closed-form counts: in_proj d_model(2HP+2GN+H), conv (HP+2GN)(K+1),
// out_proj HP d_model, misc 3H + HP (+ d_model with bias).
ComponentCounts ssm_counts(const LayerDims& layer, const ModelDims& dims);
std::int64_t ssm_param_count(const ModelDims& dims);
std::int64_t model_param_count(const ModelDims& dims);
// Direct element count of every materialized tensor.
std::int64_t count_elements(const Model& model);

struct PruneReport {
  std::string method;
  std::vector<ComponentCounts> layers_before;
  std::vector<ComponentCounts> layers_after;
  ComponentCounts ssm_before;
  ComponentCounts ssm_after;
  std::int64_t model_before = 0;
  std::int64_t model_after = 0;
  std::int64_t masked_weights = 0;
  double ssm_compression = 0.0;          // 1 - ssm_after / ssm_before
  double whole_model_compression = 0.0;  // 1 - model_after / model_before
  double whole_model_sparsity = 0.0;     // (removed + masked) / model_before
  double in_proj_fraction = 0.0;         // of the SSM component before pruning
  double out_proj_fraction = 0.0;
  double conv_fraction = 0.0;
  std::vector<std::string> notes;
};

PruneReport compression_report(const ModelDims& before, const ModelDims& after,
                               std::int64_t masked_weights = 0);

enum class WandaGrouping { PerOutput, PerInput };

/// Sorted flat indices of the floor(ratio * n) lowest scores in every group
/// (columns of a [d_in, d_out] matrix for PerOutput, rows for PerInput).
/// Ties drop the higher index first.
std::vector<std::int64_t> wanda_mask(const Tensor& scores, double ratio,
                                     WandaGrouping grouping = WandaGrouping::PerOutput);
Tensor wanda_apply(const Tensor& w, const Tensor& scores, double ratio,
                   WandaGrouping grouping = WandaGrouping::PerOutput);

/// WANDA masks for every linear layer selected by `targets`. lm_head masks
/// land on the tied embedding.
PrunePlan plan_wanda(const Model& model, const ActivationStats& stats, double ratio,
                     const TargetFilter& targets, int threads = 1);

// Structured keep count ceil((1 - ratio) * n); throws when it would be 0.
std::int64_t structured_keep(std::int64_t n, double ratio);

PrunePlan plan_state_pruning(const ImportanceScores& scores, const ModelDims& dims, double ratio);
PrunePlan plan_headdim_pruning(const ImportanceScores& scores, const ModelDims& dims, double ratio);
/// Merges BC groups when G > 1 and X heads when G == 1.
PrunePlan plan_merge(const ModelDims& dims, std::int64_t factor);

struct PruneResult {
  Model model;
  PrunePlan plan;
  PruneReport report;
};

/// Global standardized-score head removal until target_ratio of the SSM
/// parameters is removed, with out_proj bias compensation.
PruneResult flap_prune(const Model& model, const ActivationStats& stats, double target_ratio);

Model merge_heads(const Model& model, std::int64_t factor);

/// Dims the plan produces; throws ContractError on the first inconsistency.
ModelDims planned_dims(const ModelDims& dims, const PrunePlan& plan);
/// Materializes a fresh pruned model. The input is never modified.
Model apply_plan(const Model& model, const PrunePlan& plan);
/// apply_plan plus a PruneReport carrying the plan's notes.
PruneResult execute_plan(const Model& model, const PrunePlan& plan);

/// Single plan equivalent to applying `first` then `second`. Supports index
/// selection plans only.
PrunePlan compose_plans(const PrunePlan& first, const PrunePlan& second, const ModelDims& dims);

}  // namespace ssmprune
