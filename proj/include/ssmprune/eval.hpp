#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssmprune/calibration.hpp"
#include "ssmprune/mamba2.hpp"

namespace ssmprune {

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::int64_t token_count = 0;  // predicted tokens
};

// Sum over positions t of -log softmax(logits[t])[tokens[t+1]], in fp64.
double sequence_nll(const Model& model, const TokenSeq& tokens);

/// exp(mean NLL over every predicted token of every sequence).
PerplexityResult perplexity(const Model& model, const CalibSet& data, int threads = 1);

struct ThroughputRow {
  std::int64_t batch = 0;
  std::int64_t seq_len = 0;
  double tokens_per_s = 0.0;
  double speedup = 1.0;  // vs the supplied baseline tokens/s
};

// Median over `repeats` of batch*seq_len / wall-time of run(batch, seq_len).
ThroughputRow measure_throughput(const std::function<void(std::int64_t, std::int64_t)>& run, std::int64_t batch,
                                 std::int64_t seq_len, int repeats, std::optional<double> baseline = std::nullopt);

/// Full-sequence forward scans over `batch` random sequences (no decode cache).
ThroughputRow throughput(const Model& model, std::int64_t batch, std::int64_t seq_len, int repeats,
                         std::optional<double> baseline = std::nullopt, int threads = 1);

struct SweepRow {
  std::string target;  // filter string of the pruned layers
  double ratio = 0.0;  // per-layer WANDA ratio
  double perplexity = 0.0;
  double whole_model_sparsity = 0.0;
  bool non_monotone = false;  // perplexity dropped relative to the previous ratio
};

/// WANDA at each ratio on the `targets` layers; ratios must ascend.
std::vector<SweepRow> ratio_sweep(const Model& model, const ActivationStats& stats, const std::vector<double>& ratios,
                                  const TargetFilter& targets, const CalibSet& eval_data, int threads = 1);

/// One ratio sweep per target ("in_proj", "out_proj", "both").
std::vector<SweepRow> wanda_component_sweep(const Model& model, const ActivationStats& stats,
                                            const std::vector<std::string>& targets,
                                            const std::vector<double>& ratios, const CalibSet& eval_data,
                                            int threads = 1);

// Parameters of the layers `targets` selects (lm_head counts the tied table).
std::int64_t target_param_count(const ModelDims& dims, const TargetFilter& targets);

/// Per-layer WANDA ratio whose masks reach `sparsity` of all model weights.
double ratio_for_sparsity(const ModelDims& dims, const TargetFilter& targets, double sparsity);

struct EvalReport {
  std::optional<PerplexityResult> dense;
  std::vector<SweepRow> sweep;
  std::vector<SweepRow> component_sensitivity;
  std::vector<ThroughputRow> throughput;
  std::string throughput_method = "full-sequence scans without a decode cache";
};

}  // namespace ssmprune
