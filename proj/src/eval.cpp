#include "ssmprune/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "ssmprune/error.hpp"
#include "ssmprune/parallel.hpp"
#include "ssmprune/pruning.hpp"
#include "ssmprune/toy.hpp"

namespace ssmprune {

double sequence_nll(const Model& model, const TokenSeq& tokens) {
  if (tokens.size() < 2) return 0.0;
  const Tensor logits = model_forward(model, tokens);
  require_finite(logits, "perplexity logits");
  const auto vocab = logits.dim(1);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const float* row = logits.data() + static_cast<std::int64_t>(t) * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::int64_t v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
    total += std::log(z) + mx - row[tokens[t + 1]];
  }
  return total;
}

PerplexityResult perplexity(const Model& model, const CalibSet& data, int threads) {
  data.validate(model.dims.vocab_size);
  std::vector<double> nll(data.sequences.size());
  parallel_for(data.sequences.size(), threads, [&](std::size_t i) { nll[i] = sequence_nll(model, data.sequences[i]); });
  PerplexityResult r;
  double total = 0.0;
  for (std::size_t i = 0; i < nll.size(); ++i) {
    total += nll[i];
    r.token_count += static_cast<std::int64_t>(data.sequences[i].size()) - 1;
  }
  if (r.token_count <= 0) throw ContractError("perplexity: no sequence has two or more tokens");
  r.mean_nll = total / static_cast<double>(r.token_count);
  r.perplexity = std::exp(r.mean_nll);
  if (!std::isfinite(r.perplexity)) throw NumericError("perplexity is not finite");
  return r;
}

ThroughputRow measure_throughput(const std::function<void(std::int64_t, std::int64_t)>& run, std::int64_t batch,
                                 std::int64_t seq_len, int repeats, std::optional<double> baseline) {
  if (repeats < 3) throw ContractError("throughput: needs at least 3 repeats");
  if (batch <= 0 || seq_len <= 0) throw ContractError("throughput: batch and seq_len must be positive");
  std::vector<double> rates;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run(batch, seq_len);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    rates.push_back(static_cast<double>(batch * seq_len) / std::max(dt.count(), 1e-12));
  }
  std::sort(rates.begin(), rates.end());
  const auto n = rates.size();
  ThroughputRow row{batch, seq_len, n % 2 ? rates[n / 2] : 0.5 * (rates[n / 2 - 1] + rates[n / 2]), 1.0};
  if (baseline) row.speedup = row.tokens_per_s / *baseline;
  return row;
}

ThroughputRow throughput(const Model& model, std::int64_t batch, std::int64_t seq_len, int repeats,
                         std::optional<double> baseline, int threads) {
  const auto data = random_corpus(model.dims.vocab_size, static_cast<std::size_t>(std::max<std::int64_t>(batch, 0)),
                                  static_cast<std::size_t>(std::max<std::int64_t>(seq_len, 0)), 0);
  auto run = [&](std::int64_t b, std::int64_t) {
    parallel_for(static_cast<std::size_t>(b), threads, [&](std::size_t i) { model_forward(model, data.sequences[i]); });
  };
  return measure_throughput(run, batch, seq_len, repeats, baseline);
}

std::vector<SweepRow> ratio_sweep(const Model& model, const ActivationStats& stats, const std::vector<double>& ratios,
                                  const TargetFilter& targets, const CalibSet& eval_data, int threads) {
  if (!std::is_sorted(ratios.begin(), ratios.end())) throw ContractError("ratio_sweep: ratios must be ascending");
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    const auto plan = plan_wanda(model, stats, r, targets, threads);
    const auto result = execute_plan(model, plan);
    SweepRow row;
    row.target = targets.str();
    row.ratio = r;
    row.perplexity = perplexity(result.model, eval_data, threads).perplexity;
    row.whole_model_sparsity = result.report.whole_model_sparsity;
    row.non_monotone = !rows.empty() && row.perplexity < rows.back().perplexity;
    rows.push_back(row);
  }
  return rows;
}

std::vector<SweepRow> wanda_component_sweep(const Model& model, const ActivationStats& stats,
                                            const std::vector<std::string>& targets,
                                            const std::vector<double>& ratios, const CalibSet& eval_data,
                                            int threads) {
  std::vector<SweepRow> rows;
  for (const auto& t : targets) {
    if (t != "in_proj" && t != "out_proj" && t != "both") {
      throw ContractError("component sweep target must be in_proj, out_proj, or both; got '" + t + "'");
    }
    auto part = ratio_sweep(model, stats, ratios, TargetFilter::parse(t), eval_data, threads);
    for (auto& row : part) row.target = t;
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

std::int64_t target_param_count(const ModelDims& dims, const TargetFilter& targets) {
  std::int64_t n = 0;
  for (const auto& l : dims.layers) {
    const auto c = ssm_counts(l, dims);
    if (targets.in_proj) n += c.in_proj;
    if (targets.out_proj) n += c.out_proj;
    if (targets.mlp && dims.has_mlp) n += 3 * dims.d_model * dims.d_mlp;
  }
  if (targets.lm_head) n += dims.vocab_size * dims.d_model;
  return n;
}

double ratio_for_sparsity(const ModelDims& dims, const TargetFilter& targets, double sparsity) {
  const auto component = target_param_count(dims, targets);
  if (component == 0) throw ContractError("ratio_for_sparsity: targets select no parameters");
  const double r = sparsity * static_cast<double>(model_param_count(dims)) / static_cast<double>(component);
  if (r < 0.0 || r > 1.0) {
    throw ContractError("sparsity " + std::to_string(sparsity) + " is unreachable with targets " + targets.str());
  }
  return r;
}

}  // namespace ssmprune
