#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssmprune/mamba2.hpp"

namespace ssmprune {

struct CalibSet {
  std::vector<TokenSeq> sequences;
  std::string source;

  std::int64_t token_count() const;
  // Throws ContractError if empty, if a sequence is empty, or an id >= vocab.
  void validate(std::int64_t vocab_size) const;
};

// Binary: "CALB", u32 LE sequence count, then per sequence u32 LE length and
// u32 LE ids. Text: one JSON array of ids per line.
CalibSet read_calib_file(const std::string& path);
void write_calib_file(const std::string& path, const CalibSet& calib);
CalibSet decode_calib_binary(const std::string& bytes);
std::string encode_calib_binary(const CalibSet& calib);
CalibSet decode_calib_jsonl(const std::string& text);
std::string encode_calib_jsonl(const CalibSet& calib);

/// Statistics of one linear layer's input features over calibration tokens.
struct LayerStats {
  Tensor feature_l2;    // sqrt(sum of squares)
  Tensor feature_mean;
  Tensor feature_var;   // population variance
  std::int64_t token_count = 0;
};

struct ActivationStats {
  std::map<std::string, LayerStats> layers;

  const LayerStats& at(const std::string& name) const;
  bool contains(const std::string& name) const { return layers.count(name) != 0; }
};

// Combines statistics gathered on disjoint token sets.
LayerStats merge_layer_stats(const LayerStats& a, const LayerStats& b);
ActivationStats merge_stats(const ActivationStats& a, const ActivationStats& b);

/// Linear-layer kinds statistics can be collected for.
enum class LinearKind { InProj, OutProj, Mlp, LmHead };

struct TargetFilter {
  bool in_proj = false;
  bool out_proj = false;
  bool mlp = false;
  bool lm_head = false;

  // Comma-separated kinds ("in_proj,out_proj", "mlp", "lm_head") or the
  // shorthands "ssm" (in_proj+out_proj) and "all". Unknown names throw.
  static TargetFilter parse(const std::string& spec);
  static TargetFilter ssm() { return {true, true, false, false}; }
  static TargetFilter all() { return {true, true, true, true}; }

  bool matches(const std::string& linear_name) const;
  std::string str() const;
};

// Linear layer names (as used by ActivationStats and LinearObserver) the
// filter selects for this model.
std::vector<std::string> linear_layer_names(const ModelDims& dims, const TargetFilter& filter);

ActivationStats collect_activation_stats(const Model& model, const CalibSet& calib,
                                         const TargetFilter& targets, int threads = 1);

/// Running sum of (grad * weight)^2 per parameter element. Sums are kept as
/// double-double so results do not depend on accumulation order in practice.
class TaylorAccumulator {
 public:
  struct Entry {
    Shape shape;
    std::vector<double> hi;
    std::vector<double> lo;
  };

  void add(const std::string& name, const Tensor& grad, const Tensor& weight);
  void merge(const TaylorAccumulator& other);
  // Replaces a tensor's sums with stored values (used when reloading).
  void assign(const std::string& name, const Tensor& values);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  // Throws ContractError when the tensor was never accumulated.
  std::vector<double> values(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  const Shape& shape(const std::string& name) const;
  std::vector<std::string> names() const;

  std::int64_t passes() const { return passes_; }
  void set_passes(std::int64_t n) { passes_ = n; }

 private:
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
  std::int64_t passes_ = 0;
};

// Names of SSM parameter tensors ("layers.0.in_proj.weight", ...) whose
// Taylor importance is accumulated.
std::vector<std::string> ssm_param_names(const Model& model);

/// Per sequence: loss = mean next-token cross-entropy; (g * w)^2 of every
/// SSM parameter is added to the accumulator.
TaylorAccumulator accumulate_taylor(const Model& model, const CalibSet& calib, int threads = 1);

}  // namespace ssmprune
