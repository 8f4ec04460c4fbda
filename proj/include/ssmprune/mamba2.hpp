#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssmprune/autograd.hpp"
#include "ssmprune/tensor.hpp"

namespace ssmprune {

using TokenSeq = std::vector<std::uint32_t>;

enum class HeadPattern { MultiHead, GroupedValue, MultiValue };

const char* head_pattern_name(HeadPattern pattern);

/// Per-layer SSM mixer extents. Structured pruning can make these differ
/// between layers.
struct LayerDims {
  std::int64_t n_heads = 0;    // H
  std::int64_t head_dim = 0;   // P
  std::int64_t d_state = 0;    // N
  std::int64_t n_groups = 0;   // G, B/C groups shared by H/G heads each
  // Width each gated-norm group divides its sum of squares by. Equals the
  // group width H*P/G on a fresh model; head-dim pruning keeps the original
  // value so that removing channels matches zero-masking them.
  std::int64_t rms_width = 0;
  bool out_bias = false;

  std::int64_t d_inner() const { return n_heads * head_dim; }
  std::int64_t in_proj_width() const { return 2 * d_inner() + 2 * n_groups * d_state + n_heads; }
  std::int64_t conv_channels() const { return d_inner() + 2 * n_groups * d_state; }
  std::int64_t heads_per_group() const { return n_heads / n_groups; }
  std::int64_t norm_group_size() const { return d_inner() / n_groups; }
  std::int64_t group_of(std::int64_t head) const { return head * n_groups / n_heads; }
  HeadPattern pattern() const;

  friend bool operator==(const LayerDims&, const LayerDims&) = default;
};

struct ModelDims {
  std::int64_t d_model = 0;
  std::int64_t d_conv = 0;  // K
  std::int64_t vocab_size = 0;
  bool has_mlp = false;
  std::int64_t d_mlp = 0;
  float norm_eps = 1e-5F;
  std::vector<LayerDims> layers;

  std::int64_t n_layers() const { return static_cast<std::int64_t>(layers.size()); }

  /// Builds dims with identical mixer extents in every layer.
  static ModelDims uniform(std::int64_t d_model, std::int64_t n_layers, std::int64_t n_heads,
                           std::int64_t head_dim, std::int64_t d_state, std::int64_t n_groups,
                           std::int64_t d_conv, std::int64_t vocab_size, bool has_mlp = false,
                           std::int64_t d_mlp = 0);

  // Throws DimensionError on the first violated invariant.
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct MlpParams {
  Tensor gate;  // [d_model, d_mlp]
  Tensor up;    // [d_model, d_mlp]
  Tensor down;  // [d_mlp, d_model]

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Weights of one block. Linear weights are stored [d_in, d_out] so that a
/// layer computes x * W. in_proj columns are packed [z | x | B | C | dt].
struct BlockParams {
  Tensor in_proj;    // [d_model, 2HP + 2GN + H]
  Tensor conv_w;     // [HP + 2GN, K]
  Tensor conv_b;     // [HP + 2GN]
  Tensor a_log;      // [H]
  Tensor d;          // [H]
  Tensor dt_bias;    // [H]
  Tensor norm_w;     // [HP]
  Tensor out_proj;   // [HP, d_model]
  std::optional<Tensor> out_bias;  // [d_model]
  std::optional<MlpParams> mlp;

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct ModelParams {
  Tensor embedding;  // [vocab, d_model], tied with the LM head
  Tensor norm_f;     // [d_model]
  std::vector<BlockParams> layers;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct Model {
  ModelDims dims;
  ModelParams params;

  friend bool operator==(const Model&, const Model&) = default;
};

// Checks every tensor shape against the dims; throws DimensionError.
void validate_model(const Model& model);

struct Range {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t size() const { return end - begin; }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Per-head and per-group index ranges into a block's packed tensors.
class HeadView {
 public:
  explicit HeadView(const LayerDims& dims);

  const LayerDims& dims() const { return dims_; }

  // in_proj column sections.
  Range z_section() const;
  Range x_section() const;
  Range b_section() const;
  Range c_section() const;
  Range dt_section() const;

  Range z_cols(std::int64_t head) const;
  Range x_cols(std::int64_t head) const;
  Range b_cols(std::int64_t group) const;
  Range c_cols(std::int64_t group) const;
  Range dt_col(std::int64_t head) const;

  // conv channels, packed [x | B | C].
  Range conv_x(std::int64_t head) const;
  Range conv_b(std::int64_t group) const;
  Range conv_c(std::int64_t group) const;

  // out_proj input rows (and norm_w entries).
  Range out_rows(std::int64_t head) const;

 private:
  LayerDims dims_;
};

struct InProjSlices {
  Tensor z;   // [d_model, HP]
  Tensor x;   // [d_model, HP]
  Tensor b;   // [d_model, GN]
  Tensor c;   // [d_model, GN]
  Tensor dt;  // [d_model, H]
};

InProjSlices split_in_proj(const BlockParams& params, const LayerDims& dims);

struct SsdResult {
  Tensor y;      // [T, H, P]
  Tensor state;  // [H, P, N]
};

/// Sequential selective-scan recurrence. Head h reads B/C group h*G/H.
SsdResult ssd_sequential(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& dt_raw,
                         const Tensor& a_log, const Tensor& d, const Tensor& dt_bias,
                         const Tensor& h0);

// Called with the input of every linear layer the forward pass evaluates,
// named like "layers.0.in_proj" or "lm_head".
using LinearObserver = std::function<void(const std::string& name, const Tensor& input)>;

Tensor block_forward(const BlockParams& params, const LayerDims& layer, const ModelDims& dims,
                     const Tensor& u);

Tensor model_forward(const Model& model, std::span<const std::uint32_t> tokens,
                     const LinearObserver* observer = nullptr);

/// Mean next-token cross-entropy of one sequence (needs at least 2 tokens).
double sequence_loss(const Model& model, std::span<const std::uint32_t> tokens);

std::string layer_prefix(std::int64_t layer);

namespace ad {

struct SsdVars {
  Var y;
  Tensor state;
};

SsdVars ssd_sequential(Var x, Var b, Var c, Var dt_raw, Var a_log, Var d, Var dt_bias,
                       const Tensor& h0);

struct MlpVars {
  Var gate, up, down;
};

struct BlockVars {
  Var in_proj, conv_w, conv_b, a_log, d, dt_bias, norm_w, out_proj;
  std::optional<Var> out_bias;
  std::optional<MlpVars> mlp;
};

struct ModelVars {
  Var embedding;
  Var norm_f;
  std::vector<BlockVars> layers;
};

/// Records every parameter of the model as a leaf of `tape`.
ModelVars record_params(Tape& tape, const Model& model);

Var block_forward(const BlockVars& params, const LayerDims& layer, const ModelDims& dims, Var u);
Var model_forward(const ModelVars& params, const ModelDims& dims,
                  std::span<const std::uint32_t> tokens);
Var sequence_loss(const ModelVars& params, const ModelDims& dims,
                  std::span<const std::uint32_t> tokens);

}  // namespace ad

}  // namespace ssmprune
