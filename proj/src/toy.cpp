#include "ssmprune/toy.hpp"

#include <algorithm>
#include <cmath>

#include "ssmprune/error.hpp"
#include "ssmprune/parallel.hpp"
#include "ssmprune/rng.hpp"

namespace ssmprune {

namespace {

struct Preset {
  const char* name;
  std::int64_t d_model, n_layers, n_heads, head_dim, d_state, n_groups, d_conv, vocab;
  bool has_mlp;
  std::int64_t d_mlp;
};

constexpr Preset kPresets[] = {
    {"desk", 4, 1, 2, 3, 4, 1, 2, 8, false, 0},
    {"tiny", 4, 1, 2, 2, 2, 1, 2, 8, false, 0},
    {"toy-mva", 16, 2, 4, 8, 8, 1, 4, 32, false, 0},
    {"toy-mha", 16, 2, 4, 8, 8, 4, 4, 32, false, 0},
    {"toy-gva", 16, 2, 4, 8, 8, 2, 4, 32, false, 0},
    {"toy-mlp", 16, 2, 4, 8, 8, 2, 4, 32, true, 32},
    {"bench", 64, 2, 8, 16, 16, 1, 4, 64, false, 0},
    {"mamba2-2.7b", 2560, 64, 80, 64, 128, 1, 4, 50280, false, 0},
    {"phi-mamba-1.5b", 2048, 24, 32, 64, 64, 32, 4, 51200, true, 8192},
};

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
}

}  // namespace

ModelDims preset_dims(const std::string& name) {
  for (const auto& p : kPresets) {
    if (name == p.name) {
      return ModelDims::uniform(p.d_model, p.n_layers, p.n_heads, p.head_dim, p.d_state,
                                p.n_groups, p.d_conv, p.vocab, p.has_mlp, p.d_mlp);
    }
  }
  throw ContractError("unknown preset '" + name + "'");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& p : kPresets) names.emplace_back(p.name);
  return names;
}

Model make_toy_model(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(seed);
  Model m;
  m.dims = dims;
  const auto dm = dims.d_model;
  m.params.embedding = Tensor({dims.vocab_size, dm});
  fill_normal(m.params.embedding, rng, 1.0);
  m.params.norm_f = Tensor({dm}, 1.0F);
  for (const auto& l : dims.layers) {
    BlockParams b;
    b.in_proj = Tensor({dm, l.in_proj_width()});
    fill_normal(b.in_proj, rng, 1.0 / std::sqrt(static_cast<double>(dm)));
    b.conv_w = Tensor({l.conv_channels(), dims.d_conv});
    fill_normal(b.conv_w, rng, 1.0 / std::sqrt(static_cast<double>(dims.d_conv)));
    b.conv_b = Tensor({l.conv_channels()});
    fill_normal(b.conv_b, rng, 0.1);
    b.a_log = Tensor({l.n_heads});
    b.dt_bias = Tensor({l.n_heads});
    for (std::int64_t h = 0; h < l.n_heads; ++h) {
      const auto hu = static_cast<std::size_t>(h);
      b.a_log[hu] = static_cast<float>(std::log(rng.uniform(1.0, 16.0)));
      // dt in [1e-3, 1e-1] log-uniform, stored as its softplus inverse.
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      b.dt_bias[hu] = static_cast<float>(dt + std::log(-std::expm1(-dt)));
    }
    b.d = Tensor({l.n_heads}, 1.0F);
    b.norm_w = Tensor({l.d_inner()}, 1.0F);
    b.out_proj = Tensor({l.d_inner(), dm});
    fill_normal(b.out_proj, rng, 1.0 / std::sqrt(static_cast<double>(l.d_inner())));
    if (l.out_bias) b.out_bias = Tensor({dm});
    if (dims.has_mlp) {
      MlpParams mlp{Tensor({dm, dims.d_mlp}), Tensor({dm, dims.d_mlp}), Tensor({dims.d_mlp, dm})};
      fill_normal(mlp.gate, rng, 1.0 / std::sqrt(static_cast<double>(dm)));
      fill_normal(mlp.up, rng, 1.0 / std::sqrt(static_cast<double>(dm)));
      fill_normal(mlp.down, rng, 1.0 / std::sqrt(static_cast<double>(dims.d_mlp)));
      b.mlp = std::move(mlp);
    }
    m.params.layers.push_back(std::move(b));
  }
  validate_model(m);
  return m;
}

CalibSet sample_corpus(const Model& model, std::size_t count, std::size_t length,
                       std::uint64_t seed, int threads) {
  if (length == 0) throw ContractError("sample_corpus: length must be positive");
  CalibSet set;
  set.source = "sampled:seed=" + std::to_string(seed);
  set.sequences.resize(count);
  const auto vocab = model.dims.vocab_size;
  // One independent stream per sequence keeps the corpus thread-count invariant.
  Rng seeder(seed);
  std::vector<std::uint64_t> seeds(count);
  for (auto& s : seeds) s = seeder.next();
  parallel_for(count, threads, [&](std::size_t i) {
    Rng rng(seeds[i]);
    TokenSeq seq;
    seq.push_back(static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(vocab))));
    while (seq.size() < length) {
      const Tensor logits = model_forward(model, seq);
      const float* row = logits.data() + (logits.dim(0) - 1) * vocab;
      const float mx = *std::max_element(row, row + vocab);
      std::vector<double> cdf(static_cast<std::size_t>(vocab));
      double total = 0.0;
      for (std::int64_t v = 0; v < vocab; ++v) {
        total += std::exp(static_cast<double>(row[v]) - mx);
        cdf[static_cast<std::size_t>(v)] = total;
      }
      const double u = rng.uniform() * total;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const auto tok = std::min<std::int64_t>(it - cdf.begin(), vocab - 1);
      seq.push_back(static_cast<std::uint32_t>(tok));
    }
    set.sequences[i] = std::move(seq);
  });
  return set;
}

CalibSet random_corpus(std::int64_t vocab_size, std::size_t count, std::size_t length,
                       std::uint64_t seed) {
  Rng rng(seed);
  CalibSet set;
  set.source = "random:seed=" + std::to_string(seed);
  for (std::size_t i = 0; i < count; ++i) {
    TokenSeq seq(length);
    for (auto& t : seq) t = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(vocab_size)));
    set.sequences.push_back(std::move(seq));
  }
  return set;
}

}  // namespace ssmprune
