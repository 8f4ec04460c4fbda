#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmprune/calibration.hpp"
#include "ssmprune/mamba2.hpp"

namespace ssmprune {

/// Named architecture configurations. Full-size presets ("mamba2-2.7b",
/// "phi-mamba-1.5b") are meant for closed-form parameter accounting only.
ModelDims preset_dims(const std::string& name);
std::vector<std::string> preset_names();

/// Seeded "teacher-planted" model: weights drawn from fixed scaled
/// distributions (Mamba-2 style A_log / dt_bias initialisation). Pair with
/// sample_corpus to get data the model itself generated, so the unpruned
/// model is the best predictor of its calibration and evaluation text.
Model make_toy_model(const ModelDims& dims, std::uint64_t seed);

/// Samples `count` sequences of `length` tokens autoregressively from the
/// model (temperature 1, naive full-prefix rescoring per token).
CalibSet sample_corpus(const Model& model, std::size_t count, std::size_t length,
                       std::uint64_t seed, int threads = 1);

/// Uniformly random token ids.
CalibSet random_corpus(std::int64_t vocab_size, std::size_t count, std::size_t length,
                       std::uint64_t seed);

}  // namespace ssmprune
