#pragma once

#include <optional>
#include <string>

#include "ssmprune/calibration.hpp"
#include "ssmprune/checkpoint.hpp"

namespace ssmprune {

/// Everything `calibrate` produces, stored in the tensor container:
/// stats.{layer}.l2 / .mean / .var and taylor.{parameter} tensors, with token
/// counts and the calibration source in the metadata.
struct CalibrationBundle {
  ActivationStats stats;
  std::optional<TaylorAccumulator> taylor;
  std::int64_t token_count = 0;
  std::string source;
};

TensorFile bundle_to_tensor_file(const CalibrationBundle& bundle);
CalibrationBundle bundle_from_tensor_file(const TensorFile& file);
void write_bundle(const std::string& path, const CalibrationBundle& bundle);
CalibrationBundle read_bundle(const std::string& path);

}  // namespace ssmprune
