#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "ssmprune/mamba2.hpp"

namespace ssmprune {

/// Generic content of a safetensors-compatible file: string metadata plus
/// named F32 tensors. Tensors are laid out in name order.
struct TensorFile {
  std::map<std::string, std::string> metadata;
  std::map<std::string, Tensor> tensors;
};

// Layout: u64 LE header length n, n bytes of compact JSON with sorted keys,
// then the little-endian fp32 payload.
std::string encode_tensor_file(const TensorFile& file);
/// Validates every header invariant (dtype, shape/size agreement, offsets
/// tiling the payload) and throws FormatError naming the first violation.
TensorFile decode_tensor_file(std::string_view bytes);

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::string_view bytes);

TensorFile read_tensor_file(const std::string& path);
void write_tensor_file(const std::string& path, const TensorFile& file);

// Model <-> container mapping with the layers.{i}.{component} naming scheme
// and dims stored as decimal-string metadata.
TensorFile model_to_tensor_file(const Model& model);
Model model_from_tensor_file(const TensorFile& file);
std::map<std::string, std::string> dims_to_metadata(const ModelDims& dims);
ModelDims dims_from_metadata(const std::map<std::string, std::string>& metadata);

void write_checkpoint(const std::string& path, const Model& model);
Model read_checkpoint(const std::string& path);
/// Reads only the header of a checkpoint and reconstructs its dims.
ModelDims read_checkpoint_dims(const std::string& path);

}  // namespace ssmprune
