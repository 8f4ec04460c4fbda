#include "ssmprune/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "ssmprune/error.hpp"

namespace ssmprune {

using json = nlohmann::json;

namespace {

constexpr const char* kMetadataKey = "__metadata__";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::string_view in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

struct Record {
  std::string name;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

[[noreturn]] void bad(const std::string& what) { throw FormatError("checkpoint: " + what); }

std::uint64_t as_u64(const json& v, const std::string& what) {
  if (!v.is_number_unsigned()) bad(what + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

Record parse_record(const std::string& name, const json& entry) {
  if (!entry.is_object()) bad("entry '" + name + "' is not an object");
  for (const auto& [key, _] : entry.items()) {
    if (key != "dtype" && key != "shape" && key != "data_offsets") {
      bad("entry '" + name + "' has unknown field '" + key + "'");
    }
  }
  if (!entry.contains("dtype") || !entry["dtype"].is_string()) bad("entry '" + name + "' lacks dtype");
  const auto dtype = entry["dtype"].get<std::string>();
  if (dtype != "F32") bad("unsupported dtype '" + dtype + "' for '" + name + "' (only F32)");
  if (!entry.contains("shape") || !entry["shape"].is_array()) bad("entry '" + name + "' lacks shape");
  Record r;
  r.name = name;
  for (const auto& e : entry["shape"]) {
    r.shape.push_back(static_cast<std::int64_t>(as_u64(e, "shape extent of '" + name + "'")));
  }
  if (r.shape.empty()) bad("entry '" + name + "' has an empty shape");
  const auto& off = entry.contains("data_offsets") ? entry["data_offsets"] : json();
  if (!off.is_array() || off.size() != 2) bad("entry '" + name + "' needs data_offsets [begin, end]");
  r.begin = as_u64(off[0], "data_offsets of '" + name + "'");
  r.end = as_u64(off[1], "data_offsets of '" + name + "'");
  if (r.end < r.begin) bad("data_offsets of '" + name + "' are reversed");
  if (r.end - r.begin != 4 * static_cast<std::uint64_t>(shape_numel(r.shape))) {
    bad("data_offsets of '" + name + "' span " + std::to_string(r.end - r.begin) +
        " bytes but shape " + shape_str(r.shape) + " needs " +
        std::to_string(4 * shape_numel(r.shape)));
  }
  return r;
}

std::string join_ints(const std::vector<std::int64_t>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(values[i]);
  }
  return s;
}

std::int64_t parse_int(const std::string& key, std::string_view text) {
  std::int64_t v = 0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (text.empty() || ec != std::errc() || ptr != last) {
    bad("metadata '" + key + "' is not a decimal integer: '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& text,
                                         std::size_t count) {
  std::vector<std::int64_t> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    out.push_back(parse_int(key, std::string_view(text).substr(start, comma == std::string::npos
                                                                          ? std::string::npos
                                                                          : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.size() == 1 && count > 1) out.assign(count, out[0]);
  if (out.size() != count) {
    bad("metadata '" + key + "' has " + std::to_string(out.size()) + " entries for " +
        std::to_string(count) + " layers");
  }
  return out;
}

const std::string& meta_at(const std::map<std::string, std::string>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) bad("metadata lacks '" + key + "'");
  return it->second;
}

std::string format_float(float v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

std::string encode_tensor_file(const TensorFile& file) {
  json header = json::object();
  if (!file.metadata.empty()) {
    json meta = json::object();
    for (const auto& [k, v] : file.metadata) meta[k] = v;
    header[kMetadataKey] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    if (name == kMetadataKey) bad("tensor name collides with __metadata__");
    const auto bytes = 4 * static_cast<std::uint64_t>(t.numel());
    header[name] = {{"data_offsets", {offset, offset + bytes}}, {"dtype", "F32"}, {"shape", t.shape()}};
    offset += bytes;
  }
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  put_u64(out, text.size());
  out += text;
  for (const auto& [name, t] : file.tensors) {
    for (float v : t.values()) put_f32(out, v);
  }
  return out;
}

TensorFile decode_tensor_file(std::string_view bytes) {
  if (bytes.size() < 8) bad("file shorter than the 8-byte header length");
  const auto n = get_u64(bytes);
  if (n > bytes.size() - 8) bad("header length " + std::to_string(n) + " exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(8, n));
  } catch (const json::parse_error& e) {
    bad(std::string("malformed header JSON: ") + e.what());
  }
  if (!header.is_object()) bad("header is not a JSON object");
  TensorFile file;
  std::vector<Record> records;
  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) bad("__metadata__ is not an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) bad("metadata value for '" + mk + "' is not a string");
        file.metadata[mk] = mv.get<std::string>();
      }
      continue;
    }
    records.push_back(parse_record(key, value));
  }
  std::sort(records.begin(), records.end(), [](const Record& a, const Record& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  const std::uint64_t payload = bytes.size() - 8 - n;
  std::uint64_t cursor = 0;
  for (const auto& r : records) {
    if (r.begin < cursor) bad("overlapping data_offsets at '" + r.name + "'");
    if (r.begin > cursor) bad("data_offsets leave a gap before '" + r.name + "'");
    cursor = r.end;
  }
  if (cursor != payload) {
    bad("data_offsets cover " + std::to_string(cursor) + " bytes but the payload has " +
        std::to_string(payload));
  }
  const char* data = bytes.data() + 8 + n;
  for (const auto& r : records) {
    std::vector<float> values(static_cast<std::size_t>(shape_numel(r.shape)));
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32(data + r.begin + 4 * i);
    file.tensors.emplace(r.name, Tensor(r.shape, std::move(values)));
  }
  return file;
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write to '" + path + "' failed");
}

TensorFile read_tensor_file(const std::string& path) { return decode_tensor_file(read_file_bytes(path)); }

void write_tensor_file(const std::string& path, const TensorFile& file) {
  write_file_bytes(path, encode_tensor_file(file));
}

std::map<std::string, std::string> dims_to_metadata(const ModelDims& dims) {
  std::map<std::string, std::string> m;
  m["format"] = "mamba2";
  m["d_model"] = std::to_string(dims.d_model);
  m["n_layers"] = std::to_string(dims.n_layers());
  m["d_conv"] = std::to_string(dims.d_conv);
  m["vocab_size"] = std::to_string(dims.vocab_size);
  m["has_mlp"] = dims.has_mlp ? "1" : "0";
  m["d_mlp"] = std::to_string(dims.d_mlp);
  m["norm_eps"] = format_float(dims.norm_eps);
  auto list = [&](auto field) {
    std::vector<std::int64_t> v;
    for (const auto& l : dims.layers) v.push_back(static_cast<std::int64_t>(field(l)));
    return join_ints(v);
  };
  m["n_heads"] = list([](const LayerDims& l) { return l.n_heads; });
  m["head_dim"] = list([](const LayerDims& l) { return l.head_dim; });
  m["d_state"] = list([](const LayerDims& l) { return l.d_state; });
  m["n_groups"] = list([](const LayerDims& l) { return l.n_groups; });
  m["rms_width"] = list([](const LayerDims& l) { return l.rms_width; });
  m["out_bias"] = list([](const LayerDims& l) { return l.out_bias ? 1 : 0; });
  const auto& first = dims.layers.front();
  m["head_pattern"] = head_pattern_name(first.pattern());
  return m;
}

ModelDims dims_from_metadata(const std::map<std::string, std::string>& m) {
  if (meta_at(m, "format") != "mamba2") bad("metadata format is not 'mamba2'");
  ModelDims dims;
  dims.d_model = parse_int("d_model", meta_at(m, "d_model"));
  const auto n_layers = parse_int("n_layers", meta_at(m, "n_layers"));
  if (n_layers <= 0) bad("metadata n_layers must be positive");
  dims.d_conv = parse_int("d_conv", meta_at(m, "d_conv"));
  dims.vocab_size = parse_int("vocab_size", meta_at(m, "vocab_size"));
  const auto has_mlp = parse_int("has_mlp", meta_at(m, "has_mlp"));
  if (has_mlp != 0 && has_mlp != 1) bad("metadata has_mlp must be 0 or 1");
  dims.has_mlp = has_mlp == 1;
  dims.d_mlp = parse_int("d_mlp", meta_at(m, "d_mlp"));
  {
    const auto& text = meta_at(m, "norm_eps");
    char* end = nullptr;
    const float eps = std::strtof(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(eps) || eps <= 0.0F) {
      bad("metadata norm_eps is not a positive number: '" + text + "'");
    }
    dims.norm_eps = eps;
  }
  const auto count = static_cast<std::size_t>(n_layers);
  const auto heads = parse_int_list("n_heads", meta_at(m, "n_heads"), count);
  const auto head_dim = parse_int_list("head_dim", meta_at(m, "head_dim"), count);
  const auto state = parse_int_list("d_state", meta_at(m, "d_state"), count);
  const auto groups = parse_int_list("n_groups", meta_at(m, "n_groups"), count);
  const auto rms = parse_int_list("rms_width", meta_at(m, "rms_width"), count);
  const auto bias = parse_int_list("out_bias", meta_at(m, "out_bias"), count);
  for (std::size_t i = 0; i < count; ++i) {
    if (bias[i] != 0 && bias[i] != 1) bad("metadata out_bias entries must be 0 or 1");
    dims.layers.push_back(LayerDims{heads[i], head_dim[i], state[i], groups[i], rms[i], bias[i] == 1});
  }
  try {
    dims.validate();
  } catch (const DimensionError& e) {
    bad(e.what());
  }
  if (auto it = m.find("head_pattern"); it != m.end()) {
    if (it->second != head_pattern_name(dims.layers.front().pattern())) {
      bad("metadata head_pattern '" + it->second + "' disagrees with n_heads/n_groups");
    }
  }
  return dims;
}

TensorFile model_to_tensor_file(const Model& model) {
  validate_model(model);
  TensorFile file;
  file.metadata = dims_to_metadata(model.dims);
  const auto& p = model.params;
  file.tensors.emplace("embedding.weight", p.embedding);
  file.tensors.emplace("norm_f.weight", p.norm_f);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto pre = layer_prefix(static_cast<std::int64_t>(i));
    const auto& b = p.layers[i];
    file.tensors.emplace(pre + "in_proj.weight", b.in_proj);
    file.tensors.emplace(pre + "conv1d.weight", b.conv_w);
    file.tensors.emplace(pre + "conv1d.bias", b.conv_b);
    file.tensors.emplace(pre + "A_log", b.a_log);
    file.tensors.emplace(pre + "D", b.d);
    file.tensors.emplace(pre + "dt_bias", b.dt_bias);
    file.tensors.emplace(pre + "norm.weight", b.norm_w);
    file.tensors.emplace(pre + "out_proj.weight", b.out_proj);
    if (b.out_bias) file.tensors.emplace(pre + "out_proj.bias", *b.out_bias);
    if (b.mlp) {
      file.tensors.emplace(pre + "mlp.gate.weight", b.mlp->gate);
      file.tensors.emplace(pre + "mlp.up.weight", b.mlp->up);
      file.tensors.emplace(pre + "mlp.down.weight", b.mlp->down);
    }
  }
  return file;
}

Model model_from_tensor_file(const TensorFile& file) {
  Model model;
  model.dims = dims_from_metadata(file.metadata);
  std::map<std::string, Tensor> pool = file.tensors;
  auto take = [&](const std::string& name) {
    auto it = pool.find(name);
    if (it == pool.end()) bad("missing tensor '" + name + "'");
    Tensor t = std::move(it->second);
    pool.erase(it);
    return t;
  };
  model.params.embedding = take("embedding.weight");
  model.params.norm_f = take("norm_f.weight");
  for (std::int64_t i = 0; i < model.dims.n_layers(); ++i) {
    const auto pre = layer_prefix(i);
    BlockParams b;
    b.in_proj = take(pre + "in_proj.weight");
    b.conv_w = take(pre + "conv1d.weight");
    b.conv_b = take(pre + "conv1d.bias");
    b.a_log = take(pre + "A_log");
    b.d = take(pre + "D");
    b.dt_bias = take(pre + "dt_bias");
    b.norm_w = take(pre + "norm.weight");
    b.out_proj = take(pre + "out_proj.weight");
    if (pool.count(pre + "out_proj.bias")) b.out_bias = take(pre + "out_proj.bias");
    if (model.dims.has_mlp) {
      b.mlp = MlpParams{take(pre + "mlp.gate.weight"), take(pre + "mlp.up.weight"),
                        take(pre + "mlp.down.weight")};
    }
    model.params.layers.push_back(std::move(b));
  }
  if (!pool.empty()) bad("unexpected tensor '" + pool.begin()->first + "'");
  try {
    validate_model(model);
  } catch (const DimensionError& e) {
    bad(std::string("inconsistent with metadata dims: ") + e.what());
  }
  return model;
}

void write_checkpoint(const std::string& path, const Model& model) {
  write_tensor_file(path, model_to_tensor_file(model));
}

Model read_checkpoint(const std::string& path) {
  return model_from_tensor_file(read_tensor_file(path));
}

ModelDims read_checkpoint_dims(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string len(8, '\0');
  if (!in.read(len.data(), 8)) bad("file shorter than the 8-byte header length");
  const auto n = get_u64(len);
  if (n > (std::uint64_t{1} << 32)) bad("header length is implausibly large");
  std::string text(static_cast<std::size_t>(n), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) bad("truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    bad(std::string("malformed header JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains(kMetadataKey) || !header[kMetadataKey].is_object()) {
    bad("header has no __metadata__ object");
  }
  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : header[kMetadataKey].items()) {
    if (!v.is_string()) bad("metadata value for '" + k + "' is not a string");
    meta[k] = v.get<std::string>();
  }
  return dims_from_metadata(meta);
}

}  // namespace ssmprune
