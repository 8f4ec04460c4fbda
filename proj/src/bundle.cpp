#include "ssmprune/bundle.hpp"

#include "ssmprune/error.hpp"

namespace ssmprune {

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::int64_t parse_count(const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(text, &used);
    if (used != text.size() || v < 0) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("bundle metadata '" + key + "' is not a count: '" + text + "'");
  }
}

}  // namespace

TensorFile bundle_to_tensor_file(const CalibrationBundle& bundle) {
  TensorFile f;
  f.metadata["format"] = "calibration";
  f.metadata["source"] = bundle.source;
  f.metadata["tokens"] = std::to_string(bundle.token_count);
  for (const auto& [name, s] : bundle.stats.layers) {
    f.tensors["stats." + name + ".l2"] = s.feature_l2;
    f.tensors["stats." + name + ".mean"] = s.feature_mean;
    f.tensors["stats." + name + ".var"] = s.feature_var;
    f.metadata["stats." + name + ".tokens"] = std::to_string(s.token_count);
  }
  if (bundle.taylor) {
    f.metadata["taylor.passes"] = std::to_string(bundle.taylor->passes());
    for (const auto& name : bundle.taylor->names()) f.tensors["taylor." + name] = bundle.taylor->tensor(name);
  }
  return f;
}

CalibrationBundle bundle_from_tensor_file(const TensorFile& file) {
  auto meta = [&](const std::string& key) -> const std::string& {
    auto it = file.metadata.find(key);
    if (it == file.metadata.end()) throw FormatError("bundle metadata lacks '" + key + "'");
    return it->second;
  };
  if (meta("format") != "calibration") throw FormatError("not a calibration bundle");
  CalibrationBundle b;
  b.source = meta("source");
  b.token_count = parse_count(meta("tokens"), "tokens");
  if (file.metadata.count("taylor.passes")) {
    b.taylor.emplace();
    b.taylor->set_passes(parse_count(meta("taylor.passes"), "taylor.passes"));
  }
  for (const auto& [name, t] : file.tensors) {
    if (starts_with(name, "taylor.")) {
      if (!b.taylor) throw FormatError("bundle has Taylor tensors but no pass count");
      b.taylor->assign(name.substr(7), t);
      continue;
    }
    if (!starts_with(name, "stats.")) throw FormatError("unexpected bundle tensor '" + name + "'");
    const auto dot = name.rfind('.');
    const auto layer = name.substr(6, dot - 6);
    auto& s = b.stats.layers[layer];
    if (ends_with(name, ".l2")) {
      s.feature_l2 = t;
    } else if (ends_with(name, ".mean")) {
      s.feature_mean = t;
    } else if (ends_with(name, ".var")) {
      s.feature_var = t;
    } else {
      throw FormatError("unexpected bundle tensor '" + name + "'");
    }
  }
  for (auto& [layer, s] : b.stats.layers) {
    const auto key = "stats." + layer + ".tokens";
    s.token_count = parse_count(meta(key), key);
    const auto w = s.feature_l2.numel();
    if (s.feature_l2.rank() != 1 || s.feature_mean.shape() != Shape{w} || s.feature_var.shape() != Shape{w}) {
      throw FormatError("bundle statistics for '" + layer + "' are incomplete or ragged");
    }
  }
  return b;
}

void write_bundle(const std::string& path, const CalibrationBundle& bundle) {
  write_tensor_file(path, bundle_to_tensor_file(bundle));
}

CalibrationBundle read_bundle(const std::string& path) { return bundle_from_tensor_file(read_tensor_file(path)); }

}  // namespace ssmprune
