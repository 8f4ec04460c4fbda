#include "ssmprune/calibration.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "ssmprune/checkpoint.hpp"
#include "ssmprune/error.hpp"
#include "ssmprune/parallel.hpp"

namespace ssmprune {

std::int64_t CalibSet::token_count() const {
  std::int64_t n = 0;
  for (const auto& s : sequences) n += static_cast<std::int64_t>(s.size());
  return n;
}

void CalibSet::validate(std::int64_t vocab_size) const {
  if (sequences.empty()) throw ContractError("calibration set is empty");
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (sequences[i].empty()) throw ContractError("calibration sequence " + std::to_string(i) + " is empty");
    for (auto id : sequences[i]) {
      if (static_cast<std::int64_t>(id) >= vocab_size) {
        throw ContractError("calibration sequence " + std::to_string(i) + " has token id " +
                            std::to_string(id) + " >= vocab size " + std::to_string(vocab_size));
      }
    }
  }
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("calibration file truncated at byte " + std::to_string(pos));
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_text_path(const std::string& path) {
  return ends_with(path, ".jsonl") || ends_with(path, ".ndjson") || ends_with(path, ".json");
}

}  // namespace

CalibSet decode_calib_binary(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CALB") != 0) {
    throw FormatError("calibration file lacks the CALB magic");
  }
  std::size_t pos = 4;
  CalibSet set;
  const auto count = get_u32(bytes, pos);
  for (std::uint32_t s = 0; s < count; ++s) {
    const auto len = get_u32(bytes, pos);
    if (static_cast<std::uint64_t>(len) * 4 > bytes.size() - pos) {
      throw FormatError("calibration sequence " + std::to_string(s) + " overruns the file");
    }
    TokenSeq seq(len);
    for (auto& t : seq) t = get_u32(bytes, pos);
    set.sequences.push_back(std::move(seq));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after calibration sequences");
  return set;
}

std::string encode_calib_binary(const CalibSet& calib) {
  std::string out = "CALB";
  put_u32(out, static_cast<std::uint32_t>(calib.sequences.size()));
  for (const auto& seq : calib.sequences) {
    put_u32(out, static_cast<std::uint32_t>(seq.size()));
    for (auto t : seq) put_u32(out, t);
  }
  return out;
}

CalibSet decode_calib_jsonl(const std::string& text) {
  CalibSet set;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json arr;
    try {
      arr = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("calibration line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!arr.is_array()) throw FormatError("calibration line " + std::to_string(lineno) + " is not an array");
    TokenSeq seq;
    for (const auto& v : arr) {
      if (!v.is_number_unsigned() || v.get<std::uint64_t>() > 0xFFFFFFFFULL) {
        throw FormatError("calibration line " + std::to_string(lineno) + " has a non-token entry");
      }
      seq.push_back(v.get<std::uint32_t>());
    }
    set.sequences.push_back(std::move(seq));
  }
  return set;
}

std::string encode_calib_jsonl(const CalibSet& calib) {
  std::string out;
  for (const auto& seq : calib.sequences) {
    out += nlohmann::json(seq).dump();
    out += '\n';
  }
  return out;
}

CalibSet read_calib_file(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  CalibSet set = is_text_path(path) ? decode_calib_jsonl(bytes) : decode_calib_binary(bytes);
  set.source = path;
  return set;
}

void write_calib_file(const std::string& path, const CalibSet& calib) {
  write_file_bytes(path, is_text_path(path) ? encode_calib_jsonl(calib) : encode_calib_binary(calib));
}

const LayerStats& ActivationStats::at(const std::string& name) const {
  auto it = layers.find(name);
  if (it == layers.end()) throw ContractError("no activation statistics for '" + name + "'");
  return it->second;
}

LayerStats merge_layer_stats(const LayerStats& a, const LayerStats& b) {
  if (a.feature_mean.shape() != b.feature_mean.shape()) {
    throw DimensionError("merge_layer_stats: feature widths differ");
  }
  const double na = static_cast<double>(a.token_count);
  const double nb = static_cast<double>(b.token_count);
  const double n = na + nb;
  LayerStats out{Tensor(a.feature_l2.shape()), Tensor(a.feature_mean.shape()),
                 Tensor(a.feature_var.shape()), a.token_count + b.token_count};
  for (std::size_t j = 0; j < static_cast<std::size_t>(a.feature_mean.numel()); ++j) {
    const double l2a = a.feature_l2[j];
    const double l2b = b.feature_l2[j];
    out.feature_l2[j] = static_cast<float>(std::sqrt(l2a * l2a + l2b * l2b));
    if (n == 0.0) continue;
    const double delta = static_cast<double>(b.feature_mean[j]) - a.feature_mean[j];
    out.feature_mean[j] = static_cast<float>(a.feature_mean[j] + delta * nb / n);
    const double m2 = a.feature_var[j] * na + b.feature_var[j] * nb + delta * delta * na * nb / n;
    out.feature_var[j] = static_cast<float>(m2 / n);
  }
  return out;
}

ActivationStats merge_stats(const ActivationStats& a, const ActivationStats& b) {
  ActivationStats out = a;
  for (const auto& [name, s] : b.layers) {
    auto it = out.layers.find(name);
    if (it == out.layers.end()) {
      out.layers.emplace(name, s);
    } else {
      it->second = merge_layer_stats(it->second, s);
    }
  }
  return out;
}

TargetFilter TargetFilter::parse(const std::string& spec) {
  TargetFilter f;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto comma = spec.find(',', start);
    const auto item = spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item == "in_proj") {
      f.in_proj = true;
    } else if (item == "out_proj") {
      f.out_proj = true;
    } else if (item == "both" || item == "ssm") {
      f.in_proj = f.out_proj = true;
    } else if (item == "mlp") {
      f.mlp = true;
    } else if (item == "lm_head") {
      f.lm_head = true;
    } else if (item == "all") {
      f = all();
    } else {
      throw ContractError("unknown target '" + item + "' (expected in_proj, out_proj, both, mlp, lm_head, all)");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return f;
}

bool TargetFilter::matches(const std::string& name) const {
  if (name == "lm_head") return lm_head;
  if (ends_with(name, ".in_proj")) return in_proj;
  if (ends_with(name, ".out_proj")) return out_proj;
  if (name.find(".mlp.") != std::string::npos) return mlp;
  return false;
}

std::string TargetFilter::str() const {
  std::string s;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += n;
  };
  add(in_proj, "in_proj");
  add(out_proj, "out_proj");
  add(mlp, "mlp");
  add(lm_head, "lm_head");
  return s;
}

std::vector<std::string> linear_layer_names(const ModelDims& dims, const TargetFilter& filter) {
  if (filter.mlp && !dims.has_mlp) throw ContractError("target 'mlp' does not exist in this model");
  std::vector<std::string> names;
  for (std::int64_t i = 0; i < dims.n_layers(); ++i) {
    const auto pre = layer_prefix(i);
    if (filter.in_proj) names.push_back(pre + "in_proj");
    if (filter.out_proj) names.push_back(pre + "out_proj");
    if (filter.mlp) {
      names.push_back(pre + "mlp.gate");
      names.push_back(pre + "mlp.up");
      names.push_back(pre + "mlp.down");
    }
  }
  if (filter.lm_head) names.push_back("lm_head");
  return names;
}

namespace {

// Welford moments per feature, merged with Chan's pairwise rule.
struct FeatureMoments {
  std::int64_t count = 0;
  std::vector<double> mean, m2, sumsq;

  void add_rows(const Tensor& x) {
    const auto d = x.dim(1);
    if (mean.empty()) {
      mean.assign(static_cast<std::size_t>(d), 0.0);
      m2.assign(static_cast<std::size_t>(d), 0.0);
      sumsq.assign(static_cast<std::size_t>(d), 0.0);
    }
    for (std::int64_t r = 0; r < x.dim(0); ++r) {
      ++count;
      const double inv = 1.0 / static_cast<double>(count);
      for (std::int64_t j = 0; j < d; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const double v = x.at(r, j);
        const double delta = v - mean[ju];
        mean[ju] += delta * inv;
        m2[ju] += delta * (v - mean[ju]);
        sumsq[ju] += v * v;
      }
    }
  }

  void merge(const FeatureMoments& o) {
    if (o.count == 0) return;
    if (count == 0) {
      *this = o;
      return;
    }
    const double na = static_cast<double>(count);
    const double nb = static_cast<double>(o.count);
    const double n = na + nb;
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double delta = o.mean[j] - mean[j];
      mean[j] += delta * nb / n;
      m2[j] += o.m2[j] + delta * delta * na * nb / n;
      sumsq[j] += o.sumsq[j];
    }
    count += o.count;
  }

  LayerStats finish() const {
    const auto d = static_cast<std::int64_t>(mean.size());
    LayerStats s{Tensor({d}), Tensor({d}), Tensor({d}), count};
    for (std::size_t j = 0; j < mean.size(); ++j) {
      s.feature_l2[j] = static_cast<float>(std::sqrt(sumsq[j]));
      s.feature_mean[j] = static_cast<float>(mean[j]);
      s.feature_var[j] = static_cast<float>(std::max(0.0, m2[j] / static_cast<double>(count)));
    }
    return s;
  }
};

}  // namespace

ActivationStats collect_activation_stats(const Model& model, const CalibSet& calib,
                                         const TargetFilter& targets, int threads) {
  calib.validate(model.dims.vocab_size);
  const auto names = linear_layer_names(model.dims, targets);
  if (names.empty()) throw ContractError("collect_activation_stats: no target layers selected");
  std::vector<std::map<std::string, FeatureMoments>> per_seq(calib.sequences.size());
  parallel_for(calib.sequences.size(), threads, [&](std::size_t i) {
    auto& slot = per_seq[i];
    LinearObserver observer = [&](const std::string& name, const Tensor& input) {
      if (targets.matches(name)) slot[name].add_rows(input);
    };
    model_forward(model, calib.sequences[i], &observer);
  });
  std::map<std::string, FeatureMoments> total;
  for (auto& slot : per_seq) {
    for (auto& [name, m] : slot) total[name].merge(m);
  }
  ActivationStats stats;
  for (const auto& name : names) stats.layers.emplace(name, total.at(name).finish());
  return stats;
}

namespace {

// Error-free addition of b into (hi, lo).
void two_sum_add(double& hi, double& lo, double b) {
  const double s = hi + b;
  const double bp = s - hi;
  const double err = (hi - (s - bp)) + (b - bp);
  hi = s;
  lo += err;
}

}  // namespace

void TaylorAccumulator::add(const std::string& name, const Tensor& grad, const Tensor& weight) {
  if (grad.shape() != weight.shape()) {
    throw DimensionError("TaylorAccumulator: gradient and weight shapes differ for " + name);
  }
  auto& e = entries_[name];
  if (e.hi.empty()) {
    e.shape = weight.shape();
    e.hi.assign(static_cast<std::size_t>(weight.numel()), 0.0);
    e.lo.assign(static_cast<std::size_t>(weight.numel()), 0.0);
  } else if (e.shape != weight.shape()) {
    throw DimensionError("TaylorAccumulator: shape changed for " + name);
  }
  for (std::size_t i = 0; i < e.hi.size(); ++i) {
    const double gw = static_cast<double>(grad[i]) * weight[i];
    two_sum_add(e.hi[i], e.lo[i], gw * gw);
  }
}

void TaylorAccumulator::merge(const TaylorAccumulator& other) {
  for (const auto& [name, o] : other.entries_) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      entries_.emplace(name, o);
      continue;
    }
    auto& e = it->second;
    if (e.shape != o.shape) throw DimensionError("TaylorAccumulator: shape mismatch merging " + name);
    for (std::size_t i = 0; i < e.hi.size(); ++i) {
      two_sum_add(e.hi[i], e.lo[i], o.hi[i]);
      e.lo[i] += o.lo[i];
    }
  }
  passes_ += other.passes_;
}

void TaylorAccumulator::assign(const std::string& name, const Tensor& values) {
  Entry e;
  e.shape = values.shape();
  e.hi.assign(values.values().begin(), values.values().end());
  e.lo.assign(e.hi.size(), 0.0);
  entries_[name] = std::move(e);
}

const TaylorAccumulator::Entry& TaylorAccumulator::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("Taylor accumulator has no tensor '" + name + "'");
  return it->second;
}

std::vector<double> TaylorAccumulator::values(const std::string& name) const {
  const auto& e = entry(name);
  std::vector<double> v(e.hi.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = e.hi[i] + e.lo[i];
  return v;
}

Tensor TaylorAccumulator::tensor(const std::string& name) const {
  const auto v = values(name);
  return Tensor(shape(name), std::vector<float>(v.begin(), v.end()));
}

const Shape& TaylorAccumulator::shape(const std::string& name) const { return entry(name).shape; }

std::vector<std::string> TaylorAccumulator::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

namespace {

struct NamedParam {
  std::string name;
  Var var;
  const Tensor* weight;
};

std::vector<NamedParam> ssm_params(const ad::ModelVars& vars, const Model& model) {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < vars.layers.size(); ++i) {
    const auto pre = layer_prefix(static_cast<std::int64_t>(i));
    const auto& v = vars.layers[i];
    const auto& b = model.params.layers[i];
    out.push_back({pre + "in_proj.weight", v.in_proj, &b.in_proj});
    out.push_back({pre + "conv1d.weight", v.conv_w, &b.conv_w});
    out.push_back({pre + "conv1d.bias", v.conv_b, &b.conv_b});
    out.push_back({pre + "A_log", v.a_log, &b.a_log});
    out.push_back({pre + "D", v.d, &b.d});
    out.push_back({pre + "dt_bias", v.dt_bias, &b.dt_bias});
    out.push_back({pre + "norm.weight", v.norm_w, &b.norm_w});
    out.push_back({pre + "out_proj.weight", v.out_proj, &b.out_proj});
    if (v.out_bias) out.push_back({pre + "out_proj.bias", *v.out_bias, &*b.out_bias});
  }
  return out;
}

}  // namespace

std::vector<std::string> ssm_param_names(const Model& model) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < model.params.layers.size(); ++i) {
    const auto pre = layer_prefix(static_cast<std::int64_t>(i));
    for (const char* c : {"in_proj.weight", "conv1d.weight", "conv1d.bias", "A_log", "D", "dt_bias",
                          "norm.weight", "out_proj.weight"}) {
      names.push_back(pre + c);
    }
    if (model.params.layers[i].out_bias) names.push_back(pre + "out_proj.bias");
  }
  return names;
}

TaylorAccumulator accumulate_taylor(const Model& model, const CalibSet& calib, int threads) {
  calib.validate(model.dims.vocab_size);
  std::vector<TaylorAccumulator> per_seq(calib.sequences.size());
  parallel_for(calib.sequences.size(), threads, [&](std::size_t i) {
    const auto& seq = calib.sequences[i];
    if (seq.size() < 2) return;
    Tape tape;
    const auto vars = ad::record_params(tape, model);
    Var loss = ad::sequence_loss(vars, model.dims, seq);
    if (!std::isfinite(loss.value()[0])) {
      throw NumericError("accumulate_taylor: non-finite loss on sequence " + std::to_string(i));
    }
    tape.backward(loss);
    for (const auto& p : ssm_params(vars, model)) per_seq[i].add(p.name, tape.grad(p.var), *p.weight);
    per_seq[i].set_passes(1);
  });
  TaylorAccumulator total;
  for (const auto& acc : per_seq) total.merge(acc);
  if (total.passes() == 0) throw ContractError("accumulate_taylor: no sequence has two or more tokens");
  return total;
}

}  // namespace ssmprune
