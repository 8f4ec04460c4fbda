#include "ssmprune/serialize.hpp"

#include <cstdio>

#include "ssmprune/error.hpp"

namespace ssmprune {

namespace {

Json tensor_values(const Tensor& t) {
  Json arr = Json::array();
  for (float v : t.values()) arr.push_back(v);
  return arr;
}

Json counts_json(const ComponentCounts& c) {
  return Json{{"in_proj", c.in_proj}, {"conv", c.conv}, {"out_proj", c.out_proj}, {"misc", c.misc},
              {"total", c.total()}};
}

template <typename T>
T get_field(const Json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("plan json lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("plan json field '") + key + "': " + e.what());
  }
}

}  // namespace

Json to_json(const ModelDims& dims) {
  Json layers = Json::array();
  for (const auto& l : dims.layers) {
    layers.push_back(Json{{"n_heads", l.n_heads},
                          {"head_dim", l.head_dim},
                          {"d_state", l.d_state},
                          {"n_groups", l.n_groups},
                          {"rms_width", l.rms_width},
                          {"out_bias", l.out_bias},
                          {"head_pattern", head_pattern_name(l.pattern())}});
  }
  return Json{{"d_model", dims.d_model}, {"n_layers", dims.n_layers()}, {"d_conv", dims.d_conv},
              {"vocab_size", dims.vocab_size}, {"has_mlp", dims.has_mlp}, {"d_mlp", dims.d_mlp},
              {"norm_eps", dims.norm_eps}, {"layers", layers}};
}

Json to_json(const PrunePlan& plan) {
  Json layers = Json::array();
  for (const auto& l : plan.layers) {
    Json j = Json::object();
    if (l.kept_heads) j["kept_heads"] = *l.kept_heads;
    if (l.kept_groups) j["kept_groups"] = *l.kept_groups;
    if (l.kept_states) j["kept_states"] = *l.kept_states;
    if (l.kept_headdims) j["kept_headdims"] = *l.kept_headdims;
    j["merge_factor"] = l.merge_factor;
    Json masks = Json::object();
    for (const auto& [name, m] : l.masks) masks[name] = m;
    j["masks"] = masks;
    if (l.out_bias_delta) j["out_bias_delta"] = tensor_values(*l.out_bias_delta);
    layers.push_back(j);
  }
  Json model_masks = Json::object();
  for (const auto& [name, m] : plan.model_masks) model_masks[name] = m;
  return Json{{"method", plan.method}, {"targets", plan.targets.str()}, {"layers", layers},
              {"model_masks", model_masks}, {"notes", plan.notes}};
}

PrunePlan plan_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("plan json must be an object");
  PrunePlan plan;
  plan.method = get_field<std::string>(j, "method");
  const auto targets = get_field<std::string>(j, "targets");
  try {
    if (!targets.empty()) plan.targets = TargetFilter::parse(targets);
  } catch (const ContractError& e) {
    throw FormatError(std::string("plan json targets: ") + e.what());
  }
  if (j.contains("notes")) plan.notes = get_field<std::vector<std::string>>(j, "notes");
  if (j.contains("model_masks")) {
    plan.model_masks = get_field<std::map<std::string, std::vector<std::int64_t>>>(j, "model_masks");
  }
  const auto& layers = j.contains("layers") ? j.at("layers") : Json::array();
  if (!layers.is_array()) throw FormatError("plan json 'layers' must be an array");
  for (const auto& lj : layers) {
    if (!lj.is_object()) throw FormatError("plan json layer entries must be objects");
    LayerPlan l;
    if (lj.contains("kept_heads")) l.kept_heads = get_field<std::vector<std::int64_t>>(lj, "kept_heads");
    if (lj.contains("kept_groups")) l.kept_groups = get_field<std::vector<std::int64_t>>(lj, "kept_groups");
    if (lj.contains("kept_states")) {
      l.kept_states = get_field<std::vector<std::vector<std::int64_t>>>(lj, "kept_states");
    }
    if (lj.contains("kept_headdims")) {
      l.kept_headdims = get_field<std::vector<std::vector<std::int64_t>>>(lj, "kept_headdims");
    }
    if (lj.contains("merge_factor")) l.merge_factor = get_field<std::int64_t>(lj, "merge_factor");
    if (lj.contains("masks")) l.masks = get_field<std::map<std::string, std::vector<std::int64_t>>>(lj, "masks");
    if (lj.contains("out_bias_delta")) l.out_bias_delta = Tensor::vector(get_field<std::vector<float>>(lj, "out_bias_delta"));
    plan.layers.push_back(std::move(l));
  }
  return plan;
}

Json to_json(const PruneReport& r) {
  Json before = Json::array();
  Json after = Json::array();
  for (const auto& c : r.layers_before) before.push_back(counts_json(c));
  for (const auto& c : r.layers_after) after.push_back(counts_json(c));
  return Json{{"method", r.method},
              {"ssm_before", counts_json(r.ssm_before)},
              {"ssm_after", counts_json(r.ssm_after)},
              {"model_before", r.model_before},
              {"model_after", r.model_after},
              {"masked_weights", r.masked_weights},
              {"ssm_compression", r.ssm_compression},
              {"whole_model_compression", r.whole_model_compression},
              {"whole_model_sparsity", r.whole_model_sparsity},
              {"fractions", Json{{"in_proj", r.in_proj_fraction}, {"out_proj", r.out_proj_fraction},
                                 {"conv", r.conv_fraction}}},
              {"layers_before", before},
              {"layers_after", after},
              {"notes", r.notes}};
}

Json to_json(const ImportanceScores& s) {
  Json layers = Json::object();
  for (const auto& [name, t] : s.layers) layers[name] = Json{{"shape", t.shape()}, {"values", tensor_values(t)}};
  return Json{{"granularity", granularity_name(s.granularity)}, {"method", s.method},
              {"calibration", s.calibration}, {"layers", layers}};
}

Json to_json(const std::vector<SweepRow>& rows) {
  Json arr = Json::array();
  for (const auto& r : rows) {
    arr.push_back(Json{{"target", r.target}, {"ratio", r.ratio}, {"perplexity", r.perplexity},
                       {"whole_model_sparsity", r.whole_model_sparsity}, {"non_monotone", r.non_monotone}});
  }
  return arr;
}

Json to_json(const EvalReport& r) {
  Json j = Json::object();
  if (r.dense) {
    j["perplexity"] = r.dense->perplexity;
    j["mean_nll"] = r.dense->mean_nll;
    j["token_count"] = r.dense->token_count;
  }
  j["sweep"] = to_json(r.sweep);
  j["component_sensitivity"] = to_json(r.component_sensitivity);
  Json tp = Json::array();
  for (const auto& t : r.throughput) {
    tp.push_back(Json{{"batch", t.batch}, {"seq_len", t.seq_len}, {"tokens_per_s", t.tokens_per_s},
                      {"speedup", t.speedup}});
  }
  j["throughput"] = tp;
  if (!r.throughput.empty()) j["throughput_method"] = r.throughput_method;
  return j;
}

std::string dump_json(const Json& json) { return json.dump(2) + "\n"; }

Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("invalid json: ") + e.what());
  }
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "target,ratio,perplexity,whole_model_sparsity,non_monotone\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%d\n", r.ratio, r.perplexity, r.whole_model_sparsity,
                  r.non_monotone ? 1 : 0);
    out += r.target + buf;
  }
  return out;
}

}  // namespace ssmprune
