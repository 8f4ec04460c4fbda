#pragma once

#include <string>

#include <json.hpp>

#include "ssmprune/eval.hpp"
#include "ssmprune/importance.hpp"
#include "ssmprune/pruning.hpp"

namespace ssmprune {

using Json = nlohmann::ordered_json;

Json to_json(const ModelDims& dims);
Json to_json(const PrunePlan& plan);
Json to_json(const PruneReport& report);
Json to_json(const ImportanceScores& scores);
Json to_json(const EvalReport& report);
Json to_json(const std::vector<SweepRow>& rows);

// Throws FormatError on malformed input.
PrunePlan plan_from_json(const Json& json);

// Two-space indented text with a trailing newline.
std::string dump_json(const Json& json);
Json parse_json(const std::string& text);

// CSV with a header row: target,ratio,perplexity,whole_model_sparsity,non_monotone
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace ssmprune
