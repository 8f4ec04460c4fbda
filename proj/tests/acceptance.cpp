// Acceptance checks. Prints one PASS/FAIL line per criterion; extra lines
// prefixed "info:" carry the measured values.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "ssmprune/checkpoint.hpp"
#include "ssmprune/cli.hpp"
#include "ssmprune/error.hpp"
#include "ssmprune/eval.hpp"
#include "ssmprune/pruning.hpp"
#include "ssmprune/toy.hpp"

namespace {

using namespace ssmprune;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = true;
  std::vector<std::string> info;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    info.push_back(std::string(ok ? "ok   " : "MISS ") + what);
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double merged_compression(const std::string& preset, std::int64_t factor) {
  const auto dims = preset_dims(preset);
  return compression_report(dims, planned_dims(dims, plan_merge(dims, factor))).ssm_compression;
}

// 1. Head-merge compression from config dims, within 1 percentage point.
Outcome compression_arithmetic() {
  Outcome o;
  const struct {
    const char* preset;
    std::int64_t factor;
    const char* label;
    double expect;
  } rows[] = {{"mamba2-2.7b", 2, "Mamba2-2.7B X heads 80->40", 0.49},
              {"mamba2-2.7b", 4, "Mamba2-2.7B X heads 80->20", 0.70},
              {"phi-mamba-1.5b", 2, "Phi-Mamba BC heads 32->16", 0.20},
              {"phi-mamba-1.5b", 4, "Phi-Mamba BC heads 32->8", 0.30}};
  for (const auto& r : rows) {
    const double got = merged_compression(r.preset, r.factor);
    o.check(std::abs(got - r.expect) <= 0.01,
            std::string(r.label) + ": " + fmt("%.4f", got) + " vs " + fmt("%.2f", r.expect) + " +/- 0.01");
  }
  return o;
}

// 2. Component shares of the large config.
Outcome component_budget() {
  Outcome o;
  const auto r = compression_report(preset_dims("mamba2-2.7b"), preset_dims("mamba2-2.7b"));
  o.check(std::abs(r.in_proj_fraction - 0.67) <= 0.02, "in_proj " + fmt("%.4f", r.in_proj_fraction) + " vs 0.67");
  o.check(std::abs(r.out_proj_fraction - 0.32) <= 0.02, "out_proj " + fmt("%.4f", r.out_proj_fraction) + " vs 0.32");
  o.check(r.conv_fraction < 0.01, "conv " + fmt("%.4f", r.conv_fraction) + " < 0.01");
  return o;
}

// 3. State pruning compression of the large config, within 0.3 pp.
Outcome state_compression() {
  Outcome o;
  const auto dims = preset_dims("mamba2-2.7b");
  for (const auto& [ratio, expect] : {std::pair{0.25, 0.005}, std::pair{0.5, 0.01}}) {
    auto after = dims;
    for (auto& l : after.layers) l.d_state = structured_keep(l.d_state, ratio);
    const double got = compression_report(dims, after).ssm_compression;
    o.check(std::abs(got - expect) <= 0.003,
            "ratio " + fmt("%.2f", ratio) + ": " + fmt("%.5f", got) + " vs " + fmt("%.3f", expect));
  }
  return o;
}

TokenSeq eval_tokens(const Model& m, std::uint64_t seed) {
  return random_corpus(m.dims.vocab_size, 1, 12, seed).sequences[0];
}

// 4. Merging duplicated heads preserves outputs on 50 tiny models.
Outcome function_preservation() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Model m = fixtures::duplicated_heads_model(preset_dims("tiny"), seed, 2);
    const auto tokens = eval_tokens(m, seed + 1000);
    worst = std::max(worst, static_cast<double>(max_abs_diff(model_forward(merge_heads(m, 2), tokens),
                                                             model_forward(m, tokens))));
  }
  o.check(worst < 1e-5, "max-abs output change " + fmt("%.3g", worst) + " < 1e-5 over 50 models");
  return o;
}

// 5. State and head-dim pruning equal zero-masked dense models.
Outcome mask_equivalence() {
  Outcome o;
  double worst_state = 0.0, worst_headdim = 0.0;
  double least_effect = 1e30;  // guards against a vacuous comparison
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Model m = make_toy_model(preset_dims("tiny"), seed);
    const auto tokens = eval_tokens(m, seed + 2000);
    const auto sp = plan_state_pruning(fixtures::random_channel_scores(m.dims, TaylorAxis::StateChannel, seed), m.dims, 0.5);
    least_effect = std::min(least_effect, static_cast<double>(max_abs_diff(
                                              model_forward(m, tokens), model_forward(fixtures::mask_dropped_states(m, sp), tokens))));
    worst_state = std::max(worst_state, static_cast<double>(max_abs_diff(
                                            model_forward(apply_plan(m, sp), tokens),
                                            model_forward(fixtures::mask_dropped_states(m, sp), tokens))));
    const auto hp =
        plan_headdim_pruning(fixtures::random_channel_scores(m.dims, TaylorAxis::HeadDimChannel, seed), m.dims, 0.5);
    worst_headdim = std::max(worst_headdim, static_cast<double>(max_abs_diff(
                                                model_forward(apply_plan(m, hp), tokens),
                                                model_forward(fixtures::mask_dropped_headdims(m, hp), tokens))));
  }
  o.check(least_effect > 1e-4, "state masking moves dense outputs by at least " + fmt("%.3g", least_effect));
  o.check(worst_state < 1e-5, "state pruning max-abs " + fmt("%.3g", worst_state) + " < 1e-5 over 50 models");
  o.check(worst_headdim < 1e-5, "head-dim pruning max-abs " + fmt("%.3g", worst_headdim) + " < 1e-5 over 50 models");
  return o;
}

// 6. FLAP bias compensation is exact for constant channels.
Outcome flap_exactness() {
  Outcome o;
  double worst = 0.0;
  bool removed_constant = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto setup = fixtures::flap_constant_heads(seed);
    const auto stats = collect_activation_stats(setup.model, setup.calib, TargetFilter::parse("out_proj"));
    const auto result = flap_prune(setup.model, stats, setup.ratio);
    const auto& kept = result.plan.layers[0].kept_heads;
    removed_constant = removed_constant && kept && *kept == std::vector<std::int64_t>{0, 2};
    for (const auto& seq : setup.calib.sequences) {
      worst = std::max(worst, static_cast<double>(max_abs_diff(model_forward(result.model, seq),
                                                               model_forward(setup.model, seq))));
    }
  }
  o.check(removed_constant, "the two constant heads are the ones removed");
  o.check(worst < 1e-5, "calibration logits max-abs " + fmt("%.3g", worst) + " < 1e-5 over 5 setups");
  return o;
}

// 7. WANDA group counts and the hand example.
Outcome wanda_exactness() {
  Outcome o;
  const Tensor hand = wanda_apply(Tensor::from_rows({{1, -2}, {3, 0.5F}}), Tensor::from_rows({{1, 8}, {3, 2}}), 0.5,
                                  WandaGrouping::PerInput);
  o.check(hand == Tensor::from_rows({{0, -2}, {3, 0}}), "hand example gives [[0,-2],[3,0]]");
  Rng rng(7);
  bool exact = true;
  for (double r : {0.25, 0.5}) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::int64_t rows = 4 + static_cast<std::int64_t>(rng.below(13));
      const std::int64_t cols = 1 + static_cast<std::int64_t>(rng.below(9));
      Tensor w({rows, cols});
      for (auto& v : w.values()) v = static_cast<float>(rng.uniform(0.5, 2.0)) * (rng.below(2) ? 1.0F : -1.0F);
      Tensor l2({rows});
      for (auto& v : l2.values()) v = static_cast<float>(rng.uniform(0.1, 3.0));
      const Tensor out = wanda_apply(w, wanda_scores(w, l2), r);
      const auto want = static_cast<std::int64_t>(std::floor(r * static_cast<double>(rows)));
      for (std::int64_t c = 0; c < cols; ++c) {
        std::int64_t zeros = 0;
        for (std::int64_t i = 0; i < rows; ++i) zeros += out.at(i, c) == 0.0F;
        exact = exact && zeros == want;
      }
    }
  }
  o.check(exact, "every output group masks exactly floor(r*n) weights for r in {0.25, 0.5}, 40 matrices");
  return o;
}

// 8. Tape gradients against central differences.
Outcome gradient_correctness() {
  Outcome o;
  double worst = 0.0;
  int graphs = 0;
  for (std::uint64_t seed = 0; seed < 120; ++seed, ++graphs) worst = std::max(worst, gradcheck::graph_error(gradcheck::random_graph(seed)));
  o.check(worst < 1e-4, std::to_string(graphs) + " random graphs, worst relative error " + fmt("%.3g", worst));
  double block = 0.0;
  for (const char* preset : {"tiny", "toy-gva"}) {
    block = std::max(block, gradcheck::block_error(make_toy_model(preset_dims(preset), 5), 9, 4));
  }
  o.check(block < 1e-4, "full block_forward, worst relative error " + fmt("%.3g", block));
  return o;
}

// Mean Spearman correlation between Taylor state scores and the
// leave-one-channel-out loss increase.
double taylor_vs_oracle(std::uint64_t seeds, float skip_scale) {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Model m = make_toy_model(preset_dims("toy-gva"), seed);
    for (auto& l : m.params.layers) {
      for (auto& v : l.d.values()) v *= skip_scale;
    }
    const auto calib = sample_corpus(m, 512, 16, seed + 100);
    const auto scores = taylor_group_scores(accumulate_taylor(m, calib), m.dims, TaylorAxis::StateChannel);
    std::vector<double> flat;
    for (std::int64_t i = 0; i < m.dims.n_layers(); ++i) {
      for (float v : scores.at("layers." + std::to_string(i)).values()) flat.push_back(v);
    }
    total += oracle::spearman(flat, oracle::state_removal_deltas(m, calib));
  }
  return total / static_cast<double>(seeds);
}

// 9. Taylor ranking against the removal oracle, 20 seeds.
Outcome taylor_ranking() {
  Outcome o;
  const double rho = taylor_vs_oracle(20, 0.0F);
  o.check(rho >= 0.8, "mean Spearman " + fmt("%.3f", rho) + " >= 0.8 (toy-gva, D = 0, 20 seeds, 512x16 sampled tokens)");
  o.info.push_back("info: with the D skip path kept, mean Spearman over 4 seeds is " + fmt("%.3f", taylor_vs_oracle(4, 1.0F)));
  return o;
}

struct SensitivityRow {
  double sparsity, in_ppl, out_ppl;
};

std::vector<SensitivityRow> component_sensitivity(const std::string& preset, std::uint64_t seed) {
  const Model m = make_toy_model(preset_dims(preset), seed);
  const auto calib = sample_corpus(m, 32, 32, seed + 100);
  const auto eval = sample_corpus(m, 32, 32, seed + 200);
  const auto stats = collect_activation_stats(m, calib, TargetFilter::parse("in_proj,out_proj"));
  std::vector<SensitivityRow> rows;
  for (double s : {0.05, 0.1, 0.15}) {
    auto ppl = [&](const char* target) {
      const auto t = TargetFilter::parse(target);
      return perplexity(apply_plan(m, plan_wanda(m, stats, ratio_for_sparsity(m.dims, t, s), t)), eval).perplexity;
    };
    rows.push_back({s, ppl("in_proj"), ppl("out_proj")});
  }
  return rows;
}

// 10. out_proj-only pruning hurts at least as much as in_proj-only.
Outcome component_direction() {
  Outcome o;
  for (const auto& r : component_sensitivity("toy-gva", 0)) {
    o.check(r.out_ppl >= r.in_ppl, "sparsity " + fmt("%.2f", r.sparsity) + ": out_proj-only ppl " +
                                       fmt("%.4f", r.out_ppl) + " >= in_proj-only " + fmt("%.4f", r.in_ppl));
  }
  for (const char* preset : {"toy-gva", "toy-mha"}) {
    int held = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      for (const auto& r : component_sensitivity(preset, seed)) held += r.out_ppl >= r.in_ppl;
    }
    o.info.push_back(std::string("info: ") + preset + " seeds 0-4, direction holds in " + std::to_string(held) +
                     "/15 cells");
  }
  return o;
}

// Every run uses the same directory because the bundle records its source path.
std::map<std::string, std::string> pipeline_artifacts(const fs::path& dir, int threads) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto p = [&](const char* name) { return (dir / name).string(); };
  const std::string t = std::to_string(threads);
  const std::vector<std::vector<std::string>> steps{
      {"toy", "--preset", "toy-gva", "--out", p("model.safetensors"), "--corpus", p("corpus.calb"), "--count", "16",
       "--length", "16", "--seed", "11", "--threads", t},
      {"calibrate", "--model", p("model.safetensors"), "--calib", p("corpus.calb"), "--out", p("stats.bundle"),
       "--threads", t},
      {"prune", "--model", p("model.safetensors"), "--method", "state", "--ratio", "0.5", "--stats", p("stats.bundle"),
       "--out", p("state.safetensors"), "--plan", p("state.plan.json"), "--report", p("state.report.json"),
       "--threads", t},
      {"prune", "--model", p("model.safetensors"), "--method", "wanda", "--ratio", "0.5", "--stats", p("stats.bundle"),
       "--out", p("wanda.safetensors"), "--plan", p("wanda.plan.json"), "--report", p("wanda.report.json"),
       "--threads", t},
      {"prune", "--model", p("model.safetensors"), "--method", "flap", "--ratio", "0.3", "--stats", p("stats.bundle"),
       "--out", p("flap.safetensors"), "--plan", p("flap.plan.json"), "--report", p("flap.report.json"),
       "--threads", t},
      {"eval", "--model", p("state.safetensors"), "--data", p("corpus.calb"), "--report", p("eval.json"), "--threads",
       t},
  };
  std::ostringstream out, err;
  for (const auto& args : steps) {
    if (run_cli(args, out, err) != 0) throw ContractError("pipeline step " + args[0] + " failed: " + err.str());
  }
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    files[entry.path().filename().string()] = read_file_bytes(entry.path().string());
  }
  return files;
}

// 11. Calibrate, prune, and evaluate twice at 1 thread and once at 4.
Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "ssmprune_acceptance_determinism";
  const auto a = pipeline_artifacts(root, 1);
  const auto b = pipeline_artifacts(root, 1);
  const auto c = pipeline_artifacts(root, 4);
  fs::remove_all(root);
  o.check(a.size() == 13, std::to_string(a.size()) + " artifacts per run");
  o.check(a == b, "two single-thread runs are byte-identical");
  o.check(a == c, "1-thread and 4-thread runs are byte-identical");
  return o;
}

std::string header_of(const std::string& bytes) {
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)])) << (8 * i);
  return bytes.substr(8, n);
}

std::string replace_header(const std::string& bytes, const std::string& header) {
  std::string out;
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((header.size() >> (8 * i)) & 0xFF));
  return out + header + bytes.substr(8 + header_of(bytes).size());
}

// 12. Byte-stable round trip and rejection of 1-field header mutations.
Outcome checkpoint_round_trip() {
  using json = nlohmann::json;
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "ssmprune_acceptance_ckpt";
  fs::create_directories(dir);
  bool stable = true;
  for (const char* preset : {"desk", "toy-gva", "toy-mlp", "toy-mha"}) {
    const Model m = make_toy_model(preset_dims(preset), 4);
    const auto first = (dir / "a.safetensors").string();
    const auto second = (dir / "b.safetensors").string();
    write_checkpoint(first, m);
    const Model back = read_checkpoint(first);
    write_checkpoint(second, back);
    stable = stable && back == m && read_file_bytes(first) == read_file_bytes(second);
  }
  fs::remove_all(dir);
  o.check(stable, "write -> read -> write is value-identical and byte-stable on 4 configs");

  const std::string bytes = encode_tensor_file(model_to_tensor_file(make_toy_model(preset_dims("toy-mlp"), 3)));
  const json base = json::parse(header_of(bytes));
  int total = 0, rejected = 0;
  auto attempt = [&](const json& h) {
    ++total;
    try {
      model_from_tensor_file(decode_tensor_file(replace_header(bytes, h.dump())));
    } catch (const FormatError&) {
      ++rejected;
    }
  };
  for (const auto& [name, _] : base.items()) {
    if (name == "__metadata__") continue;
    const std::vector<std::function<void(json&)>> mutations{
        [&](json& h) { h[name]["dtype"] = "F16"; },
        [&](json& h) { h[name]["shape"][0] = h[name]["shape"][0].get<int>() + 1; },
        [&](json& h) { h[name]["shape"].push_back(2); },
        [&](json& h) { h[name]["data_offsets"][0] = h[name]["data_offsets"][0].get<std::uint64_t>() + 4; },
        [&](json& h) { h[name]["data_offsets"][1] = h[name]["data_offsets"][1].get<std::uint64_t>() + 4; },
        [&](json& h) { h[name].erase("dtype"); },
        [&](json& h) { h[name].erase("shape"); },
        [&](json& h) { h[name].erase("data_offsets"); },
        [&](json& h) { h[name]["extra"] = 1; },
        [&](json& h) {
          h[name + "x"] = h[name];
          h.erase(name);
        },
    };
    for (const auto& mutate : mutations) {
      json h = base;
      mutate(h);
      attempt(h);
    }
  }
  for (const auto& [key, value] : base["__metadata__"].items()) {
    if (key == "norm_eps" || key == "rms_width") continue;
    for (const std::string& replacement : {value.get<std::string>() + "1", std::string("x")}) {
      json h = base;
      h["__metadata__"][key] = replacement;
      attempt(h);
    }
  }
  o.check(total == rejected && total > 200,
          std::to_string(rejected) + "/" + std::to_string(total) + " one-field header mutations rejected");
  return o;
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome()>>> all{
      {"compression arithmetic", compression_arithmetic},
      {"component budget", component_budget},
      {"state-pruning compression", state_compression},
      {"function preservation", function_preservation},
      {"mask equivalence", mask_equivalence},
      {"FLAP compensation exactness", flap_exactness},
      {"WANDA exactness", wanda_exactness},
      {"gradient correctness", gradient_correctness},
      {"Taylor vs oracle", taylor_ranking},
      {"component sensitivity direction", component_direction},
      {"determinism", determinism},
      {"checkpoint round trip", checkpoint_round_trip},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "Run one criterion (1-12); default runs all")
      ->check(CLI::Range(1, static_cast<int>(criteria().size())));
  CLI11_PARSE(app, argc, argv);

  bool all_pass = true;
  for (std::size_t i = 0; i < criteria().size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    const auto& [name, run] = criteria()[i];
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.info.push_back(std::string("exception: ") + e.what());
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    std::printf("criterion %zu (%s): %s [%.1f s]\n", i + 1, name.c_str(), o.pass ? "PASS" : "FAIL", elapsed.count());
    for (const auto& line : o.info) std::printf("  %s\n", line.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
