#include "ssmprune/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

#include <CLI11.hpp>

#include "ssmprune/bundle.hpp"
#include "ssmprune/checkpoint.hpp"
#include "ssmprune/error.hpp"
#include "ssmprune/eval.hpp"
#include "ssmprune/pruning.hpp"
#include "ssmprune/serialize.hpp"
#include "ssmprune/toy.hpp"

namespace ssmprune {

namespace {

struct ToyArgs {
  std::string preset = "tiny";
  std::string out;
  std::string calib_out;
  std::size_t count = 20;
  std::size_t length = 64;
};

struct InspectArgs {
  std::string checkpoint;
  std::string preset;
  bool json = false;
};

struct CalibrateArgs {
  std::string model;
  std::string calib;
  std::string out;
  std::string targets = "all";
  bool taylor = true;
};

struct PruneArgs {
  std::string model;
  std::string method;
  double ratio = -1.0;
  std::int64_t factor = 2;
  std::string stats;
  std::string targets = "ssm";
  std::string out;
  std::string plan_out;
  std::string report;
  std::string replay;
};

struct EvalArgs {
  std::string model;
  std::string data;
  std::string report;
  std::vector<std::int64_t> throughput;
  int repeats = 5;
  double baseline = 0.0;
};

struct SweepArgs {
  std::string model;
  std::string stats;
  std::string data;
  std::string mode = "ratio";
  std::string targets = "ssm";
  std::vector<double> ratios;
  std::string report;
  std::string csv;
};

std::string fraction(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_dims(std::ostream& out, const ModelDims& dims) {
  const auto report = compression_report(dims, dims);
  out << "d_model: " << dims.d_model << "\n"
      << "n_layers: " << dims.n_layers() << "\n"
      << "d_conv: " << dims.d_conv << "\n"
      << "vocab_size: " << dims.vocab_size << "\n";
  if (dims.has_mlp) out << "d_mlp: " << dims.d_mlp << "\n";
  const bool uniform = std::all_of(dims.layers.begin(), dims.layers.end(),
                                   [&](const LayerDims& l) { return l == dims.layers.front(); });
  for (std::size_t i = 0; i < dims.layers.size(); ++i) {
    if (uniform && i > 0) break;
    const auto& l = dims.layers[i];
    out << (uniform ? std::string("all layers") : "layer " + std::to_string(i)) << ": heads " << l.n_heads
        << ", head_dim " << l.head_dim << ", d_state " << l.d_state << ", groups " << l.n_groups << ", "
        << head_pattern_name(l.pattern()) << (l.out_bias ? ", out_proj bias" : "") << "\n";
  }
  out << "ssm params: " << report.ssm_before.total() << "\n"
      << "model params: " << report.model_before << "\n"
      << "in_proj fraction: " << fraction(report.in_proj_fraction) << "\n"
      << "out_proj fraction: " << fraction(report.out_proj_fraction) << "\n"
      << "conv fraction: " << fraction(report.conv_fraction) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
  if (!path.empty()) write_file_bytes(path, text);
}

CalibrationBundle load_bundle(const std::string& path) {
  if (path.empty()) throw ContractError("--stats is required for this method");
  return read_bundle(path);
}

int do_toy(const ToyArgs& a, std::uint64_t seed, int threads, std::ostream& out) {
  const Model model = make_toy_model(preset_dims(a.preset), seed);
  write_checkpoint(a.out, model);
  out << "wrote " << a.out << " (" << count_elements(model) << " parameters)\n";
  if (!a.calib_out.empty()) {
    const auto corpus = sample_corpus(model, a.count, a.length, seed + 1, threads);
    write_calib_file(a.calib_out, corpus);
    out << "wrote " << a.calib_out << " (" << corpus.token_count() << " tokens)\n";
  }
  return 0;
}

int do_inspect(const InspectArgs& a, std::ostream& out) {
  if (a.checkpoint.empty() == a.preset.empty()) throw CLI::ValidationError("inspect needs a checkpoint or --preset");
  const ModelDims dims = a.preset.empty() ? read_checkpoint_dims(a.checkpoint) : preset_dims(a.preset);
  if (a.json) {
    const auto r = compression_report(dims, dims);
    Json j = to_json(dims);
    j["ssm_params"] = r.ssm_before.total();
    j["model_params"] = r.model_before;
    j["fractions"] = Json{{"in_proj", r.in_proj_fraction}, {"out_proj", r.out_proj_fraction},
                          {"conv", r.conv_fraction}};
    out << dump_json(j);
  } else {
    print_dims(out, dims);
  }
  return 0;
}

int do_calibrate(const CalibrateArgs& a, int threads, std::ostream& out) {
  const Model model = read_checkpoint(a.model);
  const CalibSet calib = read_calib_file(a.calib);
  CalibrationBundle b;
  b.source = a.calib;
  b.token_count = calib.token_count();
  auto filter = TargetFilter::parse(a.targets);
  if (!model.dims.has_mlp && a.targets == "all") filter.mlp = false;
  b.stats = collect_activation_stats(model, calib, filter, threads);
  if (a.taylor) b.taylor = accumulate_taylor(model, calib, threads);
  write_bundle(a.out, b);
  out << "wrote " << a.out << " (" << b.stats.layers.size() << " layers, " << b.token_count << " tokens)\n";
  return 0;
}

int do_prune(const PruneArgs& a, int threads, std::ostream& out) {
  const Model model = read_checkpoint(a.model);
  PruneResult result;
  if (!a.replay.empty()) {
    result = execute_plan(model, plan_from_json(parse_json(read_file_bytes(a.replay))));
  } else {
    const bool needs_ratio = a.method != "merge";
    if (needs_ratio && a.ratio < 0.0) throw CLI::ValidationError("--ratio is required for --method " + a.method);
    if (a.method == "wanda") {
      const auto b = load_bundle(a.stats);
      result = execute_plan(model, plan_wanda(model, b.stats, a.ratio, TargetFilter::parse(a.targets), threads));
    } else if (a.method == "state" || a.method == "headdim") {
      const auto b = load_bundle(a.stats);
      if (!b.taylor) throw ContractError("bundle has no Taylor sums; recalibrate with --taylor");
      const bool state = a.method == "state";
      const auto scores = taylor_group_scores(*b.taylor, model.dims,
                                              state ? TaylorAxis::StateChannel : TaylorAxis::HeadDimChannel);
      result = execute_plan(model, state ? plan_state_pruning(scores, model.dims, a.ratio)
                                         : plan_headdim_pruning(scores, model.dims, a.ratio));
    } else if (a.method == "merge") {
      result = execute_plan(model, plan_merge(model.dims, a.factor));
    } else {
      result = flap_prune(model, load_bundle(a.stats).stats, a.ratio);
    }
  }
  write_checkpoint(a.out, result.model);
  write_text(a.plan_out, dump_json(to_json(result.plan)));
  write_text(a.report, dump_json(to_json(result.report)));
  out << "method " << result.plan.method << ": ssm compression " << fraction(result.report.ssm_compression)
      << ", whole-model sparsity " << fraction(result.report.whole_model_sparsity) << "\n";
  for (const auto& note : result.report.notes) out << "note: " << note << "\n";
  return 0;
}

int do_eval(const EvalArgs& a, int threads, std::ostream& out) {
  const Model model = read_checkpoint(a.model);
  EvalReport report;
  if (!a.data.empty()) {
    report.dense = perplexity(model, read_calib_file(a.data), threads);
    out << "perplexity: " << report.dense->perplexity << " over " << report.dense->token_count << " tokens\n";
  }
  if (!a.throughput.empty()) {
    if (a.throughput.size() != 2) throw CLI::ValidationError("--throughput takes BATCH SEQ_LEN");
    std::optional<double> base;
    if (a.baseline > 0.0) base = a.baseline;
    report.throughput.push_back(throughput(model, a.throughput[0], a.throughput[1], a.repeats, base, threads));
    const auto& t = report.throughput.back();
    out << "throughput: " << t.tokens_per_s << " tokens/s (speedup " << fraction(t.speedup) << ")\n";
  }
  if (!report.dense && report.throughput.empty()) throw CLI::ValidationError("eval needs --data or --throughput");
  write_text(a.report, dump_json(to_json(report)));
  return 0;
}

int do_sweep(const SweepArgs& a, int threads, std::ostream& out) {
  const Model model = read_checkpoint(a.model);
  const auto b = load_bundle(a.stats);
  const CalibSet data = read_calib_file(a.data);
  EvalReport report;
  report.dense = perplexity(model, data, threads);
  std::vector<SweepRow> rows;
  if (a.mode == "ratio") {
    std::vector<double> ratios = a.ratios;
    if (ratios.empty()) {
      for (int i = 0; i <= 9; ++i) ratios.push_back(i / 10.0);
    }
    report.sweep = ratio_sweep(model, b.stats, ratios, TargetFilter::parse(a.targets), data, threads);
    rows = report.sweep;
  } else {
    const std::vector<double> ratios = a.ratios.empty() ? std::vector<double>{0.0, 0.25, 0.5} : a.ratios;
    report.component_sensitivity =
        wanda_component_sweep(model, b.stats, {"in_proj", "out_proj", "both"}, ratios, data, threads);
    rows = report.component_sensitivity;
  }
  for (const auto& r : rows) {
    out << r.target << " ratio " << fraction(r.ratio) << ": perplexity " << r.perplexity << ", sparsity "
        << fraction(r.whole_model_sparsity) << (r.non_monotone ? " (non-monotone)" : "") << "\n";
  }
  write_text(a.report, dump_json(to_json(report)));
  write_text(a.csv, sweep_csv(rows));
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured and unstructured pruning for Mamba-2 checkpoints", "ssmprune"};
  app.require_subcommand(1, 1);
  std::uint64_t seed = 0;
  int threads = 1;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Seed for all randomness")->envname("SSMPRUNE_SEED");
    sub->add_option("--threads", threads, "Worker threads")->envname("SSMPRUNE_THREADS")->check(CLI::PositiveNumber);
  };

  ToyArgs toy;
  auto* toy_cmd = app.add_subcommand("toy", "Write a seeded toy checkpoint and optionally a sampled corpus");
  toy_cmd->add_option("--preset", toy.preset, "Dims preset")->check(CLI::IsMember(preset_names()));
  toy_cmd->add_option("--out", toy.out, "Output checkpoint")->required();
  toy_cmd->add_option("--corpus", toy.calib_out, "Also write sequences sampled from the model");
  toy_cmd->add_option("--count", toy.count, "Sampled sequence count");
  toy_cmd->add_option("--length", toy.length, "Sampled sequence length")->check(CLI::PositiveNumber);
  add_common(toy_cmd);

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print dims, head pattern, and component fractions");
  inspect_cmd->add_option("checkpoint", inspect.checkpoint, "Checkpoint path");
  inspect_cmd->add_option("--preset", inspect.preset, "Inspect a named config instead")
      ->check(CLI::IsMember(preset_names()));
  inspect_cmd->add_flag("--json", inspect.json, "Emit JSON");

  CalibrateArgs calibrate;
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Collect activation statistics and Taylor sums");
  calibrate_cmd->add_option("--model", calibrate.model, "Checkpoint")->required();
  calibrate_cmd->add_option("--calib", calibrate.calib, "Calibration tokens (.calb or .jsonl)")->required();
  calibrate_cmd->add_option("--out", calibrate.out, "Output bundle")->required();
  calibrate_cmd->add_option("--targets", calibrate.targets, "Linear layers to observe");
  calibrate_cmd->add_flag("--taylor,!--no-taylor", calibrate.taylor, "Accumulate (grad*weight)^2");
  add_common(calibrate_cmd);

  PruneArgs prune;
  auto* prune_cmd = app.add_subcommand("prune", "Prune a checkpoint");
  prune_cmd->add_option("--model", prune.model, "Input checkpoint")->required();
  prune_cmd->add_option("--method", prune.method, "Pruning method")
      ->check(CLI::IsMember({"wanda", "state", "headdim", "merge", "flap"}));
  prune_cmd->add_option("--ratio", prune.ratio, "Pruning ratio")->check(CLI::Range(0.0, 1.0));
  prune_cmd->add_option("--factor", prune.factor, "Merge factor (power of 2)");
  prune_cmd->add_option("--stats", prune.stats, "Calibration bundle");
  prune_cmd->add_option("--targets", prune.targets, "WANDA target layers");
  prune_cmd->add_option("--out", prune.out, "Output checkpoint")->required();
  prune_cmd->add_option("--plan", prune.plan_out, "Write the plan JSON here");
  prune_cmd->add_option("--report", prune.report, "Write the PruneReport JSON here");
  prune_cmd->add_option("--replay", prune.replay, "Apply a saved plan instead of planning");
  add_common(prune_cmd);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Perplexity and throughput");
  eval_cmd->add_option("--model", eval.model, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "Evaluation tokens");
  eval_cmd->add_option("--report", eval.report, "Write the EvalReport JSON here");
  eval_cmd->add_option("--throughput", eval.throughput, "BATCH SEQ_LEN")->expected(2);
  eval_cmd->add_option("--repeats", eval.repeats, "Throughput repeats")->check(CLI::Range(3, 1000));
  eval_cmd->add_option("--baseline", eval.baseline, "Baseline tokens/s for the speedup column");
  add_common(eval_cmd);

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "WANDA ratio sweep or component-sensitivity sweep");
  sweep_cmd->add_option("--model", sweep.model, "Checkpoint")->required();
  sweep_cmd->add_option("--stats", sweep.stats, "Calibration bundle")->required();
  sweep_cmd->add_option("--data", sweep.data, "Evaluation tokens")->required();
  sweep_cmd->add_option("--mode", sweep.mode, "ratio or component")->check(CLI::IsMember({"ratio", "component"}));
  sweep_cmd->add_option("--targets", sweep.targets, "Layers for ratio mode");
  sweep_cmd->add_option("--ratios", sweep.ratios, "Ascending ratios")->delimiter(',');
  sweep_cmd->add_option("--report", sweep.report, "Write the EvalReport JSON here");
  sweep_cmd->add_option("--csv", sweep.csv, "Write the sweep table as CSV here");
  add_common(sweep_cmd);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (prune_cmd->parsed() && prune.method.empty() && prune.replay.empty()) {
      throw CLI::ValidationError("prune needs --method or --replay");
    }
    if (toy_cmd->parsed()) return do_toy(toy, seed, threads, out);
    if (inspect_cmd->parsed()) return do_inspect(inspect, out);
    if (calibrate_cmd->parsed()) return do_calibrate(calibrate, threads, out);
    if (prune_cmd->parsed()) return do_prune(prune, threads, out);
    if (eval_cmd->parsed()) return do_eval(eval, threads, out);
    return do_sweep(sweep, threads, out);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ssmprune
