// fedsim — deterministic federated-learning heterogeneity simulator.
//
// Subcommands: synth, partition, train, experiment, report. Exit codes:
// 0 success, 1 validation error (bad flags/config/plan), 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/evaluation.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/skew.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedsim;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

json parse_json_file(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << content;
}

struct DataDir {
  data::LabeledDataset train, val, test;
};

DataDir load_data_dir(const std::string& dir) {
  DataDir d;
  const fs::path p(dir);
  d.train = data::load_idx((p / "train-images.idx").string(), (p / "train-labels.idx").string());
  d.val = data::load_idx((p / "val-images.idx").string(), (p / "val-labels.idx").string());
  d.test = data::load_idx((p / "test-images.idx").string(), (p / "test-labels.idx").string());
  const int c = std::max({d.train.num_categories, d.val.num_categories, d.test.num_categories});
  d.train.num_categories = d.val.num_categories = d.test.num_categories = c;
  return d;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  const json j = parse_json_file(spec_path);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string k = it.key();
    if (k != "num_categories" && k != "per_category" && k != "height" && k != "width" &&
        k != "seed" && k != "fractions")
      throw ValidationError("unknown key '" + k + "' in synth spec");
  }
  data::SynthSpec spec;
  spec.num_categories = j.value("num_categories", 4);
  spec.height = j.value("height", 16);
  spec.width = j.value("width", 16);
  spec.seed = j.value("seed", std::uint64_t{0});
  if (!j.contains("per_category")) throw ValidationError("synth spec: missing 'per_category'");
  if (j.at("per_category").is_array()) {
    for (const auto& v : j.at("per_category")) spec.per_category.push_back(v.get<std::int64_t>());
  } else {
    spec.per_category.assign(static_cast<std::size_t>(std::max(spec.num_categories, 0)),
                             j.at("per_category").get<std::int64_t>());
  }
  data::SplitFractions fr;
  if (j.contains("fractions")) {
    fr.train = j.at("fractions").value("train", 0.5);
    fr.val = j.at("fractions").value("val", 0.25);
    fr.test = j.at("fractions").value("test", 0.25);
  }

  const auto full = data::synth_generate(spec);
  const auto split = data::stratified_split(full, fr, rng::derive(spec.seed, {0x73706c69ull}));

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory: " + out_dir);
  const fs::path p(out_dir);
  data::write_idx(split.train, (p / "train-images.idx").string(), (p / "train-labels.idx").string());
  data::write_idx(split.val, (p / "val-images.idx").string(), (p / "val-labels.idx").string());
  data::write_idx(split.test, (p / "test-images.idx").string(), (p / "test-labels.idx").string());
  std::printf("wrote %zu train / %zu val / %zu test samples to %s\n", split.train.size(),
              split.val.size(), split.test.size(), out_dir.c_str());
  return 0;
}

int cmd_partition(const std::string& data_dir, const std::string& plan_path,
                  const std::string& out_path) {
  const auto d = load_data_dir(data_dir);
  const skew::PartitionPlan plan = skew::plan_from_json(parse_json_file(plan_path));
  const auto part = skew::apply_plan(plan, d.train, d.val, d.test);
  const auto report = skew::score_partition(part.shards);
  write_text(out_path, part.manifest.dump(2) + "\n");
  std::printf("institutions %zu\n", part.shards.size());
  for (const auto& s : part.shards)
    std::printf("  institution %d: train %zu, val %zu\n", s.institution_id, s.train.size(),
                s.val.size());
  std::printf("STD %.4f\n", report.quantity_std);
  std::printf("KS %.6f\n", report.mean_pairwise_ks);
  return 0;
}

struct TrainOptions {
  std::string data_dir, manifest_path, config_path, out_path, trace_path;
  std::string method = "centralized";
  bool wp = false, wl = false, bn_avg = false;
  int batch = 32;
  double lr = 0.05;
  int epochs = 10;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string arch = "tiny-conv";
  int mlp_hidden = 32;
};

int cmd_train(const TrainOptions& opt, const CLI::App* sub) {
  TrainOptions eff = opt;
  if (!opt.config_path.empty()) {
    const json j = parse_json_file(opt.config_path);
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string k = it.key();
      if (k != "method" && k != "wp" && k != "wl" && k != "bn_avg" && k != "batch" && k != "lr" &&
          k != "epochs" && k != "seed" && k != "threads" && k != "arch" && k != "mlp_hidden")
        throw ValidationError("unknown key '" + k + "' in train config");
    }
    // config first, explicit flags override
    eff.method = j.value("method", eff.method);
    eff.wp = j.value("wp", eff.wp);
    eff.wl = j.value("wl", eff.wl);
    eff.bn_avg = j.value("bn_avg", eff.bn_avg);
    eff.batch = j.value("batch", eff.batch);
    eff.lr = j.value("lr", eff.lr);
    eff.epochs = j.value("epochs", eff.epochs);
    eff.seed = j.value("seed", eff.seed);
    eff.threads = j.value("threads", eff.threads);
    eff.arch = j.value("arch", eff.arch);
    eff.mlp_hidden = j.value("mlp_hidden", eff.mlp_hidden);
    auto override_if = [&](const char* flag, auto& dst, const auto& src) {
      if (sub->count(flag) > 0) dst = src;
    };
    override_if("--method", eff.method, opt.method);
    override_if("--wp", eff.wp, opt.wp);
    override_if("--wl", eff.wl, opt.wl);
    override_if("--bn-avg", eff.bn_avg, opt.bn_avg);
    override_if("--batch", eff.batch, opt.batch);
    override_if("--lr", eff.lr, opt.lr);
    override_if("--epochs", eff.epochs, opt.epochs);
    override_if("--seed", eff.seed, opt.seed);
    override_if("--threads", eff.threads, opt.threads);
    override_if("--arch", eff.arch, opt.arch);
  }

  fed::ProtocolConfig cfg;
  if (eff.method == "fedsgd") cfg.method = fed::Method::fedsgd;
  else if (eff.method == "fedavg") cfg.method = fed::Method::fedavg;
  else if (eff.method == "cwt") cfg.method = fed::Method::cwt;
  else if (eff.method == "centralized") cfg.method = fed::Method::centralized;
  else throw ValidationError("unknown method '" + eff.method + "'");
  cfg.mitigations = {eff.wp, eff.wl, eff.bn_avg};
  cfg.batch_size = eff.batch;
  cfg.learning_rate = eff.lr;
  cfg.max_epochs = eff.epochs;
  cfg.model_seed = eff.seed;
  cfg.data_order_seed = rng::derive(eff.seed, {0x6f72646572ull});
  cfg.threads = eff.threads;
  if (cfg.mitigations.bn_avg &&
      (cfg.method == fed::Method::cwt || cfg.method == fed::Method::centralized))
    throw ValidationError("--bn-avg requires --method fedsgd or fedavg");

  const auto d = load_data_dir(eff.data_dir);
  if (eff.manifest_path.empty()) throw ValidationError("train: --manifest is required");
  const auto part = skew::apply_manifest(parse_json_file(eff.manifest_path), d.train, d.val, d.test);
  const auto arch = experiment::make_arch(
      eff.arch, static_cast<int>(d.train.channels()), static_cast<int>(d.train.height()),
      static_cast<int>(d.train.width()), d.train.num_categories, eff.mlp_hidden);

  std::ofstream trace_out;
  fed::TraceFn trace;
  if (!eff.trace_path.empty()) {
    trace_out.open(eff.trace_path, std::ios::binary);
    if (!trace_out) throw std::runtime_error("cannot write trace file: " + eff.trace_path);
    trace = [&trace_out](long long step, const std::vector<double>& params) {
      trace_out << step;
      char buf[32];
      for (double v : params) {
        std::snprintf(buf, sizeof(buf), " %.17g", v);
        trace_out << buf;
      }
      trace_out << "\n";
    };
  }

  const auto run = fed::run_protocol(part.shards, arch, cfg, trace);

  eval::RunResult result;
  result.final_test_accuracy = eval::accuracy(run.selected, d.test);
  result.rounds = run.rounds;
  result.selected_round = run.selected_round;
  result.trial_seeds = {eff.seed};
  if (part.shards.size() >= 2 && cfg.method != fed::Method::centralized)
    result.cross_matrix = eval::cross_institution_matrix(run.institution_models, part.test_shards);
  result.validate();

  const json out = eval::run_result_to_json(result);
  if (!eff.out_path.empty()) write_text(eff.out_path, out.dump(2) + "\n");
  std::printf("test_accuracy %.6f (selected round %d)\n", result.final_test_accuracy,
              result.selected_round);
  return 0;
}

int cmd_experiment(const std::string& config_path, const std::string& output_override,
                   int threads_override) {
  experiment::ExperimentConfig cfg = experiment::parse_config(read_text(config_path));
  if (!output_override.empty()) cfg.output_dir = output_override;
  if (threads_override > 0) cfg.threads = threads_override;
  const auto report = experiment::run_experiment(cfg);
  experiment::emit_report(report, cfg.output_dir);
  std::printf("wrote results to %s\n", cfg.output_dir.c_str());
  for (const auto& c : report.cells) {
    if (c.error.empty())
      std::printf("  %s / %s: mean %.4f std %.4f\n", c.partition_id.c_str(), c.protocol_id.c_str(),
                  c.mean_accuracy, c.std_accuracy);
    else
      std::printf("  %s / %s: ERROR %s\n", c.partition_id.c_str(), c.protocol_id.c_str(),
                  c.error.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic federated-learning heterogeneity simulator"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic IDX dataset");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "synth spec JSON file")->required();
  synth->add_option("--out", synth_out, "output directory")->required();

  // partition
  auto* partition = app.add_subcommand("partition", "materialize a partition plan");
  std::string part_data, part_plan, part_out;
  partition->add_option("--data", part_data, "IDX data directory")->required();
  partition->add_option("--plan", part_plan, "partition plan JSON file")->required();
  partition->add_option("--out", part_out, "manifest output path")->required();

  // train
  auto* train = app.add_subcommand("train", "run one protocol on a partition manifest");
  TrainOptions topt;
  train->add_option("--data", topt.data_dir, "IDX data directory")->required();
  train->add_option("--manifest", topt.manifest_path, "partition manifest JSON");
  train->add_option("--config", topt.config_path, "train config JSON (flags override)");
  train->add_option("--method", topt.method, "fedsgd|fedavg|cwt|centralized");
  train->add_flag("--wp", topt.wp, "size-proportional weights / visit budgets");
  train->add_flag("--wl", topt.wl, "class-weighted loss");
  train->add_flag("--bn-avg", topt.bn_avg, "average BN running statistics");
  train->add_option("--batch", topt.batch, "minibatch size");
  train->add_option("--lr", topt.lr, "learning rate");
  train->add_option("--epochs", topt.epochs, "epochs / rounds / cycles");
  train->add_option("--seed", topt.seed, "model seed (data order derived)");
  train->add_option("--threads", topt.threads, "worker thread cap");
  train->add_option("--arch", topt.arch, "tiny-conv|tiny-conv-nobn|mlp|mlp-bn");
  train->add_option("--out", topt.out_path, "RunResult JSON output path");
  train->add_option("--trace", topt.trace_path, "per-step parameter trace output");

  // experiment
  auto* exper = app.add_subcommand("experiment", "run a full experiment config");
  std::string exp_config, exp_out;
  int exp_threads = 0;
  exper->add_option("--config", exp_config, "experiment config JSON")->required();
  exper->add_option("--output", exp_out, "override output directory");
  exper->add_option("--threads", exp_threads, "override worker thread cap");

  // report
  auto* report = app.add_subcommand("report", "regenerate CSV/SVG from results.json");
  std::string report_dir;
  report->add_option("--results", report_dir, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_out);
    if (partition->parsed()) return cmd_partition(part_data, part_plan, part_out);
    if (train->parsed()) return cmd_train(topt, train);
    if (exper->parsed()) return cmd_experiment(exp_config, exp_out, exp_threads);
    if (report->parsed()) {
      experiment::render_report_dir(report_dir);
      std::printf("re-rendered reports under %s\n", report_dir.c_str());
      return 0;
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failure: %s\n", e.what());
    return 2;
  }
  return 1;
}
