#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/dataset.hpp"
#include "fedsim/evaluation.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/skew.hpp"

namespace fedsim::experiment {

struct DatasetSpec {
  bool use_synth = true;
  data::SynthSpec synth;
  data::SplitFractions fractions;
  std::string idx_dir;  // pre-split train/val/test IDX pairs
};

struct PartitionSpec {
  std::string id;
  skew::PartitionPlan plan;  // plan seed is re-derived per trial
};

struct ProtocolSpec {
  std::string id;
  fed::Method method = fed::Method::centralized;
  fed::Mitigations mitigations;
  int batch_size = 32;
  double learning_rate = 0.05;
  int epochs = 10;
  bool uniform_fedavg = false;
};

/// Names the drop-rate reference. Empty fields mean "same as the cell":
/// {partition:"split1"} compares each protocol to itself on split1 (the
/// quantity/label figures); {protocol:"central"} compares each partition's
/// protocols to the centralized baseline on the same partition.
struct ReferenceSpec {
  std::string partition;
  std::string protocol;
  bool empty() const { return partition.empty() && protocol.empty(); }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int repeats = 4;  // trials per cell
  int threads = 1;
  bool collect_cross_matrix = false;
  std::string arch = "tiny-conv";  // tiny-conv | tiny-conv-nobn | mlp | mlp-bn
  int mlp_hidden = 32;
  std::string output_dir = "results";
  DatasetSpec dataset;
  std::vector<PartitionSpec> partitions;
  std::vector<ProtocolSpec> protocols;
  ReferenceSpec reference;
};

/// Strict parse: unknown keys are rejected by name; syntax errors carry
/// line/column.
ExperimentConfig parse_config(const std::string& text);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

struct TrialOutcome {
  int trial = 0;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  int selected_round = -1;
  double ks = 0.0;
  double quantity_std = 0.0;
};

struct CellOutcome {
  std::string partition_id;
  std::string protocol_id;
  std::string mitigations;  // canonical string, e.g. "wp+wl" or "none"
  std::vector<TrialOutcome> trials;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  bool has_drop = false;
  double drop_rate = 0.0;
  std::vector<std::vector<double>> cross_matrix;  // trial 0, when collected
  std::string error;                              // non-empty if the cell aborted
};

struct PartitionSummary {
  std::string id;
  skew::SkewReport skew;  // realization under the trial-0 seed
};

struct ExperimentReport {
  nlohmann::json config;
  std::vector<PartitionSummary> partitions;
  std::vector<CellOutcome> cells;
};

/// Runs every (partition, protocol) cell for `repeats` seeded trials.
/// Deterministic in the config, independent of the thread cap; a failing
/// cell records its error and the rest proceed.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

nlohmann::json report_to_json(const ExperimentReport& report);

// Pure renderers: results.csv / accuracy.svg / cross_matrix.csv are functions
// of results.json alone, so regeneration is byte-identical.
std::string render_csv(const nlohmann::json& results);
std::string render_svg(const nlohmann::json& results);
std::string render_cross_matrix_csv(const nlohmann::json& results);

/// Writes results.json, results.csv, accuracy.svg and (when matrices were
/// collected) cross_matrix.csv under dir.
void emit_report(const ExperimentReport& report, const std::string& dir);

/// Re-renders the derived files from dir/results.json.
void render_report_dir(const std::string& dir);

/// Architecture factory shared by the experiment engine and the CLI.
nn::Architecture make_arch(const std::string& name, int channels, int height, int width,
                           int categories, int mlp_hidden);

}  // namespace fedsim::experiment
