#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/dataset.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/nn.hpp"

namespace fedsim::eval {

/// Fraction of argmax-correct predictions (infer mode); argmax ties resolve
/// to the lowest category index.
double accuracy(const nn::ModelState& model, const data::LabeledDataset& ds);

/// Entry (i, j) = accuracy of institution i's model on institution j's test
/// shard.
std::vector<std::vector<double>> cross_institution_matrix(
    const std::vector<nn::ModelState>& models, const std::vector<data::LabeledDataset>& test_shards);

/// Relative drop in percent: 100 * (ref_acc - acc) / ref_acc. Negative means
/// improvement over the reference.
double drop_rate(double acc, double ref_acc);

/// Mean validation loss over the pooled validation data (lower is better).
/// With wl, weighted cross-entropy using weights from the pooled validation
/// histogram; otherwise plain cross-entropy.
double selection_metric(const nn::ModelState& model, const data::LabeledDataset& pooled_val,
                        bool wl);
double selection_metric(const nn::ModelState& model,
                        const std::vector<const data::LabeledDataset*>& val_shards, bool wl);

/// Everything a single protocol run reports.
struct RunResult {
  double final_test_accuracy = 0.0;
  std::vector<fed::RoundLog> rounds;
  int selected_round = -1;
  std::vector<std::vector<double>> cross_matrix;  // empty unless collected
  bool has_drop_rate = false;
  double drop_rate_vs_reference = 0.0;  // relative percent, per drop_rate()
  std::string reference_name;
  std::vector<std::uint64_t> trial_seeds;

  void validate() const;  // throws ValidationError on inconsistent fields
};

nlohmann::json run_result_to_json(const RunResult& r);

}  // namespace fedsim::eval
