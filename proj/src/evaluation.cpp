#include "fedsim/evaluation.hpp"

#include <algorithm>

namespace fedsim::eval {

namespace {

constexpr std::size_t kEvalBatch = 256;

Tensor gather_batch(const data::LabeledDataset& ds, std::size_t begin, std::size_t end) {
  const std::size_t px = ds.channels() * ds.height() * ds.width();
  Tensor batch = Tensor::zeros({end - begin, ds.channels(), ds.height(), ds.width()});
  std::copy_n(ds.images.ptr() + begin * px, (end - begin) * px, batch.ptr());
  return batch;
}

}  // namespace

double accuracy(const nn::ModelState& model, const data::LabeledDataset& ds) {
  if (ds.size() == 0) throw ValidationError("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < ds.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(ds.size(), begin + kEvalBatch);
    const auto fwd = nn::forward(model, gather_batch(ds, begin, end), nn::Mode::infer);
    const std::size_t k = fwd.logits.shape[1];
    for (std::size_t n = 0; n < end - begin; ++n) {
      const double* row = fwd.logits.ptr() + n * k;
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;  // ties keep the lowest index
      if (static_cast<int>(arg) == ds.labels[begin + n]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::vector<std::vector<double>> cross_institution_matrix(
    const std::vector<nn::ModelState>& models,
    const std::vector<data::LabeledDataset>& test_shards) {
  if (models.size() != test_shards.size())
    throw ValidationError("cross_institution_matrix: model and shard counts disagree");
  if (models.empty()) throw ValidationError("cross_institution_matrix: no models");
  std::vector<std::vector<double>> m(models.size(), std::vector<double>(models.size(), 0.0));
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = 0; j < test_shards.size(); ++j) m[i][j] = accuracy(models[i], test_shards[j]);
  return m;
}

double drop_rate(double acc, double ref_acc) {
  if (ref_acc <= 0.0) throw ValidationError("drop_rate: reference accuracy must be positive");
  return 100.0 * (ref_acc - acc) / ref_acc;
}

double selection_metric(const nn::ModelState& model, const data::LabeledDataset& pooled_val,
                        bool wl) {
  if (pooled_val.size() == 0) throw ValidationError("selection_metric: empty validation data");
  const nn::CategoryWeights weights = wl ? nn::class_weights(pooled_val.label_histogram())
                                         : nn::unit_weights(pooled_val.num_categories);
  double total = 0.0;
  for (std::size_t begin = 0; begin < pooled_val.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(pooled_val.size(), begin + kEvalBatch);
    const auto fwd = nn::forward(model, gather_batch(pooled_val, begin, end), nn::Mode::infer);
    std::vector<int> labels(pooled_val.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                            pooled_val.labels.begin() + static_cast<std::ptrdiff_t>(end));
    const auto loss = nn::weighted_ce(fwd.logits, labels, weights);
    for (double v : loss.per_sample) total += v;
  }
  return total / static_cast<double>(pooled_val.size());
}

double selection_metric(const nn::ModelState& model,
                        const std::vector<const data::LabeledDataset*>& val_shards, bool wl) {
  if (val_shards.empty()) throw ValidationError("selection_metric: no validation shards");
  return selection_metric(model, data::concat(val_shards), wl);
}

void RunResult::validate() const {
  if (!(final_test_accuracy >= 0.0 && final_test_accuracy <= 1.0))
    throw ValidationError("RunResult: accuracy outside [0,1]");
  for (const auto& row : cross_matrix) {
    if (row.size() != cross_matrix.size())
      throw ValidationError("RunResult: cross matrix is not square");
    for (double v : row)
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("RunResult: matrix entry outside [0,1]");
  }
}

nlohmann::json run_result_to_json(const RunResult& r) {
  nlohmann::json j;
  j["schema"] = "fedsim.run.v1";
  j["final_test_accuracy"] = r.final_test_accuracy;
  j["selected_round"] = r.selected_round;
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& rl : r.rounds) {
    nlohmann::json e;
    e["round"] = rl.round;
    e["train_loss"] = rl.train_loss;
    e["val_metric"] = rl.val_metric;
    e["comm_events"] = rl.comm_events;
    rounds.push_back(std::move(e));
  }
  j["rounds"] = std::move(rounds);
  if (!r.cross_matrix.empty()) j["cross_matrix"] = r.cross_matrix;
  if (r.has_drop_rate) {
    j["drop_rate"] = r.drop_rate_vs_reference;
    j["drop_rate_reference"] = r.reference_name;
  } else {
    j["drop_rate"] = nullptr;
  }
  j["trial_seeds"] = r.trial_seeds;
  return j;
}

}  // namespace fedsim::eval
