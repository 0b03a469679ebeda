#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fedsim/nn.hpp"
#include "fedsim/skew.hpp"

namespace fedsim::fed {

enum class Method { fedsgd, fedavg, cwt, centralized };

struct Mitigations {
  bool wp = false;      // size-proportional aggregation weights / visit budgets
  bool wl = false;      // class-weighted loss, in training and model selection
  bool bn_avg = false;  // include BN running statistics in the server average
};

struct ProtocolConfig {
  Method method = Method::centralized;
  Mitigations mitigations;
  int batch_size = 32;
  double learning_rate = 0.05;
  int max_epochs = 10;  // epochs / rounds / cycles depending on the method
  std::uint64_t model_seed = 0;
  std::uint64_t data_order_seed = 0;
  bool uniform_fedavg = false;  // ablation: average with 1/n instead of Q_i/Q
  int threads = 1;
};

/// One global synchronization cycle: a FedSGD epoch, a FedAVG round, a CWT
/// cycle, or a centralized epoch.
struct RoundLog {
  int round = 0;
  std::vector<double> train_loss;  // per institution, mean over the round's steps
  double val_metric = 0.0;         // selection metric of the global model
  long long comm_events = 0;       // weight/gradient transfers this round
};

/// Invoked after every update of the global model's parameters with the step
/// index and the flattened parameter vector.
using TraceFn = std::function<void(long long step, const std::vector<double>& params)>;

struct RunOutput {
  nn::ModelState selected;                         // best-validation checkpoint
  std::vector<nn::ModelState> institution_models;  // per-institution states at that round
  std::vector<RoundLog> rounds;
  int selected_round = -1;  // -1 when no training round ran
};

// ---- server-side aggregation ops ------------------------------------------------

/// Sum of w_i * g_i. Weights must be nonnegative and sum to 1 (within 1e-9);
/// uniform weights give plain FedSGD, Q_i/Q weights give FedSGD+WP.
std::vector<double> aggregate_gradients(const std::vector<std::vector<double>>& gradients,
                                        const std::vector<double>& weights);

/// Weighted average of trainable parameters. BN buffers are copied from
/// institution 0 (the standard behavior that leaves running statistics
/// unsynchronized).
nn::ModelState aggregate_weights(const std::vector<nn::ModelState>& models,
                                 const std::vector<double>& weights);

/// Weighted average of the flattened BN running statistics, same weights as
/// aggregate_weights.
std::vector<double> aggregate_bn_buffers(const std::vector<nn::ModelState>& models,
                                         const std::vector<double>& weights);

// ---- protocols --------------------------------------------------------------------

RunOutput run_fedsgd(const std::vector<skew::InstitutionShard>& shards,
                     const nn::Architecture& arch, const ProtocolConfig& cfg,
                     const TraceFn& trace = {});

RunOutput run_fedavg(const std::vector<skew::InstitutionShard>& shards,
                     const nn::Architecture& arch, const ProtocolConfig& cfg,
                     const TraceFn& trace = {});

RunOutput run_cwt(const std::vector<skew::InstitutionShard>& shards, const nn::Architecture& arch,
                  const ProtocolConfig& cfg, const TraceFn& trace = {});

RunOutput run_centralized(const data::LabeledDataset& train, const data::LabeledDataset& val,
                          const nn::Architecture& arch, const ProtocolConfig& cfg,
                          const TraceFn& trace = {});

/// Dispatch on cfg.method; Method::centralized pools the shards.
RunOutput run_protocol(const std::vector<skew::InstitutionShard>& shards,
                       const nn::Architecture& arch, const ProtocolConfig& cfg,
                       const TraceFn& trace = {});

}  // namespace fedsim::fed
