#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim::nn {

// Closed layer set: enough to exercise convolution, batch normalization,
// pooling and a linear head at desk scale. Convolutions are fixed at 3x3,
// stride 1, zero padding 1 (spatial extent preserved); pooling is 2x2/2.
enum class LayerKind { conv3x3, batch_norm, relu, max_pool2, flatten, dense };

struct LayerSpec {
  LayerKind kind;
  int channels_out = 0;  // conv3x3
  int features_out = 0;  // dense

  bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
  int input_channels = 1;
  int input_height = 16;
  int input_width = 16;
  std::vector<LayerSpec> layers;

  bool operator==(const Architecture&) const = default;
};

/// Activation extents after each layer (flat=false: channels x height x width;
/// flat=true: features). Entry 0 is the input itself.
struct LayerShape {
  bool flat = false;
  int channels = 0, height = 0, width = 0;
  int features = 0;
  std::size_t element_count() const {
    return flat ? static_cast<std::size_t>(features)
                : static_cast<std::size_t>(channels) * height * width;
  }
};

/// Validates layer-to-layer consistency and returns the shape after each
/// layer (size = layers.size() + 1). Throws ValidationError naming the
/// offending layer pair on mismatch.
std::vector<LayerShape> shape_flow(const Architecture& arch);

// Stock architectures.
Architecture tiny_conv(int in_channels, int height, int width, int categories);
Architecture tiny_conv_no_bn(int in_channels, int height, int width, int categories);
Architecture mlp(int in_channels, int height, int width, int hidden, int categories, bool with_bn);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Trainable parameters plus BN running statistics, held separately so the
/// federation layer can aggregate them under different rules.
struct ModelState {
  Architecture arch;
  std::vector<NamedTensor> params;      // arch declaration order
  std::vector<NamedTensor> bn_buffers;  // running_mean, running_var per BN layer
};

enum class Mode { train, infer };

// Batch-norm conventions (the paper leaves these unstated).
inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

std::size_t param_count(const Architecture& arch);
std::size_t buffer_count(const Architecture& arch);

/// Deterministic initialization: He fan-in normals for conv/dense kernels,
/// zero biases, gamma=1, beta=0, running mean=0, running variance=1. Equal
/// (arch, seed) pairs produce bitwise-identical states.
ModelState build_model(const Architecture& arch, std::uint64_t seed);

/// Per-category loss weights (Eq-style alpha_j = max(counts) / n_j).
struct CategoryWeights {
  std::vector<double> alphas;
};

/// All counts must be >= 1 and there must be at least two categories; a zero
/// count is rejected rather than given an infinite weight.
CategoryWeights class_weights(const std::vector<std::int64_t>& counts);

/// alpha = 1 for every category (plain cross-entropy).
CategoryWeights unit_weights(int categories);

/// Per-BN-layer minibatch statistics from a train-mode forward pass.
struct BnBatchStats {
  std::vector<double> mean;
  std::vector<double> var_biased;    // divide by M (used in the normalization)
  std::vector<double> var_unbiased;  // divide by M-1 (used for the running update)
};

struct ForwardResult {
  Tensor logits;                        // N x K
  std::vector<BnBatchStats> bn_stats;   // one per BN layer; train mode only
};

/// Pure function of (model, batch): train mode normalizes BN with minibatch
/// statistics and reports them; infer mode uses the running buffers. Train
/// mode requires batch size >= 2.
ForwardResult forward(const ModelState& model, const Tensor& batch, Mode mode);

struct LossResult {
  double loss = 0.0;                  // mean of per-sample losses
  std::vector<double> per_sample;
};

/// Class-weighted cross-entropy: per-sample -alpha_y * log softmax_y, with a
/// log-sum-exp formulation. With all-ones weights this is the plain
/// cross-entropy path (same code, alpha multiplication by exactly 1.0).
LossResult weighted_ce(const Tensor& logits, const std::vector<int>& labels,
                       const CategoryWeights& weights);
LossResult cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct BackwardResult {
  double loss = 0.0;
  std::vector<double> gradient;         // aligned with flatten_params
  std::vector<double> updated_buffers;  // aligned with flatten_buffers
};

/// Exact reverse-mode gradient of the weighted-CE batch loss with respect to
/// every trainable parameter, including the full batch-norm backward (batch
/// statistics treated as functions of the input). The model is not mutated:
/// the momentum update of the running statistics is returned as a side
/// channel in updated_buffers.
BackwardResult backward(const ModelState& model, const Tensor& batch,
                        const std::vector<int>& labels, const CategoryWeights& weights);

/// params <- params - lr * gradient; buffers untouched.
ModelState sgd_step(const ModelState& model, const std::vector<double>& gradient, double lr);

std::vector<double> flatten_params(const ModelState& model);
ModelState unflatten_params(const ModelState& model, const std::vector<double>& flat);
std::vector<double> flatten_buffers(const ModelState& model);
ModelState unflatten_buffers(const ModelState& model, const std::vector<double>& flat);

/// Bitwise equality of params and buffers (arch must match).
bool states_equal(const ModelState& a, const ModelState& b);

}  // namespace fedsim::nn
