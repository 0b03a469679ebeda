#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/dataset.hpp"

namespace fedsim::skew {

/// One institution's private data. Q_i is the training sample count.
struct InstitutionShard {
  int institution_id = 0;
  data::LabeledDataset train;
  data::LabeledDataset val;
  std::vector<std::int64_t> label_histogram;  // of train

  std::int64_t size() const { return static_cast<std::int64_t>(train.size()); }
};

// ---- acquisition transforms -------------------------------------------------

/// Image-formation degradation descriptor. `mixture` picks one component per
/// sample from the weights; components must not themselves be mixtures.
struct Transform {
  enum class Kind { resolution, gaussian, speckle, poisson, motion_blur, mixture };
  Kind kind = Kind::resolution;
  int factor = 1;           // resolution: block size
  double sigma = 0.1;       // gaussian / speckle
  double scale = 64.0;      // poisson: counts per unit intensity
  int length = 5;           // motion_blur: kernel taps
  double angle_deg = 0.0;   // motion_blur
  std::vector<double> weights;          // mixture
  std::vector<Transform> components;    // mixture
};

// Tensor-level operations (images: N x C x H x W). Per-image randomness is
// derived from (seed, image index), so results do not depend on evaluation
// order. All outputs are clamped to [0,1] and preserve shape.
Tensor degrade_resolution(const Tensor& images, int factor);
Tensor add_gaussian(const Tensor& images, double sigma, std::uint64_t seed);
Tensor add_speckle(const Tensor& images, double sigma, std::uint64_t seed);
Tensor add_poisson(const Tensor& images, double scale, std::uint64_t seed);
Tensor motion_blur(const Tensor& images, int length, double angle_deg);
Tensor apply_mixture(const Tensor& images, const Transform& mixture, std::uint64_t seed);

/// Applies one transform to one image in place. The per-image seed must be
/// derived by the caller (by index or by stable sample id).
void transform_image(double* img, std::size_t channels, std::size_t height, std::size_t width,
                     const Transform& t, std::uint64_t image_seed);

/// Applies a transform chain to every sample, deriving per-image seeds from
/// the stable sample ids so manifests reproduce identical pixels.
data::LabeledDataset apply_transforms(const data::LabeledDataset& ds,
                                      const std::vector<Transform>& chain, std::uint64_t seed);

// ---- partition plans ---------------------------------------------------------

enum class Regime { quantity, label, acquisition };

struct PartitionPlan {
  Regime regime = Regime::quantity;
  std::uint64_t seed = 0;
  // quantity: per-institution training sample counts
  std::vector<std::int64_t> sizes;
  // label: institution count and non-IID fraction in [0,1]
  int institutions = 0;
  double noniid_fraction = 0.0;
  // acquisition: per-institution transform chains (institution count implied)
  std::vector<std::vector<Transform>> transforms;
};

struct SkewReport {
  double quantity_std = 0.0;
  double mean_pairwise_ks = 0.0;
  std::vector<std::int64_t> sizes;
  std::vector<std::vector<std::int64_t>> label_histograms;
};

// ---- partition operations ------------------------------------------------------

/// IID partition with prescribed sizes: shard i gets exactly sizes[i] samples
/// and a label histogram within one count of the global proportions.
std::vector<InstitutionShard> partition_quantity(const data::LabeledDataset& ds,
                                                 const std::vector<std::int64_t>& sizes,
                                                 std::uint64_t seed);

/// Sample (n-1 denominator) standard deviation of institution sizes.
double quantity_std(const std::vector<std::int64_t>& sizes);

/// Equal-size shards where a fraction f of each shard comes from its
/// round-robin-assigned dominant category block and the rest is dealt
/// proportionally from the residue. f=0 is homogeneous, f=1 fully disjoint.
std::vector<InstitutionShard> partition_label_skew(const data::LabeledDataset& ds, int n, double f,
                                                   std::uint64_t seed);

/// Mean over institution pairs of the Kolmogorov-Smirnov statistic between
/// category CDFs (fixed category order). 0 = identical, 1 = disjoint.
double mean_pairwise_ks(const std::vector<std::vector<double>>& histograms);
double mean_pairwise_ks(const std::vector<std::vector<std::int64_t>>& histograms);

SkewReport score_partition(const std::vector<InstitutionShard>& shards);

// ---- plan application and manifests ----------------------------------------------

/// Shards with train+val filled, plus per-institution test shards built with
/// the same construction (used for the cross-institution accuracy matrix).
struct PartitionOutput {
  std::vector<InstitutionShard> shards;
  std::vector<data::LabeledDataset> test_shards;
  nlohmann::json manifest;
};

PartitionOutput apply_plan(const PartitionPlan& plan, const data::LabeledDataset& train,
                           const data::LabeledDataset& val, const data::LabeledDataset& test);

/// Rebuilds an apply_plan output from its manifest (id lists + transform
/// descriptors) against the same train/val/test datasets.
PartitionOutput apply_manifest(const nlohmann::json& manifest, const data::LabeledDataset& train,
                               const data::LabeledDataset& val, const data::LabeledDataset& test);

nlohmann::json plan_to_json(const PartitionPlan& plan);
PartitionPlan plan_from_json(const nlohmann::json& j);
nlohmann::json transform_to_json(const Transform& t);
Transform transform_from_json(const nlohmann::json& j);

}  // namespace fedsim::skew
