#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim::data {

/// Images with integer category labels and provenance metadata. `ids` are
/// stable per-sample identifiers that survive splitting and partitioning;
/// `groups` is a same-length group key (samples sharing a group are never
/// separated by stratified_split). Synthetic data uses one group per sample.
struct LabeledDataset {
  Tensor images;  // N x C x H x W, values in [0,1]
  std::vector<int> labels;
  int num_categories = 0;
  std::vector<std::uint64_t> ids;
  std::vector<std::uint64_t> groups;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.shape.size() == 4 ? images.shape[1] : 0; }
  std::size_t height() const { return images.shape.size() == 4 ? images.shape[2] : 0; }
  std::size_t width() const { return images.shape.size() == 4 ? images.shape[3] : 0; }

  std::vector<std::int64_t> label_histogram() const;
  void validate() const;  // invariant check; throws ValidationError
};

/// Gather rows by position (not id). Keeps num_categories.
LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::uint32_t>& indices);

/// Concatenation in argument order; ids must stay unique.
LabeledDataset concat(const std::vector<const LabeledDataset*>& parts);

// ---- IDX binary container --------------------------------------------------
// Big-endian; image magic 0x00000803, label magic 0x00000801. Pixels u8,
// scaled by 1/255 on load. Loaded ids are the file row indices.

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const LabeledDataset& ds, const std::string& images_path,
               const std::string& labels_path);

// ---- synthetic task ---------------------------------------------------------

/// Deterministic image-classification task: each category is an oriented bar
/// at a category-specific angle with per-sample position/angle jitter and
/// mild pixel noise. Pure function of the spec.
struct SynthSpec {
  int num_categories = 4;
  std::vector<std::int64_t> per_category;  // size num_categories, each >= 1
  int height = 16;
  int width = 16;
  std::uint64_t seed = 0;
};

LabeledDataset synth_generate(const SynthSpec& spec);

// ---- stratified splitting ----------------------------------------------------

struct SplitFractions {
  double train = 0.5;
  double val = 0.25;
  double test = 0.25;
};

struct SplitResult {
  LabeledDataset train, val, test;
};

/// Per-category counts in each split deviate from exact proportionality by at
/// most one (singleton groups); ids are disjoint and cover the input. Groups
/// with several samples are assigned whole to one split.
SplitResult stratified_split(const LabeledDataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed);

}  // namespace fedsim::data
