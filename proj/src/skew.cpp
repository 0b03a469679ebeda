#include "fedsim/skew.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"

namespace fedsim::skew {

namespace {

constexpr std::uint64_t kTagQuantity = 0x717479ull;
constexpr std::uint64_t kTagLabel = 0x6c626cull;
constexpr std::uint64_t kTagAcq = 0x616371ull;
constexpr std::uint64_t kTagImage = 0x696d67ull;

/// Distributes `sizes[i]` samples per row across categories with
/// availability `avail[c]`, keeping each row's histogram within one count of
/// the availability proportions. Row sums are exact; column sums never
/// exceed availability. With ensure_min_one, every (row, category) cell gets
/// at least one sample (rows must then be >= category count).
std::vector<std::vector<std::int64_t>> allocate_matrix(const std::vector<std::int64_t>& sizes,
                                                       const std::vector<std::int64_t>& avail,
                                                       bool ensure_min_one) {
  const std::size_t rows = sizes.size();
  const std::size_t cols = avail.size();
  std::int64_t total_avail = 0;
  for (std::int64_t a : avail) total_avail += a;

  std::vector<std::vector<double>> target(rows, std::vector<double>(cols));
  std::vector<std::vector<std::int64_t>> count(rows, std::vector<std::int64_t>(cols, 0));

  for (std::size_t i = 0; i < rows; ++i) {
    std::int64_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> rema(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      target[i][c] = static_cast<double>(sizes[i]) * static_cast<double>(avail[c]) /
                     static_cast<double>(total_avail);
      count[i][c] = static_cast<std::int64_t>(std::floor(target[i][c]));
      rema[c] = {target[i][c] - std::floor(target[i][c]), c};
      assigned += count[i][c];
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::int64_t r = 0; r < sizes[i] - assigned; ++r)
      ++count[i][rema[static_cast<std::size_t>(r)].second];

    if (ensure_min_one) {
      for (std::size_t c = 0; c < cols; ++c) {
        while (count[i][c] == 0) {
          std::size_t donor = cols;
          double best = -1e300;
          for (std::size_t d = 0; d < cols; ++d) {
            if (d == c || count[i][d] < 2) continue;
            const double excess = static_cast<double>(count[i][d]) - target[i][d];
            if (excess > best) {
              best = excess;
              donor = d;
            }
          }
          if (donor == cols)
            throw ValidationError("partition: shard of size " + std::to_string(sizes[i]) +
                                  " cannot hold at least one sample of each category");
          --count[i][donor];
          ++count[i][c];
        }
      }
    }
  }

  // Column repair: shift over-allocated categories within a row toward the
  // most under-target category that still has availability.
  std::vector<std::int64_t> colsum(cols, 0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < cols; ++c) colsum[c] += count[i][c];
  const std::int64_t lower = ensure_min_one ? 1 : 0;
  for (int guard = 0; guard < 4096; ++guard) {
    std::size_t over = cols;
    for (std::size_t c = 0; c < cols; ++c)
      if (colsum[c] > avail[c]) {
        over = c;
        break;
      }
    if (over == cols) return count;

    std::size_t row = rows;
    double best = -1e300;
    for (std::size_t i = 0; i < rows; ++i) {
      if (count[i][over] <= lower) continue;
      const double excess = static_cast<double>(count[i][over]) - target[i][over];
      if (excess > best) {
        best = excess;
        row = i;
      }
    }
    if (row == rows) break;

    std::size_t dest = cols;
    double deficit = 1e300;
    for (std::size_t d = 0; d < cols; ++d) {
      if (d == over || colsum[d] >= avail[d]) continue;
      const double slack = static_cast<double>(count[row][d]) - target[row][d];
      if (slack < deficit) {
        deficit = slack;
        dest = d;
      }
    }
    if (dest == cols) break;
    --count[row][over];
    --colsum[over];
    ++count[row][dest];
    ++colsum[dest];
  }
  throw ValidationError("partition: could not balance shard histograms against availability");
}

std::vector<std::vector<std::uint32_t>> category_queues(const data::LabeledDataset& ds,
                                                        std::uint64_t seed, std::uint64_t tag) {
  std::vector<std::vector<std::uint32_t>> queues(static_cast<std::size_t>(ds.num_categories));
  for (std::size_t i = 0; i < ds.size(); ++i)
    queues[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<std::uint32_t>(i));
  for (std::size_t c = 0; c < queues.size(); ++c) {
    rng::Stream st(rng::derive(seed, {tag, c}));
    st.shuffle(queues[c]);
  }
  return queues;
}

InstitutionShard make_shard(int id, const data::LabeledDataset& ds,
                            std::vector<std::uint32_t> indices) {
  std::sort(indices.begin(), indices.end());
  InstitutionShard s;
  s.institution_id = id;
  s.train = data::subset(ds, indices);
  s.label_histogram = s.train.label_histogram();
  return s;
}

}  // namespace

std::vector<InstitutionShard> partition_quantity(const data::LabeledDataset& ds,
                                                 const std::vector<std::int64_t>& sizes,
                                                 std::uint64_t seed) {
  if (sizes.empty()) throw ValidationError("partition_quantity: no institution sizes given");
  std::int64_t total = 0;
  for (std::int64_t s : sizes) {
    if (s < 1) throw ValidationError("partition_quantity: sizes must be positive");
    if (s < ds.num_categories)
      throw ValidationError("partition_quantity: size " + std::to_string(s) +
                            " too small to hold at least one sample of each of " +
                            std::to_string(ds.num_categories) + " categories");
    total += s;
  }
  if (total > static_cast<std::int64_t>(ds.size()))
    throw ValidationError("partition_quantity: sizes sum to " + std::to_string(total) +
                          " but dataset has only " + std::to_string(ds.size()) + " samples");

  const auto counts = allocate_matrix(sizes, ds.label_histogram(), true);
  auto queues = category_queues(ds, seed, kTagQuantity);
  std::vector<std::size_t> cursor(queues.size(), 0);

  std::vector<InstitutionShard> shards;
  shards.reserve(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    std::vector<std::uint32_t> take;
    take.reserve(static_cast<std::size_t>(sizes[i]));
    for (std::size_t c = 0; c < queues.size(); ++c)
      for (std::int64_t k = 0; k < counts[i][c]; ++k) take.push_back(queues[c][cursor[c]++]);
    shards.push_back(make_shard(static_cast<int>(i), ds, std::move(take)));
  }
  return shards;
}

double quantity_std(const std::vector<std::int64_t>& sizes) {
  if (sizes.size() < 2)
    throw ValidationError("quantity_std: need at least 2 institutions");
  double mean = 0.0;
  for (std::int64_t s : sizes) mean += static_cast<double>(s);
  mean /= static_cast<double>(sizes.size());
  double ss = 0.0;
  for (std::int64_t s : sizes) {
    const double d = static_cast<double>(s) - mean;
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(sizes.size() - 1));
}

std::vector<InstitutionShard> partition_label_skew(const data::LabeledDataset& ds, int n, double f,
                                                   std::uint64_t seed) {
  if (n < 2) throw ValidationError("partition_label_skew: need at least 2 institutions");
  if (!(f >= 0.0 && f <= 1.0))
    throw ValidationError("partition_label_skew: non-IID fraction must be in [0,1]");
  const std::int64_t total = static_cast<std::int64_t>(ds.size());
  if (total < n) throw ValidationError("partition_label_skew: fewer samples than institutions");
  const int c_count = ds.num_categories;
  const auto hist = ds.label_histogram();

  std::vector<std::int64_t> shard_sizes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    shard_sizes[static_cast<std::size_t>(i)] = total / n + (i < total % n ? 1 : 0);

  auto queues = category_queues(ds, seed, kTagLabel);
  std::vector<std::size_t> cursor(queues.size(), 0);

  // Dominant draw: fraction f of each shard from its round-robin category block.
  std::vector<std::vector<std::int64_t>> dominant(static_cast<std::size_t>(n),
                                                  std::vector<std::int64_t>(queues.size(), 0));
  std::vector<std::int64_t> dominance_total(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const std::int64_t want =
        std::clamp<std::int64_t>(std::llround(f * static_cast<double>(shard_sizes[i])), 0,
                                 shard_sizes[i]);
    dominance_total[i] = want;
    if (want == 0) continue;
    std::vector<std::size_t> block;
    std::int64_t block_avail = 0;
    for (int c = i; c < c_count; c += n) {
      block.push_back(static_cast<std::size_t>(c));
      block_avail += hist[static_cast<std::size_t>(c)];
    }
    if (block.empty())
      throw ValidationError("partition_label_skew: institution " + std::to_string(i) +
                            " has no dominant category block (more institutions than categories)");
    if (block_avail < want)
      throw ValidationError("partition_label_skew: institution " + std::to_string(i) +
                            " needs " + std::to_string(want) + " samples from category block {" +
                            [&] {
                              std::string s;
                              for (std::size_t b : block) s += (s.empty() ? "" : ",") + std::to_string(b);
                              return s;
                            }() +
                            "} but only " + std::to_string(block_avail) + " are available");
    // Largest-remainder split of the dominant draw across the block categories.
    std::int64_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> rema;
    for (std::size_t b : block) {
      const double t = static_cast<double>(want) * static_cast<double>(hist[b]) /
                       static_cast<double>(block_avail);
      dominant[i][b] = static_cast<std::int64_t>(std::floor(t));
      rema.push_back({t - std::floor(t), b});
      assigned += dominant[i][b];
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::int64_t r = 0; r < want - assigned; ++r)
      ++dominant[i][rema[static_cast<std::size_t>(r)].second];
    for (std::size_t b : block)
      if (dominant[i][b] > hist[b])
        throw ValidationError("partition_label_skew: institution " + std::to_string(i) +
                              " needs " + std::to_string(dominant[i][b]) +
                              " samples of category " + std::to_string(b) + " but only " +
                              std::to_string(hist[b]) + " are available");
  }

  std::vector<std::vector<std::uint32_t>> picks(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (std::size_t c = 0; c < queues.size(); ++c)
      for (std::int64_t k = 0; k < dominant[i][c]; ++k) picks[i].push_back(queues[c][cursor[c]++]);

  // Residue dealt proportionally to what remains of each category.
  std::vector<std::int64_t> residue_sizes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) residue_sizes[i] = shard_sizes[i] - dominance_total[i];
  std::vector<std::int64_t> remaining(queues.size());
  for (std::size_t c = 0; c < queues.size(); ++c)
    remaining[c] = static_cast<std::int64_t>(queues[c].size() - cursor[c]);
  const auto residue = allocate_matrix(residue_sizes, remaining, false);
  for (int i = 0; i < n; ++i)
    for (std::size_t c = 0; c < queues.size(); ++c)
      for (std::int64_t k = 0; k < residue[i][c]; ++k) picks[i].push_back(queues[c][cursor[c]++]);

  std::vector<InstitutionShard> shards;
  shards.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) shards.push_back(make_shard(i, ds, std::move(picks[i])));
  return shards;
}

double mean_pairwise_ks(const std::vector<std::vector<double>>& histograms) {
  if (histograms.size() < 2)
    throw ValidationError("mean_pairwise_ks: need at least 2 histograms");
  const std::size_t c_count = histograms[0].size();
  if (c_count == 0) throw ValidationError("mean_pairwise_ks: empty histogram");
  std::vector<std::vector<double>> cdf(histograms.size(), std::vector<double>(c_count));
  for (std::size_t i = 0; i < histograms.size(); ++i) {
    if (histograms[i].size() != c_count)
      throw ValidationError("mean_pairwise_ks: histograms have different category counts");
    double total = 0.0;
    for (double v : histograms[i]) {
      if (v < 0.0) throw ValidationError("mean_pairwise_ks: negative histogram entry");
      total += v;
    }
    if (total <= 0.0) throw ValidationError("mean_pairwise_ks: empty histogram");
    double c = 0.0;
    for (std::size_t j = 0; j < c_count; ++j) {
      c += histograms[i][j] / total;
      cdf[i][j] = c;
    }
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < histograms.size(); ++a)
    for (std::size_t b = a + 1; b < histograms.size(); ++b) {
      double ks = 0.0;
      for (std::size_t j = 0; j < c_count; ++j)
        ks = std::max(ks, std::fabs(cdf[a][j] - cdf[b][j]));
      sum += ks;
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

double mean_pairwise_ks(const std::vector<std::vector<std::int64_t>>& histograms) {
  std::vector<std::vector<double>> h(histograms.size());
  for (std::size_t i = 0; i < histograms.size(); ++i)
    h[i].assign(histograms[i].begin(), histograms[i].end());
  return mean_pairwise_ks(h);
}

SkewReport score_partition(const std::vector<InstitutionShard>& shards) {
  if (shards.size() < 2) throw ValidationError("score_partition: need at least 2 shards");
  SkewReport r;
  for (const auto& s : shards) {
    r.sizes.push_back(s.size());
    r.label_histograms.push_back(s.label_histogram);
  }
  r.quantity_std = quantity_std(r.sizes);
  r.mean_pairwise_ks = mean_pairwise_ks(r.label_histograms);
  return r;
}

// ---- transforms -----------------------------------------------------------------

namespace {

void degrade_resolution_image(double* img, std::size_t channels, std::size_t h, std::size_t w,
                              int factor) {
  const auto k = static_cast<std::size_t>(factor);
  const std::size_t bh = (h + k - 1) / k, bw = (w + k - 1) / k;
  std::vector<double> mean(bh * bw);
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = img + c * h * w;
    for (std::size_t by = 0; by < bh; ++by)
      for (std::size_t bx = 0; bx < bw; ++bx) {
        const std::size_t y0 = by * k, x0 = bx * k;
        const std::size_t y1 = std::min(y0 + k, h), x1 = std::min(x0 + k, w);
        double sum = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) sum += plane[y * w + x];
        mean[by * bw + bx] = sum / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) plane[y * w + x] = mean[(y / k) * bw + x / k];
  }
}

struct BlurKernel {
  std::vector<std::pair<int, int>> offsets;  // (dy, dx)
  std::vector<double> weights;
};

BlurKernel line_kernel(int length, double angle_deg) {
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), sn = std::sin(theta);
  std::map<std::pair<int, int>, double> taps;
  for (int i = 0; i < length; ++i) {
    const double t = static_cast<double>(i) - (length - 1) / 2.0;
    const int dx = static_cast<int>(std::lround(t * ct));
    const int dy = static_cast<int>(std::lround(t * sn));
    taps[{dy, dx}] += 1.0 / static_cast<double>(length);
  }
  BlurKernel k;
  for (const auto& [off, w] : taps) {
    k.offsets.push_back(off);
    k.weights.push_back(w);
  }
  return k;
}

void motion_blur_image(double* img, std::size_t channels, std::size_t h, std::size_t w,
                       const BlurKernel& kernel) {
  std::vector<double> src(h * w);
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = img + c * h * w;
    std::copy_n(plane, h * w, src.data());
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kernel.offsets.size(); ++t) {
          const auto [dy, dx] = kernel.offsets[t];
          // edge replication
          const std::int64_t yy = std::clamp<std::int64_t>(static_cast<std::int64_t>(y) + dy, 0,
                                                           static_cast<std::int64_t>(h) - 1);
          const std::int64_t xx = std::clamp<std::int64_t>(static_cast<std::int64_t>(x) + dx, 0,
                                                           static_cast<std::int64_t>(w) - 1);
          acc += kernel.weights[t] * src[static_cast<std::size_t>(yy) * w +
                                         static_cast<std::size_t>(xx)];
        }
        plane[y * w + x] = acc;
      }
  }
}

void validate_transform(const Transform& t, std::size_t h, std::size_t w, bool allow_mixture) {
  switch (t.kind) {
    case Transform::Kind::resolution:
      if (t.factor < 1) throw ValidationError("transform: resolution factor must be >= 1");
      if (static_cast<std::size_t>(t.factor) > std::min(h, w))
        throw ValidationError("transform: resolution factor " + std::to_string(t.factor) +
                              " exceeds image extent " + std::to_string(std::min(h, w)));
      break;
    case Transform::Kind::gaussian:
    case Transform::Kind::speckle:
      if (t.sigma < 0.0) throw ValidationError("transform: sigma must be >= 0");
      break;
    case Transform::Kind::poisson:
      if (t.scale <= 0.0) throw ValidationError("transform: poisson scale must be > 0");
      break;
    case Transform::Kind::motion_blur:
      if (t.length < 1) throw ValidationError("transform: blur length must be >= 1");
      break;
    case Transform::Kind::mixture: {
      if (!allow_mixture) throw ValidationError("transform: nested mixtures are not allowed");
      if (t.components.empty() || t.components.size() != t.weights.size())
        throw ValidationError("transform: mixture needs matching components and weights");
      double sum = 0.0;
      for (double wgt : t.weights) {
        if (wgt < 0.0) throw ValidationError("transform: mixture weights must be >= 0");
        sum += wgt;
      }
      if (std::fabs(sum - 1.0) > 1e-9)
        throw ValidationError("transform: mixture weights must sum to 1");
      for (const auto& c : t.components) validate_transform(c, h, w, false);
      break;
    }
  }
}

}  // namespace

void transform_image(double* img, std::size_t channels, std::size_t height, std::size_t width,
                     const Transform& t, std::uint64_t image_seed) {
  const std::size_t count = channels * height * width;
  switch (t.kind) {
    case Transform::Kind::resolution:
      if (t.factor == 1) return;  // identity
      degrade_resolution_image(img, channels, height, width, t.factor);
      return;
    case Transform::Kind::gaussian: {
      rng::Stream st(image_seed);
      for (std::size_t i = 0; i < count; ++i) img[i] += st.normal(0.0, t.sigma);
      kernels::ops().clamp01(img, count);
      return;
    }
    case Transform::Kind::speckle: {
      rng::Stream st(image_seed);
      for (std::size_t i = 0; i < count; ++i) img[i] *= 1.0 + st.normal(0.0, t.sigma);
      kernels::ops().clamp01(img, count);
      return;
    }
    case Transform::Kind::poisson: {
      rng::Stream st(image_seed);
      for (std::size_t i = 0; i < count; ++i)
        img[i] = static_cast<double>(st.poisson(img[i] * t.scale)) / t.scale;
      kernels::ops().clamp01(img, count);
      return;
    }
    case Transform::Kind::motion_blur: {
      const BlurKernel kern = line_kernel(t.length, t.angle_deg);
      motion_blur_image(img, channels, height, width, kern);
      kernels::ops().clamp01(img, count);
      return;
    }
    case Transform::Kind::mixture: {
      rng::Stream pick(rng::derive(image_seed, {0x7069636bull}));
      const double r = pick.uniform();
      double cum = 0.0;
      std::size_t chosen = t.components.size() - 1;
      for (std::size_t j = 0; j < t.weights.size(); ++j) {
        cum += t.weights[j];
        if (r < cum) {
          chosen = j;
          break;
        }
      }
      transform_image(img, channels, height, width, t.components[chosen],
                      rng::derive(image_seed, {0x636f6d70ull, chosen}));
      return;
    }
  }
}

namespace {

Tensor apply_tensor_transform(const Tensor& images, const Transform& t, std::uint64_t seed) {
  if (images.shape.size() != 4)
    throw ValidationError("transform: images must be NxCxHxW, got " + shape_string(images.shape));
  const std::size_t c = images.shape[1], h = images.shape[2], w = images.shape[3];
  validate_transform(t, h, w, true);
  Tensor out = images;
  const std::size_t px = c * h * w;
  for (std::size_t n = 0; n < images.shape[0]; ++n)
    transform_image(out.ptr() + n * px, c, h, w, t, rng::derive(seed, {kTagImage, n}));
  return out;
}

}  // namespace

Tensor degrade_resolution(const Tensor& images, int factor) {
  Transform t;
  t.kind = Transform::Kind::resolution;
  t.factor = factor;
  return apply_tensor_transform(images, t, 0);
}

Tensor add_gaussian(const Tensor& images, double sigma, std::uint64_t seed) {
  Transform t;
  t.kind = Transform::Kind::gaussian;
  t.sigma = sigma;
  return apply_tensor_transform(images, t, seed);
}

Tensor add_speckle(const Tensor& images, double sigma, std::uint64_t seed) {
  Transform t;
  t.kind = Transform::Kind::speckle;
  t.sigma = sigma;
  return apply_tensor_transform(images, t, seed);
}

Tensor add_poisson(const Tensor& images, double scale, std::uint64_t seed) {
  Transform t;
  t.kind = Transform::Kind::poisson;
  t.scale = scale;
  return apply_tensor_transform(images, t, seed);
}

Tensor motion_blur(const Tensor& images, int length, double angle_deg) {
  Transform t;
  t.kind = Transform::Kind::motion_blur;
  t.length = length;
  t.angle_deg = angle_deg;
  return apply_tensor_transform(images, t, 0);
}

Tensor apply_mixture(const Tensor& images, const Transform& mixture, std::uint64_t seed) {
  if (mixture.kind != Transform::Kind::mixture)
    throw ValidationError("apply_mixture: transform is not a mixture");
  return apply_tensor_transform(images, mixture, seed);
}

data::LabeledDataset apply_transforms(const data::LabeledDataset& ds,
                                      const std::vector<Transform>& chain, std::uint64_t seed) {
  for (const auto& t : chain) validate_transform(t, ds.height(), ds.width(), true);
  data::LabeledDataset out = ds;
  const std::size_t px = ds.channels() * ds.height() * ds.width();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t step = 0; step < chain.size(); ++step)
      transform_image(out.images.ptr() + i * px, ds.channels(), ds.height(), ds.width(),
                      chain[step], rng::derive(seed, {kTagImage, ds.ids[i], step}));
  }
  return out;
}

// ---- plan application + manifests ---------------------------------------------------

namespace {

std::vector<std::int64_t> proportional_sizes(const std::vector<std::int64_t>& train_sizes,
                                             std::int64_t total) {
  std::int64_t train_total = 0;
  for (std::int64_t s : train_sizes) train_total += s;
  std::vector<double> fr(train_sizes.size());
  for (std::size_t i = 0; i < train_sizes.size(); ++i)
    fr[i] = static_cast<double>(train_sizes[i]) / static_cast<double>(train_total);
  // largest remainder over fractions
  std::vector<std::int64_t> out(train_sizes.size());
  std::vector<std::pair<double, std::size_t>> rema(train_sizes.size());
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < fr.size(); ++i) {
    const double t = fr[i] * static_cast<double>(total);
    out[i] = static_cast<std::int64_t>(std::floor(t));
    rema[i] = {t - std::floor(t), i};
    assigned += out[i];
  }
  std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::int64_t r = 0; r < total - assigned; ++r) ++out[rema[static_cast<std::size_t>(r)].second];
  return out;
}

std::vector<std::int64_t> equal_sizes(std::int64_t total, int n) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = total / n + (i < total % n ? 1 : 0);
  return out;
}

nlohmann::json ids_to_json(const std::vector<std::uint64_t>& ids) {
  nlohmann::json a = nlohmann::json::array();
  for (std::uint64_t v : ids) a.push_back(v);
  return a;
}

}  // namespace

PartitionOutput apply_plan(const PartitionPlan& plan, const data::LabeledDataset& train,
                           const data::LabeledDataset& val, const data::LabeledDataset& test) {
  PartitionOutput out;
  std::vector<std::vector<Transform>> chains;

  switch (plan.regime) {
    case Regime::quantity: {
      if (plan.sizes.size() < 2)
        throw ValidationError("partition plan: quantity regime needs at least 2 sizes");
      out.shards = partition_quantity(train, plan.sizes, rng::derive(plan.seed, {1}));
      const auto val_sizes = proportional_sizes(plan.sizes, static_cast<std::int64_t>(val.size()));
      const auto test_sizes = proportional_sizes(plan.sizes, static_cast<std::int64_t>(test.size()));
      auto val_shards = partition_quantity(val, val_sizes, rng::derive(plan.seed, {2}));
      auto test_shards = partition_quantity(test, test_sizes, rng::derive(plan.seed, {3}));
      for (std::size_t i = 0; i < out.shards.size(); ++i) {
        out.shards[i].val = std::move(val_shards[i].train);
        out.test_shards.push_back(std::move(test_shards[i].train));
      }
      break;
    }
    case Regime::label: {
      const int n = plan.institutions;
      out.shards = partition_label_skew(train, n, plan.noniid_fraction, rng::derive(plan.seed, {1}));
      auto val_shards =
          partition_label_skew(val, n, plan.noniid_fraction, rng::derive(plan.seed, {2}));
      auto test_shards =
          partition_label_skew(test, n, plan.noniid_fraction, rng::derive(plan.seed, {3}));
      for (std::size_t i = 0; i < out.shards.size(); ++i) {
        out.shards[i].val = std::move(val_shards[i].train);
        out.test_shards.push_back(std::move(test_shards[i].train));
      }
      break;
    }
    case Regime::acquisition: {
      const int n = static_cast<int>(plan.transforms.size());
      if (n < 2)
        throw ValidationError("partition plan: acquisition regime needs at least 2 institutions");
      chains = plan.transforms;
      out.shards = partition_quantity(train, equal_sizes(static_cast<std::int64_t>(train.size()), n),
                                      rng::derive(plan.seed, {1}));
      auto val_shards = partition_quantity(
          val, equal_sizes(static_cast<std::int64_t>(val.size()), n), rng::derive(plan.seed, {2}));
      auto test_shards = partition_quantity(
          test, equal_sizes(static_cast<std::int64_t>(test.size()), n), rng::derive(plan.seed, {3}));
      for (std::size_t i = 0; i < out.shards.size(); ++i) {
        out.shards[i].train = apply_transforms(out.shards[i].train, chains[i],
                                               rng::derive(plan.seed, {kTagAcq, i, 0}));
        out.shards[i].val = apply_transforms(val_shards[i].train, chains[i],
                                             rng::derive(plan.seed, {kTagAcq, i, 1}));
        out.test_shards.push_back(apply_transforms(test_shards[i].train, chains[i],
                                                   rng::derive(plan.seed, {kTagAcq, i, 2})));
        out.shards[i].label_histogram = out.shards[i].train.label_histogram();
      }
      break;
    }
  }

  nlohmann::json m;
  m["schema"] = "fedsim.partition.v1";
  m["regime"] = plan.regime == Regime::quantity     ? "quantity"
                : plan.regime == Regime::label      ? "label"
                                                    : "acquisition";
  m["seed"] = plan.seed;
  m["num_categories"] = train.num_categories;
  nlohmann::json insts = nlohmann::json::array();
  for (std::size_t i = 0; i < out.shards.size(); ++i) {
    nlohmann::json e;
    e["id"] = out.shards[i].institution_id;
    e["train_ids"] = ids_to_json(out.shards[i].train.ids);
    e["val_ids"] = ids_to_json(out.shards[i].val.ids);
    e["test_ids"] = ids_to_json(out.test_shards[i].ids);
    nlohmann::json tj = nlohmann::json::array();
    if (!chains.empty())
      for (const auto& t : chains[i]) tj.push_back(transform_to_json(t));
    e["transforms"] = tj;
    insts.push_back(std::move(e));
  }
  m["institutions"] = std::move(insts);
  out.manifest = std::move(m);
  return out;
}

PartitionOutput apply_manifest(const nlohmann::json& manifest, const data::LabeledDataset& train,
                               const data::LabeledDataset& val, const data::LabeledDataset& test) {
  if (!manifest.is_object() || manifest.value("schema", "") != "fedsim.partition.v1")
    throw ValidationError("manifest: missing or unknown schema marker");
  if (!manifest.contains("institutions") || !manifest["institutions"].is_array() ||
      manifest["institutions"].size() < 1)
    throw ValidationError("manifest: no institutions");
  const std::uint64_t seed = manifest.value("seed", std::uint64_t{0});

  auto index_of = [](const data::LabeledDataset& ds) {
    std::map<std::uint64_t, std::uint32_t> m;
    for (std::size_t i = 0; i < ds.size(); ++i) m[ds.ids[i]] = static_cast<std::uint32_t>(i);
    return m;
  };
  const auto train_index = index_of(train);
  const auto val_index = index_of(val);
  const auto test_index = index_of(test);

  auto gather = [](const data::LabeledDataset& ds, const std::map<std::uint64_t, std::uint32_t>& idx,
                   const nlohmann::json& ids, const char* which) {
    std::vector<std::uint32_t> rows;
    rows.reserve(ids.size());
    for (const auto& v : ids) {
      const auto it = idx.find(v.get<std::uint64_t>());
      if (it == idx.end())
        throw ValidationError(std::string("manifest: unknown ") + which + " sample id " +
                              v.dump());
      rows.push_back(it->second);
    }
    return data::subset(ds, rows);
  };

  PartitionOutput out;
  std::set<std::uint64_t> seen_train;
  std::size_t i = 0;
  for (const auto& e : manifest["institutions"]) {
    InstitutionShard s;
    s.institution_id = e.value("id", static_cast<int>(i));
    s.train = gather(train, train_index, e.at("train_ids"), "train");
    s.val = gather(val, val_index, e.at("val_ids"), "val");
    data::LabeledDataset tshard = gather(test, test_index, e.at("test_ids"), "test");

    for (std::uint64_t id : s.train.ids)
      if (!seen_train.insert(id).second)
        throw ValidationError("manifest: sample id " + std::to_string(id) +
                              " appears in more than one institution");

    std::vector<Transform> chain;
    for (const auto& tj : e.at("transforms")) chain.push_back(transform_from_json(tj));
    if (!chain.empty()) {
      s.train = apply_transforms(s.train, chain, rng::derive(seed, {kTagAcq, i, 0}));
      s.val = apply_transforms(s.val, chain, rng::derive(seed, {kTagAcq, i, 1}));
      tshard = apply_transforms(tshard, chain, rng::derive(seed, {kTagAcq, i, 2}));
    }
    s.label_histogram = s.train.label_histogram();
    out.shards.push_back(std::move(s));
    out.test_shards.push_back(std::move(tshard));
    ++i;
  }
  out.manifest = manifest;
  return out;
}

// ---- JSON descriptors --------------------------------------------------------------

namespace {

void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ValidationError("unknown key '" + it.key() + "' in " + context);
}

}  // namespace

nlohmann::json transform_to_json(const Transform& t) {
  nlohmann::json j;
  switch (t.kind) {
    case Transform::Kind::resolution:
      j["kind"] = "resolution";
      j["factor"] = t.factor;
      break;
    case Transform::Kind::gaussian:
      j["kind"] = "gaussian";
      j["sigma"] = t.sigma;
      break;
    case Transform::Kind::speckle:
      j["kind"] = "speckle";
      j["sigma"] = t.sigma;
      break;
    case Transform::Kind::poisson:
      j["kind"] = "poisson";
      j["scale"] = t.scale;
      break;
    case Transform::Kind::motion_blur:
      j["kind"] = "motion_blur";
      j["length"] = t.length;
      j["angle_deg"] = t.angle_deg;
      break;
    case Transform::Kind::mixture: {
      j["kind"] = "mixture";
      nlohmann::json comps = nlohmann::json::array();
      for (std::size_t i = 0; i < t.components.size(); ++i) {
        nlohmann::json c;
        c["weight"] = t.weights[i];
        c["transform"] = transform_to_json(t.components[i]);
        comps.push_back(std::move(c));
      }
      j["components"] = std::move(comps);
      break;
    }
  }
  return j;
}

Transform transform_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind"))
    throw ValidationError("transform: expected an object with a 'kind' field");
  const std::string kind = j.at("kind").get<std::string>();
  Transform t;
  if (kind == "resolution") {
    check_keys(j, {"kind", "factor"}, "resolution transform");
    t.kind = Transform::Kind::resolution;
    t.factor = j.value("factor", 1);
  } else if (kind == "gaussian" || kind == "speckle") {
    check_keys(j, {"kind", "sigma"}, kind + " transform");
    t.kind = kind == "gaussian" ? Transform::Kind::gaussian : Transform::Kind::speckle;
    t.sigma = j.value("sigma", 0.1);
  } else if (kind == "poisson") {
    check_keys(j, {"kind", "scale"}, "poisson transform");
    t.kind = Transform::Kind::poisson;
    t.scale = j.value("scale", 64.0);
  } else if (kind == "motion_blur") {
    check_keys(j, {"kind", "length", "angle_deg"}, "motion_blur transform");
    t.kind = Transform::Kind::motion_blur;
    t.length = j.value("length", 5);
    t.angle_deg = j.value("angle_deg", 0.0);
  } else if (kind == "mixture") {
    check_keys(j, {"kind", "components"}, "mixture transform");
    t.kind = Transform::Kind::mixture;
    for (const auto& c : j.at("components")) {
      check_keys(c, {"weight", "transform"}, "mixture component");
      t.weights.push_back(c.at("weight").get<double>());
      t.components.push_back(transform_from_json(c.at("transform")));
    }
  } else {
    throw ValidationError("transform: unknown kind '" + kind + "'");
  }
  return t;
}

nlohmann::json plan_to_json(const PartitionPlan& plan) {
  nlohmann::json j;
  j["seed"] = plan.seed;
  switch (plan.regime) {
    case Regime::quantity:
      j["regime"] = "quantity";
      j["sizes"] = plan.sizes;
      break;
    case Regime::label:
      j["regime"] = "label";
      j["institutions"] = plan.institutions;
      j["noniid_fraction"] = plan.noniid_fraction;
      break;
    case Regime::acquisition: {
      j["regime"] = "acquisition";
      nlohmann::json per_inst = nlohmann::json::array();
      for (const auto& chain : plan.transforms) {
        nlohmann::json cj = nlohmann::json::array();
        for (const auto& t : chain) cj.push_back(transform_to_json(t));
        per_inst.push_back(std::move(cj));
      }
      j["transforms"] = std::move(per_inst);
      break;
    }
  }
  return j;
}

PartitionPlan plan_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("regime"))
    throw ValidationError("partition plan: expected an object with a 'regime' field");
  PartitionPlan p;
  p.seed = j.value("seed", std::uint64_t{0});
  const std::string regime = j.at("regime").get<std::string>();
  if (regime == "quantity") {
    check_keys(j, {"regime", "seed", "sizes", "id"}, "quantity partition plan");
    p.regime = Regime::quantity;
    if (!j.contains("sizes") || !j.at("sizes").is_array() || j.at("sizes").size() < 2)
      throw ValidationError("partition plan: quantity regime needs a 'sizes' array (>= 2 entries)");
    for (const auto& v : j.at("sizes")) p.sizes.push_back(v.get<std::int64_t>());
  } else if (regime == "label") {
    check_keys(j, {"regime", "seed", "institutions", "noniid_fraction", "id"},
               "label partition plan");
    p.regime = Regime::label;
    p.institutions = j.value("institutions", 0);
    if (p.institutions < 2)
      throw ValidationError("partition plan: label regime needs 'institutions' >= 2");
    if (!j.contains("noniid_fraction"))
      throw ValidationError("partition plan: label regime needs 'noniid_fraction'");
    p.noniid_fraction = j.at("noniid_fraction").get<double>();
    if (!(p.noniid_fraction >= 0.0 && p.noniid_fraction <= 1.0))
      throw ValidationError("partition plan: 'noniid_fraction' must be in [0,1]");
  } else if (regime == "acquisition") {
    check_keys(j, {"regime", "seed", "transforms", "id"}, "acquisition partition plan");
    p.regime = Regime::acquisition;
    if (!j.contains("transforms") || !j.at("transforms").is_array() || j.at("transforms").size() < 2)
      throw ValidationError(
          "partition plan: acquisition regime needs a per-institution 'transforms' array (>= 2)");
    for (const auto& chain : j.at("transforms")) {
      std::vector<Transform> c;
      for (const auto& t : chain) c.push_back(transform_from_json(t));
      p.transforms.push_back(std::move(c));
    }
  } else {
    throw ValidationError("partition plan: unknown regime '" + regime + "'");
  }
  return p;
}

}  // namespace fedsim::skew
