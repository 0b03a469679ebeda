#include "fedsim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"

namespace fedsim::data {

std::vector<std::int64_t> LabeledDataset::label_histogram() const {
  std::vector<std::int64_t> h(static_cast<std::size_t>(num_categories), 0);
  for (int l : labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

void LabeledDataset::validate() const {
  const std::size_t n = labels.size();
  if (images.shape.size() != 4 || images.shape[0] != n)
    throw ValidationError("dataset: images must be NxCxHxW with N == label count");
  if (ids.size() != n || groups.size() != n)
    throw ValidationError("dataset: ids/groups must match sample count");
  if (num_categories < 1) throw ValidationError("dataset: num_categories must be positive");
  for (int l : labels)
    if (l < 0 || l >= num_categories)
      throw ValidationError("dataset: label " + std::to_string(l) + " out of range");
  std::set<std::uint64_t> seen(ids.begin(), ids.end());
  if (seen.size() != n) throw ValidationError("dataset: duplicate sample ids");
  for (double v : images.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError("dataset: pixel value outside [0,1]");
}

LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::uint32_t>& indices) {
  const std::size_t px = ds.channels() * ds.height() * ds.width();
  LabeledDataset out;
  out.num_categories = ds.num_categories;
  out.images = Tensor::zeros({indices.size(), ds.channels(), ds.height(), ds.width()});
  out.labels.reserve(indices.size());
  out.ids.reserve(indices.size());
  out.groups.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= ds.size()) throw ValidationError("subset: index out of range");
    std::copy_n(ds.images.ptr() + src * px, px, out.images.ptr() + i * px);
    out.labels.push_back(ds.labels[src]);
    out.ids.push_back(ds.ids[src]);
    out.groups.push_back(ds.groups[src]);
  }
  return out;
}

LabeledDataset concat(const std::vector<const LabeledDataset*>& parts) {
  if (parts.empty()) throw ValidationError("concat: no datasets");
  LabeledDataset out;
  out.num_categories = parts[0]->num_categories;
  const std::size_t c = parts[0]->channels(), h = parts[0]->height(), w = parts[0]->width();
  std::size_t total = 0;
  for (const auto* p : parts) {
    if (p->num_categories != out.num_categories || p->channels() != c || p->height() != h ||
        p->width() != w)
      throw ValidationError("concat: datasets have mismatched extents or categories");
    total += p->size();
  }
  out.images = Tensor::zeros({total, c, h, w});
  const std::size_t px = c * h * w;
  std::size_t off = 0;
  for (const auto* p : parts) {
    std::copy_n(p->images.ptr(), p->size() * px, out.images.ptr() + off * px);
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    out.ids.insert(out.ids.end(), p->ids.begin(), p->ids.end());
    out.groups.insert(out.groups.end(), p->groups.begin(), p->groups.end());
    off += p->size();
  }
  std::set<std::uint64_t> seen(out.ids.begin(), out.ids.end());
  if (seen.size() != out.ids.size()) throw ValidationError("concat: duplicate sample ids");
  return out;
}

// ---- IDX ---------------------------------------------------------------------

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;  // 2051
constexpr std::uint32_t kLabelMagic = 0x00000801;  // 2049

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  const std::string& path;

  std::uint32_t u32() {
    if (pos + 4 > bytes.size())
      throw ValidationError("unexpected end of data in " + path);
    std::uint32_t v = (std::uint32_t(bytes[pos]) << 24) | (std::uint32_t(bytes[pos + 1]) << 16) |
                      (std::uint32_t(bytes[pos + 2]) << 8) | std::uint32_t(bytes[pos + 3]);
    pos += 4;
    return v;
  }
};

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ibytes = read_file(images_path);
  const auto lbytes = read_file(labels_path);

  ByteReader ir{ibytes, 0, images_path};
  if (ir.u32() != kImageMagic)
    throw ValidationError("not an IDX image file (bad magic): " + images_path);
  const std::uint32_t n = ir.u32();
  const std::uint32_t rows = ir.u32();
  const std::uint32_t cols = ir.u32();
  const std::size_t npix = std::size_t(n) * rows * cols;
  if (ir.pos + npix > ibytes.size())
    throw ValidationError("unexpected end of data in " + images_path);

  ByteReader lr{lbytes, 0, labels_path};
  if (lr.u32() != kLabelMagic)
    throw ValidationError("not an IDX label file (bad magic): " + labels_path);
  const std::uint32_t ln = lr.u32();
  if (ln != n)
    throw ValidationError("image/label count disagree: " + std::to_string(n) + " images vs " +
                          std::to_string(ln) + " labels");
  if (lr.pos + ln > lbytes.size())
    throw ValidationError("unexpected end of data in " + labels_path);

  LabeledDataset ds;
  ds.images = Tensor::zeros({n, 1, rows, cols});
  for (std::size_t i = 0; i < npix; ++i)
    ds.images.data[i] = static_cast<double>(ibytes[ir.pos + i]) / 255.0;
  ds.labels.resize(n);
  int maxl = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<int>(lbytes[lr.pos + i]);
    maxl = std::max(maxl, ds.labels[i]);
  }
  ds.num_categories = maxl + 1;
  ds.ids.resize(n);
  ds.groups.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.ids[i] = ds.groups[i] = i;
  return ds;
}

void write_idx(const LabeledDataset& ds, const std::string& images_path,
               const std::string& labels_path) {
  if (ds.channels() != 1)
    throw ValidationError("write_idx: only single-channel images are representable");
  std::ofstream iout(images_path, std::ios::binary);
  if (!iout) throw std::runtime_error("cannot write file: " + images_path);
  put_u32(iout, kImageMagic);
  put_u32(iout, static_cast<std::uint32_t>(ds.size()));
  put_u32(iout, static_cast<std::uint32_t>(ds.height()));
  put_u32(iout, static_cast<std::uint32_t>(ds.width()));
  for (double v : ds.images.data) {
    const int byte = static_cast<int>(std::lround(v * 255.0));
    iout.put(static_cast<char>(std::clamp(byte, 0, 255)));
  }
  if (!iout) throw std::runtime_error("write failed: " + images_path);

  std::ofstream lout(labels_path, std::ios::binary);
  if (!lout) throw std::runtime_error("cannot write file: " + labels_path);
  put_u32(lout, kLabelMagic);
  put_u32(lout, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lout.put(static_cast<char>(l));
  if (!lout) throw std::runtime_error("write failed: " + labels_path);
}

// ---- synthetic generator ------------------------------------------------------

LabeledDataset synth_generate(const SynthSpec& spec) {
  if (spec.num_categories < 2)
    throw ValidationError("synth_generate: need at least 2 categories");
  if (spec.per_category.size() != static_cast<std::size_t>(spec.num_categories))
    throw ValidationError("synth_generate: per_category length must equal num_categories");
  for (std::int64_t c : spec.per_category)
    if (c < 1) throw ValidationError("synth_generate: per-category counts must be >= 1");
  if (spec.height < 4 || spec.width < 4)
    throw ValidationError("synth_generate: image extent too small");

  std::int64_t total = 0;
  for (std::int64_t c : spec.per_category) total += c;

  LabeledDataset ds;
  ds.num_categories = spec.num_categories;
  const auto h = static_cast<std::size_t>(spec.height);
  const auto w = static_cast<std::size_t>(spec.width);
  ds.images = Tensor::zeros({static_cast<std::size_t>(total), 1, h, w});
  ds.labels.reserve(total);
  ds.ids.reserve(total);
  ds.groups.reserve(total);

  // Jitter and noise are sized so the task is learnable by the small conv
  // net but not saturated: the federated experiments need headroom for
  // skew-induced accuracy drops.
  const double cy0 = (spec.height - 1) / 2.0;
  const double cx0 = (spec.width - 1) / 2.0;
  const double bar_sigma = 0.75;
  const double bar_len = 0.40 * std::min(spec.height, spec.width);
  const double angle_jitter = std::numbers::pi / (3.0 * spec.num_categories);

  std::uint64_t id = 0;
  for (int cat = 0; cat < spec.num_categories; ++cat) {
    const double base_angle = std::numbers::pi * cat / spec.num_categories;
    for (std::int64_t s = 0; s < spec.per_category[static_cast<std::size_t>(cat)]; ++s, ++id) {
      rng::Stream st(rng::derive(spec.seed, {0x73796e7468ull, static_cast<std::uint64_t>(cat),
                                             static_cast<std::uint64_t>(s)}));
      const double theta = base_angle + st.uniform(-angle_jitter, angle_jitter);
      const double cy = cy0 + st.uniform(-3.0, 3.0);
      const double cx = cx0 + st.uniform(-3.0, 3.0);
      const double amp = st.uniform(0.35, 0.70);
      const double ct = std::cos(theta), sn = std::sin(theta);

      double* img = ds.images.ptr() + id * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          const double longi = dx * ct + dy * sn;
          const double perp = -dx * sn + dy * ct;
          double v = amp * std::exp(-(perp * perp) / (bar_sigma * bar_sigma));
          const double over = std::fabs(longi) - bar_len;
          if (over > 0.0) v *= std::exp(-over * over);
          v += st.normal(0.0, 0.19);
          img[y * w + x] = v;
        }
      kernels::ops().clamp01(img, h * w);
      ds.labels.push_back(cat);
      ds.ids.push_back(id);
      ds.groups.push_back(id);
    }
  }
  return ds;
}

// ---- stratified split -----------------------------------------------------------

namespace {

/// Largest-remainder rounding of fractions*total into integer counts that sum
/// to total; |count - fraction*total| < 1. Ties break toward lower index.
std::vector<std::int64_t> largest_remainder(const std::vector<double>& fractions,
                                            std::int64_t total) {
  const std::size_t k = fractions.size();
  std::vector<std::int64_t> counts(k);
  std::vector<std::pair<double, std::size_t>> rema(k);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double target = fractions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::int64_t>(std::floor(target));
    rema[i] = {target - std::floor(target), i};
    assigned += counts[i];
  }
  std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::int64_t r = 0; r < total - assigned; ++r) ++counts[rema[static_cast<std::size_t>(r)].second];
  return counts;
}

}  // namespace

SplitResult stratified_split(const LabeledDataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed) {
  const double fsum = fractions.train + fractions.val + fractions.test;
  if (fractions.train <= 0.0 || fractions.val <= 0.0 || fractions.test <= 0.0)
    throw ValidationError("stratified_split: fractions must be positive");
  if (std::fabs(fsum - 1.0) > 1e-9)
    throw ValidationError("stratified_split: fractions must sum to 1");

  const std::vector<double> fr = {fractions.train, fractions.val, fractions.test};
  std::vector<std::vector<std::uint32_t>> chosen(3);

  // Group samples; singleton groups take the exact per-category path.
  std::map<std::uint64_t, std::vector<std::uint32_t>> by_group;
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_group[ds.groups[i]].push_back(static_cast<std::uint32_t>(i));
  bool all_singleton = true;
  for (const auto& [g, members] : by_group)
    if (members.size() > 1) all_singleton = false;

  if (all_singleton) {
    for (int cat = 0; cat < ds.num_categories; ++cat) {
      std::vector<std::uint32_t> members;
      for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.labels[i] == cat) members.push_back(static_cast<std::uint32_t>(i));
      rng::Stream st(rng::derive(seed, {0x73706c6974ull, static_cast<std::uint64_t>(cat)}));
      st.shuffle(members);
      const auto counts = largest_remainder(fr, static_cast<std::int64_t>(members.size()));
      std::size_t pos = 0;
      for (std::size_t s = 0; s < 3; ++s)
        for (std::int64_t c = 0; c < counts[s]; ++c) chosen[s].push_back(members[pos++]);
    }
  } else {
    // Whole-group assignment: greedy fill toward per-split sample targets.
    std::vector<std::uint64_t> group_keys;
    for (const auto& [g, members] : by_group) group_keys.push_back(g);
    rng::Stream st(rng::derive(seed, {0x73706c6974ull, 0x67726f7570ull}));
    st.shuffle(group_keys);
    const double total = static_cast<double>(ds.size());
    std::vector<double> filled(3, 0.0);
    for (std::uint64_t g : group_keys) {
      const auto& members = by_group[g];
      std::size_t best = 0;
      double best_deficit = -1e300;
      for (std::size_t s = 0; s < 3; ++s) {
        const double deficit = fr[s] * total - filled[s];
        if (deficit > best_deficit) {
          best_deficit = deficit;
          best = s;
        }
      }
      for (std::uint32_t m : members) chosen[best].push_back(m);
      filled[best] += static_cast<double>(members.size());
    }
  }

  for (auto& v : chosen) std::sort(v.begin(), v.end());
  SplitResult out{subset(ds, chosen[0]), subset(ds, chosen[1]), subset(ds, chosen[2])};

  const char* names[3] = {"train", "val", "test"};
  const LabeledDataset* splits[3] = {&out.train, &out.val, &out.test};
  for (std::size_t s = 0; s < 3; ++s) {
    const auto hist = splits[s]->label_histogram();
    for (int cat = 0; cat < ds.num_categories; ++cat)
      if (hist[static_cast<std::size_t>(cat)] == 0)
        throw ValidationError(std::string("stratified_split: split '") + names[s] +
                              "' received zero samples of category " + std::to_string(cat));
  }
  return out;
}

}  // namespace fedsim::data
