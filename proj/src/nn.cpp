#include "fedsim/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"

namespace fedsim::nn {

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool2: return "max_pool2";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

std::string layer_label(const Architecture& arch, int i) {
  if (i < 0) return "input";
  return "layer " + std::to_string(i) + " (" + kind_name(arch.layers[i].kind) + ")";
}

}  // namespace

std::vector<LayerShape> shape_flow(const Architecture& arch) {
  if (arch.input_channels < 1 || arch.input_height < 1 || arch.input_width < 1)
    throw ValidationError("architecture: input extents must be positive");
  std::vector<LayerShape> flow;
  flow.reserve(arch.layers.size() + 1);
  LayerShape cur;
  cur.flat = false;
  cur.channels = arch.input_channels;
  cur.height = arch.input_height;
  cur.width = arch.input_width;
  flow.push_back(cur);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::string here = layer_label(arch, static_cast<int>(i));
    const std::string prev = layer_label(arch, static_cast<int>(i) - 1);
    switch (l.kind) {
      case LayerKind::conv3x3:
        if (cur.flat)
          throw ValidationError("architecture: " + here + " needs spatial input but " + prev +
                                " produces a flat vector");
        if (l.channels_out < 1)
          throw ValidationError("architecture: " + here + " has non-positive channels_out");
        cur.channels = l.channels_out;
        break;
      case LayerKind::batch_norm:
      case LayerKind::relu:
        break;  // shape-preserving
      case LayerKind::max_pool2:
        if (cur.flat)
          throw ValidationError("architecture: " + here + " needs spatial input but " + prev +
                                " produces a flat vector");
        if (cur.height % 2 != 0 || cur.width % 2 != 0)
          throw ValidationError("architecture: " + here + " requires even extents but " + prev +
                                " produces " + std::to_string(cur.height) + "x" +
                                std::to_string(cur.width));
        cur.height /= 2;
        cur.width /= 2;
        break;
      case LayerKind::flatten:
        if (cur.flat)
          throw ValidationError("architecture: " + here + " applied to already-flat output of " +
                                prev);
        cur.flat = true;
        cur.features = cur.channels * cur.height * cur.width;
        cur.channels = cur.height = cur.width = 0;
        break;
      case LayerKind::dense:
        if (!cur.flat)
          throw ValidationError("architecture: " + here + " needs a flat input but " + prev +
                                " produces a spatial map (missing flatten?)");
        if (l.features_out < 1)
          throw ValidationError("architecture: " + here + " has non-positive features_out");
        cur.features = l.features_out;
        break;
    }
    flow.push_back(cur);
  }
  if (flow.empty() || !flow.back().flat)
    throw ValidationError("architecture: final layer must produce a flat logits vector");
  return flow;
}

Architecture tiny_conv(int in_channels, int height, int width, int categories) {
  Architecture a;
  a.input_channels = in_channels;
  a.input_height = height;
  a.input_width = width;
  a.layers = {
      {LayerKind::conv3x3, 8, 0},  {LayerKind::batch_norm},      {LayerKind::relu},
      {LayerKind::max_pool2},      {LayerKind::conv3x3, 16, 0},  {LayerKind::batch_norm},
      {LayerKind::relu},           {LayerKind::max_pool2},       {LayerKind::flatten},
      {LayerKind::dense, 0, categories},
  };
  return a;
}

Architecture tiny_conv_no_bn(int in_channels, int height, int width, int categories) {
  Architecture a;
  a.input_channels = in_channels;
  a.input_height = height;
  a.input_width = width;
  a.layers = {
      {LayerKind::conv3x3, 8, 0}, {LayerKind::relu},           {LayerKind::max_pool2},
      {LayerKind::conv3x3, 16, 0}, {LayerKind::relu},          {LayerKind::max_pool2},
      {LayerKind::flatten},       {LayerKind::dense, 0, categories},
  };
  return a;
}

Architecture mlp(int in_channels, int height, int width, int hidden, int categories, bool with_bn) {
  Architecture a;
  a.input_channels = in_channels;
  a.input_height = height;
  a.input_width = width;
  a.layers.push_back({LayerKind::flatten});
  a.layers.push_back({LayerKind::dense, 0, hidden});
  if (with_bn) a.layers.push_back({LayerKind::batch_norm});
  a.layers.push_back({LayerKind::relu});
  a.layers.push_back({LayerKind::dense, 0, categories});
  return a;
}

namespace {

// Per-layer extents of parameter tensors, in flatten order.
struct LayerParams {
  // conv: weight (co,ci,3,3) + bias (co); bn: gamma + beta; dense: weight (k,f) + bias (k)
  std::vector<std::pair<std::string, std::vector<std::size_t>>> params;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> buffers;
};

LayerParams layer_params(const Architecture& arch, const std::vector<LayerShape>& flow,
                         std::size_t i) {
  LayerParams out;
  const LayerSpec& l = arch.layers[i];
  const LayerShape& in = flow[i];
  const std::string p = "l" + std::to_string(i) + ".";
  switch (l.kind) {
    case LayerKind::conv3x3: {
      const auto co = static_cast<std::size_t>(l.channels_out);
      const auto ci = static_cast<std::size_t>(in.channels);
      out.params.push_back({p + "weight", {co, ci, 3, 3}});
      out.params.push_back({p + "bias", {co}});
      break;
    }
    case LayerKind::batch_norm: {
      const auto c = static_cast<std::size_t>(in.flat ? in.features : in.channels);
      out.params.push_back({p + "gamma", {c}});
      out.params.push_back({p + "beta", {c}});
      out.buffers.push_back({p + "running_mean", {c}});
      out.buffers.push_back({p + "running_var", {c}});
      break;
    }
    case LayerKind::dense: {
      const auto k = static_cast<std::size_t>(l.features_out);
      const auto f = static_cast<std::size_t>(in.features);
      out.params.push_back({p + "weight", {k, f}});
      out.params.push_back({p + "bias", {k}});
      break;
    }
    default:
      break;
  }
  return out;
}

}  // namespace

std::size_t param_count(const Architecture& arch) {
  const auto flow = shape_flow(arch);
  std::size_t n = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i)
    for (const auto& [name, shape] : layer_params(arch, flow, i).params)
      n += Tensor::element_count(shape);
  return n;
}

std::size_t buffer_count(const Architecture& arch) {
  const auto flow = shape_flow(arch);
  std::size_t n = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i)
    for (const auto& [name, shape] : layer_params(arch, flow, i).buffers)
      n += Tensor::element_count(shape);
  return n;
}

ModelState build_model(const Architecture& arch, std::uint64_t seed) {
  const auto flow = shape_flow(arch);
  ModelState m;
  m.arch = arch;
  rng::Stream stream(rng::derive(seed, {0x6d6f64656cull}));  // "model"
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const LayerShape& in = flow[i];
    for (auto& [name, shape] : layer_params(arch, flow, i).params) {
      Tensor t = Tensor::zeros(shape);
      if (name.ends_with(".weight")) {
        const std::size_t fan_in = l.kind == LayerKind::conv3x3
                                       ? static_cast<std::size_t>(in.channels) * 9
                                       : static_cast<std::size_t>(in.features);
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& v : t.data) v = stream.normal(0.0, stddev);
      } else if (name.ends_with(".gamma")) {
        std::fill(t.data.begin(), t.data.end(), 1.0);
      }
      // biases and beta stay zero
      m.params.push_back({name, std::move(t)});
    }
    for (auto& [name, shape] : layer_params(arch, flow, i).buffers) {
      Tensor t = name.ends_with(".running_var") ? Tensor::full(shape, 1.0) : Tensor::zeros(shape);
      m.bn_buffers.push_back({name, std::move(t)});
    }
  }
  return m;
}

CategoryWeights class_weights(const std::vector<std::int64_t>& counts) {
  if (counts.size() < 2) throw ValidationError("class_weights: need at least 2 categories");
  std::int64_t maxc = 0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] < 1)
      throw ValidationError("class_weights: category " + std::to_string(j) +
                            " has zero samples; weights undefined");
    maxc = std::max(maxc, counts[j]);
  }
  CategoryWeights w;
  w.alphas.resize(counts.size());
  for (std::size_t j = 0; j < counts.size(); ++j)
    w.alphas[j] = static_cast<double>(maxc) / static_cast<double>(counts[j]);
  return w;
}

CategoryWeights unit_weights(int categories) {
  if (categories < 2) throw ValidationError("unit_weights: need at least 2 categories");
  return {std::vector<double>(static_cast<std::size_t>(categories), 1.0)};
}

namespace {

// ---- forward/backward engine ----------------------------------------------

struct BnCache {
  std::vector<double> xhat;
  std::vector<double> mean;
  std::vector<double> inv_std;
};

struct EngineState {
  const ModelState* model = nullptr;
  std::vector<LayerShape> flow;
  std::size_t batch = 0;
  Mode mode = Mode::infer;
  bool keep = false;  // keep caches for backward

  std::vector<std::vector<double>> acts;    // activation after each layer; acts[0] = input
  std::vector<BnCache> bn_cache;            // indexed by layer
  std::vector<std::vector<std::uint32_t>> pool_argmax;  // indexed by layer
  std::vector<BnBatchStats> bn_stats;       // in BN layer order

  // param tensor index of the first parameter of each layer
  std::vector<int> first_param;
  std::vector<int> first_buffer;
};

void check_batch(const ModelState& model, const Tensor& batch, Mode mode) {
  if (batch.shape.size() != 4)
    throw ValidationError("forward: batch must be NxCxHxW, got " + shape_string(batch.shape));
  const auto n = batch.shape[0];
  if (n < 1) throw ValidationError("forward: empty batch");
  if (mode == Mode::train && n < 2)
    throw ValidationError("forward: train mode needs batch size >= 2 (batch variance undefined)");
  if (batch.shape[1] != static_cast<std::size_t>(model.arch.input_channels) ||
      batch.shape[2] != static_cast<std::size_t>(model.arch.input_height) ||
      batch.shape[3] != static_cast<std::size_t>(model.arch.input_width))
    throw ValidationError("forward: batch shape " + shape_string(batch.shape) +
                          " does not match architecture input " +
                          shape_string({n, static_cast<std::size_t>(model.arch.input_channels),
                                        static_cast<std::size_t>(model.arch.input_height),
                                        static_cast<std::size_t>(model.arch.input_width)}));
}

void index_params(EngineState& st) {
  const Architecture& arch = st.model->arch;
  st.first_param.assign(arch.layers.size(), -1);
  st.first_buffer.assign(arch.layers.size(), -1);
  int p = 0, b = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto lp = layer_params(arch, st.flow, i);
    if (!lp.params.empty()) st.first_param[i] = p;
    if (!lp.buffers.empty()) st.first_buffer[i] = b;
    p += static_cast<int>(lp.params.size());
    b += static_cast<int>(lp.buffers.size());
  }
}

void conv_pad(const double* in, std::size_t n_batch, std::size_t ci, std::size_t h, std::size_t w,
              std::vector<double>& padded) {
  const std::size_t ph = h + 2, pw = w + 2;
  padded.assign(n_batch * ci * ph * pw, 0.0);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t y = 0; y < h; ++y) {
        const double* src = in + ((n * ci + c) * h + y) * w;
        double* dst = padded.data() + ((n * ci + c) * ph + y + 1) * pw + 1;
        std::memcpy(dst, src, w * sizeof(double));
      }
}

void forward_conv(EngineState& st, std::size_t li) {
  const auto& k = kernels::ops();
  const LayerShape& in = st.flow[li];
  const LayerShape& out = st.flow[li + 1];
  const auto n_batch = st.batch;
  const auto ci = static_cast<std::size_t>(in.channels);
  const auto co = static_cast<std::size_t>(out.channels);
  const auto h = static_cast<std::size_t>(in.height);
  const auto w = static_cast<std::size_t>(in.width);
  const std::size_t ph = h + 2, pw = w + 2;

  const Tensor& weight = st.model->params[st.first_param[li]].value;
  const Tensor& bias = st.model->params[st.first_param[li] + 1].value;

  std::vector<double> padded;
  conv_pad(st.acts[li].data(), n_batch, ci, h, w, padded);

  auto& dst = st.acts[li + 1];
  dst.resize(n_batch * co * h * w);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < co; ++c)
      std::fill_n(dst.data() + (n * co + c) * h * w, h * w, bias.data[c]);

  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < co; ++c)
      for (std::size_t cc = 0; cc < ci; ++cc)
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double wv = weight.data[((c * ci + cc) * 3 + ky) * 3 + kx];
            const double* prow = padded.data() + ((n * ci + cc) * ph + ky) * pw + kx;
            double* orow = dst.data() + ((n * co + c) * h) * w;
            for (std::size_t y = 0; y < h; ++y)
              k.axpy(wv, prow + y * pw, orow + y * w, w);
          }
}

void forward_bn(EngineState& st, std::size_t li) {
  const auto& k = kernels::ops();
  const LayerShape& in = st.flow[li];
  const auto n_batch = st.batch;
  const auto c_count = static_cast<std::size_t>(in.flat ? in.features : in.channels);
  const auto spatial = in.flat ? std::size_t{1}
                               : static_cast<std::size_t>(in.height) * in.width;
  const Tensor& gamma = st.model->params[st.first_param[li]].value;
  const Tensor& beta = st.model->params[st.first_param[li] + 1].value;

  const auto& src = st.acts[li];
  auto& dst = st.acts[li + 1];
  dst.resize(src.size());

  auto src_row = [&](std::size_t n, std::size_t c) {
    return src.data() + (n * c_count + c) * spatial;
  };
  auto dst_row = [&](std::size_t n, std::size_t c) {
    return dst.data() + (n * c_count + c) * spatial;
  };

  if (st.mode == Mode::infer) {
    const Tensor& rm = st.model->bn_buffers[st.first_buffer[li]].value;
    const Tensor& rv = st.model->bn_buffers[st.first_buffer[li] + 1].value;
    for (std::size_t c = 0; c < c_count; ++c) {
      const double inv = 1.0 / std::sqrt(rv.data[c] + kBnEpsilon);
      const double a = gamma.data[c] * inv;
      const double b = beta.data[c] - rm.data[c] * a;
      for (std::size_t n = 0; n < n_batch; ++n)
        k.scale_shift(a, b, src_row(n, c), dst_row(n, c), spatial);
    }
    return;
  }

  const double m_count = static_cast<double>(n_batch * spatial);
  BnBatchStats stats;
  stats.mean.resize(c_count);
  stats.var_biased.resize(c_count);
  stats.var_unbiased.resize(c_count);
  BnCache cache;
  if (st.keep) cache.xhat.resize(src.size());
  cache.mean.resize(c_count);
  cache.inv_std.resize(c_count);

  for (std::size_t c = 0; c < c_count; ++c) {
    double total = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) total += k.sum(src_row(n, c), spatial);
    const double mu = total / m_count;
    double ssd = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) ssd += k.sum_sq_diff(src_row(n, c), mu, spatial);
    const double var_b = ssd / m_count;
    const double inv = 1.0 / std::sqrt(var_b + kBnEpsilon);
    stats.mean[c] = mu;
    stats.var_biased[c] = var_b;
    stats.var_unbiased[c] = ssd / (m_count - 1.0);
    cache.mean[c] = mu;
    cache.inv_std[c] = inv;

    const double a = gamma.data[c] * inv;
    const double b = beta.data[c] - mu * a;
    for (std::size_t n = 0; n < n_batch; ++n)
      k.scale_shift(a, b, src_row(n, c), dst_row(n, c), spatial);
    if (st.keep)
      for (std::size_t n = 0; n < n_batch; ++n)
        k.scale_shift(inv, -mu * inv, src_row(n, c),
                      cache.xhat.data() + (n * c_count + c) * spatial, spatial);
  }
  st.bn_stats.push_back(std::move(stats));
  if (st.keep) st.bn_cache[li] = std::move(cache);
}

void forward_pool(EngineState& st, std::size_t li) {
  const LayerShape& in = st.flow[li];
  const LayerShape& out = st.flow[li + 1];
  const auto n_batch = st.batch;
  const auto c_count = static_cast<std::size_t>(in.channels);
  const auto h = static_cast<std::size_t>(in.height), w = static_cast<std::size_t>(in.width);
  const auto oh = static_cast<std::size_t>(out.height), ow = static_cast<std::size_t>(out.width);

  const auto& src = st.acts[li];
  auto& dst = st.acts[li + 1];
  dst.resize(n_batch * c_count * oh * ow);
  std::vector<std::uint32_t> argmax;
  if (st.keep) argmax.resize(dst.size());

  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < c_count; ++c) {
      const std::size_t base = (n * c_count + c) * h * w;
      const std::size_t obase = (n * c_count + c) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = base + (2 * oy) * w + 2 * ox;
          double bv = src[best];
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = base + (2 * oy + dy) * w + (2 * ox + dx);
              if (src[idx] > bv) {  // strict: ties keep the first in scan order
                bv = src[idx];
                best = idx;
              }
            }
          dst[obase + oy * ow + ox] = bv;
          if (st.keep) argmax[obase + oy * ow + ox] = static_cast<std::uint32_t>(best);
        }
    }
  if (st.keep) st.pool_argmax[li] = std::move(argmax);
}

void forward_dense(EngineState& st, std::size_t li) {
  const auto& k = kernels::ops();
  const LayerShape& in = st.flow[li];
  const LayerShape& out = st.flow[li + 1];
  const auto n_batch = st.batch;
  const auto f = static_cast<std::size_t>(in.features);
  const auto kk = static_cast<std::size_t>(out.features);
  const Tensor& weight = st.model->params[st.first_param[li]].value;
  const Tensor& bias = st.model->params[st.first_param[li] + 1].value;
  const auto& src = st.acts[li];
  auto& dst = st.acts[li + 1];
  dst.resize(n_batch * kk);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t j = 0; j < kk; ++j)
      dst[n * kk + j] = k.dot(weight.data.data() + j * f, src.data() + n * f, f) + bias.data[j];
}

void run_forward(EngineState& st, const Tensor& batch) {
  const auto& k = kernels::ops();
  const Architecture& arch = st.model->arch;
  st.flow = shape_flow(arch);
  st.batch = batch.shape[0];
  index_params(st);
  st.acts.assign(arch.layers.size() + 1, {});
  st.bn_cache.assign(arch.layers.size(), {});
  st.pool_argmax.assign(arch.layers.size(), {});
  st.acts[0] = batch.data;

  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    switch (arch.layers[i].kind) {
      case LayerKind::conv3x3:
        forward_conv(st, i);
        break;
      case LayerKind::batch_norm:
        forward_bn(st, i);
        break;
      case LayerKind::relu:
        st.acts[i + 1].resize(st.acts[i].size());
        k.relu(st.acts[i].data(), st.acts[i + 1].data(), st.acts[i].size());
        break;
      case LayerKind::max_pool2:
        forward_pool(st, i);
        break;
      case LayerKind::flatten:
        st.acts[i + 1] = st.acts[i];
        break;
      case LayerKind::dense:
        forward_dense(st, i);
        break;
    }
  }
}

// Backward counterparts; `grads` spans are aligned with the params order.

struct GradSink {
  std::vector<double> flat;
  std::vector<std::size_t> offsets;  // per param tensor
  double* span(int param_index) { return flat.data() + offsets[param_index]; }
};

void backward_conv(EngineState& st, std::size_t li, const std::vector<double>& dout,
                   std::vector<double>& din, GradSink& sink) {
  const auto& k = kernels::ops();
  const LayerShape& in = st.flow[li];
  const LayerShape& out = st.flow[li + 1];
  const auto n_batch = st.batch;
  const auto ci = static_cast<std::size_t>(in.channels);
  const auto co = static_cast<std::size_t>(out.channels);
  const auto h = static_cast<std::size_t>(in.height);
  const auto w = static_cast<std::size_t>(in.width);
  const std::size_t ph = h + 2, pw = w + 2;

  const Tensor& weight = st.model->params[st.first_param[li]].value;
  double* dweight = sink.span(st.first_param[li]);
  double* dbias = sink.span(st.first_param[li] + 1);

  std::vector<double> padded;
  conv_pad(st.acts[li].data(), n_batch, ci, h, w, padded);
  std::vector<double> dpadded(padded.size(), 0.0);

  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < co; ++c) {
      const double* drow0 = dout.data() + ((n * co + c) * h) * w;
      for (std::size_t y = 0; y < h; ++y) dbias[c] += k.sum(drow0 + y * w, w);
      for (std::size_t cc = 0; cc < ci; ++cc)
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double* prow = padded.data() + ((n * ci + cc) * ph + ky) * pw + kx;
            double* dprow = dpadded.data() + ((n * ci + cc) * ph + ky) * pw + kx;
            const double wv = weight.data[((c * ci + cc) * 3 + ky) * 3 + kx];
            double acc = 0.0;
            for (std::size_t y = 0; y < h; ++y) {
              acc += k.dot(drow0 + y * w, prow + y * pw, w);
              k.axpy(wv, drow0 + y * w, dprow + y * pw, w);
            }
            dweight[((c * ci + cc) * 3 + ky) * 3 + kx] += acc;
          }
    }

  din.assign(n_batch * ci * h * w, 0.0);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t cc = 0; cc < ci; ++cc)
      for (std::size_t y = 0; y < h; ++y) {
        const double* src = dpadded.data() + ((n * ci + cc) * ph + y + 1) * pw + 1;
        double* dst = din.data() + ((n * ci + cc) * h + y) * w;
        std::memcpy(dst, src, w * sizeof(double));
      }
}

void backward_bn(EngineState& st, std::size_t li, const std::vector<double>& dout,
                 std::vector<double>& din, GradSink& sink) {
  const auto& k = kernels::ops();
  const LayerShape& in = st.flow[li];
  const auto n_batch = st.batch;
  const auto c_count = static_cast<std::size_t>(in.flat ? in.features : in.channels);
  const auto spatial = in.flat ? std::size_t{1}
                               : static_cast<std::size_t>(in.height) * in.width;
  const double m_count = static_cast<double>(n_batch * spatial);
  const Tensor& gamma = st.model->params[st.first_param[li]].value;
  double* dgamma = sink.span(st.first_param[li]);
  double* dbeta = sink.span(st.first_param[li] + 1);
  const BnCache& cache = st.bn_cache[li];

  din.resize(dout.size());
  for (std::size_t c = 0; c < c_count; ++c) {
    double db = 0.0, dg = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double* drow = dout.data() + (n * c_count + c) * spatial;
      const double* xrow = cache.xhat.data() + (n * c_count + c) * spatial;
      db += k.sum(drow, spatial);
      dg += k.dot(drow, xrow, spatial);
    }
    dbeta[c] += db;
    dgamma[c] += dg;

    const double a1 = gamma.data[c] * cache.inv_std[c];
    const double cx = -a1 * dg / m_count;
    const double cb = -a1 * db / m_count;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double* drow = dout.data() + (n * c_count + c) * spatial;
      const double* xrow = cache.xhat.data() + (n * c_count + c) * spatial;
      double* irow = din.data() + (n * c_count + c) * spatial;
      k.scale_shift(a1, cb, drow, irow, spatial);
      k.axpy(cx, xrow, irow, spatial);
    }
  }
}

void backward_pool(EngineState& st, std::size_t li, const std::vector<double>& dout,
                   std::vector<double>& din) {
  din.assign(st.acts[li].size(), 0.0);
  const auto& argmax = st.pool_argmax[li];
  for (std::size_t i = 0; i < dout.size(); ++i) din[argmax[i]] += dout[i];
}

void backward_dense(EngineState& st, std::size_t li, const std::vector<double>& dout,
                    std::vector<double>& din, GradSink& sink) {
  const auto& k = kernels::ops();
  const LayerShape& in = st.flow[li];
  const LayerShape& out = st.flow[li + 1];
  const auto n_batch = st.batch;
  const auto f = static_cast<std::size_t>(in.features);
  const auto kk = static_cast<std::size_t>(out.features);
  const Tensor& weight = st.model->params[st.first_param[li]].value;
  double* dweight = sink.span(st.first_param[li]);
  double* dbias = sink.span(st.first_param[li] + 1);
  const auto& src = st.acts[li];

  din.assign(n_batch * f, 0.0);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t j = 0; j < kk; ++j) {
      const double g = dout[n * kk + j];
      if (g == 0.0) continue;
      dbias[j] += g;
      k.axpy(g, src.data() + n * f, dweight + j * f, f);
      k.axpy(g, weight.data.data() + j * f, din.data() + n * f, f);
    }
}

}  // namespace

ForwardResult forward(const ModelState& model, const Tensor& batch, Mode mode) {
  check_batch(model, batch, mode);
  EngineState st;
  st.model = &model;
  st.mode = mode;
  st.keep = false;
  run_forward(st, batch);

  ForwardResult out;
  const LayerShape& last = st.flow.back();
  out.logits = Tensor({st.batch, static_cast<std::size_t>(last.features)},
                      std::move(st.acts.back()));
  out.bn_stats = std::move(st.bn_stats);
  if (!out.logits.all_finite())
    throw std::runtime_error("forward: non-finite logits (diverged model or bad input)");
  return out;
}

namespace {

void check_loss_inputs(const Tensor& logits, const std::vector<int>& labels,
                       const CategoryWeights& weights) {
  if (logits.shape.size() != 2)
    throw ValidationError("loss: logits must be NxK, got " + shape_string(logits.shape));
  if (logits.shape[0] != labels.size())
    throw ValidationError("loss: logits row count and label count disagree");
  const auto k = logits.shape[1];
  if (weights.alphas.size() != k)
    throw ValidationError("loss: weight vector length " + std::to_string(weights.alphas.size()) +
                          " does not match category count " + std::to_string(k));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ValidationError("loss: label " + std::to_string(y) + " out of range [0, " +
                            std::to_string(k) + ")");
}

}  // namespace

LossResult weighted_ce(const Tensor& logits, const std::vector<int>& labels,
                       const CategoryWeights& weights) {
  check_loss_inputs(logits, labels, weights);
  const std::size_t n_batch = logits.shape[0];
  const std::size_t k = logits.shape[1];
  LossResult out;
  out.per_sample.resize(n_batch);
  double total = 0.0;
  for (std::size_t n = 0; n < n_batch; ++n) {
    const double* row = logits.ptr() + n * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    const double li = weights.alphas[static_cast<std::size_t>(labels[n])] *
                      (lse - row[static_cast<std::size_t>(labels[n])]);
    out.per_sample[n] = li;
    total += li;
  }
  out.loss = total / static_cast<double>(n_batch);
  return out;
}

LossResult cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  return weighted_ce(logits, labels, unit_weights(static_cast<int>(logits.shape[1])));
}

BackwardResult backward(const ModelState& model, const Tensor& batch,
                        const std::vector<int>& labels, const CategoryWeights& weights) {
  check_batch(model, batch, Mode::train);
  if (labels.size() != batch.shape[0])
    throw ValidationError("backward: batch size and label count disagree");

  EngineState st;
  st.model = &model;
  st.mode = Mode::train;
  st.keep = true;
  run_forward(st, batch);

  const Architecture& arch = model.arch;
  const LayerShape& last = st.flow.back();
  const std::size_t k = static_cast<std::size_t>(last.features);
  Tensor logits({st.batch, k}, st.acts.back());
  const LossResult loss = weighted_ce(logits, labels, weights);

  // d(batch loss)/d(logits)
  std::vector<double> delta(st.batch * k);
  for (std::size_t n = 0; n < st.batch; ++n) {
    const double* row = logits.ptr() + n * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const double alpha = weights.alphas[static_cast<std::size_t>(labels[n])];
    for (std::size_t j = 0; j < k; ++j) {
      double p = std::exp(row[j] - m) / z;
      if (j == static_cast<std::size_t>(labels[n])) p -= 1.0;
      delta[n * k + j] = alpha * p / static_cast<double>(st.batch);
    }
  }

  GradSink sink;
  sink.offsets.resize(model.params.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    sink.offsets[i] = total;
    total += model.params[i].value.size();
  }
  sink.flat.assign(total, 0.0);

  const auto& kr = kernels::ops();
  std::vector<double> dcur = std::move(delta);
  std::vector<double> dprev;
  for (std::size_t ii = arch.layers.size(); ii-- > 0;) {
    switch (arch.layers[ii].kind) {
      case LayerKind::conv3x3:
        backward_conv(st, ii, dcur, dprev, sink);
        break;
      case LayerKind::batch_norm:
        backward_bn(st, ii, dcur, dprev, sink);
        break;
      case LayerKind::relu:
        dprev.resize(dcur.size());
        kr.relu_grad(st.acts[ii].data(), dcur.data(), dprev.data(), dcur.size());
        break;
      case LayerKind::max_pool2:
        backward_pool(st, ii, dcur, dprev);
        break;
      case LayerKind::flatten:
        dprev = dcur;
        break;
      case LayerKind::dense:
        backward_dense(st, ii, dcur, dprev, sink);
        break;
    }
    std::swap(dcur, dprev);
  }

  BackwardResult out;
  out.loss = loss.loss;
  out.gradient = std::move(sink.flat);

  // Momentum update of the running statistics, returned as a side channel.
  out.updated_buffers = flatten_buffers(model);
  std::size_t boff = 0;
  std::size_t stat_idx = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (arch.layers[i].kind != LayerKind::batch_norm) continue;
    const BnBatchStats& s = st.bn_stats[stat_idx++];
    const std::size_t c_count = s.mean.size();
    for (std::size_t c = 0; c < c_count; ++c)
      out.updated_buffers[boff + c] =
          (1.0 - kBnMomentum) * out.updated_buffers[boff + c] + kBnMomentum * s.mean[c];
    for (std::size_t c = 0; c < c_count; ++c)
      out.updated_buffers[boff + c_count + c] =
          (1.0 - kBnMomentum) * out.updated_buffers[boff + c_count + c] +
          kBnMomentum * s.var_unbiased[c];
    boff += 2 * c_count;
  }

  for (double v : out.gradient)
    if (!std::isfinite(v)) throw std::runtime_error("backward: non-finite gradient");
  return out;
}

ModelState sgd_step(const ModelState& model, const std::vector<double>& gradient, double lr) {
  if (lr < 0.0) throw ValidationError("sgd_step: negative learning rate");
  std::size_t total = 0;
  for (const auto& p : model.params) total += p.value.size();
  if (gradient.size() != total)
    throw ValidationError("sgd_step: gradient length " + std::to_string(gradient.size()) +
                          " does not match parameter count " + std::to_string(total));
  ModelState out = model;
  if (lr == 0.0) return out;
  const auto& k = kernels::ops();
  std::size_t off = 0;
  for (auto& p : out.params) {
    k.axpy(-lr, gradient.data() + off, p.value.ptr(), p.value.size());
    off += p.value.size();
  }
  return out;
}

std::vector<double> flatten_params(const ModelState& model) {
  std::vector<double> flat;
  std::size_t total = 0;
  for (const auto& p : model.params) total += p.value.size();
  flat.reserve(total);
  for (const auto& p : model.params) flat.insert(flat.end(), p.value.data.begin(), p.value.data.end());
  return flat;
}

ModelState unflatten_params(const ModelState& model, const std::vector<double>& flat) {
  std::size_t total = 0;
  for (const auto& p : model.params) total += p.value.size();
  if (flat.size() != total)
    throw ValidationError("unflatten_params: vector length " + std::to_string(flat.size()) +
                          " does not match parameter count " + std::to_string(total));
  ModelState out = model;
  std::size_t off = 0;
  for (auto& p : out.params) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(),
                p.value.data.begin());
    off += p.value.size();
  }
  return out;
}

std::vector<double> flatten_buffers(const ModelState& model) {
  std::vector<double> flat;
  std::size_t total = 0;
  for (const auto& b : model.bn_buffers) total += b.value.size();
  flat.reserve(total);
  for (const auto& b : model.bn_buffers)
    flat.insert(flat.end(), b.value.data.begin(), b.value.data.end());
  return flat;
}

ModelState unflatten_buffers(const ModelState& model, const std::vector<double>& flat) {
  std::size_t total = 0;
  for (const auto& b : model.bn_buffers) total += b.value.size();
  if (flat.size() != total)
    throw ValidationError("unflatten_buffers: vector length " + std::to_string(flat.size()) +
                          " does not match buffer count " + std::to_string(total));
  ModelState out = model;
  std::size_t off = 0;
  for (auto& b : out.bn_buffers) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), b.value.size(),
                b.value.data.begin());
    off += b.value.size();
  }
  return out;
}

bool states_equal(const ModelState& a, const ModelState& b) {
  if (!(a.arch == b.arch)) return false;
  if (a.params.size() != b.params.size() || a.bn_buffers.size() != b.bn_buffers.size())
    return false;
  auto equal_bits = [](const Tensor& x, const Tensor& y) {
    return x.shape == y.shape &&
           std::memcmp(x.ptr(), y.ptr(), x.size() * sizeof(double)) == 0;
  };
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (a.params[i].name != b.params[i].name || !equal_bits(a.params[i].value, b.params[i].value))
      return false;
  for (std::size_t i = 0; i < a.bn_buffers.size(); ++i)
    if (a.bn_buffers[i].name != b.bn_buffers[i].name ||
        !equal_bits(a.bn_buffers[i].value, b.bn_buffers[i].value))
      return false;
  return true;
}

}  // namespace fedsim::nn
