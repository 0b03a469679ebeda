#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace oracles {

using fedsim::Tensor;
using namespace fedsim::nn;

namespace {

double batch_loss(const ModelState& model, const Tensor& batch, const std::vector<int>& labels,
                  const CategoryWeights& weights) {
  const auto fwd = forward(model, batch, Mode::train);
  return weighted_ce(fwd.logits, labels, weights).loss;
}

const Tensor& named(const ModelState& m, const std::string& name) {
  for (const auto& p : m.params)
    if (p.name == name) return p.value;
  for (const auto& b : m.bn_buffers)
    if (b.name == name) return b.value;
  throw std::runtime_error("oracle: no tensor named " + name);
}

}  // namespace

std::vector<double> fd_gradient(const ModelState& model, const Tensor& batch,
                                const std::vector<int>& labels, const CategoryWeights& weights,
                                double h) {
  const std::vector<double> base = flatten_params(model);
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double lp = batch_loss(unflatten_params(model, plus), batch, labels, weights);
    const double lm = batch_loss(unflatten_params(model, minus), batch, labels, weights);
    grad[i] = (lp - lm) / (2.0 * h);
  }
  return grad;
}

double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

Tensor naive_forward_infer(const ModelState& model, const Tensor& batch) {
  const auto flow = shape_flow(model.arch);
  const std::size_t n_batch = batch.shape[0];

  std::vector<double> act = batch.data;
  LayerShape cur = flow[0];

  for (std::size_t li = 0; li < model.arch.layers.size(); ++li) {
    const LayerSpec& spec = model.arch.layers[li];
    const LayerShape& next = flow[li + 1];
    const std::string p = "l" + std::to_string(li) + ".";
    std::vector<double> out(n_batch * next.element_count(), 0.0);

    switch (spec.kind) {
      case LayerKind::conv3x3: {
        const auto& weight = named(model, p + "weight");
        const auto& bias = named(model, p + "bias");
        const int ci = cur.channels, co = next.channels, h = cur.height, w = cur.width;
        for (std::size_t n = 0; n < n_batch; ++n)
          for (int oc = 0; oc < co; ++oc)
            for (int y = 0; y < h; ++y)
              for (int x = 0; x < w; ++x) {
                double acc = bias.data[static_cast<std::size_t>(oc)];
                for (int ic = 0; ic < ci; ++ic)
                  for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                      const int yy = y + ky - 1, xx = x + kx - 1;
                      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                      const double wv =
                          weight.data[static_cast<std::size_t>(((oc * ci + ic) * 3 + ky) * 3 + kx)];
                      const double iv =
                          act[((n * ci + ic) * h + static_cast<std::size_t>(yy)) * w +
                              static_cast<std::size_t>(xx)];
                      acc += wv * iv;
                    }
                out[((n * co + oc) * h + static_cast<std::size_t>(y)) * w +
                    static_cast<std::size_t>(x)] = acc;
              }
        break;
      }
      case LayerKind::batch_norm: {
        const auto& gamma = named(model, p + "gamma");
        const auto& beta = named(model, p + "beta");
        const auto& rmean = named(model, p + "running_mean");
        const auto& rvar = named(model, p + "running_var");
        const std::size_t channels = gamma.size();
        const std::size_t spatial = cur.flat ? 1 : static_cast<std::size_t>(cur.height) * cur.width;
        for (std::size_t n = 0; n < n_batch; ++n)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t s = 0; s < spatial; ++s) {
              const std::size_t idx = (n * channels + c) * spatial + s;
              const double xhat =
                  (act[idx] - rmean.data[c]) / std::sqrt(rvar.data[c] + kBnEpsilon);
              out[idx] = gamma.data[c] * xhat + beta.data[c];
            }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < act.size(); ++i) out[i] = act[i] > 0.0 ? act[i] : 0.0;
        break;
      case LayerKind::max_pool2: {
        const int c = cur.channels, h = cur.height, w = cur.width;
        const int oh = next.height, ow = next.width;
        for (std::size_t n = 0; n < n_batch; ++n)
          for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y)
              for (int x = 0; x < ow; ++x) {
                double best = -1e300;
                for (int dy = 0; dy < 2; ++dy)
                  for (int dx = 0; dx < 2; ++dx) {
                    const double v = act[((n * c + ch) * h + static_cast<std::size_t>(2 * y + dy)) *
                                             w +
                                         static_cast<std::size_t>(2 * x + dx)];
                    if (v > best) best = v;
                  }
                out[((n * c + ch) * oh + static_cast<std::size_t>(y)) * ow +
                    static_cast<std::size_t>(x)] = best;
              }
        break;
      }
      case LayerKind::flatten:
        out = act;
        break;
      case LayerKind::dense: {
        const auto& weight = named(model, p + "weight");
        const auto& bias = named(model, p + "bias");
        const int f = cur.features, k = next.features;
        for (std::size_t n = 0; n < n_batch; ++n)
          for (int j = 0; j < k; ++j) {
            double acc = bias.data[static_cast<std::size_t>(j)];
            for (int i = 0; i < f; ++i)
              acc += weight.data[static_cast<std::size_t>(j * f + i)] *
                     act[n * static_cast<std::size_t>(f) + static_cast<std::size_t>(i)];
            out[n * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] = acc;
          }
        break;
      }
    }
    act = std::move(out);
    cur = next;
  }
  return Tensor({n_batch, static_cast<std::size_t>(cur.features)}, act);
}

}  // namespace oracles
