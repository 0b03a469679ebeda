#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"
#include "oracles.hpp"

using namespace fedsim;
using namespace fedsim::nn;

namespace {

Tensor random_batch(std::size_t n, int c, int h, int w, std::uint64_t seed) {
  rng::Stream st(seed);
  Tensor t = Tensor::zeros({n, static_cast<std::size_t>(c), static_cast<std::size_t>(h),
                            static_cast<std::size_t>(w)});
  for (auto& v : t.data) v = st.uniform();
  return t;
}

std::vector<int> random_labels(std::size_t n, int categories, std::uint64_t seed) {
  rng::Stream st(seed);
  std::vector<int> l(n);
  for (auto& v : l) v = static_cast<int>(st.below(static_cast<std::uint64_t>(categories)));
  return l;
}

bool params_bitwise_equal(const ModelState& a, const ModelState& b) {
  return states_equal(a, b);
}

}  // namespace

TEST_CASE("build_model: determinism and initialization contract") {
  const auto arch = tiny_conv(1, 16, 16, 4);
  const auto m1 = build_model(arch, 7);
  const auto m2 = build_model(arch, 7);
  CHECK(params_bitwise_equal(m1, m2));
  const auto m3 = build_model(arch, 8);
  CHECK(!params_bitwise_equal(m1, m3));

  for (const auto& b : m1.bn_buffers) {
    if (b.name.ends_with("running_var"))
      for (double v : b.value.data) CHECK(v == 1.0);
    if (b.name.ends_with("running_mean"))
      for (double v : b.value.data) CHECK(v == 0.0);
  }
  for (const auto& p : m1.params) {
    if (p.name.ends_with("gamma"))
      for (double v : p.value.data) CHECK(v == 1.0);
    if (p.name.ends_with("beta") || p.name.ends_with("bias"))
      for (double v : p.value.data) CHECK(v == 0.0);
  }
}

TEST_CASE("build_model: parameter count matches the hand count for tiny-conv 16x16x1, C=4") {
  // conv1 8*1*3*3+8 = 80; bn1 8+8 = 16; conv2 16*8*3*3+16 = 1168; bn2 32;
  // dense 4*256+4 = 1028; total 2324. Buffers: (8+8)+(16+16) = 48.
  const auto arch = tiny_conv(1, 16, 16, 4);
  CHECK(param_count(arch) == 2324);
  CHECK(buffer_count(arch) == 48);
  const auto m = build_model(arch, 0);
  CHECK(flatten_params(m).size() == 2324);
  CHECK(flatten_buffers(m).size() == 48);
}

TEST_CASE("shape_flow: rejects inconsistent architectures naming the layer pair") {
  Architecture a;
  a.input_channels = 1;
  a.input_height = 5;  // odd: pooling must reject
  a.input_width = 5;
  a.layers = {{LayerKind::max_pool2}};
  CHECK_THROWS_WITH_AS(static_cast<void>(shape_flow(a)),
                       doctest::Contains("layer 0 (max_pool2)"), ValidationError);

  Architecture b;
  b.layers = {{LayerKind::dense, 0, 4}};
  CHECK_THROWS_WITH_AS(static_cast<void>(shape_flow(b)), doctest::Contains("flat input"),
                       ValidationError);

  Architecture c;
  c.layers = {{LayerKind::flatten}, {LayerKind::conv3x3, 8, 0}};
  CHECK_THROWS_AS(static_cast<void>(shape_flow(c)), ValidationError);
}

TEST_CASE("flatten/unflatten: round trip identity and layout order") {
  const auto arch = tiny_conv(1, 16, 16, 4);
  const auto m = build_model(arch, 3);
  const auto flat = flatten_params(m);
  CHECK(params_bitwise_equal(unflatten_params(m, flat), m));

  const auto zeros = std::vector<double>(flat.size(), 0.0);
  const auto zeroed = unflatten_params(m, zeros);
  for (const auto& p : zeroed.params)
    for (double v : p.value.data) CHECK(v == 0.0);

  // Hand-enumerated layout for tiny-conv: offsets of each tensor in the flat
  // vector, in architecture declaration order.
  struct Entry {
    const char* name;
    std::size_t offset, size;
  };
  const Entry layout[] = {
      {"l0.weight", 0, 72},     {"l0.bias", 72, 8},       {"l1.gamma", 80, 8},
      {"l1.beta", 88, 8},       {"l4.weight", 96, 1152},  {"l4.bias", 1248, 16},
      {"l5.gamma", 1264, 16},   {"l5.beta", 1280, 16},    {"l9.weight", 1296, 1024},
      {"l9.bias", 2320, 4},
  };
  std::size_t idx = 0;
  for (const auto& e : layout) {
    REQUIRE(idx < m.params.size());
    CHECK(m.params[idx].name == e.name);
    CHECK(m.params[idx].value.size() == e.size);
    // value at the expected flat offset equals the tensor's first element
    CHECK(flat[e.offset] == m.params[idx].value.data[0]);
    ++idx;
  }
  CHECK(idx == m.params.size());

  CHECK_THROWS_AS(static_cast<void>(unflatten_params(m, std::vector<double>(10, 0.0))),
                  ValidationError);
  CHECK_THROWS_AS(static_cast<void>(unflatten_buffers(m, std::vector<double>(10, 0.0))),
                  ValidationError);
}

TEST_CASE("class_weights: direct Eq-style evaluation and zero-count rejection") {
  CHECK(class_weights({5, 5, 5, 5}).alphas == std::vector<double>{1.0, 1.0, 1.0, 1.0});
  CHECK(class_weights({10, 5}).alphas == std::vector<double>{1.0, 2.0});
  CHECK(class_weights({100, 50, 25, 25}).alphas == std::vector<double>{1.0, 2.0, 4.0, 4.0});
  CHECK_THROWS_WITH_AS(static_cast<void>(class_weights({3, 0, 2})), doctest::Contains("category 1"),
                       ValidationError);
  CHECK_THROWS_AS(static_cast<void>(class_weights({5})), ValidationError);

  // majority category always gets weight exactly 1
  rng::Stream st(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::int64_t> counts(4);
    for (auto& c : counts) c = 1 + static_cast<std::int64_t>(st.below(500));
    const auto w = class_weights(counts);
    double mn = w.alphas[0];
    for (double a : w.alphas) {
      CHECK(a >= 1.0);
      mn = std::min(mn, a);
    }
    CHECK(mn == 1.0);
  }
}

TEST_CASE("weighted_ce: analytic and limit cases") {
  // uniform logits over C=4, alpha=1 -> ln 4
  Tensor logits({1, 4}, {0.3, 0.3, 0.3, 0.3});
  const auto r = weighted_ce(logits, {2}, unit_weights(4));
  CHECK(r.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // strongly peaked on the true category -> loss ~ 0, any alpha
  Tensor peaked({1, 4}, {60.0, -30.0, -30.0, -30.0});
  const auto r2 = weighted_ce(peaked, {0}, class_weights({1, 2, 3, 4}));
  CHECK(r2.loss < 1e-12);

  // frozen oracle: logits {2,-1,0.5,0}, label 2, alpha {1,2,4,4}:
  // loss = 4 * (log(e^2 + e^-1 + e^0.5 + 1) - 0.5)
  Tensor fixed({1, 4}, {2.0, -1.0, 0.5, 0.0});
  const double z = std::exp(2.0) + std::exp(-1.0) + std::exp(0.5) + 1.0;
  const double expected = 4.0 * (std::log(z) - 0.5);
  const auto r3 = weighted_ce(fixed, {2}, class_weights({100, 50, 25, 25}));
  CHECK(r3.loss == doctest::Approx(expected).epsilon(1e-12));

  // all-ones weights are the plain cross-entropy path, bitwise
  const auto a = weighted_ce(fixed, {2}, unit_weights(4));
  const auto b = cross_entropy(fixed, {2});
  CHECK(std::memcmp(&a.loss, &b.loss, sizeof(double)) == 0);

  CHECK_THROWS_AS(static_cast<void>(weighted_ce(fixed, {4}, unit_weights(4))), ValidationError);
  CHECK_THROWS_AS(static_cast<void>(weighted_ce(fixed, {0}, unit_weights(3))), ValidationError);
}

TEST_CASE("forward: BN definition on a bare batch-norm layer") {
  Architecture a;
  a.input_channels = 1;
  a.input_height = 1;
  a.input_width = 1;
  a.layers = {{LayerKind::batch_norm}, {LayerKind::flatten}};
  auto m = build_model(a, 0);

  // batch {1, 3}: mean 2, biased variance 1 -> output ~ {-1, +1}
  Tensor batch({2, 1, 1, 1}, {1.0, 3.0});
  const auto fwd = forward(m, batch, Mode::train);
  CHECK(fwd.logits.data[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(fwd.logits.data[1] == doctest::Approx(1.0).epsilon(1e-4));
  REQUIRE(fwd.bn_stats.size() == 1);
  CHECK(fwd.bn_stats[0].mean[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fwd.bn_stats[0].var_biased[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fwd.bn_stats[0].var_unbiased[0] == doctest::Approx(2.0).epsilon(1e-12));

  // constant batch -> output ~ beta (= 0) everywhere
  Tensor flat_batch({3, 1, 1, 1}, {0.7, 0.7, 0.7});
  const auto fwd2 = forward(m, flat_batch, Mode::train);
  for (double v : fwd2.logits.data) CHECK(std::fabs(v) < 1e-6);

  // N=1 in train mode is rejected; infer mode accepts it
  Tensor single({1, 1, 1, 1}, {0.5});
  CHECK_THROWS_AS(static_cast<void>(forward(m, single, Mode::train)), ValidationError);
  CHECK_NOTHROW(static_cast<void>(forward(m, single, Mode::infer)));

  // shape mismatch
  Tensor wrong({2, 1, 2, 1}, {0.1, 0.2, 0.3, 0.4});
  CHECK_THROWS_AS(static_cast<void>(forward(m, wrong, Mode::train)), ValidationError);
}

TEST_CASE("forward: BN train-mode output is standardized per channel (gamma=1, beta=0)") {
  const auto arch = tiny_conv(1, 16, 16, 4);
  const auto m = build_model(arch, 11);
  const auto batch = random_batch(8, 1, 16, 16, 21);
  // Check via the returned batch stats of a bare BN on conv output is
  // indirect; instead standardize a flat BN layer and measure.
  Architecture a;
  a.input_channels = 3;
  a.input_height = 4;
  a.input_width = 4;
  a.layers = {{LayerKind::batch_norm}, {LayerKind::flatten}};
  const auto bn = build_model(a, 0);
  const auto in = random_batch(16, 3, 4, 4, 31);
  const auto out = forward(bn, in, Mode::train);
  const std::size_t spatial = 16;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t s = 0; s < spatial; ++s) mean += out.logits.data[(n * 3 + c) * spatial + s];
    const double m_count = 16.0 * spatial;
    mean /= m_count;
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t s = 0; s < spatial; ++s) {
        const double d = out.logits.data[(n * 3 + c) * spatial + s] - mean;
        var += d * d;
      }
    var /= m_count;
    CHECK(std::fabs(mean) < 1e-9);
    // normalization uses variance + epsilon, so the output variance is
    // var/(var+eps); allow the epsilon-adjusted band
    CHECK(std::fabs(var - 1.0) < 2e-4);
  }
  static_cast<void>(m);
  static_cast<void>(batch);
}

TEST_CASE("forward: infer mode is pure and matches the naive re-implementation") {
  const auto arch = tiny_conv(1, 16, 16, 4);
  auto m = build_model(arch, 5);
  // make running stats non-trivial so infer-mode BN is exercised
  auto bw = backward(m, random_batch(8, 1, 16, 16, 77), random_labels(8, 4, 78), unit_weights(4));
  m = unflatten_buffers(m, bw.updated_buffers);

  const auto batch = random_batch(4, 1, 16, 16, 79);
  const auto before_params = flatten_params(m);
  const auto before_buffers = flatten_buffers(m);
  const auto fwd = forward(m, batch, Mode::infer);
  CHECK(fwd.bn_stats.empty());
  CHECK(flatten_params(m) == before_params);
  CHECK(flatten_buffers(m) == before_buffers);

  const auto naive = oracles::naive_forward_infer(m, batch);
  REQUIRE(naive.size() == fwd.logits.size());
  for (std::size_t i = 0; i < naive.size(); ++i)
    CHECK(fwd.logits.data[i] == doctest::Approx(naive.data[i]).epsilon(1e-11));
}

TEST_CASE("backward: finite differences across every layer type") {
  const double h = 1e-5;
  const double tol = 1e-6;

  SUBCASE("composed tiny-conv model") {
    const auto arch = tiny_conv(1, 8, 8, 3);
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      const auto m = build_model(arch, seed);
      const auto batch = random_batch(3, 1, 8, 8, 100 + seed);
      const auto labels = random_labels(3, 3, 200 + seed);
      const auto w = class_weights({7, 3, 5});
      const auto an = backward(m, batch, labels, w);
      const auto fd = oracles::fd_gradient(m, batch, labels, w, h);
      CHECK(oracles::max_rel_error(an.gradient, fd, 1e-2) < tol);
    }
  }

  SUBCASE("mlp with batch norm") {
    const auto arch = mlp(1, 4, 4, 10, 3, true);
    for (std::uint64_t seed : {4ull, 5ull}) {
      const auto m = build_model(arch, seed);
      const auto batch = random_batch(5, 1, 4, 4, 300 + seed);
      const auto labels = random_labels(5, 3, 400 + seed);
      const auto w = unit_weights(3);
      const auto an = backward(m, batch, labels, w);
      const auto fd = oracles::fd_gradient(m, batch, labels, w, h);
      CHECK(oracles::max_rel_error(an.gradient, fd, 1e-2) < tol);
    }
  }

  SUBCASE("conv-only (no bn) exercises conv/relu/pool/dense in isolation") {
    const auto arch = tiny_conv_no_bn(1, 8, 8, 3);
    const auto m = build_model(arch, 6);
    const auto batch = random_batch(2, 1, 8, 8, 500);
    const auto labels = random_labels(2, 3, 501);
    const auto w = unit_weights(3);
    const auto an = backward(m, batch, labels, w);
    const auto fd = oracles::fd_gradient(m, batch, labels, w, h);
    CHECK(oracles::max_rel_error(an.gradient, fd, 1e-2) < 1e-6);
  }
}

TEST_CASE("backward: weighted-loss algebra") {
  const auto arch = tiny_conv(1, 8, 8, 4);
  const auto m = build_model(arch, 9);
  const auto batch = random_batch(4, 1, 8, 8, 600);

  // all alpha = 1 equals the plain-CE gradient bitwise
  const auto labels = random_labels(4, 4, 601);
  const auto g1 = backward(m, batch, labels, unit_weights(4));
  const auto g2 = backward(m, batch, labels, class_weights({5, 5, 5, 5}));
  CHECK(g1.gradient == g2.gradient);
  CHECK(g1.loss == g2.loss);

  // doubling alpha for the only category present doubles the gradient
  const std::vector<int> mono(4, 1);
  CategoryWeights w1 = unit_weights(4), w2 = unit_weights(4);
  w2.alphas[1] = 2.0;
  const auto ga = backward(m, batch, mono, w1);
  const auto gb = backward(m, batch, mono, w2);
  REQUIRE(ga.gradient.size() == gb.gradient.size());
  for (std::size_t i = 0; i < ga.gradient.size(); ++i)
    CHECK(gb.gradient[i] == doctest::Approx(2.0 * ga.gradient[i]).epsilon(1e-12));

  // buffers: returned side channel follows the momentum rule; model untouched
  const auto buffers_before = flatten_buffers(m);
  const auto fwd = forward(m, batch, Mode::train);
  const auto bw = backward(m, batch, labels, unit_weights(4));
  CHECK(flatten_buffers(m) == buffers_before);
  std::size_t off = 0;
  std::size_t bn_i = 0;
  for (const auto& l : m.arch.layers) {
    if (l.kind != LayerKind::batch_norm) continue;
    const auto& stats = fwd.bn_stats[bn_i++];
    const std::size_t c = stats.mean.size();
    for (std::size_t j = 0; j < c; ++j) {
      CHECK(bw.updated_buffers[off + j] ==
            doctest::Approx(0.9 * buffers_before[off + j] + 0.1 * stats.mean[j]).epsilon(1e-12));
      CHECK(bw.updated_buffers[off + c + j] ==
            doctest::Approx(0.9 * buffers_before[off + c + j] + 0.1 * stats.var_unbiased[j])
                .epsilon(1e-12));
    }
    off += 2 * c;
  }
}

TEST_CASE("sgd_step: arithmetic and identity cases") {
  const auto arch = mlp(1, 2, 2, 3, 2, false);
  const auto m = build_model(arch, 1);
  const std::size_t n = flatten_params(m).size();

  // lr = 0 and zero gradient leave the model bitwise unchanged
  std::vector<double> g(n, 0.25);
  CHECK(states_equal(sgd_step(m, g, 0.0), m));
  CHECK(states_equal(sgd_step(m, std::vector<double>(n, 0.0), 0.1), m));

  // single-slot arithmetic: p = 1.0, g = 0.5, lr = 0.1 -> 0.95
  auto flat = flatten_params(m);
  flat[0] = 1.0;
  const auto m2 = unflatten_params(m, flat);
  std::vector<double> g2(n, 0.0);
  g2[0] = 0.5;
  const auto stepped = sgd_step(m2, g2, 0.1);
  CHECK(flatten_params(stepped)[0] == 0.95);

  // buffers untouched
  CHECK(flatten_buffers(stepped) == flatten_buffers(m2));

  CHECK_THROWS_AS(static_cast<void>(sgd_step(m, std::vector<double>(n + 1, 0.0), 0.1)),
                  ValidationError);
}

TEST_CASE("determinism: identical seeds and data give bitwise-identical training") {
  const auto arch = tiny_conv(1, 8, 8, 4);
  auto run = [&](std::uint64_t seed) {
    auto m = build_model(arch, seed);
    for (int step = 0; step < 5; ++step) {
      const auto batch = random_batch(4, 1, 8, 8, 900 + step);
      const auto labels = random_labels(4, 4, 950 + step);
      const auto bw = backward(m, batch, labels, unit_weights(4));
      m = sgd_step(m, bw.gradient, 0.05);
      m = unflatten_buffers(m, bw.updated_buffers);
    }
    return m;
  };
  CHECK(states_equal(run(13), run(13)));
}
