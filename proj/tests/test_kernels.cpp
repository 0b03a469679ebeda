#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;
using kernels::Isa;
using kernels::Ops;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double lo = -3.0,
                               double hi = 3.0) {
  rng::Stream st(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = st.uniform(lo, hi);
  return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Every n in here exercises both the vector body and the scalar tail.
const std::vector<std::size_t> kSizes = {0, 1, 2, 3, 4, 5, 7, 8, 15, 16, 33, 64, 1001};

}  // namespace

TEST_CASE("kernels: scalar table always reported as supported") {
  const auto isas = kernels::supported_isas();
  REQUIRE(isas.size() >= 1);
  CHECK(isas[0] == Isa::scalar);
  for (Isa isa : isas) CHECK_NOTHROW(kernels::ops_for(isa));
}

TEST_CASE("kernels: elementwise variants are bitwise equal to the scalar reference") {
  const Ops& ref = kernels::scalar_ops();
  for (Isa isa : kernels::supported_isas()) {
    if (isa == Isa::scalar) continue;
    const Ops& simd = kernels::ops_for(isa);
    INFO("isa = ", kernels::isa_name(isa));
    for (std::size_t n : kSizes) {
      const auto x = random_vec(n, 11 + n);
      const auto y0 = random_vec(n, 23 + n);

      auto ya = y0, yb = y0;
      ref.axpy(0.37, x.data(), ya.data(), n);
      simd.axpy(0.37, x.data(), yb.data(), n);
      CHECK(bitwise_equal(ya, yb));

      ya = y0;
      yb = y0;
      ref.scale(-1.7, ya.data(), n);
      simd.scale(-1.7, yb.data(), n);
      CHECK(bitwise_equal(ya, yb));

      std::vector<double> oa(n), ob(n);
      ref.scale_into(2.25, x.data(), oa.data(), n);
      simd.scale_into(2.25, x.data(), ob.data(), n);
      CHECK(bitwise_equal(oa, ob));

      ref.scale_shift(1.1, -0.4, x.data(), oa.data(), n);
      simd.scale_shift(1.1, -0.4, x.data(), ob.data(), n);
      CHECK(bitwise_equal(oa, ob));

      ref.relu(x.data(), oa.data(), n);
      simd.relu(x.data(), ob.data(), n);
      CHECK(bitwise_equal(oa, ob));

      ref.relu_grad(x.data(), y0.data(), oa.data(), n);
      simd.relu_grad(x.data(), y0.data(), ob.data(), n);
      CHECK(bitwise_equal(oa, ob));

      ya = y0;
      yb = y0;
      ref.clamp01(ya.data(), n);
      simd.clamp01(yb.data(), n);
      CHECK(bitwise_equal(ya, yb));

      CHECK(ref.max_abs_diff(x.data(), y0.data(), n) == simd.max_abs_diff(x.data(), y0.data(), n));
    }
  }
}

TEST_CASE("kernels: reduction variants agree with scalar within tolerance") {
  const Ops& ref = kernels::scalar_ops();
  for (Isa isa : kernels::supported_isas()) {
    if (isa == Isa::scalar) continue;
    const Ops& simd = kernels::ops_for(isa);
    INFO("isa = ", kernels::isa_name(isa));
    for (std::size_t n : kSizes) {
      const auto x = random_vec(n, 31 + n);
      const auto y = random_vec(n, 47 + n);
      const double scale = std::max(1.0, static_cast<double>(n));
      CHECK(std::fabs(ref.sum(x.data(), n) - simd.sum(x.data(), n)) <= 1e-12 * scale);
      CHECK(std::fabs(ref.dot(x.data(), y.data(), n) - simd.dot(x.data(), y.data(), n)) <=
            1e-12 * scale);
      CHECK(std::fabs(ref.sum_sq_diff(x.data(), 0.31, n) - simd.sum_sq_diff(x.data(), 0.31, n)) <=
            1e-12 * scale);
    }
  }
}

TEST_CASE("kernels: scalar reference arithmetic") {
  const Ops& k = kernels::scalar_ops();
  std::vector<double> y = {1.0, 2.0, 3.0};
  const std::vector<double> x = {10.0, 20.0, 30.0};
  k.axpy(0.5, x.data(), y.data(), 3);
  CHECK(y == std::vector<double>{6.0, 12.0, 18.0});

  CHECK(k.sum(x.data(), 3) == 60.0);
  CHECK(k.dot(x.data(), x.data(), 3) == 1400.0);
  CHECK(k.sum_sq_diff(x.data(), 20.0, 3) == 200.0);
  CHECK(k.max_abs_diff(x.data(), y.data(), 3) == 12.0);

  std::vector<double> c = {-0.5, 0.25, 1.5};
  k.clamp01(c.data(), 3);
  CHECK(c == std::vector<double>{0.0, 0.25, 1.0});

  std::vector<double> r(3);
  const std::vector<double> signs = {-1.0, 0.0, 2.0};
  k.relu(signs.data(), r.data(), 3);
  CHECK(r == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("kernels: force_isa switches the active table and rejects unsupported") {
  const Isa before = kernels::active_isa();
  kernels::force_isa(Isa::scalar);
  CHECK(kernels::active_isa() == Isa::scalar);
  kernels::force_isa(before);
  CHECK(kernels::active_isa() == before);

  const auto supported = kernels::supported_isas();
  for (Isa isa : {Isa::avx2, Isa::neon}) {
    bool ok = false;
    for (Isa s : supported)
      if (s == isa) ok = true;
    if (!ok) CHECK_THROWS_AS(kernels::force_isa(isa), ValidationError);
  }
}

TEST_CASE("rng: deterministic streams and distribution sanity") {
  rng::Stream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  rng::Stream st(7);
  double mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = st.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean += u;
  }
  CHECK(std::fabs(mean / n - 0.5) < 0.01);

  double nm = 0.0, nv = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = st.normal();
    nm += z;
    nv += z * z;
  }
  nm /= n;
  nv = nv / n - nm * nm;
  CHECK(std::fabs(nm) < 0.03);
  CHECK(std::fabs(nv - 1.0) < 0.05);

  // Poisson mean ~ lambda
  double pm = 0.0;
  for (int i = 0; i < n; ++i) pm += static_cast<double>(st.poisson(6.5));
  CHECK(std::fabs(pm / n - 6.5) < 0.1);

  // derive: distinct label tuples give distinct seeds
  CHECK(rng::derive(1, {2, 3}) != rng::derive(1, {3, 2}));
  CHECK(rng::derive(1, {2, 3}) != rng::derive(2, {2, 3}));
  CHECK(rng::derive(5, {0}) != rng::derive(5, {0, 0}));
}

TEST_CASE("rng: shuffle is a permutation and seed-stable") {
  rng::Stream a(99);
  auto p = a.permutation(257);
  std::vector<bool> seen(257, false);
  for (auto v : p) {
    CHECK(!seen[v]);
    seen[v] = true;
  }
  rng::Stream b(99);
  CHECK(p == b.permutation(257));
}
