// NEON double-precision kernel variants (aarch64, 2 lanes per vector).
// Same contract as the AVX2 file: elementwise kernels avoid FMA so lanes
// round exactly like the scalar reference; reductions keep lane accumulators
// collapsed in a fixed order.

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>
#include <cstddef>

#include "fedsim/kernels.hpp"

namespace fedsim::kernels {

namespace neon {

void axpy(double a, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t vy = vld1q_f64(y + i);
    vy = vaddq_f64(vy, vmulq_f64(va, vld1q_f64(x + i)));
    vst1q_f64(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void scale(double a, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmulq_f64(va, vld1q_f64(y + i)));
  for (; i < n; ++i) y[i] *= a;
}

void scale_into(double a, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmulq_f64(va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = a * x[i];
}

void scale_shift(double a, double b, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(a);
  const float64x2_t vb = vdupq_n_f64(b);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vaddq_f64(vmulq_f64(va, vld1q_f64(x + i)), vb));
  }
  for (; i < n; ++i) y[i] = a * x[i] + b;
}

static inline double hsum(float64x2_t v, double tail) {
  return (vgetq_lane_f64(v, 0) + vgetq_lane_f64(v, 1)) + tail;
}

double sum(const double* x, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i];
  return hsum(acc, tail);
}

double dot(const double* x, const double* y, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    acc = vaddq_f64(acc, vmulq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return hsum(acc, tail);
}

double sum_sq_diff(const double* x, double mu, std::size_t n) {
  const float64x2_t vmu = vdupq_n_f64(mu);
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t d = vsubq_f64(vld1q_f64(x + i), vmu);
    acc = vaddq_f64(acc, vmulq_f64(d, d));
  }
  double tail = 0.0;
  for (; i < n; ++i) {
    const double d = x[i] - mu;
    tail += d * d;
  }
  return hsum(acc, tail);
}

void relu(const double* x, double* y, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmaxq_f64(vld1q_f64(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad(const double* x, const double* dy, double* dx, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const uint64x2_t mask = vcgtq_f64(vld1q_f64(x + i), zero);
    const float64x2_t v = vreinterpretq_f64_u64(
        vandq_u64(mask, vreinterpretq_u64_f64(vld1q_f64(dy + i))));
    vst1q_f64(dx + i, v);
  }
  for (; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void clamp01(double* y, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  const float64x2_t one = vdupq_n_f64(1.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vminq_f64(vmaxq_f64(vld1q_f64(y + i), zero), one));
  }
  for (; i < n; ++i) {
    double v = y[i];
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    y[i] = v;
  }
}

double max_abs_diff(const double* a, const double* b, std::size_t n) {
  float64x2_t vmax = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vmax = vmaxq_f64(vmax, vabsq_f64(vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i))));
  }
  double m = vgetq_lane_f64(vmax, 0);
  const double m1 = vgetq_lane_f64(vmax, 1);
  if (m1 > m) m = m1;
  for (; i < n; ++i) {
    const double d = std::fabs(a[i] - b[i]);
    if (d > m) m = d;
  }
  return m;
}

}  // namespace neon

const Ops& neon_ops() {
  static const Ops table = {
      neon::axpy,      neon::scale,   neon::scale_into,  neon::scale_shift,
      neon::sum,       neon::dot,     neon::sum_sq_diff, neon::relu,
      neon::relu_grad, neon::clamp01, neon::max_abs_diff,
  };
  return table;
}

}  // namespace fedsim::kernels

#endif  // __aarch64__
