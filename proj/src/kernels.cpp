#include "fedsim/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <string>

#include "fedsim/error.hpp"

namespace fedsim::kernels {

namespace scalar {

void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale(double a, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] *= a;
}

void scale_into(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i];
}

void scale_shift(double a, double b, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i] + b;
}

double sum(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

double sum_sq_diff(const double* x, double mu, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - mu;
    s += d * d;
  }
  return s;
}

void relu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad(const double* x, const double* dy, double* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void clamp01(double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    double v = y[i];
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    y[i] = v;
  }
}

double max_abs_diff(const double* a, const double* b, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::fabs(a[i] - b[i]);
    if (d > m) m = d;
  }
  return m;
}

}  // namespace scalar

const Ops& scalar_ops() {
  static const Ops table = {
      scalar::axpy,    scalar::scale,     scalar::scale_into, scalar::scale_shift,
      scalar::sum,     scalar::dot,       scalar::sum_sq_diff, scalar::relu,
      scalar::relu_grad, scalar::clamp01, scalar::max_abs_diff,
  };
  return table;
}

#if defined(__x86_64__) || defined(_M_X64)
const Ops& avx2_ops();  // kernels_avx2.cpp, compiled with -mavx2
static bool avx2_available() { return __builtin_cpu_supports("avx2"); }
#else
static bool avx2_available() { return false; }
#endif

#if defined(__aarch64__)
const Ops& neon_ops();  // kernels_neon.cpp
static bool neon_available() { return true; }
#else
static bool neon_available() { return false; }
#endif

const char* isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "?";
}

std::vector<Isa> supported_isas() {
  std::vector<Isa> v{Isa::scalar};
  if (avx2_available()) v.push_back(Isa::avx2);
  if (neon_available()) v.push_back(Isa::neon);
  return v;
}

const Ops& ops_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return scalar_ops();
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      if (avx2_available()) return avx2_ops();
#endif
      break;
    case Isa::neon:
#if defined(__aarch64__)
      return neon_ops();
#else
      break;
#endif
  }
  throw ValidationError(std::string("ISA not supported on this machine: ") + isa_name(isa));
}

namespace {

Isa default_isa() {
  if (const char* env = std::getenv("FEDSIM_ISA")) {
    if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
    if (std::strcmp(env, "avx2") == 0 && avx2_available()) return Isa::avx2;
    if (std::strcmp(env, "neon") == 0 && neon_available()) return Isa::neon;
    // Unknown or unsupported override: fall through to autodetection rather
    // than fail inside static initialization.
  }
  if (avx2_available()) return Isa::avx2;
  if (neon_available()) return Isa::neon;
  return Isa::scalar;
}

std::atomic<Isa>& active_slot() {
  static std::atomic<Isa> slot{default_isa()};
  return slot;
}

}  // namespace

const Ops& ops() { return ops_for(active_slot().load(std::memory_order_relaxed)); }

Isa active_isa() { return active_slot().load(std::memory_order_relaxed); }

void force_isa(Isa isa) {
  ops_for(isa);  // validates
  active_slot().store(isa, std::memory_order_relaxed);
}

}  // namespace fedsim::kernels
