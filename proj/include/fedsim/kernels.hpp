#pragma once

#include <cstddef>
#include <vector>

namespace fedsim::kernels {

// Double-precision vector kernels used by the training inner loops
// (convolution rows, batch-norm statistics, SGD steps, server-side
// aggregation). Each kernel has a scalar reference implementation and,
// where the platform provides them, AVX2 / NEON variants selected once at
// startup. Variants are equivalence-tested against the scalar reference:
// elementwise kernels bitwise (no FMA contraction anywhere, so per-lane
// rounding matches scalar), reductions within a small relative tolerance
// (lane accumulators reassociate the sum).

enum class Isa { scalar, avx2, neon };

struct Ops {
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // y[i] *= a
  void (*scale)(double a, double* y, std::size_t n);
  // y[i] = a * x[i]
  void (*scale_into)(double a, const double* x, double* y, std::size_t n);
  // y[i] = a * x[i] + b
  void (*scale_shift)(double a, double b, const double* x, double* y, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  double (*dot)(const double* x, const double* y, std::size_t n);
  // sum of (x[i] - mu)^2
  double (*sum_sq_diff)(const double* x, double mu, std::size_t n);
  // y[i] = max(x[i], 0)
  void (*relu)(const double* x, double* y, std::size_t n);
  // dx[i] = x[i] > 0 ? dy[i] : 0
  void (*relu_grad)(const double* x, const double* dy, double* dx, std::size_t n);
  // y[i] = min(max(y[i], 0), 1)
  void (*clamp01)(double* y, std::size_t n);
  double (*max_abs_diff)(const double* a, const double* b, std::size_t n);
};

const char* isa_name(Isa isa);

/// Scalar reference table (always available; used by the equivalence tests).
const Ops& scalar_ops();

/// ISAs usable on this machine, scalar first.
std::vector<Isa> supported_isas();

/// Table for a specific ISA; throws ValidationError if unsupported here.
const Ops& ops_for(Isa isa);

/// Active dispatch table. Chosen once: the widest supported ISA, unless the
/// FEDSIM_ISA environment variable (scalar|avx2|neon) overrides it.
const Ops& ops();
Isa active_isa();

/// Test hook: swap the active table. Throws ValidationError if unsupported.
void force_isa(Isa isa);

}  // namespace fedsim::kernels
