#pragma once

// Independent reference computations the tests check the library against.
// Everything here is deliberately written as straight-line scalar code with
// no use of the kernels layer or the nn engine internals.

#include <vector>

#include "fedsim/nn.hpp"

namespace oracles {

/// Central finite differences (step h) of the weighted-CE batch loss with
/// respect to every trainable parameter.
std::vector<double> fd_gradient(const fedsim::nn::ModelState& model, const fedsim::Tensor& batch,
                                const std::vector<int>& labels,
                                const fedsim::nn::CategoryWeights& weights, double h);

/// Worst relative disagreement between two gradient vectors:
/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor);

/// Naive infer-mode forward pass: per-pixel loops, parameters looked up by
/// name, batch-norm from the running buffers.
fedsim::Tensor naive_forward_infer(const fedsim::nn::ModelState& model,
                                   const fedsim::Tensor& batch);

}  // namespace oracles
