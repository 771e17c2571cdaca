#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fatspeech/numerics/tensor.hpp"

namespace fatspeech::num {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor of the relative error so that vanishing gradients are
  // compared absolutely.
  double floor = 1e-6;
  // When non-zero, only this many coordinates per point are probed (chosen
  // with `seed`); zero probes every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::size_t point = 0;  // index into the checked tensors
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string summary() const;
};

// `fn` must rebuild its graph from the current values of `points` on every call
// and return a scalar. Autodiff gradients are compared with central
// differences (f(x + eps) - f(x - eps)) / (2 eps).
GradCheckReport grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> points,
                           const GradCheckOptions& options = {});

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor point,
                           const GradCheckOptions& options = {});

}  // namespace fatspeech::num
