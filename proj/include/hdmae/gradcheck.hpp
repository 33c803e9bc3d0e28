#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hdmae/tensor.hpp"

namespace hdmae {

struct GradCheckOptions {
  // Central differences use h = step_scale * max(1, |x|).
  double step_scale = 1e-3;
  double tolerance = 1e-3;
  // Gradients whose analytic and numeric norms both fall below this are
  // compared in absolute terms instead.
  double zero_floor = 1e-8;
};

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = false;
  std::string detail;  // first failing input, if any
};

using ScalarFn = std::function<Tensor<double>(std::span<const Tensor<double>>)>;

// Compares reverse-mode gradients of the scalar `fn` with central finite
// differences, input by input. The error for one input is the norm-wise
// relative error ||g_tape - g_fd|| / (||g_tape|| + ||g_fd||).
GradCheckResult gradcheck(const std::string& name,
                          std::vector<Tensor<double>> inputs,
                          const ScalarFn& fn,
                          const GradCheckOptions& opts = {});

// Norm-wise relative error used by gradcheck(); exposed for tests that
// compare hand-derived gradients.
double relative_error(std::span<const double> analytic,
                      std::span<const double> numeric, double zero_floor);

// Central finite-difference gradient of fn with respect to inputs[which].
std::vector<double> numeric_gradient(std::vector<Tensor<double>>& inputs,
                                     std::size_t which, const ScalarFn& fn,
                                     double step_scale);

}  // namespace hdmae
