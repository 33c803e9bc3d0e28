#include "hdmae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hdmae/errors.hpp"

namespace hdmae {

double relative_error(std::span<const double> analytic,
                      std::span<const double> numeric, double zero_floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("relative_error: length mismatch");
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  diff = std::sqrt(diff);
  const double denom = std::sqrt(na) + std::sqrt(nn);
  if (denom < zero_floor) {
    return diff;
  }
  return diff / denom;
}

std::vector<double> numeric_gradient(std::vector<Tensor<double>>& inputs,
                                     std::size_t which, const ScalarFn& fn,
                                     double step_scale) {
  NoGradGuard no_grad;
  auto values = inputs[which].mutable_data();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = values[i];
    const double h = step_scale * std::max(1.0, std::abs(x));
    values[i] = x + h;
    const double up = fn(inputs).item();
    values[i] = x - h;
    const double down = fn(inputs).item();
    values[i] = x;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

GradCheckResult gradcheck(const std::string& name,
                          std::vector<Tensor<double>> inputs,
                          const ScalarFn& fn, const GradCheckOptions& opts) {
  GradCheckResult result;
  result.name = name;
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  GradTape<double>::current().clear();
  auto loss = fn(inputs);
  backward(loss);

  result.passed = true;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(inputs[k].numel(), 0.0);
    if (inputs[k].has_grad()) {
      std::copy(inputs[k].grad().begin(), inputs[k].grad().end(),
                analytic.begin());
    }
    const auto numeric = numeric_gradient(inputs, k, fn, opts.step_scale);
    const double err = relative_error(analytic, numeric, opts.zero_floor);
    result.max_rel_err = std::max(result.max_rel_err, err);
    if (!(err < opts.tolerance) && result.passed) {
      result.passed = false;
      std::ostringstream os;
      os << "input " << k << " " << shape_str(inputs[k].shape())
         << " rel-err " << err;
      result.detail = os.str();
    }
  }
  return result;
}

}  // namespace hdmae
