#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hdmae/gradcheck.hpp"

namespace hdmae {

struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(const GradCheckOptions&)> run;
};

// One case per differentiable tensor op, followed by the composite checks
// (op chain, attention, one encoder block, full toy autoencoder, probe
// cross-entropy). With include_broken, a deliberately wrong adjoint
// ("broken_scale") is appended to exercise the failure path.
std::vector<GradCheckCase> gradcheck_registry(bool include_broken = false);

// Names of the primitive differentiable ops covered by the registry.
std::vector<std::string> differentiable_op_names();

// A scale-by-3 op whose recorded adjoint multiplies by 2.
Tensor<double> broken_scale(const Tensor<double>& x);

}  // namespace hdmae
