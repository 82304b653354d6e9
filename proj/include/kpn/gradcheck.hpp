#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kpn/tensor.hpp"

namespace kpn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// |a − n| / max(|a|, |n|, floor). The floor keeps entries whose gradient is
/// essentially zero from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Compares backward() against central differences for every entry of every
/// tensor in `wrt`. `loss_fn` must rebuild the graph from the current values.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> wrt,
                                       double h = 1e-5) {
  for (auto& w : wrt) w.tensor.zero_grad();
  {
    Tensor loss = loss_fn();
    backward(loss);
  }
  GradCheckResult result;
  for (auto& w : wrt) {
    const std::vector<double> analytic = w.tensor.grad();
    auto data = w.tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double up, down;
      {
        NoGradGuard guard;
        data[i] = saved + h;
        up = loss_fn().item();
        data[i] = saved - h;
        down = loss_fn().item();
      }
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(analytic[i], numeric);
      ++result.checked;
      if (result.worst_param.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = w.name;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace kpn
