#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "olfsl/tensor.hpp"

namespace olfsl {

// Central finite differences against a forward-only loss evaluation. The
// probe never touches the tape, so it is an independent oracle for any
// backward rule.
//
// `loss_fn` must evaluate the loss from the given parameter values alone.
template <typename T>
struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

template <typename T>
double fd_rel_error(double analytic, double numeric, double guard = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), guard});
  return std::abs(analytic - numeric) / denom;
}

template <typename T>
FiniteDiffReport<T> finite_diff_check(
    std::map<std::string, Tensor<T>>& params,
    const std::function<double(const std::map<std::string, Tensor<T>>&)>& loss_fn,
    const std::map<std::string, Tensor<T>>& analytic_grads, double step = 1e-5) {
  FiniteDiffReport<T> report;
  for (auto& [name, p] : params) {
    const auto git = analytic_grads.find(name);
    if (git == analytic_grads.end()) throw LogicError("finite_diff_check: no gradient for '" + name + "'");
    const Tensor<T>& g = git->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const T saved = p.data[i];
      p.data[i] = saved + static_cast<T>(step);
      const double f_plus = loss_fn(params);
      p.data[i] = saved - static_cast<T>(step);
      const double f_minus = loss_fn(params);
      p.data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double analytic = static_cast<double>(g.data[i]);
      const double rel = fd_rel_error<T>(analytic, numeric);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = static_cast<std::int64_t>(i);
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace olfsl
