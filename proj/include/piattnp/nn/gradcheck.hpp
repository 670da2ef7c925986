#pragma once

#include <functional>
#include <string>
#include <vector>

#include "piattnp/nn/tensor.hpp"

namespace piattnp::nn {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  long worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients against central finite differences.
/// `loss` must be deterministic (fix any sampling outside the closure):
/// called with with_grad=true it must also accumulate parameter gradients.
/// Relative error uses a floored denominator so near-zero gradients are
/// compared absolutely.
inline GradCheckResult grad_check(const std::vector<Param*>& params,
                                  const std::function<double(bool with_grad)>& loss,
                                  double h = 1e-5, double denom_floor = 1e-3) {
  for (Param* p : params) p->zero_grad();
  loss(true);

  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const Param* p : params) analytic.push_back(p->grad);

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    for (long i = 0; i < p.value.size(); ++i) {
      const double saved = p.value.data()[i];
      p.value.data()[i] = saved + h;
      const double lp = loss(false);
      p.value.data()[i] = saved - h;
      const double lm = loss(false);
      p.value.data()[i] = saved;

      const double num = (lp - lm) / (2.0 * h);
      const double ana = analytic[pi].data()[i];
      const double denom = std::max({std::abs(num), std::abs(ana), denom_floor});
      const double rel = std::abs(num - ana) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace piattnp::nn
