#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "afseg/tape.hpp"

namespace afseg {

struct GradCheckReport {
  double max_relative_error = 0;
  std::vector<double> per_param;  // one entry per parameter tensor
};

/// Compares tape gradients against central finite differences.
///
/// `loss_fn(tape, params)` must build a scalar loss from the given parameter
/// leaves; it is re-run once per perturbed element. The error of one parameter
/// tensor is max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8),
/// and the report's headline is the maximum over tensors.
template <typename LossFn>
GradCheckReport grad_check(std::vector<TensorD> params, LossFn&& loss_fn, double h = 1e-5) {
  auto evaluate = [&](bool trainable, Gradients<double>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(p, trainable));
    Var<double> loss = loss_fn(tape, vars);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericalError("grad_check: non-finite loss");
    if (grads) {
      *grads = tape.backward(loss);
      for (const auto& v : vars)
        if (grads->contains(v) && !(*grads)[v].all_finite()) throw NumericalError("grad_check: non-finite gradient");
    }
    return std::make_pair(value, vars);
  };

  Gradients<double> grads;
  auto [base, vars] = evaluate(true, &grads);
  (void)base;

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const TensorD analytic = grads.contains(vars[k]) ? grads[vars[k]] : TensorD(params[k].shape());
    TensorD numeric(params[k].shape());
    for (Index i = 0; i < params[k].size(); ++i) {
      const double saved = params[k][i];
      params[k][i] = saved + h;
      const double up = evaluate(false, nullptr).first;
      params[k][i] = saved - h;
      const double down = evaluate(false, nullptr).first;
      params[k][i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    const double scale = std::max({analytic.array().abs().maxCoeff(), numeric.array().abs().maxCoeff(), 1e-8});
    const double err = (analytic.array() - numeric.array()).abs().maxCoeff() / scale;
    report.per_param.push_back(err);
    report.max_relative_error = std::max(report.max_relative_error, err);
  }
  return report;
}

}  // namespace afseg
