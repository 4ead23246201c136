#pragma once

// Central finite-difference gradient checking (test-only).

#include <cmath>
#include <functional>
#include <vector>

#include "dfbf/autodiff.hpp"
#include "dfbf/ops.hpp"

namespace dfbf::testing {

using ScalarFn = std::function<Var<double>(Tape<double>*, std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_error = 0;  // worst input, norm-wise ||analytic - numeric|| / max(||a||, ||n||)
  double max_abs_error = 0;
};

/// Compares the tape gradient of `fn` w.r.t. every input against central
/// differences with step h.
inline GradCheckResult gradcheck(const ScalarFn& fn, std::vector<Var<double>> inputs,
                                 double h = 1e-5) {
  for (auto& v : inputs) {
    v.set_requires_grad(true);
    v.clear_grad();
  }
  Tape<double> tape;
  Var<double> loss = fn(&tape, inputs);
  tape.backward(loss);

  GradCheckResult res;
  for (auto& v : inputs) {
    const Tensor<double> analytic = v.has_grad() ? v.grad() : Tensor<double>(v.shape());
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v.value()[i];
      v.value()[i] = orig + h;
      const double fp = fn(nullptr, inputs).value().item();
      v.value()[i] = orig - h;
      const double fm = fn(nullptr, inputs).value().item();
      v.value()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double d = analytic[i] - numeric;
      diff2 += d * d;
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      res.max_abs_error = std::max(res.max_abs_error, std::abs(d));
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
    const double rel = std::sqrt(diff2) < 1e-12 ? 0.0 : std::sqrt(diff2) / denom;
    res.max_rel_error = std::max(res.max_rel_error, rel);
  }
  return res;
}

/// sum(op(...) * weights): turns a tensor-valued op into a scalar that
/// exercises the whole Jacobian.
inline Var<double> project(Tape<double>* tape, const Var<double>& y, const Tensor<double>& weights) {
  return ops::sum(tape, ops::mul(tape, y, Var<double>(weights)));
}

}  // namespace dfbf::testing
