#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cares/tape.hpp"

namespace cares::ad {

template <typename Real>
struct GradCheckReport {
  struct Entry {
    std::string name;
    Real max_rel_err = 0;
    long worst_index = -1;
  };
  std::vector<Entry> entries;

  Real worst() const {
    Real w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_err);
    return w;
  }
  bool all_below(Real tol) const { return worst() < tol; }
};

// Central-difference check of the analytic gradient. `f` builds a scalar
// loss on the given tape, registering the parameter tensors it reads via
// tape.param(). Run in 64-bit mode only; float step sizes drown in noise.
template <typename Real>
GradCheckReport<Real> grad_check(
    const std::function<Var<Real>(Tape<Real>&)>& f,
    const std::vector<std::pair<std::string, Tensor<Real>*>>& params, Real h,
    Real /*tolerance: recorded by callers, not enforced here*/ = Real(0)) {
  GradCheckReport<Real> report;

  Tape<Real> tape;
  Var<Real> loss = f(tape);
  tape.backward(loss);

  auto eval = [&f]() -> Real {
    Tape<Real> t;
    return t.value(f(t)).at(0, 0);
  };

  for (const auto& [name, tensor] : params) {
    const Tensor<Real>* analytic = tape.grad_of(*tensor);
    typename GradCheckReport<Real>::Entry entry;
    entry.name = name;
    for (long i = 0; i < tensor->size(); ++i) {
      const size_t s = static_cast<size_t>(i);
      const Real saved = tensor->data[s];
      tensor->data[s] = saved + h;
      const Real up = eval();
      tensor->data[s] = saved - h;
      const Real down = eval();
      tensor->data[s] = saved;
      const Real numeric = (up - down) / (2 * h);
      const Real exact = analytic ? analytic->data[s] : Real(0);
      const Real denom =
          std::max({std::abs(numeric), std::abs(exact), Real(1e-8)});
      const Real rel = std::abs(numeric - exact) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cares::ad
