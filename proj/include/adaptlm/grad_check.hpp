#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "adaptlm/tensor.hpp"

namespace adaptlm {

// Central-finite-difference check of reverse-mode gradients.
//
// The objective is supplied as a builder that constructs the scalar loss on a
// given tape from the current parameter values; analytic gradients come from
// one backward pass and numeric ones from f(x +- step) re-evaluations with
// gradients off (and dropout off, since the tapes are created in eval mode).

struct GradCheckEntry {
  std::string param;
  Index element = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  GradCheckEntry worst;
  std::vector<std::string> failures;  // non-finite evaluations, with location
  long long checked = 0;

  bool ok(double tolerance) const { return failures.empty() && max_rel_error < tolerance; }
};

namespace detail {
inline double rel_err(double a, double n) {
  double denom = std::max({std::abs(a), std::abs(n), 1.0});
  return std::abs(a - n) / denom;
}
}  // namespace detail

// max_per_param == 0 checks every element; otherwise a deterministic sample.
template <class S>
GradCheckReport grad_check(const std::function<Var<S>(Tape<S>&)>& build_loss,
                           std::span<const ParamPtr<S>> params, S step,
                           long long max_per_param = 0, std::uint64_t seed = 0) {
  GradCheckReport report;

  zero_grads(params);
  {
    Tape<S> tape(/*record_grad=*/true, /*training=*/false);
    Var<S> loss = build_loss(tape);
    if (!std::isfinite(static_cast<double>(tape.scalar(loss)))) {
      report.failures.push_back("objective non-finite at the evaluation point");
      return report;
    }
    tape.backward(loss);
  }

  auto eval = [&]() -> S {
    Tape<S> tape(/*record_grad=*/false, /*training=*/false);
    return tape.scalar(build_loss(tape));
  };

  Rng rng(seed);
  for (const auto& p : params) {
    if (!p->requires_grad) continue;
    std::vector<Index> elems;
    if (max_per_param <= 0 || p->size() <= max_per_param) {
      elems.resize(static_cast<std::size_t>(p->size()));
      for (Index i = 0; i < p->size(); ++i) elems[static_cast<std::size_t>(i)] = i;
    } else {
      for (long long i = 0; i < max_per_param; ++i)
        elems.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(p->size()))));
    }
    for (Index e : elems) {
      S* data = p->value.data();
      const S saved = data[e];
      data[e] = saved + step;
      double fp = static_cast<double>(eval());
      data[e] = saved - step;
      double fm = static_cast<double>(eval());
      data[e] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.failures.push_back(p->name + "[" + std::to_string(e) + "]: non-finite perturbation");
        continue;
      }
      double numeric = (fp - fm) / (2.0 * static_cast<double>(step));
      double analytic = p->grad.size() ? static_cast<double>(p->grad.data()[e]) : 0.0;
      double rel = detail::rel_err(analytic, numeric);
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {p->name, e, analytic, numeric, rel};
      }
    }
  }
  return report;
}

}  // namespace adaptlm
