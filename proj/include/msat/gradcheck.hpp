#ifndef MSAT_GRADCHECK_HPP
#define MSAT_GRADCHECK_HPP

#include "msat/autodiff.hpp"
#include "msat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

namespace msat {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t samples = 0;
};

/// Builds a scalar loss on a fresh tape whose parameters are already registered.
template <typename Scalar>
using ForwardFn = std::function<Var<Scalar>(Tape<Scalar>&, const VarMap<Scalar>&)>;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares `analytic` gradients against central differences
/// (f(p+h) - f(p-h)) / 2h of `forward` at `sample_count` coordinates.
/// Parameters are visited round-robin in name order so every tensor is probed;
/// the coordinate within a tensor is drawn from a counter-based generator keyed
/// by `seed`. GradScalar may be narrower than Scalar, which lets 32-bit tape
/// gradients be judged against differences taken in 64-bit.
template <typename Scalar, typename GradScalar>
GradCheckReport compare_with_finite_differences(const Gradients<GradScalar>& analytic,
                                                const ForwardFn<Scalar>& forward,
                                                const ParamMap<Scalar>& params, Scalar epsilon,
                                                std::size_t sample_count, std::uint64_t seed = 0) {
  auto evaluate = [&](const ParamMap<Scalar>& p) {
    Tape<Scalar> tape;
    auto vars = register_parameters(tape, p);
    return static_cast<double>(forward(tape, vars).value()[0]);
  };

  GradCheckReport report;
  if (params.empty()) return report;
  CounterRng rng(seed);
  ParamMap<Scalar> probe = params;
  auto it = params.begin();
  for (std::size_t s = 0; s < sample_count; ++s, ++it) {
    if (it == params.end()) it = params.begin();
    const std::string& name = it->first;
    const Index coord = rng.uniform_int(0, it->second.size() - 1);
    Scalar& slot = probe.at(name)[coord];
    const Scalar original = slot;
    slot = original + epsilon;
    const double up = evaluate(probe);
    slot = original - epsilon;
    const double down = evaluate(probe);
    slot = original;

    const double numeric = (up - down) / (2.0 * static_cast<double>(epsilon));
    const double grad = static_cast<double>(analytic.at(name)[coord]);
    const double err = relative_error(grad, numeric);
    if (err > report.max_rel_err || report.worst_index < 0) {
      report.max_rel_err = err;
      report.worst_param = name;
      report.worst_index = coord;
      report.worst_analytic = grad;
      report.worst_numeric = numeric;
    }
    ++report.samples;
  }
  return report;
}

/// Tape gradients of `forward` at `params` versus central differences of the
/// same function in the same precision.
template <typename Scalar>
GradCheckReport finite_diff_check(const ForwardFn<Scalar>& forward, const ParamMap<Scalar>& params,
                                  Scalar epsilon, std::size_t sample_count,
                                  std::uint64_t seed = 0) {
  Tape<Scalar> tape;
  auto vars = register_parameters(tape, params);
  const auto grads = tape.backward(forward(tape, vars));
  return compare_with_finite_differences<Scalar, Scalar>(grads, forward, params, epsilon, sample_count,
                                                         seed);
}

}  // namespace msat

#endif  // MSAT_GRADCHECK_HPP
