#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "ldeprompt/random.hpp"
#include "ldeprompt/tensor.hpp"

namespace ldep::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = true) {
  Tensor<double> t(std::move(shape), requires_grad);
  fill_normal(t.value(), stddev, rng);
  return t;
}

using TapeFn = std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>;

// Central finite differences against the tape gradient of sum(f(inputs) * R)
// for a fixed random R. Passes when |analytic - numeric| <= rtol * max(|a|, |n|) + atol.
inline ::testing::AssertionResult gradcheck(std::vector<Tensor<double>> inputs, const TapeFn& f,
                                            std::uint64_t seed = 7, double rtol = 1e-3, double atol = 1e-7,
                                            double eps = 1e-6) {
  for (auto& t : inputs) t.clear_grad();
  Tensor<double> projection;
  {
    Tape<double> tape;
    auto out = f(tape, inputs);
    Rng rng(seed);
    projection = random_tensor(out.shape(), rng, 1.0, false);
    auto loss = sum(tape, mul(tape, out, projection));
    tape.backward(loss);
  }
  const auto objective = [&]() {
    Tape<double> tape;
    const auto out = f(tape, inputs);
    return (out.value().array() * projection.value().array()).sum();
  };
  std::ostringstream failures;
  int bad = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const Vector<double> analytic =
        inputs[i].has_grad() ? inputs[i].grad() : Vector<double>::Zero(inputs[i].size());
    for (Index j = 0; j < inputs[i].size(); ++j) {
      double& v = inputs[i].value()(j);
      const double saved = v;
      v = saved + eps;
      const double plus = objective();
      v = saved - eps;
      const double minus = objective();
      v = saved;
      const double numeric = (plus - minus) / (2 * eps);
      const double a = analytic(j);
      if (std::abs(a - numeric) > rtol * std::max(std::abs(a), std::abs(numeric)) + atol) {
        if (++bad <= 5) failures << "input " << i << "[" << j << "]: analytic " << a << " numeric " << numeric << "\n";
      }
    }
  }
  if (bad == 0) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << bad << " mismatched components\n" << failures.str();
}

}  // namespace ldep::testing
