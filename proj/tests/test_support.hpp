#pragma once

// Test-only oracles. Nothing here calls into egn::gradcheck so the checks
// stay independent of the harness under test.

#include <cmath>
#include <functional>
#include <vector>

#include "egn/rng.hpp"
#include "egn/tensor.hpp"

namespace egn::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded in [-2,2] but at least `margin` away from zero (relu/abs kinks).
inline Tensor random_off_kink(Shape shape, Rng& rng, double margin = 1e-3) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    do {
      x = rng.uniform(-2.0, 2.0);
    } while (std::abs(x) < margin);
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Central differences of a scalar closure with respect to every entry of `t`.
inline std::vector<double> central_differences(const std::function<double()>& f, Tensor& t, double step = 1e-6) {
  std::vector<double> out(t.numel());
  auto values = t.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double plus = f();
    values[i] = saved - step;
    const double minus = f();
    values[i] = saved;
    out[i] = (plus - minus) / (2.0 * step);
  }
  return out;
}

// Runs `build` under a fresh tape and returns d(output)/d(param) for each param.
inline std::vector<std::vector<double>> reverse_gradients(const std::function<Tensor()>& build,
                                                          std::vector<Tensor> params) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = build();
    backward(loss);
  }
  std::vector<std::vector<double>> grads;
  for (const auto& p : params) {
    grads.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                    : std::vector<double>(p.numel(), 0.0));
  }
  return grads;
}

inline double eval_no_grad(const std::function<Tensor()>& build) {
  NoGradScope ng;
  return build().item();
}

inline bool close(double a, double b, double rtol, double atol) {
  return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Weighted sum with fixed pseudo-random weights so every output entry matters.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(t.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return sum_all(mul(t, Tensor::from(t.shape(), std::move(w))));
}

}  // namespace egn::testing
