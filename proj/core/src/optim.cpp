#include "egn/optim.hpp"

#include <cmath>
#include <numbers>

namespace egn {

AdamW::AdamW(std::vector<NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options), m_(params_.size()), v_(params_.size()) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].tensor.numel(), 0.0);
    v_[i].assign(params_[i].tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    const double decay = p.rank() >= 2 ? options_.lr * options_.weight_decay : 0.0;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      w[j] -= decay * w[j];
      w[j] -= options_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

double cosine_lr(double lr, std::size_t epoch, std::size_t epochs) {
  if (epochs <= 1) return lr;
  const double frac = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace egn
