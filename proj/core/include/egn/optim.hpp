#pragma once

#include <cstddef>
#include <vector>

#include "egn/gradcheck.hpp"

namespace egn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled decay, applied only to parameters of rank >= 2.
  double weight_decay = 0.0;
};

// Adaptive-moment optimizer with decoupled weight decay. Parameters without a
// gradient after backward are left untouched (their moments do not advance).
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamOptions options);

  void step();
  void zero_grad();
  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<NamedTensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// lr * 0.5 * (1 + cos(pi * epoch / (epochs - 1))); equals lr at epoch 0 and 0
/// at the final epoch. A single-epoch schedule stays at lr.
double cosine_lr(double lr, std::size_t epoch, std::size_t epochs);

}  // namespace egn
