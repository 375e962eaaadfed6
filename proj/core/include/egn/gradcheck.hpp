#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "egn/tensor.hpp"

namespace egn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradcheckOptions {
  double step = 1e-6;
  double rtol = 1e-4;
  double atol = 1e-6;
  // 0 checks every coordinate; otherwise a seeded sample of this size
  // (every group contributes at least one coordinate).
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GroupReport {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GroupReport> groups;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  bool passed = true;

  std::string summary() const;
};

// Compares reverse-mode gradients of `closure` against central finite
// differences. A coordinate passes when |analytic - numeric| <= atol + rtol *
// max(|analytic|, |numeric|). Coordinates whose +h/-h probes land on different
// sides of a relu/abs kink are skipped and counted. The closure is evaluated
// twice up front; differing results raise DeterminismError.
GradcheckReport gradcheck(const std::function<Tensor()>& closure, std::vector<NamedTensor> params,
                          const GradcheckOptions& options = {});

}  // namespace egn
