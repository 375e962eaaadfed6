#include "egn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "egn/error.hpp"
#include "egn/rng.hpp"

namespace egn {

namespace {

struct Probe {
  double value;
  std::uint64_t kinks;
};

Probe evaluate(const std::function<Tensor()>& closure) {
  NoGradScope no_grad;
  KinkMonitor monitor;
  const Tensor loss = closure();
  if (loss.numel() != 1) throw ContractError("gradcheck closure must return a scalar");
  return {loss.item(), monitor.fingerprint()};
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " checked=" << checked << " skipped_kinks=" << skipped_kinks
     << " max_rel_error=" << max_rel_error << '\n';
  for (const auto& g : groups) {
    os << "  " << (g.passed ? "ok  " : "FAIL") << ' ' << g.name << " checked=" << g.checked
       << " max_abs=" << g.max_abs_error << " max_rel=" << g.max_rel_error << '\n';
  }
  return os.str();
}

GradcheckReport gradcheck(const std::function<Tensor()>& closure, std::vector<NamedTensor> params,
                          const GradcheckOptions& options) {
  const Probe first = evaluate(closure);
  const Probe second = evaluate(closure);
  if (!bit_equal(first.value, second.value)) {
    std::ostringstream os;
    os.precision(17);
    os << "closure is not deterministic: " << first.value << " vs " << second.value;
    throw DeterminismError(os.str());
  }

  // Analytic gradients.
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.clear_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = closure();
    tape.backward(loss);
  }

  // Coordinate selection.
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  std::vector<std::vector<std::size_t>> chosen(params.size());
  Rng rng(options.seed);
  if (options.max_coordinates == 0 || options.max_coordinates >= total) {
    for (std::size_t g = 0; g < params.size(); ++g) {
      chosen[g].resize(params[g].tensor.numel());
      for (std::size_t i = 0; i < chosen[g].size(); ++i) chosen[g][i] = i;
    }
  } else {
    // One guaranteed coordinate per group, the rest sampled uniformly.
    std::vector<std::pair<std::size_t, std::size_t>> pool;
    pool.reserve(total);
    for (std::size_t g = 0; g < params.size(); ++g) {
      const std::size_t n = params[g].tensor.numel();
      if (n == 0) continue;
      const std::size_t pick = rng.below(n);
      chosen[g].push_back(pick);
      for (std::size_t i = 0; i < n; ++i) {
        if (i != pick) pool.emplace_back(g, i);
      }
    }
    std::size_t already = 0;
    for (const auto& c : chosen) already += c.size();
    const std::size_t extra = options.max_coordinates > already ? options.max_coordinates - already : 0;
    for (std::size_t i = 0; i < extra && i < pool.size(); ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      chosen[pool[i].first].push_back(pool[i].second);
    }
    for (auto& c : chosen) std::sort(c.begin(), c.end());
  }

  GradcheckReport report;
  for (std::size_t g = 0; g < params.size(); ++g) {
    GroupReport group;
    group.name = params[g].name;
    Tensor& t = params[g].tensor;
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    for (std::size_t index : chosen[g]) {
      auto values = t.mutable_data();
      const double original = values[index];
      values[index] = original + options.step;
      const Probe plus = evaluate(closure);
      values[index] = original - options.step;
      const Probe minus = evaluate(closure);
      values[index] = original;
      if (plus.kinks != minus.kinks) {
        ++group.skipped_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.step);
      const double a = analytic[index];
      const double abs_err = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
      ++group.checked;
      group.max_abs_error = std::max(group.max_abs_error, abs_err);
      if (abs_err > options.atol + options.rtol * scale) {
        group.passed = false;
      }
      // Relative error is only meaningful above the absolute floor.
      if (scale > options.atol) group.max_rel_error = std::max(group.max_rel_error, rel_err);
    }
    report.checked += group.checked;
    report.skipped_kinks += group.skipped_kinks;
    report.max_rel_error = std::max(report.max_rel_error, group.max_rel_error);
    report.passed = report.passed && group.passed;
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace egn
