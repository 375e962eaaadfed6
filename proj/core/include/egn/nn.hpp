#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "egn/gradcheck.hpp"
#include "egn/rng.hpp"
#include "egn/tensor.hpp"

namespace egn {

// Ordered, named collection of trainable leaves. A tensor registered under
// two modules is stored once; aliases share storage.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor tensor);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }
  std::size_t parameter_count() const;
  void zero_grad();
  void clear_grad();

 private:
  std::vector<NamedTensor> entries_;
};

enum class Init { kUniformFanIn, kZero };

// y = x W + b with W stored [in, out]. `bias` may be undefined.
struct Linear {
  Tensor weight;
  Tensor bias;

  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias = true, Init init = Init::kUniformFanIn);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

LayerNorm make_layer_norm(ParameterStore& store, const std::string& name, std::size_t width);

/// Fills `t` uniformly in [-bound, bound].
void fill_uniform(Tensor& t, double bound, Rng& rng);
void fill_normal(Tensor& t, double stddev, Rng& rng);

}  // namespace egn
