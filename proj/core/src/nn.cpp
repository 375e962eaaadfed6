#include "egn/nn.hpp"

#include <algorithm>
#include <cmath>

#include "egn/error.hpp"

namespace egn {

Tensor ParameterStore::add(const std::string& name, Tensor tensor) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  entries_.push_back({name, tensor});
  return tensor;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ContractError("unknown parameter: " + name);
}

Tensor& ParameterStore::get(const std::string& name) {
  for (auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ContractError("unknown parameter: " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.name == name; });
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterStore::clear_grad() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rank() == 1) {
    Tensor y = matmul(reshape(x, {1, x.dim(0)}), weight);
    if (bias.defined()) y = add(y, bias);
    return reshape(y, {weight.dim(1)});
  }
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
}

void fill_normal(Tensor& t, double stddev, Rng& rng) {
  for (double& v : t.mutable_data()) v = stddev * rng.normal();
}

Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias, Init init) {
  Linear layer;
  Tensor w = Tensor::zeros({in, out});
  Tensor b = with_bias ? Tensor::zeros({out}) : Tensor();
  if (init == Init::kUniformFanIn) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    fill_uniform(w, bound, rng);
    if (with_bias) fill_uniform(b, bound, rng);
  }
  layer.weight = store.add(name + ".weight", w);
  if (with_bias) layer.bias = store.add(name + ".bias", b);
  return layer;
}

LayerNorm make_layer_norm(ParameterStore& store, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor::full({width}, 1.0));
  ln.beta = store.add(name + ".beta", Tensor::zeros({width}));
  return ln;
}

}  // namespace egn
