#include "egn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "egn/error.hpp"

namespace egn {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

double* TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

}  // namespace detail

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_) throw ContractError("use of undefined tensor");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_ && impl_->leaf; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {

thread_local Tape* g_active_tape = nullptr;

struct KinkState {
  int depth = 0;
  std::uint64_t hash = 0xcbf29ce484222325ULL;
};
thread_local KinkState g_kink;

void kink_observe(std::span<const double> values) {
  if (g_kink.depth == 0) return;
  std::uint64_t h = g_kink.hash;
  for (double v : values) {
    h ^= v > 0.0 ? 0x9dULL : (v < 0.0 ? 0x3bULL : 0x51ULL);
    h *= 0x100000001b3ULL;
  }
  g_kink.hash = h;
}

}  // namespace

void Tape::record(ImplPtr output, std::vector<ImplPtr> inputs, AdjointFn adjoint) {
  entries_.push_back(Entry{std::move(output), std::move(inputs), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    entries_.clear();
    return;
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->adjoint();
  }
  for (auto& entry : entries_) {
    if (!entry.output->leaf) entry.output->grad.clear();
  }
  entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw ContractError("backward called without an active tape");
  g_active_tape->backward(loss);
}

KinkMonitor::KinkMonitor() {
  if (g_kink.depth++ == 0) reset();
}
KinkMonitor::~KinkMonitor() { --g_kink.depth; }
void KinkMonitor::reset() { g_kink.hash = 0xcbf29ce484222325ULL; }
std::uint64_t KinkMonitor::fingerprint() const { return g_kink.hash; }

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

namespace {

// Creates the result tensor; if recording is needed returns the tape to use.
struct Result {
  Tensor tensor;
  Tape* tape = nullptr;
};

Result make_result(Shape shape, std::initializer_list<const Tensor*> inputs) {
  Result r;
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->leaf = false;
  if (g_active_tape != nullptr) {
    for (const Tensor* in : inputs) {
      if (in->requires_grad()) {
        impl->requires_grad = true;
        r.tape = g_active_tape;
        break;
      }
    }
  }
  r.tensor = Tensor(std::move(impl));
  return r;
}

bool wants_grad(const ImplPtr& p) { return p->requires_grad; }

void require(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// View of an axis as [outer, n, inner].
struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

void check_axis(const Tensor& a, std::size_t axis, const char* op) {
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_string(a.shape()));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// C[m x n] (+)= A[m x k] * B[k x n], row by row in fixed order.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k x n] += A^T * G with A[m x k], G[m x n].
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* g, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

void transpose_into(std::size_t rows, std::size_t cols, const double* src, std::vector<double>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

// C[m x n] += A[m x k] * B^T with B[n x k].
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  thread_local std::vector<double> bt;
  transpose_into(n, k, b, bt);
  gemm_nn(m, n, k, a, bt.data(), c);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool a_big = sa.size() >= sb.size();
  const Shape& big = a_big ? sa : sb;
  const Shape& small = a_big ? sb : sa;
  if (!is_suffix(small, big)) {
    throw DimensionError("elementwise: shapes " + shape_string(sa) + " and " + shape_string(sb) +
                         " are not broadcastable");
  }
  auto r = make_result(big, {&a, &b});
  const std::size_t total = shape_numel(big);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* out = r.tensor.mutable_data().data();
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  for (std::size_t i = 0; i < total; ++i) {
    const double x = pa[na == total ? i : i % na];
    const double y = pb[nb == total ? i : i % nb];
    switch (op) {
      case BinaryOp::kAdd: out[i] = x + y; break;
      case BinaryOp::kSub: out[i] = x - y; break;
      case BinaryOp::kMul: out[i] = x * y; break;
      case BinaryOp::kDiv: out[i] = x / y; break;
    }
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai, bi}, [op, ai, bi, oi, total]() {
      const double* g = oi->grad.data();
      const std::size_t na = ai->data.size();
      const std::size_t nb = bi->data.size();
      double* ga = wants_grad(ai) ? ai->grad_buffer() : nullptr;
      double* gb = wants_grad(bi) ? bi->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < total; ++i) {
        const std::size_t ia = na == total ? i : i % na;
        const std::size_t ib = nb == total ? i : i % nb;
        const double x = ai->data[ia];
        const double y = bi->data[ib];
        switch (op) {
          case BinaryOp::kAdd:
            if (ga) ga[ia] += g[i];
            if (gb) gb[ib] += g[i];
            break;
          case BinaryOp::kSub:
            if (ga) ga[ia] += g[i];
            if (gb) gb[ib] -= g[i];
            break;
          case BinaryOp::kMul:
            if (ga) ga[ia] += g[i] * y;
            if (gb) gb[ib] += g[i] * x;
            break;
          case BinaryOp::kDiv:
            if (ga) ga[ia] += g[i] / y;
            if (gb) gb[ib] -= g[i] * x / (y * y);
            break;
        }
      }
    });
  }
  return r.tensor;
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  auto r = make_result(a.shape(), {&a});
  const auto in = a.data();
  auto out = r.tensor.mutable_data();
  if (op == UnaryOp::kRelu || op == UnaryOp::kAbs) kink_observe(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    switch (op) {
      case UnaryOp::kRelu: out[i] = x > 0.0 ? x : 0.0; break;
      case UnaryOp::kSigmoid: out[i] = stable_sigmoid(x); break;
      case UnaryOp::kSoftplus: out[i] = stable_softplus(x); break;
      case UnaryOp::kLog: out[i] = std::log(x); break;
      case UnaryOp::kAbs: out[i] = std::abs(x); break;
      case UnaryOp::kExp: out[i] = std::exp(x); break;
      case UnaryOp::kSqrt: out[i] = std::sqrt(x); break;
      case UnaryOp::kSquare: out[i] = x * x; break;
      case UnaryOp::kNeg: out[i] = -x; break;
      case UnaryOp::kTanh: out[i] = std::tanh(x); break;
    }
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [op, ai, oi]() {
      const double* g = oi->grad.data();
      const double* x = ai->data.data();
      const double* y = oi->data.data();
      double* ga = ai->grad_buffer();
      const std::size_t n = ai->data.size();
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        switch (op) {
          case UnaryOp::kRelu: d = x[i] > 0.0 ? 1.0 : 0.0; break;  // subgradient 0 at 0
          case UnaryOp::kSigmoid: d = y[i] * (1.0 - y[i]); break;
          case UnaryOp::kSoftplus: d = stable_sigmoid(x[i]); break;
          case UnaryOp::kLog: d = 1.0 / x[i]; break;
          case UnaryOp::kAbs: d = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0); break;
          case UnaryOp::kExp: d = y[i]; break;
          case UnaryOp::kSqrt: d = 0.5 / y[i]; break;
          case UnaryOp::kSquare: d = 2.0 * x[i]; break;
          case UnaryOp::kNeg: d = -1.0; break;
          case UnaryOp::kTanh: d = 1.0 - y[i] * y[i]; break;
        }
        ga[i] += g[i] * d;
      }
    });
  }
  return r.tensor;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::kDiv, a, b); }
Tensor relu(const Tensor& a) { return elementwise(UnaryOp::kRelu, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(UnaryOp::kSigmoid, a); }
Tensor softplus(const Tensor& a) { return elementwise(UnaryOp::kSoftplus, a); }
Tensor log(const Tensor& a) { return elementwise(UnaryOp::kLog, a); }
Tensor abs(const Tensor& a) { return elementwise(UnaryOp::kAbs, a); }
Tensor exp(const Tensor& a) { return elementwise(UnaryOp::kExp, a); }
Tensor sqrt(const Tensor& a) { return elementwise(UnaryOp::kSqrt, a); }
Tensor square(const Tensor& a) { return elementwise(UnaryOp::kSquare, a); }
Tensor neg(const Tensor& a) { return elementwise(UnaryOp::kNeg, a); }
Tensor tanh(const Tensor& a) { return elementwise(UnaryOp::kTanh, a); }

Tensor scale(const Tensor& a, double factor) {
  auto r = make_result(a.shape(), {&a});
  const auto in = a.data();
  auto out = r.tensor.mutable_data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi, factor]() {
      double* ga = ai->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * factor;
    });
  }
  return r.tensor;
}

Tensor add_scalar(const Tensor& a, double value) {
  auto r = make_result(a.shape(), {&a});
  const auto in = a.data();
  auto out = r.tensor.mutable_data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + value;
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi]() {
      double* ga = ai->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return r.tensor;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& a, std::size_t axis, Summation summation) {
  check_axis(a, axis, "reduce");
  const AxisView v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto r = make_result(out_shape, {&a});
  const double* in = a.data().data();
  double* out = r.tensor.mutable_data().data();
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::kMax) argmax.assign(v.outer * v.inner, 0);
  std::vector<double> scratch(v.n);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const double* base = in + o * v.n * v.inner + i;
      double acc = 0.0;
      if (op == ReduceOp::kMax) {
        std::size_t best = 0;
        acc = base[0];
        for (std::size_t j = 1; j < v.n; ++j) {
          if (base[j * v.inner] > acc) {
            acc = base[j * v.inner];
            best = j;
          }
        }
        argmax[o * v.inner + i] = best;
      } else if (summation == Summation::kSorted) {
        for (std::size_t j = 0; j < v.n; ++j) scratch[j] = base[j * v.inner];
        std::sort(scratch.begin(), scratch.end());
        for (double s : scratch) acc += s;
      } else {
        for (std::size_t j = 0; j < v.n; ++j) acc += base[j * v.inner];
      }
      if (op == ReduceOp::kMean) acc /= static_cast<double>(v.n);
      out[o * v.inner + i] = acc;
    }
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [op, ai, oi, v, argmax = std::move(argmax)]() {
      double* ga = ai->grad_buffer();
      const double* g = oi->grad.data();
      const double factor = op == ReduceOp::kMean ? 1.0 / static_cast<double>(v.n) : 1.0;
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const double gv = g[o * v.inner + i];
          double* base = ga + o * v.n * v.inner + i;
          if (op == ReduceOp::kMax) {
            base[argmax[o * v.inner + i] * v.inner] += gv;
          } else {
            for (std::size_t j = 0; j < v.n; ++j) base[j * v.inner] += gv * factor;
          }
        }
      }
    });
  }
  return r.tensor;
}

Tensor sum(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::kSum, a, axis); }
Tensor mean(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::kMean, a, axis); }
Tensor max(const Tensor& a, std::size_t axis) { return reduce(ReduceOp::kMax, a, axis); }

Tensor sum_all(const Tensor& a) { return reduce(ReduceOp::kSum, reshape(a, {a.numel()}), 0); }
Tensor mean_all(const Tensor& a) { return reduce(ReduceOp::kMean, reshape(a, {a.numel()}), 0); }

Tensor softmax(const Tensor& a, std::size_t axis) {
  check_axis(a, axis, "softmax");
  const AxisView v = axis_view(a.shape(), axis);
  auto r = make_result(a.shape(), {&a});
  const double* in = a.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double peak = in[base];
      for (std::size_t j = 1; j < v.n; ++j) peak = std::max(peak, in[base + j * v.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(in[base + j * v.inner] - peak);
        out[base + j * v.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) out[base + j * v.inner] /= total;
    }
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi, v]() {
      double* ga = ai->grad_buffer();
      const double* g = oi->grad.data();
      const double* y = oi->data.data();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.n * v.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < v.n; ++j) dot += g[base + j * v.inner] * y[base + j * v.inner];
          for (std::size_t j = 0; j < v.n; ++j) {
            const std::size_t idx = base + j * v.inner;
            ga[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return r.tensor;
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto r = make_result({m, n}, {&a, &b});
  gemm_nn(m, n, k, a.data().data(), b.data().data(), r.tensor.mutable_data().data());
  if (r.tape) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai, bi}, [ai, bi, oi, m, n, k]() {
      const double* g = oi->grad.data();
      if (wants_grad(ai)) gemm_nt(m, k, n, g, bi->data.data(), ai->grad_buffer());
      if (wants_grad(bi)) gemm_tn(m, n, k, ai->data.data(), g, bi->grad_buffer());
    });
  }
  return r.tensor;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  (transpose_b ? a.dim(2) == b.dim(2) : a.dim(2) == b.dim(1));
  require(ok, "bmm: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  auto r = make_result({batch, m, n}, {&a, &b});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    if (transpose_b) {
      gemm_nt(m, n, k, pa + s * m * k, pb + s * n * k, out + s * m * n);
    } else {
      gemm_nn(m, n, k, pa + s * m * k, pb + s * k * n, out + s * m * n);
    }
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai, bi}, [ai, bi, oi, batch, m, n, k, transpose_b]() {
      const double* g = oi->grad.data();
      double* ga = wants_grad(ai) ? ai->grad_buffer() : nullptr;
      double* gb = wants_grad(bi) ? bi->grad_buffer() : nullptr;
      for (std::size_t s = 0; s < batch; ++s) {
        const double* gs = g + s * m * n;
        const double* as = ai->data.data() + s * m * k;
        const double* bs = bi->data.data() + s * n * k;
        if (transpose_b) {
          // out = A B^T: dA = G B, dB = G^T A
          if (ga) gemm_nn(m, k, n, gs, bs, ga + s * m * k);
          if (gb) gemm_tn(m, k, n, gs, as, gb + s * n * k);
        } else {
          if (ga) gemm_nt(m, k, n, gs, bs, ga + s * m * k);
          if (gb) gemm_tn(m, n, k, as, gs, gb + s * k * n);
        }
      }
    });
  }
  return r.tensor;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shapes " + shape_string(first) + " and " + shape_string(s) +
                           " differ off the concatenation axis");
    }
    out_shape[axis] += s[axis];
  }
  Result r;
  {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(out_shape), 0.0);
    impl->shape = out_shape;
    impl->leaf = false;
    if (g_active_tape) {
      for (const Tensor& p : parts) {
        if (p.requires_grad()) {
          impl->requires_grad = true;
          r.tape = g_active_tape;
        }
      }
    }
    r.tensor = Tensor(std::move(impl));
  }
  const AxisView ov = axis_view(out_shape, axis);
  double* out = r.tensor.mutable_data().data();
  std::size_t offset = 0;
  std::vector<ImplPtr> inputs;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    const std::size_t n = p.dim(axis);
    const double* in = p.data().data();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(in + o * n * ov.inner, n * ov.inner, out + (o * ov.n + offset) * ov.inner);
    }
    inputs.push_back(p.impl());
    offsets.push_back(offset);
    offset += n;
  }
  if (r.tape) {
    ImplPtr oi = r.tensor.impl();
    r.tape->record(oi, inputs, [inputs, offsets, oi, ov, axis]() {
      const double* g = oi->grad.data();
      for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
        const ImplPtr& p = inputs[idx];
        if (!wants_grad(p)) continue;
        const std::size_t n = p->shape[axis];
        double* gp = p->grad_buffer();
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const double* src = g + (o * ov.n + offsets[idx]) * ov.inner;
          double* dst = gp + o * n * ov.inner;
          for (std::size_t t = 0; t < n * ov.inner; ++t) dst[t] += src[t];
        }
      }
    });
  }
  return r.tensor;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Tensor parts[] = {a, b};
  return concat(std::span<const Tensor>(parts), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(a, axis, "slice");
  if (start + length > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds axis of size " + std::to_string(a.dim(axis)));
  }
  const AxisView v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  auto r = make_result(out_shape, {&a});
  const double* in = a.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(in + (o * v.n + start) * v.inner, length * v.inner, out + o * length * v.inner);
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi, v, start, length]() {
      double* ga = ai->grad_buffer();
      const double* g = oi->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o) {
        double* dst = ga + (o * v.n + start) * v.inner;
        const double* src = g + o * length * v.inner;
        for (std::size_t t = 0; t < length * v.inner; ++t) dst[t] += src[t];
      }
    });
  }
  return r.tensor;
}

std::vector<Tensor> split(const Tensor& a, std::size_t axis, std::size_t parts) {
  check_axis(a, axis, "split");
  if (parts == 0 || a.dim(axis) % parts != 0) {
    throw DimensionError("split: axis of size " + std::to_string(a.dim(axis)) + " in shape " +
                         shape_string(a.shape()) + " cannot be split into " + std::to_string(parts) +
                         " equal parts");
  }
  const std::size_t len = a.dim(axis) / parts;
  std::vector<Tensor> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) out.push_back(slice(a, axis, p * len, len));
  return out;
}

std::pair<Tensor, Tensor> chunk(const Tensor& a, std::size_t axis) {
  auto halves = split(a, axis, 2);
  return {std::move(halves[0]), std::move(halves[1])};
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  auto r = make_result(std::move(shape), {&a});
  std::copy(a.data().begin(), a.data().end(), r.tensor.mutable_data().begin());
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi]() {
      double* ga = ai->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return r.tensor;
}

Tensor permute(const Tensor& a, std::span<const std::size_t> order) {
  const Shape& s = a.shape();
  const std::size_t rank = s.size();
  std::vector<bool> seen(rank, false);
  bool ok = order.size() == rank;
  for (std::size_t i = 0; ok && i < rank; ++i) {
    ok = order[i] < rank && !seen[order[i]];
    if (ok) seen[order[i]] = true;
  }
  if (!ok) throw DimensionError("permute: invalid axis order for shape " + shape_string(s));

  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[order[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  // Stride of each output axis within the input buffer.
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) strides[i] = in_strides[order[i]];

  auto r = make_result(out_shape, {&a});
  const std::size_t total = a.numel();
  std::vector<std::size_t> src_index(total);
  {
    std::vector<std::size_t> counter(rank, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
      src_index[flat] = src;
      for (std::size_t ax = rank; ax-- > 0;) {
        ++counter[ax];
        src += strides[ax];
        if (counter[ax] < out_shape[ax]) break;
        src -= strides[ax] * counter[ax];
        counter[ax] = 0;
      }
    }
  }
  const double* in = a.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t i = 0; i < total; ++i) out[i] = in[src_index[i]];
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi, src_index = std::move(src_index)]() {
      double* ga = ai->grad_buffer();
      const double* g = oi->grad.data();
      for (std::size_t i = 0; i < src_index.size(); ++i) ga[src_index[i]] += g[i];
    });
  }
  return r.tensor;
}

Tensor permute(const Tensor& a, std::initializer_list<std::size_t> order) {
  return permute(a, std::span<const std::size_t>(order.begin(), order.size()));
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: expected rank 2, got " + shape_string(a.shape()));
  return permute(a, {1, 0});
}

// ---------------------------------------------------------------------------
// Fused layers
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() >= 1, "layer_norm: rank-0 input");
  const std::size_t width = x.shape().back();
  require(gamma.shape() == Shape{width} && beta.shape() == Shape{width},
          "layer_norm: affine parameters must have shape [" + std::to_string(width) + "]");
  const std::size_t rows = x.numel() / width;
  auto r = make_result(x.shape(), {&x, &gamma, &beta});
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* in = x.data().data();
  const double* gm = gamma.data().data();
  const double* bt = beta.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t row = 0; row < rows; ++row) {
    const double* xr = in + row * width;
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += xr[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[row] = is;
    for (std::size_t c = 0; c < width; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[row * width + c] = h;
      out[row * width + c] = h * gm[c] + bt[c];
    }
  }
  if (r.tape) {
    ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {xi, gi, bi},
                   [xi, gi, bi, oi, rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
                     const double* g = oi->grad.data();
                     double* gx = wants_grad(xi) ? xi->grad_buffer() : nullptr;
                     double* gg = wants_grad(gi) ? gi->grad_buffer() : nullptr;
                     double* gb = wants_grad(bi) ? bi->grad_buffer() : nullptr;
                     const double* gm = gi->data.data();
                     std::vector<double> dxhat(width);
                     for (std::size_t row = 0; row < rows; ++row) {
                       const double* gr = g + row * width;
                       const double* hr = xhat.data() + row * width;
                       double mean_d = 0.0, mean_dh = 0.0;
                       for (std::size_t c = 0; c < width; ++c) {
                         if (gg) gg[c] += gr[c] * hr[c];
                         if (gb) gb[c] += gr[c];
                         dxhat[c] = gr[c] * gm[c];
                         mean_d += dxhat[c];
                         mean_dh += dxhat[c] * hr[c];
                       }
                       if (!gx) continue;
                       mean_d /= static_cast<double>(width);
                       mean_dh /= static_cast<double>(width);
                       for (std::size_t c = 0; c < width; ++c) {
                         gx[row * width + c] += inv_std[row] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                       }
                     }
                   });
  }
  return r.tensor;
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  require(a.rank() >= 1, "scale_rows: rank-0 input");
  Shape expected(a.shape().begin(), a.shape().end() - 1);
  require(s.shape() == expected, "scale_rows: scale shape " + shape_string(s.shape()) +
                                     " does not match leading shape of " + shape_string(a.shape()));
  const std::size_t width = a.shape().back();
  const std::size_t rows = s.numel();
  auto r = make_result(a.shape(), {&a, &s});
  const double* pa = a.data().data();
  const double* ps = s.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t row = 0; row < rows; ++row) {
    for (std::size_t c = 0; c < width; ++c) out[row * width + c] = pa[row * width + c] * ps[row];
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), si = s.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai, si}, [ai, si, oi, rows, width]() {
      const double* g = oi->grad.data();
      double* ga = wants_grad(ai) ? ai->grad_buffer() : nullptr;
      double* gs = wants_grad(si) ? si->grad_buffer() : nullptr;
      for (std::size_t row = 0; row < rows; ++row) {
        double acc = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
          const std::size_t idx = row * width + c;
          if (ga) ga[idx] += g[idx] * si->data[row];
          acc += g[idx] * ai->data[idx];
        }
        if (gs) gs[row] += acc;
      }
    });
  }
  return r.tensor;
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  require(a.rank() >= 1 && times >= 1, "repeat_rows: invalid arguments for " + shape_string(a.shape()));
  Shape out_shape = a.shape();
  const std::size_t rows = out_shape[0];
  out_shape[0] *= times;
  const std::size_t width = rows == 0 ? 0 : a.numel() / rows;
  auto r = make_result(out_shape, {&a});
  const double* in = a.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t row = 0; row < rows; ++row) {
    for (std::size_t t = 0; t < times; ++t) std::copy_n(in + row * width, width, out + (row * times + t) * width);
  }
  if (r.tape) {
    ImplPtr ai = a.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {ai}, [ai, oi, rows, width, times]() {
      double* ga = ai->grad_buffer();
      const double* g = oi->grad.data();
      for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t t = 0; t < times; ++t) {
          const double* src = g + (row * times + t) * width;
          for (std::size_t c = 0; c < width; ++c) ga[row * width + c] += src[c];
        }
      }
    });
  }
  return r.tensor;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale_t, const Tensor& shift) {
  require(x.rank() == 3 && scale_t.rank() == 2 && shift.shape() == scale_t.shape() &&
              scale_t.dim(0) == x.dim(0) && scale_t.dim(1) == x.dim(2),
          "channel_affine: shapes " + shape_string(x.shape()) + ", " + shape_string(scale_t.shape()) + ", " +
              shape_string(shift.shape()) + " are incompatible");
  const std::size_t batch = x.dim(0), spatial = x.dim(1), channels = x.dim(2);
  auto r = make_result(x.shape(), {&x, &scale_t, &shift});
  const double* px = x.data().data();
  const double* ps = scale_t.data().data();
  const double* pt = shift.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < spatial; ++s) {
      const std::size_t base = (b * spatial + s) * channels;
      for (std::size_t c = 0; c < channels; ++c) {
        out[base + c] = px[base + c] * ps[b * channels + c] + pt[b * channels + c];
      }
    }
  }
  if (r.tape) {
    ImplPtr xi = x.impl(), si = scale_t.impl(), ti = shift.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {xi, si, ti}, [xi, si, ti, oi, batch, spatial, channels]() {
      const double* g = oi->grad.data();
      double* gx = wants_grad(xi) ? xi->grad_buffer() : nullptr;
      double* gs = wants_grad(si) ? si->grad_buffer() : nullptr;
      double* gt = wants_grad(ti) ? ti->grad_buffer() : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t base = (b * spatial + s) * channels;
          for (std::size_t c = 0; c < channels; ++c) {
            const double gv = g[base + c];
            if (gx) gx[base + c] += gv * si->data[b * channels + c];
            if (gs) gs[b * channels + c] += gv * xi->data[base + c];
            if (gt) gt[b * channels + c] += gv;
          }
        }
      }
    });
  }
  return r.tensor;
}

Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require(x.rank() == 4 && kernel >= 1 && stride >= 1, "im2col: expected NHWC input, got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), height = x.dim(1), width = x.dim(2), channels = x.dim(3);
  require(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "im2col: kernel larger than padded input");
  const std::size_t out_h = (height + 2 * pad - kernel) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - kernel) / stride + 1;
  const std::size_t cols = kernel * kernel * channels;
  auto r = make_result({batch * out_h * out_w, cols}, {&x});
  // For every output cell the source offset, or npos for padding.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> src(batch * out_h * out_w * kernel * kernel, npos);
  const double* in = x.data().data();
  double* out = r.tensor.mutable_data().data();
  std::size_t cell = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx, ++cell) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(height) ||
                ix >= static_cast<std::ptrdiff_t>(width)) {
              continue;
            }
            const std::size_t offset = ((b * height + static_cast<std::size_t>(iy)) * width +
                                        static_cast<std::size_t>(ix)) * channels;
            src[cell] = offset;
            std::copy_n(in + offset, channels, out + cell * channels);
          }
        }
      }
    }
  }
  if (r.tape) {
    ImplPtr xi = x.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {xi}, [xi, oi, channels, src = std::move(src)]() {
      double* gx = xi->grad_buffer();
      const double* g = oi->grad.data();
      for (std::size_t cell = 0; cell < src.size(); ++cell) {
        if (src[cell] == npos) continue;
        for (std::size_t c = 0; c < channels; ++c) gx[src[cell] + c] += g[cell * channels + c];
      }
    });
  }
  return r.tensor;
}

Tensor upsample2x(const Tensor& x) {
  require(x.rank() == 4, "upsample2x: expected NHWC input, got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), height = x.dim(1), width = x.dim(2), channels = x.dim(3);
  auto r = make_result({batch, 2 * height, 2 * width, channels}, {&x});
  const double* in = x.data().data();
  double* out = r.tensor.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < 2 * height; ++y) {
      for (std::size_t xx = 0; xx < 2 * width; ++xx) {
        std::copy_n(in + ((b * height + y / 2) * width + xx / 2) * channels, channels,
                    out + ((b * 2 * height + y) * 2 * width + xx) * channels);
      }
    }
  }
  if (r.tape) {
    ImplPtr xi = x.impl(), oi = r.tensor.impl();
    r.tape->record(oi, {xi}, [xi, oi, batch, height, width, channels]() {
      double* gx = xi->grad_buffer();
      const double* g = oi->grad.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t y = 0; y < 2 * height; ++y) {
          for (std::size_t xx = 0; xx < 2 * width; ++xx) {
            double* dst = gx + ((b * height + y / 2) * width + xx / 2) * channels;
            const double* src = g + ((b * 2 * height + y) * 2 * width + xx) * channels;
            for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
          }
        }
      }
    });
  }
  return r.tensor;
}

bool all_finite(const Tensor& a) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace egn
