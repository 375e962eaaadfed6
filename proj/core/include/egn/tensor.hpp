#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared, row-major storage. Operations are
// free functions; when a Tape is active on the calling thread (see TapeScope)
// and at least one operand requires a gradient, the operation appends an
// adjoint closure to that tape. backward() replays the closures in reverse
// order, accumulating into the grad buffers of every reachable leaf that
// requires a gradient, and then clears the tape.
//
// Without an active tape the same functions run as plain numeric kernels,
// which is how evaluation and finite-difference probes execute.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace egn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "absent"
  bool requires_grad = false;
  bool leaf = true;

  // Returns the grad buffer, allocating zeros on first use.
  double* grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutable access is meant for initialisation and optimiser updates of leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  // Identity of the underlying storage; parameter aliasing relies on this.
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed operations for one forward/backward episode.
class Tape {
 public:
  using AdjointFn = std::function<void()>;

  void record(std::shared_ptr<detail::TensorImpl> output,
              std::vector<std::shared_ptr<detail::TensorImpl>> inputs, AdjointFn adjoint);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)=1 and runs every recorded adjoint in reverse order.
  // Throws ContractError for a non-scalar loss. Clears the tape afterwards.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    AdjointFn adjoint;
  };
  std::vector<Entry> entries_;
};

// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (e.g. for finite-difference probes inside a taped region).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Backward pass on the active tape. Throws ContractError without one.
void backward(const Tensor& loss);

// Fingerprint of the sign pattern seen by non-smooth ops (relu, abs) while
// enabled on this thread. Finite-difference checkers compare fingerprints of
// the +h and -h probes to detect a step that straddles a kink.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  void reset();
  std::uint64_t fingerprint() const;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

enum class UnaryOp { kRelu, kSigmoid, kSoftplus, kLog, kAbs, kExp, kSqrt, kSquare, kNeg, kTanh };
enum class BinaryOp { kAdd, kSub, kMul, kDiv };
enum class ReduceOp { kSum, kMean, kMax };

// Binary ops broadcast the operand of smaller rank along leading axes: its
// shape must equal the trailing dimensions of the other operand.
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryOp op, const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// How a reduction accumulates. kSorted sums each slice in ascending value
// order, which makes the result independent of the order of the reduced axis.
enum class Summation { kSequential, kSorted };

/// Reduces `axis` away. Max routes the adjoint to the first maximal element.
Tensor reduce(ReduceOp op, const Tensor& a, std::size_t axis,
              Summation summation = Summation::kSequential);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor max(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

/// Softmax normalisation along `axis` (shape preserved).
Tensor softmax(const Tensor& a, std::size_t axis);

/// Matrix product of rank-2 operands.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product of rank-3 operands [n,m,k]x[n,k,p]; with transpose_b the
/// second operand is [n,p,k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Splits `axis` into `parts` equal pieces; throws DimensionError if uneven.
std::vector<Tensor> split(const Tensor& a, std::size_t axis, std::size_t parts);
/// Two equal halves along `axis`.
std::pair<Tensor, Tensor> chunk(const Tensor& a, std::size_t axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::span<const std::size_t> order);
Tensor permute(const Tensor& a, std::initializer_list<std::size_t> order);
Tensor transpose(const Tensor& a);

/// Layer normalisation over the last axis with affine gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// a[..., c] * s[...]; `s` has the shape of `a` without its last axis.
Tensor scale_rows(const Tensor& a, const Tensor& s);
/// Repeats each slice along axis 0 `times` times, consecutively.
Tensor repeat_rows(const Tensor& a, std::size_t times);
/// x[b, s, c] * scale[b, c] + shift[b, c].
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);

/// Patches of an NHWC image [B,H,W,C] as rows [B*Ho*Wo, k*k*C] (zero padding).
Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);
/// Nearest-neighbour 2x upsampling of an NHWC image.
Tensor upsample2x(const Tensor& x);

/// True if every element is finite.
bool all_finite(const Tensor& a);

}  // namespace egn
