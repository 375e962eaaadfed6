#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "egn/error.hpp"
#include "egn/tensor.hpp"
#include "test_support.hpp"

namespace egn {
namespace {

using testing::central_differences;
using testing::close;
using testing::eval_no_grad;
using testing::random_off_kink;
using testing::random_tensor;
using testing::reverse_gradients;
using testing::weighted_sum;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  const Tensor out = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(out.item(), 11.0);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  auto build = [&] { return sum_all(matmul(a, b)); };
  const auto grads = reverse_gradients(build, {a, b});
  const auto fd = central_differences([&] { return eval_no_grad(build); }, a);
  for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_TRUE(close(grads[0][i], fd[i], 1e-5, 0.0)) << i;
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Elementwise, SigmoidAndReluDefinitions) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(relu(Tensor::scalar(-3.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(relu(Tensor::scalar(3.0)).item(), 3.0);
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
}

TEST(Elementwise, SigmoidGradientAtOne) {
  Tensor x = Tensor::from({1}, {1.0}, true);
  auto build = [&] { return sum_all(sigmoid(x)); };
  const auto grads = reverse_gradients(build, {x});
  const double s = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(grads[0][0], s * (1.0 - s), 1e-15);
  EXPECT_NEAR(grads[0][0], 0.19661, 1e-5);
  const auto fd = central_differences([&] { return eval_no_grad(build); }, x);
  EXPECT_TRUE(close(grads[0][0], fd[0], 1e-6, 0.0));
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
  Tensor x = Tensor::from({1}, {0.0}, true);
  const auto grads = reverse_gradients([&] { return sum_all(relu(x)); }, {x});
  EXPECT_EQ(grads[0][0], 0.0);
}

TEST(Elementwise, BroadcastsAlongLeadingAxes) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3}, {10, 20, 30});
  EXPECT_EQ(values(add(a, b)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(values(sub(b, a)), (std::vector<double>{9, 18, 27, 6, 15, 24}));
}

TEST(Elementwise, NonBroadcastableShapesRaise) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
  EXPECT_THROW(mul(Tensor::zeros({2, 3}), Tensor::zeros({3, 3})), DimensionError);
}

TEST(Reduce, Examples) {
  EXPECT_DOUBLE_EQ(mean(Tensor::from({3}, {1, 2, 3}), 0).item(), 2.0);
  EXPECT_EQ(values(softmax(Tensor::from({2}, {0, 0}), 0)), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(values(sum(Tensor::full({4, 3}, 1.0), 0)), (std::vector<double>{4, 4, 4}));
  EXPECT_EQ(values(max(Tensor::from({2, 3}, {1, 5, 2, 7, 0, 3}), 1)), (std::vector<double>{5, 7}));
}

TEST(Reduce, AxisOutOfRangeRaises) {
  EXPECT_THROW(reduce(ReduceOp::kMean, Tensor::zeros({2, 2}), 2), DimensionError);
  EXPECT_THROW(softmax(Tensor::zeros({2}), 1), DimensionError);
}

TEST(Reduce, MeanAdjointDistributesOneOverN) {
  Tensor x = Tensor::from({4}, {1, 2, 3, 4}, true);
  const auto grads = reverse_gradients([&] { return mean(x, 0); }, {x});
  for (double g : grads[0]) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Reduce, SortedSummationIgnoresOrder) {
  Rng rng(5);
  std::vector<double> v(9);
  for (double& x : v) x = rng.uniform(-1e3, 1e3) * std::pow(10.0, rng.uniform(-8, 8));
  const double ref = reduce(ReduceOp::kMean, Tensor::from({9, 1}, v), 0, Summation::kSorted).item();
  for (int trial = 0; trial < 20; ++trial) {
    rng.shuffle(std::span<double>(v));
    const double got = reduce(ReduceOp::kMean, Tensor::from({9, 1}, v), 0, Summation::kSorted).item();
    EXPECT_EQ(std::memcmp(&ref, &got, sizeof(double)), 0);
  }
}

TEST(Softmax, RowsAreNonnegativeAndSumToOne) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(9);
    const Tensor p = softmax(random_tensor({rows, cols}, rng, -30.0, 30.0, false), 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        EXPECT_GE(p.at({r, c}), 0.0);
        total += p.at({r, c});
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(ConcatChunk, Examples) {
  auto [lo, hi] = chunk(Tensor::from({4}, {1, 2, 3, 4}), 0);
  EXPECT_EQ(values(lo), (std::vector<double>{1, 2}));
  EXPECT_EQ(values(hi), (std::vector<double>{3, 4}));
  EXPECT_EQ(values(concat(Tensor::from({1}, {1}), Tensor::from({1}, {2}), 0)), (std::vector<double>{1, 2}));
}

TEST(ConcatChunk, OddSplitRaises) { EXPECT_THROW(chunk(Tensor::zeros({5}), 0), DimensionError); }

TEST(ConcatChunk, RoundTripIsIdentityForEvenSizes) {
  Rng rng(3);
  const Tensor v = random_tensor({6}, rng, -2, 2, false);
  auto [a, b] = chunk(v, 0);
  EXPECT_EQ(values(concat(a, b, 0)), values(v));
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t rows = 1 + rng.below(4), half = 1 + rng.below(5), inner = 1 + rng.below(3);
    const std::size_t axis = rng.below(3);
    Shape shape = {rows, rows + 1, inner};
    shape[axis] = 2 * half;
    const Tensor t = random_tensor(shape, rng, -2, 2, false);
    auto [x, y] = chunk(t, axis);
    EXPECT_EQ(values(concat(x, y, axis)), values(t));
  }
}

TEST(Backward, SumOfLeaf) {
  Tensor w = Tensor::full({3}, 1.0, true);
  const auto grads = reverse_gradients([&] { return sum_all(w); }, {w});
  EXPECT_EQ(grads[0], (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  const auto grads = reverse_gradients([&] { return sum_all(mul(w, w)); }, {w});
  EXPECT_EQ(grads[0], (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossRaises) {
  Tensor w = Tensor::full({3}, 1.0, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = scale(w, 2.0);
  EXPECT_THROW(backward(y), ContractError);
}

TEST(Backward, RequiresActiveTape) {
  const Tensor w = Tensor::full({1}, 1.0, true);
  EXPECT_THROW(backward(sum_all(w)), ContractError);
}

TEST(Backward, FrozenLeafHasNoGradAndTapeIsCleared) {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor frozen = Tensor::from({2}, {3, 4}, false);
  Tape tape;
  {
    TapeScope scope(tape);
    const Tensor loss = sum_all(mul(w, frozen));
    EXPECT_GT(tape.size(), 0u);
    backward(loss);
  }
  EXPECT_TRUE(tape.empty());
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_EQ(values(Tensor::from({2}, {w.grad()[0], w.grad()[1]})), (std::vector<double>{3, 4}));
}

TEST(Backward, NoRecordingWithoutTape) {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  const Tensor y = mul(w, w);
  EXPECT_FALSE(y.requires_grad());
}

// Every differentiable op against central differences on inputs in [-2,2]
// kept 1e-3 away from kinks.
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  bool positive = false;  // log/sqrt domains
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) {
      inputs.push_back(c.positive ? random_tensor(s, rng, 0.5, 2.0) : random_off_kink(s, rng));
    }
    auto build = [&] { return weighted_sum(c.op(inputs)); };
    const auto grads = reverse_gradients(build, inputs);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto fd = central_differences([&] { return eval_no_grad(build); }, inputs[k]);
      for (std::size_t i = 0; i < fd.size(); ++i) {
        EXPECT_TRUE(close(grads[k][i], fd[i], 1e-4, 1e-9))
            << c.name << " input " << k << " coord " << i << ": " << grads[k][i] << " vs " << fd[i];
      }
    }
  }
}

std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor>;
  return {
      {"add_broadcast", {{3, 4}, {4}}, [](const V& v) { return add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const V& v) { return sub(v[0], v[1]); }},
      {"mul_broadcast", {{2, 3, 4}, {3, 4}}, [](const V& v) { return mul(v[0], v[1]); }},
      {"div", {{3, 4}, {3, 4}}, [](const V& v) { return div(v[0], v[1]); }, true},
      {"relu", {{5, 3}}, [](const V& v) { return relu(v[0]); }},
      {"sigmoid", {{5, 3}}, [](const V& v) { return sigmoid(v[0]); }},
      {"softplus", {{5, 3}}, [](const V& v) { return softplus(v[0]); }},
      {"log", {{5, 3}}, [](const V& v) { return log(v[0]); }, true},
      {"abs", {{5, 3}}, [](const V& v) { return abs(v[0]); }},
      {"exp", {{5, 3}}, [](const V& v) { return exp(v[0]); }},
      {"sqrt", {{5, 3}}, [](const V& v) { return sqrt(v[0]); }, true},
      {"tanh", {{5, 3}}, [](const V& v) { return tanh(v[0]); }},
      {"scale", {{4}}, [](const V& v) { return scale(v[0], -1.7); }},
      {"mean_axis1", {{3, 4, 2}}, [](const V& v) { return mean(v[0], 1); }},
      {"sorted_mean", {{3, 4, 2}}, [](const V& v) { return reduce(ReduceOp::kMean, v[0], 1, Summation::kSorted); }},
      {"sum_axis0", {{3, 4}}, [](const V& v) { return sum(v[0], 0); }},
      {"max_axis1", {{3, 4}}, [](const V& v) { return max(v[0], 1); }},
      {"softmax", {{3, 5}}, [](const V& v) { return softmax(v[0], 1); }},
      {"softmax_axis0", {{4, 3}}, [](const V& v) { return softmax(v[0], 0); }},
      {"matmul", {{3, 4}, {4, 2}}, [](const V& v) { return matmul(v[0], v[1]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 5}}, [](const V& v) { return bmm(v[0], v[1]); }},
      {"bmm_t", {{2, 3, 4}, {2, 5, 4}}, [](const V& v) { return bmm(v[0], v[1], true); }},
      {"concat_axis1", {{2, 3}, {2, 2}}, [](const V& v) { return concat(v[0], v[1], 1); }},
      {"chunk_hi", {{3, 6}}, [](const V& v) { return chunk(v[0], 1).second; }},
      {"slice", {{4, 5}}, [](const V& v) { return slice(v[0], 0, 1, 2); }},
      {"permute", {{2, 3, 4}}, [](const V& v) { return permute(v[0], {2, 0, 1}); }},
      {"reshape", {{2, 6}}, [](const V& v) { return reshape(v[0], {3, 4}); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](const V& v) { return layer_norm(v[0], v[1], v[2]); }},
      {"scale_rows", {{3, 4}, {3}}, [](const V& v) { return scale_rows(v[0], v[1]); }},
      {"repeat_rows", {{2, 3}}, [](const V& v) { return repeat_rows(v[0], 3); }},
      {"channel_affine", {{2, 3, 4}, {2, 4}, {2, 4}},
       [](const V& v) { return channel_affine(v[0], v[1], v[2]); }},
      {"im2col", {{2, 5, 5, 2}}, [](const V& v) { return im2col(v[0], 3, 2, 1); }},
      {"upsample2x", {{1, 2, 3, 2}}, [](const V& v) { return upsample2x(v[0]); }},
  };
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(Structural, PermuteMatchesIndexArithmetic) {
  Rng rng(4);
  const Tensor t = random_tensor({2, 3, 4}, rng, -1, 1, false);
  const Tensor p = permute(t, {1, 2, 0});
  ASSERT_EQ(p.shape(), (Shape{3, 4, 2}));
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(p.at({b, c, a}), t.at({a, b, c}));
}

TEST(Structural, Im2colReproducesDirectConvolution) {
  Rng rng(8);
  const Tensor x = random_tensor({1, 4, 4, 2}, rng, -1, 1, false);
  const Tensor w = random_tensor({3 * 3 * 2, 1}, rng, -1, 1, false);
  const Tensor y = matmul(im2col(x, 3, 1, 1), w);  // [16 x 1]
  for (std::size_t oy = 0; oy < 4; ++oy) {
    for (std::size_t ox = 0; ox < 4; ++ox) {
      double expect = 0.0;
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
          for (std::size_t c = 0; c < 2; ++c) {
            const long iy = static_cast<long>(oy + ky) - 1, ix = static_cast<long>(ox + kx) - 1;
            if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) continue;
            expect += x.at({0, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c}) *
                      w.at({(ky * 3 + kx) * 2 + c, 0});
          }
      EXPECT_NEAR(y.at({oy * 4 + ox, 0}), expect, 1e-12);
    }
  }
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  Rng rng(21);
  const Tensor a = random_tensor({8, 16}, rng, -2, 2, false);
  const Tensor b = random_tensor({16, 8}, rng, -2, 2, false);
  auto run = [&] { return values(softmax(relu(matmul(a, b)), 1)); };
  const auto first = run();
  const auto second = run();
  ASSERT_EQ(first.size(), second.size());
  EXPECT_EQ(std::memcmp(first.data(), second.data(), first.size() * sizeof(double)), 0);
}

}  // namespace
}  // namespace egn
