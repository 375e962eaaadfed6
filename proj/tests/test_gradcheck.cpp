#include <gtest/gtest.h>

#include <filesystem>

#include "egn/checkpoint.hpp"
#include "egn/error.hpp"
#include "egn/gradcheck.hpp"
#include "egn/nn.hpp"
#include "test_support.hpp"

namespace egn {
namespace {

TEST(Gradcheck, LinearLayerIsExact) {
  Rng rng(1);
  ParameterStore store;
  const Linear lin = make_linear(store, "lin", 4, 3, rng, false);
  const Tensor x = testing::random_tensor({5, 4}, rng, -1, 1, false);
  GradcheckOptions opts;
  opts.rtol = 1e-9;
  opts.atol = 1e-9;
  const auto report = gradcheck([&] { return sum_all(lin(x)); }, store.entries(), opts);
  EXPECT_TRUE(report.passed) << report.summary();
  EXPECT_EQ(report.checked, 12u);
  EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(Gradcheck, TwoLayerReluMlp) {
  Rng rng(2);
  ParameterStore store;
  const Linear l1 = make_linear(store, "l1", 6, 8, rng);
  const Linear l2 = make_linear(store, "l2", 8, 2, rng);
  const Tensor x = testing::random_tensor({4, 6}, rng, -1, 1, false);
  GradcheckOptions opts;
  opts.rtol = 1e-5;
  const auto report = gradcheck([&] { return testing::weighted_sum(l2(relu(l1(x)))); }, store.entries(), opts);
  EXPECT_TRUE(report.passed) << report.summary();
  EXPECT_EQ(report.groups.size(), 4u);
  EXPECT_EQ(report.checked + report.skipped_kinks, store.parameter_count());
}

TEST(Gradcheck, NondeterministicClosureRaises) {
  Tensor w = Tensor::full({2}, 1.0, true);
  int calls = 0;
  auto closure = [&] { return sum_all(scale(w, static_cast<double>(++calls))); };
  EXPECT_THROW(gradcheck(closure, {{"w", w}}), DeterminismError);
}

TEST(Gradcheck, DetectsWrongAdjoint) {
  // A closure whose value does not depend on `w` through the tape: the analytic
  // gradient is zero while the numeric one is not.
  Tensor w = Tensor::from({1}, {0.7}, true);
  auto closure = [&] {
    const double v = w.data()[0];
    return Tensor::scalar(v * v);
  };
  const auto report = gradcheck(closure, {{"w", w}});
  EXPECT_FALSE(report.passed);
}

TEST(Gradcheck, SkipsCoordinatesOnAKink) {
  Tensor w = Tensor::from({2}, {0.0, 1.0}, true);
  const auto report = gradcheck([&] { return sum_all(relu(w)); }, {{"w", w}});
  EXPECT_TRUE(report.passed) << report.summary();
  EXPECT_EQ(report.skipped_kinks, 1u);
  EXPECT_EQ(report.checked, 1u);
}

TEST(Gradcheck, SamplingCoversEveryGroup) {
  Rng rng(3);
  ParameterStore store;
  const Linear big = make_linear(store, "big", 30, 30, rng);
  const Linear small = make_linear(store, "small", 30, 1, rng);
  const Tensor x = testing::random_tensor({2, 30}, rng, -1, 1, false);
  GradcheckOptions opts;
  opts.max_coordinates = 20;
  const auto report = gradcheck([&] { return sum_all(small(tanh(big(x)))); }, store.entries(), opts);
  EXPECT_TRUE(report.passed) << report.summary();
  for (const auto& g : report.groups) EXPECT_GE(g.checked + g.skipped_kinks, 1u) << g.name;
  EXPECT_LE(report.checked + report.skipped_kinks, 20u);
}

TEST(ParameterStore, RejectsDuplicatesAndSharesStorage) {
  ParameterStore store;
  Tensor t = store.add("a", Tensor::zeros({2}));
  EXPECT_TRUE(t.requires_grad());
  EXPECT_THROW(store.add("a", Tensor::zeros({2})), ContractError);
  t.mutable_data()[0] = 5.0;
  EXPECT_EQ(store.get("a").data()[0], 5.0);
  EXPECT_THROW(store.get("missing"), ContractError);
}

TEST(Checkpoint, RoundTripsTensorsAndConfig) {
  Rng rng(4);
  const auto path = std::filesystem::temp_directory_path() / "egn_test_ckpt.bin";
  Checkpoint out{"EGNX", 1, R"({"a":1})", {{"w", testing::random_tensor({2, 3}, rng)}, {"b", Tensor::scalar(2.5)}}};
  write_checkpoint(path, out);
  const Checkpoint in = read_checkpoint(path, "EGNX");
  EXPECT_EQ(in.config_json, out.config_json);
  ASSERT_EQ(in.tensors.size(), 2u);
  EXPECT_EQ(in.tensors[0].name, "w");
  EXPECT_EQ(in.tensors[0].tensor.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(in.tensors[0].tensor.data()[i], out.tensors[0].tensor.data()[i]);
  EXPECT_THROW(read_checkpoint(path, "EGNM"), DataError);

  std::vector<NamedTensor> params = {{"w", Tensor::zeros({2, 3})}, {"b", Tensor::zeros({})}};
  load_parameters(in, params);
  EXPECT_EQ(params[1].tensor.item(), 2.5);
  std::vector<NamedTensor> wrong = {{"w", Tensor::zeros({3, 2})}};
  EXPECT_ANY_THROW(load_parameters(in, wrong));
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace egn
