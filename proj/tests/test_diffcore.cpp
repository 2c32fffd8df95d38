#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "spotter/diff/gradcheck.hpp"
#include "spotter/diff/layers.hpp"
#include "spotter/diff/ops.hpp"

namespace spotter {
namespace {

using diff::GraphError;
using diff::Op;
using diff::OpAttrs;
using diff::Parameter;
using diff::ShapeError;
using diff::Tensor;
using testing::random_tensor;
using TD = Tensor<double>;

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(TD::from_values({2, 3}, std::vector<double>(5)), ShapeError);
  const TD t = TD::from_values({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(-1), 3);
}

TEST(Evaluate, MatmulOfOnes) {
  const TD a = TD::full({2, 3}, 1.0), b = TD::full({3, 1}, 1.0);
  const TD c = diff::evaluate<double>(Op::kMatmul, {a, b});
  ASSERT_EQ(c.shape(), (diff::Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c.values()[0], 3.0);
  EXPECT_DOUBLE_EQ(c.values()[1], 3.0);
}

TEST(Evaluate, SoftmaxOfZerosIsUniform) {
  OpAttrs attrs;
  attrs.axis = 0;
  const TD s = diff::evaluate<double>(Op::kSoftmax, {TD::zeros({3})}, attrs);
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Evaluate, SigmoidHandValues) {
  const TD s = diff::evaluate<double>(Op::kSigmoid, {TD::from_values({2}, {0.0, std::log(3.0)})});
  EXPECT_NEAR(s.values()[0], 0.5, 1e-15);
  EXPECT_NEAR(s.values()[1], 0.75, 1e-15);
}

TEST(Evaluate, ShapeMismatchNamesShapes) {
  try {
    diff::add(TD::zeros({2, 3}), TD::zeros({4, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(diff::matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), ShapeError);
}

TEST(Evaluate, TinyDenominatorRejected) {
  EXPECT_THROW(diff::div(TD::full({2}, 1.0), TD::from_values({2}, {1.0, 1e-13})), ShapeError);
  EXPECT_NO_THROW(diff::div(TD::full({2}, 1.0), TD::from_values({2}, {1.0, 1e-12})));
}

TEST(Evaluate, WrongArityRejected) {
  EXPECT_THROW(diff::evaluate<double>(Op::kAdd, {TD::zeros({2})}), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  const TD x = TD::from_values({3}, {1.0, -2.0, 5.0}, true);
  diff::sum_all(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  const TD x = TD::from_values({2}, {2.0, 3.0}, true);
  diff::sum_all(diff::mul(x, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 6.0);
}

TEST(Backward, SigmoidSlopeAtZero) {
  const TD x = TD::from_values({1}, {0.0}, true);
  diff::sum_all(diff::sigmoid(x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, AccumulatesUntilCleared) {
  TD x = TD::from_values({2}, {1.0, 2.0}, true);
  diff::sum_all(x).backward();
  diff::sum_all(x).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  diff::sum_all(x).backward();
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, SeedWeightsTheGradient) {
  const TD x = TD::from_values({2}, {1.0, 2.0}, true);
  diff::mul_scalar(x, 3.0).backward(TD::from_values({2}, {1.0, -2.0}));
  EXPECT_EQ(x.grad()[0], 3.0);
  EXPECT_EQ(x.grad()[1], -6.0);
}

TEST(Backward, RejectsUnrecordedRootAndBadSeed) {
  const TD constant = TD::from_values({2}, {1.0, 2.0});
  EXPECT_THROW(diff::sum_all(constant).backward(), GraphError);
  const TD x = TD::from_values({2}, {1.0, 2.0}, true);
  EXPECT_THROW(diff::mul(x, x).backward(TD::zeros({3})), ShapeError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  const TD x = TD::from_values({2}, {1.0, 2.0}, true);
  TD y;
  {
    diff::NoGradGuard guard;
    EXPECT_FALSE(diff::grad_enabled());
    y = diff::sum_all(diff::mul(x, x));
  }
  EXPECT_TRUE(diff::grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(y.backward(), GraphError);
}

TEST(Backward, LinearityOverRoots) {
  Rng rng(3);
  TD x = random_tensor<double>({4, 5}, rng, -1, 1, true);
  const TD w = random_tensor<double>({5, 3}, rng);
  auto f = [&] { return diff::sum_all(diff::sigmoid(diff::matmul(x, w))); };
  auto g = [&] { return diff::sum_all(diff::exp(diff::mul_scalar(x, 0.3))); };
  f().backward();
  const std::vector<double> gf(x.grad().begin(), x.grad().end());
  x.zero_grad();
  g().backward();
  const std::vector<double> gg(x.grad().begin(), x.grad().end());
  x.zero_grad();
  diff::add(f(), g()).backward();
  for (std::size_t i = 0; i < gg.size(); ++i) EXPECT_NEAR(x.grad()[i], gf[i] + gg[i], 1e-12);
}

TEST(Softmax, RowsSumToOneAndStayInside) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const TD a = random_tensor<double>({3, 7}, rng, -30, 30);
    const TD s = diff::softmax(a, -1);
    for (int r = 0; r < 3; ++r) {
      double total = 0;
      for (int c = 0; c < 7; ++c) {
        const double v = s.at({r, c});
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, LargeInputsStayFinite) {
  const TD s = diff::softmax(TD::from_values({3}, {1000.0, 1000.0, -1000.0}), 0);
  EXPECT_NEAR(s.values()[0], 0.5, 1e-12);
  EXPECT_TRUE(std::isfinite(s.values()[2]));
}

TEST(MaskedFill, MaskedPositionsGetNegligibleWeight) {
  Rng rng(9);
  const TD a = random_tensor<double>({2, 6}, rng, -5, 5);
  const std::vector<std::uint8_t> mask = {0, 1, 0, 1, 1, 0, 1, 0, 0, 0, 0, 1};
  const TD s = diff::softmax(diff::masked_fill(a, mask, {2, 6}), -1);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) EXPECT_LT(s.values()[i], 1e-20);
}

TEST(MaskedFill, BroadcastMaskAndNoGradientThroughMasked) {
  const TD a = TD::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::uint8_t> mask = {0, 1, 0};
  diff::sum_all(diff::masked_fill(a, mask, {1, 3}, 0.0)).backward();
  EXPECT_EQ(a.grad()[1], 0.0);
  EXPECT_EQ(a.grad()[4], 0.0);
  EXPECT_EQ(a.grad()[0], 1.0);
}

TEST(Conv2d, ZeroPaddingAndStride) {
  // 3x3 all-ones kernel on an all-ones 4x4 image: corners see 4 pixels.
  const TD x = TD::full({4, 4, 1}, 1.0);
  const TD w = TD::full({3, 3, 1, 1}, 1.0);
  const TD y = diff::conv2d(x, w, TD(), 1, 1);
  ASSERT_EQ(y.shape(), (diff::Shape{4, 4, 1}));
  EXPECT_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({1, 1, 0}), 9.0);
  const TD y2 = diff::conv2d(x, w, TD(), 2, 1);
  ASSERT_EQ(y2.shape(), (diff::Shape{2, 2, 1}));
  EXPECT_EQ(y2.at({0, 0, 0}), 4.0);
  EXPECT_EQ(y2.at({1, 1, 0}), 9.0);
  EXPECT_THROW(diff::conv2d(x, w, TD(), 3, 1), ShapeError);
}

TEST(Upsample, NearestRepeatsPixels) {
  const TD x = TD::from_values({1, 2, 1}, {1.0, 2.0});
  const TD y = diff::upsample_nearest(x, 2);
  ASSERT_EQ(y.shape(), (diff::Shape{2, 4, 1}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Reshape, InfersOneExtent) {
  const TD x = TD::zeros({2, 6});
  EXPECT_EQ(diff::reshape(x, {3, -1}).shape(), (diff::Shape{3, 4}));
  EXPECT_THROW(diff::reshape(x, {5, -1}), ShapeError);
}

// --- gradient checks over the whole catalog --------------------------------

struct OpCase {
  Op op;
  std::vector<diff::Shape> shapes;
  OpAttrs attrs;
  double lo = -1.0, hi = 1.0;
};

std::vector<OpCase> catalog_cases() {
  std::vector<OpCase> cases;
  auto attrs = [](auto fn) {
    OpAttrs a;
    fn(a);
    return a;
  };
  cases.push_back({Op::kAdd, {{3, 4}, {4}}, {}});
  cases.push_back({Op::kSub, {{3, 4}, {3, 1}}, {}});
  cases.push_back({Op::kMul, {{2, 3, 4}, {3, 4}}, {}});
  cases.push_back({Op::kDiv, {{3, 4}, {3, 4}}, {}, 0.5, 2.0});
  cases.push_back({Op::kExp, {{3, 4}}, {}});
  cases.push_back({Op::kLog, {{3, 4}}, {}, 0.2, 2.0});
  cases.push_back({Op::kSigmoid, {{3, 4}}, {}, -3.0, 3.0});
  cases.push_back({Op::kRelu, {{3, 4}}, {}});
  cases.push_back({Op::kMatmul, {{2, 3, 4}, {4, 5}}, {}});
  cases.push_back({Op::kSoftmax, {{3, 5}}, attrs([](OpAttrs& a) { a.axis = 1; }), -2, 2});
  cases.push_back({Op::kLayerNorm, {{3, 6}, {6}, {6}}, {}});
  cases.push_back({Op::kConv2d, {{5, 6, 2}, {3, 3, 2, 3}, {3}}, attrs([](OpAttrs& a) { a.padding = 1; })});
  cases.push_back({Op::kConv2d,
                   {{2, 6, 6, 2}, {3, 3, 2, 2}},
                   attrs([](OpAttrs& a) {
                     a.stride = 2;
                     a.padding = 1;
                   })});
  cases.push_back({Op::kUpsampleNearest, {{2, 3, 2}}, attrs([](OpAttrs& a) { a.factor = 2; })});
  cases.push_back({Op::kSum, {{3, 4, 2}}, attrs([](OpAttrs& a) { a.axes = {0, 2}; })});
  cases.push_back({Op::kMean, {{3, 4, 2}}, attrs([](OpAttrs& a) {
                     a.axes = {1};
                     a.keepdim = true;
                   })});
  cases.push_back({Op::kConcat, {{2, 3}, {4, 3}}, attrs([](OpAttrs& a) { a.axis = 0; })});
  cases.push_back({Op::kTranspose, {{2, 3, 4}}, {}});
  cases.push_back({Op::kReshape, {{2, 6}}, attrs([](OpAttrs& a) { a.shape = {3, 4}; })});
  cases.push_back({Op::kEmbedding, {{5, 3}}, attrs([](OpAttrs& a) { a.indices = {4, 0, 4, 2}; })});
  cases.push_back({Op::kMaskedFill, {{2, 4}}, attrs([](OpAttrs& a) {
                     a.mask = {0, 1, 0, 0};
                     a.mask_shape = {1, 4};
                     a.fill = -1e9;
                   })});
  return cases;
}

TEST(GradCheck, EveryCatalogOpPasses) {
  Rng rng(42);
  std::vector<Op> covered;
  for (const OpCase& c : catalog_cases()) {
    std::vector<Parameter<double>> params;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
      params.push_back({"in" + std::to_string(i), random_tensor<double>(c.shapes[i], rng, c.lo, c.hi, true)});
    }
    // A random projection of the output makes every coordinate matter.
    const TD probe = [&] {
      std::vector<TD> ins;
      for (auto& p : params) ins.push_back(p.tensor);
      diff::NoGradGuard g;
      return random_tensor<double>(diff::evaluate(c.op, ins, c.attrs).shape(), rng);
    }();
    // The softmax-after-masked-fill pattern is what attention uses.
    auto loss = [&] {
      std::vector<TD> ins;
      for (auto& p : params) ins.push_back(p.tensor);
      TD out = diff::evaluate(c.op, ins, c.attrs);
      if (c.op == Op::kMaskedFill) out = diff::softmax(out, -1);
      return diff::sum_all(diff::mul(out, probe));
    };
    const auto report = diff::finite_difference_check(loss, params, 1e-5, 400, 7);
    EXPECT_TRUE(report.ok(1e-4)) << diff::op_name(c.op) << ": max rel err " << report.max_relative_error << " at "
                                 << report.worst_parameter << "[" << report.worst_index << "] " << report.failure;
    covered.push_back(c.op);
  }
  for (int o = 0; o <= static_cast<int>(Op::kMaskedFill); ++o) {
    EXPECT_NE(std::find(covered.begin(), covered.end(), static_cast<Op>(o)), covered.end())
        << "no gradient case for " << diff::op_name(static_cast<Op>(o));
  }
}

TEST(GradCheck, ExtraOpsPass) {
  Rng rng(11);
  std::vector<Parameter<double>> params{{"x", random_tensor<double>({3, 4}, rng, 0.2, 0.8, true)}};
  const TD x = params[0].tensor;
  const int idx[] = {2, 0};
  auto loss = [&] {
    const TD a = diff::log_softmax(x, -1);
    const TD b = diff::pow_scalar(diff::clamp(x, 0.1, 0.9), 2.5);
    const TD c = diff::permute(diff::reshape(x, {3, 2, 2}), {2, 0, 1});
    const TD d = diff::index_select(x, 0, std::span<const int>(idx));
    const TD e = diff::slice(x, 1, 1, 2);
    const TD f = diff::broadcast_to(diff::reshape(x, {1, 3, 4}), {2, 3, 4});
    return diff::add(diff::add(diff::add(diff::sum_all(diff::mul(a, a)), diff::sum_all(b)),
                               diff::add(diff::sum_all(diff::mul(c, c)), diff::sum_all(diff::exp(d)))),
                     diff::add(diff::sum_all(diff::sigmoid(e)), diff::mean_all(diff::mul(f, f))));
  };
  const auto report = diff::finite_difference_check(loss, params, 1e-5, 100);
  EXPECT_TRUE(report.ok(1e-4)) << report.max_relative_error;
}

TEST(GradCheck, LayersPass) {
  Rng rng(12);
  diff::ParameterSet<double> ps;
  nn::MultiHeadAttention<double> attn(ps, "attn", 8, 2, rng);
  nn::FeedForward<double> ffn(ps, "ffn", 8, 16, rng);
  nn::LayerNorm<double> ln(ps, "ln", 8, rng);
  const TD x = random_tensor<double>({2, 5, 8}, rng);
  const TD kv = random_tensor<double>({2, 3, 8}, rng);
  nn::BlockMask mask{{0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0}, {1, 1, 5, 3}};
  auto loss = [&] {
    const TD h = diff::add(x, attn(ln(x), kv, &mask));
    return diff::sum_all(diff::mul(ffn(h), ffn(h)));
  };
  const auto report = diff::finite_difference_check(loss, ps.all(), 1e-5, 300);
  EXPECT_TRUE(report.ok(1e-4)) << report.max_relative_error << " at " << report.worst_parameter;
}

TEST(GradCheck, SumHasNoError) {
  Rng rng(1);
  std::vector<Parameter<double>> params{{"x", random_tensor<double>({10}, rng, -1, 1, true)}};
  auto loss = [&] { return diff::sum_all(params[0].tensor); };
  const auto report = diff::finite_difference_check(loss, params, 1e-5, 10);
  EXPECT_TRUE(report.failure.empty());
  EXPECT_LT(report.max_relative_error, 1e-9);
  EXPECT_EQ(report.coordinates_checked, 10u);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
  std::vector<Parameter<double>> params{{"x", TD::zeros({1}, true)}};
  auto loss = [&] { return diff::sum_all(params[0].tensor); };
  EXPECT_THROW(diff::finite_difference_check(loss, params, 1e-3, 1), std::invalid_argument);
  EXPECT_THROW(diff::finite_difference_check(loss, params, 1e-8, 1), std::invalid_argument);
}

TEST(GradCheck, NonFiniteProbeReportedWithCoordinate) {
  std::vector<Parameter<double>> params{{"x", TD::from_values({2}, {1.0, 0.0}, true)}};
  // sqrt-like blow-up: 1/x^2 is finite at the base point only for x != 0,
  // so probe through a function that turns NaN when x[1] moves.
  auto loss = [&] {
    const TD x = params[0].tensor;
    const double v = x.values()[1];
    const TD bad = TD::scalar(v == 0.0 ? 0.0 : std::nan(""));
    return diff::add(diff::sum_all(x), bad);
  };
  const auto report = diff::finite_difference_check(loss, params, 1e-5, 2);
  EXPECT_FALSE(report.ok(1e-4));
  EXPECT_NE(report.failure.find("x[1]"), std::string::npos) << report.failure;
}

TEST(Parameters, NamesAreUnique) {
  Rng rng(0);
  diff::ParameterSet<double> ps;
  ps.create("w", {2, 2}, diff::Init::kXavierUniform, rng);
  EXPECT_THROW(ps.create("w", {2}, diff::Init::kZeros, rng), std::invalid_argument);
  EXPECT_NE(ps.find("w"), nullptr);
  EXPECT_EQ(ps.find("v"), nullptr);
  EXPECT_TRUE(ps.find("w")->tensor.requires_grad());
}

}  // namespace
}  // namespace spotter
