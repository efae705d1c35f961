#include "microprobe/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "microprobe/error.hpp"
#include "microprobe/optim.hpp"
#include "microprobe/rng.hpp"

using namespace microprobe;
using ad::Shape;
using TD = ad::Tensor<double>;
using TF = ad::Tensor<float>;

namespace {

TD random_tensor(Shape shape, Rng& rng, bool grad = true, double lo = -1, double hi = 1) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::from(std::move(shape), std::move(v), grad);
}

// Central-difference check of every coordinate of every input, computed
// independently of ad::grad_check.
double fd_max_rel_error(const std::function<TD()>& f, std::vector<TD> inputs, double h = 1e-5) {
  for (auto& x : inputs) x.zero_grad();
  f().backward();
  double worst = 0;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto v = x.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = f().item();
      v[i] = saved - h;
      const double down = f().item();
      v[i] = saved;
      const double num = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - num) / (std::abs(analytic[i]) + std::abs(num) + 1e-12));
    }
  }
  return worst;
}

// Contract an op output with fixed random weights so the check covers the
// full vector-Jacobian product, not just the all-ones direction.
TD contract(const TD& y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, random_tensor(y.shape(), rng, false)));
}

}  // namespace

TEST(TensorForward, SoftmaxOfUniformLogitsIsUniform) {
  auto y = ad::softmax(TF::from({3}, {0, 0, 0}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(TensorForward, SoftmaxRowsArePositiveAndSumToOne) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({5, 9}, rng, false, -30, 30);
    auto y = ad::softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_GT(y[r * 9 + j], 0.0);
        s += y[r * 9 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(TensorForward, MatmulByIdentityIsIdentity) {
  Rng rng(1);
  auto a = random_tensor({3, 3}, rng, false);
  auto eye = TD::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ad::matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], a[i]);
}

TEST(TensorForward, MatmulLeadingDimsAreFlattened) {
  auto a = TD::from({2, 1, 2}, {1, 2, 3, 4});
  auto b = TD::from({2, 1}, {10, 1});
  auto y = ad::matmul(a, b);
  EXPECT_EQ(y.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(y[0], 12);
  EXPECT_EQ(y[1], 34);
}

TEST(TensorForward, ConvWithMeanKernelKeepsConstantInterior) {
  auto x = TD::full({1, 6, 6}, 2.5);
  auto w = TD::full({1, 1, 3, 3}, 1.0 / 9.0);
  auto y = ad::conv2d(x, w, TD::zeros({1}));
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 1; c < 5; ++c) EXPECT_NEAR(y[r * 6 + c], 2.5, 1e-12);
  // Zero padding pulls the corner down to 4/9 of the value.
  EXPECT_NEAR(y[0], 2.5 * 4.0 / 9.0, 1e-12);
}

TEST(TensorForward, NearestUpsampleReplicatesBlocks) {
  auto y = ad::upsample2x(TD::from({2, 2}, {1, 2, 3, 4}), ad::Upsample::nearest);
  const std::vector<double> expected{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), expected);
}

TEST(TensorForward, BilinearUpsampleUsesHalfPixelGrid) {
  // Source [0, 1] along one axis; output samples sit at -0.25, 0.25, 0.75,
  // 1.25 in source coordinates, clamped at the borders.
  auto y = ad::upsample2x(TD::from({1, 2}, {0, 1}), ad::Upsample::bilinear);
  EXPECT_EQ(y.shape(), (Shape{2, 4}));
  const std::vector<double> row{0, 0.25, 0.75, 1};
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_DOUBLE_EQ(y[j], row[j]);
    EXPECT_DOUBLE_EQ(y[4 + j], row[j]);
  }
}

TEST(TensorForward, BroadcastingOverLeadingAndTrailingDims) {
  auto a = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto bias = TD::from({3}, {10, 20, 30});
  auto col = TD::from({2, 1}, {2, 3});
  auto y = ad::add(a, bias);
  EXPECT_EQ(y[4], 25);
  auto z = ad::div(a, col);
  EXPECT_DOUBLE_EQ(z[5], 2.0);
}

TEST(TensorForward, ShapeErrorsNameTheOpAndShapes) {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({4, 5});
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos);
  }
  EXPECT_THROW(ad::add(a, TD::zeros({2})), ShapeError);
  EXPECT_THROW(ad::reshape(a, {7}), ShapeError);
}

TEST(TensorForward, NonFiniteInputRejectedInDebugMode) {
  const bool saved = ad::debug_checks();
  ad::set_debug_checks(true);
  auto x = TD::from({2}, {1.0, std::nan("")});
  EXPECT_THROW(ad::exp(x), Error);
  ad::set_debug_checks(saved);
}

TEST(TensorBackward, SumGivesOnes) {
  auto p = TD::from({2, 2}, {1, -2, 3, 4}, true);
  ad::sum(p).backward();
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(TensorBackward, ZeroTimesAnythingGivesZeroGradient) {
  auto p = TD::from({3}, {0.5, -1, 2}, true);
  auto loss = ad::sum(ad::scale(ad::exp(p), 0.0));
  loss.backward();
  for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(TensorBackward, NonScalarLossIsAnError) {
  auto p = TD::zeros({2}, true);
  EXPECT_THROW(ad::relu(p).backward(), ShapeError);
}

TEST(TensorBackward, UnreachedParametersKeepTheirGradient) {
  auto used = TD::from({2}, {1, 2}, true);
  auto unused = TD::from({2}, {3, 4}, true);
  ad::sum(ad::mul(unused, unused)).backward();  // seeds unused.grad = 2x
  ad::sum(used).backward();
  EXPECT_EQ(unused.grad()[0], 6.0);
  EXPECT_EQ(unused.grad()[1], 8.0);
}

TEST(TensorBackward, GradientsAccumulateUntilZeroed) {
  auto p = TD::from({1}, {3}, true);
  ad::sum(p).backward();
  ad::sum(p).backward();
  EXPECT_EQ(p.grad()[0], 2.0);
  p.zero_grad();
  EXPECT_EQ(p.grad()[0], 0.0);
}

TEST(TensorBackward, MaskedFillBlocksGradientAtMaskedPositions) {
  auto x = TD::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  ad::Mask rows{{3, 1}, {0, 1, 0}};
  auto y = ad::masked_fill(x, rows, 0.0);
  EXPECT_EQ(y[2], 0.0);
  EXPECT_EQ(y[3], 0.0);
  ad::sum(ad::mul(y, y)).backward();
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(TensorBackward, TwoLayerMlpMatchesFiniteDifferences) {
  Rng rng(11);
  auto x = random_tensor({5, 4}, rng, false);
  auto w1 = random_tensor({4, 6}, rng);
  auto b1 = random_tensor({6}, rng);
  auto w2 = random_tensor({6, 3}, rng);
  auto b2 = random_tensor({3}, rng);
  auto f = [&] {
    auto h = ad::relu(ad::add(ad::matmul(x, w1), b1));
    auto logits = ad::add(ad::matmul(h, w2), b2);
    return ad::mean(ad::log_softmax(logits));
  };
  EXPECT_LT(fd_max_rel_error(f, {w1, b1, w2, b2}), 1e-4);
}

// Every op's vector-Jacobian product against central differences.
TEST(TensorBackward, EveryOpAgreesWithFiniteDifferences) {
  Rng rng(3);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 3, 4}, rng);
  auto row = random_tensor({4}, rng);
  auto col = random_tensor({2, 3, 1}, rng, true, 0.5, 2.0);
  auto pos = random_tensor({2, 3, 4}, rng, true, 0.2, 2.0);
  auto m = random_tensor({4, 5}, rng);
  auto bm = random_tensor({2, 4, 2}, rng);
  auto img = random_tensor({2, 2, 5, 4}, rng);
  auto kern = random_tensor({3, 2, 3, 3}, rng);
  auto kb = random_tensor({3}, rng);
  auto rows2 = random_tensor({6, 3}, rng);

  struct Case {
    const char* name;
    std::function<TD()> f;
    std::vector<TD> inputs;
  };
  std::vector<Case> cases{
      {"add", [&] { return contract(ad::add(a, row), 1); }, {a, row}},
      {"sub", [&] { return contract(ad::sub(a, col), 2); }, {a, col}},
      {"mul", [&] { return contract(ad::mul(a, b), 3); }, {a, b}},
      {"div", [&] { return contract(ad::div(a, col), 4); }, {a, col}},
      {"scale", [&] { return contract(ad::scale(a, 1.7), 5); }, {a}},
      {"matmul", [&] { return contract(ad::matmul(a, m), 6); }, {a, m}},
      {"bmm", [&] { return contract(ad::bmm(ad::reshape(a, {2, 3, 4}), bm), 7); }, {a, bm}},
      {"softmax", [&] { return contract(ad::softmax(a), 8); }, {a}},
      {"log_softmax", [&] { return contract(ad::log_softmax(a), 9); }, {a}},
      {"log", [&] { return contract(ad::log(pos), 10); }, {pos}},
      {"exp", [&] { return contract(ad::exp(a), 11); }, {a}},
      {"relu", [&] { return contract(ad::relu(a), 12); }, {a}},
      {"softplus", [&] { return contract(ad::softplus(a), 13); }, {a}},
      {"conv2d", [&] { return contract(ad::conv2d(img, kern, kb), 14); }, {img, kern, kb}},
      {"conv2d_unbatched",
       [&] { return contract(ad::conv2d(ad::reshape(img, {2, 10, 4}), kern, kb), 15); },
       {img, kern}},
      {"upsample_nearest", [&] { return contract(ad::upsample2x(a, ad::Upsample::nearest), 16); }, {a}},
      {"upsample_bilinear", [&] { return contract(ad::upsample2x(a, ad::Upsample::bilinear), 17); }, {a}},
      {"reshape", [&] { return contract(ad::reshape(a, {6, 4}), 18); }, {a}},
      {"transpose", [&] { return contract(ad::transpose(a), 19); }, {a}},
      {"masked_fill", [&] { return contract(ad::masked_fill(a, ad::Mask{{3, 1}, {1, 0, 1}}, 0.5), 20); }, {a}},
      {"sum_axes", [&] { return contract(ad::sum(a, {0, 2}, true), 21); }, {a}},
      {"mean_axes", [&] { return contract(ad::mean(a, {1}), 22); }, {a}},
      {"gather_rows", [&] { return contract(ad::gather_rows(rows2, std::vector<std::size_t>{4, 0, 4}), 23); }, {rows2}},
      {"concat", [&] { return contract(ad::concat<double>({a, b, col}), 24); }, {a, b, col}},
  };
  for (auto& c : cases) {
    EXPECT_LT(fd_max_rel_error(c.f, c.inputs), 1e-4) << c.name;
  }
}

TEST(TensorBackward, IdenticalSeedsGiveBitIdenticalTraining) {
  auto run = [] {
    Rng rng(99);
    std::vector<float> w0(12);
    for (auto& v : w0) v = static_cast<float>(rng.normal());
    std::vector<ad::Parameter<float>> params{{"w", TF::from({4, 3}, w0, true)}};
    auto x = TF::from({2, 4}, {1, 2, 3, 4, -1, 0, 1, 0.5});
    ad::Adam<float> opt({.learning_rate = 0.01});
    for (int i = 0; i < 50; ++i) {
      ad::zero_grad(params);
      ad::mean(ad::log_softmax(ad::matmul(x, params[0].tensor))).backward();
      opt.step(params);
    }
    auto d = params[0].tensor.data();
    return std::vector<float>(d.begin(), d.end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<ad::Parameter<double>> params{{"p", TD::from({3}, {1, 2, 3}, true)}};
  ad::Adam<double> opt({.learning_rate = 0.1});
  params[0].tensor.grad();
  opt.step(params);
  EXPECT_EQ(params[0].tensor[0], 1);
  EXPECT_EQ(params[0].tensor[2], 3);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<ad::Parameter<double>> params{{"p", TD::from({1}, {0.0}, true)}};
  ad::sum(params[0].tensor).backward();  // grad = 1
  ad::Adam<double> opt({.learning_rate = 0.1});
  opt.step(params);
  // lr * g / (|g| + eps) after bias correction.
  EXPECT_NEAR(params[0].tensor[0], -0.1 / (1.0 + 1e-8), 1e-12);
  EXPECT_EQ(opt.first_moments()[0].size(), 1u);
}

TEST(Adam, MinimisesQuadraticBowl) {
  std::vector<ad::Parameter<double>> params{{"x", TD::from({1}, {1.0}, true)}};
  ad::Adam<double> opt({.learning_rate = 0.05});
  for (int i = 0; i < 500; ++i) {
    ad::zero_grad(params);
    ad::sum(ad::mul(params[0].tensor, params[0].tensor)).backward();
    opt.step(params);
  }
  EXPECT_LT(std::abs(params[0].tensor[0]), 1e-3);
}

TEST(GradCheck, LinearMapIsExact) {
  Rng rng(5);
  auto x = random_tensor({3, 4}, rng, false);
  std::vector<ad::Parameter<double>> params{{"w", random_tensor({4, 2}, rng)}};
  auto f = [&] { return contract(ad::matmul(x, params[0].tensor), 77); };
  EXPECT_LT(ad::grad_check(f, params, {.coords_per_param = 0}), 1e-8);
}
