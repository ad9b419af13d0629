#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "evl/ops.hpp"
#include "test_util.hpp"

using namespace evl;
using namespace evl::test;

TEST(Tensor, ShapeInvariants) {
  TensorD t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at({1, 2}), 1.5);
  EXPECT_THROW(TensorD({2, 0}), DimensionError);
  EXPECT_THROW(TensorD({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Matmul, IdentityAndHandComputed) {
  auto id = constant(TensorD::matrix({{1, 0}, {0, 1}}));
  auto a = constant(TensorD::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(matmul(id, a).value(), a.value());
  auto b = constant(TensorD::matrix({{5}, {6}}));
  EXPECT_EQ(matmul(a, b).value(), TensorD::matrix({{17}, {39}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = constant(TensorD({2, 3}));
  auto b = constant(TensorD({2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesCentralDifferences) {
  const TensorD a0 = random_tensor({3, 3}, 1);
  const TensorD b0 = random_tensor({3, 3}, 2);
  VarD a = parameter(a0);
  backward(sum(matmul(a, constant(b0))));
  auto f = [&](const TensorD &a) {
    NoGradGuard ng;
    return sum(matmul(constant(a), constant(b0))).value()[0];
  };
  EXPECT_LE(max_rel_error(a.grad(), numeric_gradient(f, a0)), 1e-6);
}

TEST(Softmax, Examples) {
  auto y = softmax_lastdim(constant(TensorD::vector({0, 0, 0}).reshaped({1, 3}))).value();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-15);

  auto big = softmax_lastdim(constant(TensorD::matrix({{1000, 1000}}))).value();
  EXPECT_EQ(big[0], 0.5);
  EXPECT_EQ(big[1], 0.5);

  auto ln3 = softmax_lastdim(constant(TensorD::matrix({{0, std::log(3.0)}}))).value();
  EXPECT_NEAR(ln3[0], 0.25, 1e-15);
  EXPECT_NEAR(ln3[1], 0.75, 1e-15);
}

TEST(Softmax, RowsAreDistributions) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto y = softmax_lastdim(constant(random_tensor({4, 7}, seed, -30, 30))).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y[r * 7 + j], 0.0);
        s += y[r * 7 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  auto ones = constant(TensorD({2}, 1.0));
  auto zeros = constant(TensorD({2}, 0.0));
  auto c = layer_norm(constant(TensorD::matrix({{4, 4}})), ones, zeros).value();
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.0);

  auto y = layer_norm(constant(TensorD::matrix({{1, 3}})), ones, zeros, 1e-12).value();
  EXPECT_NEAR(y[0], -1.0, 1e-10);
  EXPECT_NEAR(y[1], 1.0, 1e-10);

  auto collapsed = layer_norm(constant(random_tensor({3, 2}, 4)), zeros, constant(TensorD({2}, 5.0))).value();
  for (auto v : collapsed.data()) EXPECT_EQ(v, 5.0);
}

TEST(Conv2d, TrivialKernels) {
  // 1x1 all-ones kernel over two constant-1 channels.
  auto x = constant(TensorD({2, 3, 3}, 1.0));
  auto w = constant(TensorD({1, 2, 1, 1}, 1.0));
  auto y = conv2d(x, w, constant(TensorD({1}, 0.0))).value();
  EXPECT_EQ(y.shape(), (Shape{1, 3, 3}));
  for (auto v : y.data()) EXPECT_EQ(v, 2.0);

  // Centered delta kernel with padding 1 is the identity.
  TensorD delta({1, 1, 3, 3});
  delta.at({0, 0, 1, 1}) = 1.0;
  auto img = random_tensor({1, 5, 6}, 3);
  auto id = conv2d(constant(img), constant(delta), VarD(), 1, 1).value();
  EXPECT_EQ(id, img);
}

TEST(Conv2d, MatchesNaiveLoops) {
  const TensorD x = random_tensor({1, 2, 4, 4}, 11);
  const TensorD w = random_tensor({3, 2, 3, 3}, 12);
  const TensorD b = random_tensor({3}, 13);
  auto y = conv2d(constant(x), constant(w), constant(b), 1, 1).value();
  expect_tensor_near(y, naive_conv2d(x, w, &b, 1, 1, 1), 1e-12);
}

TEST(Conv2d, MatchesNaiveLoopsOverShapeSweep) {
  std::uint64_t seed = 100;
  for (std::size_t n : {1, 2})
    for (std::size_t c : {1, 2, 3})
      for (std::size_t hw : {3, 5, 8})
        for (std::size_t k : {1, 3})
          for (std::size_t stride : {1, 2})
            for (std::size_t groups : {std::size_t{1}, c}) {
              const std::size_t pad = k / 2;
              const TensorD x = random_tensor({n, c, hw, hw}, seed++);
              const TensorD w = random_tensor({c, c / groups, k, k}, seed++);
              const TensorD b = random_tensor({c}, seed++);
              auto y = conv2d(constant(x), constant(w), constant(b), stride, pad, groups).value();
              auto ref = naive_conv2d(x, w, &b, stride, pad, groups);
              ASSERT_EQ(y.shape(), ref.shape());
              EXPECT_LE(max_abs_diff(y, ref), 1e-12) << "n=" << n << " c=" << c << " hw=" << hw << " k=" << k
                                                     << " s=" << stride << " g=" << groups;
            }
}

TEST(Conv2d, NonpositiveExtentIsDimensionError) {
  auto x = constant(TensorD({1, 2, 2}));
  auto w = constant(TensorD({1, 1, 3, 3}));
  EXPECT_THROW(conv2d(x, w, VarD(), 1, 0), DimensionError);
}

TEST(Upsample, NearestReplicatesBlocks) {
  auto x = constant(TensorD({1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  auto y = upsample(x, 4, 4, UpsampleMode::nearest).value();
  const double expect[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y.at({0, i, j}), expect[i][j]);
}

TEST(Upsample, BilinearConstantStaysConstant) {
  auto y = upsample(constant(TensorD({2, 3, 5}, 0.7)), 7, 11, UpsampleMode::bilinear).value();
  for (auto v : y.data()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Upsample, BilinearMatchesPerPixelFormula) {
  // Input is the linear field v(y, x) = 2y + x, so bilinear interpolation at
  // the half-pixel source coordinate src = clamp((i + 0.5) / 2 - 0.5, 0, 1)
  // reproduces 2*src_y + src_x exactly. Source coords: 0, .25, .75, 1.
  auto x = constant(TensorD({1, 2, 2}, std::vector<double>{0, 1, 2, 3}));
  auto y = upsample(x, 4, 4, UpsampleMode::bilinear).value();
  const double expect[4][4] = {
      {0.0, 0.25, 0.75, 1.0}, {0.5, 0.75, 1.25, 1.5}, {1.5, 1.75, 2.25, 2.5}, {2.0, 2.25, 2.75, 3.0}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at({0, i, j}), expect[i][j], 1e-15);
}

TEST(Upsample, DownscaleIsDimensionError) {
  EXPECT_THROW(upsample(constant(TensorD({1, 4, 4})), 2, 4, UpsampleMode::bilinear), DimensionError);
}

TEST(CrossEntropy, Examples) {
  auto saturated = cross_entropy(constant(TensorD::matrix({{1e6, 0, 0}})), {0}).value()[0];
  EXPECT_NEAR(saturated, 0.0, 1e-12);
  auto uniform = cross_entropy(constant(TensorD::matrix({{0.3, 0.3, 0.3}})), {2}).value()[0];
  EXPECT_NEAR(uniform, std::log(3.0), 1e-15);
  EXPECT_NEAR(uniform, 1.0986, 1e-4);
  EXPECT_THROW(cross_entropy(constant(TensorD::matrix({{0, 0, 0}})), {3}), ValidationError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  const TensorD logits = TensorD::matrix({{0.5, -1.0, 2.0}, {1.0, 0.0, -0.5}});
  const std::vector<std::size_t> labels{2, 0};
  VarD x = parameter(logits);
  backward(cross_entropy(x, labels));
  for (std::size_t b = 0; b < 2; ++b) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at({b, c}));
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = std::exp(logits.at({b, c})) / z;
      const double expected = (p - (c == labels[b] ? 1.0 : 0.0)) / 2.0;
      EXPECT_NEAR(x.grad().at({b, c}), expected, 1e-15);
    }
  }
}

TEST(Backward, AnalyticCases) {
  const TensorD x0 = random_tensor({5}, 7);
  VarD x = parameter(x0);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad()[i], 2 * x0[i]);

  VarD y = parameter(x0);
  backward(sum(add(y, y)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(y.grad()[i], 2.0);

  // Accumulates across calls until zeroed.
  backward(sum(y));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(y.grad()[i], 3.0);
  y.zero_grad();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(y.grad()[i], 0.0);
}

TEST(Backward, NonScalarIsUsageError) {
  VarD x = parameter(TensorD({3}, 1.0));
  EXPECT_THROW(backward(mul(x, x)), UsageError);
  EXPECT_THROW(backward(sum(constant(TensorD({3}, 1.0)))), UsageError);
}

TEST(Backward, FrozenTensorNeverGetsGradBuffer) {
  VarD frozen = constant(random_tensor({3, 3}, 5));
  VarD w = parameter(random_tensor({3, 3}, 6));
  backward(sum(matmul(frozen, w)));
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(GradTape, TopologicalAndUnique) {
  VarD a = parameter(random_tensor({2, 2}, 1));
  VarD b = parameter(random_tensor({2, 2}, 2));
  VarD c = matmul(a, b);
  VarD d = add(c, c);
  VarD loss = sum(mul(d, a));
  GradTape<double> tape(loss);
  const auto &nodes = tape.nodes();
  std::map<const Node<double> *, std::size_t> pos;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    EXPECT_TRUE(pos.emplace(nodes[i], i).second) << "node visited twice";
  }
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto &in : nodes[i]->inputs) {
      if (in->requires_grad) {
        EXPECT_LT(pos.at(in.get()), i);
      }
    }
  EXPECT_EQ(nodes.back(), loss.node());
  EXPECT_EQ(nodes.size(), 6u); // a, b, c, d, mul, sum
}

TEST(NoGrad, GuardStopsRecording) {
  VarD w = parameter(TensorD({2}, 1.0));
  {
    NoGradGuard ng;
    EXPECT_FALSE(mul(w, w).requires_grad());
  }
  EXPECT_TRUE(mul(w, w).requires_grad());
}

// Every differentiable op against central differences on random doubles.
TEST(OpGradients, AllOpsAgreeWithCentralDifferences) {
  const double tol = 1e-6;
  const TensorD m = random_tensor({3, 4}, 21);
  const TensorD wmat = random_tensor({4, 2}, 22);
  const TensorD vec4 = random_tensor({4}, 23, 0.5, 1.5);
  const TensorD img = random_tensor({2, 3, 5, 5}, 24);
  const TensorD seq = random_tensor({2, 3, 4}, 25);

  EXPECT_LE(op_gradient_error([&](const VarD &x) { return matmul(x, constant(wmat)); }, m), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return matmul(constant(m), x); }, wmat), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return bmm(x, x, true); }, seq), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return bmm(x, constant(random_tensor({2, 4, 3}, 5))); }, seq), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return softmax_lastdim(x); }, m), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return layer_norm(x, constant(vec4), constant(vec4)); }, m), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &g) { return layer_norm(constant(m), g, constant(vec4)); }, vec4), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return gelu(x); }, m), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return silu(x); }, m), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return sigmoid(x); }, m), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return relu(x); }, m), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return add_broadcast(x, constant(vec4)); }, m), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &b) { return add_broadcast(constant(seq), b); }, vec4), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return cross_entropy(x, {0, 3, 1}); }, m), tol);

  const TensorD w3 = random_tensor({4, 3, 3, 3}, 26);
  const TensorD wdw = random_tensor({3, 1, 3, 3}, 27);
  const TensorD bias3 = random_tensor({4}, 28);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return conv2d(x, constant(w3), constant(bias3), 2, 1); }, img), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &w) { return conv2d(constant(img), w, constant(bias3), 1, 1); }, w3), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &b) { return conv2d(constant(img), constant(w3), b, 1, 0); }, bias3), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return conv2d(x, constant(wdw), VarD(), 2, 1, 3); }, img), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &w) { return conv2d(constant(img), w, VarD(), 1, 1, 3); }, wdw), tol);

  const TensorD gamma = random_tensor({3}, 29, 0.5, 1.5);
  const TensorD beta = random_tensor({3}, 30);
  for (bool training : {true, false}) {
    auto bn = [&](const VarD &x, const VarD &g, const VarD &b) {
      BatchNormStats<double> stats(3);
      stats.running_mean = random_tensor({3}, 31);
      stats.running_var = random_tensor({3}, 32, 0.5, 2.0);
      return batch_norm(x, g, b, stats, training);
    };
    EXPECT_LE(op_gradient_error([&](const VarD &x) { return bn(x, constant(gamma), constant(beta)); }, img), tol);
    EXPECT_LE(op_gradient_error([&](const VarD &g) { return bn(constant(img), g, constant(beta)); }, gamma), tol);
    EXPECT_LE(op_gradient_error([&](const VarD &b) { return bn(constant(img), constant(gamma), b); }, beta), tol);
  }

  for (auto mode : {UpsampleMode::bilinear, UpsampleMode::nearest}) {
    EXPECT_LE(op_gradient_error([&](const VarD &x) { return upsample(x, 7, 9, mode); }, img), tol);
  }
  EXPECT_LE(op_gradient_error([](const VarD &x) { return global_avg_pool(x); }, img), tol);
  const TensorD s = random_tensor({2, 3}, 33);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return channel_scale(x, constant(s)); }, img), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &v) { return channel_scale(constant(img), v); }, s), tol);

  const TensorD sq = random_tensor({2, 3, 4, 4}, 34);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return patchify(x, 2); }, sq), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &x) { return prepend_token(x, constant(vec4)); }, seq), tol);
  EXPECT_LE(op_gradient_error([&](const VarD &t) { return prepend_token(constant(seq), t); }, vec4), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return select_token(x, 1); }, seq), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return merge_heads(split_heads(x, 2), 2); }, seq), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return mul(split_heads(x, 2), split_heads(x, 2)); }, seq), tol);
  EXPECT_LE(op_gradient_error([](const VarD &x) { return concat_last<double>({x, scale(x, 2.0)}); }, seq), tol);
}

TEST(SplitHeads, RoundTripAndLayout) {
  const TensorD x = random_tensor({2, 3, 6}, 40);
  auto split = split_heads(constant(x), 3).value();
  EXPECT_EQ(split.shape(), (Shape{6, 3, 2}));
  // Head h of sample b, token t holds columns [2h, 2h+2).
  EXPECT_EQ(split.at({1 * 3 + 2, 1, 0}), x.at({1, 1, 4}));
  EXPECT_EQ(merge_heads(constant(split), 3).value(), x);
}

TEST(Patchify, LayoutMatchesKernelOrder) {
  TensorD img({1, 2, 4, 4});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = double(i);
  auto p = patchify(constant(img), 2).value();
  EXPECT_EQ(p.shape(), (Shape{1, 4, 8}));
  // Patch 1 is the top-right 2x2 block; feature (c=1, dy=1, dx=0).
  EXPECT_EQ(p.at({0, 1, 1 * 4 + 1 * 2 + 0}), img.at({0, 1, 1, 2}));
}
