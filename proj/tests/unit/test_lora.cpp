#include <sstream>

#include <gtest/gtest.h>

#include "evl/model.hpp"
#include "evl/param_count.hpp"
#include "test_util.hpp"

using namespace evl;
using namespace evl::test;

namespace {

Linear<double> frozen_linear(ParamRegistry<double> &reg, const std::string &name, std::size_t din, std::size_t dout,
                             std::uint64_t seed) {
  Linear<double> lin(reg, name, din, dout, false, "vit");
  lin.weight.mutable_value() = random_tensor({din, dout}, seed);
  lin.bias.mutable_value() = random_tensor({dout}, seed + 1);
  return lin;
}

} // namespace

TEST(LoraAttach, ZeroInitForwardIsBitIdentical) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "q", 6, 5, 1);
  auto ad = attach(base, 2, 7, reg, "q.lora");
  auto x = constant(random_tensor({3, 6}, 3));
  EXPECT_EQ(lora_forward(x, base.weight, ad).value(), matmul(x, base.weight).value());
  for (auto v : ad.B.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LoraAttach, CountsAndShapes) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "w", 768, 768, 1);
  auto ad = attach(base, 4, 0, reg, "w.lora");
  EXPECT_EQ(ad.trainable_count(), 6144u);
  EXPECT_EQ(ad.A.shape(), (Shape{4, 768}));
  EXPECT_EQ(ad.B.shape(), (Shape{768, 4}));

  // Per-head view: one head's 768x64 slice.
  ParamRegistry<double> reg2;
  auto head = make_adapter(reg2, "h0", 768, 64, 4, 0);
  EXPECT_EQ(head.B.shape(), (Shape{768, 4}));
  EXPECT_EQ(head.A.shape(), (Shape{4, 64}));
}

TEST(LoraAttach, BaseWeightsUntouchedAndSeeded) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "w", 8, 8, 1);
  const TensorD before = base.weight.value();
  auto a1 = attach(base, 2, 42, reg, "w.lora1");
  EXPECT_EQ(base.weight.value(), before);
  // A is seeded N(0, 0.02): nonzero, small, reproducible for the same name.
  double m = 0;
  for (auto v : a1.A.value().data()) m = std::max(m, std::abs(v));
  EXPECT_GT(m, 0.0);
  EXPECT_LT(m, 0.2);
  ParamRegistry<double> reg2;
  auto base2 = frozen_linear(reg2, "w", 8, 8, 1);
  auto a2 = attach(base2, 2, 42, reg2, "w.lora1");
  EXPECT_EQ(a1.A.value(), a2.A.value());
}

TEST(LoraAttach, RequiresFrozenBase) {
  ParamRegistry<double> reg;
  Linear<double> lin(reg, "w", 4, 4, true, "head");
  EXPECT_THROW(attach(lin, 2, 0, reg, "w.lora"), UsageError);
}

TEST(LoraAttach, RankAboveFullRankWarnsButProceeds) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "w", 3, 2, 1);
  std::ostringstream captured;
  auto *old = std::clog.rdbuf(captured.rdbuf());
  auto ad = attach(base, 5, 0, reg, "w.lora");
  std::clog.rdbuf(old);
  EXPECT_TRUE(ad.exceeds_full_rank);
  EXPECT_NE(captured.str().find("exceeds full rank"), std::string::npos);
  EXPECT_EQ(ad.trainable_count(), 25u);
}

TEST(LoraForward, HandComputed) {
  ParamRegistry<double> reg;
  Linear<double> base(reg, "w", 2, 2, false, "vit", false);
  base.weight.mutable_value() = TensorD::matrix({{1, 0}, {0, 1}});
  auto ad = attach(base, 1, 0, reg, "w.lora");
  ad.B.mutable_value() = TensorD::matrix({{1}, {0}});
  ad.A.mutable_value() = TensorD::matrix({{0, 1}});
  auto h = lora_forward(constant(TensorD::matrix({{1, 2}})), base.weight, ad).value();
  EXPECT_EQ(h, TensorD::matrix({{1, 3}}));
}

TEST(LoraForward, TwoBranchEqualsMergedWeight) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    ParamRegistry<double> reg;
    auto base = frozen_linear(reg, "w", 7, 5, 10 * s);
    auto ad = attach(base, 3, s, reg, "w.lora");
    ad.B.mutable_value() = random_tensor({7, 3}, 10 * s + 5);
    const TensorD x = random_tensor({4, 7}, 10 * s + 6);
    // Oracle: dense W + B A built by explicit loops.
    TensorD merged = base.weight.value();
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t r = 0; r < 3; ++r) merged.at({i, j}) += ad.B.value().at({i, r}) * ad.A.value().at({r, j});
    auto two_branch = lora_forward(constant(x), base.weight, ad).value();
    auto dense = matmul(constant(x), constant(merged)).value();
    EXPECT_LE(max_rel_error(two_branch, dense, 1e-300), 1e-10);
    expect_tensor_near(merge(base.weight.value(), ad), merged, 1e-14);
  }
}

TEST(LoraForward, ShapeMismatchIsDimensionError) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "w", 4, 3, 1);
  auto other = frozen_linear(reg, "v", 3, 3, 2);
  auto ad = attach(base, 2, 0, reg, "w.lora");
  EXPECT_THROW(lora_forward(constant(TensorD({1, 3})), other.weight, ad), DimensionError);
}

TEST(LoraMerge, ZeroDeltaAndRoundTrip) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "w", 6, 6, 1);
  auto ad = attach(base, 2, 0, reg, "w.lora");
  EXPECT_EQ(merge(base.weight.value(), ad), base.weight.value());

  ad.B.mutable_value() = random_tensor({6, 2}, 9);
  const TensorD merged = merge(base.weight.value(), ad);
  EXPECT_NE(merged, base.weight.value());
  // Pure subtraction is close; AdaptedLinear restores the exact bits.
  EXPECT_LE(max_abs_diff(unmerge(merged, ad), base.weight.value()), 1e-15);

  AdaptedLinear<double> proj(reg, "p", 6, 6, false, "vit");
  proj.base.weight.mutable_value() = random_tensor({6, 6}, 11);
  proj.attach_fused(reg, 2, 0, 0.02);
  proj.fused->B.mutable_value() = random_tensor({6, 2}, 12);
  const TensorD w0 = proj.base.weight.value();
  const TensorD x = random_tensor({3, 6}, 13);
  const TensorD y0 = proj(constant(x)).value();
  proj.merge();
  EXPECT_TRUE(proj.merged());
  EXPECT_LE(max_rel_error(proj(constant(x)).value(), y0, 1e-300), 1e-10);
  proj.unmerge();
  EXPECT_EQ(proj.base.weight.value(), w0);
  EXPECT_EQ(proj(constant(x)).value(), y0);
}

TEST(LoraGradients, FlowToAdaptersOnly) {
  ParamRegistry<double> reg;
  auto base = frozen_linear(reg, "w", 5, 4, 1);
  auto ad = attach(base, 2, 3, reg, "w.lora");
  backward(sum(lora_forward(constant(random_tensor({3, 5}, 2)), base.weight, ad)));
  EXPECT_FALSE(base.weight.has_grad());
  EXPECT_FALSE(base.bias.has_grad());
  EXPECT_TRUE(ad.A.has_grad());
  EXPECT_TRUE(ad.B.has_grad());
}

TEST(LoraPerHead, DeltaWeightIsColumnBlocks) {
  ParamRegistry<double> reg;
  AdaptedLinear<double> proj(reg, "p", 6, 4, false, "vit");
  proj.attach_per_head(reg, 2, 2, 0, 0.02);
  ASSERT_EQ(proj.per_head.size(), 2u);
  for (std::size_t h = 0; h < 2; ++h) proj.per_head[h].B.mutable_value() = random_tensor({6, 2}, 7 + h);
  const TensorD dw = proj.delta_weight();
  const TensorD d0 = proj.per_head[0].delta_weight(), d1 = proj.per_head[1].delta_weight();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_EQ(dw.at({i, j}), d0.at({i, j}));
      EXPECT_EQ(dw.at({i, j + 2}), d1.at({i, j}));
    }
  const TensorD x = random_tensor({3, 6}, 8);
  auto y = proj(constant(x)).value();
  auto ref = matmul(constant(x), constant(proj.base.weight.value() + dw)).value();
  EXPECT_LE(max_abs_diff(y, ref), 1e-14);
  EXPECT_EQ(proj.adapter_trainable_count(), 2u * 2u * (6u + 2u));
}

// Closed-form counts against hand arithmetic and against allocated models.

TEST(CountTrainable, FullSizeHybrid) {
  auto b = count_trainable(ModelConfig::full(ModelKind::hybrid));
  EXPECT_EQ(b.lora, 12u * 3u * 4u * (768u + 768u));
  EXPECT_EQ(b.lora, 221184u);
  EXPECT_EQ(b.head, 768u * 256u + 256u + 256u * 3u + 3u);
  EXPECT_EQ(b.head, 197635u);
  EXPECT_EQ(b.bridge, 256u * 3u + 3u);
  EXPECT_EQ(b.bridge, 771u);
  EXPECT_EQ(b.total, 419590u);
  EXPECT_EQ(b.backbone, 0u);
  EXPECT_EQ(b.vit, 0u);
}

TEST(CountTrainable, PlacementsAndRanks) {
  auto cfg = ModelConfig::full(ModelKind::hybrid);
  cfg.vit.lora.rank = 0;
  auto none = count_trainable(cfg);
  EXPECT_EQ(none.lora, 0u);
  EXPECT_EQ(none.total, 197635u + 771u);

  cfg.vit.lora.rank = 4;
  cfg.vit.lora.blocks = BlockPlacement::last_two;
  EXPECT_EQ(count_trainable(cfg).lora, 2u * 3u * 4u * 1536u);
  EXPECT_EQ(count_trainable(cfg).lora, 36864u);

  cfg.vit.lora.blocks = BlockPlacement::all;
  cfg.vit.lora.rank = 8;
  EXPECT_EQ(count_trainable(cfg).total, 640774u);

  cfg.vit.lora.rank = 4;
  cfg.vit.lora.mode = LoraMode::per_head;
  EXPECT_EQ(count_trainable(cfg).lora, 12u * 3u * 12u * 4u * (768u + 64u));

  auto vit = count_trainable(ModelConfig::full(ModelKind::vitlora));
  EXPECT_EQ(vit.total, 418819u);
  EXPECT_EQ(vit.bridge, 0u);
}

TEST(CountTrainable, MonotoneInRank) {
  auto cfg = ModelConfig::full(ModelKind::hybrid);
  std::size_t prev = 0;
  for (std::size_t r : {1, 2, 4, 16, 32}) {
    cfg.vit.lora.rank = r;
    const auto n = count_trainable(cfg).lora;
    EXPECT_GT(n, prev);
    prev = n;
  }
}

TEST(CountTrainable, MatchesAllocatedToyModels) {
  for (auto kind : {ModelKind::vitlora, ModelKind::effnet, ModelKind::hybrid}) {
    for (auto mode : {LoraMode::fused, LoraMode::per_head}) {
      for (bool frozen_bb : {true, false}) {
        auto cfg = ModelConfig::toy(kind);
        cfg.vit.lora.mode = mode;
        cfg.backbone.frozen = frozen_bb;
        auto model = make_model<double>(cfg, 1);
        auto b = count_trainable(cfg);
        const auto groups = model->params().trainable_by_group();
        auto group = [&](const char *g) { return groups.count(g) ? groups.at(g) : std::size_t{0}; };
        EXPECT_EQ(b.total, model->params().count_trainable()) << to_string(kind);
        EXPECT_EQ(b.frozen, model->params().count_frozen()) << to_string(kind);
        EXPECT_EQ(b.lora, group("lora"));
        EXPECT_EQ(b.head, group("head"));
        EXPECT_EQ(b.bridge, group("bridge"));
        EXPECT_EQ(b.backbone, group("backbone"));
      }
    }
  }
}
