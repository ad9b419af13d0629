#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "evl/data/synth.hpp"
#include "evl/train/trainer.hpp"
#include "test_util.hpp"

using namespace evl;
using namespace evl::test;

namespace {

/// Gives `v` the gradient `g` through an ordinary backward pass.
void set_grad(ParamRegistry<double> &reg, const std::map<std::string, TensorD> &g) {
  reg.zero_grad();
  Var<double> total;
  for (const auto &[name, grad] : g) {
    Var<double> term = sum(mul(reg.get(name), constant(grad)));
    total = total.defined() ? add(total, term) : term;
  }
  backward(total);
}

std::vector<Sample> synth_split(std::size_t per_class, std::uint64_t seed) {
  return synth_generate(per_class, seed, 32).samples;
}

TrainConfig quick(std::size_t epochs, double lr, std::uint64_t seed = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.adam.lr = lr;
  c.seed = seed;
  return c;
}

bool bit_equal(const TensorD &a, const TensorD &b) {
  return a.shape() == b.shape() && std::memcmp(a.storage().data(), b.storage().data(), 8 * a.numel()) == 0;
}

std::filesystem::path scratch_file(const std::string &name) {
  return std::filesystem::temp_directory_path() / ("evl_" + name + "_" + std::to_string(::getpid()));
}

} // namespace

TEST(Adam, FirstStepIsLrTimesSign) {
  ParamRegistry<double> reg;
  reg.add("w", TensorD::vector({1.0, 2.0, -3.0}), true, "head");
  set_grad(reg, {{"w", TensorD::vector({0.3, -5.0, 1e-3})}});
  Adam<double> opt(AdamConfig{0.01});
  opt.step(reg);
  const auto &w = reg.get("w").value();
  EXPECT_NEAR(w[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w[1], 2.0 + 0.01 * 5.0 / (5.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[2], -3.0 - 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameterAndDecaysMoments) {
  ParamRegistry<double> reg;
  reg.add("w", TensorD::vector({0.5}), true, "head");
  Adam<double> opt(AdamConfig{0.1});
  set_grad(reg, {{"w", TensorD::vector({2.0})}});
  opt.step(reg);
  const double w1 = reg.get("w").value()[0];
  const double m1 = opt.moments().at("w").m[0], v1 = opt.moments().at("w").v[0];

  ParamRegistry<double> fresh;
  fresh.add("w", TensorD::vector({0.5}), true, "head");
  Adam<double> idle(AdamConfig{0.1});
  set_grad(fresh, {{"w", TensorD::vector({0.0})}});
  idle.step(fresh);
  EXPECT_EQ(fresh.get("w").value()[0], 0.5);

  set_grad(reg, {{"w", TensorD::vector({0.0})}});
  opt.step(reg);
  EXPECT_DOUBLE_EQ(opt.moments().at("w").m[0], 0.9 * m1);
  EXPECT_DOUBLE_EQ(opt.moments().at("w").v[0], 0.999 * v1);
  // Momentum keeps moving the parameter even without a fresh gradient.
  EXPECT_LT(reg.get("w").value()[0], w1);
}

TEST(Adam, MatchesReferenceOnQuadratic) {
  // f(w) = (w - 3)^2, three steps; reference coded straight from the update rule.
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double rw = -1.0, rm = 0, rv = 0;
  std::vector<double> ref;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2 * (rw - 3);
    rm = b1 * rm + (1 - b1) * g;
    rv = b2 * rv + (1 - b2) * g * g;
    const double mh = rm / (1 - std::pow(b1, t)), vh = rv / (1 - std::pow(b2, t));
    rw -= lr * mh / (std::sqrt(vh) + eps);
    ref.push_back(rw);
  }

  ParamRegistry<double> reg;
  auto w = reg.add("w", TensorD::vector({-1.0}), true, "head");
  Adam<double> opt(AdamConfig{lr, b1, b2, eps});
  for (int t = 0; t < 3; ++t) {
    reg.zero_grad();
    auto d = sub(w, constant(TensorD::vector({3.0})));
    backward(sum(mul(d, d)));
    opt.step(reg);
    EXPECT_NEAR(w.value()[0], ref[t], 1e-12);
  }
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  ParamRegistry<double> reg;
  reg.add("good", TensorD::vector({1.0}), true, "head");
  reg.add("bad.weight", TensorD::vector({1.0}), true, "head");
  set_grad(reg, {{"good", TensorD::vector({1.0})}, {"bad.weight", TensorD::vector({NAN})}});
  Adam<double> opt;
  try {
    opt.step(reg);
    FAIL();
  } catch (const NumericError &e) {
    EXPECT_NE(std::string(e.what()).find("bad.weight"), std::string::npos);
  }
  EXPECT_EQ(reg.get("good").value()[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Adam, FrozenParametersUntouchedAndMomentsOnlyForTrainable) {
  auto model = make_model<double>(ModelConfig::toy(ModelKind::hybrid), 3);
  auto &reg = model->params();
  const auto before = reg.snapshot();
  const auto data = synth_split(2, 5);
  const auto batch = stack<double>(data);
  Adam<double> opt(AdamConfig{1e-2});
  model->set_training(true);
  for (int i = 0; i < 3; ++i) {
    reg.zero_grad();
    backward(cross_entropy(model->forward(batch.images), batch.labels));
    opt.step(reg);
  }
  EXPECT_EQ(opt.moment_count(), reg.count_trainable());
  std::set<std::string> changed_groups;
  for (const auto &e : reg.entries()) {
    const bool same = bit_equal(e.var.value(), before.at(e.name));
    if (!e.var.requires_grad()) {
      EXPECT_TRUE(same) << e.name;
    }
    if (!same) changed_groups.insert(e.group);
  }
  EXPECT_EQ(changed_groups, (std::set<std::string>{"lora", "head", "bridge"}));
}

TEST(Trainer, ZeroLearningRateKeepsParameters) {
  auto model = make_model<double>(ModelConfig::toy(ModelKind::vitlora), 2);
  const auto before = model->params().snapshot();
  Trainer<double> tr(*model, quick(2, 0.0));
  const auto res = tr.fit(synth_split(4, 1), synth_split(2, 2));
  EXPECT_EQ(res.history.rows.size(), 2u);
  for (const auto &e : model->params().entries()) EXPECT_TRUE(bit_equal(e.var.value(), before.at(e.name))) << e.name;
  EXPECT_EQ(res.history.csv().substr(0, 45), "epoch,train_loss,val_loss,train_acc,val_acc\n1");
}

TEST(Trainer, HistoryIsDeterministic) {
  auto run = [] {
    auto model = make_model<double>(ModelConfig::toy(ModelKind::hybrid), 4);
    Trainer<double> tr(*model, quick(2, 1e-3, 9));
    return tr.fit(synth_split(4, 1), synth_split(2, 2)).history.csv();
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 3);
}

TEST(Trainer, BestEpochHasLowestValidationLoss) {
  auto model = make_model<double>(ModelConfig::toy(ModelKind::vitlora), 5);
  Trainer<double> tr(*model, quick(3, 1e-2));
  const auto res = tr.fit(synth_split(4, 3), synth_split(2, 4));
  double lowest = res.history.rows[0].val_loss;
  for (const auto &r : res.history.rows) lowest = std::min(lowest, r.val_loss);
  EXPECT_EQ(res.best_val_loss, lowest);
  EXPECT_EQ(res.history.rows[res.best_epoch - 1].val_loss, lowest);

  // Restoring the best weights reproduces that epoch's validation loss.
  restore_best(*model, res);
  const auto vb = stack<double>(synth_split(2, 4));
  const auto [loss, acc] = loss_and_accuracy(predict_from_prefix(*model, vb.images), vb.labels);
  EXPECT_EQ(loss, lowest);
  (void)acc;
}

TEST(Trainer, CallbackCanEndTraining) {
  auto model = make_model<double>(ModelConfig::toy(ModelKind::vitlora), 6);
  Trainer<double> tr(*model, quick(10, 1e-3));
  const auto res = tr.fit(synth_split(2, 1), synth_split(1, 2), [](const EpochStats &s) { return s.epoch < 2; });
  EXPECT_TRUE(res.stopped_by_callback);
  EXPECT_EQ(res.history.rows.size(), 2u);
}

TEST(Trainer, RejectsEmptySplitsAndBadConfig) {
  auto model = make_model<double>(ModelConfig::toy(ModelKind::vitlora), 6);
  Trainer<double> tr(*model, quick(1, 1e-3));
  EXPECT_THROW(tr.fit({}, synth_split(1, 2)), ValidationError);
  EXPECT_THROW(tr.fit(synth_split(1, 2), {}), ValidationError);
  auto bad = quick(1, 1e-3);
  bad.batch_size = 0;
  EXPECT_THROW(Trainer<double>(*model, bad), ConfigError);
  bad = quick(1, -1.0);
  EXPECT_THROW(Trainer<double>(*model, bad), ConfigError);
}

TEST(Trainer, FloatTrainingLossDecreasesOnSynthetic) {
  // Toy hybrid in single precision on the standard synthetic set: the
  // training loss falls over the first five epochs for at least four of
  // five seeds.
  const auto data = synth_generate(300, 7, 32).samples;
  SplitPlan plan;
  plan.seed = 7;
  plan = make_split(subjects_of(data), plan);
  const auto train = select_partitions(data, plan, {0}), val = select_partitions(data, plan, {1});
  int decreasing = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto model = make_model<float>(ModelConfig::toy(ModelKind::hybrid), seed);
    TrainConfig cfg = quick(5, 2e-3, seed);
    cfg.batch_size = 16;
    Trainer<float> tr(*model, cfg);
    const auto h = tr.fit(train, val).history.rows;
    bool ok = true;
    for (std::size_t i = 1; i < h.size(); ++i) ok = ok && h[i].train_loss < h[i - 1].train_loss;
    decreasing += ok;
  }
  EXPECT_GE(decreasing, 4);
}

TEST(Checkpoint, RoundTripReproducesForwardExactly) {
  auto cfg = ModelConfig::toy(ModelKind::effnet);
  auto model = make_model<double>(cfg, 7);
  Trainer<double> tr(*model, quick(1, 1e-2));
  tr.fit(synth_split(2, 1), synth_split(1, 2));
  const auto path = scratch_file("ckpt");
  save_checkpoint(path, model->params(), &tr.optimizer(), "model=effnet\n", 1, tr.rng_state());

  auto other = make_model<double>(cfg, 99);
  Adam<double> opt;
  const auto ck = load_checkpoint(path);
  apply_checkpoint(ck, other->params(), &opt);
  EXPECT_EQ(ck.config, "model=effnet\n");
  EXPECT_EQ(ck.epoch, 1u);
  EXPECT_EQ(opt.steps(), tr.optimizer().steps());
  EXPECT_EQ(opt.moment_count(), tr.optimizer().moment_count());

  const auto probe = random_tensor({2, 3, 32, 32}, 5);
  model->set_training(false);
  other->set_training(false);
  EXPECT_TRUE(bit_equal(model->forward(probe).value(), other->forward(probe).value()));
  for (const auto &[name, buf] : model->params().buffers()) {
    EXPECT_TRUE(bit_equal(*buf, *other->params().buffers().at(name))) << name;
  }

  Trainer<double> resumed(*other, quick(1, 1e-2));
  resumed.set_rng_state(ck.rng_state);
  EXPECT_EQ(resumed.rng()(), tr.rng()());
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedOrCorruptFileIsRejectedWholesale) {
  auto model = make_model<double>(ModelConfig::toy(ModelKind::vitlora), 8);
  const auto bytes = encode_checkpoint(model->params(), static_cast<const Adam<double> *>(nullptr), "", 0, "");
  auto target = make_model<double>(ModelConfig::toy(ModelKind::vitlora), 9);
  const auto before = target->params().snapshot();
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<unsigned char> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_checkpoint(t), LoadError) << cut;
  }
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), LoadError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad), LoadError);

  // Shape mismatch is detected before any parameter is written.
  auto wide_cfg = ModelConfig::toy(ModelKind::vitlora);
  wide_cfg.vit.head_hidden = 16;
  auto wide = make_model<double>(wide_cfg, 1);
  const auto ck = decode_checkpoint(encode_checkpoint(wide->params(), static_cast<const Adam<double> *>(nullptr), "",
                                                      0, ""));
  EXPECT_THROW(apply_checkpoint(ck, target->params(), static_cast<Adam<double> *>(nullptr)), LoadError);
  for (const auto &e : target->params().entries()) EXPECT_TRUE(bit_equal(e.var.value(), before.at(e.name)));
}

TEST(Checkpoint, AdapterOnlyRestoresOntoFreshBase) {
  auto cfg = ModelConfig::toy(ModelKind::hybrid);
  auto model = make_model<double>(cfg, 10);
  Trainer<double> tr(*model, quick(1, 1e-2));
  tr.fit(synth_split(2, 1), synth_split(1, 2));
  const auto bytes =
      encode_checkpoint(model->params(), &tr.optimizer(), "", 1, tr.rng_state(), CheckpointScope::trainable);
  const auto ck = decode_checkpoint(bytes);
  EXPECT_FALSE(ck.has_section("buffer/"));
  std::size_t stored = 0;
  for (const auto &[name, e] : ck.entries)
    if (name.starts_with("param/")) stored += e.values.size();
  EXPECT_EQ(stored, model->params().count_trainable());

  auto fresh = make_model<double>(cfg, 10);
  const auto probe = random_tensor({2, 3, 32, 32}, 6);
  EXPECT_FALSE(bit_equal(model->forward(probe).value(), fresh->forward(probe).value()));
  apply_checkpoint(ck, fresh->params(), static_cast<Adam<double> *>(nullptr));
  EXPECT_TRUE(bit_equal(model->forward(probe).value(), fresh->forward(probe).value()));
}

TEST(Checkpoint, SinglePrecisionRoundTrip) {
  auto cfg = ModelConfig::toy(ModelKind::vitlora);
  auto model = make_model<float>(cfg, 12);
  auto other = make_model<float>(cfg, 13);
  apply_checkpoint(decode_checkpoint(encode_checkpoint(model->params(), static_cast<const Adam<float> *>(nullptr), "",
                                                       0, "")),
                   other->params(), static_cast<Adam<float> *>(nullptr));
  std::mt19937_64 rng(1);
  const auto probe = Tensor<float>::randn({1, 3, 32, 32}, rng);
  const auto a = model->forward(probe).value(), b = other->forward(probe).value();
  EXPECT_EQ(std::memcmp(a.storage().data(), b.storage().data(), 4 * a.numel()), 0);
}
