#include <gtest/gtest.h>

#include <cmath>

#include "synfoc/synfoc.hpp"

using namespace synfoc;

namespace {

template <typename T>
Tensor<T> random_images(Rng& rng, std::size_t n, std::size_t h, std::size_t w) {
  Tensor<T> x({n, 1, h, w});
  for (auto& v : x.values()) v = static_cast<T>(uniform(rng, 0, 1));
  return x;
}

template <typename T>
void randomize(const std::vector<Parameter<T>*>& params, Rng& rng, double scale) {
  for (auto* p : params) {
    for (auto& v : p->value.values()) v = static_cast<T>(uniform(rng, -scale, scale));
  }
}

}  // namespace

TEST(ConvSegNet, LogitShapeMatchesInput) {
  Rng rng(1);
  ConvSegNet<float> net(2, rng);
  const auto logits = net.predict_logits(random_images<float>(rng, 3, 16, 24));
  EXPECT_EQ(logits.shape(), (Shape{3, 3, 16, 24}));
}

TEST(ConvSegNet, ZeroHeadGivesUniformSoftmax) {
  Rng rng(4);
  ConvSegNet<float> net(2, rng, {4, 4, 4});
  net.head_weight().value.fill(0.0f);
  const auto p = softmax_channels(net.predict_logits(random_images<float>(rng, 2, 8, 8)));
  for (float v : p.values()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7f);
}

TEST(ConvSegNet, RejectsIndivisibleInput) {
  Rng rng(1);
  ConvSegNet<float> net(1, rng, {2, 2, 2});
  EXPECT_THROW(net.predict_logits(random_images<float>(rng, 1, 10, 8)), ConfigError);
  EXPECT_THROW(net.predict_logits(Tensor<float>({1, 2, 8, 8})), ConfigError);
}

TEST(FoundationSegNet, HalfResolutionLogits) {
  Rng rng(2);
  FoundationSegNet<float> net(1, rng);
  const auto x = random_images<float>(rng, 2, 64, 64);
  EXPECT_EQ(net.predict_logits(x).shape(), (Shape{2, 2, 32, 32}));
  const auto p = found_probs(net, x);
  ASSERT_EQ(p.shape(), (Shape{2, 2, 64, 64}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 64; ++i) {
      for (std::size_t j = 0; j < 64; ++j) {
        EXPECT_NEAR(p.at(n, 0, i, j) + p.at(n, 1, i, j), 1.0f, 1e-5f);
      }
    }
  }
}

TEST(FoundationSegNet, RejectsZeroRank) {
  Rng rng(2);
  EXPECT_THROW(FoundationSegNet<float>(1, rng, 0), ConfigError);
}

TEST(FoundationSegNet, ParameterGroupsPartitionTheNetwork) {
  Rng rng(3);
  FoundationSegNet<float> net(2, rng, 4, {4, 6, 8});
  EXPECT_EQ(net.backbone_parameters().size(), 12u);
  EXPECT_EQ(net.adapter_parameters().size(), 6u);
  EXPECT_EQ(net.decoder_parameters().size(), 6u);
  EXPECT_EQ(net.parameters().size(), 24u);
  EXPECT_EQ(net.trainable_parameters().size(), 18u);
  net.freeze_backbone(rng);
  EXPECT_EQ(net.trainable_parameters().size(), 12u);
  for (auto* p : net.backbone_parameters()) EXPECT_FALSE(p->trainable);
}

TEST(FoundationSegNet, AdapterIsIdentityWhileBIsZero) {
  for (std::uint64_t c = 0; c < 100; ++c) {
    Rng rng(derive_seed(0xAD, {c}));
    FoundationSegNet<double> plain(1 + c % 2, rng, 1 + c % 4, {3, 4, 5});
    randomize(plain.parameters(), rng, 0.5);
    FoundationSegNet<double> adapted = plain;
    adapted.freeze_backbone(rng);
    randomize(adapted.adapter_parameters(), rng, 2.0);
    for (auto* p : adapted.adapter_parameters()) {
      if (p->name.ends_with("lora_b")) p->value.fill(0.0);
    }
    ASSERT_TRUE(adapted.adapters_enabled());
    const auto x = random_images<double>(rng, 2, 8, 8);
    ASSERT_EQ(adapted.predict_logits(x), plain.predict_logits(x)) << "case " << c;
  }
}

TEST(FoundationSegNet, NonzeroAdapterChangesOutput) {
  Rng rng(5);
  FoundationSegNet<double> net(1, rng, 2, {3, 4, 5});
  const auto x = random_images<double>(rng, 1, 8, 8);
  net.freeze_backbone(rng);
  const auto before = net.predict_logits(x);
  for (auto* p : net.adapter_parameters()) p->value.fill(0.3);
  EXPECT_NE(net.predict_logits(x), before);
}

TEST(FoundationSegNet, FrozenBackboneSurvivesTraining) {
  for (std::uint64_t c = 0; c < 100; ++c) {
    Rng rng(derive_seed(0xF2, {c}));
    FoundationSegNet<double> net(1, rng, 2, {2, 3, 4});
    net.freeze_backbone(rng);
    std::vector<Tensor<double>> snapshot;
    for (auto* p : net.backbone_parameters()) snapshot.push_back(p->value);
    Optimizer<double> opt(c % 2 ? OptimizerConfig::adamw(1e-2, 0.9, 0.999, 0.1) : OptimizerConfig::sgd(0.1, 0.9, 1e-4));
    for (int step = 0; step < 2; ++step) {
      Tape<double> tape;
      auto out = net.forward(tape, tape.constant(random_images<double>(rng, 1, 8, 8)), Mode::kTrain);
      tape.backward(sum(square(out)));
      opt.step(net.trainable_parameters());
      zero_grads(net.trainable_parameters());
    }
    const auto bb = net.backbone_parameters();
    for (std::size_t i = 0; i < bb.size(); ++i) {
      ASSERT_EQ(bb[i]->value, snapshot[i]) << bb[i]->name << " case " << c;
      for (double g : bb[i]->grad.values()) ASSERT_EQ(g, 0.0);
    }
    double moved = 0;
    for (auto* p : net.adapter_parameters()) {
      for (double v : p->value.values()) moved += std::abs(v);
    }
    ASSERT_GT(moved, 0.0);
  }
}

TEST(Ema, ConstantStudentClosedForm) {
  for (std::uint64_t c = 0; c < 100; ++c) {
    Rng rng(derive_seed(0xE3A, {c}));
    const double decay = uniform(rng, 0.0, 1.0);
    const int steps = static_cast<int>(uniform_int(rng, 1, 30));
    ConvSegNet<double> net(1, rng, {2, 2, 2});
    TeacherStudentPair<ConvSegNet<double>> pair(net, decay);
    randomize(pair.student.parameters(), rng, 1.0);
    const auto s = pair.student.parameters();
    const auto t = pair.teacher.parameters();
    std::vector<Tensor<double>> t0;
    for (auto* p : t) t0.push_back(p->value);
    for (int k = 0; k < steps; ++k) ema_update(pair);
    const double dn = std::pow(decay, steps);
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t k = 0; k < t[i]->value.size(); ++k) {
        ASSERT_NEAR(t[i]->value[k], dn * t0[i][k] + (1 - dn) * s[i]->value[k], 1e-12) << "case " << c;
      }
    }
  }
}

TEST(Ema, HandValueAndTwoStepComposition) {
  Rng rng(12);
  ConvSegNet<double> net(1, rng, {2, 2, 2});
  for (auto* p : net.parameters()) p->value.fill(1.0);
  TeacherStudentPair<ConvSegNet<double>> pair(net, 0.9);
  for (auto* p : pair.student.parameters()) p->value.fill(0.0);
  ema_update(pair);
  EXPECT_DOUBLE_EQ(pair.teacher.head_bias().value[0], 0.9);
  ema_update(pair);
  TeacherStudentPair<ConvSegNet<double>> once(net, 0.81);
  for (auto* p : once.student.parameters()) p->value.fill(0.0);
  ema_update(once);
  EXPECT_NEAR(pair.teacher.head_bias().value[0], once.teacher.head_bias().value[0], 1e-15);
}

TEST(Ema, BoundaryDecays) {
  Rng rng(9);
  ConvSegNet<double> net(1, rng, {2, 2, 2});
  TeacherStudentPair<ConvSegNet<double>> keep(net, 1.0), copy(net, 0.0);
  randomize(keep.student.parameters(), rng, 1.0);
  randomize(copy.student.parameters(), rng, 1.0);
  ema_update(keep);
  ema_update(copy);
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    EXPECT_EQ(keep.teacher.parameters()[i]->value, net.parameters()[i]->value);
    EXPECT_EQ(copy.teacher.parameters()[i]->value, copy.student.parameters()[i]->value);
  }
  EXPECT_THROW((TeacherStudentPair<ConvSegNet<double>>(net, 1.5)), ConfigError);
}

TEST(Ema, FoundationTeacherSkipsBackbone) {
  Rng rng(10);
  FoundationSegNet<double> net(1, rng, 2, {2, 3, 4});
  net.freeze_backbone(rng);
  TeacherStudentPair<FoundationSegNet<double>> pair(net, 0.5);
  for (auto* p : pair.student.backbone_parameters()) p->value.fill(7.0);
  randomize(pair.student.decoder_parameters(), rng, 1.0);
  ema_update(pair);
  const auto tb = pair.teacher.backbone_parameters();
  const auto nb = net.backbone_parameters();
  for (std::size_t i = 0; i < tb.size(); ++i) EXPECT_EQ(tb[i]->value, nb[i]->value);
  EXPECT_NE(pair.teacher.decoder_parameters()[0]->value, net.decoder_parameters()[0]->value);
}
