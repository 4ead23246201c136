#include <gtest/gtest.h>

#include "dfbf/checkpoint.hpp"
#include "dfbf/train.hpp"

using namespace dfbf;

namespace {

NetworkGraph<float> fresh(std::uint64_t seed) {
  auto g = build_resnet_tiny<float>({4, 8}, {1, 1}, 4);
  Rng rng(seed);
  g.init_parameters(rng);
  return g;
}

TrainConfig quick() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(Train, DeterministicPerSeed) {
  ShapesOptions o;
  o.size = 16;
  o.max_offset = 2;
  o.min_radius = 3;
  o.max_radius = 6;
  const auto ds = generate_shapes_dataset(1, 16, o);
  auto a = fresh(2), b = fresh(2);
  const auto ha = train_supervised(a, ds, quick());
  const auto hb = train_supervised(b, ds, quick());
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
  ASSERT_EQ(ha.size(), 8u);
  for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_EQ(ha[i].loss, hb[i].loss);
  EXPECT_EQ(a.mode(), GraphMode::Eval);
  for (const auto& [name, v] : a.tensors()) EXPECT_FALSE(v.has_grad()) << name;
  EXPECT_EQ(evaluate(a, ds).accuracy, evaluate(b, ds).accuracy);
}

TEST(Train, CosineScheduleEndsNearZero) {
  const auto ds = generate_shapes_dataset(1, 8, {.size = 16, .max_offset = 2, .min_radius = 3, .max_radius = 6});
  auto g = fresh(3);
  const auto h = train_supervised(g, ds, quick());
  EXPECT_DOUBLE_EQ(h.front().lr, 0.05);
  for (std::size_t i = 1; i < h.size(); ++i) EXPECT_LT(h[i].lr, h[i - 1].lr);
}

TEST(Train, LearnsShapes) {
  ShapesOptions o;
  o.size = 16;
  o.max_offset = 2;
  o.min_radius = 4;
  o.max_radius = 6;
  const auto train = generate_shapes_dataset(1, 64, o);
  auto g = fresh(5);
  TrainConfig c = quick();
  c.epochs = 12;
  const auto h = train_supervised(g, train, c);
  EXPECT_LT(h.back().loss, h.front().loss);
  EXPECT_GT(evaluate(g, train).accuracy, 0.5);
}

TEST(Train, ClassCountMismatchIsConfigError) {
  const auto ds = generate_shapes_dataset(1, 2, {.classes = 3});
  auto g = fresh(1);
  EXPECT_THROW(train_supervised(g, ds, quick()), ConfigError);
}

TEST(Eval, EmptyDatasetIsAnError) {
  LabeledDataset ds;
  ds.images = Tensor<float>({0, 3, 32, 32});
  ds.num_classes = 4;
  const auto g = fresh(1);
  EXPECT_THROW(evaluate(g, ds), Error);
  auto m = fresh(1);
  EXPECT_THROW(train_supervised(m, ds, quick()), Error);
}

TEST(Eval, PerClassAccuracyFromFixedPredictor) {
  LabeledDataset ds;
  ds.images = Tensor<float>({4, 3, 2, 2});
  ds.labels = {0, 1, 1, 2};
  ds.num_classes = 3;
  // always predicts class 1
  const auto r = evaluate_with(
      [](const Tensor<float>& x) {
        Tensor<float> y({x.dim(0), 3});
        for (std::size_t b = 0; b < x.dim(0); ++b) y[b * 3 + 1] = 1.0f;
        return y;
      },
      ds, 3);
  EXPECT_EQ(r.count, 4u);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.per_class, (std::vector<double>{0.0, 1.0, 0.0}));
  EXPECT_EQ(r.class_counts, (std::vector<std::size_t>{1, 2, 1}));
}
