#include <gtest/gtest.h>

#include <cmath>

#include "dfbf/autodiff.hpp"
#include "dfbf/ops.hpp"
#include "dfbf/optim.hpp"
#include "dfbf/random.hpp"
#include "op_cases.hpp"

namespace dfbf {
namespace {

using V = Var<double>;

// Plain 7-loop cross-correlation.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t s,
                          std::size_t p) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  Tensor<double> out({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * s + i) - static_cast<long>(p);
                const long ix = static_cast<long>(ox * s + j) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x[((b * Ci + ci) * H + iy) * W + ix] * w[((co * Ci + ci) * kh + i) * kw + j];
              }
          out[((b * Co + co) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

TEST(Conv2d, OnesSumToNine) {
  V x(Tensor<double>({1, 1, 3, 3}, 1.0)), w(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto y = ops::conv2d<double>(nullptr, x, w, nullptr, {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(3);
  V x(random_normal<double>({2, 1, 5, 4}, rng)), w(Tensor<double>({1, 1, 1, 1}, 1.0));
  auto y = ops::conv2d<double>(nullptr, x, w, nullptr, {1, 0});
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, MatchesNaiveLoops) {
  Rng rng(11);
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    auto x = random_normal<double>({2, 3, 8, 8}, rng);
    auto w = random_normal<double>({4, 3, 3, 3}, rng);
    auto y = ops::conv2d<double>(nullptr, V(x), V(w), nullptr, {s, p});
    EXPECT_LT(max_abs_diff(y.value(), naive_conv(x, w, s, p)), 1e-6) << "stride " << s << " pad " << p;
  }
  // f32 path against the f64 oracle
  auto x = random_normal<double>({2, 3, 8, 8}, rng);
  auto w = random_normal<double>({4, 3, 3, 3}, rng);
  auto yf = ops::conv2d<float>(nullptr, Var<float>(x.cast<float>()), Var<float>(w.cast<float>()),
                               nullptr, {1, 1});
  EXPECT_LT(max_abs_diff(yf.value().cast<double>(), naive_conv(x, w, 1, 1)), 1e-5);
}

TEST(Conv2d, ShapeErrors) {
  V x(Tensor<double>({1, 2, 4, 4})), w(Tensor<double>({1, 3, 3, 3}));
  EXPECT_THROW(ops::conv2d<double>(nullptr, x, w, nullptr, {1, 0}), ShapeError);
  V w5(Tensor<double>({1, 2, 5, 5}));
  EXPECT_THROW(ops::conv2d<double>(nullptr, x, w5, nullptr, {1, 0}), ShapeError);
  EXPECT_THROW(ops::conv2d<double>(nullptr, x, V(Tensor<double>({1, 2, 3, 3})), nullptr, {0, 0}),
               ShapeError);
}

TEST(BatchNorm, AlreadyNormalizedPassesThrough) {
  // per-channel values {-1, +1}: mean 0, biased var 1
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{-1, 1, 1, -1});
  Tensor<double> rm({1}), rv({1}, 1.0);
  auto r = ops::batchnorm2d<double>(nullptr, V(x), V(Tensor<double>({1}, 1.0)), V(Tensor<double>({1})),
                                    rm, rv, {ops::BnMode::Train, 0.1, 1e-5});
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(r.output.value()[i], x[i] / std::sqrt(1 + 1e-5), 1e-12);
  }
}

TEST(BatchNorm, EvalAffine) {
  Tensor<double> rm({1}, 0.0), rv({1}, 1.0);
  auto r = ops::batchnorm2d<double>(nullptr, V(Tensor<double>({1, 1, 1, 1}, 1.0)),
                                    V(Tensor<double>({1}, 2.0)), V(Tensor<double>({1}, 3.0)), rm, rv,
                                    {ops::BnMode::Eval, 0.1, 1e-5});
  EXPECT_NEAR(r.output.value()[0], 2.0 / std::sqrt(1 + 1e-5) + 3.0, 1e-12);
}

TEST(BatchNorm, BatchStatsMatchDirectComputation) {
  Rng rng(5);
  auto x = random_normal<double>({4, 3, 5, 5}, rng, 0.7, 2.0);
  Tensor<double> rm({3}), rv({3}, 1.0);
  auto r = ops::batchnorm2d<double>(nullptr, V(x), V(Tensor<double>({3}, 1.0)), V(Tensor<double>({3})),
                                    rm, rv, {ops::BnMode::Train, 0.1, 1e-5});
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, n = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) {
        s += x[(b * 3 + c) * 25 + i];
        n += 1;
      }
    const double m = s / n;
    double q = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) q += std::pow(x[(b * 3 + c) * 25 + i] - m, 2);
    EXPECT_NEAR(r.mean.value()[c], m, 1e-6);
    EXPECT_NEAR(r.var.value()[c], q / n, 1e-6);
    EXPECT_NEAR(rm[c], 0.1 * m, 1e-12);
  }
}

TEST(BatchNorm, MomentumOneMakesEvalMatchTrain) {
  Rng rng(8);
  auto x = random_normal<double>({3, 2, 4, 4}, rng, 1.0, 3.0);
  V gamma(random_normal<double>({2}, rng)), beta(random_normal<double>({2}, rng));
  Tensor<double> rm({2}), rv({2}, 1.0);
  auto tr = ops::batchnorm2d<double>(nullptr, V(x), gamma, beta, rm, rv, {ops::BnMode::Train, 1.0, 1e-5});
  auto ev = ops::batchnorm2d<double>(nullptr, V(x), gamma, beta, rm, rv, {ops::BnMode::Eval, 1.0, 1e-5});
  EXPECT_LT(max_abs_diff(tr.output.value(), ev.output.value()), 1e-6);
}

TEST(BatchNorm, EvalAndSynthesisLeaveRunningStats) {
  Rng rng(9);
  auto x = random_normal<double>({2, 2, 3, 3}, rng);
  Tensor<double> rm = random_normal<double>({2}, rng), rv({2}, 2.0);
  const auto rm0 = rm, rv0 = rv;
  for (auto mode : {ops::BnMode::Eval, ops::BnMode::Synthesis}) {
    ops::batchnorm2d<double>(nullptr, V(x), V(Tensor<double>({2}, 1.0)), V(Tensor<double>({2})), rm, rv,
                             {mode, 0.1, 1e-5});
  }
  EXPECT_EQ(rm, rm0);
  EXPECT_EQ(rv, rv0);
}

TEST(BatchNorm, Errors) {
  Tensor<double> rm({2}), rv({2}, 1.0);
  V g(Tensor<double>({2}, 1.0)), b(Tensor<double>({2}));
  EXPECT_THROW(ops::batchnorm2d<double>(nullptr, V(Tensor<double>({2, 2, 0, 3})), g, b, rm, rv, {}),
               ShapeError);
  EXPECT_THROW(ops::batchnorm2d<double>(nullptr, V(Tensor<double>({1, 2, 1, 1})), g, b, rm, rv,
                                        {ops::BnMode::Train, 0.1, 1e-5}),
               ShapeError);
  EXPECT_THROW(ops::batchnorm2d<double>(nullptr, V(Tensor<double>({1, 3, 2, 2})), g, b, rm, rv, {}),
               ShapeError);
}

TEST(Elementwise, Examples) {
  Rng rng(1);
  V a(random_normal<double>({3, 4}, rng));
  EXPECT_EQ(ops::l1_distance_sum<double>(nullptr, a, a).value().item(), 0.0);
  EXPECT_EQ(ops::sq_l2_norm<double>(nullptr, V(Tensor<double>({7}))).value().item(), 0.0);
  const std::vector<int> label{0};
  auto ce = ops::softmax_cross_entropy<double>(nullptr, V(Tensor<double>({1, 2})), label);
  EXPECT_NEAR(ce.value().item(), std::log(2.0), 1e-12);
  EXPECT_THROW(ops::add<double>(nullptr, a, V(Tensor<double>({4, 3}))), ShapeError);
  const std::vector<int> bad{2};
  EXPECT_THROW(ops::softmax_cross_entropy<double>(nullptr, V(Tensor<double>({1, 2})), bad), ShapeError);
}

TEST(TvLoss, ConstantIsZero) {
  EXPECT_EQ(ops::tv_loss<double>(nullptr, V(Tensor<double>({2, 3, 4, 4}, 0.3))).value().item(), 0.0);
}

TEST(TvLoss, HandEvaluated) {
  // [[0,1],[0,1]]: horizontal (1)^2 + (1)^2, vertical 0; normalized by 1*2*2
  V x(Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1}));
  EXPECT_DOUBLE_EQ(ops::tv_loss<double>(nullptr, x).value().item(), 2.0 / 4.0);
}

TEST(TvLoss, MatchesLoopReference) {
  Rng rng(21);
  auto x = random_normal<double>({2, 3, 5, 6}, rng);
  double ref = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
          auto at = [&](std::size_t ii, std::size_t jj) { return x[((b * 3 + c) * 5 + ii) * 6 + jj]; };
          if (j + 1 < 6) s += std::pow(at(i, j + 1) - at(i, j), 2);
          if (i + 1 < 5) s += std::pow(at(i + 1, j) - at(i, j), 2);
        }
    ref += s / (3 * 5 * 6);
  }
  EXPECT_NEAR(ops::tv_loss<double>(nullptr, V(x)).value().item(), ref, 1e-6);
}

TEST(TvLoss, RejectsSinglePixelRows) {
  EXPECT_THROW(ops::tv_loss<double>(nullptr, V(Tensor<double>({1, 3, 1, 5}))), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(2);
  V x(random_normal<double>({2, 3}, rng), true);
  Tape<double> tape;
  tape.backward(ops::sum(&tape, x));
  for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);
  EXPECT_TRUE(tape.empty());
}

TEST(Backward, SquaredNormGivesTwiceX) {
  Rng rng(2);
  V x(random_normal<double>({5}, rng), true);
  Tape<double> tape;
  tape.backward(ops::sq_l2_norm(&tape, x));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.value()[i]);
}

TEST(Backward, AccumulatesAcrossUses) {
  V x(Tensor<double>({3}, 2.0), true);
  Tape<double> tape;
  auto y = ops::add(&tape, ops::sum(&tape, x), ops::sum(&tape, ops::scale(&tape, x, 3.0)));
  tape.backward(y);
  for (double g : x.grad().data()) EXPECT_DOUBLE_EQ(g, 4.0);
}

TEST(Backward, ScaleIsExactlyLinear) {
  Rng rng(4);
  V x(random_normal<double>({6}, rng), true);
  Tensor<double> w = random_normal<double>({6}, rng);
  Tape<double> tape;
  tape.backward(testing::project(&tape, ops::scale(&tape, x, 0.37), w));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x.grad()[i], w[i] * 0.37);
}

TEST(Backward, Errors) {
  V x(Tensor<double>({2}, 1.0), true);
  Tape<double> t2;
  auto y = ops::scale(&t2, x, 2.0);
  EXPECT_THROW(t2.backward(y), ShapeError);
  Tape<double> empty;
  EXPECT_THROW(empty.backward(V(Tensor<double>::scalar(1.0))), Error);
}

TEST(Backward, ClearedTapeReleasesActivations) {
  V x(Tensor<double>({4}, 1.0), true);
  std::weak_ptr<int> probe;
  Tape<double> tape;
  {
    auto held = std::make_shared<int>(1);
    probe = held;
    tape.record("probe", [held] {});
    ops::relu(&tape, x);
  }
  EXPECT_FALSE(probe.expired());
  tape.clear();
  EXPECT_TRUE(probe.expired());
  EXPECT_TRUE(tape.empty());
}

TEST(Backward, NoRecordingWithoutGradInputs) {
  Tape<double> tape;
  V x(Tensor<double>({4}, 1.0));
  ops::relu(&tape, x);
  EXPECT_TRUE(tape.empty());
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Rng rng(77);
    V x(random_normal<double>({2, 3, 6, 6}, rng), true);
    V w(random_normal<double>({4, 3, 3, 3}, rng), true);
    Tape<double> tape;
    auto y = ops::conv2d<double>(&tape, x, w, nullptr, {1, 1});
    tape.backward(ops::sq_l2_norm(&tape, y));
    return std::make_pair(x.grad(), w.grad());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradientSuite, EveryOpMatchesFiniteDifferences) {
  for (const auto& c : testing::gradient_cases()) {
    for (int inst = 0; inst < 20; ++inst) {
      Rng rng(mix_seed(1234, static_cast<std::uint64_t>(inst)));
      auto [inputs, fn] = c.make(rng);
      const auto r = testing::gradcheck(fn, inputs);
      EXPECT_LT(r.max_rel_error, c.tolerance) << c.name << " instance " << inst;
    }
  }
}

TEST(Sgd, PlainStep) {
  V p(Tensor<double>({1}, 1.0), true, "p");
  p.grad_buffer()[0] = 1.0;
  Sgd<double> opt({p}, {0.1, 0.0, 0.0});
  opt.step();
  EXPECT_DOUBLE_EQ(p.value()[0], 0.9);
}

TEST(Sgd, MomentumTwoSteps) {
  V p(Tensor<double>({1}, 0.0), true, "p");
  Sgd<double> opt({p}, {0.1, 0.9, 0.0});
  p.grad_buffer()[0] = 1.0;
  opt.step();
  EXPECT_DOUBLE_EQ(opt.velocity()[0][0], 1.0);
  EXPECT_DOUBLE_EQ(p.value()[0], -0.1);
  opt.step();
  EXPECT_DOUBLE_EQ(opt.velocity()[0][0], 1.9);
  EXPECT_NEAR(p.value()[0], -0.29, 1e-15);
}

TEST(Sgd, PureDecay) {
  V p(Tensor<double>({1}, 1.0), true, "p");
  p.grad_buffer()[0] = 0.0;
  Sgd<double> opt({p}, {0.1, 0.0, 0.5});
  opt.step();
  EXPECT_DOUBLE_EQ(p.value()[0], 0.95);
}

TEST(Sgd, MissingGradientNamesParameter) {
  V p(Tensor<double>({2}, 1.0), true, "stem.conv.weight");
  Sgd<double> opt({p}, {});
  try {
    opt.step();
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stem.conv.weight"), std::string::npos);
  }
  EXPECT_EQ(opt.velocity().size(), 1u);
  EXPECT_EQ(opt.velocity()[0], Tensor<double>({2}));
}

}  // namespace
}  // namespace dfbf
