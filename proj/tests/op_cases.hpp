#pragma once

// Random finite-difference cases for every differentiable op. Shared by the
// unit suite and the acceptance binary.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "dfbf/ops.hpp"
#include "dfbf/random.hpp"
#include "gradcheck.hpp"

namespace dfbf::testing {

struct OpCase {
  std::string name;
  double tolerance;
  // Builds inputs and the scalar function for one random instance.
  std::function<std::pair<std::vector<Var<double>>, ScalarFn>(Rng&)> make;
};

inline Tensor<double> rand_t(Shape s, Rng& rng) { return random_normal<double>(std::move(s), rng); }

// Values with pairwise gaps far larger than the FD step, in random order.
inline Tensor<double> spaced_t(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  std::vector<std::size_t> perm(t.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = (static_cast<double>(perm[i]) - 0.5 * static_cast<double>(t.size())) * 0.05 + 0.013;
  }
  return t;
}

// Normal values pushed away from zero (kink of relu / |.|).
inline Tensor<double> away_from_zero(Shape s, Rng& rng) {
  Tensor<double> t = rand_t(std::move(s), rng);
  for (auto& v : t.data()) v = v >= 0 ? v + 0.05 : v - 0.05;
  return t;
}

inline std::vector<OpCase> gradient_cases() {
  using V = Var<double>;
  using Tp = Tape<double>*;
  std::vector<OpCase> cases;

  cases.push_back({"conv2d", 1e-4, [](Rng& rng) {
    std::uniform_int_distribution<int> pick(0, 1);
    const std::size_t stride = 1 + pick(rng), pad = pick(rng);
    std::vector<V> in{V(rand_t({2, 3, 6, 5}, rng)), V(rand_t({4, 3, 3, 3}, rng)),
                      V(rand_t({4}, rng))};
    const std::size_t ho = ops::conv_out_extent(6, 3, stride, pad);
    const std::size_t wo = ops::conv_out_extent(5, 3, stride, pad);
    Tensor<double> proj = rand_t({2, 4, ho, wo}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) {
      return project(t, ops::conv2d(t, v[0], v[1], &v[2], {stride, pad}), proj);
    };
    return std::make_pair(in, fn);
  }});

  for (auto mode : {ops::BnMode::Train, ops::BnMode::Eval, ops::BnMode::Synthesis}) {
    const std::string name = mode == ops::BnMode::Train  ? "batchnorm2d/train"
                             : mode == ops::BnMode::Eval ? "batchnorm2d/eval"
                                                         : "batchnorm2d/synthesis";
    cases.push_back({name, 1e-5, [mode](Rng& rng) {
      std::vector<V> in{V(rand_t({3, 2, 3, 3}, rng)), V(rand_t({2}, rng)), V(rand_t({2}, rng))};
      Tensor<double> proj = rand_t({3, 2, 3, 3}, rng);
      Tensor<double> pm = rand_t({2}, rng), pv = rand_t({2}, rng);
      Tensor<double> rm = rand_t({2}, rng);
      Tensor<double> rv({2});
      std::uniform_real_distribution<double> u(0.5, 2.0);
      for (auto& x : rv.data()) x = u(rng);
      ScalarFn fn = [=](Tp t, std::vector<V>& v) {
        Tensor<double> m = rm, s = rv;
        auto r = ops::batchnorm2d(t, v[0], v[1], v[2], m, s, {mode, 0.1, 1e-5});
        V loss = project(t, r.output, proj);
        if (mode != ops::BnMode::Eval) {
          // exercise the exposed batch statistics too
          loss = ops::add(t, loss, project(t, r.mean, pm));
          loss = ops::add(t, loss, project(t, r.var, pv));
        }
        return loss;
      };
      return std::make_pair(in, fn);
    }});
  }

  cases.push_back({"relu", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(away_from_zero({2, 3, 4}, rng))};
    Tensor<double> proj = rand_t({2, 3, 4}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::relu(t, v[0]), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"add", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({3, 4}, rng)), V(rand_t({3, 4}, rng))};
    Tensor<double> proj = rand_t({3, 4}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::add(t, v[0], v[1]), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"sub", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({3, 4}, rng)), V(rand_t({3, 4}, rng))};
    Tensor<double> proj = rand_t({3, 4}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::sub(t, v[0], v[1]), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"mul", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({3, 4}, rng)), V(rand_t({3, 4}, rng))};
    Tensor<double> proj = rand_t({3, 4}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::mul(t, v[0], v[1]), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"scale", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({5}, rng))};
    Tensor<double> proj = rand_t({5}, rng);
    const double c = std::normal_distribution<double>()(rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::scale(t, v[0], c), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"maxpool2d", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(spaced_t({2, 2, 6, 6}, rng))};
    Tensor<double> proj = rand_t({2, 2, 3, 3}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::maxpool2d(t, v[0], 2, 2), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"global_avg_pool", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({2, 3, 4, 5}, rng))};
    Tensor<double> proj = rand_t({2, 3}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::global_avg_pool(t, v[0]), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"linear", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({3, 5}, rng)), V(rand_t({4, 5}, rng)), V(rand_t({4}, rng))};
    Tensor<double> proj = rand_t({3, 4}, rng);
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return project(t, ops::linear(t, v[0], v[1], v[2]), proj); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"softmax_cross_entropy", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({4, 5}, rng))};
    std::uniform_int_distribution<int> lab(0, 4);
    std::vector<int> labels{lab(rng), lab(rng), lab(rng), lab(rng)};
    ScalarFn fn = [=](Tp t, std::vector<V>& v) { return ops::softmax_cross_entropy(t, v[0], labels); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"l1_distance_sum", 1e-5, [](Rng& rng) {
    Tensor<double> a = rand_t({2, 3, 3}, rng);
    Tensor<double> d = away_from_zero({2, 3, 3}, rng);
    Tensor<double> b(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] + d[i];
    std::vector<V> in{V(a), V(b)};
    ScalarFn fn = [](Tp t, std::vector<V>& v) { return ops::l1_distance_sum(t, v[0], v[1]); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"sq_l2_norm", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({3, 4}, rng))};
    ScalarFn fn = [](Tp t, std::vector<V>& v) { return ops::sq_l2_norm(t, v[0]); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"sum", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({3, 4}, rng))};
    ScalarFn fn = [](Tp t, std::vector<V>& v) { return ops::scale(t, ops::sum(t, v[0]), 1.7); };
    return std::make_pair(in, fn);
  }});

  cases.push_back({"tv_loss", 1e-5, [](Rng& rng) {
    std::vector<V> in{V(rand_t({2, 3, 4, 5}, rng))};
    ScalarFn fn = [](Tp t, std::vector<V>& v) { return ops::tv_loss(t, v[0]); };
    return std::make_pair(in, fn);
  }});

  return cases;
}

}  // namespace dfbf::testing
