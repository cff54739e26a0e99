#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "volssl/errors.hpp"
#include "volssl/ops.hpp"
#include "volssl/ssl.hpp"

using namespace volssl;
using ag::Tensor;
namespace oracle = volssl::testing::oracle;

TEST_CASE("dino: two-prototype hand value and one-hot limit") {
  const ssl::Temperatures unit{1.0, 1.0};
  const Tensor teacher = Tensor::from({1, 2}, {std::log(2.0), 0.0});
  const Tensor same_crop = Tensor::from({1, 2}, {5.0, -5.0});
  const Tensor other = Tensor::from({1, 2}, {std::log(2.0), 0.0});
  const Tensor students[] = {same_crop, other};
  const std::vector<double> center{0.0, 0.0};
  auto loss = ssl::dino_loss(students, std::span(&teacher, 1), center, unit);
  const double h = -(2.0 / 3) * std::log(2.0 / 3) - (1.0 / 3) * std::log(1.0 / 3);
  CHECK(loss.item() == doctest::Approx(h).epsilon(1e-12));
  CHECK(loss.item() == doctest::Approx(0.6365).epsilon(1e-4));

  const Tensor hot = Tensor::from({1, 2}, {60.0, 0.0});
  const Tensor hot_students[] = {hot, hot};
  CHECK(ssl::dino_loss(hot_students, std::span(&hot, 1), center, unit).item() < 1e-20);

  CHECK_THROWS_AS(ssl::dino_loss(students, std::span(&teacher, 1), center, {0.0, 1.0}), ConfigError);
  CHECK_THROWS_AS(ssl::dino_loss(students, std::span(&teacher, 1), center, {0.07, -1.0}), ConfigError);
}

TEST_CASE("dino: random instances match the scalar oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = 3, K = 3;
    std::vector<Tensor> teachers{testing::random_tensor({B, K}, rng, 2.0), testing::random_tensor({B, K}, rng, 2.0)};
    std::vector<Tensor> students;
    for (int v = 0; v < 6; ++v) students.push_back(testing::random_tensor({B, K}, rng, 2.0));
    auto center = testing::random_tensor({K}, rng).values();
    std::vector<double> c(center.begin(), center.end());
    const ssl::Temperatures t{0.07, 0.1};
    const double got = ssl::dino_loss(students, teachers, c, t).item();
    const double want = oracle::dino(students, teachers, c, t.teacher, t.student);
    CHECK(std::abs(got - want) <= 1e-6 * std::abs(want));
  }
}

TEST_CASE("ibot: empty, single token and random masked sets") {
  const ssl::Temperatures t{0.07, 0.1};
  std::vector<std::size_t> none;
  auto e = ssl::ibot_loss(Tensor::zeros({0, 4}), none, Tensor::zeros({0, 4}), none, {}, t);
  CHECK(e.empty);
  CHECK(e.loss.item() == 0.0);

  const Tensor p = Tensor::from({1, 3}, {0.7, -0.2, 0.1});
  std::vector<std::size_t> one{5};
  auto s = ssl::ibot_loss(p, one, p, one, {}, {1.0, 1.0});
  CHECK(s.loss.item() == doctest::Approx(oracle::entropy(oracle::softmax(p.values(), 1.0))).epsilon(1e-12));

  std::mt19937_64 rng(4);
  std::vector<std::size_t> pos(256);
  std::iota(pos.begin(), pos.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    auto st = testing::random_tensor({256, 16}, rng), te = testing::random_tensor({256, 16}, rng);
    auto c = testing::random_tensor({16}, rng);
    std::vector<double> center(c.values().begin(), c.values().end());
    const double got = ssl::ibot_loss(st, pos, te, pos, center, t).loss.item();
    const double want = oracle::ibot(st, te, center, t.teacher, t.student);
    CHECK(std::abs(got - want) <= 1e-6 * std::abs(want));
  }
  std::vector<std::size_t> shifted(pos);
  shifted[0] = 999;
  auto st = testing::random_tensor({256, 16}, rng);
  CHECK_THROWS_AS(ssl::ibot_loss(st, pos, st, shifted, {}, t), DataError);
}

TEST_CASE("koleo: hand values, oracle and permutation invariance") {
  const Tensor antipodal = Tensor::from({2, 2}, {1.0, 0.0, -1.0, 0.0});
  CHECK(ssl::koleo_loss(antipodal).item() == doctest::Approx(-std::log(2.0 + 1e-8)).epsilon(1e-14));
  CHECK(ssl::koleo_loss(antipodal).item() == doctest::Approx(-0.6931).epsilon(1e-4));
  const Tensor same = Tensor::from({2, 3}, {0.3, 0.4, 0.5, 0.3, 0.4, 0.5});
  CHECK(ssl::koleo_loss(same).item() == doctest::Approx(-std::log(1e-8)).epsilon(1e-9));
  CHECK(ssl::koleo_loss(same).item() == doctest::Approx(18.42).epsilon(1e-3));
  CHECK_THROWS_AS(ssl::koleo_loss(Tensor::zeros({1, 3})), DataError);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = testing::random_tensor({10, 8}, rng);
    const double got = ssl::koleo_loss(x).item();
    const double want = oracle::koleo(x, 1e-8);
    CHECK(std::abs(got - want) <= 1e-6 * std::abs(want));
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(ssl::koleo_loss(ops::gather_rows(x, perm)).item() == doctest::Approx(got).epsilon(1e-14));
  }
}

TEST_CASE("center update") {
  ssl::CenterState s{{0.5, 0.5}, 0.0};
  ssl::update_center(s, Tensor::from({2, 2}, {1.0, 2.0, 3.0, -4.0}));
  CHECK(s.center == std::vector<double>{2.0, -1.0});
  s.momentum = 1.0;
  ssl::update_center(s, Tensor::from({1, 2}, {9.0, 9.0}));
  CHECK(s.center == std::vector<double>{2.0, -1.0});
  ssl::CenterState z{{0.0, 0.0}, 0.9};
  ssl::update_center(z, std::vector<double>{1.0, -1.0});
  CHECK(z.center[0] == doctest::Approx(0.1));
  CHECK(z.center[1] == doctest::Approx(-0.1));
  CHECK_THROWS_AS(ssl::update_center(z, Tensor::zeros({0, 2})), DataError);
}

TEST_CASE("total loss arithmetic") {
  ssl::LossComponents c{Tensor::scalar(2.0), Tensor::scalar(1.0), Tensor::scalar(-0.5)};
  CHECK(ssl::total_loss(c, {1.0, 0.0, 0.0}).item() == 2.0);
  CHECK(ssl::total_loss(c, {1.0, 1.0, 0.1}).item() == doctest::Approx(2.95));
  CHECK_THROWS_AS(ssl::total_loss(c, {-1.0, 1.0, 0.1}), ConfigError);
}

TEST_CASE("head: prototypes stay unit norm and outputs are cosine logits") {
  auto h = ssl::ProjectionHead::init({12, 16, 8, 10}, 1);
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 8; ++c) s += h.prototypes.at(r * 8 + c) * h.prototypes.at(r * 8 + c);
    CHECK(s == doctest::Approx(1.0));
  }
  for (double& v : h.prototypes.values()) v *= 3.0;
  h.renormalize_prototypes();
  CHECK(std::abs(h.prototypes.at(0) * h.prototypes.at(0)) <= 1.0);
  std::mt19937_64 rng(2);
  auto out = h.forward(testing::random_tensor({4, 12}, rng));
  CHECK(out.logits.shape() == ag::Shape{4, 10});
  for (double v : out.logits.values()) CHECK(std::abs(v) <= 1.0 + 1e-12);
}

TEST_CASE("objective properties") {
  std::mt19937_64 rng(6);
  SUBCASE("cross-entropy is bounded below by the teacher entropy") {
    for (int i = 0; i < 50; ++i) {
      auto s = testing::random_tensor({1, 7}, rng, 3.0), t = testing::random_tensor({1, 7}, rng, 3.0);
      auto p = ssl::teacher_probs(t, {}, 1.0);
      const double ce = ops::soft_cross_entropy(s, p, 1.0).item();
      CHECK(ce >= oracle::entropy(std::vector<double>(p.values().begin(), p.values().end())) - 1e-12);
    }
  }
  SUBCASE("centering is shift invariant") {
    for (int i = 0; i < 20; ++i) {
      auto t = testing::random_tensor({3, 5}, rng);
      auto c = testing::random_tensor({5}, rng);
      std::vector<double> center(c.values().begin(), c.values().end());
      auto shifted_t = ops::add_scalar(t, 0.0);
      std::vector<double> shifted_c(center);
      for (std::size_t k = 0; k < 5; ++k) {
        const double add = 0.37 * (k + 1);
        shifted_c[k] += add;
        for (std::size_t r = 0; r < 3; ++r) shifted_t.data()[r * 5 + k] += add;
      }
      auto a = ssl::teacher_probs(t, center, 0.07), b = ssl::teacher_probs(shifted_t, shifted_c, 0.07);
      for (std::size_t j = 0; j < 15; ++j) CHECK(a.at(j) == doctest::Approx(b.at(j)).epsilon(1e-9));
    }
  }
  SUBCASE("lower teacher temperature sharpens") {
    for (int i = 0; i < 100; ++i) {
      auto t = testing::random_tensor({1, 9}, rng);
      auto sharp = ssl::teacher_probs(t, {}, 0.07), soft = ssl::teacher_probs(t, {}, 1.0);
      CHECK(*std::max_element(sharp.values().begin(), sharp.values().end()) >=
            *std::max_element(soft.values().begin(), soft.values().end()));
    }
  }
  SUBCASE("no gradient reaches the teacher logits or center") {
    auto s = testing::random_tensor({2, 4}, rng), s2 = testing::random_tensor({2, 4}, rng);
    auto t = testing::random_tensor({2, 4}, rng);
    s.set_requires_grad(true);
    s2.set_requires_grad(true);
    t.set_requires_grad(true);
    std::vector<double> center{0.1, 0.2, 0.3, 0.4};
    const Tensor students[] = {s, s2};
    ssl::dino_loss(students, std::span(&t, 1), center, {}).backward();
    CHECK(s2.has_grad());
    CHECK_FALSE(t.has_grad());
    CHECK(center == std::vector<double>{0.1, 0.2, 0.3, 0.4});
  }
}

TEST_CASE("head and total-loss gradients match finite differences") {
  for (std::uint64_t draw = 0; draw < 2; ++draw) {
    auto head = ssl::ProjectionHead::init({6, 10, 5, 7}, 3 + draw);
    std::mt19937_64 rng(9 + draw);
    for (auto& p : nn::params_of(head))
      for (double& v : p.tensor->values()) v += std::normal_distribution<double>(0, 0.3)(rng);
    auto x = testing::random_tensor({6, 6}, rng);
    auto teacher = testing::random_tensor({2, 7}, rng);
    auto tp = testing::random_tensor({2, 7}, rng);
    std::vector<double> center(7, 0.05);
    std::vector<std::size_t> pos{0, 1};
    auto loss = [&] {
      auto out = head.forward(x);
      std::vector<Tensor> students{ops::slice_rows(out.logits, 0, 2), ops::slice_rows(out.logits, 2, 4),
                                   ops::slice_rows(out.logits, 4, 6)};
      std::vector<Tensor> teachers{teacher};
      ssl::LossComponents c;
      c.dino = ssl::dino_loss(students, teachers, center, {0.07, 0.1});
      c.ibot = ssl::ibot_loss(ops::slice_rows(out.logits, 2, 4), pos, tp, pos, center, {0.07, 0.1}).loss;
      // pairs keep the nearest neighbour fixed under the finite-difference step
      c.koleo = ssl::koleo_loss_grouped(out.embedding, 2);
      return ssl::total_loss(c, {1.0, 1.0, 0.1});
    };
    std::vector<testing::NamedTensor> named{{"x", x}};
    for (auto& p : nn::params_of(head)) named.emplace_back(p.name, *p.tensor);
    auto r = testing::grad_check(named, loss, 1e-3, 32, 5 + draw);
    CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst << " " << r.max_rel_error);
  }
}
