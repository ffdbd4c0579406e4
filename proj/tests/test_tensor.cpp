#include <doctest.h>

#include <cmath>
#include <limits>

#include "moe/error.hpp"
#include "moe/gating.hpp"
#include "moe/random.hpp"
#include "moe/tensor.hpp"
#include "support.hpp"

using namespace moe;

TEST_CASE("tensor construction checks shape against data") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 1.5f);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor(Shape{}), Error);
}

TEST_CASE("bit_equal separates signed zeros") {
  const Tensor a = Tensor::of({2}, {0.0f, 1.0f});
  const Tensor b = Tensor::of({2}, {-0.0f, 1.0f});
  CHECK(a == b);
  CHECK_FALSE(bit_equal(a, b));
  CHECK(bit_equal(a, a));
}

TEST_CASE("check_finite rejects NaN and Inf") {
  Tensor t({3});
  CHECK_NOTHROW(check_finite(t, "x"));
  t[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    check_finite(t, "probe");
    FAIL("expected a throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonFinite);
  }
  t[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(check_finite(t, "probe"), Error);
}

TEST_CASE("matmul kernels agree with a naive triple loop") {
  for (std::size_t trial = 0; trial < 20; ++trial) {
    Rng rng(trial);
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(21), n = 1 + rng.below(13);
    const Tensor a = testing::random_tensor({m, k}, trial * 3 + 1);
    const Tensor b = testing::random_tensor({k, n}, trial * 3 + 2);
    Tensor naive({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t x = 0; x < k; ++x) s += static_cast<double>(a.at(i, x)) * b.at(x, j);
        naive.at(i, j) = static_cast<float>(s);
      }
    CHECK(testing::norm_rel_error(matmul(a, b), naive) < 1e-5);

    Tensor bt({n, k});
    for (std::size_t x = 0; x < k; ++x)
      for (std::size_t j = 0; j < n; ++j) bt.at(j, x) = b.at(x, j);
    Tensor out({m, n});
    kernels::matmul_bt(a.data().data(), bt.data().data(), out.data().data(), m, k, n);
    CHECK(testing::norm_rel_error(out, naive) < 1e-5);

    // a^T * c accumulated into [k x n]
    const Tensor c = testing::random_tensor({m, n}, trial + 500);
    Tensor acc({k, n}, 1.0f);
    kernels::matmul_at_acc(a.data().data(), c.data().data(), acc.data().data(), m, k, n);
    double worst = 0;
    for (std::size_t x = 0; x < k; ++x)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 1.0;
        for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(a.at(i, x)) * c.at(i, j);
        worst = std::max(worst, std::abs(s - acc.at(x, j)));
      }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("dot product result does not depend on neighbouring rows") {
  const Tensor a = testing::random_tensor({5, 37}, 1);
  const Tensor w = testing::random_tensor({3, 37}, 2);
  Tensor all({5, 3}), one({1, 3});
  kernels::matmul_bt(a.data().data(), w.data().data(), all.data().data(), 5, 37, 3);
  kernels::matmul_bt(a.row(4), w.data().data(), one.data().data(), 1, 37, 3);
  for (std::size_t j = 0; j < 3; ++j) CHECK(all.at(4, j) == one[j]);
}

TEST_CASE("softmax rows lie on the simplex") {
  const Tensor x = testing::random_tensor({4, 9}, 3, 5.0);
  const Tensor p = softmax(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      CHECK(p.at(r, c) > 0.0f);
      s += p.at(r, c);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  const Tensor big = softmax(Tensor::of({1, 3}, {1000.0f, 1000.0f, -1000.0f}));
  CHECK(big[0] == doctest::Approx(0.5));
  CHECK(big[2] == 0.0f);
}

TEST_CASE("rms_norm matches a hand computation") {
  const Tensor x = Tensor::of({1, 2}, {3.0f, 4.0f});
  const Tensor g = Tensor::of({2}, {1.0f, 2.0f});
  const Tensor y = rms_norm(x, g);
  const double rms = std::sqrt((9.0 + 16.0) / 2.0 + kRmsNormEps);
  CHECK(y[0] == doctest::Approx(3.0 / rms).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(8.0 / rms).epsilon(1e-6));
}

TEST_CASE("cross_entropy matches the log-softmax of the target") {
  const Tensor logits = Tensor::of({2, 3}, {1.0f, 2.0f, 3.0f, 0.0f, 0.0f, 0.0f});
  const std::vector<Token> targets{2, 0};
  const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  const double l1 = std::log(3.0);
  CHECK(cross_entropy(logits, targets) == doctest::Approx((l0 + l1) / 2).epsilon(1e-6));
  const std::vector<Token> bad{2, 3};
  CHECK_THROWS_AS(cross_entropy(logits, bad), Error);
}

TEST_CASE("top-k selection agrees with a full stable sort") {
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    Rng rng(trial);
    const std::size_t n = 1 + rng.below(12);
    std::vector<float> scores(n);
    // Coarse values force frequent ties.
    for (float& s : scores) s = static_cast<float>(rng.below(5)) - 2.0f;
    const std::size_t k = 1 + rng.below(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    REQUIRE(top_k_indices(scores, k) == order);

    const auto w = top_k_softmax(scores, k);
    double total = 0;
    std::size_t positive = 0;
    for (float v : w) {
      CHECK(v >= 0.0f);
      total += v;
      positive += v > 0.0f;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(positive == k);
  }
}

TEST_CASE("top_k_softmax worked examples") {
  const auto w = top_k_softmax(std::vector<float>{1.0f, -1.0f, 0.5f}, 2);
  CHECK(w[0] == doctest::Approx(0.6225).epsilon(1e-4));
  CHECK(w[1] == 0.0f);
  CHECK(w[2] == doctest::Approx(0.3775).epsilon(1e-4));
  const auto tie = top_k_softmax(std::vector<float>{0.0f, 0.0f, 0.0f, 0.0f}, 2);
  CHECK(tie == std::vector<float>{0.5f, 0.5f, 0.0f, 0.0f});
  CHECK(argmax(std::vector<float>{1.0f, 3.0f, 3.0f}) == 1);
  CHECK_THROWS_AS(top_k_indices(std::vector<float>{1.0f}, 2), Error);
}

TEST_CASE("keyed_uniform is a pure function of its key") {
  CHECK(keyed_uniform(1, 2, 3) == keyed_uniform(1, 2, 3));
  CHECK(keyed_uniform(1, 2, 3) != keyed_uniform(1, 2, 4));
  double mean = 0;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    const double u = keyed_uniform(7, 11, i);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean += u;
  }
  CHECK(mean / 20000 == doctest::Approx(0.5).epsilon(0.02));
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(a.normal() == b.normal());
}
