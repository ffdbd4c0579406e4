#include <doctest.h>

#include "moe/error.hpp"
#include "support.hpp"

using namespace moe;
using testing::LossFn;

namespace {

// Compares tape gradients with central differences for every parameter.
void check_gradients(const LossFn& fn, const TensorMap& params, double tol = 2e-2,
                     float eps = 1e-2f) {
  const TensorMap analytic = testing::analytic_gradient(fn, params);
  for (const auto& [name, t] : params) {
    CAPTURE(name);
    const Tensor numeric = testing::numeric_gradient(fn, params, name, eps);
    CHECK(testing::norm_rel_error(analytic.at(name), numeric) < tol);
  }
}

Var p(GradientTape& tape, const TensorMap& params, const char* name) {
  return tape.parameter(name, params.at(name));
}

}  // namespace

TEST_CASE("matmul, linear, add, mul and scale gradients") {
  const TensorMap params{{"a", testing::random_tensor({3, 4}, 1)},
                         {"b", testing::random_tensor({4, 5}, 2)},
                         {"w", testing::random_tensor({5, 4}, 3)},
                         {"bias", testing::random_tensor({5}, 4)},
                         {"c", testing::random_tensor({3, 5}, 5)}};
  check_gradients(
      [](GradientTape& t, const TensorMap& ps) {
        Var m = ad::matmul(p(t, ps, "a"), p(t, ps, "b"));
        Var l = ad::linear(p(t, ps, "a"), p(t, ps, "w"), p(t, ps, "bias"));
        Var s = ad::add(ad::mul(m, p(t, ps, "c")), ad::scale(l, -0.7f));
        return testing::probe(t, s);
      },
      params);
}

TEST_CASE("softmax and rms_norm gradients") {
  const TensorMap params{{"x", testing::random_tensor({3, 6}, 11)},
                         {"g", testing::random_tensor({6}, 12)}};
  check_gradients(
      [](GradientTape& t, const TensorMap& ps) {
        Var n = ad::rms_norm(p(t, ps, "x"), p(t, ps, "g"));
        return testing::probe(t, ad::softmax(ad::scale(n, 2.0f)));
      },
      params);
}

TEST_CASE("embedding gradients accumulate repeated tokens") {
  const TensorMap params{{"e", testing::random_tensor({5, 4}, 21)}};
  const std::vector<Token> tokens{1, 3, 1, 0};
  check_gradients(
      [&](GradientTape& t, const TensorMap& ps) {
        return testing::probe(t, ad::embedding(p(t, ps, "e"), tokens));
      },
      params);
  GradientTape tape;
  Var e = tape.parameter("e", params.at("e"));
  tape.backward(ad::sum(ad::embedding(e, tokens)));
  const Tensor& g = tape.gradient("e");
  CHECK(g.at(1, 0) == 2.0f);
  CHECK(g.at(2, 0) == 0.0f);
  CHECK(g.at(4, 3) == 0.0f);
}

TEST_CASE("rope and causal attention gradients") {
  const TensorMap params{{"q", testing::random_tensor({5, 8}, 31)},
                         {"k", testing::random_tensor({5, 8}, 32)},
                         {"v", testing::random_tensor({5, 8}, 33)}};
  check_gradients(
      [](GradientTape& t, const TensorMap& ps) {
        Var q = ad::rope(p(t, ps, "q"), 2);
        Var k = ad::rope(p(t, ps, "k"), 2);
        return testing::probe(t, ad::causal_attention(q, k, p(t, ps, "v"), 2));
      },
      params);
}

TEST_CASE("rope keeps norms per pair and leaves position 0 unchanged") {
  GradientTape tape;
  const Tensor x = testing::random_tensor({3, 8}, 41);
  const Tensor y = ad::rope(tape.constant(x), 2).value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(y.at(0, c) == x.at(0, c));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; c += 2) {
      const double before = x.at(r, c) * x.at(r, c) + x.at(r, c + 1) * x.at(r, c + 1);
      const double after = y.at(r, c) * y.at(r, c) + y.at(r, c + 1) * y.at(r, c + 1);
      CHECK(after == doctest::Approx(before).epsilon(1e-5));
    }
}

TEST_CASE("swiglu and cross_entropy gradients") {
  const TensorMap params{{"gate", testing::random_tensor({4, 6}, 51)},
                         {"up", testing::random_tensor({4, 6}, 52)}};
  const std::vector<Token> targets{0, 5, 2, 2};
  check_gradients(
      [&](GradientTape& t, const TensorMap& ps) {
        return ad::cross_entropy(ad::swiglu(p(t, ps, "gate"), p(t, ps, "up")), targets);
      },
      params);
}

TEST_CASE("gather, scatter, mean_rows, scale_by and top_k_softmax gradients") {
  const TensorMap params{{"x", testing::random_tensor({4, 3}, 61)},
                         {"s", testing::random_tensor({4, 3}, 62)},
                         {"w", testing::random_tensor({1, 3}, 63)}};
  check_gradients(
      [](GradientTape& t, const TensorMap& ps) {
        Var gates = ad::top_k_softmax(p(t, ps, "s"), 2);
        Var rows = ad::gather_rows(p(t, ps, "x"), {0, 2, 3});
        Var part = ad::scatter_gated(rows, {0, 2, 3}, gates, 1, 4);
        Var alpha = ad::top_k_softmax(p(t, ps, "w"), 2);
        Var mixed = ad::add(ad::scale_by(part, alpha, 0), ad::scale_by(part, alpha, 2));
        return ad::add(testing::probe(t, mixed), testing::probe(t, ad::mean_rows(mixed), 7));
      },
      params);
}

TEST_CASE("top_k_softmax gives no gradient to unselected entries") {
  GradientTape tape;
  const Tensor s = Tensor::of({1, 4}, {0.3f, 2.0f, -1.0f, 1.0f});
  Var sv = tape.parameter("s", s);
  tape.backward(testing::probe(tape, ad::top_k_softmax(sv, 2)));
  const Tensor& g = tape.gradient("s");
  CHECK(g[0] == 0.0f);
  CHECK(g[2] == 0.0f);
  CHECK(g[1] != 0.0f);
  CHECK(g[1] == doctest::Approx(-g[3]));
}

TEST_CASE("unused parameters get exactly zero gradients") {
  const Tensor a = testing::random_tensor({2, 2}, 71);
  const Tensor b = testing::random_tensor({2, 2}, 72);
  GradientTape tape;
  Var va = tape.parameter("a", a);
  tape.parameter("b", b);
  tape.backward(ad::sum(ad::mul(va, va)));
  CHECK(bit_equal(tape.gradient("b"), Tensor({2, 2})));
  for (std::size_t i = 0; i < 4; ++i) CHECK(tape.gradient("a")[i] == 2.0f * a[i]);
}

TEST_CASE("frozen parameters get no gradient") {
  const Tensor a = testing::random_tensor({2, 2}, 73);
  const Tensor b = testing::random_tensor({2, 2}, 74);
  GradientTape tape;
  tape.freeze([](std::string_view name) { return name == "b"; });
  Var va = tape.parameter("a", a);
  Var vb = tape.parameter("b", b);
  tape.backward(ad::sum(ad::mul(va, vb)));
  CHECK(tape.gradients().size() == 1);
  CHECK(bit_equal(tape.gradient("a"), b));
  CHECK_THROWS_AS(tape.gradient("b"), Error);
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
  GradientTape tape;
  Var a = tape.parameter("a", Tensor({2}, 1.0f));
  CHECK_THROWS_AS(tape.backward(a), Error);
  Var c = tape.constant(Tensor({1}, 3.0f));
  CHECK_THROWS_AS(tape.backward(c), Error);
}

TEST_CASE("shape mismatches are reported") {
  GradientTape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 4}));
  try {
    ad::add(a, b);
    FAIL("expected a throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeMismatch);
  }
  CHECK_THROWS_AS(ad::matmul(a, b), Error);
  CHECK_THROWS_AS(ad::linear(a, b), Error);
}
