#include <doctest.h>

#include <cmath>

#include "moe/error.hpp"
#include "moe/transformer.hpp"
#include "support.hpp"

using namespace moe;

namespace {

ModelConfig tiny() { return ModelConfig{2, 16, 2, 32, 64, 64}; }

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny().validate());
  ModelConfig odd_heads = tiny();
  odd_heads.n_heads = 3;
  CHECK_THROWS_AS(odd_heads.validate(), Error);
  ModelConfig odd_width = tiny();
  odd_width.n_heads = 16;  // head width 1
  CHECK_THROWS_AS(odd_width.validate(), Error);
  ModelConfig zero = tiny();
  zero.n_layers = 0;
  CHECK_THROWS_AS(zero.validate(), Error);
}

TEST_CASE("build_model follows the schema and is seed-deterministic") {
  const auto a = build_model(tiny(), 5);
  const auto b = build_model(tiny(), 5);
  const auto c = build_model(tiny(), 6);
  CHECK_NOTHROW(validate_schema(model_schema(tiny()), a.tensors));
  CHECK(bit_equal(a.tensors, b.tensors));
  CHECK_FALSE(bit_equal(a.tensors, c.tensors));
  CHECK(a.tensors.at("final_norm.gain")[3] == 1.0f);
  std::size_t expected = 2 * 64 * 16 + 16;
  expected += 2 * (4 * 16 * 16 + 3 * 16 * 32 + 2 * 16);
  CHECK(parameter_count(a.tensors) == expected);
}

TEST_CASE("schema validation names the offending tensor") {
  auto m = build_model(tiny(), 1);
  m.tensors.erase("layer.1.ffn.w_up");
  try {
    validate_schema(model_schema(tiny()), m.tensors);
    FAIL("expected a throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SchemaMismatch);
    CHECK(std::string(e.what()).find("layer.1.ffn.w_up") != std::string::npos);
  }
  m = build_model(tiny(), 1);
  m.tensors["extra"] = Tensor({1});
  CHECK_THROWS_AS(validate_schema(model_schema(tiny()), m.tensors), Error);
  m = build_model(tiny(), 1);
  m.tensors["head.weight"] = Tensor({64, 8});
  CHECK_THROWS_AS(validate_schema(model_schema(tiny()), m.tensors), Error);
}

TEST_CASE("forward is causal and bit-reproducible per prefix") {
  const auto m = build_model(tiny(), 9, 0.2f);
  const TokenSequence tokens{0, 5, 9, 33, 2, 61, 7, 7, 12, 40};
  const Tensor full = forward(m, tokens);
  CHECK(full.shape() == Shape{10, 64});
  for (std::size_t j = 1; j <= tokens.size(); ++j) {
    const TokenSequence prefix(tokens.begin(), tokens.begin() + static_cast<long>(j));
    const Tensor part = forward(m, prefix);
    for (std::size_t r = 0; r < j; ++r)
      for (std::size_t c = 0; c < 64; ++c) REQUIRE(part.at(r, c) == full.at(r, c));
  }
  // Changing a later token leaves earlier rows untouched.
  TokenSequence changed = tokens;
  changed[6] = 50;
  const Tensor alt = forward(m, changed);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 64; ++c) REQUIRE(alt.at(r, c) == full.at(r, c));
  CHECK(alt.at(6, 0) != full.at(6, 0));
}

TEST_CASE("token validation") {
  const auto m = build_model(tiny(), 1);
  CHECK_THROWS_AS(forward(m, {}), Error);
  CHECK_THROWS_AS(forward(m, {1, 64}), Error);
  CHECK_THROWS_AS(forward(m, {-1}), Error);
  CHECK_THROWS_AS(forward(m, TokenSequence(65, 1)), Error);
  CHECK_NOTHROW(forward(m, TokenSequence(64, 1)));
}

TEST_CASE("perplexity of a uniform model equals the vocabulary size") {
  auto m = build_model(tiny(), 1);
  for (float& v : m.tensors.at("head.weight").data()) v = 0.0f;
  CHECK(perplexity(m, {3, 4, 5}) == doctest::Approx(64.0).epsilon(1e-5));
}

TEST_CASE("scoring input prepends BOS and drops the last token") {
  CHECK(scoring_input({7, 8, 9}) == TokenSequence{kBosToken, 7, 8});
  CHECK(scoring_input({7}) == TokenSequence{kBosToken});
  CHECK_THROWS_AS(scoring_input({}), Error);
}

TEST_CASE("model loss gradient matches finite differences") {
  const auto m = build_model(tiny(), 3, 0.3f);
  const TokenSequence seq{4, 17, 9, 9, 30, 2, 11, 5};
  testing::LossFn fn = [&](GradientTape& tape, const TensorMap& params) {
    Checkpoint c{m.config, params, {}};
    // Parameters are registered by name, so the copy's tensors are what the tape sees.
    return sequence_loss(tape, c, seq);
  };
  GradientTape tape;
  for (const auto& [name, t] : m.tensors) tape.parameter(name, t);
  tape.backward(sequence_loss(tape, m, seq));
  for (const auto& [name, t] : m.tensors) {
    CAPTURE(name);
    const Tensor numeric = testing::numeric_gradient(fn, m.tensors, name, 1e-3f);
    CHECK(testing::norm_rel_error(tape.gradient(name), numeric) < 1e-2);
  }
}

TEST_CASE("greedy generation picks the lowest index on ties") {
  auto m = build_model(tiny(), 1);
  for (float& v : m.tensors.at("head.weight").data()) v = 0.0f;
  CHECK(generate(m, {5}, 3, 0.0f) == TokenSequence{5, 0, 0, 0});
  const auto a = generate(build_model(tiny(), 2, 0.5f), {5, 6}, 6, 1.0f, 42);
  const auto b = generate(build_model(tiny(), 2, 0.5f), {5, 6}, 6, 1.0f, 42);
  CHECK(a == b);
  CHECK(a.size() == 8);
}

TEST_CASE("generation slides the context window") {
  std::vector<std::size_t> seen;
  LogitsFn fn = [&](const TokenSequence& s) {
    seen.push_back(s.size());
    return Tensor({s.size(), 4});
  };
  generate(fn, 3, {1, 1}, 4, 0.0f);
  CHECK(seen == std::vector<std::size_t>{2, 3, 3, 3});
}
