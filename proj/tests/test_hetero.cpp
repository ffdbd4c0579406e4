#include <doctest.h>

#include "moe/error.hpp"
#include "moe/hetero.hpp"
#include "support.hpp"

using namespace moe;

namespace {

const ModelConfig kWide{2, 16, 2, 32, 64, 64};
const ModelConfig kNarrow{3, 8, 2, 16, 64, 64};
const TokenSequence kTokens{3, 9, 27, 14, 5, 60, 2};

void set_identity(Tensor& w) {
  for (float& v : w.data()) v = 0.0f;
  for (std::size_t i = 0; i < std::min(w.dim(0), w.dim(1)); ++i) w.at(i, i) = 1.0f;
}

}  // namespace

TEST_CASE("shared embedding pads then averages") {
  Checkpoint a, b;
  a.config = ModelConfig{1, 4, 1, 4, 1, 8};
  b.config = ModelConfig{1, 2, 1, 4, 1, 8};
  a.tensors["embed.weight"] = Tensor::of({1, 4}, {1, 1, 1, 1});
  b.tensors["embed.weight"] = Tensor::of({1, 2}, {2, 2});
  a.tensors["head.weight"] = Tensor({1, 4});
  b.tensors["head.weight"] = Tensor({1, 2}, 4.0f);
  const auto [embed, head] = build_shared_embed_head({a, b});
  CHECK(embed == Tensor::of({1, 4}, {1.5f, 1.5f, 0.5f, 0.5f}));
  CHECK(head == Tensor::of({1, 4}, {2, 2, 0, 0}));
  const auto [solo, unused] = build_shared_embed_head({b});
  CHECK(solo == Tensor::of({1, 2}, {2, 2}));
  const auto [same, same_head] = build_shared_embed_head({a, a});
  CHECK(bit_equal(same, a.tensors.at("embed.weight")));
  Checkpoint c = b;
  c.config.vocab_size = 2;
  CHECK_THROWS_AS(build_shared_embed_head({a, c}), Error);
}

TEST_CASE("sequence routing worked examples") {
  // Router rows picking out coordinate 0 with scores [1, -1, 0.5].
  Tensor router({3, 2});
  router.at(0, 0) = 1.0f;
  router.at(1, 0) = -1.0f;
  router.at(2, 0) = 0.5f;
  const auto alpha = sequence_route(router, Tensor::of({2, 2}, {0.5f, 3, 1.5f, -3}), 2);
  CHECK(alpha[0] == doctest::Approx(0.6225).epsilon(1e-4));
  CHECK(alpha[1] == 0.0f);
  CHECK(alpha[2] == doctest::Approx(0.3775).epsilon(1e-4));
  CHECK(sequence_route(Tensor({3, 2}), Tensor::of({1, 2}, {1, 2}), 2) ==
        std::vector<float>{0.5f, 0.5f, 0.0f});
}

TEST_CASE("assembly copies trunks and shapes projectors") {
  const Checkpoint wide = build_model(kWide, 1, 0.1f);
  const Checkpoint narrow = build_model(kNarrow, 2, 0.1f);
  const HeteroMoEModel m = assemble_hetero_moe({wide, narrow}, 1, 7);
  CHECK(m.d_model() == 16);
  CHECK(m.tensors.at("expert.1.proj_in.weight").shape() == Shape{8, 16});
  CHECK(m.tensors.at("expert.1.proj_out.weight").shape() == Shape{16, 8});
  CHECK(m.tensors.at("expert.0.proj_in.weight").shape() == Shape{16, 16});
  CHECK(m.tensors.at("expert.1.proj_out.bias") == Tensor({16}));
  for (const auto& spec : trunk_schema(kNarrow)) {
    CHECK(bit_equal(m.tensors.at("expert.1." + spec.name), narrow.tensors.at(spec.name)));
  }
  CHECK(bit_equal(assemble_hetero_moe({wide, narrow}, 1, 7).tensors, m.tensors));
  CHECK_FALSE(bit_equal(assemble_hetero_moe({wide, narrow}, 1, 8).tensors, m.tensors));
  CHECK_THROWS_AS(assemble_hetero_moe({wide, narrow}, 3, 7), Error);
}

TEST_CASE("parameter accounting") {
  const HeteroMoEModel m =
      assemble_hetero_moe({build_model(kWide, 1), build_model(kNarrow, 2)}, 2, 7);
  std::size_t expected = 64 * 16 * 2 + 2 * 16;
  for (const ModelConfig& c : {kWide, kNarrow}) {
    TensorMap trunk;
    for (const auto& spec : trunk_schema(c)) trunk.emplace(spec.name, Tensor(spec.shape));
    expected += parameter_count(trunk) + (16 * c.d_model + c.d_model) + (c.d_model * 16 + 16);
  }
  CHECK(parameter_count(m.tensors) == expected);
}

TEST_CASE("identity projectors collapse to the dense expert") {
  const Checkpoint wide = build_model(kWide, 1, 0.1f);
  HeteroMoEModel m = assemble_hetero_moe({wide, build_model(kNarrow, 2, 0.1f)}, 1, 7);
  set_identity(m.tensors.at("expert.0.proj_in.weight"));
  set_identity(m.tensors.at("expert.0.proj_out.weight"));
  m.tensors.at("shared.embed.weight") = wide.tensors.at("embed.weight");
  m.tensors.at("shared.head.weight") = wide.tensors.at("head.weight");
  m.tensors.at("router.weight") = Tensor({2, 16});  // tie -> expert 0
  const MoEOutput out = hetero_forward(m, kTokens);
  CHECK(out.trace.decisions.size() == 1);
  CHECK(out.trace.decisions[0].weights == std::vector<float>{1.0f, 0.0f});
  CHECK(testing::max_rel_diff(out.logits, forward(wide, kTokens), 1e-3) <= 1e-5);
}

TEST_CASE("identical experts make the alpha split irrelevant") {
  const Checkpoint e = build_model(kWide, 1, 0.1f);
  HeteroMoEModel m = assemble_hetero_moe({e, e}, 2, 7);
  for (const char* p : {"proj_in.weight", "proj_out.weight"}) {
    m.tensors.at(std::string("expert.1.") + p) = m.tensors.at(std::string("expert.0.") + p);
  }
  const Tensor a = hetero_forward(m, kTokens).logits;
  m.tensors.at("router.weight") = testing::random_tensor({2, 16}, 3, 5.0);
  const MoEOutput b = hetero_forward(m, kTokens);
  CHECK(b.trace.decisions[0].weights[0] != doctest::Approx(0.5));
  CHECK(testing::norm_rel_error(b.logits, a) < 1e-6);
}

TEST_CASE("hetero forward is causal") {
  const HeteroMoEModel m =
      assemble_hetero_moe({build_model(kWide, 1, 0.1f), build_model(kNarrow, 2, 0.1f)}, 2, 7);
  // The routing decision averages all embeddings, so fix it before comparing prefixes.
  const Tensor full = hetero_forward(m, kTokens).logits;
  TokenSequence changed = kTokens;
  changed.back() = 1;
  HeteroMoEModel fixed = m;
  fixed.tensors.at("router.weight") = Tensor({2, 16});
  const Tensor f1 = hetero_forward(fixed, kTokens).logits;
  const Tensor f2 = hetero_forward(fixed, changed).logits;
  for (std::size_t r = 0; r + 1 < kTokens.size(); ++r)
    for (std::size_t c = 0; c < 64; ++c) REQUIRE(f1.at(r, c) == f2.at(r, c));
  CHECK(full.shape() == f1.shape());
}

TEST_CASE("gradients reach only the selected experts") {
  const ModelConfig third{1, 8, 2, 16, 64, 64};
  HeteroMoEModel m = assemble_hetero_moe(
      {build_model(kWide, 1, 0.1f), build_model(kNarrow, 2, 0.1f), build_model(third, 3, 0.1f)}, 2, 7);
  Tensor& router = m.tensors.at("router.weight");
  router = testing::random_tensor({3, 16}, 5, 0.5);
  GradientTape tape;
  RoutingTrace trace;
  hetero_forward_logits(tape, m, scoring_input(kTokens), &trace);
  const auto& alpha = trace.decisions.at(0).weights;

  GradientTape grad_tape;
  for (const auto& [name, t] : m.tensors) grad_tape.parameter(name, t);
  Var loss = hetero_sequence_loss(grad_tape, m, kTokens);
  CHECK(loss.value()[0] > 0.0f);
  grad_tape.backward(loss);
  auto nonzero = [](const Tensor& t) {
    for (float v : t.data())
      if (v != 0.0f) return true;
    return false;
  };
  std::size_t selected = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CAPTURE(i);
    const bool on = alpha[i] > 0.0f;
    selected += on;
    const std::string p = expert_prefix(i);
    for (const char* w : {"proj_in.weight", "proj_in.bias", "proj_out.weight", "proj_out.bias"}) {
      CHECK(nonzero(grad_tape.gradient(p + w)) == on);
    }
    const Tensor& gr = grad_tape.gradient("router.weight");
    bool row = false;
    for (std::size_t c = 0; c < 16; ++c) row = row || gr.at(i, c) != 0.0f;
    CHECK(row == on);
  }
  CHECK(selected == 2);
}

TEST_CASE("hetero gradient matches finite differences") {
  const HeteroMoEModel base =
      assemble_hetero_moe({build_model(kWide, 1, 0.3f), build_model(kNarrow, 2, 0.3f)}, 2, 7);
  TensorMap params = base.tensors;
  params.at("router.weight") = testing::random_tensor({2, 16}, 5, 0.5);
  for (auto& [name, t] : params)
    if (name.find("proj_") != std::string::npos && name.ends_with("weight"))
      for (float& v : t.data()) v *= 15.0f;
  testing::LossFn fn = [&](GradientTape& tape, const TensorMap& ps) {
    HeteroMoEModel m{base.expert_configs, base.top_k, ps};
    return hetero_sequence_loss(tape, m, kTokens);
  };
  const TensorMap analytic = testing::analytic_gradient(fn, params);
  for (std::string name : {"router.weight", "expert.1.proj_in.weight", "expert.0.proj_out.bias",
                           "shared.embed.weight", "expert.1.layer.2.ffn.w_up"}) {
    CAPTURE(name);
    CHECK(testing::norm_rel_error(analytic.at(name),
                                  testing::numeric_gradient(fn, params, name, 1e-2f)) < 2e-2);
  }
}
