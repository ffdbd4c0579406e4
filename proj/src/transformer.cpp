#include "moe/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moe/error.hpp"
#include "moe/gating.hpp"
#include "moe/random.hpp"

namespace moe {

void ModelConfig::validate() const {
  require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ffn >= 1 && vocab_size >= 1 &&
              max_seq_len >= 1,
          ErrorKind::InvalidArgument, "model config fields must all be >= 1");
  require(d_model % n_heads == 0, ErrorKind::InvalidArgument,
          "d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
              std::to_string(n_heads));
  require((d_model / n_heads) % 2 == 0, ErrorKind::InvalidArgument,
          "head width must be even for rotary embeddings");
}

std::string layer_prefix(std::size_t layer) { return "layer." + std::to_string(layer) + "."; }

std::vector<TensorSpec> trunk_schema(const ModelConfig& c) {
  std::vector<TensorSpec> out;
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      out.push_back({p + "attn." + w, {c.d_model, c.d_model}});
    }
    out.push_back({p + "attn_norm.gain", {c.d_model}});
    out.push_back({p + "ffn.w_gate", {c.d_ffn, c.d_model}});
    out.push_back({p + "ffn.w_up", {c.d_ffn, c.d_model}});
    out.push_back({p + "ffn.w_down", {c.d_model, c.d_ffn}});
    out.push_back({p + "ffn_norm.gain", {c.d_model}});
  }
  out.push_back({"final_norm.gain", {c.d_model}});
  return out;
}

std::vector<TensorSpec> model_schema(const ModelConfig& c) {
  auto out = trunk_schema(c);
  out.push_back({"embed.weight", {c.vocab_size, c.d_model}});
  out.push_back({"head.weight", {c.vocab_size, c.d_model}});
  return out;
}

void validate_schema(const std::vector<TensorSpec>& schema, const TensorMap& tensors) {
  std::set<std::string_view> expected;
  for (const auto& spec : schema) {
    expected.insert(spec.name);
    auto it = tensors.find(spec.name);
    require(it != tensors.end(), ErrorKind::SchemaMismatch, "missing tensor '" + spec.name + "'");
    require(it->second.shape() == spec.shape, ErrorKind::SchemaMismatch,
            "tensor '" + spec.name + "' has shape " + shape_string(it->second.shape()) +
                ", expected " + shape_string(spec.shape));
  }
  for (const auto& [name, t] : tensors) {
    require(expected.contains(name), ErrorKind::SchemaMismatch,
            "unexpected tensor '" + name + "'");
  }
}

bool is_ffn_tensor(std::string_view name) { return name.find(".ffn.") != std::string_view::npos; }

bool is_attention_tensor(std::string_view name) {
  return name.find(".attn.") != std::string_view::npos;
}

Checkpoint build_model(const ModelConfig& config, std::uint64_t seed, float init_std) {
  config.validate();
  Checkpoint model;
  model.config = config;
  for (const auto& spec : model_schema(config)) {
    Tensor t(spec.shape);
    if (spec.name.ends_with(".gain")) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else {
      Rng rng(seed ^ fnv1a64(spec.name));
      for (float& v : t.data()) v = static_cast<float>(rng.normal() * init_std);
    }
    model.tensors.emplace(spec.name, std::move(t));
  }
  model.metadata["kind"] = "dense";
  model.metadata["seed"] = std::to_string(seed);
  return model;
}

Var lookup_param(GradientTape& tape, const TensorMap& tensors, const std::string& name) {
  auto it = tensors.find(name);
  require(it != tensors.end(), ErrorKind::SchemaMismatch, "missing tensor '" + name + "'");
  return tape.parameter(name, it->second);
}

Var attention_sublayer(GradientTape& tape, Var normed, const TensorMap& tensors,
                       const std::string& prefix, std::size_t n_heads) {
  Var q = ad::linear(normed, lookup_param(tape, tensors, prefix + "attn.wq"));
  Var k = ad::linear(normed, lookup_param(tape, tensors, prefix + "attn.wk"));
  Var v = ad::linear(normed, lookup_param(tape, tensors, prefix + "attn.wv"));
  q = ad::rope(q, n_heads, kRopeBase);
  k = ad::rope(k, n_heads, kRopeBase);
  Var mixed = ad::causal_attention(q, k, v, n_heads);
  return ad::linear(mixed, lookup_param(tape, tensors, prefix + "attn.wo"));
}

Var ffn_sublayer(GradientTape& tape, Var normed, const TensorMap& tensors,
                 const std::string& prefix) {
  Var gate = ad::linear(normed, lookup_param(tape, tensors, prefix + "ffn.w_gate"));
  Var up = ad::linear(normed, lookup_param(tape, tensors, prefix + "ffn.w_up"));
  return ad::linear(ad::swiglu(gate, up), lookup_param(tape, tensors, prefix + "ffn.w_down"));
}

Var decoder_trunk(GradientTape& tape, Var x, const TensorMap& tensors, const std::string& prefix,
                  const ModelConfig& config) {
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string p = prefix + layer_prefix(i);
    Var h = ad::rms_norm(x, lookup_param(tape, tensors, p + "attn_norm.gain"));
    x = ad::add(x, attention_sublayer(tape, h, tensors, p, config.n_heads));
    h = ad::rms_norm(x, lookup_param(tape, tensors, p + "ffn_norm.gain"));
    x = ad::add(x, ffn_sublayer(tape, h, tensors, p));
  }
  return ad::rms_norm(x, lookup_param(tape, tensors, prefix + "final_norm.gain"));
}

void validate_tokens(std::span<const Token> tokens, const ModelConfig& config) {
  require(!tokens.empty(), ErrorKind::InvalidArgument, "token sequence is empty");
  require(tokens.size() <= config.max_seq_len, ErrorKind::InvalidArgument,
          "sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
              std::to_string(config.max_seq_len));
  for (Token t : tokens) {
    require(t >= 0 && static_cast<std::size_t>(t) < config.vocab_size,
            ErrorKind::InvalidArgument,
            "token " + std::to_string(t) + " outside vocabulary of " +
                std::to_string(config.vocab_size));
  }
}

Var forward_logits(GradientTape& tape, const Checkpoint& model, std::span<const Token> tokens) {
  validate_tokens(tokens, model.config);
  Var x = ad::embedding(lookup_param(tape, model.tensors, "embed.weight"), tokens);
  x = decoder_trunk(tape, x, model.tensors, "", model.config);
  return ad::linear(x, lookup_param(tape, model.tensors, "head.weight"));
}

Tensor forward(const Checkpoint& model, const TokenSequence& input) {
  GradientTape tape;
  return forward_logits(tape, model, input).value();
}

TokenSequence scoring_input(const TokenSequence& sequence) {
  require(!sequence.empty(), ErrorKind::InvalidArgument, "cannot score an empty sequence");
  TokenSequence input;
  input.reserve(sequence.size());
  input.push_back(kBosToken);
  input.insert(input.end(), sequence.begin(), sequence.end() - 1);
  return input;
}

Var sequence_loss(GradientTape& tape, const Checkpoint& model, const TokenSequence& sequence) {
  const TokenSequence input = scoring_input(sequence);
  return ad::cross_entropy(forward_logits(tape, model, input), sequence);
}

double sequence_nll(const Checkpoint& model, const TokenSequence& sequence) {
  GradientTape tape;
  return sequence_loss(tape, model, sequence).value()[0];
}

double perplexity(const Checkpoint& model, const TokenSequence& sequence) {
  return std::exp(sequence_nll(model, sequence));
}

TokenSequence generate(const LogitsFn& logits_fn, std::size_t max_context,
                       const TokenSequence& prompt, std::size_t max_new, float temperature,
                       std::uint64_t seed) {
  require(temperature >= 0.0f, ErrorKind::InvalidArgument, "temperature must be >= 0");
  require(max_context >= 1, ErrorKind::InvalidArgument, "max_context must be >= 1");
  TokenSequence out = prompt;
  Rng rng(seed);
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::size_t start = out.size() > max_context ? out.size() - max_context : 0;
    const TokenSequence window(out.begin() + static_cast<std::ptrdiff_t>(start), out.end());
    const Tensor logits = logits_fn(window);
    std::span<const float> last(logits.row(logits.rows() - 1), logits.cols());
    if (temperature == 0.0f) {
      out.push_back(static_cast<Token>(argmax(last)));
      continue;
    }
    std::vector<float> p(last.begin(), last.end());
    for (float& v : p) v /= temperature;
    kernels::softmax_inplace(p.data(), p.size());
    double u = rng.uniform(), acc = 0.0;
    std::size_t pick = p.size() - 1;
    for (std::size_t i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    out.push_back(static_cast<Token>(pick));
  }
  return out;
}

TokenSequence generate(const Checkpoint& model, const TokenSequence& prompt, std::size_t max_new,
                       float temperature, std::uint64_t seed) {
  return generate([&](const TokenSequence& s) { return forward(model, s); },
                  model.config.max_seq_len, prompt, max_new, temperature, seed);
}

}  // namespace moe
