#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moe/autodiff.hpp"
#include "moe/tensor.hpp"

namespace moe {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 32;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 64;

  // Throws InvalidArgument unless every field is >= 1, d_model splits evenly
  // into heads, and each head has an even width (rotary pairs).
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using Metadata = std::map<std::string, std::string, std::less<>>;
using TokenSequence = std::vector<Token>;

inline constexpr Token kBosToken = 0;
inline constexpr float kRopeBase = 10000.0f;
inline constexpr float kInitStd = 0.02f;

struct Checkpoint {
  ModelConfig config;
  TensorMap tensors;
  Metadata metadata;
};

struct TensorSpec {
  std::string name;
  Shape shape;
};

std::string layer_prefix(std::size_t layer);

// Canonical dense schema:
//   embed.weight [V x d]                 head.weight [V x d]
//   layer.{i}.attn.{wq,wk,wv,wo} [d x d] layer.{i}.attn_norm.gain [d]
//   layer.{i}.ffn.{w_gate,w_up} [f x d]  layer.{i}.ffn.w_down [d x f]
//   layer.{i}.ffn_norm.gain [d]          final_norm.gain [d]
// Linear weights are stored [out x in].
std::vector<TensorSpec> model_schema(const ModelConfig& config);
// Tensors of decoder layers plus final_norm, without embedding or head.
std::vector<TensorSpec> trunk_schema(const ModelConfig& config);

// Throws SchemaMismatch naming the first missing, extra or misshapen tensor.
void validate_schema(const std::vector<TensorSpec>& schema, const TensorMap& tensors);

bool is_ffn_tensor(std::string_view name);
bool is_attention_tensor(std::string_view name);

// Normal(0, std) weights from a seeded generator, unit norm gains.
Checkpoint build_model(const ModelConfig& config, std::uint64_t seed, float init_std = kInitStd);

// Registers tensors[name] on the tape, failing with SchemaMismatch if absent.
Var lookup_param(GradientTape& tape, const TensorMap& tensors, const std::string& name);

// Differentiable building blocks shared by the dense, MoE and heterogeneous
// models. `prefix` selects the tensor namespace, e.g. "layer.3." or
// "expert.1.layer.3.".
Var attention_sublayer(GradientTape& tape, Var normed, const TensorMap& tensors,
                       const std::string& prefix, std::size_t n_heads);
Var ffn_sublayer(GradientTape& tape, Var normed, const TensorMap& tensors,
                 const std::string& prefix);
// All decoder layers and the final norm over hidden states x [t x d].
Var decoder_trunk(GradientTape& tape, Var x, const TensorMap& tensors, const std::string& prefix,
                  const ModelConfig& config);

void validate_tokens(std::span<const Token> tokens, const ModelConfig& config);

Var forward_logits(GradientTape& tape, const Checkpoint& model, std::span<const Token> tokens);
// Logits [t x V]; row j depends only on tokens[0..j].
Tensor forward(const Checkpoint& model, const TokenSequence& input);

// Model input for scoring `sequence`: BOS followed by all but the last token.
TokenSequence scoring_input(const TokenSequence& sequence);
// Mean next-token negative log-likelihood of `sequence` with BOS conditioning
// the first token, recorded on the tape.
Var sequence_loss(GradientTape& tape, const Checkpoint& model, const TokenSequence& sequence);
double sequence_nll(const Checkpoint& model, const TokenSequence& sequence);
// exp(mean NLL). The first token is scored given a prepended BOS.
double perplexity(const Checkpoint& model, const TokenSequence& sequence);

using LogitsFn = std::function<Tensor(const TokenSequence&)>;

// Autoregressive decoding. Temperature 0 is greedy argmax with lowest-index
// ties; otherwise tokens are sampled from softmax(logits / temperature).
// Inputs longer than max_context keep only their most recent tokens.
TokenSequence generate(const LogitsFn& logits_fn, std::size_t max_context,
                       const TokenSequence& prompt, std::size_t max_new, float temperature,
                       std::uint64_t seed = 0);
TokenSequence generate(const Checkpoint& model, const TokenSequence& prompt, std::size_t max_new,
                       float temperature, std::uint64_t seed = 0);

}  // namespace moe
