#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "moe/moe.hpp"
#include "moe/transformer.hpp"

namespace moe {

// Experts of different width and depth behind a shared embedding/head.
// Tensor layout (MOEF names):
//   shared.embed.weight [V x d_m]   shared.head.weight [V x d_m]
//   router.weight [l x d_m]
//   expert.{i}.proj_in.weight [d_i x d_m]    expert.{i}.proj_in.bias [d_i]
//   expert.{i}.proj_out.weight [d_m x d_i]   expert.{i}.proj_out.bias [d_m]
//   expert.{i}.<trunk names of expert i>, final_norm.gain included
struct HeteroMoEModel {
  std::vector<ModelConfig> expert_configs;
  std::size_t top_k = 2;
  TensorMap tensors;

  std::size_t n_experts() const noexcept { return expert_configs.size(); }
  std::size_t d_model() const;  // d_m
  std::size_t vocab_size() const;
  // Shortest context any trunk accepts.
  std::size_t max_seq_len() const;

  void validate() const;
};

std::vector<TensorSpec> hetero_schema(const std::vector<ModelConfig>& experts);

// Embedding and head of every expert zero-padded to d_m and averaged.
std::pair<Tensor, Tensor> build_shared_embed_head(const std::vector<Checkpoint>& experts);

// alpha = SoftMax(top-K(router * mean(embeddings))). embeddings is [t x d_m].
std::vector<float> sequence_route(const Tensor& router, const Tensor& embeddings,
                                  std::size_t top_k);

// Trunks are verbatim copies; projectors are normal(0, 0.02) with zero bias and
// the router is normal(0, 0.02), all seeded per tensor name.
HeteroMoEModel assemble_hetero_moe(const std::vector<Checkpoint>& experts, std::size_t top_k,
                                   std::uint64_t seed);

Var hetero_forward_logits(GradientTape& tape, const HeteroMoEModel& model,
                          std::span<const Token> tokens, RoutingTrace* trace);
MoEOutput hetero_forward(const HeteroMoEModel& model, const TokenSequence& input);
Var hetero_sequence_loss(GradientTape& tape, const HeteroMoEModel& model,
                         const TokenSequence& sequence);

Checkpoint to_checkpoint(const HeteroMoEModel& model);
HeteroMoEModel hetero_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace moe
