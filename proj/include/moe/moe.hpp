#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moe/merge.hpp"
#include "moe/transformer.hpp"

namespace moe {

enum class AttentionMode { Merged, Separate };
enum class RoutingMode { Learned, Random, Ppl, Grad };

std::string_view attention_mode_name(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view name);
std::string_view routing_mode_name(RoutingMode mode);
RoutingMode parse_routing_mode(std::string_view name);
bool is_heuristic(RoutingMode mode);

// One routing decision: expert weights for a token at a layer, or for a whole
// sequence (layer and position unset) under heuristic / sequence routing.
struct RoutingDecision {
  std::optional<std::size_t> layer;
  std::optional<std::size_t> position;
  std::vector<float> weights;
};

struct RoutingTrace {
  std::size_t n_experts = 0;
  std::vector<RoutingDecision> decisions;
};

// Mean expert weight over every decision of the trace. Throws on an empty trace.
std::vector<double> routing_probability(const RoutingTrace& trace);
// Mean over the decisions of several traces pooled together.
std::vector<double> routing_probability(std::span<const RoutingTrace> traces);

// Tensor layout (MOEF names):
//   shared:   canonical dense names except layer.{j}.ffn.* (and layer.{j}.attn.*
//             in separate mode)
//   experts:  expert.{i}.layer.{j}.ffn.{w_gate,w_up,w_down}
//             expert.{i}.layer.{j}.attn.{wq,wk,wv,wo} in separate mode
//   routers:  router.{j}.weight [l x d_model]
// Expert indices are 0-based.
struct MoEModel {
  ModelConfig config;
  std::size_t n_experts = 0;
  std::size_t top_k = 2;
  AttentionMode attention_mode = AttentionMode::Merged;
  RoutingMode routing_mode = RoutingMode::Learned;
  TensorMap tensors;

  void validate() const;
};

std::string expert_prefix(std::size_t expert);
std::string router_name(std::size_t layer);
bool is_router_tensor(std::string_view name);

std::vector<TensorSpec> moe_schema(const ModelConfig& config, std::size_t n_experts,
                                   AttentionMode attention_mode);

// Shared tensors are merged with `recipe` (FFNs, and attention when separate,
// are excluded from the merge). Per-expert tensors are verbatim copies. Routers
// are normal(0, 0.02) from router_seed.
MoEModel assemble_moe(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                      MergeRecipe recipe, AttentionMode attention_mode, std::size_t top_k,
                      std::uint64_t router_seed, RoutingMode routing_mode = RoutingMode::Learned);

Checkpoint to_checkpoint(const MoEModel& model);
MoEModel moe_from_checkpoint(const Checkpoint& checkpoint);

// Dense checkpoint made of the shared tensors plus expert i's tensors.
Checkpoint collapse_to_dense(const MoEModel& model, std::size_t expert);

// FF_MoE(v) = sum over the top-K experts of SoftMax(top-K(router v)) * FF_i(v).
// Each expert map holds ffn.w_gate, ffn.w_up and ffn.w_down.
Tensor moe_ffn_forward(const Tensor& router, const std::vector<TensorMap>& expert_ffns,
                       const Tensor& v, std::size_t top_k, std::vector<float>* gates = nullptr);

// Token-routed FFN over v [t x d]. Only experts that won at least one token are
// evaluated. Writes the [t x l] gate matrix to gates_out when given.
Var token_routed_ffn(GradientTape& tape, Var v, Var router, const TensorMap& tensors,
                     const std::vector<std::string>& expert_prefixes, std::size_t top_k,
                     Tensor* gates_out);

struct MoEOutput {
  Tensor logits;
  RoutingTrace trace;
};

// Heuristic weights are required exactly when routing_mode is ppl or grad; they
// are applied at every layer for the whole sequence.
Var moe_forward_logits(GradientTape& tape, const MoEModel& model, std::span<const Token> tokens,
                       const std::vector<float>* heuristic_weights, RoutingTrace* trace);
MoEOutput moe_forward(const MoEModel& model, const TokenSequence& input,
                      const std::vector<float>* heuristic_weights = nullptr);
Var moe_sequence_loss(GradientTape& tape, const MoEModel& model, const TokenSequence& sequence,
                      const std::vector<float>* heuristic_weights = nullptr);

// alpha = SoftMax(top-K(1/PPL(x | expert_1), ..., 1/PPL(x | expert_l))).
std::vector<float> ppl_route(const std::vector<Checkpoint>& experts, const TokenSequence& x_inf,
                             std::size_t top_k, std::vector<double>* perplexities = nullptr);

// Gradient of the BOS-conditioned cross-entropy of x_inf w.r.t. all base tensors.
TensorMap loss_gradient(const Checkpoint& base, const TokenSequence& x_inf);

// alpha = SoftMax(top-K(cos(g, tau_1), ..., cos(g, tau_l))) with g the loss
// gradient at the base model, flattened over all tensors. Throws Degenerate
// when g is zero.
std::vector<float> grad_route(const Checkpoint& base, const std::vector<TaskVector>& taus,
                              const TokenSequence& x_inf, std::size_t top_k,
                              std::vector<double>* similarities = nullptr);
std::vector<float> grad_route_from_gradient(const TensorMap& gradient,
                                            const std::vector<TaskVector>& taus,
                                            std::size_t top_k,
                                            std::vector<double>* similarities = nullptr);

}  // namespace moe
