#include "moe/moe.hpp"

#include <algorithm>
#include <cmath>

#include "moe/checkpoint.hpp"
#include "moe/error.hpp"
#include "moe/gating.hpp"
#include "moe/random.hpp"

namespace moe {

std::string_view attention_mode_name(AttentionMode mode) {
  return mode == AttentionMode::Merged ? "merged" : "separate";
}

AttentionMode parse_attention_mode(std::string_view name) {
  if (name == "merged") return AttentionMode::Merged;
  if (name == "separate") return AttentionMode::Separate;
  fail(ErrorKind::InvalidArgument, "unknown attention mode '" + std::string(name) + "'");
}

std::string_view routing_mode_name(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::Learned: return "learned";
    case RoutingMode::Random: return "random";
    case RoutingMode::Ppl: return "ppl";
    case RoutingMode::Grad: return "grad";
  }
  return "?";
}

RoutingMode parse_routing_mode(std::string_view name) {
  if (name == "learned") return RoutingMode::Learned;
  if (name == "random") return RoutingMode::Random;
  if (name == "ppl") return RoutingMode::Ppl;
  if (name == "grad") return RoutingMode::Grad;
  fail(ErrorKind::InvalidArgument, "unknown routing mode '" + std::string(name) + "'");
}

bool is_heuristic(RoutingMode mode) {
  return mode == RoutingMode::Ppl || mode == RoutingMode::Grad;
}

std::vector<double> routing_probability(std::span<const RoutingTrace> traces) {
  std::vector<double> total;
  std::size_t count = 0;
  for (const auto& trace : traces) {
    if (total.empty()) total.assign(trace.n_experts, 0.0);
    require(trace.n_experts == total.size(), ErrorKind::ShapeMismatch,
            "routing traces disagree on the expert count");
    for (const auto& d : trace.decisions) {
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += d.weights.at(i);
      ++count;
    }
  }
  require(count > 0, ErrorKind::InvalidArgument, "routing probability of an empty trace");
  for (double& v : total) v /= static_cast<double>(count);
  return total;
}

std::vector<double> routing_probability(const RoutingTrace& trace) {
  return routing_probability(std::span<const RoutingTrace>(&trace, 1));
}

std::string expert_prefix(std::size_t expert) { return "expert." + std::to_string(expert) + "."; }

std::string router_name(std::size_t layer) { return "router." + std::to_string(layer) + ".weight"; }

bool is_router_tensor(std::string_view name) { return name.starts_with("router."); }

namespace {

bool is_per_expert(std::string_view name, AttentionMode mode) {
  return is_ffn_tensor(name) || (mode == AttentionMode::Separate && is_attention_tensor(name));
}

std::size_t metadata_size(const Checkpoint& c, const char* key) {
  auto it = c.metadata.find(key);
  require(it != c.metadata.end(), ErrorKind::Format,
          std::string("MoE checkpoint is missing metadata '") + key + "'");
  try {
    return std::stoul(it->second);
  } catch (const std::exception&) {
    fail(ErrorKind::Format, std::string("metadata '") + key + "' is not a number");
  }
}

std::string metadata_string(const Checkpoint& c, const char* key) {
  auto it = c.metadata.find(key);
  require(it != c.metadata.end(), ErrorKind::Format,
          std::string("MoE checkpoint is missing metadata '") + key + "'");
  return it->second;
}

}  // namespace

std::vector<TensorSpec> moe_schema(const ModelConfig& config, std::size_t n_experts,
                                   AttentionMode attention_mode) {
  std::vector<TensorSpec> out;
  const auto dense = model_schema(config);
  for (const auto& spec : dense) {
    if (!is_per_expert(spec.name, attention_mode)) out.push_back(spec);
  }
  for (std::size_t e = 0; e < n_experts; ++e) {
    for (const auto& spec : dense) {
      if (is_per_expert(spec.name, attention_mode)) {
        out.push_back({expert_prefix(e) + spec.name, spec.shape});
      }
    }
  }
  for (std::size_t j = 0; j < config.n_layers; ++j) {
    out.push_back({router_name(j), {n_experts, config.d_model}});
  }
  return out;
}

void MoEModel::validate() const {
  config.validate();
  require(n_experts >= 1, ErrorKind::InvalidArgument, "MoE needs at least one expert");
  require(top_k >= 1 && top_k <= n_experts, ErrorKind::InvalidArgument,
          "top_k " + std::to_string(top_k) + " must lie in [1, " + std::to_string(n_experts) +
              "]");
  require(attention_mode == AttentionMode::Merged || is_heuristic(routing_mode),
          ErrorKind::InvalidArgument,
          "separate attention needs sequence-level (ppl or grad) routing");
  validate_schema(moe_schema(config, n_experts, attention_mode), tensors);
}

MoEModel assemble_moe(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                      MergeRecipe recipe, AttentionMode attention_mode, std::size_t top_k,
                      std::uint64_t router_seed, RoutingMode routing_mode) {
  require(!experts.empty(), ErrorKind::InvalidArgument, "MoE needs at least one expert");
  require(top_k >= 1 && top_k <= experts.size(), ErrorKind::InvalidArgument,
          "top_k " + std::to_string(top_k) + " exceeds expert count " +
              std::to_string(experts.size()));
  for (const auto& e : experts) {
    require(e.config == base.config, ErrorKind::SchemaMismatch,
            "experts must share the base model configuration");
  }
  auto patterns = recipe.tensor_filter.patterns();
  patterns.push_back("!layer.*.ffn.*");
  if (attention_mode == AttentionMode::Separate) patterns.push_back("!layer.*.attn.*");
  recipe.tensor_filter = TensorFilter(patterns);

  MoEModel model;
  model.config = base.config;
  model.n_experts = experts.size();
  model.top_k = top_k;
  model.attention_mode = attention_mode;
  model.routing_mode = routing_mode;

  for (auto& [name, t] : merge_params(base, experts, recipe)) {
    if (!is_per_expert(name, attention_mode)) model.tensors.emplace(name, std::move(t));
  }
  for (std::size_t e = 0; e < experts.size(); ++e) {
    for (const auto& [name, t] : experts[e].tensors) {
      if (is_per_expert(name, attention_mode)) model.tensors.emplace(expert_prefix(e) + name, t);
    }
  }
  for (std::size_t j = 0; j < base.config.n_layers; ++j) {
    const std::string name = router_name(j);
    Tensor router({experts.size(), base.config.d_model});
    Rng rng(router_seed ^ fnv1a64(name));
    for (float& v : router.data()) v = static_cast<float>(rng.normal() * kInitStd);
    model.tensors.emplace(name, std::move(router));
  }
  model.validate();
  return model;
}

Checkpoint to_checkpoint(const MoEModel& model) {
  Checkpoint c;
  c.config = model.config;
  c.tensors = model.tensors;
  c.metadata["kind"] = "moe";
  c.metadata["experts"] = std::to_string(model.n_experts);
  c.metadata["top_k"] = std::to_string(model.top_k);
  c.metadata["attention_mode"] = std::string(attention_mode_name(model.attention_mode));
  c.metadata["routing_mode"] = std::string(routing_mode_name(model.routing_mode));
  return c;
}

MoEModel moe_from_checkpoint(const Checkpoint& checkpoint) {
  require(checkpoint_kind(checkpoint) == "moe", ErrorKind::Format,
          "checkpoint is not an MoE (kind=moe)");
  MoEModel model;
  model.config = checkpoint.config;
  model.n_experts = metadata_size(checkpoint, "experts");
  model.top_k = metadata_size(checkpoint, "top_k");
  model.attention_mode = parse_attention_mode(metadata_string(checkpoint, "attention_mode"));
  model.routing_mode = parse_routing_mode(metadata_string(checkpoint, "routing_mode"));
  model.tensors = checkpoint.tensors;
  model.validate();
  return model;
}

Checkpoint collapse_to_dense(const MoEModel& model, std::size_t expert) {
  require(expert < model.n_experts, ErrorKind::InvalidArgument, "expert index out of range");
  Checkpoint c;
  c.config = model.config;
  const std::string prefix = expert_prefix(expert);
  for (const auto& [name, t] : model.tensors) {
    if (name.starts_with(prefix)) {
      c.tensors.emplace(name.substr(prefix.size()), t);
    } else if (!name.starts_with("expert.") && !is_router_tensor(name)) {
      c.tensors.emplace(name, t);
    }
  }
  c.metadata["kind"] = "dense";
  c.metadata["name"] = "collapsed_expert_" + std::to_string(expert);
  validate_schema(model_schema(c.config), c.tensors);
  return c;
}

Var token_routed_ffn(GradientTape& tape, Var v, Var router, const TensorMap& tensors,
                     const std::vector<std::string>& expert_prefixes, std::size_t top_k,
                     Tensor* gates_out) {
  Var scores = ad::linear(v, router);
  Var gates = ad::top_k_softmax(scores, top_k);
  const Tensor& sv = scores.value();
  const std::size_t t = sv.rows(), l = sv.cols();
  require(l == expert_prefixes.size(), ErrorKind::ShapeMismatch,
          "router rows do not match the expert count");
  std::vector<std::vector<std::size_t>> assigned(l);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t e : top_k_indices(std::span<const float>(sv.row(r), l), top_k)) {
      assigned[e].push_back(r);
    }
  }
  if (gates_out) *gates_out = gates.value();
  Var out;
  for (std::size_t e = 0; e < l; ++e) {
    if (assigned[e].empty()) continue;
    Var rows = ad::gather_rows(v, assigned[e]);
    Var y = ffn_sublayer(tape, rows, tensors, expert_prefixes[e]);
    Var part = ad::scatter_gated(y, std::move(assigned[e]), gates, e, t);
    out = out.valid() ? ad::add(out, part) : part;
  }
  return out;
}

Tensor moe_ffn_forward(const Tensor& router, const std::vector<TensorMap>& expert_ffns,
                       const Tensor& v, std::size_t top_k, std::vector<float>* gates) {
  require(router.rank() == 2 && router.dim(0) == expert_ffns.size(), ErrorKind::ShapeMismatch,
          "router must be [experts x d]");
  require(top_k >= 1 && top_k <= expert_ffns.size(), ErrorKind::InvalidArgument,
          "top_k out of range");
  TensorMap tensors;
  std::vector<std::string> prefixes;
  for (std::size_t e = 0; e < expert_ffns.size(); ++e) {
    prefixes.push_back(expert_prefix(e));
    for (const auto& [name, t] : expert_ffns[e]) tensors.emplace(prefixes.back() + name, t);
  }
  GradientTape tape;
  Var vin = tape.constant(Tensor({1, v.size()}, v.to_vector()));
  Var r = tape.constant(router);
  Tensor gate_matrix;
  Var out = token_routed_ffn(tape, vin, r, tensors, prefixes, top_k, &gate_matrix);
  if (gates) *gates = gate_matrix.to_vector();
  return Tensor({v.size()}, out.value().to_vector());
}

namespace {

Var weighted_sum(std::span<const Var> parts, std::span<const std::size_t> experts,
                 const std::vector<float>& weights) {
  Var out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    Var scaled = ad::scale(parts[i], weights[experts[i]]);
    out = out.valid() ? ad::add(out, scaled) : scaled;
  }
  return out;
}

}  // namespace

Var moe_forward_logits(GradientTape& tape, const MoEModel& model, std::span<const Token> tokens,
                       const std::vector<float>* heuristic_weights, RoutingTrace* trace) {
  validate_tokens(tokens, model.config);
  const bool heuristic = is_heuristic(model.routing_mode);
  require(heuristic == (heuristic_weights != nullptr), ErrorKind::InvalidArgument,
          heuristic ? "routing mode " + std::string(routing_mode_name(model.routing_mode)) +
                          " needs heuristic weights"
                    : "heuristic weights given to a token-routed MoE");
  std::vector<std::size_t> selected;
  if (heuristic) {
    require(heuristic_weights->size() == model.n_experts, ErrorKind::ShapeMismatch,
            "heuristic weights must have one entry per expert");
    for (std::size_t e = 0; e < model.n_experts; ++e) {
      if ((*heuristic_weights)[e] != 0.0f) selected.push_back(e);
    }
    require(!selected.empty(), ErrorKind::InvalidArgument, "heuristic weights are all zero");
  }
  if (trace) {
    trace->n_experts = model.n_experts;
    trace->decisions.clear();
    if (heuristic) trace->decisions.push_back({std::nullopt, std::nullopt, *heuristic_weights});
  }
  std::vector<std::string> all_prefixes;
  for (std::size_t e = 0; e < model.n_experts; ++e) all_prefixes.push_back(expert_prefix(e));

  const auto& tensors = model.tensors;
  Var x = ad::embedding(lookup_param(tape, tensors, "embed.weight"), tokens);
  for (std::size_t j = 0; j < model.config.n_layers; ++j) {
    const std::string p = layer_prefix(j);
    Var h = ad::rms_norm(x, lookup_param(tape, tensors, p + "attn_norm.gain"));
    if (model.attention_mode == AttentionMode::Merged) {
      x = ad::add(x, attention_sublayer(tape, h, tensors, p, model.config.n_heads));
    } else {
      std::vector<Var> parts;
      for (std::size_t e : selected) {
        parts.push_back(
            attention_sublayer(tape, h, tensors, all_prefixes[e] + p, model.config.n_heads));
      }
      x = ad::add(x, weighted_sum(parts, selected, *heuristic_weights));
    }
    Var v = ad::rms_norm(x, lookup_param(tape, tensors, p + "ffn_norm.gain"));
    if (heuristic) {
      std::vector<Var> parts;
      for (std::size_t e : selected) {
        parts.push_back(ffn_sublayer(tape, v, tensors, all_prefixes[e] + p));
      }
      x = ad::add(x, weighted_sum(parts, selected, *heuristic_weights));
    } else {
      std::vector<std::string> prefixes;
      for (const auto& ep : all_prefixes) prefixes.push_back(ep + p);
      Tensor gates;
      Var f = token_routed_ffn(tape, v, lookup_param(tape, tensors, router_name(j)), tensors,
                               prefixes, model.top_k, trace ? &gates : nullptr);
      if (trace) {
        for (std::size_t r = 0; r < gates.rows(); ++r) {
          trace->decisions.push_back(
              {j, r, std::vector<float>(gates.row(r), gates.row(r) + gates.cols())});
        }
      }
      x = ad::add(x, f);
    }
  }
  x = ad::rms_norm(x, lookup_param(tape, tensors, "final_norm.gain"));
  return ad::linear(x, lookup_param(tape, tensors, "head.weight"));
}

MoEOutput moe_forward(const MoEModel& model, const TokenSequence& input,
                      const std::vector<float>* heuristic_weights) {
  GradientTape tape;
  MoEOutput out;
  out.logits = moe_forward_logits(tape, model, input, heuristic_weights, &out.trace).value();
  return out;
}

Var moe_sequence_loss(GradientTape& tape, const MoEModel& model, const TokenSequence& sequence,
                      const std::vector<float>* heuristic_weights) {
  const TokenSequence input = scoring_input(sequence);
  return ad::cross_entropy(moe_forward_logits(tape, model, input, heuristic_weights, nullptr),
                           sequence);
}

std::vector<float> ppl_route(const std::vector<Checkpoint>& experts, const TokenSequence& x_inf,
                             std::size_t top_k, std::vector<double>* perplexities) {
  require(top_k >= 1 && top_k <= experts.size(), ErrorKind::InvalidArgument,
          "top_k out of range for PPL routing");
  std::vector<float> confidence;
  std::vector<double> ppl;
  for (const auto& e : experts) {
    ppl.push_back(perplexity(e, x_inf));
    confidence.push_back(static_cast<float>(1.0 / ppl.back()));
  }
  if (perplexities) *perplexities = ppl;
  return top_k_softmax(confidence, top_k);
}

TensorMap loss_gradient(const Checkpoint& base, const TokenSequence& x_inf) {
  GradientTape tape;
  for (const auto& [name, t] : base.tensors) tape.parameter(name, t);
  tape.backward(sequence_loss(tape, base, x_inf));
  return tape.gradients();
}

std::vector<float> grad_route_from_gradient(const TensorMap& gradient,
                                            const std::vector<TaskVector>& taus,
                                            std::size_t top_k, std::vector<double>* similarities) {
  require(top_k >= 1 && top_k <= taus.size(), ErrorKind::InvalidArgument,
          "top_k out of range for gradient routing");
  std::vector<const Tensor*> g;
  double g_norm = 0.0;
  for (const auto& [name, t] : gradient) {
    g.push_back(&t);
    for (float v : t.data()) g_norm += static_cast<double>(v) * v;
  }
  require(g_norm > 0.0, ErrorKind::Degenerate, "gradient routing: loss gradient is zero");
  std::vector<float> scores;
  std::vector<double> sims;
  for (const auto& tau : taus) {
    std::vector<const Tensor*> d;
    for (const auto& [name, t] : gradient) {
      auto it = tau.deltas.find(name);
      require(it != tau.deltas.end() && it->second.shape() == t.shape(),
              ErrorKind::SchemaMismatch, "task vector does not match the base at '" + name + "'");
      d.push_back(&it->second);
    }
    sims.push_back(cosine_similarity(g, d).value_or(0.0));
    scores.push_back(static_cast<float>(sims.back()));
  }
  if (similarities) *similarities = sims;
  return top_k_softmax(scores, top_k);
}

std::vector<float> grad_route(const Checkpoint& base, const std::vector<TaskVector>& taus,
                              const TokenSequence& x_inf, std::size_t top_k,
                              std::vector<double>* similarities) {
  return grad_route_from_gradient(loss_gradient(base, x_inf), taus, top_k, similarities);
}

}  // namespace moe
