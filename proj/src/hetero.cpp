#include "moe/hetero.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "moe/checkpoint.hpp"
#include "moe/error.hpp"
#include "moe/gating.hpp"
#include "moe/random.hpp"

namespace moe {
namespace {

using json = nlohmann::json;

constexpr const char* kEmbed = "shared.embed.weight";
constexpr const char* kHead = "shared.head.weight";
constexpr const char* kRouter = "router.weight";

Tensor seeded_normal(Shape shape, std::uint64_t seed, const std::string& name) {
  Tensor t(std::move(shape));
  Rng rng(seed ^ fnv1a64(name));
  for (float& v : t.data()) v = static_cast<float>(rng.normal() * kInitStd);
  return t;
}

std::vector<std::size_t> metadata_list(const Checkpoint& c, const char* key) {
  auto it = c.metadata.find(key);
  require(it != c.metadata.end(), ErrorKind::Format,
          std::string("hetero checkpoint is missing metadata '") + key + "'");
  try {
    return json::parse(it->second).get<std::vector<std::size_t>>();
  } catch (const json::exception&) {
    fail(ErrorKind::Format, std::string("metadata '") + key + "' is not a list of integers");
  }
}

std::string list_string(const std::vector<ModelConfig>& configs,
                        std::size_t ModelConfig::*field) {
  json j = json::array();
  for (const auto& c : configs) j.push_back(c.*field);
  return j.dump();
}

}  // namespace

std::size_t HeteroMoEModel::d_model() const {
  std::size_t d = 0;
  for (const auto& c : expert_configs) d = std::max(d, c.d_model);
  return d;
}

std::size_t HeteroMoEModel::vocab_size() const {
  require(!expert_configs.empty(), ErrorKind::InvalidArgument, "hetero MoE has no experts");
  return expert_configs.front().vocab_size;
}

std::size_t HeteroMoEModel::max_seq_len() const {
  std::size_t n = SIZE_MAX;
  for (const auto& c : expert_configs) n = std::min(n, c.max_seq_len);
  return n;
}

std::vector<TensorSpec> hetero_schema(const std::vector<ModelConfig>& experts) {
  require(!experts.empty(), ErrorKind::InvalidArgument, "hetero MoE needs at least one expert");
  std::size_t d_m = 0;
  for (const auto& c : experts) {
    c.validate();
    require(c.vocab_size == experts.front().vocab_size, ErrorKind::SchemaMismatch,
            "experts disagree on the vocabulary size");
    d_m = std::max(d_m, c.d_model);
  }
  const std::size_t vocab = experts.front().vocab_size;
  std::vector<TensorSpec> out{{kEmbed, {vocab, d_m}},
                              {kHead, {vocab, d_m}},
                              {kRouter, {experts.size(), d_m}}};
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const std::string p = expert_prefix(i);
    const std::size_t d = experts[i].d_model;
    out.push_back({p + "proj_in.weight", {d, d_m}});
    out.push_back({p + "proj_in.bias", {d}});
    out.push_back({p + "proj_out.weight", {d_m, d}});
    out.push_back({p + "proj_out.bias", {d_m}});
    for (const auto& spec : trunk_schema(experts[i])) out.push_back({p + spec.name, spec.shape});
  }
  return out;
}

void HeteroMoEModel::validate() const {
  require(top_k >= 1 && top_k <= n_experts(), ErrorKind::InvalidArgument,
          "top_k " + std::to_string(top_k) + " must lie in [1, " + std::to_string(n_experts()) +
              "]");
  validate_schema(hetero_schema(expert_configs), tensors);
}

std::pair<Tensor, Tensor> build_shared_embed_head(const std::vector<Checkpoint>& experts) {
  require(!experts.empty(), ErrorKind::InvalidArgument, "no experts to share an embedding");
  const std::size_t vocab = experts.front().config.vocab_size;
  std::size_t d_m = 0;
  for (const auto& e : experts) {
    require(e.config.vocab_size == vocab, ErrorKind::SchemaMismatch,
            "experts disagree on the vocabulary size");
    d_m = std::max(d_m, e.config.d_model);
  }
  auto average = [&](const char* name) {
    std::vector<double> total(vocab * d_m, 0.0);
    for (const auto& e : experts) {
      auto it = e.tensors.find(name);
      require(it != e.tensors.end(), ErrorKind::SchemaMismatch,
              std::string("expert is missing '") + name + "'");
      const Tensor& t = it->second;
      const std::size_t d = e.config.d_model;
      require(t.shape() == Shape{vocab, d}, ErrorKind::SchemaMismatch,
              std::string("'") + name + "' does not match the expert config");
      for (std::size_t r = 0; r < vocab; ++r) {
        for (std::size_t c = 0; c < d; ++c) total[r * d_m + c] += t.at(r, c);
      }
    }
    Tensor out({vocab, d_m});
    const double l = static_cast<double>(experts.size());
    for (std::size_t i = 0; i < total.size(); ++i) out[i] = static_cast<float>(total[i] / l);
    return out;
  };
  return {average("embed.weight"), average("head.weight")};
}

std::vector<float> sequence_route(const Tensor& router, const Tensor& embeddings,
                                  std::size_t top_k) {
  require(router.rank() == 2 && embeddings.rank() == 2 && router.dim(1) == embeddings.dim(1),
          ErrorKind::ShapeMismatch, "sequence_route: router and embeddings disagree on d_m");
  require(top_k >= 1 && top_k <= router.dim(0), ErrorKind::InvalidArgument,
          "sequence_route: top_k out of range");
  GradientTape tape;
  Var scores = ad::linear(ad::mean_rows(tape.constant(embeddings)), tape.constant(router));
  return top_k_softmax(scores.value().data(), top_k);
}

HeteroMoEModel assemble_hetero_moe(const std::vector<Checkpoint>& experts, std::size_t top_k,
                                   std::uint64_t seed) {
  HeteroMoEModel model;
  model.top_k = top_k;
  for (const auto& e : experts) model.expert_configs.push_back(e.config);
  const auto schema = hetero_schema(model.expert_configs);
  const std::size_t d_m = model.d_model();

  auto [embed, head] = build_shared_embed_head(experts);
  model.tensors.emplace(kEmbed, std::move(embed));
  model.tensors.emplace(kHead, std::move(head));
  model.tensors.emplace(kRouter, seeded_normal({experts.size(), d_m}, seed, kRouter));
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const std::string p = expert_prefix(i);
    const std::size_t d = experts[i].config.d_model;
    model.tensors.emplace(p + "proj_in.weight", seeded_normal({d, d_m}, seed, p + "proj_in.weight"));
    model.tensors.emplace(p + "proj_in.bias", Tensor({d}));
    model.tensors.emplace(p + "proj_out.weight",
                          seeded_normal({d_m, d}, seed, p + "proj_out.weight"));
    model.tensors.emplace(p + "proj_out.bias", Tensor({d_m}));
    for (const auto& spec : trunk_schema(experts[i].config)) {
      auto it = experts[i].tensors.find(spec.name);
      require(it != experts[i].tensors.end(), ErrorKind::SchemaMismatch,
              "expert " + std::to_string(i) + " is missing '" + spec.name + "'");
      model.tensors.emplace(p + spec.name, it->second);
    }
  }
  model.validate();
  return model;
}

Var hetero_forward_logits(GradientTape& tape, const HeteroMoEModel& model,
                          std::span<const Token> tokens, RoutingTrace* trace) {
  ModelConfig shape_check;
  shape_check.vocab_size = model.vocab_size();
  shape_check.max_seq_len = model.max_seq_len();
  validate_tokens(tokens, shape_check);

  const auto& tensors = model.tensors;
  Var emb = ad::embedding(lookup_param(tape, tensors, kEmbed), tokens);
  Var scores = ad::linear(ad::mean_rows(emb), lookup_param(tape, tensors, kRouter));
  Var alpha = ad::top_k_softmax(scores, model.top_k);
  auto selected = top_k_indices(scores.value().data(), model.top_k);
  std::sort(selected.begin(), selected.end());
  if (trace) {
    trace->n_experts = model.n_experts();
    trace->decisions = {{std::nullopt, std::nullopt, alpha.value().to_vector()}};
  }

  Var mixed;
  for (std::size_t i : selected) {
    const std::string p = expert_prefix(i);
    Var x = ad::linear(emb, lookup_param(tape, tensors, p + "proj_in.weight"),
                       lookup_param(tape, tensors, p + "proj_in.bias"));
    x = decoder_trunk(tape, x, tensors, p, model.expert_configs[i]);
    Var r = ad::linear(x, lookup_param(tape, tensors, p + "proj_out.weight"),
                       lookup_param(tape, tensors, p + "proj_out.bias"));
    Var part = ad::scale_by(r, alpha, i);
    mixed = mixed.valid() ? ad::add(mixed, part) : part;
  }
  return ad::linear(mixed, lookup_param(tape, tensors, kHead));
}

MoEOutput hetero_forward(const HeteroMoEModel& model, const TokenSequence& input) {
  GradientTape tape;
  MoEOutput out;
  out.logits = hetero_forward_logits(tape, model, input, &out.trace).value();
  return out;
}

Var hetero_sequence_loss(GradientTape& tape, const HeteroMoEModel& model,
                         const TokenSequence& sequence) {
  const TokenSequence input = scoring_input(sequence);
  return ad::cross_entropy(hetero_forward_logits(tape, model, input, nullptr), sequence);
}

Checkpoint to_checkpoint(const HeteroMoEModel& model) {
  Checkpoint c;
  // The container config describes the shared side: d_m, vocabulary and the
  // shortest trunk context. Per-trunk shapes live in metadata.
  const auto widest = std::max_element(
      model.expert_configs.begin(), model.expert_configs.end(),
      [](const ModelConfig& a, const ModelConfig& b) { return a.d_model < b.d_model; });
  c.config = *widest;
  c.config.max_seq_len = model.max_seq_len();
  for (const auto& e : model.expert_configs) {
    c.config.n_layers = std::max(c.config.n_layers, e.n_layers);
  }
  c.tensors = model.tensors;
  const auto& cs = model.expert_configs;
  c.metadata["kind"] = "hetero_moe";
  c.metadata["experts"] = std::to_string(model.n_experts());
  c.metadata["top_k"] = std::to_string(model.top_k);
  c.metadata["dims"] = list_string(cs, &ModelConfig::d_model);
  c.metadata["layers"] = list_string(cs, &ModelConfig::n_layers);
  c.metadata["heads"] = list_string(cs, &ModelConfig::n_heads);
  c.metadata["ffn_dims"] = list_string(cs, &ModelConfig::d_ffn);
  c.metadata["max_seq_lens"] = list_string(cs, &ModelConfig::max_seq_len);
  return c;
}

HeteroMoEModel hetero_from_checkpoint(const Checkpoint& checkpoint) {
  require(checkpoint_kind(checkpoint) == "hetero_moe", ErrorKind::Format,
          "checkpoint is not a heterogeneous MoE (kind=hetero_moe)");
  const auto dims = metadata_list(checkpoint, "dims");
  const auto layers = metadata_list(checkpoint, "layers");
  const auto heads = metadata_list(checkpoint, "heads");
  const auto ffn = metadata_list(checkpoint, "ffn_dims");
  const auto ctx = metadata_list(checkpoint, "max_seq_lens");
  const std::size_t l = dims.size();
  require(layers.size() == l && heads.size() == l && ffn.size() == l && ctx.size() == l,
          ErrorKind::Format, "hetero metadata lists disagree on the expert count");
  auto experts_it = checkpoint.metadata.find("experts");
  require(experts_it != checkpoint.metadata.end() && experts_it->second == std::to_string(l),
          ErrorKind::Format, "hetero metadata 'experts' does not match 'dims'");
  HeteroMoEModel model;
  for (std::size_t i = 0; i < l; ++i) {
    model.expert_configs.push_back(
        {layers[i], dims[i], heads[i], ffn[i], checkpoint.config.vocab_size, ctx[i]});
  }
  auto k = checkpoint.metadata.find("top_k");
  require(k != checkpoint.metadata.end(), ErrorKind::Format, "hetero metadata lacks 'top_k'");
  try {
    model.top_k = std::stoul(k->second);
  } catch (const std::exception&) {
    fail(ErrorKind::Format, "metadata 'top_k' is not a number");
  }
  model.tensors = checkpoint.tensors;
  model.validate();
  return model;
}

}  // namespace moe
