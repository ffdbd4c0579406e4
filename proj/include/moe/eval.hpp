#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moe/corpus.hpp"
#include "moe/hetero.hpp"
#include "moe/moe.hpp"

namespace moe {

// Uniform view over dense, token-routed, heuristic-routed and heterogeneous
// models for evaluation.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t max_seq_len() const = 0;
  virtual std::size_t n_experts() const { return 0; }
  // Sequence-level expert weights for heuristic routing, computed from the
  // visible context only; nullopt when the model routes internally.
  virtual std::optional<std::vector<float>> route(const TokenSequence& context) const {
    (void)context;
    return std::nullopt;
  }
  virtual MoEOutput run(const TokenSequence& input, const std::vector<float>* alpha) const = 0;
};

class DenseLM : public LanguageModel {
 public:
  explicit DenseLM(Checkpoint model) : model_(std::move(model)) {}
  std::size_t max_seq_len() const override { return model_.config.max_seq_len; }
  MoEOutput run(const TokenSequence& input, const std::vector<float>* alpha) const override;

 private:
  Checkpoint model_;
};

using HeuristicRouter = std::function<std::vector<float>(const TokenSequence&)>;

HeuristicRouter make_ppl_router(std::vector<Checkpoint> experts, std::size_t top_k);
HeuristicRouter make_grad_router(Checkpoint base, std::vector<TaskVector> taus, std::size_t top_k);

class MoELM : public LanguageModel {
 public:
  // router is required exactly when the model's routing mode is ppl or grad.
  MoELM(MoEModel model, HeuristicRouter router = {});
  std::size_t max_seq_len() const override { return model_.config.max_seq_len; }
  std::size_t n_experts() const override { return model_.n_experts; }
  std::optional<std::vector<float>> route(const TokenSequence& context) const override;
  MoEOutput run(const TokenSequence& input, const std::vector<float>* alpha) const override;

 private:
  MoEModel model_;
  HeuristicRouter router_;
};

class HeteroLM : public LanguageModel {
 public:
  explicit HeteroLM(HeteroMoEModel model) : model_(std::move(model)) {}
  std::size_t max_seq_len() const override { return model_.max_seq_len(); }
  std::size_t n_experts() const override { return model_.n_experts(); }
  MoEOutput run(const TokenSequence& input, const std::vector<float>* alpha) const override;

 private:
  HeteroMoEModel model_;
};

// Held-out data: PPL sequences per domain and exact-match prompts for the
// domains that have them.
struct EvalSet {
  std::vector<DomainCorpus> ppl;
  std::vector<std::vector<PromptExample>> prompts;

  // Corpora and prompts for every domain, seeded independently of training.
  static EvalSet make(std::uint64_t seed, std::size_t sequences_per_domain,
                      std::size_t prompts_per_domain);
};

struct DomainMetrics {
  Domain domain = Domain::General;
  double perplexity = 0.0;  // token-weighted over the domain's sequences
  std::optional<double> exact_match;
  std::size_t tokens = 0;
  std::size_t sequences = 0;
  std::size_t prompts = 0;
  // Mean expert weight over every routing decision on the domain's PPL
  // sequences; empty for dense models.
  std::vector<double> routing;
  // Share of those decisions whose largest weight went to each expert.
  std::vector<double> top_choice;
};

// Exact match when the domain has prompts, else 1 / perplexity.
double domain_score(const DomainMetrics& m);

struct EvalReport {
  std::string model;
  std::vector<DomainMetrics> domains;
  std::size_t tokens = 0;
  double seconds = 0.0;

  const DomainMetrics& at(Domain d) const;
  // Mean domain_score over the expert domains present in the report.
  double average_score() const;
};

// Deterministic given the model and the set; sequences are scored in parallel
// and aggregated in index order.
EvalReport evaluate(const LanguageModel& model, const EvalSet& set, const std::string& name = "");

// Greedy continuation of the prompt (BOS prepended) equals the answer.
bool exact_match(const LanguageModel& model, const PromptExample& example);

void to_json(nlohmann::json& j, const DomainMetrics& m);
void to_json(nlohmann::json& j, const EvalReport& r);
std::string format_report(const EvalReport& r);

}  // namespace moe
