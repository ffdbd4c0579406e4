#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moe/eval.hpp"
#include "moe/train.hpp"

namespace moe {

struct DomainCheckpoint {
  Domain domain = Domain::General;
  std::filesystem::path path;
};

// Scenario document:
//   models:  {base, experts: [{domain, path}], hetero: [{domain, path}]}
//   corpora: {seed, eval_seed, train_sequences, eval_sequences, eval_prompts}
//   mixture: {<domain>: weight}  fine-tuning mixture, normalized
//   train:   {steps, lr, weight_decay, seed, trainable, batch_size, warmup_steps}
//   eval:    {methods, top_k, hetero_top_k, retain_percent, lambda, seed,
//             router_seed, merge_method}
// Relative paths resolve against the document's directory.
struct Scenario {
  std::filesystem::path base;
  std::vector<DomainCheckpoint> experts;
  std::vector<DomainCheckpoint> hetero;

  std::uint64_t corpus_seed = 1;
  std::uint64_t eval_seed = 1001;
  std::size_t train_sequences = 2000;
  std::size_t eval_sequences = 64;
  std::size_t eval_prompts = 100;

  std::vector<double> mixture{0.3, 0.3, 0.3, 0.1};  // indexed like kAllDomains

  std::size_t steps = 300;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t train_seed = 0;
  Trainable trainable = Trainable::All;  // for btx, dare_moe and ties_moe
  std::size_t batch_size = 8;
  std::size_t warmup_steps = 0;

  std::vector<std::string> methods;
  std::size_t top_k = 2;
  std::size_t hetero_top_k = 2;
  double retain_percent = 80.0;
  double lambda = 1.0 / 3.0;
  std::uint64_t merge_seed = 0;
  std::uint64_t router_seed = 0;
  // Shared-tensor merge for random_routing and the ppl/grad rows.
  MergeMethod merge_method = MergeMethod::Ties;

  static Scenario from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static Scenario load(const std::filesystem::path& path);
  // Unknown methods, missing checkpoints and inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const Scenario& s);

// Row names: base, expert:<domain>, btx, dare_moe, ties_moe, router_ft,
// random_routing, dare_dense, ties_dense, ppl_merged, ppl_separate,
// grad_merged, grad_separate, hetero.
const std::vector<std::string>& known_methods();

struct MethodRow {
  std::string method;
  EvalReport report;
  std::size_t train_steps = 0;
  double final_train_loss = 0.0;  // 0 when the row is not fine-tuned
  std::size_t train_tokens = 0;
  // MoE expert index of each domain expert, when the row is an MoE built from
  // the base plus the domain experts (base is expert 0).
  std::vector<std::pair<Domain, std::size_t>> expert_of_domain;
};

struct ComparisonTable {
  Scenario scenario;
  std::vector<MethodRow> rows;

  const MethodRow& row(const std::string& method) const;
  // Routing probability of domain's own expert on domain's sequences.
  std::optional<double> own_expert_probability(const std::string& method, Domain domain) const;
};

using ProgressFn = std::function<void(const std::string&)>;

// One row per configured method, in configuration order. The MoE rows use the
// base model as expert 0 followed by the domain experts.
ComparisonTable compare_baselines(const Scenario& scenario, const ProgressFn& progress = {});

void to_json(nlohmann::json& j, const ComparisonTable& t);
// Aligned table of per-domain metrics and routing, without timing, so equal
// scenarios print equal tables.
std::string format_table(const ComparisonTable& t);

}  // namespace moe
