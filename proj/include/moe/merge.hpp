#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moe/transformer.hpp"

namespace moe {

// Per-tensor delta expert - base, rounded to float. base + delta recovers the
// expert exactly when the two are within a factor of two of each other, and
// otherwise to within half an ulp of the delta.
struct TaskVector {
  TensorMap deltas;
  std::string expert_id;
  std::string base_id;
};

enum class MergeMethod { Average, Dare, Ties };

std::string_view merge_method_name(MergeMethod method);
MergeMethod parse_merge_method(std::string_view name);

// Glob patterns over canonical tensor names. A name is selected when it
// matches at least one include pattern and no exclude pattern ("!" prefix).
class TensorFilter {
 public:
  TensorFilter() : patterns_{"*"} {}
  explicit TensorFilter(std::vector<std::string> patterns);

  bool selects(std::string_view name) const;
  const std::vector<std::string>& patterns() const noexcept { return patterns_; }

  static TensorFilter all() { return TensorFilter(); }

 private:
  std::vector<std::string> patterns_;
};

struct MergeRecipe {
  MergeMethod method = MergeMethod::Ties;
  double retain_percent = 80.0;  // p
  double lambda = 1.0 / 3.0;     // scale applied to the merged task vector
  std::uint64_t seed = 0;        // Dare drop stream
  TensorFilter tensor_filter;

  void validate() const;
};

void to_json(nlohmann::json& j, const MergeRecipe& recipe);
void from_json(const nlohmann::json& j, MergeRecipe& recipe);

// expert - base, tensor by tensor. Throws SchemaMismatch when the tensor sets
// or shapes differ.
TaskVector task_vector(const Checkpoint& base, const Checkpoint& expert);

// Dare keep mask for one tensor: entry i survives with probability p/100,
// decided by keyed_uniform(seed, hash(name), i).
std::vector<bool> dare_keep_mask(std::string_view tensor_name, std::size_t n,
                                 double retain_percent, std::uint64_t seed);
// Zeroes dropped entries and multiplies survivors by 100/p.
Tensor apply_dare_mask(const Tensor& delta, const std::vector<bool>& keep, double retain_percent);
TaskVector dare_trim(const TaskVector& tau, double retain_percent, std::uint64_t seed);

// Zeroes the floor((100 - p)/100 * n) smallest-magnitude entries of one tensor.
// Equal magnitudes are dropped lower flat index first.
Tensor ties_trim(const Tensor& delta, double retain_percent);
std::size_t ties_drop_count(std::size_t n, double retain_percent);

// Per-position sign election over trimmed tensors: +1 when the positive mass
// is at least the negative mass (ties elect +), else -1.
std::vector<int> ties_elect_signs(const std::vector<Tensor>& trimmed);
// Trim every task vector, elect signs, and sum only values agreeing with the
// elected sign.
TaskVector ties_trim_elect_merge(const std::vector<TaskVector>& taus, double retain_percent);

// Merged tensors for every base tensor. Tensors outside recipe.tensor_filter
// are copied from `base`. Average ignores base for selected tensors; Dare and
// Ties produce base + lambda * merged task vector.
TensorMap merge_params(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                       const MergeRecipe& recipe);

// merge_params over all tensors, packaged as a dense checkpoint.
Checkpoint dense_merge(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                       MergeRecipe recipe);

struct LayerSimilarity {
  std::size_t layer = 0;
  double attention = 0.0;
  double ffn = 0.0;
  bool attention_degenerate = false;
  bool ffn_degenerate = false;
};

// Cosine similarity of concatenated attention weights and of concatenated FFN
// weights of two task vectors, per decoder layer. A zero-norm side reports 0
// and sets the degenerate flag.
std::vector<LayerSimilarity> task_vector_similarity(const TaskVector& a, const TaskVector& b);

// Cosine over double accumulation; nullopt when either vector has zero norm.
std::optional<double> cosine_similarity(const std::vector<const Tensor*>& a,
                                        const std::vector<const Tensor*>& b);

}  // namespace moe
