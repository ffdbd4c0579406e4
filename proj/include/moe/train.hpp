#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include "moe/corpus.hpp"
#include "moe/hetero.hpp"
#include "moe/moe.hpp"
#include "moe/random.hpp"

namespace moe {

struct MixtureWeights {
  std::vector<double> weights;

  // Nonnegative, one per corpus, summing to 1 within 1e-9.
  void validate(std::size_t n_corpora) const;
  // Scales nonnegative weights to sum to 1.
  static MixtureWeights normalized(std::vector<double> raw);
};

// Draws (corpus, sequence) pairs: the corpus by its mixture weight, the
// sequence uniformly within it. Deterministic per seed.
class MixtureSampler {
 public:
  struct Draw {
    std::size_t corpus = 0;
    const TokenSequence* sequence = nullptr;
  };

  MixtureSampler(std::vector<DomainCorpus> corpora, MixtureWeights weights, std::uint64_t seed);

  Draw next();
  std::vector<Draw> next_batch(std::size_t n);

  const std::vector<DomainCorpus>& corpora() const noexcept { return corpora_; }

 private:
  std::vector<DomainCorpus> corpora_;
  std::vector<double> cumulative_;
  Rng rng_;
};

enum class Trainable { All, RouterOnly };

std::string_view trainable_name(Trainable t);
Trainable parse_trainable(std::string_view name);

struct TrainConfig {
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  double weight_decay = 0.01;  // decoupled, matrices only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 0;  // data order
  Trainable trainable = Trainable::All;
  // Fixed batch scored before training, every eval_every steps and after the
  // last step.
  std::vector<TokenSequence> validation;
  std::size_t eval_every = 100;
};

struct TrainLog {
  std::vector<double> step_loss;
  std::vector<std::pair<std::size_t, double>> validation_loss;
  std::size_t tokens = 0;
  double seconds = 0.0;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

// AdamW over mean per-sequence cross-entropy. Per-sequence gradients are summed
// in batch order, so results do not depend on the thread count. A non-finite
// loss or gradient aborts with ErrorKind::Divergence.
TrainLog train(Checkpoint& model, const std::vector<DomainCorpus>& corpora,
               const MixtureWeights& weights, const TrainConfig& config,
               const StepCallback& on_step = {});
// Token-routed MoEs only (learned or random routing).
TrainLog train(MoEModel& model, const std::vector<DomainCorpus>& corpora,
               const MixtureWeights& weights, const TrainConfig& config,
               const StepCallback& on_step = {});
TrainLog train(HeteroMoEModel& model, const std::vector<DomainCorpus>& corpora,
               const MixtureWeights& weights, const TrainConfig& config,
               const StepCallback& on_step = {});

}  // namespace moe
