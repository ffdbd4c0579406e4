#include "moe/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "moe/error.hpp"
#include "moe/parallel.hpp"

namespace moe {

void MixtureWeights::validate(std::size_t n_corpora) const {
  require(weights.size() == n_corpora, ErrorKind::InvalidArgument,
          std::to_string(weights.size()) + " mixture weights for " + std::to_string(n_corpora) +
              " corpora");
  double total = 0.0;
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, ErrorKind::InvalidArgument,
            "mixture weights must be finite and nonnegative");
    total += w;
  }
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::InvalidArgument,
          "mixture weights sum to " + std::to_string(total) + ", not 1");
}

MixtureWeights MixtureWeights::normalized(std::vector<double> raw) {
  double total = 0.0;
  for (double w : raw) {
    require(std::isfinite(w) && w >= 0.0, ErrorKind::InvalidArgument,
            "mixture weights must be finite and nonnegative");
    total += w;
  }
  require(total > 0.0, ErrorKind::InvalidArgument, "mixture weights are all zero");
  for (double& w : raw) w /= total;
  return MixtureWeights{std::move(raw)};
}

MixtureSampler::MixtureSampler(std::vector<DomainCorpus> corpora, MixtureWeights weights,
                               std::uint64_t seed)
    : corpora_(std::move(corpora)), rng_(seed) {
  weights.validate(corpora_.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < corpora_.size(); ++i) {
    require(weights.weights[i] == 0.0 || !corpora_[i].sequences.empty(),
            ErrorKind::InvalidArgument, "corpus " + std::to_string(i) + " is empty");
    acc += weights.weights[i];
    cumulative_.push_back(acc);
  }
}

MixtureSampler::Draw MixtureSampler::next() {
  const double u = rng_.uniform() * cumulative_.back();
  std::size_t c = 0;
  while (c + 1 < cumulative_.size() && u >= cumulative_[c]) ++c;
  // Rounding can leave u past the last positive weight; fall back to it.
  while (c > 0 && cumulative_[c] == cumulative_[c - 1]) --c;
  const auto& seqs = corpora_[c].sequences;
  return {c, &seqs[rng_.below(seqs.size())]};
}

std::vector<MixtureSampler::Draw> MixtureSampler::next_batch(std::size_t n) {
  std::vector<Draw> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(next());
  return out;
}

std::string_view trainable_name(Trainable t) { return t == Trainable::All ? "all" : "router"; }

Trainable parse_trainable(std::string_view name) {
  if (name == "all") return Trainable::All;
  if (name == "router" || name == "router_only") return Trainable::RouterOnly;
  fail(ErrorKind::InvalidArgument, "unknown trainable set '" + std::string(name) + "'");
}

namespace {

using SequenceLoss = std::function<Var(GradientTape&, const TokenSequence&)>;
using FrozenFn = std::function<bool(std::string_view)>;

struct AdamSlot {
  Tensor m, v;
  std::size_t t = 0;
};

double mean_loss(const SequenceLoss& loss, const std::vector<TokenSequence>& batch) {
  std::vector<double> values(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    GradientTape tape;
    values[i] = loss(tape, batch[i]).value()[0];
  });
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(batch.size());
}

TrainLog train_tensors(TensorMap& tensors, const SequenceLoss& loss, const FrozenFn& frozen,
                       const std::vector<DomainCorpus>& corpora, const MixtureWeights& weights,
                       const TrainConfig& cfg, const StepCallback& on_step) {
  require(cfg.batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
  require(cfg.lr > 0.0 && std::isfinite(cfg.lr), ErrorKind::InvalidArgument,
          "learning rate must be positive");
  require(cfg.weight_decay >= 0.0, ErrorKind::InvalidArgument, "weight decay must be >= 0");
  const auto start = std::chrono::steady_clock::now();
  MixtureSampler sampler(corpora, weights, cfg.seed);
  std::map<std::string, AdamSlot, std::less<>> state;
  TrainLog log;

  auto validate = [&](std::size_t step) {
    if (cfg.validation.empty()) return;
    log.validation_loss.emplace_back(step, mean_loss(loss, cfg.validation));
  };
  validate(0);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto batch = sampler.next_batch(cfg.batch_size);
    std::vector<TensorMap> grads(batch.size());
    std::vector<double> losses(batch.size());
    try {
      parallel_for(batch.size(), [&](std::size_t i) {
        GradientTape tape;
        if (frozen) tape.freeze(frozen);
        Var l = loss(tape, *batch[i].sequence);
        losses[i] = l.value()[0];
        tape.backward(l);
        grads[i] = tape.gradients();
      });
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
      fail(ErrorKind::Divergence,
           "training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    TensorMap total;
    for (auto& g : grads) {
      for (auto& [name, t] : g) {
        auto it = total.find(name);
        if (it == total.end()) {
          total.emplace(name, std::move(t));
          continue;
        }
        auto dst = it->second.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += t[k];
      }
    }
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      loss_sum += losses[i];
      log.tokens += batch[i].sequence->size();
    }
    const double step_loss = loss_sum / static_cast<double>(batch.size());
    const double scale = 1.0 / static_cast<double>(batch.size());
    double norm_sq = 0.0;
    for (auto& [name, g] : total) {
      for (float& v : g.data()) {
        v = static_cast<float>(v * scale);
        norm_sq += static_cast<double>(v) * v;
      }
    }
    if (!std::isfinite(step_loss) || !std::isfinite(norm_sq)) {
      fail(ErrorKind::Divergence, "training diverged at step " + std::to_string(step) +
                                      ": loss " + std::to_string(step_loss) + ", gradient norm " +
                                      std::to_string(std::sqrt(norm_sq)));
    }
    const double norm = std::sqrt(norm_sq);
    const double clip = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
    const double lr = cfg.warmup_steps > 0 && step < cfg.warmup_steps
                          ? cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps)
                          : cfg.lr;

    for (auto& [name, g] : total) {
      Tensor& p = tensors.find(name)->second;
      auto& slot = state[name];
      if (slot.t == 0) {
        slot.m = Tensor(p.shape());
        slot.v = Tensor(p.shape());
      }
      ++slot.t;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.t));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.t));
      const double decay = p.rank() == 2 ? lr * cfg.weight_decay : 0.0;
      auto pd = p.data();
      auto md = slot.m.data();
      auto vd = slot.v.data();
      for (std::size_t k = 0; k < pd.size(); ++k) {
        const double gk = g[k] * clip;
        md[k] = static_cast<float>(cfg.beta1 * md[k] + (1.0 - cfg.beta1) * gk);
        vd[k] = static_cast<float>(cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * gk * gk);
        const double update = (md[k] / c1) / (std::sqrt(vd[k] / c2) + cfg.eps);
        pd[k] = static_cast<float>(pd[k] - decay * pd[k] - lr * update);
      }
    }
    log.step_loss.push_back(step_loss);
    if (on_step) on_step(step, step_loss);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) validate(step);
  }
  if (log.validation_loss.empty() || log.validation_loss.back().first != cfg.steps) {
    validate(cfg.steps);
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

FrozenFn frozen_for(Trainable trainable) {
  if (trainable == Trainable::All) return {};
  return [](std::string_view name) { return !is_router_tensor(name); };
}

}  // namespace

TrainLog train(Checkpoint& model, const std::vector<DomainCorpus>& corpora,
               const MixtureWeights& weights, const TrainConfig& config,
               const StepCallback& on_step) {
  require(config.trainable == Trainable::All, ErrorKind::InvalidArgument,
          "a dense model has no router to train on its own");
  return train_tensors(
      model.tensors,
      [&](GradientTape& tape, const TokenSequence& s) { return sequence_loss(tape, model, s); }, {},
      corpora, weights, config, on_step);
}

TrainLog train(MoEModel& model, const std::vector<DomainCorpus>& corpora,
               const MixtureWeights& weights, const TrainConfig& config,
               const StepCallback& on_step) {
  require(!is_heuristic(model.routing_mode), ErrorKind::InvalidArgument,
          "heuristic-routed MoEs are used without fine-tuning");
  model.validate();
  return train_tensors(
      model.tensors,
      [&](GradientTape& tape, const TokenSequence& s) {
        return moe_sequence_loss(tape, model, s, nullptr);
      },
      frozen_for(config.trainable), corpora, weights, config, on_step);
}

TrainLog train(HeteroMoEModel& model, const std::vector<DomainCorpus>& corpora,
               const MixtureWeights& weights, const TrainConfig& config,
               const StepCallback& on_step) {
  model.validate();
  return train_tensors(
      model.tensors,
      [&](GradientTape& tape, const TokenSequence& s) {
        return hetero_sequence_loss(tape, model, s);
      },
      frozen_for(config.trainable), corpora, weights, config, on_step);
}

}  // namespace moe
