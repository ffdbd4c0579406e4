#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "moe/tensor.hpp"

namespace moe {

class GradientTape;

// Handle to a value recorded on a GradientTape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  GradientTape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class GradientTape;
  Var(GradientTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  GradientTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape scoped to one forward pass. A tape is confined to one
// thread; run independent passes on independent tapes.
class GradientTape {
 public:
  using Backward = std::function<void(GradientTape&, const Tensor& grad_out)>;

  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Registers a named trainable leaf. The tensor is referenced, not copied, and
  // must outlive the tape. Registering the same name twice returns the same Var.
  Var parameter(const std::string& name, const Tensor& value);
  Var constant(Tensor value);
  // Parameters whose names match are frozen: they still take part in the
  // forward pass but get no gradient and are left out of gradients().
  // Must be set before the parameters are registered.
  void freeze(std::function<bool(std::string_view)> frozen) { frozen_ = std::move(frozen); }

  // Records the output of an op. `backward` is invoked only when the output
  // received a gradient and at least one input requires one.
  Var record(Tensor value, std::span<const Var> inputs, Backward backward, std::string_view op);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient accumulator for v, zero-initialised on first access.
  Tensor& grad(Var v);

  // Seeds d(loss)/d(loss) = 1 and propagates to every registered parameter.
  // Parameters the loss does not reach get exactly-zero gradients.
  void backward(Var loss);

  const TensorMap& gradients() const { return gradients_; }
  const Tensor& gradient(std::string_view name) const;

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    const Tensor* ref = nullptr;
    Tensor owned;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;

    const Tensor& value() const { return ref ? *ref : owned; }
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_ids_;
  TensorMap gradients_;
  std::function<bool(std::string_view)> frozen_;
};

// Differentiable ops. All inputs must come from the same tape.
namespace ad {

Var matmul(Var a, Var b);
// x[t x in] * w[out x in]^T, optionally plus bias[out].
Var linear(Var x, Var w);
Var linear(Var x, Var w, Var bias);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float factor);
Var sum(Var a);
Var softmax(Var x);
Var rms_norm(Var x, Var gain);
// Rows of `table` selected by token id.
Var embedding(Var table, std::span<const Token> tokens);
// Rotary position embedding per head over a [t x d] activation.
Var rope(Var x, std::size_t n_heads, float base = 10000.0f);
// Causal multi-head attention over [t x d] queries/keys/values.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);
// silu(gate) * up.
Var swiglu(Var gate, Var up);
Var cross_entropy(Var logits, std::span<const Token> targets);

Var gather_rows(Var x, std::vector<std::size_t> rows);
// out[rows[r]] = y[r] * gates[rows[r], column]; out has `out_rows` rows.
Var scatter_gated(Var y, std::vector<std::size_t> rows, Var gates, std::size_t column,
                  std::size_t out_rows);
Var mean_rows(Var x);
// y * weights[index], with weights a flat vector of expert weights.
Var scale_by(Var y, Var weights, std::size_t index);
// Row-wise SoftMax(top-K(.)); unselected entries are zero and get no gradient.
Var top_k_softmax(Var scores, std::size_t k);

}  // namespace ad

}  // namespace moe
