#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moe/autodiff.hpp"
#include "moe/random.hpp"
#include "moe/tensor.hpp"

namespace testing {

inline moe::Tensor random_tensor(moe::Shape shape, std::uint64_t seed, double scale = 1.0) {
  moe::Tensor t(std::move(shape));
  moe::Rng rng(seed);
  for (float& v : t.data()) v = static_cast<float>(rng.normal() * scale);
  return t;
}

// Largest |a - b| / max(|b|, floor) over all entries.
inline double max_rel_diff(const moe::Tensor& a, const moe::Tensor& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]);
    worst = std::max(worst, d / std::max(std::abs(static_cast<double>(b[i])), floor));
  }
  return worst;
}

// ||a - b|| / ||b|| accumulated in double.
inline double norm_rel_error(const moe::Tensor& a, const moe::Tensor& b) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    diff += d * d;
    ref += static_cast<double>(b[i]) * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

using LossFn = std::function<moe::Var(moe::GradientTape&, const moe::TensorMap&)>;

inline double eval_loss(const LossFn& fn, const moe::TensorMap& params) {
  moe::GradientTape tape;
  return fn(tape, params).value()[0];
}

// Central differences for every entry of params[name].
inline moe::Tensor numeric_gradient(const LossFn& fn, moe::TensorMap params,
                                    const std::string& name, float eps) {
  moe::Tensor& p = params.at(name);
  moe::Tensor g(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float saved = p[i];
    p[i] = saved + eps;
    const double up = eval_loss(fn, params);
    p[i] = saved - eps;
    const double down = eval_loss(fn, params);
    p[i] = saved;
    g[i] = static_cast<float>((up - down) / (2.0 * eps));
  }
  return g;
}

inline moe::TensorMap analytic_gradient(const LossFn& fn, const moe::TensorMap& params) {
  moe::GradientTape tape;
  for (const auto& [name, t] : params) tape.parameter(name, t);
  tape.backward(fn(tape, params));
  return tape.gradients();
}

// Weighted sum of an activation so every output entry gets a distinct gradient.
inline moe::Var probe(moe::GradientTape& tape, moe::Var x, std::uint64_t seed = 99) {
  return moe::ad::sum(moe::ad::mul(x, tape.constant(random_tensor(x.shape(), seed))));
}

}  // namespace testing
