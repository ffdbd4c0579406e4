#include "moe/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moe/error.hpp"

namespace moe {

std::vector<std::size_t> top_k_indices(std::span<const float> scores, std::size_t k) {
  require(k >= 1 && k <= scores.size(), ErrorKind::InvalidArgument,
          "top-k: k=" + std::to_string(k) + " with " + std::to_string(scores.size()) +
              " candidates");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  order.resize(k);
  return order;
}

std::vector<float> top_k_softmax(std::span<const float> scores, std::size_t k) {
  const auto selected = top_k_indices(scores, k);
  const double mx = scores[selected.front()];
  std::vector<double> e(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    e[i] = std::exp(static_cast<double>(scores[selected[i]]) - mx);
    total += e[i];
  }
  std::vector<float> weights(scores.size(), 0.0f);
  for (std::size_t i = 0; i < k; ++i) {
    weights[selected[i]] = static_cast<float>(e[i] / total);
  }
  return weights;
}

std::size_t argmax(std::span<const float> values) {
  require(!values.empty(), ErrorKind::InvalidArgument, "argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace moe
