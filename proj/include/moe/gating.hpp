#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace moe {

// Indices of the k largest scores, ordered by descending score. Equal scores
// are ranked by lower index first.
std::vector<std::size_t> top_k_indices(std::span<const float> scores, std::size_t k);

// SoftMax(top-K(scores)): softmax over the k selected scores only, zero
// elsewhere. The result has exactly k positive entries summing to 1.
std::vector<float> top_k_softmax(std::span<const float> scores, std::size_t k);

// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const float> values);

}  // namespace moe
