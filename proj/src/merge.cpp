#include "moe/merge.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "moe/error.hpp"
#include "moe/random.hpp"

namespace moe {

std::string_view merge_method_name(MergeMethod method) {
  switch (method) {
    case MergeMethod::Average: return "average";
    case MergeMethod::Dare: return "dare";
    case MergeMethod::Ties: return "ties";
  }
  return "?";
}

MergeMethod parse_merge_method(std::string_view name) {
  if (name == "average") return MergeMethod::Average;
  if (name == "dare") return MergeMethod::Dare;
  if (name == "ties") return MergeMethod::Ties;
  fail(ErrorKind::InvalidArgument, "unknown merge method '" + std::string(name) + "'");
}

TensorFilter::TensorFilter(std::vector<std::string> patterns) : patterns_(std::move(patterns)) {}

bool TensorFilter::selects(std::string_view name) const {
  const std::string n(name);
  bool included = false;
  bool has_include = false;
  for (const auto& pattern : patterns_) {
    if (!pattern.empty() && pattern.front() == '!') {
      if (fnmatch(pattern.c_str() + 1, n.c_str(), 0) == 0) return false;
    } else {
      has_include = true;
      included = included || fnmatch(pattern.c_str(), n.c_str(), 0) == 0;
    }
  }
  return has_include ? included : true;
}

void MergeRecipe::validate() const {
  require(retain_percent > 0.0 && retain_percent <= 100.0, ErrorKind::InvalidArgument,
          "retain percent must be in (0, 100], got " + std::to_string(retain_percent));
  require(std::isfinite(lambda) && lambda >= 0.0, ErrorKind::InvalidArgument,
          "lambda must be finite and >= 0");
}

void to_json(nlohmann::json& j, const MergeRecipe& r) {
  j = nlohmann::json{{"method", merge_method_name(r.method)},
                     {"retain_percent", r.retain_percent},
                     {"lambda", r.lambda},
                     {"seed", r.seed},
                     {"tensor_filter", r.tensor_filter.patterns()}};
}

void from_json(const nlohmann::json& j, MergeRecipe& r) {
  try {
    r = MergeRecipe{};
    if (j.contains("method")) r.method = parse_merge_method(j.at("method").get<std::string>());
    if (j.contains("retain_percent")) r.retain_percent = j.at("retain_percent").get<double>();
    if (j.contains("lambda")) r.lambda = j.at("lambda").get<double>();
    if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("tensor_filter")) {
      r.tensor_filter = TensorFilter(j.at("tensor_filter").get<std::vector<std::string>>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed merge recipe: ") + e.what());
  }
  r.validate();
}

namespace {

std::string model_id(const Checkpoint& c) {
  for (const char* key : {"name", "domain", "kind"}) {
    if (auto it = c.metadata.find(key); it != c.metadata.end()) return it->second;
  }
  return "unnamed";
}

void require_same_schema(const TensorMap& a, const TensorMap& b, std::string_view what) {
  require(a.size() == b.size(), ErrorKind::SchemaMismatch,
          std::string(what) + ": tensor counts differ (" + std::to_string(a.size()) + " vs " +
              std::to_string(b.size()) + ")");
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    require(ia->first == ib->first, ErrorKind::SchemaMismatch,
            std::string(what) + ": tensor '" + ia->first + "' has no counterpart");
    require(ia->second.shape() == ib->second.shape(), ErrorKind::SchemaMismatch,
            std::string(what) + ": tensor '" + ia->first + "' shapes differ");
  }
}

std::uint64_t expert_seed(std::uint64_t seed, std::size_t expert) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(expert) + 1));
}

}  // namespace

TaskVector task_vector(const Checkpoint& base, const Checkpoint& expert) {
  require_same_schema(base.tensors, expert.tensors, "task_vector");
  TaskVector tau;
  tau.base_id = model_id(base);
  tau.expert_id = model_id(expert);
  for (const auto& [name, b] : base.tensors) {
    const Tensor& e = expert.tensors.find(name)->second;
    Tensor d(b.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = e[i] - b[i];
    tau.deltas.emplace(name, std::move(d));
  }
  return tau;
}

std::vector<bool> dare_keep_mask(std::string_view tensor_name, std::size_t n,
                                 double retain_percent, std::uint64_t seed) {
  const double keep_probability = retain_percent / 100.0;
  const std::uint64_t stream = fnv1a64(tensor_name);
  std::vector<bool> keep(n);
  for (std::size_t i = 0; i < n; ++i) keep[i] = keyed_uniform(seed, stream, i) < keep_probability;
  return keep;
}

Tensor apply_dare_mask(const Tensor& delta, const std::vector<bool>& keep, double retain_percent) {
  require(keep.size() == delta.size(), ErrorKind::ShapeMismatch, "dare mask size mismatch");
  const double rescale = 100.0 / retain_percent;
  Tensor out(delta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = keep[i] ? static_cast<float>(static_cast<double>(delta[i]) * rescale) : 0.0f;
  }
  return out;
}

TaskVector dare_trim(const TaskVector& tau, double retain_percent, std::uint64_t seed) {
  require(retain_percent > 0.0 && retain_percent <= 100.0, ErrorKind::InvalidArgument,
          "retain percent must be in (0, 100]");
  TaskVector out{{}, tau.expert_id, tau.base_id};
  for (const auto& [name, d] : tau.deltas) {
    out.deltas.emplace(
        name, apply_dare_mask(d, dare_keep_mask(name, d.size(), retain_percent, seed),
                              retain_percent));
  }
  return out;
}

std::size_t ties_drop_count(std::size_t n, double retain_percent) {
  const double exact = (100.0 - retain_percent) * static_cast<double>(n) / 100.0;
  return std::min(n, static_cast<std::size_t>(std::floor(exact + 1e-9)));
}

Tensor ties_trim(const Tensor& delta, double retain_percent) {
  const std::size_t n = delta.size();
  const std::size_t drop = ties_drop_count(n, retain_percent);
  Tensor out = delta;
  if (drop == 0) return out;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto smaller = [&](std::size_t a, std::size_t b) {
    const float ma = std::fabs(delta[a]), mb = std::fabs(delta[b]);
    return ma < mb || (ma == mb && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(drop - 1),
                   order.end(), smaller);
  for (std::size_t i = 0; i < drop; ++i) out[order[i]] = 0.0f;
  return out;
}

std::vector<int> ties_elect_signs(const std::vector<Tensor>& trimmed) {
  require(!trimmed.empty(), ErrorKind::InvalidArgument, "sign election needs >= 1 tensor");
  const std::size_t n = trimmed.front().size();
  std::vector<int> signs(n);
  for (std::size_t i = 0; i < n; ++i) {
    double positive = 0.0, negative = 0.0;
    for (const auto& t : trimmed) {
      if (t[i] > 0.0f) positive += t[i];
      if (t[i] < 0.0f) negative -= t[i];
    }
    signs[i] = positive >= negative ? 1 : -1;
  }
  return signs;
}

TaskVector ties_trim_elect_merge(const std::vector<TaskVector>& taus, double retain_percent) {
  require(!taus.empty(), ErrorKind::InvalidArgument, "ties merge needs >= 1 task vector");
  require(retain_percent > 0.0 && retain_percent <= 100.0, ErrorKind::InvalidArgument,
          "retain percent must be in (0, 100]");
  for (std::size_t i = 1; i < taus.size(); ++i) {
    require_same_schema(taus[0].deltas, taus[i].deltas, "ties_trim_elect_merge");
  }
  TaskVector merged{{}, "ties", taus[0].base_id};
  for (const auto& [name, first] : taus[0].deltas) {
    std::vector<Tensor> trimmed;
    trimmed.reserve(taus.size());
    for (const auto& tau : taus) trimmed.push_back(ties_trim(tau.deltas.find(name)->second,
                                                             retain_percent));
    const auto signs = ties_elect_signs(trimmed);
    Tensor out(first.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      double acc = 0.0;
      for (const auto& t : trimmed) {
        if ((signs[i] > 0 && t[i] > 0.0f) || (signs[i] < 0 && t[i] < 0.0f)) acc += t[i];
      }
      out[i] = static_cast<float>(acc);
    }
    merged.deltas.emplace(name, std::move(out));
  }
  return merged;
}

TensorMap merge_params(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                       const MergeRecipe& recipe) {
  recipe.validate();
  require(!experts.empty(), ErrorKind::InvalidArgument, "merge needs at least one expert");
  for (const auto& e : experts) require_same_schema(base.tensors, e.tensors, "merge_params");

  TensorMap out;
  for (const auto& [name, b] : base.tensors) {
    if (!recipe.tensor_filter.selects(name)) {
      out.emplace(name, b);
      continue;
    }
    Tensor merged(b.shape());
    if (recipe.method == MergeMethod::Average) {
      const double l = static_cast<double>(experts.size());
      for (std::size_t i = 0; i < merged.size(); ++i) {
        double acc = 0.0;
        for (const auto& e : experts) acc += e.tensors.find(name)->second[i];
        merged[i] = static_cast<float>(acc / l);
      }
      out.emplace(name, std::move(merged));
      continue;
    }
    std::vector<Tensor> deltas;
    deltas.reserve(experts.size());
    for (const auto& e : experts) {
      const Tensor& et = e.tensors.find(name)->second;
      Tensor d(b.shape());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = et[i] - b[i];
      deltas.push_back(std::move(d));
    }
    std::vector<double> tau_m(b.size(), 0.0);
    if (recipe.method == MergeMethod::Dare) {
      for (std::size_t e = 0; e < deltas.size(); ++e) {
        const auto keep = dare_keep_mask(name, b.size(), recipe.retain_percent,
                                         expert_seed(recipe.seed, e));
        const Tensor trimmed = apply_dare_mask(deltas[e], keep, recipe.retain_percent);
        for (std::size_t i = 0; i < b.size(); ++i) tau_m[i] += trimmed[i];
      }
    } else {
      std::vector<Tensor> trimmed;
      for (const auto& d : deltas) trimmed.push_back(ties_trim(d, recipe.retain_percent));
      const auto signs = ties_elect_signs(trimmed);
      for (std::size_t i = 0; i < b.size(); ++i) {
        for (const auto& t : trimmed) {
          if ((signs[i] > 0 && t[i] > 0.0f) || (signs[i] < 0 && t[i] < 0.0f)) tau_m[i] += t[i];
        }
      }
    }
    for (std::size_t i = 0; i < b.size(); ++i) {
      merged[i] = recipe.lambda == 0.0
                      ? b[i]
                      : static_cast<float>(static_cast<double>(b[i]) +
                                           recipe.lambda * static_cast<double>(
                                                               static_cast<float>(tau_m[i])));
    }
    out.emplace(name, std::move(merged));
  }
  return out;
}

Checkpoint dense_merge(const Checkpoint& base, const std::vector<Checkpoint>& experts,
                       MergeRecipe recipe) {
  recipe.tensor_filter = TensorFilter::all();
  Checkpoint out;
  out.config = base.config;
  out.tensors = merge_params(base, experts, recipe);
  out.metadata["kind"] = "dense";
  out.metadata["name"] = std::string(merge_method_name(recipe.method)) + "_dense";
  out.metadata["merge_method"] = std::string(merge_method_name(recipe.method));
  out.metadata["retain_percent"] = std::to_string(recipe.retain_percent);
  out.metadata["lambda"] = std::to_string(recipe.lambda);
  out.metadata["seed"] = std::to_string(recipe.seed);
  out.metadata["experts"] = std::to_string(experts.size());
  return out;
}

std::optional<double> cosine_similarity(const std::vector<const Tensor*>& a,
                                        const std::vector<const Tensor*>& b) {
  require(a.size() == b.size(), ErrorKind::ShapeMismatch, "cosine: tensor lists differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    require(a[t]->size() == b[t]->size(), ErrorKind::ShapeMismatch, "cosine: sizes differ");
    for (std::size_t i = 0; i < a[t]->size(); ++i) {
      const double x = (*a[t])[i], y = (*b[t])[i];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<LayerSimilarity> task_vector_similarity(const TaskVector& a, const TaskVector& b) {
  require_same_schema(a.deltas, b.deltas, "task_vector_similarity");
  std::map<std::size_t, std::pair<std::vector<const Tensor*>, std::vector<const Tensor*>>> attn,
      ffn;
  for (const auto& [name, ta] : a.deltas) {
    if (!name.starts_with("layer.")) continue;
    const std::size_t layer = std::stoul(name.substr(6));
    const Tensor* tb = &b.deltas.find(name)->second;
    if (is_attention_tensor(name)) {
      attn[layer].first.push_back(&ta);
      attn[layer].second.push_back(tb);
    } else if (is_ffn_tensor(name)) {
      ffn[layer].first.push_back(&ta);
      ffn[layer].second.push_back(tb);
    }
  }
  std::vector<LayerSimilarity> out;
  for (const auto& [layer, lists] : attn) {
    LayerSimilarity s;
    s.layer = layer;
    const auto ca = cosine_similarity(lists.first, lists.second);
    s.attention = ca.value_or(0.0);
    s.attention_degenerate = !ca;
    if (auto it = ffn.find(layer); it != ffn.end()) {
      const auto cf = cosine_similarity(it->second.first, it->second.second);
      s.ffn = cf.value_or(0.0);
      s.ffn_degenerate = !cf;
    } else {
      s.ffn_degenerate = true;
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace moe
