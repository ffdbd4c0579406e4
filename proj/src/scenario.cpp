#include "moe/scenario.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "moe/checkpoint.hpp"
#include "moe/error.hpp"

namespace moe {
namespace {

using json = nlohmann::json;

std::vector<DomainCheckpoint> parse_checkpoints(const json& list, const std::filesystem::path& dir) {
  std::vector<DomainCheckpoint> out;
  for (const auto& item : list) {
    DomainCheckpoint c;
    c.domain = parse_domain(item.at("domain").get<std::string>());
    c.path = item.at("path").get<std::string>();
    if (c.path.is_relative()) c.path = dir / c.path;
    out.push_back(std::move(c));
  }
  return out;
}

json checkpoints_json(const std::vector<DomainCheckpoint>& list) {
  json out = json::array();
  for (const auto& c : list) out.push_back({{"domain", domain_name(c.domain)}, {"path", c.path.string()}});
  return out;
}

std::size_t domain_index(Domain d) {
  return static_cast<std::size_t>(std::find(kAllDomains.begin(), kAllDomains.end(), d) -
                                  kAllDomains.begin());
}

bool is_expert_row(const std::string& method) { return method.rfind("expert:", 0) == 0; }

MergeRecipe recipe_for(MergeMethod method, const Scenario& s) {
  MergeRecipe r;
  r.method = method;
  r.retain_percent = s.retain_percent;
  r.lambda = s.lambda;
  r.seed = s.merge_seed;
  return r;
}

TrainConfig train_config(const Scenario& s, Trainable trainable) {
  TrainConfig c;
  c.steps = s.steps;
  c.batch_size = s.batch_size;
  c.lr = s.lr;
  c.weight_decay = s.weight_decay;
  c.seed = s.train_seed;
  c.warmup_steps = s.warmup_steps;
  c.trainable = trainable;
  return c;
}

void note(const ProgressFn& progress, const std::string& message) {
  if (progress) progress(message);
}

}  // namespace

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> methods{
      "base",         "btx",          "dare_moe",    "ties_moe",      "router_ft",
      "random_routing", "dare_dense", "ties_dense",  "ppl_merged",    "ppl_separate",
      "grad_merged",  "grad_separate", "hetero"};
  return methods;
}

Scenario Scenario::from_json(const json& j, const std::filesystem::path& base_dir) {
  Scenario s;
  try {
    const json& models = j.at("models");
    s.base = models.at("base").get<std::string>();
    if (s.base.is_relative()) s.base = base_dir / s.base;
    s.experts = parse_checkpoints(models.at("experts"), base_dir);
    if (models.contains("hetero")) s.hetero = parse_checkpoints(models.at("hetero"), base_dir);

    const json corpora = j.value("corpora", json::object());
    s.corpus_seed = corpora.value("seed", s.corpus_seed);
    s.eval_seed = corpora.value("eval_seed", s.corpus_seed + 1000);
    s.train_sequences = corpora.value("train_sequences", s.train_sequences);
    s.eval_sequences = corpora.value("eval_sequences", s.eval_sequences);
    s.eval_prompts = corpora.value("eval_prompts", s.eval_prompts);

    if (j.contains("mixture")) {
      std::vector<double> raw(kAllDomains.size(), 0.0);
      for (const auto& [name, w] : j.at("mixture").items()) {
        raw[domain_index(parse_domain(name))] = w.get<double>();
      }
      s.mixture = MixtureWeights::normalized(raw).weights;
    }

    const json train = j.value("train", json::object());
    s.steps = train.value("steps", s.steps);
    s.lr = train.value("lr", s.lr);
    s.weight_decay = train.value("weight_decay", s.weight_decay);
    s.train_seed = train.value("seed", s.train_seed);
    s.trainable = parse_trainable(train.value("trainable", std::string("all")));
    s.batch_size = train.value("batch_size", s.batch_size);
    s.warmup_steps = train.value("warmup_steps", s.warmup_steps);

    const json eval = j.value("eval", json::object());
    s.methods = eval.value("methods", std::vector<std::string>{"base", "btx", "dare_moe", "ties_moe"});
    s.top_k = eval.value("top_k", s.top_k);
    s.hetero_top_k = eval.value("hetero_top_k", s.hetero_top_k);
    s.retain_percent = eval.value("retain_percent", s.retain_percent);
    s.lambda = eval.value("lambda", s.lambda);
    s.merge_seed = eval.value("seed", s.merge_seed);
    s.router_seed = eval.value("router_seed", s.merge_seed);
    s.merge_method = parse_merge_method(eval.value("merge_method", std::string("ties")));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed scenario: ") + e.what());
  }
  return s;
}

Scenario Scenario::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open scenario '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "scenario '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j, path.parent_path());
}

void Scenario::validate() const {
  require(!methods.empty(), ErrorKind::InvalidArgument, "scenario lists no methods");
  require(!experts.empty(), ErrorKind::InvalidArgument, "scenario lists no experts");
  require(top_k >= 1 && top_k <= experts.size() + 1, ErrorKind::InvalidArgument,
          "top_k must lie in [1, experts + 1]");
  MixtureWeights{mixture}.validate(kAllDomains.size());
  recipe_for(MergeMethod::Dare, *this).validate();
  for (const auto& m : methods) {
    if (is_expert_row(m)) {
      const Domain d = parse_domain(m.substr(7));
      require(std::any_of(experts.begin(), experts.end(),
                          [&](const DomainCheckpoint& c) { return c.domain == d; }),
              ErrorKind::InvalidArgument, "method '" + m + "' has no matching expert");
      continue;
    }
    require(std::find(known_methods().begin(), known_methods().end(), m) != known_methods().end(),
            ErrorKind::InvalidArgument, "unknown method '" + m + "'");
    require(m != "hetero" || (!hetero.empty() && hetero_top_k >= 1 && hetero_top_k <= hetero.size()),
            ErrorKind::InvalidArgument, "the hetero method needs models.hetero and a valid hetero_top_k");
  }
  std::vector<std::filesystem::path> paths{base};
  for (const auto& c : experts) paths.push_back(c.path);
  if (std::find(methods.begin(), methods.end(), "hetero") != methods.end()) {
    for (const auto& c : hetero) paths.push_back(c.path);
  }
  for (const auto& p : paths) {
    require(std::filesystem::is_regular_file(p), ErrorKind::Io,
            "missing checkpoint '" + p.string() + "'");
  }
}

void to_json(json& j, const Scenario& s) {
  json mixture = json::object();
  for (std::size_t d = 0; d < kAllDomains.size(); ++d) {
    mixture[std::string(domain_name(kAllDomains[d]))] = s.mixture[d];
  }
  j = json{{"models",
            {{"base", s.base.string()},
             {"experts", checkpoints_json(s.experts)},
             {"hetero", checkpoints_json(s.hetero)}}},
           {"corpora",
            {{"seed", s.corpus_seed},
             {"eval_seed", s.eval_seed},
             {"train_sequences", s.train_sequences},
             {"eval_sequences", s.eval_sequences},
             {"eval_prompts", s.eval_prompts}}},
           {"mixture", mixture},
           {"train",
            {{"steps", s.steps},
             {"lr", s.lr},
             {"weight_decay", s.weight_decay},
             {"seed", s.train_seed},
             {"trainable", trainable_name(s.trainable)},
             {"batch_size", s.batch_size},
             {"warmup_steps", s.warmup_steps}}},
           {"eval",
            {{"methods", s.methods},
             {"top_k", s.top_k},
             {"hetero_top_k", s.hetero_top_k},
             {"retain_percent", s.retain_percent},
             {"lambda", s.lambda},
             {"seed", s.merge_seed},
             {"router_seed", s.router_seed},
             {"merge_method", merge_method_name(s.merge_method)}}}};
}

const MethodRow& ComparisonTable::row(const std::string& method) const {
  for (const auto& r : rows) {
    if (r.method == method) return r;
  }
  fail(ErrorKind::InvalidArgument, "no row for method '" + method + "'");
}

std::optional<double> ComparisonTable::own_expert_probability(const std::string& method,
                                                              Domain domain) const {
  const MethodRow& r = row(method);
  for (const auto& [d, e] : r.expert_of_domain) {
    if (d != domain) continue;
    const auto& routing = r.report.at(domain).routing;
    if (e < routing.size()) return routing[e];
  }
  return std::nullopt;
}

ComparisonTable compare_baselines(const Scenario& s, const ProgressFn& progress) {
  s.validate();
  ComparisonTable table;
  table.scenario = s;

  const Checkpoint base = load_checkpoint(s.base);
  std::vector<Checkpoint> domain_experts;
  for (const auto& c : s.experts) domain_experts.push_back(load_checkpoint(c.path));
  // MoE expert list: the base model first, then the domain experts.
  std::vector<Checkpoint> moe_experts{base};
  moe_experts.insert(moe_experts.end(), domain_experts.begin(), domain_experts.end());
  std::vector<std::pair<Domain, std::size_t>> moe_map;
  for (std::size_t i = 0; i < s.experts.size(); ++i) moe_map.emplace_back(s.experts[i].domain, i + 1);

  std::vector<DomainCorpus> train_corpora;
  for (Domain d : kAllDomains) train_corpora.push_back(gen_corpus(d, s.corpus_seed, s.train_sequences));
  const MixtureWeights mixture{s.mixture};
  const EvalSet eval_set = EvalSet::make(s.eval_seed, s.eval_sequences, s.eval_prompts);

  auto moe_of = [&](MergeMethod method, AttentionMode attention, RoutingMode routing) {
    return assemble_moe(base, moe_experts, recipe_for(method, s), attention, s.top_k, s.router_seed,
                        routing);
  };

  for (const auto& method : s.methods) {
    note(progress, "method " + method);
    MethodRow row;
    row.method = method;
    auto finish_training = [&](const TrainLog& log) {
      row.train_steps = log.step_loss.size();
      row.final_train_loss = log.step_loss.empty() ? 0.0 : log.step_loss.back();
      row.train_tokens = log.tokens;
    };
    auto fine_tuned = [&](MoEModel m, Trainable trainable) {
      finish_training(train(m, train_corpora, mixture, train_config(s, trainable),
                            [&](std::size_t step, double loss) {
                              if (step % 100 == 0) {
                                char buf[64];
                                std::snprintf(buf, sizeof buf, "  step %zu loss %.4f", step, loss);
                                note(progress, buf);
                              }
                            }));
      return m;
    };

    std::unique_ptr<LanguageModel> model;
    if (method == "base") {
      model = std::make_unique<DenseLM>(base);
    } else if (is_expert_row(method)) {
      const Domain d = parse_domain(method.substr(7));
      for (std::size_t i = 0; i < s.experts.size(); ++i) {
        if (s.experts[i].domain == d) {
          model = std::make_unique<DenseLM>(domain_experts[i]);
          break;
        }
      }
    } else if (method == "btx" || method == "dare_moe" || method == "ties_moe") {
      const MergeMethod m = method == "btx"        ? MergeMethod::Average
                            : method == "dare_moe" ? MergeMethod::Dare
                                                   : MergeMethod::Ties;
      model = std::make_unique<MoELM>(
          fine_tuned(moe_of(m, AttentionMode::Merged, RoutingMode::Learned), s.trainable));
      row.expert_of_domain = moe_map;
    } else if (method == "router_ft") {
      model = std::make_unique<MoELM>(fine_tuned(
          moe_of(MergeMethod::Average, AttentionMode::Merged, RoutingMode::Learned),
          Trainable::RouterOnly));
      row.expert_of_domain = moe_map;
    } else if (method == "random_routing") {
      model = std::make_unique<MoELM>(
          moe_of(s.merge_method, AttentionMode::Merged, RoutingMode::Random));
      row.expert_of_domain = moe_map;
    } else if (method == "dare_dense" || method == "ties_dense") {
      const MergeMethod m = method == "dare_dense" ? MergeMethod::Dare : MergeMethod::Ties;
      model = std::make_unique<DenseLM>(dense_merge(base, domain_experts, recipe_for(m, s)));
    } else if (method == "ppl_merged" || method == "ppl_separate" || method == "grad_merged" ||
               method == "grad_separate") {
      const bool ppl = method.rfind("ppl", 0) == 0;
      const AttentionMode attention =
          method.ends_with("separate") ? AttentionMode::Separate : AttentionMode::Merged;
      HeuristicRouter router;
      if (ppl) {
        router = make_ppl_router(moe_experts, s.top_k);
      } else {
        std::vector<TaskVector> taus;
        for (const auto& e : moe_experts) taus.push_back(task_vector(base, e));
        router = make_grad_router(base, std::move(taus), s.top_k);
      }
      model = std::make_unique<MoELM>(
          moe_of(s.merge_method, attention, ppl ? RoutingMode::Ppl : RoutingMode::Grad),
          std::move(router));
      row.expert_of_domain = moe_map;
    } else if (method == "hetero") {
      std::vector<Checkpoint> trunks;
      for (const auto& c : s.hetero) trunks.push_back(load_checkpoint(c.path));
      HeteroMoEModel h = assemble_hetero_moe(trunks, s.hetero_top_k, s.router_seed);
      finish_training(
          train(h, train_corpora, mixture, train_config(s, Trainable::All)));
      model = std::make_unique<HeteroLM>(std::move(h));
      for (std::size_t i = 0; i < s.hetero.size(); ++i) {
        row.expert_of_domain.emplace_back(s.hetero[i].domain, i);
      }
    }
    require(model != nullptr, ErrorKind::InvalidArgument, "unknown method '" + method + "'");
    row.report = evaluate(*model, eval_set, method);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void to_json(json& j, const ComparisonTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json experts = json::object();
    for (const auto& [d, e] : r.expert_of_domain) experts[std::string(domain_name(d))] = e;
    rows.push_back({{"method", r.method},
                    {"report", r.report},
                    {"train_steps", r.train_steps},
                    {"final_train_loss", r.final_train_loss},
                    {"train_tokens", r.train_tokens},
                    {"expert_of_domain", experts}});
  }
  j = json{{"scenario", t.scenario}, {"rows", rows}};
}

std::string format_table(const ComparisonTable& t) {
  const Scenario& s = t.scenario;
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line,
                "steps %zu  lr %g  weight_decay %g  batch %zu  train_seed %llu  top_k %zu  "
                "retain %g  lambda %.4f  merge_seed %llu  router_seed %llu\n",
                s.steps, s.lr, s.weight_decay, s.batch_size,
                static_cast<unsigned long long>(s.train_seed), s.top_k, s.retain_percent, s.lambda,
                static_cast<unsigned long long>(s.merge_seed),
                static_cast<unsigned long long>(s.router_seed));
  out += line;
  std::snprintf(line, sizeof line, "%-16s %8s %9s %11s %8s %9s %11s %9s   %s\n", "method",
                "arith_em", "arith_ppl", "bracket_ppl", "facts_em", "facts_ppl", "general_ppl",
                "avg_score", "own-expert routing (arith bracket facts)");
  out += line;
  auto metric = [](const EvalReport& r, Domain d, bool em) {
    char cell[32] = "-";
    for (const auto& m : r.domains) {
      if (m.domain != d) continue;
      if (em && m.exact_match) std::snprintf(cell, sizeof cell, "%.3f", *m.exact_match);
      if (!em) std::snprintf(cell, sizeof cell, "%.4f", m.perplexity);
    }
    return std::string(cell);
  };
  for (const auto& r : t.rows) {
    std::string routing;
    for (Domain d : kExpertDomains) {
      const auto p = t.own_expert_probability(r.method, d);
      char cell[16] = "-";
      if (p) std::snprintf(cell, sizeof cell, "%.3f", *p);
      routing += (routing.empty() ? "" : " ") + std::string(cell);
    }
    std::snprintf(line, sizeof line, "%-16s %8s %9s %11s %8s %9s %11s %9.4f   %s\n",
                  r.method.c_str(), metric(r.report, Domain::Arith, true).c_str(),
                  metric(r.report, Domain::Arith, false).c_str(),
                  metric(r.report, Domain::Bracket, false).c_str(),
                  metric(r.report, Domain::Facts, true).c_str(),
                  metric(r.report, Domain::Facts, false).c_str(),
                  metric(r.report, Domain::General, false).c_str(), r.report.average_score(),
                  routing.c_str());
    out += line;
  }
  return out;
}

}  // namespace moe
