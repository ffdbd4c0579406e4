#include "moe/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "moe/error.hpp"
#include "moe/gating.hpp"
#include "moe/parallel.hpp"

namespace moe {

MoEOutput DenseLM::run(const TokenSequence& input, const std::vector<float>* alpha) const {
  require(alpha == nullptr, ErrorKind::InvalidArgument, "a dense model takes no expert weights");
  return {forward(model_, input), {}};
}

HeuristicRouter make_ppl_router(std::vector<Checkpoint> experts, std::size_t top_k) {
  require(top_k >= 1 && top_k <= experts.size(), ErrorKind::InvalidArgument,
          "top_k out of range for PPL routing");
  return [experts = std::move(experts), top_k](const TokenSequence& x) {
    return ppl_route(experts, x, top_k);
  };
}

HeuristicRouter make_grad_router(Checkpoint base, std::vector<TaskVector> taus, std::size_t top_k) {
  require(top_k >= 1 && top_k <= taus.size(), ErrorKind::InvalidArgument,
          "top_k out of range for gradient routing");
  return [base = std::move(base), taus = std::move(taus), top_k](const TokenSequence& x) {
    return grad_route(base, taus, x, top_k);
  };
}

MoELM::MoELM(MoEModel model, HeuristicRouter router)
    : model_(std::move(model)), router_(std::move(router)) {
  model_.validate();
  require(is_heuristic(model_.routing_mode) == static_cast<bool>(router_),
          ErrorKind::InvalidArgument,
          "a heuristic router is needed exactly for ppl and grad routing modes");
}

std::optional<std::vector<float>> MoELM::route(const TokenSequence& context) const {
  if (!router_) return std::nullopt;
  return router_(context);
}

MoEOutput MoELM::run(const TokenSequence& input, const std::vector<float>* alpha) const {
  return moe_forward(model_, input, alpha);
}

MoEOutput HeteroLM::run(const TokenSequence& input, const std::vector<float>* alpha) const {
  require(alpha == nullptr, ErrorKind::InvalidArgument,
          "a heterogeneous MoE routes with its own sequence router");
  return hetero_forward(model_, input);
}

EvalSet EvalSet::make(std::uint64_t seed, std::size_t sequences_per_domain,
                      std::size_t prompts_per_domain) {
  EvalSet set;
  for (Domain d : kAllDomains) {
    set.ppl.push_back(gen_corpus(d, seed, sequences_per_domain));
  }
  if (prompts_per_domain > 0) {
    for (Domain d : {Domain::Arith, Domain::Facts}) {
      set.prompts.push_back(gen_prompts(d, seed, prompts_per_domain));
    }
  }
  return set;
}

double domain_score(const DomainMetrics& m) {
  if (m.exact_match) return *m.exact_match;
  return m.perplexity > 0.0 ? 1.0 / m.perplexity : 0.0;
}

const DomainMetrics& EvalReport::at(Domain d) const {
  for (const auto& m : domains) {
    if (m.domain == d) return m;
  }
  fail(ErrorKind::InvalidArgument, "report has no '" + std::string(domain_name(d)) + "' domain");
}

double EvalReport::average_score() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& m : domains) {
    if (m.domain == Domain::General) continue;
    total += domain_score(m);
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

bool exact_match(const LanguageModel& model, const PromptExample& example) {
  const auto alpha = model.route(example.prompt);
  TokenSequence input{kBosToken};
  input.insert(input.end(), example.prompt.begin(), example.prompt.end());
  const auto out = generate(
      [&](const TokenSequence& s) { return model.run(s, alpha ? &*alpha : nullptr).logits; },
      model.max_seq_len(), input, example.answer.size(), 0.0f);
  return std::equal(example.answer.begin(), example.answer.end(), out.end() - static_cast<long>(example.answer.size()));
}

EvalReport evaluate(const LanguageModel& model, const EvalSet& set, const std::string& name) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport report;
  report.model = name;
  const std::size_t l = model.n_experts();
  for (const auto& corpus : set.ppl) {
    const auto& seqs = corpus.sequences;
    require(!seqs.empty(), ErrorKind::InvalidArgument, "empty evaluation corpus");
    std::vector<double> nll(seqs.size());
    std::vector<RoutingTrace> traces(seqs.size());
    parallel_for(seqs.size(), [&](std::size_t i) {
      const auto alpha = model.route(seqs[i]);
      MoEOutput out = model.run(scoring_input(seqs[i]), alpha ? &*alpha : nullptr);
      nll[i] = static_cast<double>(cross_entropy(out.logits, seqs[i])) *
               static_cast<double>(seqs[i].size());
      traces[i] = std::move(out.trace);
    });
    DomainMetrics m;
    m.domain = corpus.domain;
    m.sequences = seqs.size();
    double total = 0.0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      total += nll[i];
      m.tokens += seqs[i].size();
    }
    m.perplexity = std::exp(total / static_cast<double>(m.tokens));
    if (l > 0) {
      m.routing = routing_probability(traces);
      m.top_choice.assign(l, 0.0);
      std::size_t decisions = 0;
      for (const auto& t : traces) {
        for (const auto& d : t.decisions) {
          m.top_choice[argmax(d.weights)] += 1.0;
          ++decisions;
        }
      }
      for (double& v : m.top_choice) v /= static_cast<double>(decisions);
    }
    report.tokens += m.tokens;
    report.domains.push_back(std::move(m));
  }
  for (const auto& prompts : set.prompts) {
    if (prompts.empty()) continue;
    std::vector<char> hit(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) { hit[i] = exact_match(model, prompts[i]); });
    const Domain d = prompts.front().domain;
    DomainMetrics* m = nullptr;
    for (auto& existing : report.domains) {
      if (existing.domain == d) m = &existing;
    }
    if (!m) {
      m = &report.domains.emplace_back();
      m->domain = d;
    }
    m->prompts = prompts.size();
    m->exact_match = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) /
                     static_cast<double>(prompts.size());
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void to_json(nlohmann::json& j, const DomainMetrics& m) {
  j = nlohmann::json{{"domain", domain_name(m.domain)},
                     {"perplexity", m.perplexity},
                     {"tokens", m.tokens},
                     {"sequences", m.sequences},
                     {"prompts", m.prompts},
                     {"score", domain_score(m)}};
  j["exact_match"] = m.exact_match ? nlohmann::json(*m.exact_match) : nlohmann::json(nullptr);
  if (!m.routing.empty()) {
    j["routing_probability"] = m.routing;
    j["top_choice"] = m.top_choice;
  }
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"model", r.model},
                     {"domains", r.domains},
                     {"tokens", r.tokens},
                     {"average_score", r.average_score()},
                     {"wall_seconds", r.seconds}};
}

std::string format_report(const EvalReport& r) {
  std::string out = "model: " + (r.model.empty() ? std::string("-") : r.model) + "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %10s %8s %8s  %s\n", "domain", "ppl", "em", "tokens",
                "routing");
  out += line;
  for (const auto& m : r.domains) {
    std::string routing;
    for (double p : m.routing) {
      char cell[16];
      std::snprintf(cell, sizeof cell, "%s%.3f", routing.empty() ? "" : " ", p);
      routing += cell;
    }
    char em[16] = "-";
    if (m.exact_match) std::snprintf(em, sizeof em, "%.3f", *m.exact_match);
    std::snprintf(line, sizeof line, "%-8s %10.4f %8s %8zu  %s\n",
                  std::string(domain_name(m.domain)).c_str(), m.perplexity, em, m.tokens,
                  routing.empty() ? "-" : routing.c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "average score %.4f over %zu tokens\n", r.average_score(),
                r.tokens);
  return out + line;
}

}  // namespace moe
