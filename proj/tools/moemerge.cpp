#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moe/checkpoint.hpp"
#include "moe/error.hpp"
#include "moe/eval.hpp"
#include "moe/gating.hpp"
#include "moe/parallel.hpp"
#include "moe/scenario.hpp"
#include "moe/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace moe;

namespace {

constexpr int kUsageExit = 2;
constexpr int kUnknownVerbExit = 3;

int exit_code(ErrorKind kind) { return 10 + static_cast<int>(kind); }

const std::map<std::string, MergeMethod> kMethods{
    {"average", MergeMethod::Average}, {"dare", MergeMethod::Dare}, {"ties", MergeMethod::Ties}};
const std::map<std::string, AttentionMode> kAttention{{"merged", AttentionMode::Merged},
                                                      {"separate", AttentionMode::Separate}};
const std::map<std::string, RoutingMode> kHeuristics{{"ppl", RoutingMode::Ppl},
                                                     {"grad", RoutingMode::Grad}};
const std::map<std::string, Trainable> kTrainable{{"all", Trainable::All},
                                                  {"router", Trainable::RouterOnly}};
const std::map<std::string, Domain> kDomains{{"arith", Domain::Arith},
                                             {"bracket", Domain::Bracket},
                                             {"facts", Domain::Facts},
                                             {"general", Domain::General}};

// Every option value of a run, echoed in the header and in reports.
struct RunInfo {
  std::string verb;
  std::vector<std::pair<std::string, std::string>> settings;

  std::string header() const {
    std::string out = "# moemerge " + verb;
    for (const auto& [k, v] : settings) out += "  " + k + "=" + v;
    return out + "\n";
  }
  json to_json() const {
    json j{{"verb", verb}};
    for (const auto& [k, v] : settings) j["settings"][k] = v;
    return j;
  }
};

RunInfo collect(const CLI::App& sub) {
  RunInfo info{sub.get_name(), {}};
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name().empty()) continue;
    std::string value;
    for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    if (value.empty()) value = opt->get_default_str();
    if (value.empty()) continue;
    std::string name = opt->get_name();
    while (!name.empty() && name.front() == '-') name.erase(0, 1);
    info.settings.emplace_back(name, value);
  }
  return info;
}

void guard_output(const fs::path& out, const std::vector<std::string>& inputs) {
  require(!out.empty(), ErrorKind::InvalidArgument, "--out is required");
  for (const auto& in : inputs) {
    require(fs::weakly_canonical(out) != fs::weakly_canonical(in), ErrorKind::InvalidArgument,
            "--out must not overwrite the input '" + in + "'");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write '" + path.string() + "'");
  f << text;
}

// Writes <base>.json and <base>.txt and echoes the table.
void report(const RunInfo& info, const std::string& out, json body, const std::string& table) {
  std::cout << table;
  if (out.empty()) return;
  body["run"] = info.to_json();
  write_text(out + ".json", body.dump(2) + "\n");
  write_text(out + ".txt", info.header() + table);
  std::cout << "wrote " << out << ".json and " << out << ".txt\n";
}

std::vector<DomainCorpus> domain_corpora(std::uint64_t seed, std::size_t n) {
  std::vector<DomainCorpus> out;
  for (Domain d : kAllDomains) out.push_back(gen_corpus(d, seed, n));
  return out;
}

MixtureWeights parse_mixture(const std::string& text) {
  std::vector<double> raw(kAllDomains.size(), 0.0);
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    require(eq != std::string::npos, ErrorKind::InvalidArgument,
            "mixture entries look like domain=weight, got '" + item + "'");
    const Domain d = parse_domain(item.substr(0, eq));
    double w = 0.0;
    try {
      w = std::stod(item.substr(eq + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidArgument, "bad mixture weight in '" + item + "'");
    }
    raw[static_cast<std::size_t>(d)] = w;
  }
  return MixtureWeights::normalized(raw);
}

struct TrainOpts {
  std::size_t steps = 0;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch = 8;
  std::size_t sequences = 2000;
  std::uint64_t corpus_seed = 1;
  std::size_t log_every = 100;

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.steps = steps;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.batch_size = batch;
    c.seed = seed;
    return c;
  }
};

StepCallback progress_every(std::size_t every) {
  return [every](std::size_t step, double loss) {
    if (every > 0 && step % every == 0) std::printf("step %zu loss %.4f\n", step, loss);
  };
}

ModelConfig model_config_from(const std::string& path) {
  ModelConfig c{4, 64, 4, 128, vocab::kSize, 64};
  if (path.empty()) return c;
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open config '" + path + "'");
  try {
    const json j = json::parse(in);
    const json& m = j.contains("model") ? j.at("model") : j;
    c.n_layers = m.value("n_layers", c.n_layers);
    c.d_model = m.value("d_model", c.d_model);
    c.n_heads = m.value("n_heads", c.n_heads);
    c.d_ffn = m.value("d_ffn", c.d_ffn);
    c.vocab_size = m.value("vocab_size", c.vocab_size);
    c.max_seq_len = m.value("max_seq_len", c.max_seq_len);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed model config '" + path + "': " + e.what());
  }
  c.validate();
  return c;
}

std::vector<Checkpoint> load_all(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> out;
  for (const auto& p : paths) out.push_back(load_checkpoint(p));
  return out;
}

std::string model_label(const Checkpoint& c, const std::string& path) {
  auto it = c.metadata.find("domain");
  if (it != c.metadata.end()) return it->second;
  it = c.metadata.find("name");
  return it != c.metadata.end() ? it->second : fs::path(path).stem().string();
}

// Builds an evaluable model from any checkpoint kind. Heuristic MoEs take
// their router from the expert checkpoints (and base, for grad routing).
std::unique_ptr<LanguageModel> open_model(const std::string& path, const std::string& base_path,
                                          const std::vector<std::string>& expert_paths) {
  Checkpoint c = load_checkpoint(path);
  const std::string kind = checkpoint_kind(c);
  if (kind == "dense") return std::make_unique<DenseLM>(std::move(c));
  if (kind == "hetero_moe") return std::make_unique<HeteroLM>(hetero_from_checkpoint(c));
  MoEModel m = moe_from_checkpoint(c);
  HeuristicRouter router;
  if (is_heuristic(m.routing_mode)) {
    require(expert_paths.size() == m.n_experts, ErrorKind::InvalidArgument,
            "a " + std::string(routing_mode_name(m.routing_mode)) + "-routed MoE needs its " +
                std::to_string(m.n_experts) + " expert checkpoints via --experts");
    auto experts = load_all(expert_paths);
    if (m.routing_mode == RoutingMode::Ppl) {
      router = make_ppl_router(std::move(experts), m.top_k);
    } else {
      require(!base_path.empty(), ErrorKind::InvalidArgument, "grad routing needs --base");
      const Checkpoint base = load_checkpoint(base_path);
      std::vector<TaskVector> taus;
      for (const auto& e : experts) taus.push_back(task_vector(base, e));
      router = make_grad_router(base, std::move(taus), m.top_k);
    }
  }
  return std::make_unique<MoELM>(std::move(m), std::move(router));
}

std::string routing_table(const EvalReport& r) {
  std::string out = "routing probability per domain (rows) and expert (columns)\n";
  char cell[64];
  for (const auto& m : r.domains) {
    std::snprintf(cell, sizeof cell, "%-8s", std::string(domain_name(m.domain)).c_str());
    out += cell;
    for (double p : m.routing) {
      std::snprintf(cell, sizeof cell, " %7.4f", p);
      out += cell;
    }
    out += "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Merge domain experts into dense or mixture-of-experts language models"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (0 = all cores)")->capture_default_str();
  app.fallthrough();

  // Shared option storage; each verb registers the subset it accepts.
  std::uint64_t seed = 0;
  std::string out, config, base, model, domain = "arith", text, mixture = "arith=0.3,bracket=0.3,facts=0.3,general=0.1";
  std::string method = "ties", attention = "merged", heuristic, trainable = "all";
  std::vector<std::string> experts;
  double retain = 80.0, lambda = 1.0 / 3.0, general_share = 0.2;
  std::size_t top_k = 2, eval_sequences = 64, eval_prompts = 100, sample = 0;
  std::uint64_t eval_seed = 1001;
  TrainOpts init_opts{0}, cpt_opts{1000}, ft_opts{300};

  auto add_seed = [&](CLI::App* s) {
    s->add_option("--seed", seed, "Random seed")->capture_default_str();
  };
  auto add_out = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--out", out, required ? "Output checkpoint" : "Report basename");
    if (required) o->required();
  };
  auto add_merge = [&](CLI::App* s) {
    s->add_option("--method", method, "average, dare or ties")
        ->check(CLI::IsMember(kMethods))
        ->capture_default_str();
    s->add_option("--retain", retain, "Retained percent p")
        ->check(CLI::Range(0.0, 100.0))
        ->capture_default_str();
    s->add_option("--lambda", lambda, "Task-vector scale")->capture_default_str();
  };
  auto add_training = [&](CLI::App* s, TrainOpts& t) {
    s->add_option("--steps", t.steps, "Optimizer steps")->capture_default_str();
    s->add_option("--lr", t.lr, "AdamW learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    s->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay")->capture_default_str();
    s->add_option("--batch", t.batch, "Sequences per step")->check(CLI::PositiveNumber)->capture_default_str();
    s->add_option("--sequences", t.sequences, "Training sequences per domain")->capture_default_str();
    s->add_option("--corpus-seed", t.corpus_seed, "Corpus generator seed")->capture_default_str();
    s->add_option("--log-every", t.log_every, "Print the loss every N steps")->capture_default_str();
  };
  auto add_eval_set = [&](CLI::App* s) {
    s->add_option("--eval-seed", eval_seed, "Held-out corpus seed")->capture_default_str();
    s->add_option("--eval-sequences", eval_sequences, "Held-out sequences per domain")->capture_default_str();
    s->add_option("--eval-prompts", eval_prompts, "Exact-match prompts per domain")->capture_default_str();
  };

  auto* init = app.add_subcommand("init-base", "Create a base model, optionally pretrained on general data");
  init->add_option("--config", config, "Model config JSON");
  add_seed(init);
  add_out(init, true);
  add_training(init, init_opts);

  auto* cpt = app.add_subcommand("cpt-expert", "Continue pretraining a base model on one domain");
  cpt->add_option("--base", base, "Base checkpoint")->required();
  cpt->add_option("--domain", domain, "Expert domain")->check(CLI::IsMember(kDomains))->capture_default_str();
  cpt->add_option("--general-share", general_share, "Share of general data")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  add_seed(cpt);
  add_out(cpt, true);
  add_training(cpt, cpt_opts);

  auto* mdense = app.add_subcommand("merge-dense", "Merge experts into one dense model");
  mdense->add_option("--base", base, "Base checkpoint")->required();
  mdense->add_option("experts", experts, "Expert checkpoints")->required();
  add_merge(mdense);
  add_seed(mdense);
  add_out(mdense, true);

  auto* mmoe = app.add_subcommand("merge-moe", "Assemble a mixture of experts from dense experts");
  mmoe->add_option("--base", base, "Base checkpoint")->required();
  mmoe->add_option("experts", experts, "Expert checkpoints, in expert order")
      ->required()
      ;
  add_merge(mmoe);
  mmoe->add_option("--attention", attention, "merged or separate")
      ->check(CLI::IsMember(kAttention))
      ->capture_default_str();
  mmoe->add_option("--heuristic", heuristic, "Route with ppl or grad instead of a learned router")
      ->check(CLI::IsMember(kHeuristics));
  mmoe->add_option("--top-k", top_k, "Experts per decision")->check(CLI::PositiveNumber)->capture_default_str();
  add_seed(mmoe);
  add_out(mmoe, true);

  auto* mhet = app.add_subcommand("merge-hetero", "Assemble a mixture from experts of differing shapes");
  mhet->add_option("experts", experts, "Expert checkpoints")->required();
  mhet->add_option("--top-k", top_k, "Experts per sequence")->check(CLI::PositiveNumber)->capture_default_str();
  add_seed(mhet);
  add_out(mhet, true);

  auto* ft = app.add_subcommand("finetune", "Fine-tune a dense, MoE or hetero checkpoint");
  ft->add_option("model", model, "Checkpoint")->required();
  ft->add_option("--trainable", trainable, "all or router")
      ->check(CLI::IsMember(kTrainable))
      ->capture_default_str();
  ft->add_option("--mixture", mixture, "domain=weight list")->capture_default_str();
  add_seed(ft);
  add_out(ft, true);
  add_training(ft, ft_opts);

  auto* route = app.add_subcommand("route", "Heuristic routing weights for one prompt");
  route->add_option("experts", experts, "Expert checkpoints")->required();
  route->add_option("--heuristic", heuristic, "ppl or grad")->required()->check(CLI::IsMember(kHeuristics));
  route->add_option("--top-k", top_k, "Experts to weight")->check(CLI::PositiveNumber)->capture_default_str();
  route->add_option("--base", base, "Base checkpoint (grad)");
  route->add_option("--text", text, "Prompt as space-separated tokens");
  route->add_option("--domain", domain, "Held-out prompt domain when --text is absent")
      ->check(CLI::IsMember(kDomains))
      ->capture_default_str();
  route->add_option("--sample", sample, "Held-out prompt index")->capture_default_str();
  add_seed(route);
  add_out(route, false);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint, or compare methods with --config");
  eval->add_option("model", model, "Checkpoint");
  eval->add_option("--config", config, "Scenario JSON for a method comparison");
  eval->add_option("--base", base, "Base checkpoint (grad-routed MoE)");
  eval->add_option("--experts", experts, "Expert checkpoints (heuristic MoE)");
  add_eval_set(eval);
  add_out(eval, false);

  auto* sim = app.add_subcommand("analyze-similarity", "Per-layer cosine similarity of two task vectors");
  sim->add_option("--base", base, "Base checkpoint")->required();
  sim->add_option("experts", experts, "Two expert checkpoints")->required()->expected(2);
  add_out(sim, false);

  auto* ar = app.add_subcommand("analyze-routing", "Routing probability per domain over an eval run");
  ar->add_option("model", model, "MoE or hetero checkpoint")->required();
  ar->add_option("--base", base, "Base checkpoint (grad-routed MoE)");
  ar->add_option("--experts", experts, "Expert checkpoints (heuristic MoE)");
  add_eval_set(ar);
  add_out(ar, false);

  auto* inspect = app.add_subcommand("inspect", "Print config, metadata and tensors of a checkpoint");
  inspect->add_option("model", model, "Checkpoint")->required();

  if (argc > 1 && argv[1][0] != '-') {
    const std::string verb = argv[1];
    bool known = false;
    for (const CLI::App* s : app.get_subcommands({})) known |= s->get_name() == verb;
    if (!known) {
      std::cerr << "error[unknown_verb]: '" << verb << "' is not a moemerge verb (see --help)\n";
      return kUnknownVerbExit;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[usage]: " << e.what() << "\n";
    return kUsageExit;
  }

  CLI::App* sub = app.get_subcommands().front();
  const RunInfo info = collect(*sub);
  try {
    set_thread_limit(threads);
    std::cout << info.header();

    if (sub == init) {
      guard_output(out, {});
      Checkpoint m = build_model(model_config_from(config), seed);
      m.metadata["name"] = "base";
      m.metadata["seed"] = std::to_string(seed);
      const TrainOpts& t = init_opts;
      if (t.steps > 0) {
        const auto log = train(m, {gen_corpus(Domain::General, t.corpus_seed, t.sequences)},
                               MixtureWeights{{1.0}}, t.config(seed), progress_every(t.log_every));
        std::printf("trained %zu steps on %zu tokens in %.1fs\n", t.steps, log.tokens, log.seconds);
      }
      save_checkpoint(m, out);
    } else if (sub == cpt) {
      guard_output(out, {base});
      Checkpoint m = load_checkpoint(base);
      require(checkpoint_kind(m) == "dense", ErrorKind::InvalidArgument, "cpt-expert needs a dense base");
      const Domain d = parse_domain(domain);
      const TrainOpts& t = cpt_opts;
      const auto log = train(m,
                             {gen_corpus(d, t.corpus_seed, t.sequences),
                              gen_corpus(Domain::General, t.corpus_seed, t.sequences)},
                             MixtureWeights::normalized({1.0 - general_share, general_share}),
                             t.config(seed), progress_every(t.log_every));
      std::printf("trained %zu steps on %zu tokens in %.1fs\n", t.steps, log.tokens, log.seconds);
      m.metadata["name"] = domain + "_expert";
      m.metadata["domain"] = domain;
      save_checkpoint(m, out);
    } else if (sub == mdense) {
      std::vector<std::string> inputs = experts;
      inputs.push_back(base);
      guard_output(out, inputs);
      MergeRecipe r;
      r.method = kMethods.at(method);
      r.retain_percent = retain;
      r.lambda = lambda;
      r.seed = seed;
      save_checkpoint(dense_merge(load_checkpoint(base), load_all(experts), r), out);
    } else if (sub == mmoe) {
      std::vector<std::string> inputs = experts;
      inputs.push_back(base);
      guard_output(out, inputs);
      MergeRecipe r;
      r.method = kMethods.at(method);
      r.retain_percent = retain;
      r.lambda = lambda;
      r.seed = seed;
      const RoutingMode routing = heuristic.empty() ? RoutingMode::Learned : kHeuristics.at(heuristic);
      const MoEModel m = assemble_moe(load_checkpoint(base), load_all(experts), r,
                                      kAttention.at(attention), top_k, seed, routing);
      save_checkpoint(to_checkpoint(m), out);
      std::printf("experts %zu  top_k %zu  attention %s  routing %s\n", m.n_experts, m.top_k,
                  attention.c_str(), std::string(routing_mode_name(routing)).c_str());
    } else if (sub == mhet) {
      guard_output(out, experts);
      const HeteroMoEModel m = assemble_hetero_moe(load_all(experts), top_k, seed);
      save_checkpoint(to_checkpoint(m), out);
      std::printf("experts %zu  top_k %zu  d_model %zu\n", m.n_experts(), m.top_k, m.d_model());
    } else if (sub == ft) {
      guard_output(out, {model});
      Checkpoint c = load_checkpoint(model);
      const TrainOpts& t = ft_opts;
      TrainConfig tc = t.config(seed);
      tc.trainable = kTrainable.at(trainable);
      const auto corpora = domain_corpora(t.corpus_seed, t.sequences);
      const MixtureWeights w = parse_mixture(mixture);
      const std::string kind = checkpoint_kind(c);
      TrainLog log;
      if (kind == "dense") {
        log = train(c, corpora, w, tc, progress_every(t.log_every));
      } else if (kind == "hetero_moe") {
        HeteroMoEModel h = hetero_from_checkpoint(c);
        log = train(h, corpora, w, tc, progress_every(t.log_every));
        c = to_checkpoint(h);
      } else {
        MoEModel m = moe_from_checkpoint(c);
        log = train(m, corpora, w, tc, progress_every(t.log_every));
        c = to_checkpoint(m);
      }
      std::printf("trained %zu steps on %zu tokens in %.1fs\n", t.steps, log.tokens, log.seconds);
      save_checkpoint(c, out);
    } else if (sub == route) {
      TokenSequence prompt;
      if (!text.empty()) {
        prompt = vocab::encode(text);
      } else {
        const auto prompts = gen_prompts(parse_domain(domain), seed, sample + 1);
        prompt = prompts.back().prompt;
      }
      require(!prompt.empty(), ErrorKind::InvalidArgument, "empty prompt");
      const auto checkpoints = load_all(experts);
      std::vector<float> alpha;
      std::vector<double> scores;
      std::string score_name;
      if (heuristic == "ppl") {
        alpha = ppl_route(checkpoints, prompt, top_k, &scores);
        score_name = "perplexity";
      } else {
        require(!base.empty(), ErrorKind::InvalidArgument, "grad routing needs --base");
        const Checkpoint b = load_checkpoint(base);
        std::vector<TaskVector> taus;
        for (const auto& e : checkpoints) taus.push_back(task_vector(b, e));
        alpha = grad_route(b, taus, prompt, top_k, &scores);
        score_name = "cosine";
      }
      std::string table = "prompt: " + vocab::decode(prompt) + "\n";
      char line[160];
      std::snprintf(line, sizeof line, "%-3s %-16s %12s %8s\n", "#", "expert", score_name.c_str(), "weight");
      table += line;
      json rows = json::array();
      for (std::size_t i = 0; i < checkpoints.size(); ++i) {
        const std::string label = model_label(checkpoints[i], experts[i]);
        std::snprintf(line, sizeof line, "%-3zu %-16s %12.5f %8.4f\n", i, label.c_str(), scores[i], alpha[i]);
        table += line;
        rows.push_back({{"expert", label}, {"path", experts[i]}, {score_name, scores[i]}, {"weight", alpha[i]}});
      }
      const std::size_t top = argmax(alpha);
      table += "top expert: " + std::to_string(top) + " (" + model_label(checkpoints[top], experts[top]) + ")\n";
      report(info, out, json{{"prompt", vocab::decode(prompt)}, {"experts", rows}, {"top_expert", top}}, table);
    } else if (sub == eval && !config.empty()) {
      require(model.empty(), ErrorKind::InvalidArgument, "give either a checkpoint or --config, not both");
      const Scenario s = Scenario::load(config);
      const auto t = compare_baselines(s, [](const std::string& msg) { std::cout << msg << "\n" << std::flush; });
      report(info, out, json(t), format_table(t));
    } else if (sub == eval || sub == ar) {
      require(!model.empty(), ErrorKind::InvalidArgument, "eval needs a checkpoint or --config");
      const auto lm = open_model(model, base, experts);
      require(sub == eval || lm->n_experts() > 0, ErrorKind::InvalidArgument,
              "analyze-routing needs an MoE or hetero checkpoint");
      const EvalSet set = EvalSet::make(eval_seed, eval_sequences, sub == eval ? eval_prompts : 0);
      const EvalReport r = evaluate(*lm, set, fs::path(model).stem().string());
      if (sub == eval) {
        std::string table = format_report(r);
        if (lm->n_experts() > 0) table += routing_table(r);
        report(info, out, json(r), table);
      } else {
        json routing = json::object();
        for (const auto& m : r.domains) {
          routing[std::string(domain_name(m.domain))] = {{"routing_probability", m.routing},
                                                         {"top_choice", m.top_choice}};
        }
        report(info, out, json{{"model", r.model}, {"routing", routing}}, routing_table(r));
      }
    } else if (sub == sim) {
      const Checkpoint b = load_checkpoint(base);
      const auto tau_a = task_vector(b, load_checkpoint(experts[0]));
      const auto tau_b = task_vector(b, load_checkpoint(experts[1]));
      std::string table;
      char line[128];
      std::snprintf(line, sizeof line, "%-6s %10s %10s\n", "layer", "attention", "ffn");
      table += line;
      json rows = json::array();
      for (const auto& l : task_vector_similarity(tau_a, tau_b)) {
        std::snprintf(line, sizeof line, "%-6zu %10.5f %10.5f%s\n", l.layer, l.attention, l.ffn,
                      l.attention_degenerate || l.ffn_degenerate ? "  (degenerate)" : "");
        table += line;
        rows.push_back({{"layer", l.layer},
                        {"attention", l.attention},
                        {"ffn", l.ffn},
                        {"attention_degenerate", l.attention_degenerate},
                        {"ffn_degenerate", l.ffn_degenerate}});
      }
      report(info, out, json{{"layers", rows}}, table);
    } else if (sub == inspect) {
      const Checkpoint c = load_checkpoint(model);
      const ModelConfig& k = c.config;
      std::printf("kind %s\n", checkpoint_kind(c).c_str());
      std::printf("config n_layers=%zu d_model=%zu n_heads=%zu d_ffn=%zu vocab_size=%zu max_seq_len=%zu\n",
                  k.n_layers, k.d_model, k.n_heads, k.d_ffn, k.vocab_size, k.max_seq_len);
      for (const auto& [key, v] : c.metadata) std::printf("meta %s = %s\n", key.c_str(), v.c_str());
      std::size_t params = 0;
      for (const auto& [name, t] : c.tensors) {
        std::string shape;
        for (std::size_t d : t.shape()) shape += (shape.empty() ? "" : "x") + std::to_string(d);
        std::printf("tensor %-40s %s\n", name.c_str(), shape.c_str());
        params += t.size();
      }
      std::printf("%zu tensors, %zu parameters\n", c.tensors.size(), params);
    }
  } catch (const Error& e) {
    std::cerr << "error[" << error_kind_name(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
