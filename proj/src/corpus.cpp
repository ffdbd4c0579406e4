#include "moe/corpus.hpp"

#include <algorithm>
#include <set>

#include "moe/error.hpp"
#include "moe/random.hpp"

namespace moe {
namespace {

// Facts and the prose chain belong to the world, not to a corpus seed.
constexpr std::uint64_t kWorldSeed = 0x5eed'f4c7'2024'0001ULL;

using Record = TokenSequence;

Record arith_record(Rng& rng, std::vector<Token>* answer = nullptr) {
  const int a = static_cast<int>(rng.below(kArithMax + 1));
  const int b = static_cast<int>(rng.below(kArithMax + 1));
  const bool plus = rng.below(2) == 0;
  Record r = encode_number(a);
  r.push_back(plus ? vocab::kPlus : vocab::kMinus);
  for (Token t : encode_number(b)) r.push_back(t);
  r.push_back(vocab::kEquals);
  TokenSequence result = encode_number(plus ? a + b : a - b);
  result.push_back(vocab::kSep);
  if (answer) {
    *answer = result;
    return r;
  }
  r.insert(r.end(), result.begin(), result.end());
  return r;
}

void bracket_group(Rng& rng, std::size_t depth, Record& out) {
  const auto kind = static_cast<Token>(rng.below(vocab::kBracketKinds));
  out.push_back(vocab::kOpen0 + kind);
  const std::size_t children = 1 + rng.below(3);
  for (std::size_t c = 0; c < children; ++c) {
    if (depth >= 3 || rng.uniform() < 0.5) {
      out.push_back(vocab::kIdent0 + static_cast<Token>(rng.below(vocab::kIdents)));
    } else {
      bracket_group(rng, depth + 1, out);
    }
  }
  out.push_back(vocab::kClose0 + kind);
}

Record bracket_record(Rng& rng) {
  Record r;
  bracket_group(rng, 1, r);
  r.push_back(vocab::kSep);
  return r;
}

Record facts_record(Rng& rng, std::vector<Token>* answer = nullptr) {
  const std::size_t entity = rng.below(kEntities);
  const std::size_t relation = rng.below(vocab::kRelations);
  Record r{static_cast<Token>(vocab::kEntity0 + entity / vocab::kEntityParts),
           static_cast<Token>(vocab::kEntity0 + entity % vocab::kEntityParts),
           static_cast<Token>(vocab::kRelation0 + relation)};
  const TokenSequence value{static_cast<Token>(vocab::kValue0 + fact_value(entity, relation)),
                            vocab::kSep};
  if (answer) {
    *answer = value;
    return r;
  }
  r.insert(r.end(), value.begin(), value.end());
  return r;
}

Token prose_successor(Token word, std::size_t choice) {
  const double u = keyed_uniform(kWorldSeed, static_cast<std::uint64_t>(word) * 8 + choice, 1);
  return vocab::kWord0 + static_cast<Token>(u * vocab::kWords);
}

Record prose_record(Rng& rng) {
  Record r;
  Token w = vocab::kWord0 + static_cast<Token>(rng.below(vocab::kWords));
  const std::size_t length = 3 + rng.below(5);
  for (std::size_t i = 0; i < length; ++i) {
    r.push_back(w);
    w = prose_successor(w, rng.below(3));
  }
  r.push_back(vocab::kSep);
  return r;
}

enum class RecordKind { Prose, Arith, Bracket, Facts };

Record make_record(RecordKind kind, Rng& rng) {
  switch (kind) {
    case RecordKind::Prose: return prose_record(rng);
    case RecordKind::Arith: return arith_record(rng);
    case RecordKind::Bracket: return bracket_record(rng);
    case RecordKind::Facts: return facts_record(rng);
  }
  return {};
}

RecordKind kind_for(Domain domain, Rng& rng) {
  switch (domain) {
    case Domain::Arith: return RecordKind::Arith;
    case Domain::Bracket: return RecordKind::Bracket;
    case Domain::Facts: return RecordKind::Facts;
    case Domain::General: return static_cast<RecordKind>(rng.below(4));
  }
  return RecordKind::Prose;
}

// Records are appended until the next one would not fit; a record that alone
// exceeds the budget is redrawn.
TokenSequence fill_sequence(RecordKind kind, Rng& rng, std::size_t max_tokens) {
  TokenSequence seq;
  for (int misses = 0; misses < 4;) {
    Record r = make_record(kind, rng);
    if (seq.size() + r.size() > max_tokens) {
      ++misses;
      continue;
    }
    seq.insert(seq.end(), r.begin(), r.end());
  }
  return seq;
}

}  // namespace

std::string_view domain_name(Domain domain) {
  switch (domain) {
    case Domain::Arith: return "arith";
    case Domain::Bracket: return "bracket";
    case Domain::Facts: return "facts";
    case Domain::General: return "general";
  }
  return "?";
}

Domain parse_domain(std::string_view name) {
  for (Domain d : kAllDomains) {
    if (domain_name(d) == name) return d;
  }
  fail(ErrorKind::InvalidArgument, "unknown domain '" + std::string(name) + "'");
}

namespace vocab {

std::string token_text(Token t) {
  static const char* const open[] = {"(", "[", "{", "<"};
  static const char* const close[] = {")", "]", "}", ">"};
  if (t == kBos) return "<s>";
  if (t == kSep) return ";";
  if (t >= kDigit0 && t < kDigit0 + 10) return std::to_string(t - kDigit0);
  if (t == kPlus) return "+";
  if (t == kMinus) return "-";
  if (t == kEquals) return "=";
  if (t >= kOpen0 && t < kClose0) return open[t - kOpen0];
  if (t >= kClose0 && t < kIdent0) return close[t - kClose0];
  if (t >= kIdent0 && t < kEntity0) return std::string(1, static_cast<char>('a' + (t - kIdent0)));
  if (t >= kEntity0 && t < kRelation0) return "e" + std::to_string(t - kEntity0);
  if (t >= kRelation0 && t < kValue0) return "R" + std::to_string(t - kRelation0);
  if (t >= kValue0 && t < kWord0) return "v" + std::to_string(t - kValue0);
  if (t >= kWord0 && t < static_cast<Token>(kSize)) return "w" + std::to_string(t - kWord0);
  return "?" + std::to_string(t);
}

std::string decode(std::span<const Token> tokens) {
  std::string out;
  for (Token t : tokens) {
    if (!out.empty()) out += ' ';
    out += token_text(t);
  }
  return out;
}

TokenSequence encode(std::string_view text) {
  TokenSequence out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] == ' ') {
      ++pos;
      continue;
    }
    const std::size_t end = std::min(text.find(' ', pos), text.size());
    const std::string_view piece = text.substr(pos, end - pos);
    Token found = static_cast<Token>(kSize);
    for (Token t = 0; t < static_cast<Token>(kSize); ++t) {
      if (token_text(t) == piece) found = t;
    }
    require(found < static_cast<Token>(kSize), ErrorKind::InvalidArgument,
            "unknown token '" + std::string(piece) + "'");
    out.push_back(found);
    pos = end;
  }
  return out;
}

}  // namespace vocab

TokenSequence encode_number(int value) {
  TokenSequence out;
  if (value < 0) out.push_back(vocab::kMinus);
  for (char c : std::to_string(value < 0 ? -value : value)) {
    out.push_back(vocab::kDigit0 + static_cast<Token>(c - '0'));
  }
  return out;
}

std::size_t fact_value(std::size_t entity, std::size_t relation) {
  return static_cast<std::size_t>(keyed_uniform(kWorldSeed, entity, relation) *
                                  static_cast<double>(vocab::kValues));
}

DomainCorpus gen_corpus(Domain domain, std::uint64_t seed, std::size_t n_sequences,
                        std::size_t max_tokens) {
  require(max_tokens >= 24, ErrorKind::InvalidArgument,
          "corpus sequences need at least 24 tokens to hold a record");
  DomainCorpus corpus{domain, seed, {}};
  Rng rng(seed ^ fnv1a64(domain_name(domain)));
  corpus.sequences.reserve(n_sequences);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    corpus.sequences.push_back(fill_sequence(kind_for(domain, rng), rng, max_tokens));
  }
  return corpus;
}

std::vector<PromptExample> gen_prompts(Domain domain, std::uint64_t seed, std::size_t n) {
  require(domain == Domain::Arith || domain == Domain::Facts, ErrorKind::InvalidArgument,
          "exact-match prompts exist for arith and facts only");
  Rng rng(seed ^ fnv1a64("prompts") ^ fnv1a64(domain_name(domain)));
  const RecordKind kind = domain == Domain::Arith ? RecordKind::Arith : RecordKind::Facts;
  std::vector<PromptExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    PromptExample ex;
    ex.domain = domain;
    const std::size_t context = rng.below(3);
    for (std::size_t c = 0; c < context; ++c) {
      const Record r = make_record(kind, rng);
      ex.prompt.insert(ex.prompt.end(), r.begin(), r.end());
    }
    const Record query =
        kind == RecordKind::Arith ? arith_record(rng, &ex.answer) : facts_record(rng, &ex.answer);
    ex.prompt.insert(ex.prompt.end(), query.begin(), query.end());
    out.push_back(std::move(ex));
  }
  return out;
}

double ngram_overlap(const DomainCorpus& a, const DomainCorpus& b, std::size_t n) {
  auto grams = [n](const DomainCorpus& c) {
    std::set<TokenSequence> out;
    for (const auto& s : c.sequences) {
      for (std::size_t i = 0; i + n <= s.size(); ++i) {
        out.emplace(s.begin() + static_cast<std::ptrdiff_t>(i),
                    s.begin() + static_cast<std::ptrdiff_t>(i + n));
      }
    }
    return out;
  };
  const auto ga = grams(a), gb = grams(b);
  if (ga.empty() || gb.empty()) return 0.0;
  std::size_t shared = 0;
  for (const auto& g : ga) shared += gb.contains(g);
  return static_cast<double>(shared) / static_cast<double>(std::min(ga.size(), gb.size()));
}

}  // namespace moe
