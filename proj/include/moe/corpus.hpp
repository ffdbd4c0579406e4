#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moe/transformer.hpp"

namespace moe {

enum class Domain { Arith, Bracket, Facts, General };

inline constexpr std::array<Domain, 4> kAllDomains{Domain::Arith, Domain::Bracket, Domain::Facts,
                                                   Domain::General};
// Domains with a dedicated expert.
inline constexpr std::array<Domain, 3> kExpertDomains{Domain::Arith, Domain::Bracket,
                                                      Domain::Facts};

std::string_view domain_name(Domain domain);
Domain parse_domain(std::string_view name);

// Shared synthetic vocabulary of 64 ids.
namespace vocab {

inline constexpr std::size_t kSize = 64;
inline constexpr Token kBos = 0;
inline constexpr Token kSep = 1;       // ";" ends every record
inline constexpr Token kDigit0 = 2;    // 2..11 are "0".."9"
inline constexpr Token kPlus = 12;
inline constexpr Token kMinus = 13;
inline constexpr Token kEquals = 14;
inline constexpr Token kOpen0 = 15;    // ( [ { <
inline constexpr Token kClose0 = 19;   // ) ] } >
inline constexpr Token kIdent0 = 23;   // a..h
inline constexpr Token kEntity0 = 31;  // e0..e7, two per entity name
inline constexpr Token kRelation0 = 39;
inline constexpr Token kValue0 = 43;
inline constexpr Token kWord0 = 53;

inline constexpr std::size_t kBracketKinds = 4;
inline constexpr std::size_t kIdents = 8;
inline constexpr std::size_t kEntityParts = 8;
inline constexpr std::size_t kRelations = 4;
inline constexpr std::size_t kValues = 10;
inline constexpr std::size_t kWords = 11;

std::string token_text(Token token);
std::string decode(std::span<const Token> tokens);
// Inverse of decode: space-separated token texts.
TokenSequence encode(std::string_view text);

}  // namespace vocab

// Arithmetic records are "a op b = result ;" with a, b in [0, kArithMax].
inline constexpr int kArithMax = 19;
inline constexpr std::size_t kDefaultSequenceTokens = 40;

struct DomainCorpus {
  Domain domain = Domain::General;
  std::uint64_t seed = 0;
  std::vector<TokenSequence> sequences;
};

// Sequences of whole records, each at most max_tokens long. General sequences
// are each drawn from one of prose, arith, bracket or facts with equal odds.
DomainCorpus gen_corpus(Domain domain, std::uint64_t seed, std::size_t n_sequences,
                        std::size_t max_tokens = kDefaultSequenceTokens);

// Held-out exact-match item: the model sees prompt (no BOS) and must continue
// with answer, which ends with the record separator.
struct PromptExample {
  Domain domain = Domain::Arith;
  TokenSequence prompt;
  TokenSequence answer;
};

// Arith and facts only: zero to two complete records of context, then a query.
std::vector<PromptExample> gen_prompts(Domain domain, std::uint64_t seed, std::size_t n);

TokenSequence encode_number(int value);
// The value a facts corpus attaches to (entity, relation); fixed for all seeds.
std::size_t fact_value(std::size_t entity, std::size_t relation);
inline constexpr std::size_t kEntities = vocab::kEntityParts * vocab::kEntityParts;

// |A ∩ B| / min(|A|, |B|) over the sets of n-grams of two corpora.
double ngram_overlap(const DomainCorpus& a, const DomainCorpus& b, std::size_t n);

}  // namespace moe
