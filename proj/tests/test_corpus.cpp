#include <doctest.h>

#include <map>
#include <optional>

#include "moe/corpus.hpp"
#include "moe/error.hpp"

using namespace moe;

namespace {

std::vector<TokenSequence> split_records(const TokenSequence& seq) {
  std::vector<TokenSequence> out(1);
  for (Token t : seq) {
    out.back().push_back(t);
    if (t == vocab::kSep) out.emplace_back();
  }
  out.pop_back();
  return out;
}

// Parses "[-]digits" starting at pos; independent of encode_number.
std::optional<int> read_int(const TokenSequence& r, std::size_t& pos) {
  bool neg = false;
  if (pos < r.size() && r[pos] == vocab::kMinus) {
    neg = true;
    ++pos;
  }
  int v = 0;
  std::size_t digits = 0;
  while (pos < r.size() && r[pos] >= vocab::kDigit0 && r[pos] < vocab::kDigit0 + 10) {
    v = v * 10 + (r[pos] - vocab::kDigit0);
    ++pos;
    ++digits;
  }
  if (digits == 0) return std::nullopt;
  return neg ? -v : v;
}

bool arith_record_ok(const TokenSequence& r) {
  std::size_t pos = 0;
  const auto a = read_int(r, pos);
  if (!a || pos >= r.size()) return false;
  const Token op = r[pos++];
  if (op != vocab::kPlus && op != vocab::kMinus) return false;
  const auto b = read_int(r, pos);
  if (!b || pos >= r.size() || r[pos++] != vocab::kEquals) return false;
  const auto c = read_int(r, pos);
  if (!c || pos + 1 != r.size() || r[pos] != vocab::kSep) return false;
  if (*a < 0 || *b < 0 || *a > kArithMax || *b > kArithMax) return false;
  return *c == (op == vocab::kPlus ? *a + *b : *a - *b);
}

}  // namespace

TEST_CASE("corpora are deterministic per seed and differ across seeds") {
  for (Domain d : kAllDomains) {
    CAPTURE(std::string(domain_name(d)));
    const auto a = gen_corpus(d, 7, 50);
    const auto b = gen_corpus(d, 7, 50);
    CHECK(a.sequences == b.sequences);
    CHECK(gen_corpus(d, 8, 50).sequences != a.sequences);
  }
}

TEST_CASE("sequences fit the length budget and end on a record boundary") {
  for (Domain d : kAllDomains) {
    for (const auto& s : gen_corpus(d, 3, 200).sequences) {
      REQUIRE(!s.empty());
      CHECK(s.size() <= kDefaultSequenceTokens);
      CHECK(s.back() == vocab::kSep);
      for (Token t : s) CHECK(t < vocab::kSize);
    }
  }
}

TEST_CASE("every arith record evaluates correctly") {
  std::size_t records = 0;
  for (const auto& s : gen_corpus(Domain::Arith, 11, 300).sequences) {
    for (const auto& r : split_records(s)) {
      CAPTURE(vocab::decode(r));
      CHECK(arith_record_ok(r));
      ++records;
    }
  }
  CHECK(records > 1000);
}

TEST_CASE("arith prompts are a record prefix whose answer completes it") {
  for (const auto& ex : gen_prompts(Domain::Arith, 5, 200)) {
    const auto records = split_records(ex.prompt);
    std::size_t consumed = 0;
    for (const auto& r : records) {
      CHECK(arith_record_ok(r));
      consumed += r.size();
    }
    TokenSequence tail(ex.prompt.begin() + static_cast<long>(consumed), ex.prompt.end());
    tail.insert(tail.end(), ex.answer.begin(), ex.answer.end());
    CHECK(arith_record_ok(tail));
  }
}

TEST_CASE("facts map each key to exactly one value") {
  std::map<std::pair<Token, std::pair<Token, Token>>, Token> seen;
  std::size_t conflicts = 0;
  auto record = [&](const TokenSequence& r) {
    REQUIRE(r.size() == 5);
    const auto key = std::make_pair(r[0], std::make_pair(r[1], r[2]));
    auto [it, inserted] = seen.emplace(key, r[3]);
    if (!inserted && it->second != r[3]) ++conflicts;
  };
  for (std::uint64_t seed : {1, 2, 3}) {
    for (const auto& s : gen_corpus(Domain::Facts, seed, 300).sequences) {
      for (const auto& r : split_records(s)) record(r);
    }
  }
  for (const auto& ex : gen_prompts(Domain::Facts, 9, 200)) {
    TokenSequence full(ex.prompt.end() - 3, ex.prompt.end());
    full.insert(full.end(), ex.answer.begin(), ex.answer.end());
    record(full);
  }
  CHECK(conflicts == 0);
  CHECK(seen.size() > 200);
}

TEST_CASE("arith and bracket corpora share under 5% of their 4-grams") {
  const auto arith = gen_corpus(Domain::Arith, 1, 500);
  const auto bracket = gen_corpus(Domain::Bracket, 1, 500);
  CHECK(ngram_overlap(arith, bracket, 4) < 0.05);
  CHECK(ngram_overlap(arith, arith, 4) == doctest::Approx(1.0));
}

TEST_CASE("general corpus mixes all record kinds") {
  bool digits = false, brackets = false, entities = false, words = false;
  for (const auto& s : gen_corpus(Domain::General, 2, 200).sequences) {
    for (Token t : s) {
      digits |= t >= vocab::kDigit0 && t < vocab::kPlus;
      brackets |= t >= vocab::kOpen0 && t < vocab::kIdent0;
      entities |= t >= vocab::kEntity0 && t < vocab::kRelation0;
      words |= t >= vocab::kWord0;
    }
  }
  CHECK((digits && brackets && entities && words));
}

TEST_CASE("unknown domain names are rejected") {
  CHECK(parse_domain("facts") == Domain::Facts);
  CHECK_THROWS_AS(parse_domain("code"), Error);
  CHECK_THROWS_AS(gen_prompts(Domain::Bracket, 1, 3), Error);
}

TEST_CASE("decode and encode are inverse over the vocabulary") {
  TokenSequence all;
  for (Token t = 0; t < static_cast<Token>(vocab::kSize); ++t) all.push_back(t);
  CHECK(vocab::encode(vocab::decode(all)) == all);
  CHECK(vocab::encode("1 2 + 3 = 1 5 ;") ==
        TokenSequence{3, 4, vocab::kPlus, 5, vocab::kEquals, 3, 7, vocab::kSep});
  CHECK_THROWS_AS(vocab::encode("1 2 x"), Error);
}
