#include <random>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "radprep/token_cache.hpp"
#include "radprep/tokenizer.hpp"
#include "support.hpp"

using namespace radprep;
using namespace radprep::packing;
using testsupport::TempDir;

namespace {

std::string random_text(std::mt19937_64& rng, std::size_t n) {
  static const std::string alphabet = "abcdef gh\n\tXYZ.,\xC3\xA9";
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[pick(rng)];
  return s;
}

// Counts encode() calls so tests can tell hits from recomputation.
class CountingTokenizer final : public TokenizerProvider {
 public:
  explicit CountingTokenizer(std::string id) : id_(std::move(id)) {}
  const std::string& id() const override { return id_; }
  std::vector<TokenId> encode(std::string_view text) const override {
    ++calls;
    std::vector<TokenId> out;
    for (const unsigned char c : text) {
      if (c != ' ') out.push_back(c);
    }
    return out;
  }
  std::string decode(const std::vector<TokenId>&) const override { return {}; }
  mutable int calls = 0;

 private:
  std::string id_;
};

}  // namespace

TEST_CASE("whitespace tokenizer") {
  const std::vector<std::string> texts{"a b a"};
  const auto tok = WhitespaceTokenizer::fit(texts);
  CHECK(tok.vocabulary() == std::vector<std::string>{"a", "b"});
  CHECK(tok.encode("a b a") == std::vector<TokenId>{1, 2, 1});
  CHECK(tok.encode("  a\n\tb ") == std::vector<TokenId>{1, 2});
  CHECK(tok.encode("c") == std::vector<TokenId>{tok.unk()});
  CHECK(tok.unk() == 3);
  CHECK(tok.eos() == 4);
  CHECK(tok.encode("").empty());
  CHECK(tok.decode({1, 2, 1}) == "a b a");
  CHECK(tok.decode({0, 1, 4, 2}) == "a b");
  CHECK_THROWS_AS(WhitespaceTokenizer({"a", "a"}), ValidationError);
  CHECK_THROWS_AS(WhitespaceTokenizer({"a b"}), ValidationError);
}

TEST_CASE("tokenizer ids track the vocabulary") {
  const auto a = WhitespaceTokenizer({"x", "y"});
  const auto b = WhitespaceTokenizer({"x", "y"});
  const auto c = WhitespaceTokenizer({"y", "x"});
  CHECK(a.id() == b.id());
  CHECK(a.id() != c.id());
}

TEST_CASE("BPE is lossless and learns frequent pairs") {
  std::mt19937_64 rng(21);
  std::vector<std::string> corpus;
  for (int i = 0; i < 50; ++i) corpus.push_back("the lungs are clear the heart is normal " + random_text(rng, 20));
  const auto bpe = BpeTokenizer::train(corpus, 100);
  CHECK(bpe.merges().size() == 100);
  const std::string sample = "the lungs are clear";
  const auto ids = bpe.encode(sample);
  CHECK(ids.size() < sample.size());
  CHECK(bpe.decode(ids) == sample);
  for (int t = 0; t < 300; ++t) {
    const auto s = random_text(rng, static_cast<std::size_t>(t % 60));
    CHECK(bpe.decode(bpe.encode(s)) == s);
  }
  CHECK(bpe.encode("").empty());
  CHECK(BpeTokenizer::train(corpus, 100).id() == bpe.id());
}

TEST_CASE("BPE with no merges is plain bytes") {
  const BpeTokenizer bpe({});
  CHECK(bpe.encode("ab") == std::vector<TokenId>{3 + 'a', 3 + 'b'});
  CHECK_THROWS_AS(BpeTokenizer({{3, 300}}), ValidationError);
  CHECK_THROWS_AS(BpeTokenizer({{3, 4}, {3, 4}}), ValidationError);
}

TEST_CASE("BPE merges file round trip") {
  TempDir dir;
  const auto bpe = BpeTokenizer::train({"aaab aaab aab"}, 5);
  bpe.save(dir / "m.txt");
  const auto again = BpeTokenizer::load(dir / "m.txt");
  CHECK(again.merges() == bpe.merges());
  CHECK(again.id() == bpe.id());
  testsupport::write_file(dir / "bad.txt", "something else\n");
  CHECK_THROWS_AS(BpeTokenizer::load(dir / "bad.txt"), ValidationError);
  CHECK_THROWS_AS(BpeTokenizer::load(dir / "missing.txt"), IoError);
}

TEST_CASE("token cache hit, miss and provider separation") {
  TempDir dir;
  CountingTokenizer p1("p1"), p2("p2");
  CacheCounters counters;
  {
    TokenCache cache(dir / "cache");
    const auto a = tokenize_cached("r", "abc", p1, &cache, &counters);
    const auto b = tokenize_cached("r", "abc", p1, &cache, &counters);
    CHECK(a == b);
    CHECK(p1.calls == 1);
    CHECK(counters.hits == 1);
    CHECK(counters.misses == 1);
    CHECK(counters.hit_rate() == doctest::Approx(0.5));

    tokenize_cached("r", "abc", p2, &cache, &counters);
    CHECK(p2.calls == 1);
    CHECK(cache.entry_count("p1") == 1);
    CHECK(cache.entry_count("p2") == 1);
    CHECK(TokenCache::key("p1", "abc") != TokenCache::key("p2", "abc"));
  }
  const auto manifest = nlohmann::json::parse(testsupport::read_file(dir / "cache/manifest.json"));
  CHECK(manifest["tokenizers"]["p1"] == 1);
  CHECK(manifest["tokenizers"]["p2"] == 1);

  // A reopened cache keeps its entries and counts.
  TokenCache cache(dir / "cache");
  CHECK(cache.entry_count("p1") == 1);
  tokenize_cached("r", "abc", p1, &cache, &counters);
  CHECK(p1.calls == 1);
}

TEST_CASE("entry layout is the documented binary format") {
  TempDir dir;
  TokenCache cache(dir.path());
  cache.store("t", "x", {7, -1});
  const auto key = TokenCache::key("t", "x");
  const auto bytes = testsupport::read_file(dir.path() / "entries" / key.substr(0, 2) / (key + ".tok"));
  CHECK(bytes == std::string("RPTK\x02\0\0\0\x07\0\0\0\xFF\xFF\xFF\xFF", 16));
  CHECK(cache.lookup("t", "x") == std::vector<TokenId>{7, -1});
}

TEST_CASE("a corrupt entry is a warning and falls back to encoding") {
  TempDir dir;
  CountingTokenizer p("p");
  TokenCache cache(dir.path());
  CacheCounters counters;
  tokenize_cached("r", "hello", p, &cache, &counters);
  const auto key = TokenCache::key("p", "hello");
  testsupport::write_file(dir.path() / "entries" / key.substr(0, 2) / (key + ".tok"), "junk");
  CHECK_THROWS_AS(cache.lookup("p", "hello"), CacheIoError);
  const auto rec = tokenize_cached("r", "hello", p, &cache, &counters);
  CHECK(rec.token_ids == p.encode("hello"));
  CHECK(counters.io_warnings == 1);
  // The fallback rewrote the entry.
  CHECK(cache.lookup("p", "hello") == p.encode("hello"));
}

TEST_CASE("a corrupt manifest is rejected") {
  TempDir dir;
  testsupport::write_file(dir / "manifest.json", "{oops");
  CHECK_THROWS_AS(TokenCache(dir.path()), CacheIoError);
}

TEST_CASE("empty text is an error and is never cached") {
  TempDir dir;
  CountingTokenizer p("p");
  TokenCache cache(dir.path());
  CHECK_THROWS_AS(tokenize_cached("empty", "   ", p, &cache), EmptyText);
  CHECK(cache.entry_count("p") == 0);
}

TEST_CASE("cached results equal direct encoding for 1,000 texts") {
  TempDir dir;
  std::mt19937_64 rng(8);
  std::vector<std::string> texts;
  for (int i = 0; i < 1000; ++i) texts.push_back("w " + random_text(rng, 1 + i % 80));
  const auto bpe = BpeTokenizer::train(texts, 50);
  TokenCache cache(dir.path());
  for (const auto& t : texts) tokenize_cached("r", t, bpe, &cache);
  CacheCounters counters;
  for (const auto& t : texts) CHECK(tokenize_cached("r", t, bpe, &cache, &counters).token_ids == bpe.encode(t));
  CHECK(counters.misses == 0);
}
