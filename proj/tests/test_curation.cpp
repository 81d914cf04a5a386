#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "radprep/curation.hpp"
#include "support.hpp"

using namespace radprep;
using namespace radprep::curation;
using corpus::ReportDoc;

namespace {

std::string words(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " w" : "w") + std::to_string(i);
  return s;
}

ReportDoc doc_with(std::string findings, std::string impression, std::string id = "r1") {
  return ReportDoc{std::move(id), "CT CHEST", std::move(findings), std::move(impression), false};
}

}  // namespace

TEST_CASE("normalize_whitespace") {
  CHECK(normalize_whitespace("No  acute\t findings.  ") == "No acute findings.");
  CHECK(normalize_whitespace("already clean") == "already clean");
  CHECK(normalize_whitespace("a\n\n\n\nb") == "a\n\nb");
  CHECK(normalize_whitespace("a\r\n\r\n\r\nb") == "a\n\nb");
  CHECK(normalize_whitespace("a \n b") == "a\nb");
  CHECK(normalize_whitespace("a\n\nb") == "a\n\nb");
  CHECK(normalize_whitespace("\f\v  ") == "");
  CHECK(normalize_whitespace("") == "");
}

TEST_CASE("normalize_whitespace is idempotent and keeps non-whitespace order") {
  std::mt19937_64 rng(17);
  const std::string alphabet = "ab. \t\n\r\f";
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1), len(0, 40);
  for (int t = 0; t < 5000; ++t) {
    std::string s;
    const auto n = len(rng);
    for (std::size_t i = 0; i < n; ++i) s += alphabet[pick(rng)];
    const auto once = normalize_whitespace(s);
    CHECK(normalize_whitespace(once) == once);
    std::string a, b;
    for (const char c : s) {
      if (!std::isspace(static_cast<unsigned char>(c))) a += c;
    }
    for (const char c : once) {
      if (!std::isspace(static_cast<unsigned char>(c))) b += c;
    }
    CHECK(a == b);
    CHECK(once.find("  ") == std::string::npos);
    CHECK(once.find("\n\n\n") == std::string::npos);
  }
}

TEST_CASE("word_count") {
  CHECK(word_count("") == 0);
  CHECK(word_count("one two  three") == 3);
  CHECK(word_count("5.5 cm mass, right lobe.") == 5);
  CHECK(word_count(" \n\t ") == 0);
}

TEST_CASE("filter_report applies the rules in order") {
  const CurationConfig cfg;
  CHECK(filter_report(doc_with(words(9), "Imp."), cfg)->kind == RejectionKind::FindingsTooShort);
  CHECK(filter_report(doc_with(words(9), "Imp."), cfg)->detail == "9 words");
  CHECK_FALSE(filter_report(doc_with(words(10), "Imp."), cfg).has_value());
  CHECK(filter_report(doc_with(words(50), ""), cfg)->kind == RejectionKind::MissingImpression);
  CHECK(filter_report(doc_with("", ""), cfg)->kind == RejectionKind::MissingFindings);
  CHECK(filter_report(doc_with(words(3), ""), cfg)->kind == RejectionKind::MissingImpression);
}

TEST_CASE("build_pair") {
  CurationConfig cfg;
  cfg.master_seed = 1234;
  const auto doc = doc_with(words(12), "No acute disease.");
  SUBCASE("deterministic") { CHECK(build_pair(doc, cfg) == build_pair(doc, cfg)); }
  SUBCASE("input template and referential integrity") {
    const auto p = build_pair(doc, cfg);
    CHECK(p.input == "Exam: CT CHEST\n\n" + words(12));
    CHECK(p.instruction == cfg.instruction_catalog.at(static_cast<std::size_t>(p.instruction_index)));
    CHECK(p.seed_used == record_seed(1234, "r1"));
    CHECK(p.output.ends_with("No acute disease."));
    if (p.prepend_index) {
      CHECK(p.output == cfg.prepend_catalog.at(static_cast<std::size_t>(*p.prepend_index)) + " No acute disease.");
    }
  }
  SUBCASE("prepend probability 0 never prepends") {
    cfg.prepend_probability = 0.0;
    for (int i = 0; i < 200; ++i) {
      const auto p = build_pair(doc_with(words(12), "Imp.", "id" + std::to_string(i)), cfg);
      CHECK_FALSE(p.prepend_index.has_value());
      CHECK(p.output == "Imp.");
    }
  }
  SUBCASE("prepend probability 1 always prepends") {
    cfg.prepend_probability = 1.0;
    for (int i = 0; i < 200; ++i) {
      CHECK(build_pair(doc_with(words(12), "Imp.", "id" + std::to_string(i)), cfg).prepend_index.has_value());
    }
  }
  SUBCASE("the seed changes the draw") {
    std::set<int> seen;
    for (std::uint64_t s = 0; s < 50; ++s) {
      cfg.master_seed = s;
      seen.insert(build_pair(doc, cfg).instruction_index);
    }
    CHECK(seen.size() > 5);
  }
}

TEST_CASE("sampling frequencies over 10,000 records") {
  CurationConfig cfg;
  cfg.master_seed = 7;
  std::size_t prepended = 0;
  std::map<int, std::size_t> hist, prepend_hist;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = build_pair(doc_with(words(12), "Imp.", "rec-" + std::to_string(i)), cfg);
    ++hist[p.instruction_index];
    if (p.prepend_index) {
      ++prepended;
      ++prepend_hist[*p.prepend_index];
    }
  }
  const double rate = static_cast<double>(prepended) / n;
  CHECK(rate >= 0.47);
  CHECK(rate <= 0.53);
  CHECK(hist.size() == 20);
  for (const auto& [idx, count] : hist) {
    const double f = static_cast<double>(count) / n;
    CHECK(f >= 0.03);
    CHECK(f <= 0.07);
  }
  CHECK(prepend_hist.size() == 10);
}

TEST_CASE("split_dataset") {
  CurationConfig cfg;
  std::vector<std::string> ids;
  for (int i = 0; i < 10000; ++i) ids.push_back("id-" + std::to_string(i));
  SUBCASE("N = 10,000 at 0.1% gives 10 eval") {
    const auto a = split_dataset(ids, cfg);
    REQUIRE(a.size() == ids.size());
    std::size_t eval = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].record_id == ids[i]);
      eval += a[i].bucket == Bucket::Eval;
    }
    CHECK(eval == 10);
    CHECK(split_dataset(ids, cfg) == a);
  }
  SUBCASE("N = 1 gives no eval") {
    const auto a = split_dataset(std::vector<std::string>{"only"}, cfg);
    CHECK(a.size() == 1);
    CHECK(a[0].bucket == Bucket::Train);
  }
  SUBCASE("half-up rounding") {
    cfg.split_eval_fraction = 0.5;
    const std::vector<std::string> three{"a", "b", "c"};
    std::size_t eval = 0;
    for (const auto& s : split_dataset(three, cfg)) eval += s.bucket == Bucket::Eval;
    CHECK(eval == 2);
  }
  SUBCASE("eval set is the smallest seeded hashes") {
    cfg.split_eval_fraction = 0.01;
    cfg.master_seed = 3;
    const auto a = split_dataset(ids, cfg);
    std::vector<std::pair<std::uint64_t, std::string>> keyed;
    for (const auto& id : ids) keyed.emplace_back(stable_hash64(3, "split\x1f" + id), id);
    std::sort(keyed.begin(), keyed.end());
    std::set<std::string> expected;
    for (std::size_t i = 0; i < 100; ++i) expected.insert(keyed[i].second);
    std::set<std::string> actual;
    for (const auto& s : a) {
      if (s.bucket == Bucket::Eval) actual.insert(s.record_id);
    }
    CHECK(actual == expected);
  }
  SUBCASE("explicit holdout") {
    const auto a = split_with_holdout(std::vector<std::string>{"a", "b", "c"}, {"b", "zz"});
    CHECK(a[0].bucket == Bucket::Train);
    CHECK(a[1].bucket == Bucket::Eval);
    CHECK(a[2].bucket == Bucket::Train);
  }
}

TEST_CASE("CurationConfig validation and catalog loading") {
  CurationConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(default_instructions().size() == kInstructionCount);
  CHECK(default_prepends().size() == kPrependCount);
  cfg.prepend_probability = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = {};
  cfg.instruction_catalog.pop_back();
  CHECK_THROWS_AS(cfg.validate(), ValidationError);

  testsupport::TempDir dir;
  std::string body;
  for (int i = 0; i < 10; ++i) body += "Prepend " + std::to_string(i) + "\n\n";
  testsupport::write_file(dir / "p.txt", body);
  CHECK(load_catalog(dir / "p.txt", 10).size() == 10);
  CHECK_THROWS_AS(load_catalog(dir / "p.txt", 20), ValidationError);
  CHECK_THROWS_AS(load_catalog(dir / "none.txt", 20), IoError);
}

TEST_CASE("pairs JSON-Lines round trip") {
  testsupport::TempDir dir;
  SUBCASE("zero pairs") {
    CHECK(write_pairs_jsonl(std::span<const InstructionPair>{}, dir / "p.jsonl") == 0);
    CHECK(read_pairs_jsonl(dir / "p.jsonl").empty());
  }
  SUBCASE("two pairs, one with quotes and newlines") {
    std::vector<InstructionPair> pairs{
        {"a", "Derive.", "Exam: CT\n\nx \"quoted\"", "In summary, \"ok\".", 3, 1, 99},
        {"b", "Write.", "Exam: MR\n\ny", "Fine.", 19, std::nullopt, 18446744073709551615ULL},
    };
    CHECK(write_pairs_jsonl(pairs, dir / "p.jsonl") == 2);
    CHECK(testsupport::count_lines(dir / "p.jsonl") == 2);
    CHECK(read_pairs_jsonl(dir / "p.jsonl") == pairs);
    CHECK(to_json_line(pairs[1]) ==
          R"({"instruction":"Write.","input":"Exam: MR\n\ny","output":"Fine.","record_id":"b","instruction_index":19,"prepend_index":null,"seed_used":18446744073709551615})");
  }
}
