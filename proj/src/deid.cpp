#include "radprep/deid.hpp"

#include <boost/regex.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <optional>

namespace radprep::deid {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }
bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

bool iequal(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

// The word immediately before text[dot] is an abbreviation or initial.
bool period_is_abbreviation(std::string_view text, std::size_t dot) {
  std::size_t b = dot;
  while (b > 0 && !is_space(text[b - 1]) && text[b - 1] != '(' && text[b - 1] != '"') --b;
  const std::string_view word = text.substr(b, dot - b);
  if (word.empty()) return false;
  if (word.size() == 1 && is_upper(word[0])) return true;
  if (word == "No") return true;
  static constexpr std::array<std::string_view, 8> kAbbrev{"Dr", "Mr", "Ms", "Mrs", "St", "vs", "e.g", "i.e"};
  return std::any_of(kAbbrev.begin(), kAbbrev.end(), [&](std::string_view a) { return iequal(word, a); });
}

}  // namespace

std::vector<SentenceSpan> segment_sentences(std::string_view text) {
  std::vector<SentenceSpan> spans;
  const std::size_t n = text.size();
  std::size_t start = 0;

  auto emit = [&](std::size_t begin, std::size_t end) {
    while (begin < end && is_space(text[begin])) ++begin;
    while (end > begin && is_space(text[end - 1])) --end;
    if (begin < end) spans.push_back({begin, end});
  };

  std::size_t i = 0;
  while (i < n) {
    const char c = text[i];
    if (is_terminator(c)) {
      std::size_t j = i + 1;
      while (j < n && (is_terminator(text[j]) || is_closer(text[j]))) ++j;
      bool boundary = false;
      if (j == n) {
        boundary = true;
      } else if (is_space(text[j])) {
        std::size_t k = j;
        while (k < n && is_space(text[k])) ++k;
        boundary = k == n || is_upper(text[k]);
      }
      const bool lone_period = c == '.' && j == i + 1;
      if (boundary && lone_period && period_is_abbreviation(text, i)) boundary = false;
      if (boundary) {
        emit(start, j);
        start = j;
      }
      i = j;
      continue;
    }
    if (c == '\n') {
      // Blank line (only horizontal whitespace between two newlines).
      std::size_t k = i + 1;
      while (k < n && (text[k] == ' ' || text[k] == '\t' || text[k] == '\r')) ++k;
      if (k < n && text[k] == '\n') {
        emit(start, i);
        start = k;
        i = k;
        continue;
      }
    }
    ++i;
  }
  emit(start, n);
  return spans;
}

struct NamePatternSet::Impl {
  std::vector<std::string> sources;
  std::vector<std::string> ids;
  std::vector<boost::regex> compiled;
  std::optional<boost::regex> combined;
};

NamePatternSet::NamePatternSet(std::vector<std::string> patterns, std::vector<std::string> ids)
    : impl_(std::make_unique<Impl>()) {
  if (patterns.empty()) throw InvalidPattern("pattern set must not be empty");
  if (patterns.size() != ids.size()) throw InvalidPattern("pattern and id lists differ in length");
  impl_->compiled.reserve(patterns.size());
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    try {
      impl_->compiled.emplace_back(patterns[i], boost::regex::perl);
    } catch (const boost::regex_error& e) {
      throw InvalidPattern("pattern " + ids[i] + " does not compile: " + e.what());
    }
    if (boost::regex_search(std::string(), impl_->compiled.back())) {
      throw InvalidPattern("pattern " + ids[i] + " matches the empty string");
    }
  }
  // One alternation for the common no-match case. Patterns with
  // back-references would be renumbered, so they disable it.
  const bool has_backref = std::any_of(patterns.begin(), patterns.end(), [](const std::string& p) {
    return boost::regex_search(p, boost::regex(R"(\\[1-9]|\\g|\\k)"));
  });
  if (!has_backref) {
    std::string alt;
    for (std::size_t i = 0; i < patterns.size(); ++i) {
      if (i) alt += '|';
      alt += "(?:" + patterns[i] + ")";
    }
    try {
      impl_->combined.emplace(alt, boost::regex::perl | boost::regex::nosubs);
    } catch (const boost::regex_error&) {
      impl_->combined.reset();
    }
  }
  impl_->sources = std::move(patterns);
  impl_->ids = std::move(ids);
}

NamePatternSet::~NamePatternSet() = default;
NamePatternSet::NamePatternSet(NamePatternSet&&) noexcept = default;
NamePatternSet& NamePatternSet::operator=(NamePatternSet&&) noexcept = default;

NamePatternSet NamePatternSet::defaults() {
  // Title + one or two capitalized words.
  // Attribution phrase + capitalized word (optionally after a title).
  // "LASTNAME, Firstname".
  // Capitalized word + credential suffix.
  return NamePatternSet(
      {
          R"(\b(?:Dr|Mr|Ms|Mrs)\.\s*[A-Z][A-Za-z'\-]+(?:\s+[A-Z][A-Za-z'\-]+)?)",
          R"((?i:\b(?:dictated\s+by|signed\s+by|reviewed\s+by|discussed\s+with))\s+(?:(?:Dr|Mr|Ms|Mrs)\.\s*)?[A-Z][A-Za-z'\-]+)",
          R"(\b[A-Z][A-Za-z'\-]+,\s*[A-Z][a-z]+\b)",
          R"(\b[A-Z][A-Za-z'\-]+,\s*(?:M\.?D\.?|D\.?O\.?|RN|NP)(?![A-Za-z]))",
      },
      {"title_name", "attribution", "last_first", "credential"});
}

NamePatternSet NamePatternSet::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pattern file: " + path.string());
  std::vector<std::string> patterns, ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string_view t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (t.starts_with("id:")) {
      const auto sp = t.find_first_of(" \t");
      if (sp == std::string_view::npos || sp == 3) {
        throw InvalidPattern("line " + std::to_string(line_no) + ": id: prefix needs a name and a pattern");
      }
      ids.emplace_back(t.substr(3, sp - 3));
      patterns.emplace_back(trim(t.substr(sp)));
    } else {
      ids.push_back(std::to_string(line_no));
      patterns.emplace_back(t);
    }
  }
  return NamePatternSet(std::move(patterns), std::move(ids));
}

std::size_t NamePatternSet::size() const { return impl_->compiled.size(); }
const std::vector<std::string>& NamePatternSet::patterns() const { return impl_->sources; }
const std::vector<std::string>& NamePatternSet::ids() const { return impl_->ids; }

bool NamePatternSet::any_match(std::string_view text) const {
  if (impl_->combined) return boost::regex_search(text.begin(), text.end(), *impl_->combined);
  return std::any_of(impl_->compiled.begin(), impl_->compiled.end(),
                     [&](const boost::regex& re) { return boost::regex_search(text.begin(), text.end(), re); });
}

std::vector<std::size_t> NamePatternSet::matching(std::string_view text) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < impl_->compiled.size(); ++i) {
    if (boost::regex_search(text.begin(), text.end(), impl_->compiled[i])) out.push_back(i);
  }
  return out;
}

FlagResult flag_name_sentences(std::string_view text, std::span<const SentenceSpan> spans,
                               const NamePatternSet& patterns) {
  FlagResult r;
  r.flags.resize(spans.size(), false);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto sentence = spans[i].view(text);
    if (!patterns.any_match(sentence)) continue;
    r.flags[i] = true;
    for (const auto idx : patterns.matching(sentence)) r.fired.push_back(patterns.ids()[idx]);
  }
  return r;
}

DeidResult deidentify_text(std::string_view text, const NamePatternSet& patterns) {
  DeidResult result;
  result.text = std::string(text);
  while (true) {
    const auto spans = segment_sentences(result.text);
    auto flagged = flag_name_sentences(result.text, spans, patterns);
    const auto removed = static_cast<std::size_t>(std::count(flagged.flags.begin(), flagged.flags.end(), true));
    if (removed == 0) break;
    result.removed_sentences += removed;
    result.fired_patterns.insert(result.fired_patterns.end(), flagged.fired.begin(), flagged.fired.end());
    std::string joined;
    joined.reserve(result.text.size());
    for (std::size_t i = 0; i < spans.size(); ++i) {
      if (flagged.flags[i]) continue;
      if (!joined.empty()) joined += ' ';
      joined += spans[i].view(result.text);
    }
    result.text = std::move(joined);
  }
  return result;
}

DeidOutcome deidentify(const corpus::ReportDoc& doc, const NamePatternSet& patterns) {
  DeidOutcome out;
  out.findings = deidentify_text(doc.findings, patterns);
  out.impression = deidentify_text(doc.impression, patterns);
  out.doc = doc;
  out.doc.findings = out.findings.text;
  out.doc.impression = out.impression.text;
  return out;
}

}  // namespace radprep::deid
