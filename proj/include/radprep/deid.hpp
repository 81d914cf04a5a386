#pragma once

// Sentence-level de-identification: any sentence matched by a name pattern
// is dropped from the text.

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "radprep/common.hpp"
#include "radprep/corpus.hpp"

namespace radprep::deid {

struct SentenceSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // half-open

  std::string_view view(std::string_view text) const { return text.substr(begin, end - begin); }
  bool operator==(const SentenceSpan&) const = default;
};

/// Splits on '.', '!' or '?' followed by whitespace and an uppercase letter
/// (or end of text), and on blank lines. A period closing one of the fixed
/// abbreviations (Dr. Mr. Ms. Mrs. St. vs. e.g. i.e. No.) or a single
/// capital initial does not end a sentence.
std::vector<SentenceSpan> segment_sentences(std::string_view text);

class InvalidPattern : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NamePatternSet {
 public:
  /// Throws InvalidPattern if the list is empty, sizes differ, a pattern
  /// fails to compile, or a pattern matches the empty string.
  NamePatternSet(std::vector<std::string> patterns, std::vector<std::string> ids);
  ~NamePatternSet();
  NamePatternSet(NamePatternSet&&) noexcept;
  NamePatternSet& operator=(NamePatternSet&&) noexcept;

  static NamePatternSet defaults();

  /// One pattern per line; blank lines and lines starting with '#' are
  /// skipped. "id:<name> <regex>" sets an explicit id, otherwise the id is the
  /// 1-based line number.
  static NamePatternSet load(const fs::path& path);

  std::size_t size() const;
  const std::vector<std::string>& patterns() const;
  const std::vector<std::string>& ids() const;

  bool any_match(std::string_view text) const;
  /// Indices of every pattern with at least one match in `text`.
  std::vector<std::size_t> matching(std::string_view text) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct FlagResult {
  std::vector<bool> flags;
  /// One entry per (flagged span, pattern that matched in it).
  std::vector<std::string> fired;
};

FlagResult flag_name_sentences(std::string_view text, std::span<const SentenceSpan> spans,
                               const NamePatternSet& patterns);

struct DeidResult {
  std::string text;
  std::size_t removed_sentences = 0;
  std::vector<std::string> fired_patterns;
};

/// Drops flagged sentences and joins the survivors with single spaces. Text
/// with nothing flagged is returned unchanged. Repeats until no sentence is
/// flagged, so the result is a fixed point.
DeidResult deidentify_text(std::string_view text, const NamePatternSet& patterns);

struct DeidOutcome {
  corpus::ReportDoc doc;
  DeidResult findings;
  DeidResult impression;
};

DeidOutcome deidentify(const corpus::ReportDoc& doc, const NamePatternSet& patterns);

}  // namespace radprep::deid
