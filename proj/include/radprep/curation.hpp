#pragma once

// Whitespace normalization, exclusion rules, instruction-pair synthesis and
// the deterministic train/eval split.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <variant>
#include <vector>

#include "radprep/common.hpp"
#include "radprep/corpus.hpp"

namespace radprep::curation {

enum class RejectionKind { MissingFindings, MissingImpression, FindingsTooShort };

std::string_view to_string(RejectionKind kind);

struct RejectionReason {
  RejectionKind kind;
  std::string detail;

  bool operator==(const RejectionReason&) const = default;
};

struct InstructionPair {
  std::string record_id;
  std::string instruction;
  std::string input;
  std::string output;
  int instruction_index = 0;
  std::optional<int> prepend_index;
  std::uint64_t seed_used = 0;

  bool operator==(const InstructionPair&) const = default;
};

enum class Bucket { Train, Eval };

struct SplitAssignment {
  std::string record_id;
  Bucket bucket = Bucket::Train;

  bool operator==(const SplitAssignment&) const = default;
};

inline constexpr std::size_t kInstructionCount = 20;
inline constexpr std::size_t kPrependCount = 10;

const std::vector<std::string>& default_instructions();
const std::vector<std::string>& default_prepends();

struct CurationConfig {
  std::vector<std::string> instruction_catalog = default_instructions();
  std::vector<std::string> prepend_catalog = default_prepends();
  double prepend_probability = 0.5;
  std::size_t min_findings_words = 10;
  double split_eval_fraction = 0.001;
  std::uint64_t master_seed = 0;

  /// Throws ValidationError on catalog sizes other than 20/10 or
  /// probabilities outside [0, 1].
  void validate() const;
};

/// One entry per non-blank line; throws ValidationError unless exactly
/// `expected` entries are present.
std::vector<std::string> load_catalog(const fs::path& path, std::size_t expected);

/// Each maximal whitespace run becomes one space when it holds no line
/// break, otherwise its line breaks capped at two (so 3+ newlines collapse
/// to 2 and blanks around a break vanish). Then trims. CR and CRLF count as
/// one line break; \f and \v count as spaces.
std::string normalize_whitespace(std::string_view text);

std::size_t word_count(std::string_view text);

/// Checks run in order MissingFindings, MissingImpression, FindingsTooShort;
/// the first failure is returned. nullopt means the report passes.
std::optional<RejectionReason> filter_report(const corpus::ReportDoc& doc, const CurationConfig& config);

std::uint64_t record_seed(std::uint64_t master_seed, std::string_view record_id);

/// "Exam: {exam_code}\n\n{findings}"
std::string format_input(std::string_view exam_code, std::string_view findings);

InstructionPair build_pair(const corpus::ReportDoc& doc, const CurationConfig& config);

/// The round(N * fraction) ids with the smallest seeded hash go to Eval
/// (half-up rounding). Assignments come back in input order.
std::vector<SplitAssignment> split_dataset(std::span<const std::string> record_ids, const CurationConfig& config);

/// Explicit holdout: ids listed in `holdout` go to Eval, the rest to Train.
std::vector<SplitAssignment> split_with_holdout(std::span<const std::string> record_ids,
                                                const std::unordered_set<std::string>& holdout);

std::string to_json_line(const InstructionPair& pair);
InstructionPair pair_from_json_line(const std::string& line, std::size_t line_number);

std::size_t write_pairs_jsonl(std::span<const InstructionPair> pairs, const fs::path& path);
std::vector<InstructionPair> read_pairs_jsonl(const fs::path& path);

}  // namespace radprep::curation
