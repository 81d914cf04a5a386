#pragma once

// Raw report ingestion: streaming CSV reader, the canonical JSON-Lines
// dataset, and findings/impression section extraction.

#include <concepts>
#include <cstddef>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "radprep/common.hpp"

namespace radprep::corpus {

struct RawRecord {
  std::string record_id;
  std::string exam_code;
  std::string report_text;
  std::optional<std::string> impression_text;
  std::optional<std::string> acquired_at;
  /// Unmapped source columns in source order.
  std::vector<std::pair<std::string, std::string>> extra;

  bool operator==(const RawRecord&) const = default;
};

struct ReportDoc {
  std::string record_id;
  std::string exam_code;
  std::string findings;
  std::string impression;
  /// True when no findings marker matched and findings is the whole report.
  bool findings_from_fallback = false;

  bool operator==(const ReportDoc&) const = default;
};

/// Maps logical fields to source columns. With has_header=false column names
/// are zero-based indices written as decimal strings. Optional fields use an
/// empty string to mean "not present in the source".
struct SourceSchema {
  std::string record_id = "id";
  std::string exam_code = "exam_code";
  std::string report_text = "report";
  std::string impression_text = "impression";
  std::string acquired_at = "date";
  char delimiter = ',';
  bool has_header = true;

  void validate() const;
};

class MissingColumn : public ValidationError {
 public:
  explicit MissingColumn(const std::string& column)
      : ValidationError("schema column not found in header: " + column), column_(column) {}
  const std::string& column() const noexcept { return column_; }

 private:
  std::string column_;
};

struct MalformedRow {
  std::size_t line;  // 1-based physical line where the row starts
  std::string reason;
};

struct IngestStats {
  std::size_t rows_seen = 0;
  std::size_t records_emitted = 0;
  std::size_t malformed_rows = 0;
  std::size_t invalid_utf8_replacements = 0;
  /// First malformed rows with their line numbers (capped, see kMaxLoggedRows).
  std::vector<MalformedRow> malformed;

  static constexpr std::size_t kMaxLoggedRows = 1000;
};

/// Single-consumer streaming CSV reader (RFC 4180 quoting, embedded newlines
/// allowed inside quotes). Malformed rows are skipped and recorded in stats().
class CsvRecordReader {
 public:
  CsvRecordReader(const fs::path& path, SourceSchema schema);
  ~CsvRecordReader();
  CsvRecordReader(const CsvRecordReader&) = delete;
  CsvRecordReader& operator=(const CsvRecordReader&) = delete;

  std::optional<RawRecord> next();
  const IngestStats& stats() const { return stats_; }
  const std::vector<std::string>& header() const { return header_; }

 private:
  bool read_row(std::vector<std::string>& fields, std::size_t& start_line, bool& unterminated);
  int get();
  int peek();
  void note_malformed(std::size_t line, std::string reason);

  std::ifstream in_;
  SourceSchema schema_;
  std::vector<char> buffer_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
  std::size_t line_ = 1;
  std::vector<std::string> header_;
  std::size_t field_count_ = 0;
  int id_col_ = -1, code_col_ = -1, report_col_ = -1, impression_col_ = -1, date_col_ = -1;
  std::vector<std::size_t> extra_cols_;
  std::unordered_set<std::string> seen_ids_;
  std::vector<std::string> fields_;
  bool pending_first_ = false;
  std::size_t pending_line_ = 0;
  IngestStats stats_;
};

/// Opens `path` and resolves `schema` against it. Throws MissingColumn before
/// yielding anything when the schema does not resolve; IoError when the file
/// cannot be opened.
std::unique_ptr<CsvRecordReader> read_csv_stream(const fs::path& path, const SourceSchema& schema);

std::string to_json_line(const RawRecord& record);
RawRecord from_json_line(const std::string& line, std::size_t line_number);

class JsonDatasetWriter {
 public:
  explicit JsonDatasetWriter(const fs::path& path);
  void write(const RawRecord& record);
  std::size_t count() const { return count_; }
  /// Publishes the file atomically and returns the record count.
  std::size_t commit();

 private:
  AtomicOutput out_;
  std::size_t count_ = 0;
};

class JsonDatasetReader {
 public:
  explicit JsonDatasetReader(const fs::path& path);
  std::optional<RawRecord> next();
  std::size_t line() const { return line_; }

 private:
  std::ifstream in_;
  std::string buf_;
  std::size_t line_ = 0;
};

template <typename Source>
concept RecordSource = requires(Source& s) {
  { s.next() } -> std::same_as<std::optional<RawRecord>>;
};

template <RecordSource Source>
std::size_t write_json_dataset(Source& records, const fs::path& path) {
  JsonDatasetWriter writer(path);
  while (auto rec = records.next()) writer.write(*rec);
  return writer.commit();
}

std::size_t write_json_dataset(std::span<const RawRecord> records, const fs::path& path);

inline JsonDatasetReader read_json_dataset(const fs::path& path) { return JsonDatasetReader(path); }

/// Reads a whole dataset into memory. Intended for tests and small inputs.
std::vector<RawRecord> load_json_dataset(const fs::path& path);

struct SectionMarkers {
  std::vector<std::string> findings{"FINDINGS:", "FINDING:", "REPORT:"};
  std::vector<std::string> impression{"IMPRESSION:", "IMPRESSIONS:", "CONCLUSION:"};
};

/// Markers match case-insensitively at the start of the text, at a line
/// start (leading blanks allowed) or right after a sentence terminator plus
/// whitespace. A section runs to the next recognized marker or end of text.
ReportDoc extract_sections(const RawRecord& raw, const SectionMarkers& markers = {});

}  // namespace radprep::corpus
