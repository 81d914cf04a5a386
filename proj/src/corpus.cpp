#include "radprep/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <limits>

#include "json.hpp"

namespace radprep::corpus {

using ojson = nlohmann::ordered_json;

namespace {

constexpr std::size_t kBufferSize = 1 << 20;

bool parse_index(const std::string& s, int& out) {
  if (s.empty()) return false;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && out >= 0;
}

}  // namespace

void SourceSchema::validate() const {
  if (record_id.empty() || exam_code.empty() || report_text.empty()) {
    throw ValidationError("source schema must map record_id, exam_code and report_text");
  }
  if (delimiter == '"' || delimiter == '\n' || delimiter == '\r') {
    throw ValidationError("invalid CSV delimiter");
  }
}

CsvRecordReader::CsvRecordReader(const fs::path& path, SourceSchema schema)
    : schema_(std::move(schema)), buffer_(kBufferSize) {
  schema_.validate();
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("cannot open CSV file: " + path.string());

  std::size_t start_line = 0;
  bool unterminated = false;
  std::vector<std::string> first;
  // Skip blank leading lines.
  bool got = false;
  while ((got = read_row(first, start_line, unterminated))) {
    if (!(first.size() == 1 && first[0].empty())) break;
  }

  if (schema_.has_header) {
    if (!got || unterminated) throw MissingColumn(schema_.record_id);
    if (!first.empty() && first[0].starts_with("\xEF\xBB\xBF")) first[0].erase(0, 3);
    header_ = first;
  } else {
    header_.clear();
    if (got) {
      for (std::size_t i = 0; i < first.size(); ++i) header_.push_back(std::to_string(i));
      fields_ = first;
    }
  }
  field_count_ = header_.size();

  auto resolve = [&](const std::string& name, bool required) -> int {
    if (name.empty()) {
      if (required) throw MissingColumn(name);
      return -1;
    }
    if (schema_.has_header) {
      const auto it = std::find(header_.begin(), header_.end(), name);
      if (it == header_.end()) throw MissingColumn(name);
      return static_cast<int>(it - header_.begin());
    }
    int idx = -1;
    if (!parse_index(name, idx) || static_cast<std::size_t>(idx) >= field_count_) throw MissingColumn(name);
    return idx;
  };
  id_col_ = resolve(schema_.record_id, true);
  code_col_ = resolve(schema_.exam_code, true);
  report_col_ = resolve(schema_.report_text, true);
  impression_col_ = resolve(schema_.impression_text, false);
  date_col_ = resolve(schema_.acquired_at, false);
  for (std::size_t i = 0; i < field_count_; ++i) {
    const int c = static_cast<int>(i);
    if (c != id_col_ && c != code_col_ && c != report_col_ && c != impression_col_ && c != date_col_) {
      extra_cols_.push_back(i);
    }
  }
  if (!schema_.has_header && got) {
    // The first data row was consumed to learn the column count; replay it.
    pending_first_ = true;
    pending_line_ = start_line;
  }
}

CsvRecordReader::~CsvRecordReader() = default;

int CsvRecordReader::get() {
  if (pos_ == end_) {
    if (!in_) return -1;
    in_.read(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    end_ = static_cast<std::size_t>(in_.gcount());
    pos_ = 0;
    if (end_ == 0) return -1;
  }
  return static_cast<unsigned char>(buffer_[pos_++]);
}

int CsvRecordReader::peek() {
  const int c = get();
  if (c >= 0) --pos_;
  return c;
}

bool CsvRecordReader::read_row(std::vector<std::string>& fields, std::size_t& start_line, bool& unterminated) {
  fields.clear();
  unterminated = false;
  int c = get();
  if (c < 0) return false;
  start_line = line_;
  const int delim = static_cast<unsigned char>(schema_.delimiter);

  std::string field;
  while (true) {
    field.clear();
    if (c == '"') {
      // Quoted field.
      while (true) {
        c = get();
        if (c < 0) {
          unterminated = true;
          fields.push_back(std::move(field));
          return true;
        }
        if (c == '"') {
          if (peek() == '"') {
            get();
            field.push_back('"');
            continue;
          }
          c = get();
          break;
        }
        if (c == '\n') ++line_;
        field.push_back(static_cast<char>(c));
      }
      // Tolerate stray characters between the closing quote and delimiter.
      while (c >= 0 && c != delim && c != '\n' && c != '\r') {
        field.push_back(static_cast<char>(c));
        c = get();
      }
    } else {
      while (c >= 0 && c != delim && c != '\n' && c != '\r') {
        field.push_back(static_cast<char>(c));
        c = get();
      }
    }
    fields.push_back(field);
    if (c == delim) {
      c = get();
      if (c < 0 || c == '\n' || c == '\r') {
        fields.emplace_back();
        break;
      }
      continue;
    }
    break;
  }
  if (c == '\r' && peek() == '\n') get();
  if (c == '\n' || c == '\r') ++line_;
  return true;
}

void CsvRecordReader::note_malformed(std::size_t line, std::string reason) {
  ++stats_.malformed_rows;
  if (stats_.malformed.size() < IngestStats::kMaxLoggedRows) {
    stats_.malformed.push_back({line, std::move(reason)});
  }
}

std::optional<RawRecord> CsvRecordReader::next() {
  while (true) {
    std::size_t start_line = 0;
    bool unterminated = false;
    if (pending_first_) {
      pending_first_ = false;
      start_line = pending_line_;
    } else if (!read_row(fields_, start_line, unterminated)) {
      return std::nullopt;
    }
    if (fields_.size() == 1 && fields_[0].empty() && !unterminated) continue;  // blank line
    ++stats_.rows_seen;
    if (unterminated) {
      note_malformed(start_line, "unterminated quoted field");
      continue;
    }
    if (fields_.size() != field_count_) {
      note_malformed(start_line, "expected " + std::to_string(field_count_) + " fields, got " +
                                     std::to_string(fields_.size()));
      continue;
    }
    for (auto& f : fields_) stats_.invalid_utf8_replacements += sanitize_utf8(f);

    RawRecord rec;
    rec.record_id = fields_[id_col_];
    if (rec.record_id.empty()) {
      note_malformed(start_line, "empty record id");
      continue;
    }
    if (!seen_ids_.insert(rec.record_id).second) {
      note_malformed(start_line, "duplicate record id " + rec.record_id);
      continue;
    }
    rec.exam_code = std::move(fields_[code_col_]);
    rec.report_text = std::move(fields_[report_col_]);
    if (impression_col_ >= 0 && !fields_[impression_col_].empty()) {
      rec.impression_text = std::move(fields_[impression_col_]);
    }
    if (date_col_ >= 0 && !fields_[date_col_].empty()) rec.acquired_at = std::move(fields_[date_col_]);
    rec.extra.reserve(extra_cols_.size());
    for (const auto i : extra_cols_) rec.extra.emplace_back(header_[i], std::move(fields_[i]));
    ++stats_.records_emitted;
    return rec;
  }
}

std::unique_ptr<CsvRecordReader> read_csv_stream(const fs::path& path, const SourceSchema& schema) {
  return std::make_unique<CsvRecordReader>(path, schema);
}

std::string to_json_line(const RawRecord& record) {
  ojson j;
  j["record_id"] = record.record_id;
  j["exam_code"] = record.exam_code;
  j["report_text"] = record.report_text;
  j["impression_text"] = record.impression_text ? ojson(*record.impression_text) : ojson(nullptr);
  j["acquired_at"] = record.acquired_at ? ojson(*record.acquired_at) : ojson(nullptr);
  ojson extra = ojson::object();
  for (const auto& [k, v] : record.extra) extra[k] = v;
  j["extra"] = std::move(extra);
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

RawRecord from_json_line(const std::string& line, std::size_t line_number) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_number, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_number, "expected a JSON object");

  auto required = [&](const char* key) -> std::string {
    const auto it = j.find(key);
    if (it == j.end() || !it->is_string()) throw ParseError(line_number, std::string("missing string field ") + key);
    return it->get<std::string>();
  };
  auto optional = [&](const char* key) -> std::optional<std::string> {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    if (!it->is_string()) throw ParseError(line_number, std::string("field must be string or null: ") + key);
    return it->get<std::string>();
  };

  RawRecord rec;
  rec.record_id = required("record_id");
  rec.exam_code = required("exam_code");
  rec.report_text = required("report_text");
  rec.impression_text = optional("impression_text");
  rec.acquired_at = optional("acquired_at");
  if (const auto it = j.find("extra"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw ParseError(line_number, "extra must be an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) throw ParseError(line_number, "extra values must be strings");
      rec.extra.emplace_back(k, v.get<std::string>());
    }
  }
  return rec;
}

JsonDatasetWriter::JsonDatasetWriter(const fs::path& path) : out_(path) {}

void JsonDatasetWriter::write(const RawRecord& record) {
  out_.stream() << to_json_line(record) << '\n';
  ++count_;
}

std::size_t JsonDatasetWriter::commit() {
  out_.commit();
  return count_;
}

std::size_t write_json_dataset(std::span<const RawRecord> records, const fs::path& path) {
  JsonDatasetWriter writer(path);
  for (const auto& r : records) writer.write(r);
  return writer.commit();
}

JsonDatasetReader::JsonDatasetReader(const fs::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open dataset: " + path.string());
}

std::optional<RawRecord> JsonDatasetReader::next() {
  while (std::getline(in_, buf_)) {
    ++line_;
    if (!buf_.empty() && buf_.back() == '\r') buf_.pop_back();
    if (trim(buf_).empty()) continue;
    return from_json_line(buf_, line_);
  }
  if (in_.bad()) throw IoError("read error in dataset");
  return std::nullopt;
}

std::vector<RawRecord> load_json_dataset(const fs::path& path) {
  JsonDatasetReader reader(path);
  std::vector<RawRecord> out;
  while (auto r = reader.next()) out.push_back(std::move(*r));
  return out;
}

namespace {

struct MarkerHit {
  std::size_t pos;
  std::size_t len;
  bool findings;
};

bool is_boundary(std::string_view text, std::size_t pos) {
  if (pos == 0) return true;
  std::size_t i = pos;
  while (i > 0 && (text[i - 1] == ' ' || text[i - 1] == '\t')) --i;
  if (i == 0 || text[i - 1] == '\n' || text[i - 1] == '\r') return true;
  // After a sentence terminator followed by at least one whitespace char.
  if (i == pos) return false;
  const char prev = text[i - 1];
  return prev == '.' || prev == '!' || prev == '?';
}

bool iequals_at(std::string_view text, std::size_t pos, std::string_view marker) {
  if (pos + marker.size() > text.size()) return false;
  for (std::size_t k = 0; k < marker.size(); ++k) {
    if (std::toupper(static_cast<unsigned char>(text[pos + k])) != std::toupper(static_cast<unsigned char>(marker[k]))) {
      return false;
    }
  }
  return true;
}

std::vector<MarkerHit> find_markers(std::string_view text, const SectionMarkers& markers) {
  // Leading characters worth checking, upper-cased.
  bool first_char[256] = {};
  for (const auto* set : {&markers.findings, &markers.impression}) {
    for (const auto& m : *set) {
      if (!m.empty()) first_char[std::toupper(static_cast<unsigned char>(m[0]))] = true;
    }
  }
  std::vector<MarkerHit> hits;
  for (std::size_t p = 0; p < text.size(); ++p) {
    if (!first_char[std::toupper(static_cast<unsigned char>(text[p]))]) continue;
    if (!is_boundary(text, p)) continue;
    MarkerHit best{p, 0, false};
    for (const auto& m : markers.findings) {
      if (m.size() > best.len && iequals_at(text, p, m)) best = {p, m.size(), true};
    }
    for (const auto& m : markers.impression) {
      if (m.size() > best.len && iequals_at(text, p, m)) best = {p, m.size(), false};
    }
    if (best.len > 0) {
      hits.push_back(best);
      p += best.len - 1;
    }
  }
  return hits;
}

std::string section_after(std::string_view text, const std::vector<MarkerHit>& hits, std::size_t idx) {
  const std::size_t begin = hits[idx].pos + hits[idx].len;
  const std::size_t end = idx + 1 < hits.size() ? hits[idx + 1].pos : text.size();
  return std::string(trim(text.substr(begin, end - begin)));
}

}  // namespace

ReportDoc extract_sections(const RawRecord& raw, const SectionMarkers& markers) {
  ReportDoc doc;
  doc.record_id = raw.record_id;
  doc.exam_code = std::string(trim(raw.exam_code));
  const std::string_view text = raw.report_text;
  const auto hits = find_markers(text, markers);

  const auto findings_it = std::find_if(hits.begin(), hits.end(), [](const MarkerHit& h) { return h.findings; });
  if (findings_it != hits.end()) {
    doc.findings = section_after(text, hits, static_cast<std::size_t>(findings_it - hits.begin()));
  } else {
    // No findings marker: everything ahead of the first impression marker.
    doc.findings_from_fallback = true;
    const std::size_t end = hits.empty() ? text.size() : hits.front().pos;
    doc.findings = std::string(trim(text.substr(0, end)));
  }

  if (raw.impression_text && !trim(*raw.impression_text).empty()) {
    doc.impression = std::string(trim(*raw.impression_text));
  } else {
    const auto imp_it = std::find_if(hits.begin(), hits.end(), [](const MarkerHit& h) { return !h.findings; });
    if (imp_it != hits.end()) doc.impression = section_after(text, hits, static_cast<std::size_t>(imp_it - hits.begin()));
  }
  return doc;
}

}  // namespace radprep::corpus
