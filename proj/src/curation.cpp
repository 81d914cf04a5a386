#include "radprep/curation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

namespace radprep::curation {

using ojson = nlohmann::ordered_json;

std::string_view to_string(RejectionKind kind) {
  switch (kind) {
    case RejectionKind::MissingFindings:
      return "MissingFindings";
    case RejectionKind::MissingImpression:
      return "MissingImpression";
    case RejectionKind::FindingsTooShort:
      return "FindingsTooShort";
  }
  return "Unknown";
}

const std::vector<std::string>& default_instructions() {
  static const std::vector<std::string> kCatalog{
      "Derive the impression from the given findings.",
      "Based on the findings below, write the impression.",
      "Summarize the following radiology findings into an impression.",
      "Generate the radiology impression for these findings.",
      "What is the impression for the following findings?",
      "Write a concise impression based on the findings provided.",
      "Given the radiology findings, provide the corresponding impression.",
      "Produce the impression section of this radiology report from its findings.",
      "Read the findings and state the radiologist's impression.",
      "Convert these detailed findings into a summary impression.",
      "Provide the impression that best summarizes the findings below.",
      "From the findings of this exam, derive the final impression.",
      "Write the impression a radiologist would give for these findings.",
      "Summarize the key conclusions of these findings as an impression.",
      "Using the exam and findings below, compose the impression.",
      "Please give the impression corresponding to the following findings.",
      "Formulate the diagnostic impression from the reported findings.",
      "Condense the findings below into a radiology impression.",
      "Interpret the following findings and write the impression.",
      "State the impression supported by the findings of this study.",
  };
  return kCatalog;
}

const std::vector<std::string>& default_prepends() {
  static const std::vector<std::string> kCatalog{
      "Impression:",
      "In summary,",
      "Overall,",
      "In conclusion,",
      "The impression is as follows:",
      "Based on the findings,",
      "Summary of findings:",
      "Final impression:",
      "To summarize,",
      "The key conclusions are:",
  };
  return kCatalog;
}

void CurationConfig::validate() const {
  if (instruction_catalog.size() != kInstructionCount) {
    throw ValidationError("instruction catalog must contain exactly 20 entries, got " +
                          std::to_string(instruction_catalog.size()));
  }
  if (prepend_catalog.size() != kPrependCount) {
    throw ValidationError("prepend catalog must contain exactly 10 entries, got " +
                          std::to_string(prepend_catalog.size()));
  }
  if (!(prepend_probability >= 0.0 && prepend_probability <= 1.0)) {
    throw ValidationError("prepend_probability must lie in [0, 1]");
  }
  if (!(split_eval_fraction >= 0.0 && split_eval_fraction <= 1.0)) {
    throw ValidationError("split_eval_fraction must lie in [0, 1]");
  }
}

std::vector<std::string> load_catalog(const fs::path& path, std::size_t expected) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open catalog: " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (!t.empty()) out.emplace_back(t);
  }
  if (out.size() != expected) {
    throw ValidationError("catalog " + path.string() + " has " + std::to_string(out.size()) +
                          " entries, expected " + std::to_string(expected));
  }
  return out;
}

std::string normalize_whitespace(std::string_view text) {
  const auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\f' || c == '\v' || c == '\n' || c == '\r'; };
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    if (!is_ws(text[i])) {
      out += text[i++];
      continue;
    }
    // A whitespace run becomes its line breaks (at most two) or one space.
    std::size_t newlines = 0;
    while (i < n && is_ws(text[i])) {
      if (text[i] == '\r' && i + 1 < n && text[i + 1] == '\n') ++i;
      if (text[i] == '\n' || text[i] == '\r') ++newlines;
      ++i;
    }
    if (newlines == 0) {
      out += ' ';
    } else {
      out.append(std::min<std::size_t>(newlines, 2), '\n');
    }
  }
  return std::string(trim(out));
}

std::size_t word_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (const char c : text) {
    const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    if (!ws && !in_word) ++count;
    in_word = !ws;
  }
  return count;
}

std::optional<RejectionReason> filter_report(const corpus::ReportDoc& doc, const CurationConfig& config) {
  if (doc.findings.empty()) return RejectionReason{RejectionKind::MissingFindings, ""};
  if (doc.impression.empty()) return RejectionReason{RejectionKind::MissingImpression, ""};
  const auto words = word_count(doc.findings);
  if (words < config.min_findings_words) {
    return RejectionReason{RejectionKind::FindingsTooShort, std::to_string(words) + " words"};
  }
  return std::nullopt;
}

std::uint64_t record_seed(std::uint64_t master_seed, std::string_view record_id) {
  return stable_hash64(master_seed, record_id);
}

std::string format_input(std::string_view exam_code, std::string_view findings) {
  std::string s;
  s.reserve(exam_code.size() + findings.size() + 8);
  s += "Exam: ";
  s += exam_code;
  s += "\n\n";
  s += findings;
  return s;
}

InstructionPair build_pair(const corpus::ReportDoc& doc, const CurationConfig& config) {
  InstructionPair pair;
  pair.record_id = doc.record_id;
  pair.seed_used = record_seed(config.master_seed, doc.record_id);

  std::mt19937_64 rng(pair.seed_used);
  std::uniform_int_distribution<int> pick_instruction(0, static_cast<int>(config.instruction_catalog.size()) - 1);
  pair.instruction_index = pick_instruction(rng);
  pair.instruction = config.instruction_catalog[static_cast<std::size_t>(pair.instruction_index)];
  pair.input = format_input(doc.exam_code, doc.findings);

  std::bernoulli_distribution use_prepend(config.prepend_probability);
  if (use_prepend(rng)) {
    std::uniform_int_distribution<int> pick_prepend(0, static_cast<int>(config.prepend_catalog.size()) - 1);
    pair.prepend_index = pick_prepend(rng);
    pair.output = config.prepend_catalog[static_cast<std::size_t>(*pair.prepend_index)] + " " + doc.impression;
  } else {
    pair.output = doc.impression;
  }
  return pair;
}

std::vector<SplitAssignment> split_dataset(std::span<const std::string> record_ids, const CurationConfig& config) {
  const std::size_t n = record_ids.size();
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * config.split_eval_fraction + 0.5));

  std::vector<SplitAssignment> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {record_ids[i], Bucket::Train};
  if (k == 0) return out;

  std::vector<std::pair<std::uint64_t, std::size_t>> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    keys[i] = {stable_hash64(config.master_seed, "split\x1f" + record_ids[i]), i};
  }
  const auto cut = keys.begin() + static_cast<std::ptrdiff_t>(std::min(k, n));
  std::nth_element(keys.begin(), cut - 1, keys.end());
  for (auto it = keys.begin(); it != cut; ++it) out[it->second].bucket = Bucket::Eval;
  return out;
}

std::vector<SplitAssignment> split_with_holdout(std::span<const std::string> record_ids,
                                                const std::unordered_set<std::string>& holdout) {
  std::vector<SplitAssignment> out;
  out.reserve(record_ids.size());
  for (const auto& id : record_ids) out.push_back({id, holdout.contains(id) ? Bucket::Eval : Bucket::Train});
  return out;
}

std::string to_json_line(const InstructionPair& pair) {
  ojson j;
  j["instruction"] = pair.instruction;
  j["input"] = pair.input;
  j["output"] = pair.output;
  j["record_id"] = pair.record_id;
  j["instruction_index"] = pair.instruction_index;
  j["prepend_index"] = pair.prepend_index ? ojson(*pair.prepend_index) : ojson(nullptr);
  j["seed_used"] = pair.seed_used;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

InstructionPair pair_from_json_line(const std::string& line, std::size_t line_number) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_number, std::string("invalid JSON: ") + e.what());
  }
  try {
    InstructionPair p;
    p.instruction = j.at("instruction").get<std::string>();
    p.input = j.at("input").get<std::string>();
    p.output = j.at("output").get<std::string>();
    p.record_id = j.at("record_id").get<std::string>();
    p.instruction_index = j.at("instruction_index").get<int>();
    if (const auto& pi = j.at("prepend_index"); !pi.is_null()) p.prepend_index = pi.get<int>();
    p.seed_used = j.at("seed_used").get<std::uint64_t>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_number, std::string("bad pair record: ") + e.what());
  }
}

std::size_t write_pairs_jsonl(std::span<const InstructionPair> pairs, const fs::path& path) {
  AtomicOutput out(path);
  for (const auto& p : pairs) out.stream() << to_json_line(p) << '\n';
  out.commit();
  return pairs.size();
}

std::vector<InstructionPair> read_pairs_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open pairs file: " + path.string());
  std::vector<InstructionPair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    out.push_back(pair_from_json_line(line, n));
  }
  return out;
}

}  // namespace radprep::curation
