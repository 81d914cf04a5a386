#include "radprep/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "radprep/deid.hpp"
#include "radprep/embedding.hpp"
#include "radprep/metrics.hpp"
#include "radprep/token_cache.hpp"
#include "radprep/tokenizer.hpp"

namespace radprep::pipeline {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::size_t kChunk = 4096;

void interpolate_all(json& j) {
  if (j.is_string()) {
    j = interpolate_env(j.get<std::string>());
  } else if (j.is_structured()) {
    for (auto& v : j) interpolate_all(v);
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown config key: " + (where.empty() ? key : where + "." + key));
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key " + where + "." + key + " has the wrong type");
  }
}

std::optional<fs::path> read_path(const json& j, const char* key, const fs::path& base, const std::string& where) {
  std::string s;
  read_opt(j, key, s, where);
  if (s.empty()) return std::nullopt;
  const fs::path p(s);
  return p.is_absolute() ? p : base / p;
}

void require_file(const std::optional<fs::path>& p, const char* what) {
  if (p && !fs::is_regular_file(*p)) throw ConfigError(std::string(what) + " not found: " + p->string());
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

void write_json_file(const fs::path& path, const ojson& j) {
  AtomicOutput out(path);
  out.stream() << j.dump(2) << '\n';
  out.commit();
}

std::vector<std::string> read_lines(const fs::path& path, bool skip_comments = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (!t.empty() && !(skip_comments && t.front() == '#')) out.emplace_back(t);
  }
  return out;
}

deid::NamePatternSet load_patterns(const PipelineConfig& config) {
  return config.deid_patterns_file ? deid::NamePatternSet::load(*config.deid_patterns_file)
                                   : deid::NamePatternSet::defaults();
}

// ---- prepare ----

struct Prepared {
  std::string record_id;
  std::string pair_line;
  std::optional<curation::RejectionReason> rejection;
  int instruction_index = -1;
  bool prepended = false;
  bool fallback = false;
  std::size_t removed_sentences = 0;
  std::vector<std::string> fired;
};

Prepared prepare_one(const corpus::RawRecord& raw, const PipelineConfig& config, const curation::CurationConfig& cur,
                     const deid::NamePatternSet& patterns) {
  Prepared p;
  p.record_id = raw.record_id;
  auto doc = corpus::extract_sections(raw, config.markers);
  p.fallback = doc.findings_from_fallback;
  auto outcome = deid::deidentify(doc, patterns);
  p.removed_sentences = outcome.findings.removed_sentences + outcome.impression.removed_sentences;
  p.fired = std::move(outcome.findings.fired_patterns);
  p.fired.insert(p.fired.end(), outcome.impression.fired_patterns.begin(), outcome.impression.fired_patterns.end());
  auto& clean = outcome.doc;
  clean.findings = curation::normalize_whitespace(clean.findings);
  clean.impression = curation::normalize_whitespace(clean.impression);
  clean.exam_code = std::string(trim(clean.exam_code));
  if (auto reason = curation::filter_report(clean, cur)) {
    p.rejection = std::move(reason);
    return p;
  }
  const auto pair = curation::build_pair(clean, cur);
  p.instruction_index = pair.instruction_index;
  p.prepended = pair.prepend_index.has_value();
  p.pair_line = curation::to_json_line(pair);
  return p;
}

// Removes the file on scope exit.
class TempFile {
 public:
  explicit TempFile(fs::path path) : path_(std::move(path)) {}
  ~TempFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---- pack ----

std::string prompt_text(const curation::InstructionPair& p) { return p.instruction + "\n\n" + p.input; }
std::string response_text(const curation::InstructionPair& p) { return "\n\n" + p.output; }

template <typename Fn>
void for_each_pair(const fs::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open pairs file: " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    fn(curation::pair_from_json_line(line, n));
  }
}

std::unique_ptr<packing::TokenizerProvider> make_tokenizer(const PipelineConfig& config, const fs::path& pairs) {
  const auto& s = config.packing;
  if (s.tokenizer == TokenizerKind::Whitespace) {
    if (s.vocabulary_file) return std::make_unique<packing::WhitespaceTokenizer>(read_lines(*s.vocabulary_file, false));
    packing::WhitespaceTokenizer::Builder builder;
    for_each_pair(pairs, [&](const curation::InstructionPair& p) {
      builder.add(prompt_text(p));
      builder.add(response_text(p));
    });
    auto tok = std::make_unique<packing::WhitespaceTokenizer>(std::move(builder).build());
    AtomicOutput out(config.workdir / "tokenizer.vocab");
    for (const auto& w : tok->vocabulary()) out.stream() << w << '\n';
    out.commit();
    return tok;
  }
  if (s.merges_file) return std::make_unique<packing::BpeTokenizer>(packing::BpeTokenizer::load(*s.merges_file));
  std::vector<std::string> sample;
  for_each_pair(pairs, [&](const curation::InstructionPair& p) {
    if (sample.size() < s.bpe_training_pairs) sample.push_back(prompt_text(p) + response_text(p));
  });
  auto tok = std::make_unique<packing::BpeTokenizer>(packing::BpeTokenizer::train(sample, s.bpe_merges));
  tok->save(config.workdir / "tokenizer.merges");
  return tok;
}

// ---- eval ----

std::string pick_text(const json& j, const fs::path& path, std::size_t line) {
  for (const char* key : {"generated", "impression", "output", "text"}) {
    const auto it = j.find(key);
    if (it != j.end() && it->is_string()) return it->get<std::string>();
  }
  throw ParseError(line, path.string() + ": no generated/impression/output/text field");
}

std::vector<std::pair<std::string, std::string>> read_texts(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(n, path.string() + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("record_id") || !j["record_id"].is_string()) {
      throw ParseError(n, path.string() + ": missing record_id");
    }
    auto id = j["record_id"].get<std::string>();
    if (!seen.insert(id).second) throw ValidationError(path.string() + ": duplicate record_id '" + id + "'");
    out.emplace_back(std::move(id), pick_text(j, path, n));
  }
  return out;
}

std::unique_ptr<metrics::EmbeddingProvider> make_embedder(const PipelineConfig& config) {
  const auto& m = config.metrics;
  switch (m.embedder) {
    case EmbedderKind::None:
      return nullptr;
    case EmbedderKind::OneHot:
      return std::make_unique<metrics::OneHotEmbedder>(m.dimension);
    case EmbedderKind::Hashed:
      return std::make_unique<metrics::HashedEmbedder>(m.dimension, config.master_seed);
    case EmbedderKind::Service: {
      auto sc = metrics::EmbeddingServiceConfig::from_env(m.service_model);
      sc.max_batch = m.service_max_batch;
      return std::make_unique<metrics::ServiceEmbedder>(std::move(sc));
    }
  }
  return nullptr;
}

std::unique_ptr<judge::JudgeClient> make_judge_client(const PipelineConfig& config) {
  config.judge.validate();
  auto prompt = config.judge_template_file ? judge::JudgePrompt::load(*config.judge_template_file)
                                           : judge::JudgePrompt::defaults();
  auto transport = std::make_shared<judge::HttpChatTransport>(config.judge);
  return std::make_unique<judge::JudgeClient>(config.judge, std::move(transport), std::move(prompt));
}

std::string safe_label(const std::string& label) {
  std::string out;
  for (const char c : label) {
    const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' ||
                    c == '-' || c == '_';
    out += ok ? c : '_';
  }
  if (out.empty() || out == "." || out == "..") out = "model";
  return out;
}

}  // namespace

std::string interpolate_env(const std::string& text) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto start = text.find("${", i);
    if (start == std::string::npos) {
      out.append(text, i);
      break;
    }
    out.append(text, i, start - i);
    const auto close = text.find('}', start + 2);
    if (close == std::string::npos) throw ConfigError("unterminated ${ in config value");
    const std::string name = text.substr(start + 2, close - start - 2);
    if (name.empty()) throw ConfigError("empty ${} in config value");
    const char* value = std::getenv(name.c_str());
    if (value == nullptr) throw ConfigError("environment variable " + name + " referenced by the config is not set");
    out += value;
    i = close + 1;
  }
  return out;
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, {"workdir", "master_seed", "threads", "source", "sections", "deid", "curation", "packing", "metrics",
                    "judge"},
             "");
  interpolate_all(root);

  PipelineConfig c;
  if (auto p = read_path(root, "workdir", base_dir, "")) c.workdir = *p;
  read_opt(root, "master_seed", c.master_seed, "");
  read_opt(root, "threads", c.threads, "");

  if (root.contains("source")) {
    const auto& s = root["source"];
    check_keys(s, {"path", "delimiter", "has_header", "columns"}, "source");
    c.source_path = read_path(s, "path", base_dir, "source");
    std::string delim;
    read_opt(s, "delimiter", delim, "source");
    if (!delim.empty()) {
      if (delim.size() != 1) throw ConfigError("source.delimiter must be a single character");
      c.schema.delimiter = delim[0];
    }
    read_opt(s, "has_header", c.schema.has_header, "source");
    if (s.contains("columns")) {
      const auto& col = s["columns"];
      check_keys(col, {"record_id", "exam_code", "report_text", "impression_text", "acquired_at"}, "source.columns");
      read_opt(col, "record_id", c.schema.record_id, "source.columns");
      read_opt(col, "exam_code", c.schema.exam_code, "source.columns");
      read_opt(col, "report_text", c.schema.report_text, "source.columns");
      read_opt(col, "impression_text", c.schema.impression_text, "source.columns");
      read_opt(col, "acquired_at", c.schema.acquired_at, "source.columns");
    }
  }
  if (root.contains("sections")) {
    const auto& s = root["sections"];
    check_keys(s, {"findings", "impression"}, "sections");
    read_opt(s, "findings", c.markers.findings, "sections");
    read_opt(s, "impression", c.markers.impression, "sections");
  }
  if (root.contains("deid")) {
    const auto& s = root["deid"];
    check_keys(s, {"patterns_file"}, "deid");
    c.deid_patterns_file = read_path(s, "patterns_file", base_dir, "deid");
  }
  if (root.contains("curation")) {
    const auto& s = root["curation"];
    check_keys(s, {"instructions_file", "prepends_file", "prepend_probability", "min_findings_words", "eval_fraction",
                   "holdout_file"},
               "curation");
    c.instructions_file = read_path(s, "instructions_file", base_dir, "curation");
    c.prepends_file = read_path(s, "prepends_file", base_dir, "curation");
    c.holdout_file = read_path(s, "holdout_file", base_dir, "curation");
    read_opt(s, "prepend_probability", c.curation.prepend_probability, "curation");
    read_opt(s, "min_findings_words", c.curation.min_findings_words, "curation");
    read_opt(s, "eval_fraction", c.curation.split_eval_fraction, "curation");
  }
  if (root.contains("packing")) {
    const auto& s = root["packing"];
    check_keys(s, {"capacity", "separator", "truncation", "tokenizer", "vocabulary_file", "merges_file", "bpe_merges",
                   "bpe_training_pairs", "cache_dir"},
               "packing");
    auto& p = c.packing;
    read_opt(s, "capacity", p.capacity, "packing");
    read_opt(s, "separator", p.separator, "packing");
    std::string trunc = "truncate_input";
    read_opt(s, "truncation", trunc, "packing");
    if (trunc == "truncate_input") {
      p.truncation = packing::TruncationPolicy::TruncateInput;
    } else if (trunc == "error") {
      p.truncation = packing::TruncationPolicy::Error;
    } else {
      throw ConfigError("packing.truncation must be truncate_input or error");
    }
    std::string kind = "whitespace";
    read_opt(s, "tokenizer", kind, "packing");
    if (kind == "whitespace") {
      p.tokenizer = TokenizerKind::Whitespace;
    } else if (kind == "bpe") {
      p.tokenizer = TokenizerKind::Bpe;
    } else {
      throw ConfigError("packing.tokenizer must be whitespace or bpe");
    }
    p.vocabulary_file = read_path(s, "vocabulary_file", base_dir, "packing");
    p.merges_file = read_path(s, "merges_file", base_dir, "packing");
    read_opt(s, "bpe_merges", p.bpe_merges, "packing");
    read_opt(s, "bpe_training_pairs", p.bpe_training_pairs, "packing");
    p.cache_dir = read_path(s, "cache_dir", base_dir, "packing");
  }
  if (root.contains("metrics")) {
    const auto& s = root["metrics"];
    check_keys(s, {"embedder", "dimension", "rouge_l_beta", "service_model", "service_max_batch"}, "metrics");
    std::string kind = "none";
    read_opt(s, "embedder", kind, "metrics");
    static const std::map<std::string, EmbedderKind> kinds{{"none", EmbedderKind::None},
                                                           {"onehot", EmbedderKind::OneHot},
                                                           {"hashed", EmbedderKind::Hashed},
                                                           {"service", EmbedderKind::Service}};
    const auto it = kinds.find(kind);
    if (it == kinds.end()) throw ConfigError("metrics.embedder must be none, onehot, hashed or service");
    c.metrics.embedder = it->second;
    read_opt(s, "dimension", c.metrics.dimension, "metrics");
    read_opt(s, "rouge_l_beta", c.metrics.rouge_l_beta, "metrics");
    read_opt(s, "service_model", c.metrics.service_model, "metrics");
    read_opt(s, "service_max_batch", c.metrics.service_max_batch, "metrics");
  }
  if (root.contains("judge")) {
    const auto& s = root["judge"];
    check_keys(s, {"endpoint", "model", "api_key_env", "max_retries", "backoff_ms", "max_concurrent",
                   "requests_per_minute", "timeout_s", "template_file"},
               "judge");
    auto& j = c.judge;
    read_opt(s, "endpoint", j.endpoint, "judge");
    read_opt(s, "model", j.model_name, "judge");
    read_opt(s, "api_key_env", j.api_key_env, "judge");
    read_opt(s, "max_retries", j.max_retries, "judge");
    read_opt(s, "max_concurrent", j.max_concurrent, "judge");
    read_opt(s, "requests_per_minute", j.requests_per_minute, "judge");
    std::int64_t backoff = j.backoff_base.count();
    read_opt(s, "backoff_ms", backoff, "judge");
    if (backoff < 0) throw ConfigError("judge.backoff_ms must be >= 0");
    j.backoff_base = std::chrono::milliseconds(backoff);
    std::int64_t timeout = j.timeout.count();
    read_opt(s, "timeout_s", timeout, "judge");
    if (timeout <= 0) throw ConfigError("judge.timeout_s must be > 0");
    j.timeout = std::chrono::seconds(timeout);
    c.judge_template_file = read_path(s, "template_file", base_dir, "judge");
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str(), fs::absolute(path).parent_path());
}

void PipelineConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (packing.capacity < 16) throw ConfigError("packing.capacity must be >= 16");
  if (packing.bpe_merges == 0 && packing.tokenizer == TokenizerKind::Bpe && !packing.merges_file) {
    throw ConfigError("packing.bpe_merges must be >= 1");
  }
  if (metrics.dimension < 1) throw ConfigError("metrics.dimension must be >= 1");
  if (!(metrics.rouge_l_beta > 0.0)) throw ConfigError("metrics.rouge_l_beta must be > 0");
  if (markers.findings.empty() && markers.impression.empty()) throw ConfigError("no section markers configured");
  schema.validate();
  if (source_path && !fs::is_regular_file(*source_path)) throw IoError("source file not found: " + source_path->string());
  require_file(deid_patterns_file, "deid patterns file");
  require_file(instructions_file, "instructions file");
  require_file(prepends_file, "prepends file");
  require_file(holdout_file, "holdout file");
  require_file(packing.vocabulary_file, "vocabulary file");
  require_file(packing.merges_file, "merges file");
  require_file(judge_template_file, "judge template file");
  resolved_curation().validate();
}

curation::CurationConfig PipelineConfig::resolved_curation() const {
  auto c = curation;
  c.master_seed = master_seed;
  if (instructions_file) c.instruction_catalog = curation::load_catalog(*instructions_file, curation::kInstructionCount);
  if (prepends_file) c.prepend_catalog = curation::load_catalog(*prepends_file, curation::kPrependCount);
  return c;
}

WorkdirLock::WorkdirLock(const fs::path& workdir) {
  fs::create_directories(workdir);
  const auto path = workdir / ".lock";
  fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open lock file " + path.string() + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    const int err = errno;
    ::close(fd_);
    fd_ = -1;
    if (err == EWOULDBLOCK) throw WorkdirBusy("workdir " + workdir.string() + " is in use by another radprep process");
    throw IoError("cannot lock " + path.string() + ": " + std::strerror(err));
  }
}

WorkdirLock::~WorkdirLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

CommandReport cmd_ingest(const PipelineConfig& config) {
  if (!config.source_path) throw ConfigError("no source path configured");
  auto reader = corpus::read_csv_stream(*config.source_path, config.schema);
  corpus::JsonDatasetWriter writer(config.workdir / "dataset.jsonl");
  while (auto rec = reader->next()) writer.write(*rec);
  writer.commit();

  const auto& st = reader->stats();
  ojson rep;
  rep["source"] = config.source_path->string();
  rep["rows_seen"] = st.rows_seen;
  rep["records"] = st.records_emitted;
  rep["malformed"] = st.malformed_rows;
  rep["invalid_utf8_replacements"] = st.invalid_utf8_replacements;
  auto rows = ojson::array();
  for (const auto& m : st.malformed) rows.push_back(ojson{{"line", m.line}, {"reason", m.reason}});
  rep["malformed_rows"] = std::move(rows);
  write_json_file(config.workdir / "ingest_report.json", rep);

  std::string text = "records: " + std::to_string(st.records_emitted) + "\nmalformed: " +
                     std::to_string(st.malformed_rows) +
                     "\ninvalid utf-8 replacements: " + std::to_string(st.invalid_utf8_replacements) + "\n";
  for (const auto& m : st.malformed) text += "  line " + std::to_string(m.line) + ": " + m.reason + "\n";
  return {text};
}

CommandReport cmd_prepare(const PipelineConfig& config) {
  const auto cur = config.resolved_curation();
  cur.validate();
  const auto patterns = load_patterns(config);
  const auto dataset_path = config.workdir / "dataset.jsonl";
  if (!fs::exists(dataset_path)) throw IoError("no dataset at " + dataset_path.string() + "; run ingest first");

  fs::create_directories(config.workdir / "pairs");
  TempFile staged(config.workdir / "pairs" / (".staged-" + std::to_string(::getpid())));
  std::ofstream staged_out(staged.path(), std::ios::binary | std::ios::trunc);
  if (!staged_out) throw IoError("cannot write " + staged.path().string());
  AtomicOutput rejections(config.workdir / "rejections.csv");
  rejections.stream() << "record_id,kind,detail\n";

  std::size_t ingested = 0, removed_sentences = 0, records_touched = 0, fallback = 0, prepended = 0;
  std::map<std::string, std::size_t> rejection_counts;
  for (const auto kind : {curation::RejectionKind::MissingFindings, curation::RejectionKind::MissingImpression,
                          curation::RejectionKind::FindingsTooShort}) {
    rejection_counts[std::string(curation::to_string(kind))] = 0;
  }
  std::map<std::string, std::size_t> pattern_hits;
  std::array<std::size_t, curation::kInstructionCount> histogram{};
  std::vector<std::string> pair_ids;

  auto reader = corpus::read_json_dataset(dataset_path);
  std::vector<corpus::RawRecord> chunk;
  std::vector<Prepared> results;
  chunk.reserve(kChunk);
  bool done = false;
  while (!done) {
    chunk.clear();
    while (chunk.size() < kChunk) {
      auto rec = reader.next();
      if (!rec) {
        done = true;
        break;
      }
      chunk.push_back(std::move(*rec));
    }
    results.assign(chunk.size(), Prepared{});
    parallel_for(chunk.size(), config.threads,
                 [&](std::size_t i) { results[i] = prepare_one(chunk[i], config, cur, patterns); });
    for (auto& r : results) {
      ++ingested;
      removed_sentences += r.removed_sentences;
      if (r.removed_sentences > 0) ++records_touched;
      for (const auto& f : r.fired) ++pattern_hits[f];
      if (r.fallback) ++fallback;
      if (r.rejection) {
        ++rejection_counts[std::string(curation::to_string(r.rejection->kind))];
        rejections.stream() << csv_field(r.record_id) << ',' << curation::to_string(r.rejection->kind) << ','
                            << csv_field(r.rejection->detail) << '\n';
        continue;
      }
      staged_out << r.pair_line << '\n';
      ++histogram[static_cast<std::size_t>(r.instruction_index)];
      if (r.prepended) ++prepended;
      pair_ids.push_back(std::move(r.record_id));
    }
  }
  staged_out.close();
  if (!staged_out) throw IoError("failed writing " + staged.path().string());

  std::vector<curation::SplitAssignment> split;
  if (config.holdout_file) {
    const auto ids = read_lines(*config.holdout_file);
    split = curation::split_with_holdout(pair_ids, std::unordered_set<std::string>(ids.begin(), ids.end()));
  } else {
    split = curation::split_dataset(pair_ids, cur);
  }
  pair_ids.clear();
  pair_ids.shrink_to_fit();

  AtomicOutput train(config.workdir / "pairs" / "train.jsonl");
  AtomicOutput eval(config.workdir / "pairs" / "eval.jsonl");
  AtomicOutput split_out(config.workdir / "split.tsv");
  split_out.stream() << "record_id\tsplit\n";
  std::size_t n_train = 0, n_eval = 0;
  {
    std::ifstream in(staged.path(), std::ios::binary);
    std::string line;
    for (const auto& a : split) {
      if (!std::getline(in, line)) throw IoError("staged pairs file is shorter than expected");
      const bool is_eval = a.bucket == curation::Bucket::Eval;
      (is_eval ? eval : train).stream() << line << '\n';
      split_out.stream() << a.record_id << '\t' << (is_eval ? "eval" : "train") << '\n';
      ++(is_eval ? n_eval : n_train);
    }
  }

  const std::size_t pairs = n_train + n_eval;
  std::size_t rejected = 0;
  for (const auto& [_, n] : rejection_counts) rejected += n;

  ojson st;
  st["ingested"] = ingested;
  st["pairs"] = pairs;
  st["rejected"] = rejected;
  st["rejections"] = rejection_counts;
  st["findings_fallback"] = fallback;
  st["deid"] = ojson{{"sentences_removed", removed_sentences},
                     {"records_with_removals", records_touched},
                     {"pattern_hits", pattern_hits}};
  st["prepend_rate"] = pairs == 0 ? 0.0 : static_cast<double>(prepended) / static_cast<double>(pairs);
  st["instruction_histogram"] = histogram;
  st["split"] = ojson{{"method", config.holdout_file ? "holdout" : "fraction"}, {"train", n_train}, {"eval", n_eval}};
  auto notes = ojson::array();
  if (n_eval == 0) notes.push_back("eval split is empty");
  if (pairs == 0) notes.push_back("no pairs produced");
  st["notes"] = std::move(notes);
  write_json_file(config.workdir / "prepare_stats.json", st);

  train.commit();
  eval.commit();
  split_out.commit();
  rejections.commit();

  std::string text = "ingested: " + std::to_string(ingested) + "\npairs: " + std::to_string(pairs) +
                     " (train " + std::to_string(n_train) + ", eval " + std::to_string(n_eval) + ")\n";
  for (const auto& [kind, n] : rejection_counts) text += "rejected " + kind + ": " + std::to_string(n) + "\n";
  text += "sentences removed by deid: " + std::to_string(removed_sentences) + "\n";
  text += "prepend rate: " + fmt(st["prepend_rate"].get<double>(), 4) + "\n";
  if (n_eval == 0) text += "note: eval split is empty\n";
  return {text};
}

CommandReport cmd_pack(const PipelineConfig& config) {
  const auto pairs_path = config.workdir / "pairs" / "train.jsonl";
  if (!fs::exists(pairs_path)) throw IoError("no pairs at " + pairs_path.string() + "; run prepare first");
  const auto tokenizer = make_tokenizer(config, pairs_path);
  packing::TokenCache cache(config.packing.cache_dir.value_or(config.workdir / "token_cache"));
  packing::CacheCounters counters;

  packing::PackOptions opts;
  opts.capacity = config.packing.capacity;
  opts.truncation = config.packing.truncation;
  if (config.packing.separator) opts.separator = tokenizer->eos();
  packing::Packer packer(opts);

  AtomicOutput out(config.workdir / "packed.jsonl");
  std::size_t blocks = 0, occupied = 0, records = 0;
  auto emit = [&](std::optional<packing::PackedBlock> block) {
    if (!block) return;
    ++blocks;
    occupied += block->token_ids.size();
    out.stream() << packing::to_json_line(*block) << '\n';
  };

  std::vector<curation::InstructionPair> chunk;
  std::vector<packing::TokenizedRecord> tokenized;
  auto flush_chunk = [&] {
    tokenized.assign(chunk.size(), packing::TokenizedRecord{});
    parallel_for(chunk.size(), config.threads, [&](std::size_t i) {
      const auto& p = chunk[i];
      auto head = packing::tokenize_cached(p.record_id, prompt_text(p), *tokenizer, &cache, &counters);
      const auto tail = packing::tokenize_cached(p.record_id, response_text(p), *tokenizer, &cache, &counters);
      head.token_ids.insert(head.token_ids.end(), tail.token_ids.begin(), tail.token_ids.end());
      head.protected_tail = tail.length();
      tokenized[i] = std::move(head);
    });
    for (auto& t : tokenized) emit(packer.add(std::move(t)));
    records += chunk.size();
    chunk.clear();
  };
  for_each_pair(pairs_path, [&](curation::InstructionPair p) {
    chunk.push_back(std::move(p));
    if (chunk.size() == kChunk) flush_chunk();
  });
  flush_chunk();
  emit(packer.finish());
  cache.flush();

  const double fill =
      blocks == 0 ? 0.0 : static_cast<double>(occupied) / (static_cast<double>(blocks) * static_cast<double>(opts.capacity));
  ojson st;
  st["pairs"] = records;
  st["blocks"] = blocks;
  st["capacity"] = opts.capacity;
  st["occupied_positions"] = occupied;
  st["fill_ratio"] = fill;
  st["truncated_records"] = packer.truncated_records();
  st["truncated_tokens"] = packer.truncated_tokens();
  st["tokenizer"] = tokenizer->id();
  st["cache"] = ojson{{"hits", counters.hits.load()},
                      {"misses", counters.misses.load()},
                      {"hit_rate", counters.hit_rate()},
                      {"io_warnings", counters.io_warnings.load()}};
  write_json_file(config.workdir / "pack_stats.json", st);
  out.commit();

  std::string text = "pairs: " + std::to_string(records) + "\nblocks: " + std::to_string(blocks) +
                     "\nfill ratio: " + fmt(fill, 4) + "\ntruncated records: " +
                     std::to_string(packer.truncated_records()) + "\ncache hit rate: " + fmt(counters.hit_rate(), 4) +
                     "\n";
  if (counters.io_warnings > 0) text += "cache warnings: " + std::to_string(counters.io_warnings.load()) + "\n";
  return {text};
}

std::vector<judge::JudgeItem> load_aligned_pairs(const fs::path& generated, const fs::path& reference) {
  const auto gen = read_texts(generated);
  const auto ref = read_texts(reference);
  std::unordered_map<std::string, const std::string*> gen_by_id;
  for (const auto& [id, text] : gen) gen_by_id.emplace(id, &text);
  std::unordered_set<std::string> ref_ids;
  std::vector<judge::JudgeItem> out;
  out.reserve(ref.size());
  for (const auto& [id, text] : ref) {
    const auto it = gen_by_id.find(id);
    if (it == gen_by_id.end()) throw AlignmentError(id, "reference");
    out.push_back({id, *it->second, text});
    ref_ids.insert(id);
  }
  for (const auto& [id, _] : gen) {
    if (!ref_ids.contains(id)) throw AlignmentError(id, "generated");
  }
  return out;
}

CommandReport cmd_eval(const PipelineConfig& config, const EvalOptions& options) {
  const auto items = load_aligned_pairs(options.generated, options.reference);
  if (items.empty()) throw metrics::EmptyCorpus("no pairs to evaluate");
  std::vector<metrics::ScoreInput> inputs;
  inputs.reserve(items.size());
  for (const auto& it : items) inputs.push_back({it.record_id, it.generated, it.reference});

  const auto embedder = make_embedder(config);
  metrics::ScoreOptions so;
  so.rouge_l_beta = config.metrics.rouge_l_beta;
  so.threads = config.threads;
  const auto scores = metrics::score_corpus(inputs, embedder.get(), so);

  const auto dir = config.workdir / "eval" / safe_label(options.label);
  fs::create_directories(dir);
  metrics::write_scores_csv(scores.rows, dir / "scores.csv");

  report::SummaryRow row;
  row.model_label = options.label;
  row.rouge_l_f1 = scores.means.rouge_l_f1;
  if (scores.means.bert) {
    row.bert_p = scores.means.bert->precision;
    row.bert_r = scores.means.bert->recall;
    row.bert_f1 = scores.means.bert->f1;
  }
  row.pairs_evaluated = items.size();
  if (options.judge) {
    auto client = make_judge_client(config);
    const auto res = judge::judge_corpus(items, *client, dir / "verdicts.jsonl");
    row.judge_mean = res.mean_score;
    row.judge_failures = res.failures.size();
  }
  report::SummaryTable table{{row}};
  table.validate();
  report::save_summary_row(row, dir / "summary.json");
  return {report::render_summary(table, options.format)};
}

CommandReport cmd_judge(const PipelineConfig& config, const JudgeOptions& options) {
  const auto items = load_aligned_pairs(options.generated, options.reference);
  auto client = make_judge_client(config);
  const auto path = options.output.value_or(config.workdir / "verdicts.jsonl");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto res = judge::judge_corpus(items, *client, path);
  std::string text = "pairs: " + std::to_string(items.size()) + "\njudged this run: " +
                     std::to_string(res.requested - res.failures.size()) +
                     "\nalready judged: " + std::to_string(res.skipped) +
                     "\nfailures: " + std::to_string(res.failures.size()) + "\n";
  text += "mean score: " + (res.mean_score ? fmt(*res.mean_score, 2) : std::string("-")) + "\n";
  for (const auto& f : res.failures) text += "  " + f.record_id + ": " + f.error + "\n";
  if (!res.failures.empty()) {
    throw judge::JudgeError(std::to_string(res.failures.size()) + " pair(s) could not be judged; rerun to retry\n" +
                            text);
  }
  return {text};
}

CommandReport cmd_report(const PipelineConfig& config, const ReportOptions& options) {
  std::vector<fs::path> paths = options.summaries;
  if (paths.empty()) {
    const auto root = config.workdir / "eval";
    if (fs::is_directory(root)) {
      for (const auto& entry : fs::directory_iterator(root)) {
        const auto p = entry.path() / "summary.json";
        if (fs::is_regular_file(p)) paths.push_back(p);
      }
    }
    std::sort(paths.begin(), paths.end());
  }
  report::SummaryTable table;
  for (const auto& p : paths) table.rows.push_back(report::load_summary_row(p));
  table.validate();
  auto text = report::render_summary(table, options.format);
  if (options.output) {
    AtomicOutput out(*options.output);
    out.stream() << text;
    out.commit();
  }
  return {text};
}

}  // namespace radprep::pipeline
