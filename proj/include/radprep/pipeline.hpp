#pragma once

// Subcommand implementations behind the radprep CLI. Each command reads the
// workdir layout below, writes its outputs atomically and returns a
// human-readable report.
//
//   <workdir>/dataset.jsonl         ingest
//   <workdir>/ingest_report.json
//   <workdir>/pairs/train.jsonl     prepare
//   <workdir>/pairs/eval.jsonl
//   <workdir>/split.tsv
//   <workdir>/rejections.csv
//   <workdir>/prepare_stats.json
//   <workdir>/packed.jsonl          pack
//   <workdir>/pack_stats.json
//   <workdir>/eval/<label>/...      eval (scores.csv, summary.json, verdicts.jsonl)

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "radprep/common.hpp"
#include "radprep/corpus.hpp"
#include "radprep/curation.hpp"
#include "radprep/judge.hpp"
#include "radprep/packing.hpp"
#include "radprep/summary.hpp"

namespace radprep::pipeline {

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A record_id present in only one of the generated/reference files.
class AlignmentError : public ValidationError {
 public:
  explicit AlignmentError(const std::string& record_id, const std::string& side)
      : ValidationError("record_id '" + record_id + "' appears only in the " + side + " file"), record_id_(record_id) {}
  const std::string& record_id() const noexcept { return record_id_; }

 private:
  std::string record_id_;
};

class WorkdirBusy : public Error {
 public:
  using Error::Error;
};

enum class TokenizerKind { Whitespace, Bpe };
enum class EmbedderKind { None, OneHot, Hashed, Service };

struct PackingSettings {
  std::size_t capacity = 2048;
  bool separator = true;
  packing::TruncationPolicy truncation = packing::TruncationPolicy::TruncateInput;
  TokenizerKind tokenizer = TokenizerKind::Whitespace;
  std::optional<fs::path> vocabulary_file;  // whitespace: one word per line
  std::optional<fs::path> merges_file;      // bpe: saved merges
  std::size_t bpe_merges = 2000;            // bpe without merges_file: merges learned from the pairs
  std::size_t bpe_training_pairs = 5000;
  std::optional<fs::path> cache_dir;  // default <workdir>/token_cache
};

struct MetricSettings {
  EmbedderKind embedder = EmbedderKind::None;
  std::size_t dimension = 256;
  double rouge_l_beta = 1.0;
  std::string service_model = "default";
  std::size_t service_max_batch = 32;
};

/// Declarative JSON config. String values may contain ${VAR}, replaced by
/// the environment variable VAR (an unset variable is a ConfigError).
/// Relative paths resolve against the config file's directory.
struct PipelineConfig {
  fs::path workdir = "work";
  std::uint64_t master_seed = 0;
  unsigned threads = 1;

  std::optional<fs::path> source_path;
  corpus::SourceSchema schema;
  corpus::SectionMarkers markers;
  std::optional<fs::path> deid_patterns_file;

  curation::CurationConfig curation;
  std::optional<fs::path> instructions_file;
  std::optional<fs::path> prepends_file;
  std::optional<fs::path> holdout_file;

  PackingSettings packing;
  MetricSettings metrics;

  judge::JudgeClientConfig judge;
  std::optional<fs::path> judge_template_file;

  static PipelineConfig from_json_text(const std::string& text, const fs::path& base_dir);
  static PipelineConfig load(const fs::path& path);

  /// Checks value ranges and that every referenced input file exists.
  /// Throws ConfigError.
  void validate() const;
  /// Applies catalog files and the master seed to `curation`.
  curation::CurationConfig resolved_curation() const;
};

/// Replaces ${NAME} with the environment variable NAME.
std::string interpolate_env(const std::string& text);

/// Exclusive advisory lock on <workdir>/.lock, held for the object's life.
class WorkdirLock {
 public:
  explicit WorkdirLock(const fs::path& workdir);
  ~WorkdirLock();
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  int fd_ = -1;
};

struct CommandReport {
  std::string text;
};

CommandReport cmd_ingest(const PipelineConfig& config);
CommandReport cmd_prepare(const PipelineConfig& config);
CommandReport cmd_pack(const PipelineConfig& config);

struct EvalOptions {
  fs::path generated;
  fs::path reference;
  std::string label = "model";
  bool judge = false;
  report::Format format = report::Format::Markdown;
};

/// Aligned (record_id, generated, reference) triples in reference order.
/// Each file is JSON-Lines with "record_id" plus a text field: the first of
/// "generated", "impression", "output", "text" present.
std::vector<judge::JudgeItem> load_aligned_pairs(const fs::path& generated, const fs::path& reference);

CommandReport cmd_eval(const PipelineConfig& config, const EvalOptions& options);

struct JudgeOptions {
  fs::path generated;
  fs::path reference;
  std::optional<fs::path> output;  // default <workdir>/verdicts.jsonl
};

CommandReport cmd_judge(const PipelineConfig& config, const JudgeOptions& options);

struct ReportOptions {
  std::vector<fs::path> summaries;  // default: every <workdir>/eval/*/summary.json
  report::Format format = report::Format::Markdown;
  std::optional<fs::path> output;
};

CommandReport cmd_report(const PipelineConfig& config, const ReportOptions& options);

}  // namespace radprep::pipeline
