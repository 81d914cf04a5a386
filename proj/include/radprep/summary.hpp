#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "radprep/common.hpp"

namespace radprep::report {

struct SummaryRow {
  std::string model_label;
  double rouge_l_f1 = 0.0;
  std::optional<double> bert_p;
  std::optional<double> bert_r;
  std::optional<double> bert_f1;
  std::optional<double> judge_mean;
  std::size_t pairs_evaluated = 0;
  std::size_t judge_failures = 0;
};

struct SummaryTable {
  std::vector<SummaryRow> rows;

  /// Throws ValidationError when a mean is outside its metric's range.
  void validate() const;
};

enum class Format { Markdown, Csv };

Format parse_format(const std::string& name);

/// Columns: model, ROUGE-L, BERT P, BERT R, BERT F1, judge score. ROUGE and
/// BERT values use 4 decimals, the judge mean 2; missing values render as
/// "-" (markdown) or empty (CSV). An empty table renders the header only.
std::string render_summary(const SummaryTable& table, Format format);

/// Summary row as written by `radprep eval` (summary.json).
SummaryRow load_summary_row(const fs::path& path);
void save_summary_row(const SummaryRow& row, const fs::path& path);

}  // namespace radprep::report
