#include "radprep/summary.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace radprep::report {

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string cell(const std::optional<double>& v, int decimals, const char* missing) {
  return v ? fixed(*v, decimals) : std::string(missing);
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void check_range(const std::optional<double>& v, double lo, double hi, const std::string& what) {
  if (v && !(*v >= lo && *v <= hi)) throw ValidationError(what + " mean outside its range");
}

}  // namespace

void SummaryTable::validate() const {
  for (const auto& r : rows) {
    check_range(r.rouge_l_f1, 0.0, 1.0, r.model_label + " ROUGE-L");
    check_range(r.bert_p, -1.0, 1.0, r.model_label + " BERT precision");
    check_range(r.bert_r, -1.0, 1.0, r.model_label + " BERT recall");
    check_range(r.bert_f1, -1.0, 1.0, r.model_label + " BERT F1");
    check_range(r.judge_mean, 0.0, 10.0, r.model_label + " judge");
  }
}

Format parse_format(const std::string& name) {
  if (name == "markdown" || name == "md") return Format::Markdown;
  if (name == "csv") return Format::Csv;
  throw ValidationError("unknown summary format: " + name);
}

std::string render_summary(const SummaryTable& table, Format format) {
  std::string out;
  if (format == Format::Csv) {
    out = "model,rougeL_f1,bert_p,bert_r,bert_f1,judge_score\n";
    for (const auto& r : table.rows) {
      out += csv_escape(r.model_label) + ',' + fixed(r.rouge_l_f1, 4) + ',' + cell(r.bert_p, 4, "") + ',' +
             cell(r.bert_r, 4, "") + ',' + cell(r.bert_f1, 4, "") + ',' + cell(r.judge_mean, 2, "") + '\n';
    }
    return out;
  }
  out = "| Model | ROUGE-L | BERT P | BERT R | BERT F1 | Judge Score |\n";
  out += "|---|---|---|---|---|---|\n";
  for (const auto& r : table.rows) {
    out += "| " + r.model_label + " | " + fixed(r.rouge_l_f1, 4) + " | " + cell(r.bert_p, 4, "-") + " | " +
           cell(r.bert_r, 4, "-") + " | " + cell(r.bert_f1, 4, "-") + " | " + cell(r.judge_mean, 2, "-") + " |\n";
  }
  if (!table.rows.empty()) {
    out += '\n';
    for (const auto& r : table.rows) {
      out += r.model_label + ": " + std::to_string(r.pairs_evaluated) + " pairs evaluated, " +
             std::to_string(r.judge_failures) + " judge failures\n";
    }
  }
  return out;
}

SummaryRow load_summary_row(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open summary: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    SummaryRow r;
    r.model_label = j.at("model").get<std::string>();
    r.rouge_l_f1 = j.at("rougeL_f1").get<double>();
    auto opt = [&](const char* key) -> std::optional<double> {
      const auto it = j.find(key);
      if (it == j.end() || it->is_null()) return std::nullopt;
      return it->get<double>();
    };
    r.bert_p = opt("bert_p");
    r.bert_r = opt("bert_r");
    r.bert_f1 = opt("bert_f1");
    r.judge_mean = opt("judge_mean");
    r.pairs_evaluated = j.value("pairs_evaluated", std::size_t{0});
    r.judge_failures = j.value("judge_failures", std::size_t{0});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("bad summary file ") + path.string() + ": " + e.what());
  }
}

void save_summary_row(const SummaryRow& row, const fs::path& path) {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  j["model"] = row.model_label;
  j["rougeL_f1"] = row.rouge_l_f1;
  j["bert_p"] = opt(row.bert_p);
  j["bert_r"] = opt(row.bert_r);
  j["bert_f1"] = opt(row.bert_f1);
  j["judge_mean"] = opt(row.judge_mean);
  j["pairs_evaluated"] = row.pairs_evaluated;
  j["judge_failures"] = row.judge_failures;
  AtomicOutput out(path);
  out.stream() << j.dump(2) << '\n';
  out.commit();
}

}  // namespace radprep::report
