#pragma once

// Shared test helpers: scratch directories, file I/O, a child-process runner
// for the CLI and seeded synthetic report generators.

#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "radprep-test-XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::size_t count_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

struct CliResult {
  int status = -1;
  std::string out;
  std::string err;
  double seconds = 0.0;
  long max_rss_kb = 0;
};

/// Runs the radprep binary with `args`; stdout and stderr are captured.
inline CliResult run_cli(const std::vector<std::string>& args, const std::vector<std::string>& env = {}) {
  static int counter = 0;
  const fs::path base = fs::temp_directory_path() / ("radprep-cli-" + std::to_string(::getpid()) + "-" +
                                                     std::to_string(counter++));
  const auto out_path = base.string() + ".out";
  const auto err_path = base.string() + ".err";
  const auto start = std::chrono::steady_clock::now();
  const pid_t pid = ::fork();
  if (pid == 0) {
    std::FILE* o = std::freopen(out_path.c_str(), "w", stdout);
    std::FILE* e = std::freopen(err_path.c_str(), "w", stderr);
    if (o == nullptr || e == nullptr) ::_exit(127);
    for (const auto& kv : env) ::putenv(const_cast<char*>(kv.c_str()));
    std::vector<char*> argv;
    argv.push_back(const_cast<char*>(RADPREP_CLI_PATH));
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execv(RADPREP_CLI_PATH, argv.data());
    ::_exit(127);
  }
  CliResult r;
  int status = 0;
  struct rusage usage {};
  ::wait4(pid, &status, 0, &usage);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.status = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  r.max_rss_kb = usage.ru_maxrss;
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  fs::remove(out_path);
  fs::remove(err_path);
  return r;
}

// ---- synthetic reports ----

// Lower-case clinical vocabulary: no entry can start a name construct.
inline const std::vector<std::string>& clinical_words() {
  static const std::vector<std::string> kWords{
      "mild",      "moderate",  "severe",     "stable",    "unchanged", "new",        "small",    "large",
      "left",      "right",     "bilateral",  "upper",     "lower",     "lobe",       "lung",     "pleural",
      "effusion",  "opacity",   "nodule",     "mass",      "fracture",  "cardiac",    "silhouette", "normal",
      "size",      "contour",   "no",         "acute",     "process",   "airspace",   "disease",  "consolidation",
      "edema",     "atelectasis", "there",    "is",        "are",       "with",       "without",  "the",
      "of",        "and",       "in",         "at",        "base",      "apex",       "hilar",    "mediastinal",
      "contours",  "within",    "limits",     "degenerative", "changes", "spine",     "osseous",  "structures",
      "intact",    "tube",      "line",       "tip",       "projects",  "over",       "vena",     "cava",
      "liver",     "spleen",    "kidney",     "cyst",      "lesion",    "enhancing",  "hypodense", "focal",
      "diffuse",   "wall",      "thickening", "bowel",     "gas",       "pattern",    "nonobstructive", "calcified",
      "granuloma", "scarring",  "emphysema",  "hyperinflation", "vascular", "congestion", "cm",     "mm"};
  return kWords;
}

inline std::string capitalize(std::string w) {
  if (!w.empty() && w[0] >= 'a' && w[0] <= 'z') w[0] = static_cast<char>(w[0] - 'a' + 'A');
  return w;
}

/// One clean sentence of `words` words ending in a period.
inline std::string clean_sentence(std::mt19937_64& rng, std::size_t words) {
  const auto& pool = clinical_words();
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::string s;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) s += ' ';
    s += i == 0 ? capitalize(pool[pick(rng)]) : pool[pick(rng)];
  }
  return s + '.';
}

inline const std::vector<std::string>& surnames() {
  static const std::vector<std::string> k{"Smith", "Nguyen", "Garcia", "O'Brien", "Lee", "Patel", "Kowalski",
                                          "Johnson", "Okafor", "Haddad", "Fischer", "Moreau", "Tanaka", "Rossi"};
  return k;
}

inline const std::vector<std::string>& given_names() {
  static const std::vector<std::string> k{"John", "Maria", "Wei", "Aisha", "Peter", "Elena", "Omar", "Grace",
                                          "Lars", "Priya", "Tomas", "Nadia"};
  return k;
}

/// A sentence containing a personal name in one of the default pattern
/// classes: title, attribution phrase, surname-comma-given, credential.
inline std::string name_sentence(std::mt19937_64& rng, int cls) {
  std::uniform_int_distribution<std::size_t> ps(0, surnames().size() - 1), pg(0, given_names().size() - 1);
  const auto& last = surnames()[ps(rng)];
  const auto& first = given_names()[pg(rng)];
  switch (cls % 4) {
    case 0: {
      static const char* titles[] = {"Dr.", "Mr.", "Ms.", "Mrs."};
      std::uniform_int_distribution<int> pt(0, 3);
      return std::string("Findings were reviewed with ") + titles[pt(rng)] + " " + last + " in person.";
    }
    case 1: {
      static const char* phrases[] = {"Dictated by", "Signed by", "Reviewed by", "Discussed with"};
      std::uniform_int_distribution<int> pp(0, 3);
      return std::string(phrases[pp(rng)]) + " " + first + " " + last + " today.";
    }
    case 2:
      return "Results called to " + last + ", " + first + " at the bedside.";
    default: {
      static const char* creds[] = {"MD", "DO", "RN", "NP"};
      std::uniform_int_distribution<int> pc(0, 3);
      return "Report prepared by " + first + " " + last + ", " + creds[pc(rng)] + " on the ward.";
    }
  }
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

/// Clean findings of exactly `words` words, split into sentences of 3..12.
inline std::string findings_text(std::mt19937_64& rng, std::size_t words) {
  std::uniform_int_distribution<std::size_t> len(3, 12);
  std::string out;
  while (words > 0) {
    std::size_t n = std::min(words, len(rng));
    if (words - n > 0 && words - n < 3) n = words;  // no sentence shorter than three words
    if (!out.empty()) out += ' ';
    out += clean_sentence(rng, n);
    words -= n;
  }
  return out;
}

enum class Defect { None, ShortFindings, EmptyImpression };

/// One CSV row in the default schema (id,exam_code,report,impression,date).
/// The impression lives in the report text after an IMPRESSION: marker and
/// the impression column stays empty.
inline std::string report_row(const std::string& id, std::mt19937_64& rng, std::size_t findings_words,
                              Defect defect = Defect::None) {
  const std::size_t words = defect == Defect::ShortFindings ? 9 : findings_words;
  std::string report = "FINDINGS: " + findings_text(rng, words);
  if (defect != Defect::EmptyImpression) report += " IMPRESSION: " + clean_sentence(rng, 6);
  return id + ",CT CHEST," + csv_quote(report) + ",,2024-01-01\n";
}

inline const char* kCsvHeader = "id,exam_code,report,impression,date\n";

}  // namespace testsupport
