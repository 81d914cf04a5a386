#include "radprep/judge.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "httplib.h"
#include "json.hpp"
#include "url.hpp"

namespace radprep::judge {

const std::vector<std::string>& default_criteria() {
  static const std::vector<std::string> kCriteria{
      "Missing findings: important findings stated in the reference impression that the generated impression leaves out.",
      "Irrelevant conclusions: conclusions in the generated impression that the reference impression does not support.",
      "Stylistic concordance: whether the generated impression reads like the reference impression in structure, "
      "ordering and concision.",
      "Precision of medical terminology: whether anatomical, pathological and modality terms are used correctly and "
      "specifically.",
  };
  return kCriteria;
}

const std::string& default_template() {
  static const std::string kTemplate =
      "You are an experienced radiologist. Compare a generated radiology impression with the reference impression "
      "written by the reporting radiologist for the same findings.\n"
      "\n"
      "Evaluate the generated impression against these criteria:\n"
      "{criteria}\n"
      "\n"
      "Rate how well the generated impression matches the reference impression on a scale from 0 to 10, where 0 "
      "means no agreement and 10 means it fully matches the reference. A higher score means a better match.\n"
      "\n"
      "Answer format:\n"
      "Line 1: the numeric score only (a number from 0 to 10).\n"
      "Following lines: an explanation of the score that names which criteria drove it.\n"
      "\n"
      "Reference impression:\n"
      "{reference}\n"
      "\n"
      "Generated impression:\n"
      "{generated}\n";
  return kTemplate;
}

namespace {

constexpr std::string_view kGenerated = "{generated}";
constexpr std::string_view kReference = "{reference}";
constexpr std::string_view kCriteria = "{criteria}";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string replace_all(std::string text, std::string_view needle, std::string_view value) {
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size())) {
    text.replace(pos, needle.size(), value);
  }
  return text;
}

}  // namespace

JudgePrompt::JudgePrompt(std::string template_text, std::vector<std::string> criteria, std::string version)
    : template_(std::move(template_text)), criteria_(std::move(criteria)), version_(std::move(version)) {
  if (count_occurrences(template_, kGenerated) != 1) {
    throw ValidationError("judge template must contain {generated} exactly once");
  }
  if (count_occurrences(template_, kReference) != 1) {
    throw ValidationError("judge template must contain {reference} exactly once");
  }
}

JudgePrompt JudgePrompt::defaults() { return JudgePrompt(default_template()); }

JudgePrompt JudgePrompt::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open judge template: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return JudgePrompt(ss.str(), default_criteria(), "file:" + path.filename().string());
}

std::string build_judge_prompt(std::string_view generated, std::string_view reference, const JudgePrompt& prompt) {
  if (trim(generated).empty()) throw EmptyInput("generated impression is empty");
  if (trim(reference).empty()) throw EmptyInput("reference impression is empty");

  std::string criteria;
  for (std::size_t i = 0; i < prompt.criteria().size(); ++i) {
    if (i) criteria += '\n';
    criteria += std::to_string(i + 1) + ". " + prompt.criteria()[i];
  }
  const std::string base = replace_all(prompt.template_text(), kCriteria, criteria);

  // Split around the two placeholders and splice the texts in.
  const auto g = base.find(kGenerated);
  const auto r = base.find(kReference);
  const bool ref_first = r < g;
  const auto first = ref_first ? r : g;
  const auto second = ref_first ? g : r;
  const auto first_len = ref_first ? kReference.size() : kGenerated.size();
  const auto second_len = ref_first ? kGenerated.size() : kReference.size();

  std::string out;
  out.reserve(base.size() + generated.size() + reference.size());
  out.append(base, 0, first);
  out += ref_first ? reference : generated;
  out.append(base, first + first_len, second - first - first_len);
  out += ref_first ? generated : reference;
  out.append(base, second + second_len);
  return out;
}

namespace {

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) != prefix[i]) return false;
  }
  return true;
}

void skip_chars(std::string_view& s, std::string_view set) {
  while (!s.empty() && set.find(s.front()) != std::string_view::npos) s.remove_prefix(1);
}

// Strips leading separators including the UTF-8 en and em dashes.
void skip_separators(std::string_view& s) {
  while (!s.empty()) {
    if (s.starts_with("\xE2\x80\x94") || s.starts_with("\xE2\x80\x93")) {
      s.remove_prefix(3);
    } else if (std::string_view(" \t*_-:.,;)]|").find(s.front()) != std::string_view::npos) {
      s.remove_prefix(1);
    } else {
      break;
    }
  }
}

}  // namespace

JudgeVerdict parse_verdict(std::string_view raw) {
  JudgeVerdict v;
  v.raw_response = std::string(raw);

  std::string_view rest = raw;
  std::string_view line;
  while (!rest.empty()) {
    const auto nl = rest.find('\n');
    line = rest.substr(0, nl);
    rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
    if (!trim(line).empty()) break;
    line = {};
  }
  line = trim(line);
  if (line.empty()) throw NoScoreFound("empty judge response");

  std::string_view s = line;
  skip_chars(s, " \t*#_>");
  for (const std::string_view label : {"final score", "overall score", "score", "rating", "grade"}) {
    if (starts_with_ci(s, label)) {
      s.remove_prefix(label.size());
      break;
    }
  }
  skip_chars(s, " \t*_:=");

  bool negative = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    negative = s.front() == '-';
    s.remove_prefix(1);
  }
  std::size_t digits = 0;
  while (digits < s.size() && std::isdigit(static_cast<unsigned char>(s[digits]))) ++digits;
  if (digits == 0) throw NoScoreFound("no score at the start of the judge response: " + std::string(line));
  std::size_t len = digits;
  if (len + 1 < s.size() && s[len] == '.' && std::isdigit(static_cast<unsigned char>(s[len + 1]))) {
    ++len;
    while (len < s.size() && std::isdigit(static_cast<unsigned char>(s[len]))) ++len;
  }
  const double value = std::strtod(std::string(s.substr(0, len)).c_str(), nullptr);
  s.remove_prefix(len);
  const double score = negative ? -value : value;
  if (!(score >= JudgePrompt::kScaleMin && score <= JudgePrompt::kScaleMax)) {
    throw ScoreOutOfRange("judge score " + std::to_string(score) + " is outside [0, 10]");
  }

  skip_chars(s, " \t*_");
  if (s.starts_with("/")) {
    s.remove_prefix(1);
    skip_chars(s, " \t");
    if (s.starts_with("10")) s.remove_prefix(2);
  } else if (starts_with_ci(s, "out of 10")) {
    s.remove_prefix(9);
  }
  skip_separators(s);

  std::string explanation(s);
  if (!trim(rest).empty()) {
    if (!explanation.empty()) explanation += '\n';
    explanation += rest;
  }
  v.score = score;
  v.explanation = std::string(trim(explanation));
  if (v.explanation.empty()) throw MissingExplanation("judge response has a score but no explanation");
  return v;
}

std::string chat_request_body(const ChatRequest& request) {
  nlohmann::ordered_json j;
  j["model"] = request.model;
  j["temperature"] = request.temperature;
  auto messages = nlohmann::ordered_json::array();
  if (!request.system_prompt.empty()) {
    messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
  }
  messages.push_back({{"role", "user"}, {"content", request.user_prompt}});
  j["messages"] = std::move(messages);
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::string chat_response_content(std::string_view body) {
  try {
    const auto j = nlohmann::json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw NoScoreFound(std::string("malformed chat-completion response: ") + e.what());
  }
}

void JudgeClientConfig::validate() const {
  if (endpoint.empty()) throw ValidationError("judge endpoint is not configured");
  if (model_name.empty()) throw ValidationError("judge model_name is empty");
  if (api_key_env.empty()) throw ValidationError("judge api_key_env is empty");
  if (max_concurrent < 1) throw ValidationError("judge max_concurrent must be >= 1");
}

struct HttpChatTransport::Impl {
  std::unique_ptr<httplib::Client> client;
  std::string path;
  std::string api_key;
};

HttpChatTransport::HttpChatTransport(const JudgeClientConfig& config) : impl_(std::make_unique<Impl>()) {
  config.validate();
  const char* key = std::getenv(config.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw AuthError("credential environment variable " + config.api_key_env + " is not set");
  }
  impl_->api_key = key;
  const auto url = detail::split_url(config.endpoint);
  impl_->client = std::make_unique<httplib::Client>(url.origin);
  impl_->path = url.path;
  impl_->client->set_connection_timeout(config.timeout);
  impl_->client->set_read_timeout(config.timeout);
  impl_->client->set_write_timeout(config.timeout);
}

HttpChatTransport::~HttpChatTransport() = default;

ChatResponse HttpChatTransport::post(const std::string& body) {
  httplib::Headers headers{{"Authorization", "Bearer " + impl_->api_key}};
  auto res = impl_->client->Post(impl_->path, headers, body, "application/json");
  if (!res) return {0, {}, httplib::to_string(res.error())};
  return {res->status, res->body, {}};
}

RateLimiter::RateLimiter(std::size_t requests_per_minute)
    : interval_(requests_per_minute == 0 ? std::chrono::nanoseconds(0)
                                         : std::chrono::nanoseconds(60'000'000'000LL /
                                                                    static_cast<long long>(requests_per_minute))),
      next_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
  if (interval_.count() == 0) return;
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mutex_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + interval_;
  }
  std::this_thread::sleep_until(slot);
}

JudgeClient::JudgeClient(JudgeClientConfig config, std::shared_ptr<ChatTransport> transport, JudgePrompt prompt,
                         Sleeper sleeper)
    : config_(std::move(config)),
      transport_(std::move(transport)),
      prompt_(std::move(prompt)),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })),
      limiter_(config_.requests_per_minute) {
  if (config_.max_concurrent < 1) throw ValidationError("judge max_concurrent must be >= 1");
  if (!transport_) throw ValidationError("judge client needs a transport");
}

JudgeVerdict JudgeClient::judge_pair(std::string_view generated, std::string_view reference) {
  ChatRequest request;
  request.model = config_.model_name;
  request.system_prompt = "You are a careful radiology evaluator.";
  request.user_prompt = build_judge_prompt(generated, reference, prompt_);
  request.temperature = 0.0;
  const std::string body = chat_request_body(request);

  const std::size_t max_attempts = config_.max_retries + 1;
  std::string last_error;
  for (std::size_t attempt = 1; attempt <= max_attempts; ++attempt) {
    limiter_.acquire();
    const ChatResponse res = transport_->post(body);
    if (res.status == 0) {
      last_error = "transport failure: " + res.error;
    } else if (res.status == 401 || res.status == 403) {
      throw AuthError("judge endpoint refused the credential (HTTP " + std::to_string(res.status) + ")");
    } else if (res.status == 429) {
      last_error = RateLimited("judge endpoint rate limited the request (HTTP 429)").what();
    } else if (res.status >= 500) {
      last_error = "judge endpoint server error (HTTP " + std::to_string(res.status) + ")";
    } else if (res.status >= 400) {
      throw RequestRejected("judge endpoint rejected the request (HTTP " + std::to_string(res.status) + "): " + res.body);
    } else {
      try {
        JudgeVerdict v = parse_verdict(chat_response_content(res.body));
        v.attempts = attempt;
        return v;
      } catch (const JudgeError& e) {
        last_error = e.what();
      }
    }
    if (attempt < max_attempts) {
      sleeper_(config_.backoff_base * (1LL << std::min<std::size_t>(attempt - 1, 30)));
    }
  }
  throw ExhaustedRetries(max_attempts, last_error);
}

std::string to_json_line(const VerdictRow& row) {
  nlohmann::ordered_json j;
  j["record_id"] = row.record_id;
  j["score"] = row.score;
  j["explanation"] = row.explanation;
  j["model_name"] = row.model_name;
  j["attempts"] = row.attempts;
  j["timestamp"] = row.timestamp;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

VerdictRow verdict_from_json_line(const std::string& line, std::size_t line_number) {
  try {
    const auto j = nlohmann::json::parse(line);
    VerdictRow r;
    r.record_id = j.at("record_id").get<std::string>();
    r.score = j.at("score").get<double>();
    r.explanation = j.at("explanation").get<std::string>();
    r.model_name = j.at("model_name").get<std::string>();
    r.attempts = j.at("attempts").get<std::size_t>();
    r.timestamp = j.at("timestamp").get<std::string>();
    if (!(r.score >= JudgePrompt::kScaleMin && r.score <= JudgePrompt::kScaleMax)) {
      throw ParseError(line_number, "verdict score outside [0, 10]");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_number, std::string("bad verdict row: ") + e.what());
  }
}

std::vector<VerdictRow> read_verdicts(const fs::path& path) {
  std::vector<VerdictRow> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    const bool last = in.peek() == std::char_traits<char>::eof();
    try {
      out.push_back(verdict_from_json_line(line, n));
    } catch (const ParseError&) {
      if (!last) throw;
    }
  }
  return out;
}

JudgeCorpusResult judge_corpus(std::span<const JudgeItem> items, JudgeClient& client, const fs::path& verdict_path) {
  if (items.empty()) throw EmptyCorpus("judge corpus is empty");
  JudgeCorpusResult result;

  std::unordered_map<std::string, VerdictRow> done;
  for (auto& row : read_verdicts(verdict_path)) done[row.record_id] = std::move(row);

  std::vector<const JudgeItem*> todo;
  std::unordered_set<std::string> queued;
  for (const auto& item : items) {
    if (done.contains(item.record_id)) {
      ++result.skipped;
    } else if (queued.insert(item.record_id).second) {
      todo.push_back(&item);
    }
  }

  if (verdict_path.has_parent_path()) fs::create_directories(verdict_path.parent_path());
  // A partial last row from an interrupted run was skipped above; cut it off
  // so new rows start on a clean line.
  {
    std::ifstream probe(verdict_path, std::ios::binary);
    if (probe) {
      const std::string data((std::istreambuf_iterator<char>(probe)), std::istreambuf_iterator<char>());
      if (!data.empty() && data.back() != '\n') {
        const auto keep = data.rfind('\n');
        probe.close();
        fs::resize_file(verdict_path, keep == std::string::npos ? 0 : keep + 1);
      }
    }
  }
  std::ofstream out(verdict_path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open verdict file: " + verdict_path.string());

  std::mutex writer;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr fatal;
  const std::size_t workers = std::min(client.config().max_concurrent, todo.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < todo.size() && !abort; i = next.fetch_add(1)) {
          const JudgeItem& item = *todo[i];
          try {
            const JudgeVerdict v = client.judge_pair(item.generated, item.reference);
            VerdictRow row{item.record_id, v.score, v.explanation, client.config().model_name, v.attempts,
                           utc_timestamp()};
            std::lock_guard lock(writer);
            ++result.requested;
            out << to_json_line(row) << '\n';
            out.flush();
            done[row.record_id] = std::move(row);
          } catch (const AuthError&) {
            std::lock_guard lock(writer);
            ++result.requested;
            if (!fatal) fatal = std::current_exception();
            abort = true;
          } catch (const std::exception& e) {
            std::lock_guard lock(writer);
            ++result.requested;
            result.failures.push_back({item.record_id, e.what()});
          }
        }
      });
    }
  }
  if (fatal) std::rethrow_exception(fatal);

  std::unordered_set<std::string> emitted;
  double sum = 0.0;
  for (const auto& item : items) {
    const auto it = done.find(item.record_id);
    if (it == done.end() || !emitted.insert(item.record_id).second) continue;
    result.verdicts.push_back(it->second);
    sum += it->second.score;
  }
  if (!result.verdicts.empty()) result.mean_score = sum / static_cast<double>(result.verdicts.size());
  std::sort(result.failures.begin(), result.failures.end(),
            [](const JudgeFailure& a, const JudgeFailure& b) { return a.record_id < b.record_id; });
  return result;
}

}  // namespace radprep::judge
