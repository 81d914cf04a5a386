#pragma once

// LLM-as-judge scoring: prompt construction, verdict parsing, a retrying
// chat-completion client and resumable corpus judging.

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "radprep/common.hpp"

namespace radprep::judge {

class JudgeError : public Error {
 public:
  using Error::Error;
};

class NoScoreFound : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class ScoreOutOfRange : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class MissingExplanation : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class AuthError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class RateLimited : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class TransportError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
/// Non-retryable rejection of the request itself (4xx other than 401/403/429).
class RequestRejected : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class ExhaustedRetries : public JudgeError {
 public:
  ExhaustedRetries(std::size_t attempts, std::string last_error)
      : JudgeError("gave up after " + std::to_string(attempts) + " attempts: " + last_error),
        attempts_(attempts),
        last_error_(std::move(last_error)) {}
  std::size_t attempts() const noexcept { return attempts_; }
  const std::string& last_error() const noexcept { return last_error_; }

 private:
  std::size_t attempts_;
  std::string last_error_;
};
class EmptyInput : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class EmptyCorpus : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline constexpr std::string_view kDefaultPromptVersion = "judge-prompt/v1";

/// Default template; {generated} and {reference} are the placeholders.
const std::string& default_template();
const std::vector<std::string>& default_criteria();

class JudgePrompt {
 public:
  /// Throws ValidationError unless each placeholder occurs exactly once.
  explicit JudgePrompt(std::string template_text, std::vector<std::string> criteria = default_criteria(),
                       std::string version = std::string(kDefaultPromptVersion));
  static JudgePrompt defaults();
  static JudgePrompt load(const fs::path& path);

  const std::string& template_text() const { return template_; }
  const std::vector<std::string>& criteria() const { return criteria_; }
  const std::string& version() const { return version_; }
  static constexpr double kScaleMin = 0.0;
  static constexpr double kScaleMax = 10.0;

 private:
  std::string template_;
  std::vector<std::string> criteria_;
  std::string version_;
};

/// Instantiates the template. A "{criteria}" placeholder, if present, is
/// replaced by the numbered criteria list. Texts are substituted last so
/// braces inside them are never interpreted. Throws EmptyInput on blank
/// texts.
std::string build_judge_prompt(std::string_view generated, std::string_view reference, const JudgePrompt& prompt);

struct JudgeVerdict {
  double score = 0.0;
  std::string explanation;
  std::string raw_response;
  std::size_t attempts = 0;
};

/// The score is the number at the start of the first nonblank line, after an
/// optional label such as "Score:" or "**Rating**:" and optionally followed
/// by "/10". Everything after it, minus leading separators, is the
/// explanation. Throws NoScoreFound, ScoreOutOfRange (outside [0, 10], never
/// clamped) or MissingExplanation.
JudgeVerdict parse_verdict(std::string_view raw);

struct ChatRequest {
  std::string model;
  std::string system_prompt;
  std::string user_prompt;
  double temperature = 0.0;
};

/// Serializes a chat-completion request body. Never contains the credential.
std::string chat_request_body(const ChatRequest& request);
/// Pulls choices[0].message.content out of a chat-completion response.
std::string chat_response_content(std::string_view body);

struct ChatResponse {
  int status = 0;  // HTTP status; 0 for a connection failure
  std::string body;
  std::string error;  // transport detail when status == 0
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual ChatResponse post(const std::string& body) = 0;
};

struct JudgeClientConfig {
  std::string endpoint;  // full URL of the chat-completions resource
  std::string model_name = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  std::size_t max_retries = 3;
  std::chrono::milliseconds backoff_base{1000};
  std::size_t max_concurrent = 4;
  std::size_t requests_per_minute = 0;  // 0 disables rate limiting
  std::chrono::seconds timeout{60};

  void validate() const;
};

/// HTTP(S) transport built on cpp-httplib. The bearer token is read from
/// the environment variable named in the config at construction; AuthError
/// if it is unset or empty.
class HttpChatTransport final : public ChatTransport {
 public:
  explicit HttpChatTransport(const JudgeClientConfig& config);
  ~HttpChatTransport() override;
  ChatResponse post(const std::string& body) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Spaces request starts at least 60/rpm seconds apart across all threads.
class RateLimiter {
 public:
  explicit RateLimiter(std::size_t requests_per_minute);
  void acquire();

 private:
  std::chrono::nanoseconds interval_;
  std::mutex mutex_;
  std::chrono::steady_clock::time_point next_;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

class JudgeClient {
 public:
  JudgeClient(JudgeClientConfig config, std::shared_ptr<ChatTransport> transport, JudgePrompt prompt = JudgePrompt::defaults(),
              Sleeper sleeper = {});

  /// Sends the prompt, retrying transport failures, 429/5xx responses and
  /// unparseable replies up to max_retries times with backoff
  /// base * 2^(attempt-1). AuthError and RequestRejected are raised at once;
  /// otherwise ExhaustedRetries after max_retries + 1 attempts.
  JudgeVerdict judge_pair(std::string_view generated, std::string_view reference);

  const JudgeClientConfig& config() const { return config_; }
  const JudgePrompt& prompt() const { return prompt_; }

 private:
  JudgeClientConfig config_;
  std::shared_ptr<ChatTransport> transport_;
  JudgePrompt prompt_;
  Sleeper sleeper_;
  RateLimiter limiter_;
};

struct JudgeItem {
  std::string record_id;
  std::string generated;
  std::string reference;
};

struct VerdictRow {
  std::string record_id;
  double score = 0.0;
  std::string explanation;
  std::string model_name;
  std::size_t attempts = 0;
  std::string timestamp;
};

std::string to_json_line(const VerdictRow& row);
VerdictRow verdict_from_json_line(const std::string& line, std::size_t line_number);
/// Rows from a verdict file; a missing file yields no rows. A truncated last
/// line (interrupted write) is ignored.
std::vector<VerdictRow> read_verdicts(const fs::path& path);

struct JudgeFailure {
  std::string record_id;
  std::string error;
};

struct JudgeCorpusResult {
  std::size_t requested = 0;  // pairs sent to the endpoint in this run
  std::size_t skipped = 0;    // already present in the verdict file
  std::vector<JudgeFailure> failures;
  std::vector<VerdictRow> verdicts;  // every verdict for the given items
  std::optional<double> mean_score;  // absent when nothing was judged
};

/// Judges every item whose record_id is not already in `verdict_path`,
/// with at most max_concurrent requests in flight. Each verdict is appended
/// and flushed as soon as it arrives, so an interrupted run resumes where it
/// stopped. Failed items are reported, not written.
JudgeCorpusResult judge_corpus(std::span<const JudgeItem> items, JudgeClient& client, const fs::path& verdict_path);

}  // namespace radprep::judge
