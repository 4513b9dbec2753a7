#pragma once

// Sentence classification by an external chat-completion service, or by a
// recorded fixture file when running offline.
//
// Live requests carry up to `batch_size` sentences each, with the whole trace
// as context, and the model is asked to answer one "<index>: <category>" line
// per sentence. Fixture files are JSON-lines:
//   {"trace_id": "t0", "sentence_index": 3, "category": "backtracking"}

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "steerlab/error.hpp"
#include "steerlab/trace_corpus.hpp"

namespace steerlab {

enum class JudgeMode { live, fixture };

std::string_view to_string(JudgeMode m);
JudgeMode judge_mode_from_string(std::string_view s);

struct JudgeConfig {
  JudgeMode mode = JudgeMode::fixture;
  std::string endpoint;  // full URL of the chat-completions route
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  Taxonomy taxonomy;
  std::string prompt_template = default_prompt_template();
  std::filesystem::path fixture_path;
  std::size_t batch_size = 20;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{60};
  std::size_t max_in_flight = 4;

  static std::string default_prompt_template();
  // Checks the fields the mode needs. Live mode also requires the key
  // variable to be set.
  void validate() const;
};

struct JudgeWarning {
  std::string trace_id;
  std::size_t sentence_index = 0;
  std::string message;
};

struct ClassifiedTrace {
  std::string trace_id;
  std::vector<SentenceSpan> sentences;
  std::vector<JudgeWarning> warnings;
};

// Response the judge could not be parsed from. raw() is the text returned.
class JudgeResponseError : public Error {
 public:
  JudgeResponseError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

// Connection failures, timeouts and retryable statuses, after all retries.
class JudgeNetworkError : public Error {
 public:
  using Error::Error;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

class JudgeTransport {
 public:
  virtual ~JudgeTransport() = default;
  // Throws JudgeNetworkError when no response was received.
  virtual HttpResponse post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                            const std::string& body) = 0;
};

std::shared_ptr<JudgeTransport> make_http_transport(std::chrono::seconds timeout);

// The parts of a live request that depend only on config and sentences.
std::string render_prompt(const JudgeConfig& config, const ReasoningTrace& trace, std::size_t first,
                          std::size_t last);
std::string build_request_body(const JudgeConfig& config, const ReasoningTrace& trace, std::size_t first,
                               std::size_t last);

// Extracts choices[0].message.content from a chat-completion response body.
std::string response_content(const std::string& body);
// Parses "<index>: <label>" lines. Every index in [first, last) must appear
// exactly once; other lines are ignored.
std::map<std::size_t, std::string> parse_labeled_lines(const std::string& content, std::size_t first,
                                                       std::size_t last);

using SleepFn = std::function<void(std::chrono::milliseconds)>;

class JudgeClient {
 public:
  // The transport is only used in live mode; when null an HTTP transport is
  // created on first use.
  explicit JudgeClient(JudgeConfig config, std::shared_ptr<JudgeTransport> transport = nullptr,
                       SleepFn sleep = {});

  const JudgeConfig& config() const { return config_; }

  ClassifiedTrace classify_sentences(const ReasoningTrace& trace) const;
  // Traces are classified concurrently, up to max_in_flight at a time.
  // Output order follows input order.
  std::vector<ClassifiedTrace> classify_corpus(std::span<const ReasoningTrace> traces) const;

 private:
  ClassifiedTrace classify_fixture(const ReasoningTrace& trace) const;
  ClassifiedTrace classify_live(const ReasoningTrace& trace) const;
  std::string request(const std::string& body) const;

  JudgeConfig config_;
  std::shared_ptr<JudgeTransport> transport_;
  SleepFn sleep_;
  std::map<std::pair<std::string, std::size_t>, std::string> fixture_;
};

}  // namespace steerlab
