#include "steerlab/judge_client.hpp"

#include <atomic>
#include <cctype>
#include <cstdlib>
#include <thread>

#include <json.hpp>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "binary_io.hpp"

namespace steerlab {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

void replace_all(std::string& s, std::string_view from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

std::string normalize_label(std::string_view raw) {
  std::string s = trim(raw);
  while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';')) s.pop_back();
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'' || s.front() == '`') && s.back() == s.front()) {
    s = s.substr(1, s.size() - 2);
  }
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return trim(s);
}

class HttpTransport : public JudgeTransport {
 public:
  explicit HttpTransport(std::chrono::seconds timeout) : timeout_(timeout) {}

  HttpResponse post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                    const std::string& body) override {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("judge endpoint must be an http(s) URL: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(origin);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) throw JudgeNetworkError("request to " + origin + " failed: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }

 private:
  std::chrono::seconds timeout_;
};

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

std::string_view to_string(JudgeMode m) { return m == JudgeMode::live ? "live" : "fixture"; }

JudgeMode judge_mode_from_string(std::string_view s) {
  if (s == "live") return JudgeMode::live;
  if (s == "fixture") return JudgeMode::fixture;
  throw ValidationError("unknown judge mode '" + std::string(s) + "' (expected live or fixture)");
}

std::string JudgeConfig::default_prompt_template() {
  return "You label the sentences of a reasoning trace. Categories: {taxonomy}.\n"
         "\n"
         "Full trace, for context:\n"
         "{context}\n"
         "\n"
         "Sentences to label:\n"
         "{sentence}\n"
         "\n"
         "Reply with exactly one line per sentence, formatted as `<index>: <category>`, "
         "using only the categories listed above.";
}

void JudgeConfig::validate() const {
  if (taxonomy.labels().empty()) throw ValidationError("judge taxonomy is empty");
  if (batch_size == 0) throw ValidationError("judge batch_size must be at least 1");
  if (max_retries < 0) throw ValidationError("judge max_retries must be non-negative");
  if (max_in_flight == 0) throw ValidationError("judge max_in_flight must be at least 1");
  if (mode == JudgeMode::fixture) {
    if (fixture_path.empty()) throw ValidationError("fixture mode needs a fixture file");
    if (!std::filesystem::is_regular_file(fixture_path)) {
      throw NotFoundError("judge fixture file not found: " + fixture_path.string());
    }
    return;
  }
  if (endpoint.empty()) throw ValidationError("live mode needs an endpoint URL");
  if (model.empty()) throw ValidationError("live mode needs a model name");
  if (api_key_env.empty()) throw ValidationError("live mode needs the name of the API key environment variable");
  const char* key = std::getenv(api_key_env.c_str());
  if (key == nullptr || *key == '\0') throw ValidationError("environment variable " + api_key_env + " is not set");
}

std::shared_ptr<JudgeTransport> make_http_transport(std::chrono::seconds timeout) {
  return std::make_shared<HttpTransport>(timeout);
}

std::string render_prompt(const JudgeConfig& config, const ReasoningTrace& trace, std::size_t first,
                          std::size_t last) {
  std::string taxonomy;
  for (const auto& l : config.taxonomy.labels()) taxonomy += (taxonomy.empty() ? "" : ", ") + l;
  std::string sentences;
  for (std::size_t i = first; i < last; ++i) sentences += std::to_string(i) + ": " + trim(trace.sentence_text(i)) + "\n";
  if (!sentences.empty()) sentences.pop_back();

  std::string prompt = config.prompt_template;
  replace_all(prompt, "{taxonomy}", taxonomy);
  replace_all(prompt, "{context}", trace.text(0, trace.size()));
  replace_all(prompt, "{sentence}", sentences);
  return prompt;
}

std::string build_request_body(const JudgeConfig& config, const ReasoningTrace& trace, std::size_t first,
                               std::size_t last) {
  json body = {
      {"model", config.model},
      {"messages", json::array({{{"role", "user"}, {"content", render_prompt(config, trace, first, last)}}})},
      {"temperature", 0},
  };
  return body.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string response_content(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw JudgeResponseError(std::string("judge response is not JSON: ") + e.what(), body);
  }
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw JudgeResponseError("judge response has no choices[0].message.content", body);
  }
}

std::map<std::size_t, std::string> parse_labeled_lines(const std::string& content, std::size_t first,
                                                       std::size_t last) {
  std::map<std::size_t, std::string> labels;
  std::size_t pos = 0;
  while (pos <= content.size()) {
    const auto nl = content.find('\n', pos);
    const std::string line = trim(std::string_view(content).substr(pos, nl == std::string::npos ? nl : nl - pos));
    pos = nl == std::string::npos ? content.size() + 1 : nl + 1;

    const auto colon = line.find(':');
    if (colon == std::string::npos || colon == 0) continue;
    std::string idx = trim(std::string_view(line).substr(0, colon));
    if (!idx.empty() && idx.front() == '[' && idx.back() == ']') idx = idx.substr(1, idx.size() - 2);
    if (idx.empty() || idx.find_first_not_of("0123456789") != std::string::npos || idx.size() > 9) continue;
    const std::size_t i = std::stoul(idx);
    if (i < first || i >= last) {
      throw JudgeResponseError("judge labelled sentence " + idx + " outside the requested range", content);
    }
    if (!labels.emplace(i, normalize_label(std::string_view(line).substr(colon + 1))).second) {
      throw JudgeResponseError("judge labelled sentence " + idx + " twice", content);
    }
  }
  for (std::size_t i = first; i < last; ++i) {
    if (!labels.count(i)) throw JudgeResponseError("judge gave no label for sentence " + std::to_string(i), content);
  }
  return labels;
}

JudgeClient::JudgeClient(JudgeConfig config, std::shared_ptr<JudgeTransport> transport, SleepFn sleep)
    : config_(std::move(config)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
  config_.validate();
  if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  if (config_.mode == JudgeMode::fixture) {
    const std::string text = detail::read_text_file(config_.fixture_path);
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      const std::string line = trim(std::string_view(text).substr(pos, nl == std::string::npos ? nl : nl - pos));
      pos = nl == std::string::npos ? text.size() : nl + 1;
      ++line_no;
      if (line.empty()) continue;
      const std::string where = config_.fixture_path.string() + ":" + std::to_string(line_no) + ": ";
      try {
        const json j = json::parse(line);
        auto key = std::make_pair(j.at("trace_id").get<std::string>(), j.at("sentence_index").get<std::size_t>());
        if (!fixture_.emplace(std::move(key), j.at("category").get<std::string>()).second) {
          throw FormatError(where + "duplicate fixture entry");
        }
      } catch (const json::exception& e) {
        throw FormatError(where + e.what());
      }
    }
  } else if (!transport_) {
    transport_ = make_http_transport(config_.timeout);
  }
}

ClassifiedTrace JudgeClient::classify_sentences(const ReasoningTrace& trace) const {
  ClassifiedTrace out = config_.mode == JudgeMode::fixture ? classify_fixture(trace) : classify_live(trace);
  for (std::size_t i = 0; i < out.sentences.size(); ++i) {
    auto& cat = out.sentences[i].category;
    if (!config_.taxonomy.contains(cat)) {
      out.warnings.push_back({trace.trace_id, i, "label '" + cat + "' is not in the taxonomy; using 'other'"});
      cat = kOtherCategory;
    }
  }
  return out;
}

ClassifiedTrace JudgeClient::classify_fixture(const ReasoningTrace& trace) const {
  ClassifiedTrace out{trace.trace_id, trace.sentences, {}};
  for (std::size_t i = 0; i < out.sentences.size(); ++i) {
    auto it = fixture_.find({trace.trace_id, i});
    if (it == fixture_.end()) {
      throw NotFoundError("judge fixture has no label for trace '" + trace.trace_id + "' sentence " +
                          std::to_string(i));
    }
    out.sentences[i].category = it->second;
  }
  return out;
}

ClassifiedTrace JudgeClient::classify_live(const ReasoningTrace& trace) const {
  ClassifiedTrace out{trace.trace_id, trace.sentences, {}};
  for (std::size_t first = 0; first < out.sentences.size(); first += config_.batch_size) {
    const std::size_t last = std::min(first + config_.batch_size, out.sentences.size());
    const auto labels = parse_labeled_lines(response_content(request(build_request_body(config_, trace, first, last))),
                                            first, last);
    for (const auto& [i, label] : labels) out.sentences[i].category = label;
  }
  return out;
}

std::string JudgeClient::request(const std::string& body) const {
  const char* key = std::getenv(config_.api_key_env.c_str());
  if (key == nullptr) throw ValidationError("environment variable " + config_.api_key_env + " is not set");
  const std::vector<std::pair<std::string, std::string>> headers{{"Authorization", std::string("Bearer ") + key}};

  std::string last_error;
  auto backoff = config_.initial_backoff;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      sleep_(backoff);
      backoff *= 2;
    }
    HttpResponse res;
    try {
      res = transport_->post(config_.endpoint, headers, body);
    } catch (const JudgeNetworkError& e) {
      last_error = e.what();
      continue;
    }
    if (res.status >= 200 && res.status < 300) return res.body;
    if (!retryable_status(res.status)) {
      throw JudgeNetworkError("judge request rejected with HTTP " + std::to_string(res.status) + ": " + res.body);
    }
    last_error = "HTTP " + std::to_string(res.status);
  }
  throw JudgeNetworkError("judge request failed after " + std::to_string(config_.max_retries) +
                          " retries: " + last_error);
}

std::vector<ClassifiedTrace> JudgeClient::classify_corpus(std::span<const ReasoningTrace> traces) const {
  std::vector<ClassifiedTrace> out(traces.size());
  std::vector<std::exception_ptr> errors(traces.size());
  const std::size_t workers = std::min(config_.mode == JudgeMode::live ? config_.max_in_flight : 1, traces.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < traces.size(); i = next++) {
      try {
        out[i] = classify_sentences(traces[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < workers; ++t) threads.emplace_back(work);
  work();
  for (auto& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace steerlab
