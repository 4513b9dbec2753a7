#include "steerlab/trace_corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "steerlab/error.hpp"

namespace steerlab {

using json = nlohmann::json;

Taxonomy::Taxonomy()
    : labels_{kBacktracking, "deduction", "initializing", "uncertainty-estimation", kOtherCategory} {}

Taxonomy::Taxonomy(std::vector<std::string> labels) : labels_(std::move(labels)) {
  if (labels_.empty()) throw ValidationError("taxonomy must list at least one label");
}

bool Taxonomy::contains(std::string_view label) const {
  return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

std::string ReasoningTrace::text(std::size_t begin, std::size_t end) const {
  std::string out;
  end = std::min(end, token_texts.size());
  for (std::size_t i = begin; i < end; ++i) out += token_texts[i];
  return out;
}

std::string ReasoningTrace::sentence_text(std::size_t sentence_index) const {
  const auto& s = sentences.at(sentence_index);
  return text(s.start, s.end);
}

void ReasoningTrace::validate(const Taxonomy& taxonomy) const {
  if (trace_id.empty()) throw ValidationError("trace_id is empty");
  if (token_ids.size() != token_texts.size()) {
    throw ValidationError("trace '" + trace_id + "': token_ids has " + std::to_string(token_ids.size()) +
                          " entries but token_texts has " + std::to_string(token_texts.size()));
  }
  if (prompt_len > token_ids.size()) {
    throw ValidationError("trace '" + trace_id + "': prompt_len exceeds trace length");
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    const std::string where = "trace '" + trace_id + "' sentence " + std::to_string(i);
    if (s.start >= s.end) throw ValidationError(where + ": start must be < end");
    if (s.end > token_ids.size()) throw ValidationError(where + ": span ends past the trace");
    if (i > 0 && s.start < sentences[i - 1].end) {
      throw ValidationError(where + ": overlaps or precedes sentence " + std::to_string(i - 1));
    }
    if (!taxonomy.contains(s.category)) {
      throw ValidationError(where + ": category '" + s.category + "' not in taxonomy");
    }
  }
}

void WindowSpec::validate() const {
  if (offset_end < offset_start) {
    throw ValidationError("window end " + std::to_string(offset_end) + " precedes start " +
                          std::to_string(offset_start));
  }
}

WindowSpec WindowSpec::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw ValidationError("window '" + std::string(text) + "' must be written start:end");
  }
  auto parse_int = [&](std::string_view part) {
    int value = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
    if (ec != std::errc() || ptr != part.data() + part.size() || part.empty()) {
      throw ValidationError("window '" + std::string(text) + "': '" + std::string(part) + "' is not an integer");
    }
    return value;
  };
  WindowSpec w{parse_int(text.substr(0, colon)), parse_int(text.substr(colon + 1))};
  w.validate();
  return w;
}

std::string WindowSpec::to_string() const { return std::to_string(offset_start) + ":" + std::to_string(offset_end); }

ReasoningTrace parse_trace(std::string_view json_line, const Taxonomy& taxonomy) {
  ReasoningTrace t;
  try {
    const json j = json::parse(json_line);
    t.trace_id = j.at("trace_id").get<std::string>();
    t.prompt_len = j.at("prompt_len").get<std::size_t>();
    t.token_ids = j.at("token_ids").get<std::vector<std::int64_t>>();
    t.token_texts = j.at("token_texts").get<std::vector<std::string>>();
    for (const auto& s : j.at("sentences")) {
      t.sentences.push_back(
          {s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>(), s.at("category").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed trace record: ") + e.what());
  }
  t.validate(taxonomy);
  return t;
}

std::string trace_to_json(const ReasoningTrace& t) {
  json j;
  j["trace_id"] = t.trace_id;
  j["prompt_len"] = t.prompt_len;
  j["token_ids"] = t.token_ids;
  j["token_texts"] = t.token_texts;
  j["sentences"] = json::array();
  for (const auto& s : t.sentences) {
    j["sentences"].push_back({{"start", s.start}, {"end", s.end}, {"category", s.category}});
  }
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::vector<ReasoningTrace> load_corpus(const std::filesystem::path& path, const Taxonomy& taxonomy) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  std::vector<ReasoningTrace> traces;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      traces.push_back(parse_trace(line, taxonomy));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return traces;
}

void write_corpus(const std::filesystem::path& path, std::span<const ReasoningTrace> traces) {
  std::string text;
  for (const auto& t : traces) text += trace_to_json(t) + "\n";
  detail::write_text_file(path, text);
}

std::vector<SelectedWindow> select_positions(const ReasoningTrace& trace, const SelectionSpec& spec) {
  spec.window.validate();
  std::vector<SelectedWindow> out;
  const auto lo = static_cast<std::int64_t>(spec.exclude_prompt ? trace.prompt_len : 0);
  const auto hi = static_cast<std::int64_t>(trace.size());  // exclusive
  for (std::size_t i = 0; i < trace.sentences.size(); ++i) {
    const auto& s = trace.sentences[i];
    if (spec.target_category && s.category != *spec.target_category) continue;
    const auto anchor = static_cast<std::int64_t>(s.start);
    const std::int64_t first = std::max(lo, anchor + spec.window.offset_start);
    const std::int64_t last = std::min(hi - 1, anchor + spec.window.offset_end);
    if (first > last) continue;
    SelectedWindow w{i, {}};
    for (std::int64_t p = first; p <= last; ++p) w.positions.push_back(static_cast<std::size_t>(p));
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<std::size_t> selected_position_set(const ReasoningTrace& trace, const SelectionSpec& spec) {
  std::vector<std::size_t> all;
  for (const auto& w : select_positions(trace, spec)) all.insert(all.end(), w.positions.begin(), w.positions.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

}  // namespace steerlab
