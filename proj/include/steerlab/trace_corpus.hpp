#pragma once

// Reasoning traces with sentence-level taxonomy labels, and the token-window
// selection that turns annotations into activation positions.
//
// Corpus files are JSON-lines, one trace per line:
//   {"trace_id": "...", "prompt_len": 12, "token_ids": [...],
//    "token_texts": [...], "sentences": [{"start": 12, "end": 20,
//    "category": "deduction"}, ...]}

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace steerlab {

inline constexpr const char* kBacktracking = "backtracking";
inline constexpr const char* kOtherCategory = "other";

// Labels a sentence may carry. Extensible through configuration.
class Taxonomy {
 public:
  Taxonomy();  // backtracking, deduction, initializing, uncertainty-estimation, other
  explicit Taxonomy(std::vector<std::string> labels);

  bool contains(std::string_view label) const;
  const std::vector<std::string>& labels() const { return labels_; }

 private:
  std::vector<std::string> labels_;
};

struct SentenceSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::string category;

  friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

struct ReasoningTrace {
  std::string trace_id;
  std::size_t prompt_len = 0;
  std::vector<std::int64_t> token_ids;
  std::vector<std::string> token_texts;
  std::vector<SentenceSpan> sentences;

  std::size_t size() const { return token_ids.size(); }
  // Concatenated token texts over [begin, end).
  std::string text(std::size_t begin, std::size_t end) const;
  std::string sentence_text(std::size_t sentence_index) const;

  // Throws ValidationError describing the first violated invariant.
  void validate(const Taxonomy& taxonomy) const;

  friend bool operator==(const ReasoningTrace&, const ReasoningTrace&) = default;
};

// Token offsets relative to the first token of an annotated sentence; both
// ends inclusive.
struct WindowSpec {
  int offset_start = 0;
  int offset_end = 0;

  void validate() const;
  // Parses "start:end", e.g. "-13:-8".
  static WindowSpec parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
  friend auto operator<=>(const WindowSpec&, const WindowSpec&) = default;
};

struct SelectionSpec {
  std::optional<std::string> target_category;  // nullopt selects every sentence
  WindowSpec window;
  bool exclude_prompt = false;

  static SelectionSpec all(WindowSpec window, bool exclude_prompt = false) {
    return {std::nullopt, window, exclude_prompt};
  }
  static SelectionSpec category(std::string label, WindowSpec window, bool exclude_prompt = false) {
    return {std::move(label), window, exclude_prompt};
  }
  std::string category_name() const { return target_category.value_or("ALL"); }
};

struct SelectedWindow {
  std::size_t sentence_index = 0;
  std::vector<std::size_t> positions;

  friend bool operator==(const SelectedWindow&, const SelectedWindow&) = default;
};

ReasoningTrace parse_trace(std::string_view json_line, const Taxonomy& taxonomy = {});
std::string trace_to_json(const ReasoningTrace& trace);

// Traces in file order. Errors carry the 1-based line number.
std::vector<ReasoningTrace> load_corpus(const std::filesystem::path& path, const Taxonomy& taxonomy = {});
void write_corpus(const std::filesystem::path& path, std::span<const ReasoningTrace> traces);

// One entry per matching sentence whose clipped window is non-empty, in
// sentence order.
std::vector<SelectedWindow> select_positions(const ReasoningTrace& trace, const SelectionSpec& spec);

// Sorted, de-duplicated union of all selected positions of a trace: the
// per-trace position set that mean activations average over.
std::vector<std::size_t> selected_position_set(const ReasoningTrace& trace, const SelectionSpec& spec);

}  // namespace steerlab
