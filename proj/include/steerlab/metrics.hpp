#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steerlab/tensor.hpp"

namespace steerlab {

enum class MatchMode { word_equals, substring };

std::string_view to_string(MatchMode m);
MatchMode match_mode_from_string(std::string_view s);

struct KeywordSet {
  std::vector<std::string> patterns;  // lowercase
  MatchMode mode = MatchMode::word_equals;

  void validate() const;
  bool matches(std::string_view lowered) const;

  // Word-level backtracking score keywords: {wait, hmm}, whole words.
  static KeywordSet trace_words();
  // Vocabulary mask keywords for the logit lens: {wait, but}, substrings.
  static KeywordSet lens_tokens();
  // Sentence-level keyword judge: {wait}, substring.
  static KeywordSet judge_pattern();
  // Comma-separated list, lowercased.
  static KeywordSet parse(std::string_view csv, MatchMode mode);
};

std::string to_lower_ascii(std::string_view s);

// Whitespace split, surrounding punctuation stripped, lowercased. Tokens that
// are pure punctuation are dropped.
std::vector<std::string> segment_words(std::string_view text);

// Fraction of words matching the keyword set. Throws ValidationError when the
// text holds no words.
double backtrack_score(std::string_view text, const KeywordSet& keywords);

struct VocabMask {
  std::vector<std::uint8_t> indicator;
  std::size_t l1 = 0;

  std::vector<std::size_t> selected() const;
};

VocabMask build_vocab_mask(std::span<const std::string> token_texts, const KeywordSet& keywords);

// (W_U v) . a / |a|_1, i.e. the mean logit contribution of v over masked
// tokens. unembedding is vocab x d_model.
double logit_lens_score(std::span<const float> v, const Matrix& unembedding, const VocabMask& mask);

// True iff "wait" occurs anywhere in the text, case-insensitively.
bool keyword_judge(std::string_view sentence_text);

struct LabelRecord {
  std::string trace_id;
  std::size_t sentence_index = 0;
  std::string judge;
  bool label = false;
};

std::vector<LabelRecord> load_label_records(const std::filesystem::path& path);
std::string label_record_to_json(const LabelRecord& r);
void write_label_records(const std::filesystem::path& path, std::span<const LabelRecord> records);

struct JudgeLabels {
  std::vector<std::pair<std::string, std::size_t>> keys;
  std::vector<bool> prediction;
  std::vector<bool> reference;

  // Pairs up the two judges' labels by (trace_id, sentence_index). Every key
  // must be labelled exactly once by each judge.
  static JudgeLabels align(std::span<const LabelRecord> records, std::string_view prediction_judge,
                           std::string_view reference_judge);
};

struct ConsistencyReport {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  // nullopt when the metric is undefined (no reference positives for recall,
  // no predicted positives for precision).
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

ConsistencyReport judge_consistency(const JudgeLabels& labels);

}  // namespace steerlab
