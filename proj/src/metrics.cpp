#include "steerlab/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include <json.hpp>

#include "binary_io.hpp"
#include "steerlab/error.hpp"

namespace steerlab {

using json = nlohmann::json;

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

}  // namespace

std::string_view to_string(MatchMode m) { return m == MatchMode::word_equals ? "word_equals" : "substring"; }

MatchMode match_mode_from_string(std::string_view s) {
  if (s == "word_equals") return MatchMode::word_equals;
  if (s == "substring") return MatchMode::substring;
  throw ValidationError("unknown match mode '" + std::string(s) + "' (expected word_equals or substring)");
}

std::string to_lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void KeywordSet::validate() const {
  if (patterns.empty()) throw ValidationError("keyword set is empty");
  for (const auto& p : patterns) {
    if (p.empty()) throw ValidationError("keyword set contains an empty pattern");
    if (p != to_lower_ascii(p)) throw ValidationError("keyword '" + p + "' must be lowercase");
  }
}

bool KeywordSet::matches(std::string_view lowered) const {
  for (const auto& p : patterns) {
    if (mode == MatchMode::word_equals ? lowered == p : lowered.find(p) != std::string_view::npos) return true;
  }
  return false;
}

KeywordSet KeywordSet::trace_words() { return {{"wait", "hmm"}, MatchMode::word_equals}; }
KeywordSet KeywordSet::lens_tokens() { return {{"wait", "but"}, MatchMode::substring}; }
KeywordSet KeywordSet::judge_pattern() { return {{"wait"}, MatchMode::substring}; }

KeywordSet KeywordSet::parse(std::string_view csv, MatchMode mode) {
  KeywordSet k{{}, mode};
  std::size_t begin = 0;
  while (begin <= csv.size()) {
    const auto comma = std::min(csv.find(',', begin), csv.size());
    auto part = csv.substr(begin, comma - begin);
    while (!part.empty() && is_space(part.front())) part.remove_prefix(1);
    while (!part.empty() && is_space(part.back())) part.remove_suffix(1);
    if (!part.empty()) k.patterns.push_back(to_lower_ascii(part));
    begin = comma + 1;
  }
  k.validate();
  return k;
}

std::vector<std::string> segment_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    std::string_view w = text.substr(i, j - i);
    while (!w.empty() && is_punct(w.front())) w.remove_prefix(1);
    while (!w.empty() && is_punct(w.back())) w.remove_suffix(1);
    if (!w.empty()) words.push_back(to_lower_ascii(w));
    i = j;
  }
  return words;
}

double backtrack_score(std::string_view text, const KeywordSet& keywords) {
  keywords.validate();
  const auto words = segment_words(text);
  if (words.empty()) throw ValidationError("backtrack score: text contains no words");
  std::size_t hits = 0;
  for (const auto& w : words) hits += keywords.matches(w) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(words.size());
}

std::vector<std::size_t> VocabMask::selected() const {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < indicator.size(); ++i) {
    if (indicator[i]) ids.push_back(i);
  }
  return ids;
}

VocabMask build_vocab_mask(std::span<const std::string> token_texts, const KeywordSet& keywords) {
  keywords.validate();
  if (token_texts.empty()) throw ValidationError("vocabulary is empty");
  VocabMask mask;
  mask.indicator.resize(token_texts.size(), 0);
  for (std::size_t i = 0; i < token_texts.size(); ++i) {
    std::string lowered = to_lower_ascii(token_texts[i]);
    if (keywords.mode == MatchMode::word_equals) {
      // Whole-token comparison; leading-space markers and punctuation are not
      // part of the word.
      const auto words = segment_words(lowered);
      lowered = words.size() == 1 ? words.front() : std::string();
    }
    if (!lowered.empty() && keywords.matches(lowered)) {
      mask.indicator[i] = 1;
      ++mask.l1;
    }
  }
  if (mask.l1 == 0) throw ValidationError("vocabulary mask is empty: no token matches the keyword set");
  return mask;
}

double logit_lens_score(std::span<const float> v, const Matrix& unembedding, const VocabMask& mask) {
  if (v.size() != unembedding.cols()) {
    throw ValidationError("logit lens: vector length " + std::to_string(v.size()) + " vs unembedding d_model " +
                          std::to_string(unembedding.cols()));
  }
  if (mask.indicator.size() != unembedding.rows()) {
    throw ValidationError("logit lens: mask covers " + std::to_string(mask.indicator.size()) +
                          " tokens, unembedding has " + std::to_string(unembedding.rows()));
  }
  if (mask.l1 == 0) throw ValidationError("logit lens: empty mask");
  double acc = 0.0;
  for (std::size_t i = 0; i < mask.indicator.size(); ++i) {
    if (mask.indicator[i]) acc += dot(unembedding.row(i), v);
  }
  return acc / static_cast<double>(mask.l1);
}

bool keyword_judge(std::string_view sentence_text) {
  return to_lower_ascii(sentence_text).find("wait") != std::string::npos;
}

std::vector<LabelRecord> load_label_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open labels '" + path.string() + "'");
  std::vector<LabelRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      LabelRecord r;
      r.trace_id = j.at("trace_id").get<std::string>();
      r.sentence_index = j.at("sentence_index").get<std::size_t>();
      r.judge = j.at("judge").get<std::string>();
      const auto& label = j.at("label");
      if (label.is_boolean()) {
        r.label = label.get<bool>();
      } else if (label.is_number_integer() && (label.get<int>() == 0 || label.get<int>() == 1)) {
        r.label = label.get<int>() == 1;
      } else {
        throw FormatError("label must be a boolean or 0/1");
      }
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::string label_record_to_json(const LabelRecord& r) {
  json j;
  j["trace_id"] = r.trace_id;
  j["sentence_index"] = r.sentence_index;
  j["judge"] = r.judge;
  j["label"] = r.label;
  return j.dump();
}

void write_label_records(const std::filesystem::path& path, std::span<const LabelRecord> records) {
  std::string text;
  for (const auto& r : records) text += label_record_to_json(r) + "\n";
  detail::write_text_file(path, text);
}

JudgeLabels JudgeLabels::align(std::span<const LabelRecord> records, std::string_view prediction_judge,
                               std::string_view reference_judge) {
  using Key = std::pair<std::string, std::size_t>;
  std::map<Key, bool> pred;
  std::map<Key, bool> ref;
  for (const auto& r : records) {
    std::map<Key, bool>* target = nullptr;
    if (r.judge == prediction_judge) target = &pred;
    else if (r.judge == reference_judge) target = &ref;
    if (!target) continue;
    if (!target->emplace(Key{r.trace_id, r.sentence_index}, r.label).second) {
      throw ValidationError("judge '" + r.judge + "' labels (" + r.trace_id + ", " +
                            std::to_string(r.sentence_index) + ") more than once");
    }
  }
  if (pred.empty()) throw ValidationError("no labels from judge '" + std::string(prediction_judge) + "'");
  if (ref.empty()) throw ValidationError("no labels from judge '" + std::string(reference_judge) + "'");
  JudgeLabels out;
  for (const auto& [key, label] : ref) {
    auto it = pred.find(key);
    if (it == pred.end()) {
      throw ValidationError("(" + key.first + ", " + std::to_string(key.second) + ") has no '" +
                            std::string(prediction_judge) + "' label");
    }
    out.keys.push_back(key);
    out.prediction.push_back(it->second);
    out.reference.push_back(label);
  }
  if (pred.size() != ref.size()) {
    throw ValidationError("judge '" + std::string(prediction_judge) + "' labels sentences the reference judge does not");
  }
  return out;
}

ConsistencyReport judge_consistency(const JudgeLabels& labels) {
  if (labels.prediction.size() != labels.reference.size()) {
    throw ValidationError("judge labels are not aligned: different lengths");
  }
  ConsistencyReport r;
  for (std::size_t i = 0; i < labels.prediction.size(); ++i) {
    const bool p = labels.prediction[i];
    const bool t = labels.reference[i];
    if (p && t) ++r.tp;
    else if (p && !t) ++r.fp;
    else if (!p && t) ++r.fn;
    else ++r.tn;
  }
  if (r.tp + r.fp > 0) r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  if (r.tp + r.fn > 0) r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  if (r.precision && r.recall) {
    const double sum = *r.precision + *r.recall;
    r.f1 = sum > 0.0 ? 2.0 * *r.precision * *r.recall / sum : 0.0;
  }
  return r;
}

}  // namespace steerlab
