#include "steerlab/planted_lab.hpp"

#include <cmath>
#include <random>

#include "steerlab/error.hpp"

namespace steerlab {

namespace {

constexpr std::size_t kPeriod = 0;
constexpr std::size_t kKeyword = 1;
constexpr std::size_t kFirstCue = 2;
constexpr std::size_t kCueCount = 3;
constexpr std::size_t kFirstFiller = kFirstCue + kCueCount;

class LabRng {
 public:
  explicit LabRng(std::uint64_t seed) : rng_(seed) {}
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

std::vector<std::string> planted_vocabulary() {
  return {".",       " Wait",   " hold",  " actually", " odd",    " the",    " a",     " so",
          " we",     " then",   " add",   " two",      " three",  " five",   " seven", " is",
          " are",    " number", " answer", " sum",     " total",  " of",     " and",   " to",
          " get",    " now",    " let",   " me",       " compute", " first", " next",  " value",
          " equals", " times",  " minus", " plus",     " that",   " it",     " this",  " find",
          " step",   " gives",  " result", " problem", " given",  " asks",   " each",  " more"};
}

PlantedLab build_planted_lab(const PlantedLabOptions& o) {
  if (o.n_traces == 0 || o.n_prompts == 0) throw ValidationError("planted lab needs traces and prompts");
  const auto vocab_tokens = planted_vocabulary();
  const std::size_t n_fillers = vocab_tokens.size() - kFirstFiller;

  ModelConfig config;
  config.n_layers = o.n_layers;
  config.d_model = o.d_model;
  config.n_heads = o.n_heads;
  config.d_head = o.d_model / o.n_heads;
  config.vocab_size = vocab_tokens.size();
  config.max_seq_len = o.max_seq_len;
  config.seed = o.seed;

  LabRng rng(o.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> direction(o.d_model);
  double sq = 0.0;
  std::vector<double> raw(o.d_model);
  for (double& x : raw) {
    x = normal(rng.engine());
    sq += x * x;
  }
  for (std::size_t k = 0; k < o.d_model; ++k) direction[k] = static_cast<float>(raw[k] / std::sqrt(sq));

  PlantedOptions planted;
  planted.scales = o.scales;
  planted.vocab = Vocabulary::from_tokens(vocab_tokens);
  ModelWeights w = construct_planted(config, direction, static_cast<std::int64_t>(kKeyword), o.gain, planted);
  for (std::size_t c = kFirstCue; c < kFirstCue + kCueCount; ++c) {
    auto row = w.token_embedding.row(c);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = o.cue_noise * row[k] + o.cue_magnitude * direction[k];
  }

  PlantedLab lab;
  lab.direction = direction;
  lab.keyword_token = static_cast<std::int64_t>(kKeyword);
  for (std::size_t c = kFirstCue; c < kFirstCue + kCueCount; ++c) lab.cue_tokens.push_back(static_cast<std::int64_t>(c));

  auto filler = [&] { return static_cast<std::int64_t>(kFirstFiller + rng.below(n_fillers)); };
  auto make_prompt = [&] {
    std::vector<std::int64_t> p;
    const std::size_t len = 6 + rng.below(4);
    for (std::size_t i = 0; i + 1 < len; ++i) p.push_back(filler());
    p.push_back(static_cast<std::int64_t>(kPeriod));
    return p;
  };

  for (std::size_t t = 0; t < o.n_traces; ++t) {
    ReasoningTrace trace;
    char id[16];
    std::snprintf(id, sizeof id, "t%03zu", t);
    trace.trace_id = id;
    trace.token_ids = make_prompt();
    trace.prompt_len = trace.token_ids.size();

    const std::size_t n_sentences = 7 + rng.below(3);
    bool previous_backtracking = false;
    for (std::size_t s = 0; s < n_sentences; ++s) {
      std::string category;
      if (s == 0) {
        category = "initializing";
      } else if (!previous_backtracking && rng.chance(o.backtracking_rate)) {
        category = kBacktracking;
      } else {
        category = rng.chance(0.7) ? "deduction" : kOtherCategory;
      }
      const bool backtracking = category == kBacktracking;
      previous_backtracking = backtracking;
      const std::size_t start = trace.token_ids.size();
      const std::size_t len = 7 + rng.below(3);
      for (std::size_t i = 0; i + 1 < len; ++i) {
        trace.token_ids.push_back(i == 0 && backtracking ? static_cast<std::int64_t>(kKeyword) : filler());
      }
      trace.token_ids.push_back(static_cast<std::int64_t>(kPeriod));
      trace.sentences.push_back({start, trace.token_ids.size(), category});

      if (backtracking) {
        for (int off = o.cue_window.offset_start; off <= o.cue_window.offset_end; ++off) {
          const auto p = static_cast<std::int64_t>(start) + off;
          if (p < static_cast<std::int64_t>(trace.prompt_len)) continue;
          auto& tok = trace.token_ids[static_cast<std::size_t>(p)];
          if (tok < static_cast<std::int64_t>(kFirstFiller)) continue;
          if (rng.chance(o.cue_probability)) tok = static_cast<std::int64_t>(kFirstCue + rng.below(kCueCount));
        }
      }
    }
    if (trace.token_ids.size() > o.max_seq_len) throw ValidationError("planted lab trace exceeds max_seq_len");
    for (auto id_ : trace.token_ids) trace.token_texts.push_back(vocab_tokens[static_cast<std::size_t>(id_)]);
    lab.corpus.push_back(std::move(trace));
  }
  for (std::size_t i = 0; i < o.n_prompts; ++i) lab.prompts.push_back(make_prompt());
  lab.weights = std::make_shared<const ModelWeights>(std::move(w));
  return lab;
}

}  // namespace steerlab
