#pragma once

// A self-contained desk-scale experiment: a planted toy model plus a synthetic
// annotated corpus in which the tokens shortly before each backtracking
// sentence carry the planted direction. Difference-of-means over those
// windows should therefore recover the direction, and steering with it should
// make the model emit the keyword token more often.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "steerlab/toy_model.hpp"
#include "steerlab/trace_corpus.hpp"

namespace steerlab {

struct PlantedLabOptions {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  int n_layers = 2;
  std::size_t max_seq_len = 96;
  float gain = 5.0f;
  // Component along the direction carried by cue-token embeddings.
  float cue_magnitude = 2.0f;
  // Scale of the cue tokens' random part, relative to ordinary tokens.
  float cue_noise = 0.3f;
  // Where cue tokens are placed relative to each backtracking sentence start.
  WindowSpec cue_window{-6, -2};
  double cue_probability = 0.8;
  double backtracking_rate = 0.3;
  std::size_t n_traces = 40;
  std::size_t n_prompts = 8;
  std::uint64_t seed = 1;
  WeightScales scales{1.0f, 0.3f, 0.5f, 0.5f, 1.0f};
};

struct PlantedLab {
  std::shared_ptr<const ModelWeights> weights;
  std::vector<float> direction;  // unit norm
  std::int64_t keyword_token = 0;
  std::vector<std::int64_t> cue_tokens;
  std::vector<ReasoningTrace> corpus;
  std::vector<std::vector<std::int64_t>> prompts;
};

// Word-level vocabulary used by the lab: filler words, cue words, " Wait"
// and ".".
std::vector<std::string> planted_vocabulary();
inline constexpr const char* kPlantedKeyword = " Wait";

PlantedLab build_planted_lab(const PlantedLabOptions& options = {});

}  // namespace steerlab
