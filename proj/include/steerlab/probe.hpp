#pragma once

// Per-token projection of a steering direction onto centered activations, and
// a static HTML heatmap of the result.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "steerlab/activation_store.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/trace_corpus.hpp"

namespace steerlab {

struct TokenScoreRow {
  std::size_t token_index = 0;
  std::string token_text;
  float score = 0.0f;
  bool is_keyword = false;

  bool operator==(const TokenScoreRow&) const = default;
};

// score[t] = direction . (acts[t] - center) / |direction|
std::vector<TokenScoreRow> probe_scores(const ReasoningTrace& trace, const ActivationMatrix& acts,
                                        const SteeringVector& direction, std::span<const float> center);

// Mean over traces of each trace's mean activation across all annotated
// sentence tokens.
std::vector<float> default_probe_center(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                                        int layer);

// Nearest-rank 95th percentile of the strictly positive scores; 0 if none.
double positive_p95(std::span<const TokenScoreRow> rows);

std::string heatmap_html(std::span<const TokenScoreRow> rows);
void render_heatmap(std::span<const TokenScoreRow> rows, const std::filesystem::path& out);

// token_index,token_text,score,is_keyword
std::string score_rows_to_csv(std::span<const TokenScoreRow> rows);
void write_score_csv(std::span<const TokenScoreRow> rows, const std::filesystem::path& out);

}  // namespace steerlab
