#pragma once

// Cartesian steering experiments: window offset x strength x layer x vector
// source x intervention kind. Each cell derives its intervention, generates
// `replicates` continuations per prompt and scores them with the keyword
// backtracking score.
//
// Every cell is seeded from a stable hash of its coordinates mixed with the
// grid seed, so results do not depend on scheduling, on thread count, or on
// which other cells are in the grid.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "steerlab/activation_store.hpp"
#include "steerlab/metrics.hpp"
#include "steerlab/toy_model.hpp"
#include "steerlab/trace_corpus.hpp"

namespace steerlab {

// How a cell turns its (source, layer, offset) into an intervention.
enum class SweepIntervention {
  dom,             // derive_dom(source category vs ALL)
  overall_mean,    // mean activation over ALL sentences
  gaussian_noise,  // random direction, norm-matched to the cell's dom vector
  self_amplify,    // residual *= (1 + strength)
};

std::string_view to_string(SweepIntervention k);
SweepIntervention sweep_intervention_from_string(std::string_view s);

struct VectorSource {
  std::string store_id;
  std::string category = kBacktracking;
};

struct SweepGrid {
  std::vector<WindowSpec> offsets;
  std::vector<float> strengths;
  std::vector<int> layers;
  std::vector<VectorSource> vector_sources;
  std::vector<SweepIntervention> interventions{SweepIntervention::dom};
  std::size_t replicates = 8;
  std::uint64_t seed = 0;

  bool normalize = true;  // steer with strength * unit(vector)
  bool exclude_prompt = false;
  std::size_t max_new_tokens = 24;
  KeywordSet keywords = KeywordSet::trace_words();

  void validate() const;
};

struct SweepCell {
  WindowSpec offset;
  float strength = 0.0f;
  int layer = 0;
  VectorSource source;
  SweepIntervention intervention = SweepIntervention::dom;
};

struct SweepResult {
  SweepCell cell;
  bool ok = false;
  std::string error;  // set when !ok
  double mean = 0.0;  // over replicates of the per-replicate prompt average
  double std = 0.0;   // population standard deviation over replicates
  std::size_t n_generations = 0;
};

struct SweepInputs {
  std::map<std::string, const ActivationSource*> stores;
  std::span<const ReasoningTrace> corpus;
  // Weights and sampler used for every generation; the sampler seed is
  // replaced per generation.
  GenerationSession model;
  std::vector<std::vector<std::int64_t>> prompts;
};

// Cells in result order: layer, source, offset, intervention, strength.
std::vector<SweepCell> enumerate_cells(const SweepGrid& grid);

std::uint64_t cell_seed(std::uint64_t grid_seed, const SweepCell& cell);
// Seed of one generation inside a cell.
std::uint64_t generation_seed(std::uint64_t cell_seed, std::size_t replicate, std::size_t prompt_index);

// The intervention a cell applies. Throws on derivation failure.
InterventionSpec cell_intervention(const SweepGrid& grid, const SweepInputs& inputs, const SweepCell& cell);

SweepResult run_cell(const SweepGrid& grid, const SweepInputs& inputs, const SweepCell& cell);

// threads == 0 uses the hardware concurrency.
std::vector<SweepResult> run_sweep(const SweepGrid& grid, const SweepInputs& inputs, std::size_t threads = 1);

// Columns: offset_start, offset_end, strength, layer, source_store,
// source_category, intervention, mean, std, n, status. Numbers use 6
// significant digits; failed cells leave the metric columns empty.
std::string results_to_csv(std::span<const SweepResult> results);
void export_csv(std::span<const SweepResult> results, const std::filesystem::path& out);

}  // namespace steerlab
