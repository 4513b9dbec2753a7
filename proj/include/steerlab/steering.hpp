#pragma once

// Difference-of-means steering vectors, baseline directions and the
// intervention descriptions consumed by the toy model.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/activation_store.hpp"
#include "steerlab/trace_corpus.hpp"

namespace steerlab {

enum class Derivation { dom, overall_mean, gaussian_noise, category_dom };

std::string_view to_string(Derivation d);
Derivation derivation_from_string(std::string_view s);

struct SteeringVector {
  std::vector<float> values;
  int layer = 0;
  std::string source_model;
  std::string category;
  WindowSpec window;
  Derivation derivation = Derivation::dom;

  std::size_t d_model() const { return values.size(); }
};

enum class InterventionKind { add_vector, self_amplify };

std::string_view to_string(InterventionKind k);

struct InterventionSpec {
  InterventionKind kind = InterventionKind::add_vector;
  std::optional<SteeringVector> vector;  // required for add_vector, absent for self_amplify
  float strength = 0.0f;
  int layer = 0;
  bool normalize = false;

  static InterventionSpec add(SteeringVector v, float strength, bool normalize = false);
  static InterventionSpec add_at(SteeringVector v, int layer, float strength, bool normalize = false);
  static InterventionSpec self_amplify(int layer, float strength);

  void validate(std::size_t d_model, int n_layers) const;
};

// MeanAct: average over traces of the per-trace mean over its selected
// positions. Traces with an empty position set are not part of the dataset.
// Accumulates in f64 in sorted trace-id order, returns f32.
std::vector<float> mean_act(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                            const SelectionSpec& spec, int layer);

// Same reduction with a caller-supplied per-trace position set.
using PositionSelector = std::function<std::vector<std::size_t>(const ReasoningTrace&)>;
std::vector<float> mean_act_over(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                                 const PositionSelector& positions, int layer);

// v = MeanAct(positive) - MeanAct(reference).
SteeringVector derive_dom(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                          const SelectionSpec& positive, const SelectionSpec& reference, int layer,
                          std::string source_model = {});

double cosine_similarity(std::span<const float> a, std::span<const float> b);

enum class BaselineKind { overall_mean, gaussian_noise, category_dom };

std::string_view to_string(BaselineKind k);
BaselineKind baseline_kind_from_string(std::string_view s);

struct BaselineParams {
  std::optional<std::string> category;     // category_dom
  std::optional<std::uint64_t> seed;       // gaussian_noise
  std::optional<float> target_norm;        // gaussian_noise
  WindowSpec window;                       // overall_mean, category_dom
  bool exclude_prompt = false;
  std::string source_model;
  Taxonomy taxonomy;
};

SteeringVector make_baseline(BaselineKind kind, const ActivationSource& source,
                             std::span<const ReasoningTrace> corpus, int layer, const BaselineParams& params);

// strength * values, or strength * values / |values| when normalize is set.
std::vector<float> scaled(std::span<const float> values, float strength, bool normalize);

// Vector files: "STVC", u32 version (1), u64 d_model, f32 payload, all
// little-endian; metadata lives in a sidecar `<path>.json`.
void save_vector(const std::filesystem::path& path, const SteeringVector& v);
SteeringVector load_vector(const std::filesystem::path& path);
std::filesystem::path vector_sidecar_path(const std::filesystem::path& path);

}  // namespace steerlab
