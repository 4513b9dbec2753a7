#pragma once

// Minimal deterministic decoder-only transformer used to exercise steering
// end to end at desk scale.
//
// Architecture: learned token and position embeddings, pre-norm blocks
// (RMSNorm -> causal multi-head attention -> residual add, RMSNorm -> GELU MLP
// -> residual add), optional final RMSNorm, linear unembedding. The residual
// stream "at layer l" is the output of block l; that is where activations are
// captured and interventions are applied, at every position of every forward
// pass. No KV cache: generation recomputes the full context each step.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/activation_store.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/tensor.hpp"
#include "steerlab/trace_corpus.hpp"

namespace steerlab {

struct ModelConfig {
  int n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;
  std::size_t d_ff = 0;  // 0 means 4 * d_model
  bool final_norm = true;

  std::size_t ff_width() const { return d_ff == 0 ? 4 * d_model : d_ff; }
  void validate() const;
};

// Token id -> text. Byte-level (256 entries) unless a word list is supplied.
class Vocabulary {
 public:
  static Vocabulary bytes();
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  bool is_bytes() const { return bytes_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& text(std::int64_t id) const;
  std::optional<std::int64_t> find(std::string_view token) const;

  std::string decode(std::span<const std::int64_t> ids) const;
  // Greedy longest-prefix tokenization; throws if some byte is not covered.
  std::vector<std::int64_t> encode(std::string_view text) const;

 private:
  std::vector<std::string> tokens_;
  bool bytes_ = false;
};

struct BlockWeights {
  Matrix attn_norm;  // 1 x d
  Matrix wq, wk, wv; // (n_heads * d_head) x d
  Matrix wo;         // d x (n_heads * d_head)
  Matrix mlp_norm;   // 1 x d
  Matrix w_in;       // d_ff x d
  Matrix b_in;       // 1 x d_ff
  Matrix w_out;      // d x d_ff
  Matrix b_out;      // 1 x d
};

struct ModelWeights {
  ModelConfig config;
  Vocabulary vocab = Vocabulary::bytes();
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_seq_len x d
  std::vector<BlockWeights> blocks;
  Matrix final_norm;          // 1 x d
  Matrix unembedding;         // vocab x d  (W_U)

  void validate() const;
};

struct WeightScales {
  float embedding = 1.0f;
  float position = 0.3f;
  float attention = 0.5f;  // times 1/sqrt(fan_in)
  float mlp = 0.5f;        // times 1/sqrt(fan_in)
  float unembedding = 0.25f;
};

ModelWeights init_random_weights(const ModelConfig& config, Vocabulary vocab = Vocabulary::bytes(),
                                 const WeightScales& scales = {});

// Directory with config.json plus one tensor file per named parameter.
void save_weights(const ModelWeights& weights, const std::filesystem::path& dir);
ModelWeights load_weights(const std::filesystem::path& dir);

struct Sampler {
  enum class Kind { greedy, temperature };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static Sampler greedy() { return {}; }
  static Sampler with_temperature(double t, std::uint64_t seed) { return {Kind::temperature, t, seed}; }
};

struct GenerationSession {
  std::shared_ptr<const ModelWeights> weights;
  std::vector<InterventionSpec> interventions;
  std::vector<int> capture_layers;
  Sampler sampler;

  void validate() const;
};

struct ForwardResult {
  Matrix logits;  // n_tokens x vocab
  std::map<int, ActivationMatrix> captured;
};

ForwardResult forward(const GenerationSession& session, std::span<const std::int64_t> tokens);

// Autoregressive continuation of exactly max_new tokens (prompt excluded).
std::vector<std::int64_t> generate(const GenerationSession& session, std::span<const std::int64_t> prompt,
                                   std::size_t max_new);

// Clean forward passes (no interventions) over every trace, keeping the
// requested layers.
InMemoryActivations capture_activations(const ModelWeights& weights, std::span<const ReasoningTrace> corpus,
                                        std::span<const int> layers);
void capture_to_store(const ModelWeights& weights, std::span<const ReasoningTrace> corpus,
                      std::span<const int> layers, const std::string& model_id, const std::filesystem::path& dir);

struct PlantedOptions {
  WeightScales scales;
  Vocabulary vocab = Vocabulary::bytes();
};

// Builds a model in which `direction` is a private linear channel from the
// residual stream to `keyword_token`:
//   - W_U[keyword_token] = gain * direction, every other W_U row is
//     orthogonal to direction;
//   - embeddings and every block output are projected off direction, so no
//     block writes to it;
//   - the final norm is disabled.
// Hence logit[keyword_token] = gain * (direction . residual), and adding
// alpha * direction at any layer shifts that logit by exactly
// alpha * gain * |direction|^2.
ModelWeights construct_planted(ModelConfig config, std::span<const float> direction, std::int64_t keyword_token,
                               float gain, const PlantedOptions& options = {});

}  // namespace steerlab
