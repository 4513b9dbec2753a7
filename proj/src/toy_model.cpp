#include "steerlab/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <json.hpp>

#include "binary_io.hpp"
#include "steerlab/error.hpp"

namespace steerlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

void ModelConfig::validate() const {
  if (n_layers <= 0) throw ValidationError("model config: n_layers must be positive");
  if (d_model == 0 || n_heads == 0 || d_head == 0 || max_seq_len == 0) {
    throw ValidationError("model config: dimensions must be positive");
  }
  if (d_model != n_heads * d_head) throw ValidationError("model config: d_model must equal n_heads * d_head");
  if (vocab_size < 2) throw ValidationError("model config: vocab_size must be at least 2");
}

Vocabulary Vocabulary::bytes() {
  Vocabulary v;
  v.bytes_ = true;
  v.tokens_.reserve(256);
  for (int b = 0; b < 256; ++b) v.tokens_.emplace_back(1, static_cast<char>(b));
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2) throw ValidationError("vocabulary needs at least two tokens");
  for (const auto& t : tokens) {
    if (t.empty()) throw ValidationError("vocabulary contains an empty token");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  return v;
}

const std::string& Vocabulary::text(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<std::int64_t> Vocabulary::find(std::string_view token) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) return std::nullopt;
  return static_cast<std::int64_t>(it - tokens_.begin());
}

std::string Vocabulary::decode(std::span<const std::int64_t> ids) const {
  std::string out;
  for (auto id : ids) out += text(id);
  return out;
}

std::vector<std::int64_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::int64_t> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best_len = 0;
    std::int64_t best = -1;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto& t = tokens_[i];
      if (t.size() > best_len && text.compare(pos, t.size(), t) == 0) {
        best_len = t.size();
        best = static_cast<std::int64_t>(i);
      }
    }
    if (best < 0) {
      throw ValidationError("cannot tokenize text at byte " + std::to_string(pos) + ": no matching token");
    }
    ids.push_back(best);
    pos += best_len;
  }
  return ids;
}

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ValidationError("weight '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                          std::to_string(cols));
  }
  if (!all_finite(m.values())) throw ValidationError("weight '" + name + "' has non-finite entries");
}

}  // namespace

void ModelWeights::validate() const {
  config.validate();
  const auto d = config.d_model;
  const auto ff = config.ff_width();
  const auto inner = config.n_heads * config.d_head;
  if (vocab.size() != config.vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " tokens, config says " +
                          std::to_string(config.vocab_size));
  }
  expect_shape(token_embedding, config.vocab_size, d, "token_embedding");
  expect_shape(position_embedding, config.max_seq_len, d, "position_embedding");
  expect_shape(final_norm, 1, d, "final_norm");
  expect_shape(unembedding, config.vocab_size, d, "unembedding");
  if (blocks.size() != static_cast<std::size_t>(config.n_layers)) {
    throw ValidationError("weights hold " + std::to_string(blocks.size()) + " blocks, config says " +
                          std::to_string(config.n_layers));
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    expect_shape(b.attn_norm, 1, d, p + "attn_norm");
    expect_shape(b.wq, inner, d, p + "wq");
    expect_shape(b.wk, inner, d, p + "wk");
    expect_shape(b.wv, inner, d, p + "wv");
    expect_shape(b.wo, d, inner, p + "wo");
    expect_shape(b.mlp_norm, 1, d, p + "mlp_norm");
    expect_shape(b.w_in, ff, d, p + "w_in");
    expect_shape(b.b_in, 1, ff, p + "b_in");
    expect_shape(b.w_out, d, ff, p + "w_out");
    expect_shape(b.b_out, 1, d, p + "b_out");
  }
}

ModelWeights init_random_weights(const ModelConfig& config, Vocabulary vocab, const WeightScales& scales) {
  config.validate();
  if (vocab.size() != config.vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " tokens, config says " +
                          std::to_string(config.vocab_size));
  }
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto random = [&](std::size_t rows, std::size_t cols, float scale) {
    Matrix m(rows, cols);
    for (float& x : m.values()) x = scale * normal(rng);
    return m;
  };
  const auto d = config.d_model;
  const auto ff = config.ff_width();
  const auto inner = config.n_heads * config.d_head;
  const float attn = scales.attention / std::sqrt(static_cast<float>(d));
  const float mlp_in = scales.mlp / std::sqrt(static_cast<float>(d));
  const float mlp_out = scales.mlp / std::sqrt(static_cast<float>(ff));

  ModelWeights w;
  w.config = config;
  w.vocab = std::move(vocab);
  w.token_embedding = random(config.vocab_size, d, scales.embedding);
  w.position_embedding = random(config.max_seq_len, d, scales.position);
  for (int l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.attn_norm = Matrix(1, d, 1.0f);
    b.wq = random(inner, d, attn);
    b.wk = random(inner, d, attn);
    b.wv = random(inner, d, attn);
    b.wo = random(d, inner, scales.attention / std::sqrt(static_cast<float>(inner)));
    b.mlp_norm = Matrix(1, d, 1.0f);
    b.w_in = random(ff, d, mlp_in);
    b.b_in = Matrix(1, ff);
    b.w_out = random(d, ff, mlp_out);
    b.b_out = Matrix(1, d);
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = Matrix(1, d, 1.0f);
  w.unembedding = random(config.vocab_size, d, scales.unembedding);
  return w;
}

namespace {

// Visits every parameter with its file stem; works for const and mutable weights.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  fn("position_embedding", w.position_embedding);
  fn("final_norm", w.final_norm);
  fn("unembedding", w.unembedding);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "attn_norm", b.attn_norm);
    fn(p + "wq", b.wq);
    fn(p + "wk", b.wk);
    fn(p + "wv", b.wv);
    fn(p + "wo", b.wo);
    fn(p + "mlp_norm", b.mlp_norm);
    fn(p + "w_in", b.w_in);
    fn(p + "b_in", b.b_in);
    fn(p + "w_out", b.w_out);
    fn(p + "b_out", b.b_out);
  }
}

}  // namespace

void save_weights(const ModelWeights& weights, const fs::path& dir) {
  weights.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const auto& c = weights.config;
  json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_head"] = c.d_head;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["seed"] = c.seed;
  j["d_ff"] = c.ff_width();
  j["final_norm"] = c.final_norm;
  j["tap_point"] = "block_output";
  if (weights.vocab.is_bytes()) {
    j["vocab"] = "bytes";
  } else {
    j["vocab"] = weights.vocab.tokens();
  }
  detail::write_text_file(dir / "config.json", j.dump(2) + "\n");
  for_each_tensor(weights, [&](const std::string& name, const Matrix& m) {
    write_tensor_file(dir / (name + ".actv"), m);
  });
}

ModelWeights load_weights(const fs::path& dir) {
  ModelWeights w;
  try {
    const json j = json::parse(detail::read_text_file(dir / "config.json"));
    auto& c = w.config;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.final_norm = j.at("final_norm").get<bool>();
    const auto& v = j.at("vocab");
    w.vocab = v.is_string() ? Vocabulary::bytes() : Vocabulary::from_tokens(v.get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw FormatError("malformed model config in '" + dir.string() + "': " + e.what());
  }
  w.config.validate();
  w.blocks.resize(static_cast<std::size_t>(w.config.n_layers));
  for_each_tensor(w, [&](const std::string& name, Matrix& m) { m = read_tensor_file(dir / (name + ".actv")); });
  w.validate();
  return w;
}

void GenerationSession::validate() const {
  if (!weights) throw ValidationError("generation session has no weights");
  for (const auto& iv : interventions) iv.validate(weights->config.d_model, weights->config.n_layers);
  for (int l : capture_layers) {
    if (l < 0 || l >= weights->config.n_layers) {
      throw ValidationError("capture layer " + std::to_string(l) + " outside [0, " +
                            std::to_string(weights->config.n_layers) + ")");
    }
  }
  if (sampler.kind == Sampler::Kind::temperature && !(sampler.temperature > 0.0)) {
    throw ValidationError("sampling temperature must be positive");
  }
}

namespace {

constexpr float kNormEps = 1e-5f;

// x: n x in, w: out x in  ->  n x out
Matrix linear(const Matrix& x, const Matrix& w) {
  Matrix out(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) matvec(w, x.row(i), out.row(i));
  return out;
}

void add_row_bias(Matrix& x, const Matrix& bias) {
  const auto b = bias.row(0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) r[k] += b[k];
  }
}

Matrix rms_norm(const Matrix& x, const Matrix& gain) {
  Matrix out(x.rows(), x.cols());
  const auto g = gain.row(0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    float ss = 0.0f;
    for (float v : r) ss += v * v;
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(r.size()) + kNormEps);
    auto o = out.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) o[k] = r[k] * inv * g[k];
  }
  return out;
}

float gelu(float x) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2 / pi)
  return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

Matrix attention(const Matrix& xn, const BlockWeights& b, const ModelConfig& c) {
  const Matrix q = linear(xn, b.wq);
  const Matrix k = linear(xn, b.wk);
  const Matrix v = linear(xn, b.wv);
  const std::size_t n = xn.rows();
  const float scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));
  Matrix mixed(n, c.n_heads * c.d_head);
  std::vector<float> scores(n);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const std::size_t off = h * c.d_head;
    for (std::size_t i = 0; i < n; ++i) {
      const float* qi = q.row(i).data() + off;
      float max_score = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        const float* kj = k.row(j).data() + off;
        float s = 0.0f;
        for (std::size_t t = 0; t < c.d_head; ++t) s += qi[t] * kj[t];
        scores[j] = s * scale;
        max_score = std::max(max_score, scores[j]);
      }
      float denom = 0.0f;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - max_score);
        denom += scores[j];
      }
      float* out = mixed.row(i).data() + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const float p = scores[j] / denom;
        const float* vj = v.row(j).data() + off;
        for (std::size_t t = 0; t < c.d_head; ++t) out[t] += p * vj[t];
      }
    }
  }
  return linear(mixed, b.wo);
}

Matrix mlp(const Matrix& xn, const BlockWeights& b) {
  Matrix hidden = linear(xn, b.w_in);
  add_row_bias(hidden, b.b_in);
  for (float& x : hidden.values()) x = gelu(x);
  Matrix out = linear(hidden, b.w_out);
  add_row_bias(out, b.b_out);
  return out;
}

void add_in_place(Matrix& x, const Matrix& delta) {
  auto xs = x.values();
  const auto ds = delta.values();
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ds[i];
}

struct PreparedIntervention {
  InterventionKind kind;
  int layer;
  float strength;
  std::vector<float> delta;  // add_vector only
};

std::vector<PreparedIntervention> prepare(const GenerationSession& s) {
  std::vector<PreparedIntervention> out;
  for (const auto& iv : s.interventions) {
    PreparedIntervention p{iv.kind, iv.layer, iv.strength, {}};
    if (iv.kind == InterventionKind::add_vector) p.delta = scaled(iv.vector->values, iv.strength, iv.normalize);
    out.push_back(std::move(p));
  }
  return out;
}

void apply_interventions(Matrix& x, int layer, const std::vector<PreparedIntervention>& ivs) {
  for (const auto& iv : ivs) {
    if (iv.layer != layer) continue;
    if (iv.kind == InterventionKind::add_vector) {
      for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t k = 0; k < r.size(); ++k) r[k] += iv.delta[k];
      }
    } else {
      const float factor = 1.0f + iv.strength;
      for (float& v : x.values()) v *= factor;
    }
  }
}

// Logits for every position, or only the last when last_only is set.
ForwardResult run_forward(const GenerationSession& s, std::span<const std::int64_t> tokens, bool last_only) {
  s.validate();
  const ModelWeights& w = *s.weights;
  const ModelConfig& c = w.config;
  if (tokens.empty()) throw ValidationError("forward: empty token sequence");
  if (tokens.size() > c.max_seq_len) {
    throw ValidationError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
  }
  const auto prepared = prepare(s);
  const std::size_t n = tokens.size();
  Matrix x(n, c.d_model);
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = tokens[i];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
    }
    const auto e = w.token_embedding.row(static_cast<std::size_t>(id));
    const auto p = w.position_embedding.row(i);
    auto r = x.row(i);
    for (std::size_t k = 0; k < c.d_model; ++k) r[k] = e[k] + p[k];
  }

  ForwardResult result;
  for (int l = 0; l < c.n_layers; ++l) {
    const BlockWeights& b = w.blocks[static_cast<std::size_t>(l)];
    add_in_place(x, attention(rms_norm(x, b.attn_norm), b, c));
    add_in_place(x, mlp(rms_norm(x, b.mlp_norm), b));
    apply_interventions(x, l, prepared);
    if (std::find(s.capture_layers.begin(), s.capture_layers.end(), l) != s.capture_layers.end()) {
      result.captured.emplace(l, ActivationMatrix{"", l, x});
    }
  }

  const Matrix h = c.final_norm ? rms_norm(x, w.final_norm) : x;
  const std::size_t first = last_only ? n - 1 : 0;
  result.logits = Matrix(n - first, c.vocab_size);
  for (std::size_t i = first; i < n; ++i) matvec(w.unembedding, h.row(i), result.logits.row(i - first));
  return result;
}

double next_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::int64_t pick(std::span<const float> logits, const Sampler& sampler, std::mt19937_64& rng) {
  if (sampler.kind == Sampler::Kind::greedy) {
    return static_cast<std::int64_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - max_logit) / sampler.temperature);
    total += p[i];
  }
  const double u = next_uniform(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<std::int64_t>(i);
  }
  return static_cast<std::int64_t>(p.size() - 1);
}

}  // namespace

ForwardResult forward(const GenerationSession& session, std::span<const std::int64_t> tokens) {
  return run_forward(session, tokens, false);
}

std::vector<std::int64_t> generate(const GenerationSession& session, std::span<const std::int64_t> prompt,
                                   std::size_t max_new) {
  session.validate();
  if (prompt.empty()) throw ValidationError("generate: prompt is empty");
  const auto& c = session.weights->config;
  if (prompt.size() + max_new > c.max_seq_len) {
    throw ValidationError("prompt of " + std::to_string(prompt.size()) + " tokens plus " + std::to_string(max_new) +
                          " new tokens exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  GenerationSession step = session;
  step.capture_layers.clear();
  std::mt19937_64 rng(session.sampler.seed);
  std::vector<std::int64_t> context(prompt.begin(), prompt.end());
  std::vector<std::int64_t> out;
  out.reserve(max_new);
  for (std::size_t t = 0; t < max_new; ++t) {
    const ForwardResult r = run_forward(step, context, true);
    const auto next = pick(r.logits.row(0), session.sampler, rng);
    context.push_back(next);
    out.push_back(next);
  }
  return out;
}

namespace {

ForwardResult capture_trace(const GenerationSession& session, const ReasoningTrace& trace) {
  if (trace.token_ids.empty()) throw ValidationError("trace '" + trace.trace_id + "' has no tokens");
  ForwardResult r = forward(session, trace.token_ids);
  for (auto& [layer, m] : r.captured) m.trace_id = trace.trace_id;
  return r;
}

GenerationSession capture_session(const ModelWeights& weights, std::span<const int> layers) {
  GenerationSession s;
  s.weights = std::shared_ptr<const ModelWeights>(&weights, [](const ModelWeights*) {});
  s.capture_layers.assign(layers.begin(), layers.end());
  return s;
}

}  // namespace

InMemoryActivations capture_activations(const ModelWeights& weights, std::span<const ReasoningTrace> corpus,
                                        std::span<const int> layers) {
  const auto session = capture_session(weights, layers);
  InMemoryActivations out(weights.config.d_model);
  for (const auto& trace : corpus) {
    for (auto& [layer, m] : capture_trace(session, trace).captured) out.put(std::move(m));
  }
  return out;
}

void capture_to_store(const ModelWeights& weights, std::span<const ReasoningTrace> corpus,
                      std::span<const int> layers, const std::string& model_id, const fs::path& dir) {
  StoreManifest manifest;
  manifest.model_id = model_id;
  manifest.n_layers = weights.config.n_layers;
  manifest.d_model = weights.config.d_model;
  manifest.layer_ids.assign(layers.begin(), layers.end());
  for (const auto& t : corpus) manifest.trace_ids.push_back(t.trace_id);
  StoreWriter writer(dir, manifest);
  const auto session = capture_session(weights, layers);
  for (const auto& trace : corpus) {
    for (const auto& [layer, m] : capture_trace(session, trace).captured) writer.add(m);
  }
  writer.finish();
}

ModelWeights construct_planted(ModelConfig config, std::span<const float> direction, std::int64_t keyword_token,
                               float gain, const PlantedOptions& options) {
  config.final_norm = false;
  config.validate();
  if (direction.size() != config.d_model) {
    throw ValidationError("planted direction has length " + std::to_string(direction.size()) + ", d_model is " +
                          std::to_string(config.d_model));
  }
  if (keyword_token < 0 || static_cast<std::size_t>(keyword_token) >= config.vocab_size) {
    throw ValidationError("keyword token outside vocabulary");
  }
  const double norm = l2_norm(direction);
  if (norm == 0.0) throw ValidationError("planted direction must be nonzero");
  std::vector<double> u(direction.size());
  for (std::size_t k = 0; k < u.size(); ++k) u[k] = direction[k] / norm;

  ModelWeights w = init_random_weights(config, options.vocab, options.scales);

  // Remove the u component of every row vector living in the residual space.
  auto project_rows = [&](Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      auto r = m.row(i);
      double along = 0.0;
      for (std::size_t k = 0; k < r.size(); ++k) along += r[k] * u[k];
      for (std::size_t k = 0; k < r.size(); ++k) r[k] = static_cast<float>(r[k] - along * u[k]);
    }
  };
  // Same for the columns of an output projection (d x in), so its image is
  // orthogonal to u.
  auto project_columns = [&](Matrix& m) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      double along = 0.0;
      for (std::size_t k = 0; k < m.rows(); ++k) along += m(k, j) * u[k];
      for (std::size_t k = 0; k < m.rows(); ++k) m(k, j) = static_cast<float>(m(k, j) - along * u[k]);
    }
  };

  project_rows(w.token_embedding);
  project_rows(w.position_embedding);
  for (auto& b : w.blocks) {
    project_columns(b.wo);
    project_columns(b.w_out);
    project_rows(b.b_out);
  }
  project_rows(w.unembedding);
  auto kw = w.unembedding.row(static_cast<std::size_t>(keyword_token));
  for (std::size_t k = 0; k < kw.size(); ++k) kw[k] = gain * direction[k];
  return w;
}

}  // namespace steerlab
