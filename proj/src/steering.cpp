#include "steerlab/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include <json.hpp>

#include "binary_io.hpp"
#include "steerlab/error.hpp"

namespace steerlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kVectorMagic[4] = {'S', 'T', 'V', 'C'};
constexpr std::uint32_t kVectorVersion = 1;
constexpr std::size_t kVectorHeaderBytes = 16;

}  // namespace

std::string_view to_string(Derivation d) {
  switch (d) {
    case Derivation::dom: return "dom";
    case Derivation::overall_mean: return "overall_mean";
    case Derivation::gaussian_noise: return "gaussian_noise";
    case Derivation::category_dom: return "category_dom";
  }
  return "unknown";
}

Derivation derivation_from_string(std::string_view s) {
  for (auto d : {Derivation::dom, Derivation::overall_mean, Derivation::gaussian_noise, Derivation::category_dom}) {
    if (to_string(d) == s) return d;
  }
  throw ValidationError("unknown derivation '" + std::string(s) + "'");
}

std::string_view to_string(InterventionKind k) {
  return k == InterventionKind::add_vector ? "add_vector" : "self_amplify";
}

std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::overall_mean: return "overall_mean";
    case BaselineKind::gaussian_noise: return "gaussian_noise";
    case BaselineKind::category_dom: return "category_dom";
  }
  return "unknown";
}

BaselineKind baseline_kind_from_string(std::string_view s) {
  for (auto k : {BaselineKind::overall_mean, BaselineKind::gaussian_noise, BaselineKind::category_dom}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown baseline kind '" + std::string(s) +
                        "' (expected overall_mean, gaussian_noise or category_dom)");
}

InterventionSpec InterventionSpec::add(SteeringVector v, float strength, bool normalize) {
  const int layer = v.layer;
  return add_at(std::move(v), layer, strength, normalize);
}

InterventionSpec InterventionSpec::add_at(SteeringVector v, int layer, float strength, bool normalize) {
  InterventionSpec s;
  s.kind = InterventionKind::add_vector;
  s.vector = std::move(v);
  s.strength = strength;
  s.layer = layer;
  s.normalize = normalize;
  return s;
}

InterventionSpec InterventionSpec::self_amplify(int layer, float strength) {
  InterventionSpec s;
  s.kind = InterventionKind::self_amplify;
  s.strength = strength;
  s.layer = layer;
  return s;
}

void InterventionSpec::validate(std::size_t d_model, int n_layers) const {
  if (layer < 0 || layer >= n_layers) {
    throw ValidationError("intervention layer " + std::to_string(layer) + " outside [0, " +
                          std::to_string(n_layers) + ")");
  }
  if (!std::isfinite(strength)) throw ValidationError("intervention strength must be finite");
  if (kind == InterventionKind::add_vector) {
    if (!vector) throw ValidationError("add_vector intervention requires a vector");
    if (vector->d_model() != d_model) {
      throw ValidationError("intervention vector has length " + std::to_string(vector->d_model()) +
                            ", model d_model is " + std::to_string(d_model));
    }
  } else if (vector) {
    throw ValidationError("self_amplify intervention must not carry a vector");
  }
}

std::vector<float> mean_act_over(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                                 const PositionSelector& positions, int layer) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return corpus[a].trace_id < corpus[b].trace_id; });

  const std::size_t d = source.d_model();
  std::vector<double> total(d, 0.0);
  std::vector<double> per_trace(d);
  std::size_t n_traces = 0;
  for (std::size_t idx : order) {
    const ReasoningTrace& trace = corpus[idx];
    const auto selected = positions(trace);
    if (selected.empty()) continue;
    const ActivationMatrix acts = source.read(trace.trace_id, layer);
    if (acts.n_positions() != trace.size()) {
      throw ValidationError("activations for '" + trace.trace_id + "' layer " + std::to_string(layer) + " have " +
                            std::to_string(acts.n_positions()) + " positions, trace has " +
                            std::to_string(trace.size()) + " tokens");
    }
    std::fill(per_trace.begin(), per_trace.end(), 0.0);
    for (std::size_t p : selected) {
      const auto row = acts.data.row(p);
      for (std::size_t k = 0; k < d; ++k) per_trace[k] += row[k];
    }
    const double inv = 1.0 / static_cast<double>(selected.size());
    for (std::size_t k = 0; k < d; ++k) total[k] += per_trace[k] * inv;
    ++n_traces;
  }
  if (n_traces == 0) throw ValidationError("empty selection: no trace has any selected position");
  std::vector<float> out(d);
  for (std::size_t k = 0; k < d; ++k) out[k] = static_cast<float>(total[k] / static_cast<double>(n_traces));
  return out;
}

std::vector<float> mean_act(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                            const SelectionSpec& spec, int layer) {
  spec.window.validate();
  return mean_act_over(
      source, corpus, [&](const ReasoningTrace& t) { return selected_position_set(t, spec); }, layer);
}

SteeringVector derive_dom(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                          const SelectionSpec& positive, const SelectionSpec& reference, int layer,
                          std::string source_model) {
  const auto pos = mean_act(source, corpus, positive, layer);
  const auto ref = mean_act(source, corpus, reference, layer);
  SteeringVector v;
  v.values.resize(pos.size());
  for (std::size_t k = 0; k < pos.size(); ++k) v.values[k] = pos[k] - ref[k];
  v.layer = layer;
  v.source_model = std::move(source_model);
  v.category = positive.category_name();
  v.window = positive.window;
  v.derivation = Derivation::dom;
  return v;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine similarity of a zero-norm vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

SteeringVector make_baseline(BaselineKind kind, const ActivationSource& source,
                             std::span<const ReasoningTrace> corpus, int layer, const BaselineParams& params) {
  switch (kind) {
    case BaselineKind::overall_mean: {
      SteeringVector v;
      v.values = mean_act(source, corpus, SelectionSpec::all(params.window, params.exclude_prompt), layer);
      v.layer = layer;
      v.source_model = params.source_model;
      v.category = "ALL";
      v.window = params.window;
      v.derivation = Derivation::overall_mean;
      return v;
    }
    case BaselineKind::gaussian_noise: {
      if (!params.seed) throw ValidationError("gaussian_noise baseline requires a seed");
      if (!params.target_norm) throw ValidationError("gaussian_noise baseline requires a target norm");
      if (!(*params.target_norm > 0.0f) || !std::isfinite(*params.target_norm)) {
        throw ValidationError("gaussian_noise target norm must be positive and finite");
      }
      std::mt19937_64 rng(*params.seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<double> raw(source.d_model());
      double sq = 0.0;
      for (double& x : raw) {
        x = normal(rng);
        sq += x * x;
      }
      const double scale = static_cast<double>(*params.target_norm) / std::sqrt(sq);
      SteeringVector v;
      v.values.resize(raw.size());
      for (std::size_t k = 0; k < raw.size(); ++k) v.values[k] = static_cast<float>(raw[k] * scale);
      v.layer = layer;
      v.source_model = params.source_model;
      v.category = "noise";
      v.window = params.window;
      v.derivation = Derivation::gaussian_noise;
      return v;
    }
    case BaselineKind::category_dom: {
      if (!params.category) throw ValidationError("category_dom baseline requires a category");
      if (!params.taxonomy.contains(*params.category)) {
        throw NotFoundError("unknown category '" + *params.category + "'");
      }
      SteeringVector v = derive_dom(source, corpus,
                                    SelectionSpec::category(*params.category, params.window, params.exclude_prompt),
                                    SelectionSpec::all(params.window, params.exclude_prompt), layer,
                                    params.source_model);
      v.derivation = Derivation::category_dom;
      return v;
    }
  }
  throw ValidationError("unknown baseline kind");
}

std::vector<float> scaled(std::span<const float> values, float strength, bool normalize) {
  double factor = strength;
  if (normalize) {
    const double n = l2_norm(values);
    if (n == 0.0) throw ValidationError("cannot normalize a zero-norm vector");
    factor /= n;
  }
  std::vector<float> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) out[k] = static_cast<float>(factor * values[k]);
  return out;
}

fs::path vector_sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

void save_vector(const fs::path& path, const SteeringVector& v) {
  if (v.values.empty()) throw ValidationError("cannot save an empty steering vector");
  if (!all_finite(v.values)) throw ValidationError("steering vector contains non-finite values");
  std::vector<char> bytes;
  bytes.insert(bytes.end(), kVectorMagic, kVectorMagic + 4);
  detail::put<std::uint32_t>(bytes, kVectorVersion);
  detail::put<std::uint64_t>(bytes, v.values.size());
  detail::put_f32_payload(bytes, v.values);
  detail::write_file(path, bytes);

  json meta;
  meta["d_model"] = v.values.size();
  meta["layer"] = v.layer;
  meta["source_model"] = v.source_model;
  meta["category"] = v.category;
  meta["window"] = {{"offset_start", v.window.offset_start}, {"offset_end", v.window.offset_end}};
  meta["derivation"] = std::string(to_string(v.derivation));
  detail::write_text_file(vector_sidecar_path(path), meta.dump(2) + "\n");
}

SteeringVector load_vector(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string where = "'" + path.string() + "'";
  if (bytes.size() < kVectorHeaderBytes || std::memcmp(bytes.data(), kVectorMagic, 4) != 0) {
    throw FormatError("not a steering vector file: " + where);
  }
  if (detail::get<std::uint32_t>(bytes, 4) != kVectorVersion) {
    throw FormatError("unsupported steering vector version in " + where);
  }
  const auto d = detail::get<std::uint64_t>(bytes, 8);
  std::uint64_t payload = 0;
  if (d == 0 || !detail::checked_product(d, sizeof(float), 1, payload) ||
      payload != bytes.size() - kVectorHeaderBytes) {
    throw FormatError("corrupted steering vector file " + where + ": length mismatch");
  }
  SteeringVector v;
  v.values = detail::get_f32_payload(bytes, kVectorHeaderBytes, d);
  if (!all_finite(v.values)) throw FormatError("corrupted steering vector file " + where + ": non-finite values");

  const fs::path side = vector_sidecar_path(path);
  if (fs::exists(side)) {
    try {
      const json meta = json::parse(detail::read_text_file(side));
      if (meta.at("d_model").get<std::size_t>() != d) {
        throw FormatError("sidecar " + side.string() + " disagrees on d_model");
      }
      v.layer = meta.at("layer").get<int>();
      v.source_model = meta.value("source_model", "");
      v.category = meta.value("category", "");
      v.window.offset_start = meta.at("window").at("offset_start").get<int>();
      v.window.offset_end = meta.at("window").at("offset_end").get<int>();
      v.derivation = derivation_from_string(meta.value("derivation", "dom"));
    } catch (const json::exception& e) {
      throw FormatError("malformed sidecar " + side.string() + ": " + e.what());
    }
  }
  return v;
}

}  // namespace steerlab
