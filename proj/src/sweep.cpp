#include "steerlab/sweep.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <thread>

#include "binary_io.hpp"
#include "steerlab/error.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_bits(float f) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", std::bit_cast<std::uint32_t>(f));
  return buf;
}

// Derivation-level key: everything except strength and intervention kind, so
// norm matching and noise directions are shared across strengths.
std::string derivation_key(const SweepCell& c) {
  return c.offset.to_string() + "|" + std::to_string(c.layer) + "|" + c.source.store_id + "|" + c.source.category;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  std::string s = buf;
  return s == "-0" ? "0" : s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

const ActivationSource& store_for(const SweepInputs& inputs, const std::string& id) {
  auto it = inputs.stores.find(id);
  if (it == inputs.stores.end() || it->second == nullptr) throw NotFoundError("unknown store id '" + id + "'");
  return *it->second;
}

}  // namespace

std::string_view to_string(SweepIntervention k) {
  switch (k) {
    case SweepIntervention::dom: return "dom";
    case SweepIntervention::overall_mean: return "overall_mean";
    case SweepIntervention::gaussian_noise: return "gaussian_noise";
    case SweepIntervention::self_amplify: return "self_amplify";
  }
  return "unknown";
}

SweepIntervention sweep_intervention_from_string(std::string_view s) {
  for (auto k : {SweepIntervention::dom, SweepIntervention::overall_mean, SweepIntervention::gaussian_noise,
                 SweepIntervention::self_amplify}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown intervention '" + std::string(s) +
                        "' (expected dom, overall_mean, gaussian_noise or self_amplify)");
}

void SweepGrid::validate() const {
  if (offsets.empty() || strengths.empty() || layers.empty() || vector_sources.empty() || interventions.empty()) {
    throw ValidationError("sweep grid axes must all be non-empty");
  }
  if (replicates < 1) throw ValidationError("sweep grid needs at least one replicate");
  for (const auto& w : offsets) w.validate();
  for (float s : strengths) {
    if (!std::isfinite(s)) throw ValidationError("sweep strengths must be finite");
  }
  keywords.validate();
}

std::vector<SweepCell> enumerate_cells(const SweepGrid& grid) {
  std::vector<SweepCell> cells;
  for (int layer : grid.layers) {
    for (const auto& source : grid.vector_sources) {
      for (const auto& offset : grid.offsets) {
        for (auto kind : grid.interventions) {
          for (float strength : grid.strengths) cells.push_back({offset, strength, layer, source, kind});
        }
      }
    }
  }
  return cells;
}

std::uint64_t cell_seed(std::uint64_t grid_seed, const SweepCell& c) {
  const std::string key = derivation_key(c) + "|" + hex_bits(c.strength) + "|" + std::string(to_string(c.intervention));
  return splitmix64(grid_seed ^ fnv1a(key));
}

std::uint64_t generation_seed(std::uint64_t seed, std::size_t replicate, std::size_t prompt_index) {
  return splitmix64(splitmix64(seed ^ (0x1000003ULL * (replicate + 1))) ^ (prompt_index + 1));
}

InterventionSpec cell_intervention(const SweepGrid& grid, const SweepInputs& inputs, const SweepCell& cell) {
  if (cell.intervention == SweepIntervention::self_amplify) {
    return InterventionSpec::self_amplify(cell.layer, cell.strength);
  }
  const ActivationSource& source = store_for(inputs, cell.source.store_id);
  const auto positive = SelectionSpec::category(cell.source.category, cell.offset, grid.exclude_prompt);
  const auto reference = SelectionSpec::all(cell.offset, grid.exclude_prompt);
  BaselineParams params;
  params.window = cell.offset;
  params.exclude_prompt = grid.exclude_prompt;
  params.source_model = cell.source.store_id;

  SteeringVector v;
  switch (cell.intervention) {
    case SweepIntervention::dom:
      v = derive_dom(source, inputs.corpus, positive, reference, cell.layer, cell.source.store_id);
      break;
    case SweepIntervention::overall_mean:
      v = make_baseline(BaselineKind::overall_mean, source, inputs.corpus, cell.layer, params);
      break;
    case SweepIntervention::gaussian_noise: {
      const auto dom = derive_dom(source, inputs.corpus, positive, reference, cell.layer);
      params.target_norm = static_cast<float>(l2_norm(dom.values));
      params.seed = splitmix64(grid.seed ^ fnv1a("noise|" + derivation_key(cell)));
      v = make_baseline(BaselineKind::gaussian_noise, source, inputs.corpus, cell.layer, params);
      break;
    }
    case SweepIntervention::self_amplify:
      break;
  }
  return InterventionSpec::add_at(std::move(v), cell.layer, cell.strength, grid.normalize);
}

SweepResult run_cell(const SweepGrid& grid, const SweepInputs& inputs, const SweepCell& cell) {
  SweepResult result;
  result.cell = cell;
  try {
    if (inputs.prompts.empty()) throw ValidationError("sweep needs at least one prompt");
    GenerationSession session = inputs.model;
    session.capture_layers.clear();
    session.interventions.push_back(cell_intervention(grid, inputs, cell));
    const auto& vocab = session.weights->vocab;
    const std::uint64_t seed = cell_seed(grid.seed, cell);

    std::vector<double> per_replicate;
    for (std::size_t r = 0; r < grid.replicates; ++r) {
      double total = 0.0;
      for (std::size_t p = 0; p < inputs.prompts.size(); ++p) {
        session.sampler.seed = generation_seed(seed, r, p);
        const auto tokens = generate(session, inputs.prompts[p], grid.max_new_tokens);
        const std::string text = vocab.decode(tokens);
        // A continuation with no words has no keywords.
        total += segment_words(text).empty() ? 0.0 : backtrack_score(text, grid.keywords);
      }
      per_replicate.push_back(total / static_cast<double>(inputs.prompts.size()));
    }
    double mean = 0.0;
    for (double x : per_replicate) mean += x;
    mean /= static_cast<double>(per_replicate.size());
    double var = 0.0;
    for (double x : per_replicate) var += (x - mean) * (x - mean);
    var /= static_cast<double>(per_replicate.size());
    result.mean = mean;
    result.std = std::sqrt(var);
    result.n_generations = grid.replicates * inputs.prompts.size();
    result.ok = true;
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
  }
  return result;
}

std::vector<SweepResult> run_sweep(const SweepGrid& grid, const SweepInputs& inputs, std::size_t threads) {
  grid.validate();
  if (!inputs.model.weights) throw ValidationError("sweep needs model weights");
  if (inputs.prompts.empty()) throw ValidationError("sweep needs at least one prompt");
  for (const auto& src : grid.vector_sources) store_for(inputs, src.store_id);

  const auto cells = enumerate_cells(grid);
  std::vector<SweepResult> results(cells.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, cells.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) results[i] = run_cell(grid, inputs, cells[i]);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) results[i] = run_cell(grid, inputs, cells[i]);
    });
  }
  for (auto& w : workers) w.join();
  return results;
}

std::string results_to_csv(std::span<const SweepResult> results) {
  std::string out =
      "offset_start,offset_end,strength,layer,source_store,source_category,intervention,mean,std,n,status\n";
  for (const auto& r : results) {
    const auto& c = r.cell;
    out += std::to_string(c.offset.offset_start) + "," + std::to_string(c.offset.offset_end) + "," +
           format_number(c.strength) + "," + std::to_string(c.layer) + "," + csv_field(c.source.store_id) + "," +
           csv_field(c.source.category) + "," + std::string(to_string(c.intervention)) + ",";
    if (r.ok) {
      out += format_number(r.mean) + "," + format_number(r.std) + "," + std::to_string(r.n_generations) + ",ok\n";
    } else {
      out += ",,,failed\n";
    }
  }
  return out;
}

void export_csv(std::span<const SweepResult> results, const std::filesystem::path& out) {
  if (results.empty()) throw ValidationError("no sweep results to export");
  detail::write_text_file(out, results_to_csv(results));
}

}  // namespace steerlab
