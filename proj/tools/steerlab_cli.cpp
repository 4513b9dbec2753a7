// steerlab: command-line entry point.
//
// Every subcommand writes its outputs and a run.json (resolved options plus a
// short summary) under --out-dir. Exit status: 0 success, 1 user error (bad
// flags, missing or malformed inputs), 2 internal error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "steerlab/activation_store.hpp"
#include "steerlab/error.hpp"
#include "steerlab/judge_client.hpp"
#include "steerlab/metrics.hpp"
#include "steerlab/planted_lab.hpp"
#include "steerlab/probe.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/sweep.hpp"
#include "steerlab/toy_model.hpp"
#include "steerlab/trace_corpus.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace steerlab;

namespace {

std::string dump(const json& j) { return j.dump(2, ' ', false, json::error_handler_t::replace) + "\n"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

json resolved_options(const CLI::App& app) {
  json j = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    if (opt == app.get_help_ptr()) continue;
    const std::string name = opt->get_single_name();
    if (opt->get_expected_max() == 0) {
      j[name] = opt->count() > 0 ? opt->as<bool>() : opt->get_default_str() == "true";
    } else if (opt->count() == 0) {
      j[name] = opt->get_default_str();
    } else if (opt->get_items_expected_max() > 1) {
      j[name] = opt->results();
    } else {
      j[name] = opt->results().back();
    }
  }
  return j;
}

// Collects outputs of one subcommand and writes run.json last.
class Run {
 public:
  Run(const CLI::App& app, fs::path out_dir) : app_(app), dir_(std::move(out_dir)) {
    fs::create_directories(dir_);
  }
  const fs::path& dir() const { return dir_; }
  fs::path output(const std::string& name) {
    outputs_.push_back(name);
    return dir_ / name;
  }
  json& summary() { return summary_; }
  void finish() {
    json j;
    j["command"] = app_.get_name();
    j["options"] = resolved_options(app_);
    j["outputs"] = outputs_;
    j["summary"] = summary_;
    write_text(dir_ / "run.json", dump(j));
  }

 private:
  const CLI::App& app_;
  fs::path dir_;
  std::vector<std::string> outputs_;
  json summary_ = json::object();
};

std::vector<std::vector<std::int64_t>> load_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open prompts file " + path.string());
  std::vector<std::vector<std::int64_t>> prompts;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      prompts.push_back(json::parse(line).at("token_ids").get<std::vector<std::int64_t>>());
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (prompts.empty()) throw ValidationError("prompts file " + path.string() + " holds no prompts");
  return prompts;
}

std::string prompts_jsonl(const std::vector<std::vector<std::int64_t>>& prompts, const Vocabulary& vocab) {
  std::string out;
  for (const auto& p : prompts) {
    json j{{"token_ids", p}, {"text", vocab.decode(p)}};
    out += j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  }
  return out;
}

Sampler make_sampler(double temperature, std::uint64_t seed) {
  return temperature > 0.0 ? Sampler::with_temperature(temperature, seed) : Sampler::greedy();
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

json optional_metric(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// Options shared by every subcommand.
struct Common {
  std::string out_dir = "run";
  std::uint64_t seed = 0;
};

// Boolean flag whose default shows in --help and run.json.
CLI::Option* add_switch(CLI::App* sub, const std::string& names, bool& value, const std::string& description) {
  return sub->add_flag(names, value, description)->default_str(value ? "true" : "false");
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--out-dir", c.out_dir, "Directory for outputs and run.json");
  sub->add_option("--seed", c.seed, "Seed for every random choice");
}

// ---------------------------------------------------------------- toy-init

struct ToyInitArgs {
  Common common;
  std::size_t traces = 40;
  std::size_t prompts = 8;
  float gain = 5.0f;
  std::size_t d_model = 64;
  std::vector<int> capture_layers{0, 1};
};

void cmd_toy_init(const CLI::App& app, const ToyInitArgs& a) {
  Run run(app, a.common.out_dir);
  PlantedLabOptions o;
  o.n_traces = a.traces;
  o.n_prompts = a.prompts;
  o.gain = a.gain;
  o.d_model = a.d_model;
  o.seed = a.common.seed;
  const PlantedLab lab = build_planted_lab(o);

  save_weights(*lab.weights, run.output("model"));
  write_corpus(run.output("corpus.jsonl"), lab.corpus);
  write_text(run.output("prompts.jsonl"), prompts_jsonl(lab.prompts, lab.weights->vocab));

  SteeringVector direction;
  direction.values = lab.direction;
  direction.source_model = "planted";
  direction.category = kBacktracking;
  direction.derivation = Derivation::dom;
  save_vector(run.output("direction.stvc"), direction);
  run.output("direction.stvc.json");

  if (!a.capture_layers.empty()) capture_to_store(*lab.weights, lab.corpus, a.capture_layers, "planted", run.output("store"));

  run.summary() = {{"keyword_token", lab.keyword_token},
                   {"keyword_text", lab.weights->vocab.text(lab.keyword_token)},
                   {"cue_tokens", lab.cue_tokens},
                   {"n_traces", lab.corpus.size()},
                   {"n_prompts", lab.prompts.size()}};
  run.finish();
  std::cout << "planted lab written to " << run.dir().string() << "\n";
}

// ---------------------------------------------------------------- ingest

struct IngestArgs {
  Common common;
  std::string store;
  std::string corpus;
  std::string model;
  std::vector<int> layers;
  std::string model_id = "toy";
};

void cmd_ingest(const CLI::App& app, const IngestArgs& a) {
  Run run(app, a.common.out_dir);
  const auto corpus = load_corpus(a.corpus);
  if (!a.model.empty()) {
    if (a.layers.empty()) throw ValidationError("--layers is required with --model");
    const ModelWeights weights = load_weights(a.model);
    capture_to_store(weights, corpus, a.layers, a.model_id, a.store);
  }
  const auto store = ActivationStore::open(a.store);
  store.validate_all();
  const auto& m = store.manifest();
  for (const auto& t : corpus) {
    if (!m.has_trace(t.trace_id)) throw ValidationError("store has no activations for trace '" + t.trace_id + "'");
    const auto acts = store.read(t.trace_id, m.layer_ids.front());
    if (acts.n_positions() != t.size()) {
      throw ValidationError("trace '" + t.trace_id + "' has " + std::to_string(t.size()) + " tokens but the store has " +
                            std::to_string(acts.n_positions()) + " positions");
    }
  }
  run.summary() = {{"model_id", m.model_id},
                   {"d_model", m.d_model},
                   {"n_traces", m.trace_ids.size()},
                   {"layers", m.layer_ids},
                   {"tap_point", m.tap_point}};
  run.finish();
  std::cout << "store " << a.store << ": " << m.trace_ids.size() << " traces x " << m.layer_ids.size()
            << " layers, d_model " << m.d_model << ", valid\n";
}

// ---------------------------------------------------------------- derive

struct DeriveArgs {
  Common common;
  std::string store;
  std::string corpus;
  int layer = 0;
  std::string offset = "-13:-8";
  std::string category = kBacktracking;
  std::string reference = "ALL";
  bool exclude_prompt = false;
  std::string name = "vector.stvc";
};

void cmd_derive(const CLI::App& app, const DeriveArgs& a) {
  Run run(app, a.common.out_dir);
  const auto window = WindowSpec::parse(a.offset);
  const auto store = ActivationStore::open(a.store);
  const auto corpus = load_corpus(a.corpus);
  const auto positive = SelectionSpec::category(a.category, window, a.exclude_prompt);
  const auto reference = a.reference == "ALL" ? SelectionSpec::all(window, a.exclude_prompt)
                                              : SelectionSpec::category(a.reference, window, a.exclude_prompt);
  const auto v = derive_dom(store, corpus, positive, reference, a.layer, store.manifest().model_id);
  save_vector(run.output(a.name), v);
  run.output(a.name + ".json");
  run.summary() = {{"norm", l2_norm(v.values)}, {"d_model", v.d_model()}};
  run.finish();
  std::cout << "derived " << a.category << " vs " << a.reference << " at layer " << a.layer << ", offset "
            << window.to_string() << ", |v| = " << fmt6(l2_norm(v.values)) << "\n";
}

// ---------------------------------------------------------------- baseline

struct BaselineArgs {
  Common common;
  std::string kind;
  std::string store;
  std::string corpus;
  int layer = 0;
  std::string offset = "-13:-8";
  std::string category = kBacktracking;
  std::optional<float> target_norm;
  std::string match_norm;
  bool exclude_prompt = false;
  std::string name = "baseline.stvc";
};

void cmd_baseline(const CLI::App& app, const BaselineArgs& a) {
  Run run(app, a.common.out_dir);
  const auto kind = baseline_kind_from_string(a.kind);
  const auto store = ActivationStore::open(a.store);
  const auto corpus = load_corpus(a.corpus);
  BaselineParams p;
  p.window = WindowSpec::parse(a.offset);
  p.exclude_prompt = a.exclude_prompt;
  p.source_model = store.manifest().model_id;
  p.seed = a.common.seed;
  if (kind == BaselineKind::category_dom) p.category = a.category;
  if (kind == BaselineKind::gaussian_noise) {
    if (!a.match_norm.empty()) {
      p.target_norm = static_cast<float>(l2_norm(load_vector(a.match_norm).values));
    } else if (a.target_norm) {
      p.target_norm = *a.target_norm;
    } else {
      throw ValidationError("gaussian_noise needs --target-norm or --match-norm");
    }
  }
  const auto v = make_baseline(kind, store, corpus, a.layer, p);
  save_vector(run.output(a.name), v);
  run.output(a.name + ".json");
  run.summary() = {{"norm", l2_norm(v.values)}, {"kind", std::string(to_string(kind))}};
  run.finish();
  std::cout << to_string(kind) << " baseline at layer " << a.layer << ", |v| = " << fmt6(l2_norm(v.values)) << "\n";
}

// ---------------------------------------------------------------- steer

struct SteerArgs {
  Common common;
  std::string model;
  std::string vector;
  std::optional<int> layer;
  float strength = 0.0f;
  bool normalize = false;
  bool self_amplify = false;
  std::string prompts;
  std::vector<std::string> prompt_texts;
  std::size_t max_new = 24;
  std::size_t replicates = 1;
  double temperature = 1.0;
  std::string keywords = "wait,hmm";
};

void cmd_steer(const CLI::App& app, const SteerArgs& a) {
  Run run(app, a.common.out_dir);
  auto weights = std::make_shared<const ModelWeights>(load_weights(a.model));
  std::vector<std::vector<std::int64_t>> prompts;
  if (!a.prompts.empty()) prompts = load_prompts(a.prompts);
  for (const auto& t : a.prompt_texts) prompts.push_back(weights->vocab.encode(t));
  if (prompts.empty()) throw ValidationError("give --prompts or at least one --prompt");
  if (a.replicates == 0) throw ValidationError("--replicates must be at least 1");

  GenerationSession session;
  session.weights = weights;
  if (a.self_amplify) {
    if (!a.vector.empty()) throw ValidationError("--self-amplify does not take a --vector");
    if (!a.layer) throw ValidationError("--self-amplify needs --layer");
    session.interventions.push_back(InterventionSpec::self_amplify(*a.layer, a.strength));
  } else if (!a.vector.empty()) {
    auto v = load_vector(a.vector);
    const int layer = a.layer.value_or(v.layer);
    session.interventions.push_back(InterventionSpec::add_at(std::move(v), layer, a.strength, a.normalize));
  }
  session.validate();

  const auto keywords = KeywordSet::parse(a.keywords, MatchMode::word_equals);
  std::string lines;
  double total = 0.0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t r = 0; r < a.replicates; ++r) {
      session.sampler = make_sampler(a.temperature, generation_seed(a.common.seed, r, p));
      const auto tokens = generate(session, prompts[p], a.max_new);
      const std::string text = weights->vocab.decode(tokens);
      const double score = segment_words(text).empty() ? 0.0 : backtrack_score(text, keywords);
      total += score;
      json j{{"prompt_index", p}, {"replicate", r}, {"token_ids", tokens}, {"text", text}, {"backtrack_score", score}};
      lines += j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
    }
  }
  write_text(run.output("generations.jsonl"), lines);
  const double mean = total / static_cast<double>(prompts.size() * a.replicates);
  run.summary() = {{"mean_backtrack_score", mean}, {"n_generations", prompts.size() * a.replicates}};
  run.finish();
  std::cout << "mean backtrack score " << fmt6(mean) << " over " << prompts.size() * a.replicates
            << " generations\n";
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  Common common;
  std::string model;
  std::vector<std::string> stores;
  std::string corpus;
  std::string prompts;
  std::vector<std::string> offsets{"-13:-8"};
  std::vector<float> strengths{0.0f, 4.0f, 8.0f, 12.0f};
  std::vector<int> layers;
  std::vector<std::string> sources;
  std::vector<std::string> interventions{"dom"};
  std::size_t replicates = 8;
  std::size_t threads = 1;
  std::size_t max_new = 24;
  double temperature = 1.0;
  bool normalize = true;
  bool exclude_prompt = false;
  std::string keywords = "wait,hmm";
};

void cmd_sweep(const CLI::App& app, const SweepArgs& a) {
  Run run(app, a.common.out_dir);
  std::map<std::string, std::unique_ptr<ActivationStore>> owned;
  SweepInputs inputs;
  for (const auto& spec : a.stores) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--store expects id=path, got '" + spec + "'");
    const std::string id = spec.substr(0, eq);
    auto store = std::make_unique<ActivationStore>(ActivationStore::open(spec.substr(eq + 1)));
    inputs.stores[id] = store.get();
    if (!owned.emplace(id, std::move(store)).second) throw ValidationError("duplicate store id '" + id + "'");
  }
  const auto corpus = load_corpus(a.corpus);
  inputs.corpus = corpus;
  inputs.model.weights = std::make_shared<const ModelWeights>(load_weights(a.model));
  inputs.model.sampler = make_sampler(a.temperature, 0);
  inputs.prompts = load_prompts(a.prompts);

  SweepGrid grid;
  for (const auto& o : a.offsets) grid.offsets.push_back(WindowSpec::parse(o));
  grid.strengths = a.strengths;
  grid.layers = a.layers;
  if (a.sources.empty()) {
    for (const auto& [id, _] : owned) grid.vector_sources.push_back({id, kBacktracking});
  }
  for (const auto& s : a.sources) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ValidationError("--source expects store_id:category, got '" + s + "'");
    grid.vector_sources.push_back({s.substr(0, colon), s.substr(colon + 1)});
  }
  grid.interventions.clear();
  for (const auto& i : a.interventions) grid.interventions.push_back(sweep_intervention_from_string(i));
  grid.replicates = a.replicates;
  grid.seed = a.common.seed;
  grid.normalize = a.normalize;
  grid.exclude_prompt = a.exclude_prompt;
  grid.max_new_tokens = a.max_new;
  grid.keywords = KeywordSet::parse(a.keywords, MatchMode::word_equals);

  const auto results = run_sweep(grid, inputs, a.threads);
  export_csv(results, run.output("results.csv"));
  std::size_t failed = 0;
  json errors = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].ok) {
      ++failed;
      errors.push_back({{"row", i + 1}, {"error", results[i].error}});
    }
  }
  run.summary() = {{"cells", results.size()}, {"failed", failed}, {"errors", errors}};
  run.finish();
  std::cout << results.size() << " cells, " << failed << " failed; results in "
            << (run.dir() / "results.csv").string() << "\n";
}

// ---------------------------------------------------------------- lens

struct LensArgs {
  Common common;
  std::string model;
  std::vector<std::string> vectors;
  std::string keywords = "wait,but";
  std::string match = "substring";
};

void cmd_lens(const CLI::App& app, const LensArgs& a) {
  Run run(app, a.common.out_dir);
  const ModelWeights weights = load_weights(a.model);
  const auto keywords = KeywordSet::parse(a.keywords, match_mode_from_string(a.match));
  const auto mask = build_vocab_mask(weights.vocab.tokens(), keywords);
  std::string csv = "vector,layer,category,derivation,score\n";
  json scores = json::array();
  for (const auto& path : a.vectors) {
    const auto v = load_vector(path);
    const double s = logit_lens_score(v.values, weights.unembedding, mask);
    csv += path + "," + std::to_string(v.layer) + "," + v.category + "," + std::string(to_string(v.derivation)) + "," +
           fmt6(s) + "\n";
    scores.push_back({{"vector", path}, {"layer", v.layer}, {"score", s}});
    std::cout << path << " layer " << v.layer << " s(v) = " << fmt6(s) << "\n";
  }
  write_text(run.output("lens.csv"), csv);
  run.summary() = {{"mask_size", mask.l1}, {"scores", scores}};
  run.finish();
}

// ---------------------------------------------------------------- probe

struct ProbeArgs {
  Common common;
  std::string store;
  std::string corpus;
  std::string vector;
  std::vector<std::string> traces;
  std::string center;
};

void cmd_probe(const CLI::App& app, const ProbeArgs& a) {
  Run run(app, a.common.out_dir);
  const auto store = ActivationStore::open(a.store);
  const auto corpus = load_corpus(a.corpus);
  const auto direction = load_vector(a.vector);
  const std::vector<float> center = a.center.empty() ? default_probe_center(store, corpus, direction.layer)
                                                     : load_vector(a.center).values;
  json summary = json::array();
  std::size_t done = 0;
  for (const auto& trace : corpus) {
    if (!a.traces.empty() && std::find(a.traces.begin(), a.traces.end(), trace.trace_id) == a.traces.end()) continue;
    const auto rows = probe_scores(trace, store.read(trace.trace_id, direction.layer), direction, center);
    render_heatmap(rows, run.output(trace.trace_id + ".html"));
    write_score_csv(rows, run.output(trace.trace_id + ".csv"));
    summary.push_back({{"trace_id", trace.trace_id}, {"tokens", rows.size()}, {"p95_positive", positive_p95(rows)}});
    ++done;
  }
  if (done == 0) throw NotFoundError("none of the requested traces are in the corpus");
  run.summary() = {{"traces", summary}};
  run.finish();
  std::cout << "probed " << done << " traces into " << run.dir().string() << "\n";
}

// ---------------------------------------------------------------- judge

struct JudgeArgs {
  Common common;
  std::string corpus;
  std::string mode = "fixture";
  std::string fixture;
  std::string endpoint;
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  std::string taxonomy = "backtracking,deduction,initializing,uncertainty-estimation,other";
  std::string prompt_template;
  std::size_t batch_size = 20;
  std::size_t max_in_flight = 4;
  std::string judge_name = "llm";
  bool keyword_labels = true;
};

void cmd_judge(const CLI::App& app, const JudgeArgs& a) {
  Run run(app, a.common.out_dir);
  JudgeConfig config;
  config.mode = judge_mode_from_string(a.mode);
  config.fixture_path = a.fixture;
  config.endpoint = a.endpoint;
  config.model = a.model;
  config.api_key_env = a.api_key_env;
  config.taxonomy = Taxonomy(KeywordSet::parse(a.taxonomy, MatchMode::substring).patterns);
  config.batch_size = a.batch_size;
  config.max_in_flight = a.max_in_flight;
  if (!a.prompt_template.empty()) {
    std::ifstream in(a.prompt_template);
    if (!in) throw NotFoundError("cannot open prompt template " + a.prompt_template);
    std::stringstream ss;
    ss << in.rdbuf();
    config.prompt_template = ss.str();
  }
  const JudgeClient client(config);
  auto corpus = load_corpus(a.corpus, config.taxonomy);
  const auto classified = client.classify_corpus(corpus);

  std::vector<LabelRecord> labels;
  std::string warnings;
  for (std::size_t t = 0; t < corpus.size(); ++t) {
    corpus[t].sentences = classified[t].sentences;
    for (std::size_t i = 0; i < corpus[t].sentences.size(); ++i) {
      labels.push_back({corpus[t].trace_id, i, a.judge_name, corpus[t].sentences[i].category == kBacktracking});
      if (a.keyword_labels) labels.push_back({corpus[t].trace_id, i, "keyword", keyword_judge(corpus[t].sentence_text(i))});
    }
    for (const auto& w : classified[t].warnings) {
      json j{{"trace_id", w.trace_id}, {"sentence_index", w.sentence_index}, {"message", w.message}};
      warnings += j.dump() + "\n";
      std::cerr << "warning: " << w.trace_id << " sentence " << w.sentence_index << ": " << w.message << "\n";
    }
  }
  write_corpus(run.output("corpus.jsonl"), corpus);
  write_label_records(run.output("labels.jsonl"), labels);
  write_text(run.output("warnings.jsonl"), warnings);
  run.summary() = {{"traces", corpus.size()}, {"labels", labels.size()}};
  run.finish();
  std::cout << "labelled " << corpus.size() << " traces\n";
}

// ---------------------------------------------------------------- consistency

struct ConsistencyArgs {
  Common common;
  std::string labels;
  std::string pred = "keyword";
  std::string ref = "llm";
};

void cmd_consistency(const CLI::App& app, const ConsistencyArgs& a) {
  Run run(app, a.common.out_dir);
  const auto records = load_label_records(a.labels);
  const auto report = judge_consistency(JudgeLabels::align(records, a.pred, a.ref));
  json j{{"prediction", a.pred}, {"reference", a.ref}, {"tp", report.tp}, {"fp", report.fp}, {"fn", report.fn},
         {"tn", report.tn}, {"precision", optional_metric(report.precision)},
         {"recall", optional_metric(report.recall)}, {"f1", optional_metric(report.f1)}};
  write_text(run.output("consistency.json"), dump(j));
  run.summary() = j;
  run.finish();
  auto show = [](const std::optional<double>& v) { return v ? fmt6(*v) : std::string("undefined"); };
  std::cout << "prediction " << a.pred << " vs reference " << a.ref << "\n"
            << "  tp " << report.tp << "  fp " << report.fp << "  fn " << report.fn << "  tn " << report.tn << "\n"
            << "  precision  " << show(report.precision) << "\n"
            << "  recall     " << show(report.recall) << "\n"
            << "  f1         " << show(report.f1) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerlab: steering-vector experiments on activation stores and a toy transformer"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  ToyInitArgs toy;
  auto* toy_cmd = app.add_subcommand("toy-init", "Build the planted toy model, corpus, prompts and store");
  add_common(toy_cmd, toy.common);
  toy_cmd->add_option("--traces", toy.traces, "Number of synthetic traces");
  toy_cmd->add_option("--prompts", toy.prompts, "Number of generation prompts");
  toy_cmd->add_option("--gain", toy.gain, "Keyword logit gain along the planted direction");
  toy_cmd->add_option("--d-model", toy.d_model, "Residual width");
  toy_cmd->add_option("--capture-layers", toy.capture_layers, "Layers to capture into store/ (empty to skip)");

  IngestArgs ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Capture activations from a toy model and/or validate a store");
  add_common(ingest_cmd, ingest.common);
  ingest_cmd->add_option("--store", ingest.store, "Store directory")->required();
  ingest_cmd->add_option("--corpus", ingest.corpus, "Corpus JSON-lines")->required()->check(CLI::ExistingFile);
  ingest_cmd->add_option("--model", ingest.model, "Toy model directory; captures into --store when given");
  ingest_cmd->add_option("--layers", ingest.layers, "Layers to capture");
  ingest_cmd->add_option("--model-id", ingest.model_id, "Model id recorded in the manifest");

  DeriveArgs derive;
  auto* derive_cmd = app.add_subcommand("derive", "Difference-of-means steering vector");
  add_common(derive_cmd, derive.common);
  derive_cmd->add_option("--store", derive.store, "Store directory")->required()->check(CLI::ExistingDirectory);
  derive_cmd->add_option("--corpus", derive.corpus, "Corpus JSON-lines")->required()->check(CLI::ExistingFile);
  derive_cmd->add_option("--layer", derive.layer, "Layer");
  derive_cmd->add_option("--offset", derive.offset, "Token window start:end relative to sentence start, inclusive");
  derive_cmd->add_option("--category", derive.category, "Positive sentence category");
  derive_cmd->add_option("--reference", derive.reference, "Reference category, or ALL");
  add_switch(derive_cmd, "--exclude-prompt", derive.exclude_prompt, "Drop positions inside the prompt");
  derive_cmd->add_option("--name", derive.name, "Vector file name inside --out-dir");

  BaselineArgs baseline;
  auto* baseline_cmd = app.add_subcommand("baseline", "Baseline vector: overall_mean, gaussian_noise or category_dom");
  add_common(baseline_cmd, baseline.common);
  baseline_cmd->add_option("--kind", baseline.kind, "Baseline kind")
      ->required()
      ->check(CLI::IsMember({"overall_mean", "gaussian_noise", "category_dom"}));
  baseline_cmd->add_option("--store", baseline.store, "Store directory")->required()->check(CLI::ExistingDirectory);
  baseline_cmd->add_option("--corpus", baseline.corpus, "Corpus JSON-lines")->required()->check(CLI::ExistingFile);
  baseline_cmd->add_option("--layer", baseline.layer, "Layer");
  baseline_cmd->add_option("--offset", baseline.offset, "Token window start:end");
  baseline_cmd->add_option("--category", baseline.category, "Category for category_dom");
  baseline_cmd->add_option("--target-norm", baseline.target_norm, "Norm of the gaussian_noise vector");
  baseline_cmd->add_option("--match-norm", baseline.match_norm, "Vector file whose norm gaussian_noise matches")
      ->check(CLI::ExistingFile);
  add_switch(baseline_cmd, "--exclude-prompt", baseline.exclude_prompt, "Drop positions inside the prompt");
  baseline_cmd->add_option("--name", baseline.name, "Vector file name inside --out-dir");

  SteerArgs steer;
  auto* steer_cmd = app.add_subcommand("steer", "Generate from the toy model with an intervention");
  add_common(steer_cmd, steer.common);
  steer_cmd->add_option("--model", steer.model, "Toy model directory")->required()->check(CLI::ExistingDirectory);
  steer_cmd->add_option("--vector", steer.vector, "Steering vector file")->check(CLI::ExistingFile);
  steer_cmd->add_option("--layer", steer.layer, "Layer to steer (default: the vector's layer)");
  steer_cmd->add_option("--strength", steer.strength, "Steering strength");
  add_switch(steer_cmd, "--normalize", steer.normalize, "Scale the unit vector instead of the raw vector");
  add_switch(steer_cmd, "--self-amplify", steer.self_amplify, "Scale the residual by (1 + strength) instead");
  steer_cmd->add_option("--prompts", steer.prompts, "Prompts JSON-lines with token_ids")->check(CLI::ExistingFile);
  steer_cmd->add_option("--prompt", steer.prompt_texts, "Prompt text (repeatable)");
  steer_cmd->add_option("--max-new", steer.max_new, "Tokens generated per prompt");
  steer_cmd->add_option("--replicates", steer.replicates, "Generations per prompt");
  steer_cmd->add_option("--temperature", steer.temperature, "Sampling temperature; 0 for greedy");
  steer_cmd->add_option("--keywords", steer.keywords, "Backtracking keywords, comma separated");

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Offset x strength x layer x source x intervention grid");
  add_common(sweep_cmd, sweep.common);
  sweep_cmd->add_option("--model", sweep.model, "Toy model directory")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--store", sweep.stores, "Store as id=path (repeatable)")->required();
  sweep_cmd->add_option("--corpus", sweep.corpus, "Corpus JSON-lines")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--prompts", sweep.prompts, "Prompts JSON-lines")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--offsets", sweep.offsets, "Windows start:end");
  sweep_cmd->add_option("--strengths", sweep.strengths, "Steering strengths");
  sweep_cmd->add_option("--layers", sweep.layers, "Layers")->required();
  sweep_cmd->add_option("--source", sweep.sources, "Vector source store_id:category (default: every store, backtracking)");
  sweep_cmd->add_option("--interventions", sweep.interventions, "dom, overall_mean, gaussian_noise, self_amplify");
  sweep_cmd->add_option("--replicates", sweep.replicates, "Generations per prompt per cell");
  sweep_cmd->add_option("--threads", sweep.threads, "Worker threads; 0 for all cores");
  sweep_cmd->add_option("--max-new", sweep.max_new, "Tokens generated per prompt");
  sweep_cmd->add_option("--temperature", sweep.temperature, "Sampling temperature; 0 for greedy");
  add_switch(sweep_cmd, "--normalize,!--no-normalize", sweep.normalize, "Steer with strength times the unit vector");
  add_switch(sweep_cmd, "--exclude-prompt", sweep.exclude_prompt, "Drop positions inside the prompt");
  sweep_cmd->add_option("--keywords", sweep.keywords, "Backtracking keywords, comma separated");

  LensArgs lens;
  auto* lens_cmd = app.add_subcommand("lens", "Logit-lens score of vectors against keyword tokens");
  add_common(lens_cmd, lens.common);
  lens_cmd->add_option("--model", lens.model, "Toy model directory (unembedding and vocabulary)")
      ->required()
      ->check(CLI::ExistingDirectory);
  lens_cmd->add_option("--vector", lens.vectors, "Vector files")->required()->check(CLI::ExistingFile);
  lens_cmd->add_option("--keywords", lens.keywords, "Keyword patterns, comma separated");
  lens_cmd->add_option("--match", lens.match, "substring or word_equals")
      ->check(CLI::IsMember({"substring", "word_equals"}));

  ProbeArgs probe;
  auto* probe_cmd = app.add_subcommand("probe", "Per-token projection heatmaps");
  add_common(probe_cmd, probe.common);
  probe_cmd->add_option("--store", probe.store, "Store directory")->required()->check(CLI::ExistingDirectory);
  probe_cmd->add_option("--corpus", probe.corpus, "Corpus JSON-lines")->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--vector", probe.vector, "Direction file")->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--trace", probe.traces, "Trace ids to render (default: all)");
  probe_cmd->add_option("--center", probe.center, "Centering vector file (default: mean over sentence tokens)")
      ->check(CLI::ExistingFile);

  JudgeArgs judge;
  auto* judge_cmd = app.add_subcommand("judge", "Label corpus sentences with an external or recorded judge");
  add_common(judge_cmd, judge.common);
  judge_cmd->add_option("--corpus", judge.corpus, "Corpus JSON-lines")->required()->check(CLI::ExistingFile);
  judge_cmd->add_option("--mode", judge.mode, "fixture or live")->check(CLI::IsMember({"fixture", "live"}));
  judge_cmd->add_option("--fixture", judge.fixture, "Recorded labels JSON-lines");
  judge_cmd->add_option("--endpoint", judge.endpoint, "Chat-completions URL");
  judge_cmd->add_option("--model", judge.model, "Judge model name");
  judge_cmd->add_option("--api-key-env", judge.api_key_env, "Environment variable holding the API key");
  judge_cmd->add_option("--taxonomy", judge.taxonomy, "Category labels, comma separated");
  judge_cmd->add_option("--prompt-template", judge.prompt_template, "File with {sentence}, {context}, {taxonomy}");
  judge_cmd->add_option("--batch-size", judge.batch_size, "Sentences per request");
  judge_cmd->add_option("--max-in-flight", judge.max_in_flight, "Concurrent requests");
  judge_cmd->add_option("--judge-name", judge.judge_name, "Judge name written to labels.jsonl");
  add_switch(judge_cmd, "--keyword-labels,!--no-keyword-labels", judge.keyword_labels,
                      "Also write keyword-judge labels");

  ConsistencyArgs cons;
  auto* cons_cmd = app.add_subcommand("consistency", "Precision, recall and F1 of one judge against another");
  add_common(cons_cmd, cons.common);
  cons_cmd->add_option("--labels", cons.labels, "Label records JSON-lines")->required()->check(CLI::ExistingFile);
  cons_cmd->add_option("--pred", cons.pred, "Prediction judge");
  cons_cmd->add_option("--ref", cons.ref, "Reference judge");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*toy_cmd) cmd_toy_init(*toy_cmd, toy);
    if (*ingest_cmd) cmd_ingest(*ingest_cmd, ingest);
    if (*derive_cmd) cmd_derive(*derive_cmd, derive);
    if (*baseline_cmd) cmd_baseline(*baseline_cmd, baseline);
    if (*steer_cmd) cmd_steer(*steer_cmd, steer);
    if (*sweep_cmd) cmd_sweep(*sweep_cmd, sweep);
    if (*lens_cmd) cmd_lens(*lens_cmd, lens);
    if (*probe_cmd) cmd_probe(*probe_cmd, probe);
    if (*judge_cmd) cmd_judge(*judge_cmd, judge);
    if (*cons_cmd) cmd_consistency(*cons_cmd, cons);
  } catch (const steerlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
