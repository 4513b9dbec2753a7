#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "steerlab/error.hpp"
#include "steerlab/steering.hpp"
#include "test_support.hpp"

using namespace steerlab;
using steerlab::testing::make_trace;
using steerlab::testing::TempDir;

namespace {

Matrix rows(std::vector<std::vector<float>> r) {
  Matrix m(r.size(), r.front().size());
  for (std::size_t i = 0; i < r.size(); ++i) std::copy(r[i].begin(), r[i].end(), m.row(i).begin());
  return m;
}

// Straight transcription of the definition: for every trace collect the
// in-range positions of every matching sentence's window into a set, average
// those rows, then average over the traces whose set is non-empty.
std::vector<double> brute_mean_act(const InMemoryActivations& acts, const std::vector<ReasoningTrace>& corpus,
                                   const std::optional<std::string>& category, WindowSpec w, bool exclude_prompt,
                                   int layer) {
  const std::size_t d = acts.d_model();
  std::vector<double> total(d, 0.0);
  int n_traces = 0;
  for (const auto& t : corpus) {
    std::set<long> s;
    for (const auto& sent : t.sentences) {
      if (category && sent.category != *category) continue;
      for (long p = static_cast<long>(sent.start) + w.offset_start; p <= static_cast<long>(sent.start) + w.offset_end;
           ++p) {
        const long lo = exclude_prompt ? static_cast<long>(t.prompt_len) : 0;
        if (p >= lo && p < static_cast<long>(t.size())) s.insert(p);
      }
    }
    if (s.empty()) continue;
    const auto a = acts.read(t.trace_id, layer);
    std::vector<double> mean(d, 0.0);
    for (long p : s) {
      for (std::size_t k = 0; k < d; ++k) mean[k] += a.data(static_cast<std::size_t>(p), k);
    }
    for (std::size_t k = 0; k < d; ++k) total[k] += mean[k] / static_cast<double>(s.size());
    ++n_traces;
  }
  for (double& x : total) x /= n_traces;
  return total;
}

struct RandomCorpus {
  std::vector<ReasoningTrace> traces;
  InMemoryActivations acts{6};
};

RandomCorpus random_corpus(unsigned seed, int n_traces) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const std::vector<std::string> cats{"backtracking", "deduction", "initializing", "other"};
  RandomCorpus rc;
  for (int i = 0; i < n_traces; ++i) {
    const std::size_t prompt = rng() % 5;
    std::size_t pos = prompt;
    std::vector<SentenceSpan> spans;
    const int n_sent = 1 + static_cast<int>(rng() % 6);
    for (int s = 0; s < n_sent; ++s) {
      const std::size_t len = 1 + rng() % 8;
      spans.push_back({pos, pos + len, cats[rng() % cats.size()]});
      pos += len;
    }
    auto t = make_trace("r" + std::to_string(i), pos + rng() % 3, spans, prompt);
    Matrix m(t.size(), 6);
    for (float& x : m.values()) x = normal(rng);
    rc.acts.put({t.trace_id, 0, m});
    rc.traces.push_back(std::move(t));
  }
  return rc;
}

}  // namespace

TEST_CASE("mean of one selected position is that row") {
  InMemoryActivations acts(3);
  acts.put({"a", 0, rows({{9, 9, 9}, {1, 2, 3}, {7, 7, 7}})});
  const std::vector<ReasoningTrace> corpus{make_trace("a", 3, {{1, 3, "backtracking"}})};
  const auto m = mean_act(acts, corpus, SelectionSpec::all({0, 0}), 0);
  CHECK(m == std::vector<float>{1, 2, 3});
}

TEST_CASE("traces are averaged with equal weight") {
  InMemoryActivations acts(2);
  acts.put({"t1", 0, rows({{2, 0}, {2, 0}})});
  acts.put({"t2", 0, rows({{0, 2}})});
  const std::vector<ReasoningTrace> corpus{make_trace("t1", 2, {{0, 2, "x"}}), make_trace("t2", 1, {{0, 1, "x"}})};
  CHECK(mean_act(acts, corpus, SelectionSpec::all({0, 1}), 0) == std::vector<float>{1, 1});
}

TEST_CASE("per-trace mean comes before the mean across traces") {
  InMemoryActivations acts(2);
  acts.put({"t1", 0, rows({{1, 0}, {3, 0}})});
  acts.put({"t2", 0, rows({{0, 2}})});
  const std::vector<ReasoningTrace> corpus{make_trace("t1", 2, {{0, 2, "x"}}), make_trace("t2", 1, {{0, 1, "x"}})};
  const auto m = mean_act(acts, corpus, SelectionSpec::all({0, 1}), 0);
  CHECK(m == std::vector<float>{1, 1});
}

TEST_CASE("mean_act agrees with the brute-force definition") {
  for (unsigned seed = 1; seed <= 12; ++seed) {
    auto rc = random_corpus(seed, 25);
    for (WindowSpec w : {WindowSpec{-5, -1}, WindowSpec{0, 0}, WindowSpec{-2, 3}}) {
      for (bool excl : {false, true}) {
        for (std::optional<std::string> cat : {std::optional<std::string>{}, std::optional<std::string>{"deduction"}}) {
          CAPTURE(seed);
          const SelectionSpec spec{cat, w, excl};
          std::vector<float> got;
          try {
            got = mean_act(rc.acts, rc.traces, spec, 0);
          } catch (const ValidationError&) {
            continue;  // nothing selected
          }
          const auto want = brute_mean_act(rc.acts, rc.traces, cat, w, excl, 0);
          for (std::size_t k = 0; k < want.size(); ++k) CHECK(got[k] == doctest::Approx(want[k]).epsilon(1e-6));
        }
      }
    }
  }
}

TEST_CASE("trace order does not change the mean") {
  auto rc = random_corpus(77, 40);
  const auto ref = mean_act(rc.acts, rc.traces, SelectionSpec::all({-3, 1}), 0);
  std::mt19937 rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    std::shuffle(rc.traces.begin(), rc.traces.end(), rng);
    const auto got = mean_act(rc.acts, rc.traces, SelectionSpec::all({-3, 1}), 0);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::abs(got[k] - ref[k]) < 1e-5);
  }
}

TEST_CASE("empty selections and missing activations are errors") {
  InMemoryActivations acts(2);
  acts.put({"a", 0, Matrix(3, 2)});
  const std::vector<ReasoningTrace> corpus{make_trace("a", 3, {{0, 3, "deduction"}})};
  CHECK_THROWS_AS(mean_act(acts, corpus, SelectionSpec::category("backtracking", {0, 0}), 0), ValidationError);
  CHECK_THROWS_AS(mean_act(acts, corpus, SelectionSpec::all({0, 0}), 1), NotFoundError);
  const std::vector<ReasoningTrace> wrong_len{make_trace("a", 4, {{0, 4, "deduction"}})};
  CHECK_THROWS_AS(mean_act(acts, wrong_len, SelectionSpec::all({0, 0}), 0), ValidationError);
}

TEST_CASE("derive_dom examples") {
  InMemoryActivations acts(2);
  acts.put({"t1", 0, rows({{0, 2}, {2, 0}})});
  const std::vector<ReasoningTrace> corpus{make_trace("t1", 2, {{0, 1, "backtracking"}, {1, 2, "deduction"}})};
  const auto v = derive_dom(acts, corpus, SelectionSpec::category("backtracking", {0, 0}),
                            SelectionSpec::all({0, 0}), 0, "m");
  CHECK(v.values == std::vector<float>{-1, 1});
  CHECK(v.layer == 0);
  CHECK(v.source_model == "m");
  CHECK(v.category == "backtracking");
  CHECK(v.window == WindowSpec{0, 0});
  CHECK(v.derivation == Derivation::dom);
}

TEST_CASE("identical selections give exactly zero; swapping negates exactly") {
  auto rc = random_corpus(3, 30);
  const auto a = SelectionSpec::category("backtracking", {-4, -1});
  const auto b = SelectionSpec::all({-4, -1});
  const auto zero = derive_dom(rc.acts, rc.traces, b, b, 0);
  CHECK(std::all_of(zero.values.begin(), zero.values.end(), [](float x) { return x == 0.0f; }));
  const auto v = derive_dom(rc.acts, rc.traces, a, b, 0);
  const auto w = derive_dom(rc.acts, rc.traces, b, a, 0);
  for (std::size_t k = 0; k < v.values.size(); ++k) CHECK(v.values[k] == -w.values[k]);
}

TEST_CASE("planted offset on backtracking windows is recovered") {
  const std::vector<float> delta{0.5f, -1.25f, 2.0f, 0.0f};
  const std::vector<float> base{1.0f, 2.0f, -3.0f, 0.25f};
  InMemoryActivations acts(4);
  std::vector<ReasoningTrace> corpus;
  for (int i = 0; i < 20; ++i) {
    // backtracking sentence at 10..14 with window -3:-1 => rows 7..9 carry
    // base + delta; everything else is base.
    auto t = make_trace("t" + std::to_string(i), 20, {{0, 10, "deduction"}, {10, 15, "backtracking"}, {15, 20, "other"}});
    Matrix m(20, 4);
    for (std::size_t p = 0; p < 20; ++p) {
      for (std::size_t k = 0; k < 4; ++k) m(p, k) = base[k] + ((p >= 7 && p <= 9) ? delta[k] : 0.0f);
    }
    acts.put({t.trace_id, 0, m});
    corpus.push_back(t);
  }
  // Reference: windows of the other sentences only (same offsets) hold base.
  const auto v = derive_dom(acts, corpus, SelectionSpec::category("backtracking", {-3, -1}),
                            SelectionSpec::category("other", {-3, -1}), 0);
  for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(v.values[k] - delta[k]) < 1e-5);
}

TEST_CASE("cosine similarity") {
  const std::vector<float> v{0.3f, -2.0f, 1.5f};
  CHECK(cosine_similarity(v, v) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(cosine_similarity(std::vector<float>{1, 0}, std::vector<float>{0, 1}) == 0.0);
  CHECK(cosine_similarity(std::vector<float>{1, 1}, std::vector<float>{1, 0}) ==
        doctest::Approx(0.7071).epsilon(1e-4));
  for (float c : {0.01f, 1.0f, 7.0f, 1e3f}) {
    CHECK(std::abs(cosine_similarity(scaled(v, c, false), v) - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(cosine_similarity(std::vector<float>{0, 0}, std::vector<float>{1, 0}), ValidationError);
  CHECK_THROWS_AS(cosine_similarity(std::vector<float>{1}, std::vector<float>{1, 0}), ValidationError);
}

TEST_CASE("scaled") {
  CHECK(scaled(std::vector<float>{3, 4}, 10, true) == std::vector<float>{6, 8});
  CHECK(scaled(std::vector<float>{3, 4}, 0, false) == std::vector<float>{0, 0});
  CHECK(scaled(std::vector<float>{3, 4}, 0, true) == std::vector<float>{0, 0});
  CHECK(l2_norm(scaled(std::vector<float>{0.1f, 5, -2}, 1, true)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(scaled(std::vector<float>{0, 0}, 1, true), ValidationError);
}

TEST_CASE("baselines") {
  SUBCASE("gaussian noise is normalized and reproducible") {
    InMemoryActivations acts(16);
    acts.put({"a", 0, Matrix(2, 16)});
    const std::vector<ReasoningTrace> corpus{make_trace("a", 2, {{0, 2, "x"}})};
    BaselineParams p;
    p.seed = 7;
    p.target_norm = 1.0f;
    const auto v = make_baseline(BaselineKind::gaussian_noise, acts, corpus, 0, p);
    CHECK(std::abs(l2_norm(v.values) - 1.0) < 1e-6);
    CHECK(make_baseline(BaselineKind::gaussian_noise, acts, corpus, 0, p).values == v.values);
    p.seed = 8;
    CHECK(make_baseline(BaselineKind::gaussian_noise, acts, corpus, 0, p).values != v.values);
    p.seed.reset();
    CHECK_THROWS_AS(make_baseline(BaselineKind::gaussian_noise, acts, corpus, 0, p), ValidationError);
  }
  SUBCASE("overall mean of a constant store") {
    InMemoryActivations acts(2);
    acts.put({"a", 0, Matrix(5, 2, 2.0f)});
    const std::vector<ReasoningTrace> corpus{make_trace("a", 5, {{0, 2, "deduction"}, {2, 5, "backtracking"}})};
    BaselineParams p;
    p.window = {-1, 1};
    const auto v = make_baseline(BaselineKind::overall_mean, acts, corpus, 0, p);
    CHECK(v.values == std::vector<float>{2, 2});
    CHECK(v.derivation == Derivation::overall_mean);
  }
  SUBCASE("category dom recovers a planted deduction offset") {
    const std::vector<float> dd{0.75f, -0.5f, 0.125f};
    InMemoryActivations acts(3);
    std::vector<ReasoningTrace> corpus;
    for (int i = 0; i < 8; ++i) {
      auto t = make_trace("t" + std::to_string(i), 12, {{0, 4, "deduction"}, {4, 8, "initializing"}, {8, 12, "other"}});
      Matrix m(12, 3, 1.0f);
      for (std::size_t k = 0; k < 3; ++k) m(0, k) += dd[k];
      acts.put({t.trace_id, 0, m});
      corpus.push_back(t);
    }
    BaselineParams p;
    p.category = "deduction";
    p.window = {0, 0};
    const auto v = make_baseline(BaselineKind::category_dom, acts, corpus, 0, p);
    // Reference is ALL sentences: 1 of 3 selected rows per trace carries dd.
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(v.values[k] - dd[k] * (2.0f / 3.0f)) < 1e-5);
    CHECK(v.derivation == Derivation::category_dom);
    p.category = "banana";
    CHECK_THROWS_AS(make_baseline(BaselineKind::category_dom, acts, corpus, 0, p), NotFoundError);
    p.category.reset();
    CHECK_THROWS_AS(make_baseline(BaselineKind::category_dom, acts, corpus, 0, p), ValidationError);
  }
}

TEST_CASE("intervention specs validate") {
  SteeringVector v;
  v.values = {1, 2, 3};
  CHECK_NOTHROW(InterventionSpec::add_at(v, 1, 2.0f).validate(3, 2));
  CHECK_THROWS_AS(InterventionSpec::add_at(v, 2, 2.0f).validate(3, 2), ValidationError);
  CHECK_THROWS_AS(InterventionSpec::add_at(v, 0, 2.0f).validate(4, 2), ValidationError);
  auto amp = InterventionSpec::self_amplify(0, 1.0f);
  CHECK_NOTHROW(amp.validate(3, 2));
  amp.vector = v;
  CHECK_THROWS_AS(amp.validate(3, 2), ValidationError);
  InterventionSpec missing;
  CHECK_THROWS_AS(missing.validate(3, 2), ValidationError);
}

TEST_CASE("vector files round-trip with their metadata") {
  TempDir dir("vec");
  SteeringVector v;
  v.values = {0.25f, -1.5f, 3.0f, 1e-7f};
  v.layer = 10;
  v.source_model = "org/model";
  v.category = "backtracking";
  v.window = {-13, -8};
  v.derivation = Derivation::category_dom;
  save_vector(dir / "v.stvc", v);
  CHECK(std::filesystem::exists(dir / "v.stvc.json"));
  const auto back = load_vector(dir / "v.stvc");
  CHECK(back.values == v.values);
  CHECK(back.layer == 10);
  CHECK(back.source_model == "org/model");
  CHECK(back.category == "backtracking");
  CHECK(back.window == WindowSpec{-13, -8});
  CHECK(back.derivation == Derivation::category_dom);

  const std::string bytes = steerlab::testing::slurp(dir / "v.stvc");
  CHECK(bytes.substr(0, 4) == "STVC");
  CHECK(bytes.size() == 16 + 4 * 4);
  steerlab::testing::spit(dir / "v.stvc", bytes.substr(0, bytes.size() - 2));
  CHECK_THROWS_AS(load_vector(dir / "v.stvc"), FormatError);
}
