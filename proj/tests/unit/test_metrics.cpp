#include <doctest.h>

#include <random>

#include "steerlab/error.hpp"
#include "steerlab/metrics.hpp"
#include "test_support.hpp"

using namespace steerlab;
using steerlab::testing::TempDir;

namespace {

JudgeLabels labels(std::vector<bool> pred, std::vector<bool> ref) {
  JudgeLabels l;
  for (std::size_t i = 0; i < pred.size(); ++i) l.keys.emplace_back("t", i);
  l.prediction = std::move(pred);
  l.reference = std::move(ref);
  return l;
}

Matrix rows(std::vector<std::vector<float>> r) {
  Matrix m(r.size(), r.front().size());
  for (std::size_t i = 0; i < r.size(); ++i) std::copy(r[i].begin(), r[i].end(), m.row(i).begin());
  return m;
}

}  // namespace

TEST_CASE("backtrack score counts whole words") {
  const auto b = KeywordSet::trace_words();
  CHECK(backtrack_score("Wait that seems wrong but hmm maybe not", b) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(backtrack_score("the answer is seven", b) == 0.0);
  CHECK(backtrack_score("wait wait wait", b) == 1.0);
  CHECK(backtrack_score("Wait, hmm... (wait)!", b) == 1.0);
  CHECK(backtrack_score("awaiting hmmm", b) == 0.0);
  CHECK_THROWS_AS(backtrack_score("  ... !! ", b), ValidationError);
  CHECK_THROWS_AS(backtrack_score("", b), ValidationError);
}

TEST_CASE("backtrack score ignores case") {
  const auto b = KeywordSet::trace_words();
  const std::string text = "So wait, maybe HMM the sum is Wrong. WAIT.";
  CHECK(backtrack_score(text, b) == backtrack_score(to_lower_ascii(text), b));
  CHECK(backtrack_score(text, b) == doctest::Approx(3.0 / 9.0));
}

TEST_CASE("word segmentation") {
  CHECK(segment_words("  Wait, that's \"odd\".\nHmm ") == std::vector<std::string>{"wait", "that's", "odd", "hmm"});
  CHECK(segment_words("-- ...").empty());
}

TEST_CASE("vocabulary masks") {
  const std::vector<std::string> vocab{"Wait", " wait", "the", "But", "butter"};
  const auto mask = build_vocab_mask(vocab, KeywordSet::lens_tokens());
  CHECK(mask.indicator == std::vector<std::uint8_t>{1, 1, 0, 1, 1});
  CHECK(mask.l1 == 4);
  CHECK_THROWS_AS(build_vocab_mask(vocab, KeywordSet::parse("zzz", MatchMode::substring)), ValidationError);
  CHECK(build_vocab_mask(std::vector<std::string>{"WAIT"}, KeywordSet::lens_tokens()).indicator ==
        std::vector<std::uint8_t>{1});

  const auto words = build_vocab_mask(vocab, KeywordSet::parse("wait,but", MatchMode::word_equals));
  CHECK(words.indicator == std::vector<std::uint8_t>{1, 1, 0, 1, 0});
}

TEST_CASE("word-equals masks are subsets of substring masks") {
  std::mt19937 rng(4);
  const std::vector<std::string> pieces{"wait", "Wait", " but", "butter", "hmm", " the", ",", "W", "ait", " "};
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::string> vocab;
    for (int i = 0; i < 30; ++i) vocab.push_back(pieces[rng() % pieces.size()] + pieces[rng() % pieces.size()]);
    vocab.push_back("wait");
    const auto sub = build_vocab_mask(vocab, KeywordSet::parse("wait,but", MatchMode::substring));
    const auto eq = build_vocab_mask(vocab, KeywordSet::parse("wait,but", MatchMode::word_equals));
    for (std::size_t i = 0; i < vocab.size(); ++i) CHECK(eq.indicator[i] <= sub.indicator[i]);
  }
}

TEST_CASE("logit lens score") {
  const Matrix wu = rows({{2, 0}, {0, 2}, {5, 5}, {1, 1}});
  const std::vector<std::string> vocab{"wait", "but", "the", "cat"};
  const auto mask = build_vocab_mask(vocab, KeywordSet::lens_tokens());
  CHECK(logit_lens_score(std::vector<float>{1, 0}, wu, mask) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(logit_lens_score(std::vector<float>{0, 0}, wu, mask) == 0.0);
  CHECK_THROWS_AS(logit_lens_score(std::vector<float>{1, 0, 0}, wu, mask), ValidationError);

  const Matrix wu2 = rows({{1, 0, 0}, {0, 1, 0}, {3, 3, 3}});
  const auto mask2 = build_vocab_mask(std::vector<std::string>{"wait", "but", "x"}, KeywordSet::lens_tokens());
  CHECK(logit_lens_score(std::vector<float>{0, 0, 4}, wu2, mask2) == 0.0);
}

TEST_CASE("logit lens score is linear") {
  std::mt19937 rng(21);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Matrix wu(12, 8);
  for (float& x : wu.values()) x = n(rng);
  std::vector<std::string> vocab(12, "x");
  vocab[2] = " Wait";
  vocab[7] = "but";
  const auto mask = build_vocab_mask(vocab, KeywordSet::lens_tokens());
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<float> v1(8), v2(8), mix(8);
    for (auto& x : v1) x = n(rng);
    for (auto& x : v2) x = n(rng);
    const float a = n(rng), b = n(rng);
    for (int k = 0; k < 8; ++k) mix[k] = a * v1[k] + b * v2[k];
    const double want = a * logit_lens_score(v1, wu, mask) + b * logit_lens_score(v2, wu, mask);
    CHECK(std::abs(logit_lens_score(mix, wu, mask) - want) < 1e-5);
  }
}

TEST_CASE("keyword judge") {
  CHECK(keyword_judge("Wait, that's wrong"));
  CHECK_FALSE(keyword_judge("The answer is 7"));
  CHECK(keyword_judge("Awaiting results"));
}

TEST_CASE("judge consistency") {
  SUBCASE("perfect agreement") {
    const auto r = judge_consistency(labels({1, 0, 1, 1, 0}, {1, 0, 1, 1, 0}));
    CHECK(*r.precision == 1.0);
    CHECK(*r.recall == 1.0);
    CHECK(*r.f1 == 1.0);
  }
  SUBCASE("hand-counted example") {
    const auto r = judge_consistency(labels({1, 1, 0, 0}, {1, 0, 1, 0}));
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
    CHECK(r.fn == 1);
    CHECK(r.tn == 1);
    CHECK(*r.precision == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(*r.recall == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(*r.f1 == doctest::Approx(0.5).epsilon(1e-9));
  }
  SUBCASE("undefined metrics are flagged") {
    const auto no_pred = judge_consistency(labels({0, 0}, {1, 0}));
    CHECK_FALSE(no_pred.precision.has_value());
    CHECK(*no_pred.recall == 0.0);
    const auto no_ref = judge_consistency(labels({1, 0}, {0, 0}));
    CHECK_FALSE(no_ref.recall.has_value());
    CHECK_FALSE(no_ref.f1.has_value());
  }
  SUBCASE("self agreement with any positive is f1 = 1") {
    std::mt19937 rng(8);
    for (int rep = 0; rep < 30; ++rep) {
      std::vector<bool> x(1 + rng() % 20);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng() % 2;
      x[rng() % x.size()] = true;
      CHECK(*judge_consistency(labels(x, x)).f1 == 1.0);
    }
  }
}

TEST_CASE("label records align by key") {
  TempDir dir("labels");
  steerlab::testing::spit(dir / "l.jsonl",
                          "{\"trace_id\":\"a\",\"sentence_index\":0,\"judge\":\"keyword\",\"label\":true}\n"
                          "{\"trace_id\":\"a\",\"sentence_index\":1,\"judge\":\"llm\",\"label\":0}\n"
                          "{\"trace_id\":\"a\",\"sentence_index\":0,\"judge\":\"llm\",\"label\":1}\n"
                          "{\"trace_id\":\"a\",\"sentence_index\":1,\"judge\":\"keyword\",\"label\":false}\n");
  const auto records = load_label_records(dir / "l.jsonl");
  REQUIRE(records.size() == 4);
  const auto l = JudgeLabels::align(records, "keyword", "llm");
  CHECK(l.prediction == std::vector<bool>{true, false});
  CHECK(l.reference == std::vector<bool>{true, false});

  auto dup = records;
  dup.push_back(records[0]);
  CHECK_THROWS_AS(JudgeLabels::align(dup, "keyword", "llm"), ValidationError);
  auto missing = records;
  missing.pop_back();
  CHECK_THROWS_AS(JudgeLabels::align(missing, "keyword", "llm"), ValidationError);
  CHECK_THROWS_AS(JudgeLabels::align(records, "keyword", "nobody"), ValidationError);

  write_label_records(dir / "out.jsonl", records);
  CHECK(load_label_records(dir / "out.jsonl").size() == 4);
}
