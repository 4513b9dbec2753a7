#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <json.hpp>

#include "steerlab/metrics.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/trace_corpus.hpp"
#include "test_support.hpp"

using steerlab::testing::slurp;
using steerlab::testing::spit;
using steerlab::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int exit_code = -1;
  std::string out;
};

// Runs the CLI inside `cwd`, capturing stdout and stderr together.
Run cli(const fs::path& cwd, const std::string& args) {
  const auto log = cwd / "cli.log";
  const std::string cmd =
      "cd '" + cwd.string() + "' && '" STEERLAB_CLI_PATH "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  return r;
}

// One planted lab per test binary.
const fs::path& lab_dir() {
  static TempDir dir("cli-lab");
  static const bool built = [] {
    const auto r = cli(dir.path(), "toy-init --out-dir lab --traces 60");
    REQUIRE(r.exit_code == 0);
    return true;
  }();
  (void)built;
  static const fs::path lab = dir / "lab";
  return lab;
}

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("help and usage errors") {
  TempDir dir("cli");
  auto r = cli(dir.path(), "--help");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("derive") != std::string::npos);
  r = cli(dir.path(), "derive --help");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("[-13:-8]") != std::string::npos);
  CHECK(r.out.find("[ALL]") != std::string::npos);
  CHECK(cli(dir.path(), "").exit_code == 1);
  CHECK(cli(dir.path(), "no-such-command").exit_code == 1);
  CHECK(cli(dir.path(), "derive --store missing --corpus missing.jsonl").exit_code == 1);
}

TEST_CASE("derive writes a vector and a run record") {
  const auto lab = lab_dir();
  TempDir dir("cli");
  const auto r = cli(dir.path(), "derive --store '" + (lab / "store").string() + "' --corpus '" +
                                     (lab / "corpus.jsonl").string() + "' --layer 1 --offset -6:-2 --out-dir d");
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(dir / "d/vector.stvc"));
  CHECK(fs::exists(dir / "d/vector.stvc.json"));
  const auto v = steerlab::load_vector(dir / "d/vector.stvc");
  CHECK(v.layer == 1);
  CHECK(v.category == "backtracking");
  CHECK(v.window.offset_start == -6);

  const auto run = nlohmann::json::parse(slurp(dir / "d/run.json"));
  CHECK(run["command"] == "derive");
  CHECK(run["options"]["offset"] == "-6:-2");
  CHECK(run["options"]["reference"] == "ALL");
  CHECK(run["options"]["exclude-prompt"] == false);

  // Bad inputs are user errors.
  const auto bad = cli(dir.path(), "derive --store '" + (lab / "store").string() + "' --corpus '" +
                                       (lab / "corpus.jsonl").string() + "' --layer 7 --out-dir e");
  CHECK(bad.exit_code == 1);
  CHECK(bad.out.find("error") != std::string::npos);
}

TEST_CASE("lens prints one line per vector") {
  const auto lab = lab_dir();
  TempDir dir("cli");
  const auto r = cli(dir.path(), "lens --model '" + (lab / "model").string() + "' --vector '" +
                                     (lab / "direction.stvc").string() + "' --out-dir l");
  REQUIRE(r.exit_code == 0);
  CHECK(lines(r.out) == 1);
  CHECK(r.out.find("s(v) = ") != std::string::npos);
  CHECK(lines(slurp(dir / "l/lens.csv")) == 2);
}

TEST_CASE("consistency on a hand-counted label file") {
  TempDir dir("cli");
  std::string labels;
  // keyword vs llm: tp 2, fp 1, fn 1, tn 1
  const bool kw[] = {true, true, true, false, false};
  const bool llm[] = {true, true, false, true, false};
  for (int i = 0; i < 5; ++i) {
    labels += nlohmann::json{{"trace_id", "t"}, {"sentence_index", i}, {"judge", "keyword"}, {"label", kw[i]}}.dump() + "\n";
    labels += nlohmann::json{{"trace_id", "t"}, {"sentence_index", i}, {"judge", "llm"}, {"label", llm[i]}}.dump() + "\n";
  }
  spit(dir / "labels.jsonl", labels);
  const auto r = cli(dir.path(), "consistency --labels labels.jsonl --out-dir c");
  REQUIRE(r.exit_code == 0);
  const auto j = nlohmann::json::parse(slurp(dir / "c/consistency.json"));
  CHECK(j["tp"] == 2);
  CHECK(j["fp"] == 1);
  CHECK(j["fn"] == 1);
  CHECK(j["tn"] == 1);
  CHECK(j["precision"].get<double>() == doctest::Approx(2.0 / 3.0));
  CHECK(j["f1"].get<double>() == doctest::Approx(2.0 / 3.0));

  spit(dir / "none.jsonl", "{\"trace_id\":\"t\",\"sentence_index\":0,\"judge\":\"keyword\",\"label\":false}\n"
                           "{\"trace_id\":\"t\",\"sentence_index\":0,\"judge\":\"llm\",\"label\":false}\n");
  const auto u = cli(dir.path(), "consistency --labels none.jsonl --out-dir n");
  REQUIRE(u.exit_code == 0);
  CHECK(u.out.find("undefined") != std::string::npos);
  CHECK(nlohmann::json::parse(slurp(dir / "n/consistency.json"))["precision"].is_null());
}

TEST_CASE("judge in fixture mode writes labels for both judges") {
  const auto lab = lab_dir();
  TempDir dir("cli");
  std::string fixture;
  for (const auto& t : steerlab::load_corpus(lab / "corpus.jsonl")) {
    for (std::size_t i = 0; i < t.sentences.size(); ++i) {
      fixture += nlohmann::json{{"trace_id", t.trace_id}, {"sentence_index", i}, {"category", t.sentences[i].category}}
                     .dump() +
                 "\n";
    }
  }
  spit(dir / "fx.jsonl", fixture);
  const auto r =
      cli(dir.path(), "judge --corpus '" + (lab / "corpus.jsonl").string() + "' --fixture fx.jsonl --out-dir j");
  REQUIRE(r.exit_code == 0);
  CHECK(steerlab::load_corpus(dir / "j/corpus.jsonl") == steerlab::load_corpus(lab / "corpus.jsonl"));
  const auto labels = steerlab::load_label_records(dir / "j/labels.jsonl");
  CHECK_NOTHROW(steerlab::JudgeLabels::align(labels, "keyword", "llm"));
  const auto c = cli(dir.path(), "consistency --labels j/labels.jsonl --out-dir c");
  CHECK(c.exit_code == 0);
}

TEST_CASE("sweep and probe run end to end, and repeat byte for byte") {
  const auto lab = lab_dir();
  TempDir dir("cli");
  const std::string sweep = "sweep --model '" + (lab / "model").string() + "' --store planted='" +
                            (lab / "store").string() + "' --corpus '" + (lab / "corpus.jsonl").string() +
                            "' --prompts '" + (lab / "prompts.jsonl").string() +
                            "' --layers 0 --offsets -6:-2 --strengths 0 8 --replicates 2 --max-new 8 --seed 3";
  REQUIRE(cli(dir.path(), sweep + " --out-dir a --threads 1").exit_code == 0);
  REQUIRE(cli(dir.path(), sweep + " --out-dir b --threads 3").exit_code == 0);
  const auto csv = slurp(dir / "a/results.csv");
  CHECK(lines(csv) == 3);
  CHECK(csv == slurp(dir / "b/results.csv"));

  const std::string probe = "probe --store '" + (lab / "store").string() + "' --corpus '" +
                            (lab / "corpus.jsonl").string() + "' --vector '" + (lab / "direction.stvc").string() +
                            "' --trace t000";
  const auto p = cli(dir.path(), probe + " --out-dir p1");
  REQUIRE(p.exit_code == 0);
  REQUIRE(cli(dir.path(), probe + " --out-dir p2").exit_code == 0);
  CHECK(slurp(dir / "p1/t000.html") == slurp(dir / "p2/t000.html"));
  CHECK(slurp(dir / "p1/t000.csv") == slurp(dir / "p2/t000.csv"));
}
