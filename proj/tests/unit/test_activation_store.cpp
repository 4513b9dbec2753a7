#include <doctest.h>

#include <cstring>
#include <random>
#include <set>

#include "steerlab/activation_store.hpp"
#include "steerlab/error.hpp"
#include "test_support.hpp"

using namespace steerlab;
using steerlab::testing::TempDir;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Matrix m(rows, cols);
  for (float& x : m.values()) x = n(rng);
  return m;
}

StoreManifest manifest(std::vector<std::string> traces, std::vector<int> layers, std::size_t d, int n_layers = 4) {
  StoreManifest m;
  m.model_id = "test-model";
  m.n_layers = n_layers;
  m.d_model = d;
  m.trace_ids = std::move(traces);
  m.layer_ids = std::move(layers);
  return m;
}

void append_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_f32(std::string& s, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  append_u32(s, bits);
}

}  // namespace

TEST_CASE("one trace, one layer of zeros round-trips") {
  TempDir dir("store");
  const auto m = manifest({"a"}, {0}, 3);
  write_store(m, std::vector<ActivationMatrix>{{"a", 0, Matrix(2, 3)}}, dir / "s");

  CHECK(std::filesystem::exists(dir / "s/manifest.json"));
  CHECK(std::filesystem::exists(dir / "s/a.layer0.actv"));
  const auto store = ActivationStore::open(dir / "s");
  const auto back = store.read("a", 0);
  CHECK(back.data == Matrix(2, 3));
  CHECK(store.manifest().tap_point == "block_output");
}

TEST_CASE("seeded random matrices read back bitwise") {
  TempDir dir("store");
  std::mt19937 rng(11);
  std::vector<ActivationMatrix> ms;
  for (const char* t : {"t0", "t1"}) {
    for (int l : {1, 3}) ms.push_back({t, l, random_matrix(5 + static_cast<std::size_t>(l), 7, rng)});
  }
  write_store(manifest({"t0", "t1"}, {1, 3}, 7), ms, dir / "s");
  const auto store = ActivationStore::open(dir / "s");
  for (const auto& m : ms) {
    const auto back = store.read(m.trace_id, m.layer);
    REQUIRE(back.data.size() == m.data.size());
    CHECK(std::memcmp(back.data.values().data(), m.data.values().data(), m.data.size() * 4) == 0);
    CHECK(store.read(m.trace_id, m.layer).data == back.data);
  }
  store.validate_all();
}

TEST_CASE("writer rejects contract violations") {
  TempDir dir("store");
  SUBCASE("shape mismatch") {
    StoreWriter w(dir / "s", manifest({"a"}, {0}, 3));
    CHECK_THROWS_AS(w.add({"a", 0, Matrix(2, 4)}), ValidationError);
  }
  SUBCASE("duplicate pair") {
    StoreWriter w(dir / "s", manifest({"a"}, {0}, 3));
    w.add({"a", 0, Matrix(2, 3)});
    CHECK_THROWS_AS(w.add({"a", 0, Matrix(2, 3)}), ValidationError);
  }
  SUBCASE("unknown trace or layer") {
    StoreWriter w(dir / "s", manifest({"a"}, {0}, 3));
    CHECK_THROWS_AS(w.add({"b", 0, Matrix(2, 3)}), ValidationError);
    CHECK_THROWS_AS(w.add({"a", 1, Matrix(2, 3)}), ValidationError);
  }
  SUBCASE("non-finite values") {
    StoreWriter w(dir / "s", manifest({"a"}, {0}, 3));
    Matrix m(1, 3);
    m(0, 1) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(w.add({"a", 0, m}), ValidationError);
  }
  SUBCASE("incomplete store") {
    StoreWriter w(dir / "s", manifest({"a", "b"}, {0}, 3));
    w.add({"a", 0, Matrix(2, 3)});
    CHECK_THROWS_AS(w.finish(), ValidationError);
    CHECK_FALSE(std::filesystem::exists(dir / "s/manifest.json"));
  }
  SUBCASE("existing store is never overwritten") {
    write_store(manifest({"a"}, {0}, 3), std::vector<ActivationMatrix>{{"a", 0, Matrix(1, 3)}}, dir / "s");
    CHECK_THROWS(StoreWriter(dir / "s", manifest({"a"}, {0}, 3)));
  }
}

TEST_CASE("manifest invariants") {
  CHECK_THROWS_AS(manifest({"a"}, {4}, 3, 4).validate(), ValidationError);
  CHECK_THROWS_AS(manifest({"a"}, {0}, 0).validate(), ValidationError);
  CHECK_THROWS_AS(manifest({"a", "a"}, {0}, 3).validate(), ValidationError);
  auto m = manifest({"a"}, {0}, 3);
  m.dtype = "f16";
  CHECK_THROWS_AS(m.validate(), ValidationError);
  const auto ok = manifest({"a", "b"}, {0, 2}, 3);
  CHECK(manifest_from_json(manifest_to_json(ok)).trace_ids == ok.trace_ids);
  CHECK(manifest_from_json(manifest_to_json(ok)).layer_ids == ok.layer_ids);
}

TEST_CASE("reads of absent entries are not-found errors") {
  TempDir dir("store");
  write_store(manifest({"a"}, {0}, 3), std::vector<ActivationMatrix>{{"a", 0, Matrix(2, 3)}}, dir / "s");
  const auto store = ActivationStore::open(dir / "s");
  CHECK_THROWS_AS(store.read("zzz", 0), NotFoundError);
  CHECK_THROWS_AS(store.read("a", 2), NotFoundError);
}

TEST_CASE("opening a store with a missing tensor file fails") {
  TempDir dir("store");
  write_store(manifest({"a", "b"}, {0}, 3),
              std::vector<ActivationMatrix>{{"a", 0, Matrix(2, 3)}, {"b", 0, Matrix(2, 3)}}, dir / "s");
  std::filesystem::remove(dir / "s/b.layer0.actv");
  CHECK_THROWS_AS(ActivationStore::open(dir / "s"), FormatError);
}

TEST_CASE("truncated tensor file is reported with its name") {
  TempDir dir("store");
  std::mt19937 rng(3);
  write_store(manifest({"a"}, {0}, 4), std::vector<ActivationMatrix>{{"a", 0, random_matrix(3, 4, rng)}},
              dir / "s");
  const auto file = dir / "s/a.layer0.actv";
  const std::string bytes = steerlab::testing::slurp(file);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{23}, std::size_t{24}, bytes.size() - 1}) {
    CAPTURE(cut);
    steerlab::testing::spit(file, bytes.substr(0, cut));
    const auto store = ActivationStore::open(dir / "s");
    try {
      store.read("a", 0);
      FAIL("truncation not detected");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("a.layer0.actv") != std::string::npos);
    }
  }
}

TEST_CASE("every single-byte header corruption is detected") {
  TempDir dir("store");
  std::mt19937 rng(5);
  write_store(manifest({"a"}, {0}, 4), std::vector<ActivationMatrix>{{"a", 0, random_matrix(3, 4, rng)}},
              dir / "s");
  const auto file = dir / "s/a.layer0.actv";
  const std::string bytes = steerlab::testing::slurp(file);
  const auto store = ActivationStore::open(dir / "s");
  for (std::size_t i = 0; i < kTensorHeaderBytes; ++i) {
    for (int flip : {0x01, 0x80, 0xff}) {
      CAPTURE(i);
      CAPTURE(flip);
      std::string bad = bytes;
      bad[i] = static_cast<char>(bad[i] ^ flip);
      steerlab::testing::spit(file, bad);
      CHECK_THROWS_AS(store.read("a", 0), FormatError);
    }
  }
}

TEST_CASE("non-finite payload is a format error") {
  TempDir dir("store");
  write_store(manifest({"a"}, {0}, 2), std::vector<ActivationMatrix>{{"a", 0, Matrix(1, 2)}}, dir / "s");
  std::string bytes = steerlab::testing::slurp(dir / "s/a.layer0.actv");
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(bytes.data() + kTensorHeaderBytes, &inf, 4);
  steerlab::testing::spit(dir / "s/a.layer0.actv", bytes);
  CHECK_THROWS_AS(ActivationStore::open(dir / "s").read("a", 0), FormatError);
}

// Bytes assembled by hand, independent of the writer, as an external
// producer would emit them.
TEST_CASE("hand-assembled store from an external producer is accepted") {
  TempDir dir("store");
  const auto s = dir / "s";
  std::filesystem::create_directories(s);
  std::string t;
  t += "ACTV";
  append_u32(t, 1);
  append_u64(t, 2);
  append_u64(t, 3);
  for (float f : {1.0f, -2.0f, 0.5f, 3.25f, 0.0f, -1e-3f}) append_f32(t, f);
  steerlab::testing::spit(s / "trace-7.layer10.actv", t);
  steerlab::testing::spit(s / "manifest.json",
                          R"({"model_id": "external/ckpt", "n_layers": 12, "d_model": 3, "dtype": "f32",
                              "trace_ids": ["trace-7"], "layer_ids": [10], "tap_point": "block_output"})");

  const auto store = ActivationStore::open(s);
  store.validate_all();
  const auto m = store.read("trace-7", 10);
  CHECK(m.n_positions() == 2);
  CHECK(m.d_model() == 3);
  CHECK(m.data(0, 1) == -2.0f);
  CHECK(m.data(1, 0) == 3.25f);
  CHECK(m.data(1, 2) == -1e-3f);

  // And the writer produces exactly these bytes.
  TempDir other("store");
  write_store(store.manifest(), std::vector<ActivationMatrix>{m}, other / "s");
  CHECK(steerlab::testing::slurp(other / "s/trace-7.layer10.actv") == t);
}

TEST_CASE("reading one entry touches only its own file") {
  TempDir dir("store");
  std::vector<ActivationMatrix> ms;
  for (const char* t : {"a", "b", "c"}) {
    for (int l : {0, 1}) ms.push_back({t, l, Matrix(2, 3, 1.0f)});
  }
  write_store(manifest({"a", "b", "c"}, {0, 1}, 3), ms, dir / "s");

  std::vector<std::filesystem::path> opened;
  StoreOpenOptions options;
  options.on_file_open = [&](const std::filesystem::path& p) { opened.push_back(p); };
  const auto store = ActivationStore::open(dir / "s", options);
  opened.clear();
  store.read("b", 1);
  REQUIRE(opened.size() == 1);
  CHECK(opened[0].filename() == "b.layer1.actv");
}

TEST_CASE("in-memory activations mirror the store interface") {
  InMemoryActivations mem(2);
  mem.put({"a", 0, Matrix(1, 2, 3.0f)});
  CHECK(mem.read("a", 0).data(0, 1) == 3.0f);
  CHECK_THROWS_AS(mem.read("a", 1), NotFoundError);
  CHECK_THROWS_AS(mem.put({"b", 0, Matrix(1, 3)}), ValidationError);
}
