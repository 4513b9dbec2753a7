#include "steerlab/activation_store.hpp"

#include <algorithm>
#include <cstring>

#include <json.hpp>

#include "binary_io.hpp"
#include "steerlab/error.hpp"

namespace steerlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

bool is_safe_trace_id(std::string_view id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::none_of(id.begin(), id.end(), [](char c) { return c == '/' || c == '\\' || c == '\0'; });
}

}  // namespace

void StoreManifest::validate() const {
  if (n_layers <= 0) throw ValidationError("manifest: n_layers must be positive");
  if (d_model == 0) throw ValidationError("manifest: d_model must be positive");
  if (dtype != "f32") throw ValidationError("manifest: unsupported dtype '" + dtype + "' (only f32)");
  std::set<std::string_view> seen_traces;
  for (const auto& id : trace_ids) {
    if (!is_safe_trace_id(id)) throw ValidationError("manifest: trace id '" + id + "' is not file-name safe");
    if (!seen_traces.insert(id).second) throw ValidationError("manifest: duplicate trace id '" + id + "'");
  }
  std::set<int> seen_layers;
  for (int l : layer_ids) {
    if (l < 0 || l >= n_layers) {
      throw ValidationError("manifest: layer " + std::to_string(l) + " outside [0, " +
                            std::to_string(n_layers) + ")");
    }
    if (!seen_layers.insert(l).second) throw ValidationError("manifest: duplicate layer " + std::to_string(l));
  }
}

bool StoreManifest::has_trace(std::string_view trace_id) const {
  return std::find(trace_ids.begin(), trace_ids.end(), trace_id) != trace_ids.end();
}

bool StoreManifest::has_layer(int layer) const {
  return std::find(layer_ids.begin(), layer_ids.end(), layer) != layer_ids.end();
}

std::string tensor_file_name(std::string_view trace_id, int layer) {
  return std::string(trace_id) + ".layer" + std::to_string(layer) + ".actv";
}

void write_tensor_file(const fs::path& path, const Matrix& m) {
  std::vector<char> bytes;
  bytes.reserve(kTensorHeaderBytes + m.size() * sizeof(float));
  bytes.insert(bytes.end(), kTensorMagic, kTensorMagic + 4);
  detail::put<std::uint32_t>(bytes, kTensorVersion);
  detail::put<std::uint64_t>(bytes, m.rows());
  detail::put<std::uint64_t>(bytes, m.cols());
  detail::put_f32_payload(bytes, m.values());
  detail::write_file(path, bytes);
}

Matrix read_tensor_file(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string where = "'" + path.string() + "'";
  if (bytes.size() < kTensorHeaderBytes) {
    throw FormatError("corrupted tensor file " + where + ": truncated header (" +
                      std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw FormatError("corrupted tensor file " + where + ": bad magic");
  }
  const auto version = detail::get<std::uint32_t>(bytes, 4);
  if (version != kTensorVersion) {
    throw FormatError("corrupted tensor file " + where + ": unsupported version " + std::to_string(version));
  }
  const auto rows = detail::get<std::uint64_t>(bytes, 8);
  const auto cols = detail::get<std::uint64_t>(bytes, 16);
  std::uint64_t payload = 0;
  if (cols == 0 || !detail::checked_product(rows, cols, sizeof(float), payload) ||
      payload != bytes.size() - kTensorHeaderBytes) {
    throw FormatError("corrupted tensor file " + where + ": header declares " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " but payload is " +
                      std::to_string(bytes.size() - kTensorHeaderBytes) + " bytes");
  }
  auto values = detail::get_f32_payload(bytes, kTensorHeaderBytes, rows * cols);
  if (!all_finite(values)) throw FormatError("corrupted tensor file " + where + ": non-finite values");
  return Matrix(rows, cols, std::move(values));
}

std::string manifest_to_json(const StoreManifest& m) {
  json j;
  j["model_id"] = m.model_id;
  j["n_layers"] = m.n_layers;
  j["d_model"] = m.d_model;
  j["dtype"] = m.dtype;
  j["trace_ids"] = m.trace_ids;
  j["layer_ids"] = m.layer_ids;
  j["tap_point"] = m.tap_point;
  return j.dump(2) + "\n";
}

StoreManifest manifest_from_json(std::string_view text) {
  StoreManifest m;
  try {
    const json j = json::parse(text);
    m.model_id = j.at("model_id").get<std::string>();
    m.n_layers = j.at("n_layers").get<int>();
    m.d_model = j.at("d_model").get<std::size_t>();
    m.dtype = j.at("dtype").get<std::string>();
    m.trace_ids = j.at("trace_ids").get<std::vector<std::string>>();
    m.layer_ids = j.at("layer_ids").get<std::vector<int>>();
    m.tap_point = j.value("tap_point", std::string("block_output"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

ActivationStore ActivationStore::open(const fs::path& dir, StoreOpenOptions options) {
  const fs::path manifest_path = dir / kManifestFileName;
  if (!fs::exists(manifest_path)) {
    throw NotFoundError("no " + std::string(kManifestFileName) + " in '" + dir.string() + "'");
  }
  if (options.on_file_open) options.on_file_open(manifest_path);
  StoreManifest manifest = manifest_from_json(detail::read_text_file(manifest_path));
  for (const auto& t : manifest.trace_ids) {
    for (int l : manifest.layer_ids) {
      if (!fs::exists(dir / tensor_file_name(t, l))) {
        throw FormatError("store '" + dir.string() + "' is missing " + tensor_file_name(t, l));
      }
    }
  }
  return ActivationStore(dir, std::move(manifest), std::move(options));
}

ActivationMatrix ActivationStore::read(std::string_view trace_id, int layer) const {
  if (!manifest_.has_trace(trace_id)) {
    throw NotFoundError("trace '" + std::string(trace_id) + "' not in store '" + dir_.string() + "'");
  }
  if (!manifest_.has_layer(layer)) {
    throw NotFoundError("layer " + std::to_string(layer) + " not captured in store '" + dir_.string() + "'");
  }
  const fs::path file = dir_ / tensor_file_name(trace_id, layer);
  if (options_.on_file_open) options_.on_file_open(file);
  Matrix data = read_tensor_file(file);
  if (data.cols() != manifest_.d_model) {
    throw FormatError("corrupted tensor file '" + file.string() + "': d_model " + std::to_string(data.cols()) +
                      " differs from manifest " + std::to_string(manifest_.d_model));
  }
  return ActivationMatrix{std::string(trace_id), layer, std::move(data)};
}

void ActivationStore::validate_all() const {
  for (const auto& t : manifest_.trace_ids) {
    for (int l : manifest_.layer_ids) read(t, l);
  }
}

StoreWriter::StoreWriter(fs::path dir, StoreManifest manifest) : dir_(std::move(dir)), manifest_(std::move(manifest)) {
  manifest_.validate();
  if (fs::exists(dir_ / kManifestFileName)) {
    throw ValidationError("store '" + dir_.string() + "' already exists; stores are immutable");
  }
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create '" + dir_.string() + "': " + ec.message());
}

void StoreWriter::add(const ActivationMatrix& m) {
  if (finished_) throw ValidationError("store writer already finished");
  if (!manifest_.has_trace(m.trace_id)) {
    throw ValidationError("trace '" + m.trace_id + "' is not listed in the manifest");
  }
  if (!manifest_.has_layer(m.layer)) {
    throw ValidationError("layer " + std::to_string(m.layer) + " is not listed in the manifest");
  }
  if (m.d_model() != manifest_.d_model) {
    throw ValidationError("shape mismatch: matrix for '" + m.trace_id + "' layer " + std::to_string(m.layer) +
                          " has d_model " + std::to_string(m.d_model()) + ", manifest says " +
                          std::to_string(manifest_.d_model));
  }
  if (!all_finite(m.data.values())) {
    throw ValidationError("matrix for '" + m.trace_id + "' layer " + std::to_string(m.layer) +
                          " contains non-finite values");
  }
  if (!written_.emplace(m.trace_id, m.layer).second) {
    throw ValidationError("duplicate (trace, layer) pair ('" + m.trace_id + "', " + std::to_string(m.layer) + ")");
  }
  write_tensor_file(dir_ / tensor_file_name(m.trace_id, m.layer), m.data);
}

void StoreWriter::finish() {
  if (finished_) throw ValidationError("store writer already finished");
  const std::size_t expected = manifest_.trace_ids.size() * manifest_.layer_ids.size();
  if (written_.size() != expected) {
    throw ValidationError("store incomplete: " + std::to_string(written_.size()) + " of " +
                          std::to_string(expected) + " (trace, layer) matrices written");
  }
  detail::write_text_file(dir_ / kManifestFileName, manifest_to_json(manifest_));
  finished_ = true;
}

void write_store(const StoreManifest& manifest, std::span<const ActivationMatrix> matrices, const fs::path& dir) {
  StoreWriter writer(dir, manifest);
  for (const auto& m : matrices) writer.add(m);
  writer.finish();
}

void InMemoryActivations::put(ActivationMatrix m) {
  if (m.d_model() != d_model_) {
    throw ValidationError("shape mismatch: d_model " + std::to_string(m.d_model()) + " vs " +
                          std::to_string(d_model_));
  }
  data_[{m.trace_id, m.layer}] = std::move(m.data);
}

ActivationMatrix InMemoryActivations::read(std::string_view trace_id, int layer) const {
  auto it = data_.find({std::string(trace_id), layer});
  if (it == data_.end()) {
    throw NotFoundError("no activations for trace '" + std::string(trace_id) + "' layer " + std::to_string(layer));
  }
  return ActivationMatrix{std::string(trace_id), layer, it->second};
}

}  // namespace steerlab
