#pragma once

// On-disk corpus of residual-stream activations.
//
// A store is a directory holding `manifest.json` plus one tensor file per
// (trace, layer), named `<trace_id>.layer<layer>.actv`. Tensor file layout,
// all integers little-endian:
//
//   offset  size  field
//   0       4     magic "ACTV"
//   4       4     u32 version (= 1)
//   8       8     u64 n_positions
//   16      8     u64 d_model
//   24      4*n*d f32 payload, row-major (position-major)
//
// The manifest is written last, so a directory without one is an incomplete
// store and cannot be opened. Once written a store is never modified.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steerlab/tensor.hpp"

namespace steerlab {

inline constexpr char kTensorMagic[4] = {'A', 'C', 'T', 'V'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::size_t kTensorHeaderBytes = 24;
inline constexpr const char* kManifestFileName = "manifest.json";

struct StoreManifest {
  std::string model_id;
  int n_layers = 0;
  std::size_t d_model = 0;
  std::string dtype = "f32";
  std::vector<std::string> trace_ids;
  std::vector<int> layer_ids;
  // Where in the block the activations were read. Recorded so that exported
  // stores and the toy model agree on what "layer l" means.
  std::string tap_point = "block_output";

  // Throws ValidationError when any manifest invariant fails.
  void validate() const;
  bool has_trace(std::string_view trace_id) const;
  bool has_layer(int layer) const;
};

struct ActivationMatrix {
  std::string trace_id;
  int layer = 0;
  Matrix data;  // n_positions x d_model

  std::size_t n_positions() const { return data.rows(); }
  std::size_t d_model() const { return data.cols(); }
};

// Raw tensor-file access. Also used for model weights.
void write_tensor_file(const std::filesystem::path& path, const Matrix& m);
Matrix read_tensor_file(const std::filesystem::path& path);

std::string tensor_file_name(std::string_view trace_id, int layer);

// Anything downstream modules can pull (trace, layer) activations from.
class ActivationSource {
 public:
  virtual ~ActivationSource() = default;
  virtual std::size_t d_model() const = 0;
  virtual ActivationMatrix read(std::string_view trace_id, int layer) const = 0;
};

struct StoreOpenOptions {
  // Called with every file path the store opens for reading.
  std::function<void(const std::filesystem::path&)> on_file_open;
};

class ActivationStore : public ActivationSource {
 public:
  static ActivationStore open(const std::filesystem::path& dir, StoreOpenOptions options = {});

  const StoreManifest& manifest() const { return manifest_; }
  const std::filesystem::path& path() const { return dir_; }
  std::size_t d_model() const override { return manifest_.d_model; }

  // Thread-safe. Throws NotFoundError for unknown trace/layer and FormatError
  // (naming the file) for corrupted tensor files.
  ActivationMatrix read(std::string_view trace_id, int layer) const override;

  // Reads every tensor file once and checks it against the manifest.
  void validate_all() const;

 private:
  ActivationStore(std::filesystem::path dir, StoreManifest manifest, StoreOpenOptions options)
      : dir_(std::move(dir)), manifest_(std::move(manifest)), options_(std::move(options)) {}

  std::filesystem::path dir_;
  StoreManifest manifest_;
  StoreOpenOptions options_;
};

// Single-writer builder for a new store directory.
class StoreWriter {
 public:
  StoreWriter(std::filesystem::path dir, StoreManifest manifest);

  // Rejects duplicates, unknown traces or layers, shape mismatches and
  // non-finite values.
  void add(const ActivationMatrix& m);

  // Checks completeness and writes the manifest. Nothing may be added after.
  void finish();

 private:
  std::filesystem::path dir_;
  StoreManifest manifest_;
  std::set<std::pair<std::string, int>> written_;
  bool finished_ = false;
};

void write_store(const StoreManifest& manifest, std::span<const ActivationMatrix> matrices,
                 const std::filesystem::path& dir);

// Activations held in memory, keyed by (trace, layer).
class InMemoryActivations : public ActivationSource {
 public:
  explicit InMemoryActivations(std::size_t d_model) : d_model_(d_model) {}

  void put(ActivationMatrix m);
  std::size_t d_model() const override { return d_model_; }
  ActivationMatrix read(std::string_view trace_id, int layer) const override;

 private:
  std::size_t d_model_;
  std::map<std::pair<std::string, int>, Matrix> data_;
};

std::string manifest_to_json(const StoreManifest& manifest);
StoreManifest manifest_from_json(std::string_view text);

}  // namespace steerlab
