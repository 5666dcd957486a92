#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cmkt/autodiff.hpp"

// Persistence formats. All multi-byte values are little-endian; matrices are
// stored as 32-bit IEEE floats regardless of the in-memory precision.
namespace cmkt::io {

// Feature file: "CMKT" | u32 version=1 | u32 rows | u32 cols | rows*cols f32, row-major.
inline constexpr std::uint32_t kFeatureVersion = 1;

void write_feature_file(const std::filesystem::path& path, const Tensor2D& m);
// Throws FormatError (with byte offset) on bad magic, version, or truncation.
Tensor2D read_feature_file(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_features(const Tensor2D& m);
Tensor2D decode_features(const std::vector<std::uint8_t>& bytes);

// Values as they read back after a float32 round-trip.
Tensor2D round_to_float(const Tensor2D& m);

struct ManifestEntry {
  std::string utt_id;
  std::string feature_path;
  std::string transcript;
};

// Lines "utt_id<TAB>feature_path<TAB>transcript". Relative feature paths are
// resolved against the manifest's directory. Duplicate ids throw DataError;
// with `check_files`, so do missing feature files.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path, bool check_files = true);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

// Checkpoint file: "CMKTCKPT" | u64 header length | JSON header | f32 blob.
// Header: {"format_version", "config", "vocab", "step", "epoch",
//          "parameters": [{"name", "shape", "offset"}...]} with byte offsets into the blob.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> config;  // ModelConfig::to_kv echo
  std::vector<std::string> vocab;             // tokens in id order
  ParameterTable parameters;
  // Optimizer moments, keyed like `parameters`; empty when not saved.
  ParameterTable adam_m;
  ParameterTable adam_v;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws CheckpointError on unknown format_version, bad layout, or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cmkt::io
