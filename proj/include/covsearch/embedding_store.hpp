#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace covsearch {

// Row-major float32 matrix, one embedding per row.
struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> data;
  bool normalized = false;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows_, std::size_t dim_)
      : rows(rows_), dim(dim_), data(rows_ * dim_, 0.0f) {}

  std::span<const float> row(std::size_t i) const {
    return {data.data() + i * dim, dim};
  }
  std::span<float> row(std::size_t i) { return {data.data() + i * dim, dim}; }
};

// Parameters used to produce a synthetic dataset. Kept in the manifest so a
// dataset always carries the recipe that made it.
struct SynthConfig {
  std::string name = "synthetic";
  std::size_t n_identities = 64;
  std::size_t dim = 32;
  double noise_sigma = 0.4;
  double confusable_fraction = 0.0;
  double confusable_gap = 0.02;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::string name;
  std::size_t dim = 0;
  std::size_t query_count = 0;
  std::size_t gallery_count = 0;
  // Resolved against the manifest's directory when relative.
  std::filesystem::path query_path;
  std::filesystem::path gallery_path;
  // ground_truth[query_id] = gallery_id.
  std::vector<std::uint32_t> ground_truth;
  std::optional<std::uint64_t> seed;
  std::optional<SynthConfig> synth;
};

enum class Split { kQuery, kGallery };

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path);

EmbeddingMatrix load_embeddings(const DatasetManifest& manifest, Split split);

// Headerless little-endian float32 row-major I/O.
EmbeddingMatrix read_embedding_file(const std::filesystem::path& path,
                                    std::size_t rows, std::size_t dim);
void write_embedding_file(const EmbeddingMatrix& m,
                          const std::filesystem::path& path);

inline constexpr double kZeroNormThreshold = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-5;

// Scales every row to unit L2 norm. Throws ZeroVector naming the row.
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);

// Throws NotNormalized unless the flag is set and every row is a unit vector.
void require_normalized(const EmbeddingMatrix& m, std::string_view what);

struct SyntheticDataset {
  DatasetManifest manifest;
  EmbeddingMatrix queries;
  EmbeddingMatrix gallery;
};

// Pure function of the config: the same config always yields the same bytes.
SyntheticDataset generate_synthetic(const SynthConfig& cfg);

// Generates and writes manifest.json, queries.f32 and gallery.f32 into dir.
DatasetManifest write_synthetic(const SynthConfig& cfg,
                                const std::filesystem::path& dir);

enum class CheckStatus { kPass, kWarn, kFail };

struct ValidationCheck {
  std::string name;
  CheckStatus status = CheckStatus::kPass;
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationCheck> checks;

  bool ok() const;
  const ValidationCheck* find(std::string_view name) const;
  std::string to_string() const;
};

// Never throws on bad data; every problem becomes a report entry.
ValidationReport validate_dataset(const std::filesystem::path& manifest_path);

}  // namespace covsearch
