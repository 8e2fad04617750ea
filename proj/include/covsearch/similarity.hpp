#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "covsearch/embedding_store.hpp"

namespace covsearch {

// n_queries x n_gallery cosine scores, row-major.
struct SimilarityMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  SimilarityMatrix() = default;
  SimilarityMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float at(std::size_t i, std::size_t k) const { return data[i * cols + k]; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

struct RankedEntry {
  std::uint32_t gallery_id = 0;
  float score = 0.0f;

  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

struct RankedList {
  std::uint32_t query_id = 0;
  std::vector<RankedEntry> entries;

  friend bool operator==(const RankedList&, const RankedList&) = default;
};

// 0 means one thread per hardware core.
struct ParallelOptions {
  std::size_t threads = 0;
};

// Entry (i, k) = dot(queries_i, gallery_k), accumulated in double in index
// order and rounded once, so results do not depend on the thread count.
SimilarityMatrix similarity_matrix(const EmbeddingMatrix& queries,
                                   const EmbeddingMatrix& gallery,
                                   ParallelOptions parallel = {});

// Orders by score descending, then by gallery id ascending.
inline bool ranks_before(const RankedEntry& a, const RankedEntry& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.gallery_id < b.gallery_id;
}

std::vector<RankedList> top_k(const SimilarityMatrix& sims, std::size_t k,
                              ParallelOptions parallel = {});

// Ranked-list interchange file: one `query_id\trank\tgallery_id\tscore` line
// per entry, ranks starting at 1, score printed with 9 significant digits.
// Leading `#` lines carry run metadata and are ignored by readers.
void write_ranked_lists(const std::filesystem::path& path,
                        std::span<const RankedList> lists,
                        const std::string& header_json);

struct RankedFile {
  std::vector<RankedList> lists;
  // source_rank per entry (1-based) when the file came from resolve; empty
  // for plain search output.
  std::vector<std::vector<std::size_t>> source_ranks;
  std::string header_json;
};

RankedFile read_ranked_lists(const std::filesystem::path& path);

std::string format_score(float score);

}  // namespace covsearch
