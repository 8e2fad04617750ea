#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covsearch/embedding_store.hpp"
#include "covsearch/similarity.hpp"

namespace covsearch {

// Similarity coverage analysis: when several queries retrieve the same
// answer, the most confident query keeps it and every other query moves on
// to its own next-ranked candidate. Repeats until no collisions remain.

struct ResolutionPolicy {
  // Number of leading output positions that are de-duplicated across queries.
  std::size_t depth = 1;
  // Round cap per position; defaults to the retrieval depth.
  std::optional<std::size_t> max_rounds;
  // Keep a collision only if some pair of member queries has embedding
  // cosine above this value. Requires query embeddings.
  std::optional<double> similarity_gate;
};

struct ConflictMember {
  std::uint32_t query_id = 0;
  float score = 0.0f;
  std::size_t rank = 0;  // 1-based position in the query's list

  friend bool operator==(const ConflictMember&, const ConflictMember&) = default;
};

struct ConflictGroup {
  std::uint32_t answer_id = 0;
  std::vector<ConflictMember> members;  // ascending query_id
  std::size_t detected_at_round = 0;
};

// Groups of >= 2 queries whose entry at positions[q] coincides, in ascending
// answer_id. positions are 0-based and parallel to lists.
std::vector<ConflictGroup> detect_conflicts(std::span<const RankedList> lists,
                                            const ResolutionPolicy& policy,
                                            std::span<const std::size_t> positions,
                                            const EmbeddingMatrix* query_embeddings = nullptr,
                                            std::size_t round = 0);

struct ResolvedEntry {
  std::uint32_t gallery_id = 0;
  float score = 0.0f;
  std::size_t source_rank = 0;  // 1-based rank in the original list

  friend bool operator==(const ResolvedEntry&, const ResolvedEntry&) = default;
};

struct ResolvedList {
  std::uint32_t query_id = 0;
  // Resolved positions first, then the untouched remainder in original order.
  std::vector<ResolvedEntry> entries;
  bool unresolved = false;
};

struct AuditEntry {
  std::size_t round = 0;
  std::uint32_t answer_id = 0;
  std::uint32_t winner = 0;
  std::uint32_t loser = 0;
  double delta_s = 0.0;

  friend bool operator==(const AuditEntry&, const AuditEntry&) = default;
};

struct Resolution {
  std::vector<ResolvedList> lists;  // ascending query_id
  std::vector<AuditEntry> audit;
  // Queries whose list ran out, or that still collided at the round cap.
  std::vector<std::uint32_t> unresolved;
  std::size_t rounds = 0;
  std::size_t depth = 0;

  // Final answer (position 1) for list index i.
  const ResolvedEntry& assignment(std::size_t i) const { return lists[i].entries.front(); }
  std::vector<RankedList> as_ranked_lists() const;
  std::size_t max_advance() const;
};

Resolution resolve(std::span<const RankedList> lists, const ResolutionPolicy& policy,
                   const EmbeddingMatrix* query_embeddings = nullptr);

void write_resolution(const std::filesystem::path& path, const Resolution& resolution,
                      const std::string& header_json);
void write_audit(const std::filesystem::path& path, const Resolution& resolution,
                 const std::string& header_json);

struct Assignment {
  // gallery index per query.
  std::vector<std::uint32_t> gallery_for_query;
  double total = 0.0;
};

// Optimal one-to-one query->gallery assignment maximizing total similarity.
// Exhaustive branch-and-bound enumeration; TooLarge beyond 12 x 12.
Assignment assignment_exhaustive(const SimilarityMatrix& sims);

// Same optimum via the Hungarian algorithm (O(n^2 m)); any size.
Assignment assignment_hungarian(const SimilarityMatrix& sims);

inline constexpr std::size_t kExhaustiveAssignmentLimit = 12;

}  // namespace covsearch
