#include "covsearch/sca.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "covsearch/error.hpp"

namespace covsearch {
namespace {

// One query's candidate at its current pointer, or nothing if the query
// takes no further part in collision checks.
struct Candidate {
  std::uint32_t query_id;
  std::uint32_t gallery_id;
  float score;
  std::size_t rank;
};

double query_cosine(const EmbeddingMatrix& q, std::uint32_t a, std::uint32_t b) {
  const auto ra = q.row(a);
  const auto rb = q.row(b);
  double acc = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t k = 0; k < q.dim; ++k) {
    acc += static_cast<double>(ra[k]) * rb[k];
    na += static_cast<double>(ra[k]) * ra[k];
    nb += static_cast<double>(rb[k]) * rb[k];
  }
  return acc / std::sqrt(na * nb);
}

void check_gate(const ResolutionPolicy& policy, const EmbeddingMatrix* embeddings,
                std::uint32_t max_query_id) {
  if (!policy.similarity_gate) return;
  if (embeddings == nullptr) {
    throw Error(ErrorCode::kInvalidConfig, "similarity_gate requires query embeddings");
  }
  if (embeddings->rows <= max_query_id) {
    throw Error(ErrorCode::kDimensionMismatch, "query embeddings have no row for query " +
                                                   std::to_string(max_query_id));
  }
}

std::vector<ConflictGroup> group_candidates(std::vector<Candidate> candidates,
                                            const ResolutionPolicy& policy,
                                            const EmbeddingMatrix* embeddings,
                                            std::size_t round) {
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.gallery_id != b.gallery_id) return a.gallery_id < b.gallery_id;
    return a.query_id < b.query_id;
  });

  std::vector<ConflictGroup> groups;
  for (std::size_t begin = 0; begin < candidates.size();) {
    std::size_t end = begin + 1;
    while (end < candidates.size() && candidates[end].gallery_id == candidates[begin].gallery_id) {
      ++end;
    }
    if (end - begin >= 2) {
      ConflictGroup group;
      group.answer_id = candidates[begin].gallery_id;
      group.detected_at_round = round;
      for (std::size_t i = begin; i < end; ++i) {
        group.members.push_back({candidates[i].query_id, candidates[i].score, candidates[i].rank});
      }
      bool keep = true;
      if (policy.similarity_gate) {
        keep = false;
        for (std::size_t a = 0; a < group.members.size() && !keep; ++a) {
          for (std::size_t b = a + 1; b < group.members.size() && !keep; ++b) {
            keep = query_cosine(*embeddings, group.members[a].query_id,
                                group.members[b].query_id) > *policy.similarity_gate;
          }
        }
      }
      if (keep) groups.push_back(std::move(group));
    }
    begin = end;
  }
  return groups;
}

std::vector<std::size_t> canonical_order(std::span<const RankedList> lists) {
  std::vector<std::size_t> order(lists.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return lists[a].query_id < lists[b].query_id;
  });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (lists[order[i]].query_id == lists[order[i - 1]].query_id) {
      throw Error(ErrorCode::kDuplicateQuery,
                  "query " + std::to_string(lists[order[i]].query_id) + " appears twice");
    }
  }
  return order;
}

}  // namespace

std::vector<ConflictGroup> detect_conflicts(std::span<const RankedList> lists,
                                            const ResolutionPolicy& policy,
                                            std::span<const std::size_t> positions,
                                            const EmbeddingMatrix* query_embeddings,
                                            std::size_t round) {
  if (positions.size() != lists.size()) {
    throw Error(ErrorCode::kPointerOutOfBounds, "one position per list is required");
  }
  std::uint32_t max_id = 0;
  std::vector<Candidate> candidates;
  candidates.reserve(lists.size());
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const auto& list = lists[i];
    if (positions[i] >= list.entries.size()) {
      throw Error(ErrorCode::kPointerOutOfBounds,
                  "position " + std::to_string(positions[i]) + " outside list of query " +
                      std::to_string(list.query_id));
    }
    const auto& e = list.entries[positions[i]];
    candidates.push_back({list.query_id, e.gallery_id, e.score, positions[i] + 1});
    max_id = std::max(max_id, list.query_id);
  }
  check_gate(policy, query_embeddings, max_id);
  return group_candidates(std::move(candidates), policy, query_embeddings, round);
}

Resolution resolve(std::span<const RankedList> lists, const ResolutionPolicy& policy,
                   const EmbeddingMatrix* query_embeddings) {
  const auto order = canonical_order(lists);
  std::size_t min_len = std::numeric_limits<std::size_t>::max();
  std::size_t max_len = 0;
  std::uint32_t max_id = 0;
  for (const auto& list : lists) {
    if (list.entries.empty()) {
      throw Error(ErrorCode::kEmptyList,
                  "ranked list for query " + std::to_string(list.query_id) + " is empty");
    }
    min_len = std::min(min_len, list.entries.size());
    max_len = std::max(max_len, list.entries.size());
    max_id = std::max(max_id, list.query_id);
  }
  if (policy.depth < 1) throw Error(ErrorCode::kInvalidConfig, "depth must be >= 1");
  if (!lists.empty() && policy.depth > min_len) {
    throw Error(ErrorCode::kInvalidConfig, "depth " + std::to_string(policy.depth) +
                                               " exceeds retrieval depth " +
                                               std::to_string(min_len));
  }
  if (!lists.empty()) check_gate(policy, query_embeddings, max_id);
  const std::size_t max_rounds = policy.max_rounds.value_or(max_len);

  const std::size_t count = lists.size();
  Resolution out;
  out.lists.resize(count);
  std::vector<std::vector<ResolvedEntry>> remaining(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& src = lists[order[i]];
    out.lists[i].query_id = src.query_id;
    for (std::size_t r = 0; r < src.entries.size(); ++r) {
      remaining[i].push_back({src.entries[r].gallery_id, src.entries[r].score, r + 1});
    }
  }
  std::map<std::uint32_t, std::size_t> index_of;
  for (std::size_t i = 0; i < count; ++i) index_of[out.lists[i].query_id] = i;

  std::vector<bool> unresolved(count, false);
  std::size_t round = 0;
  for (std::size_t slot = 0; slot < policy.depth && count > 0; ++slot) {
    std::vector<std::size_t> pos(count, 0);
    std::vector<bool> active(count, true);

    auto detect = [&] {
      std::vector<Candidate> candidates;
      for (std::size_t i = 0; i < count; ++i) {
        if (!active[i]) continue;
        const auto& e = remaining[i][pos[i]];
        candidates.push_back({out.lists[i].query_id, e.gallery_id, e.score, e.source_rank});
      }
      return group_candidates(std::move(candidates), policy, query_embeddings, round + 1);
    };

    std::size_t slot_rounds = 0;
    for (auto groups = detect(); !groups.empty(); groups = detect()) {
      if (slot_rounds == max_rounds) {
        for (const auto& g : groups) {
          for (const auto& m : g.members) unresolved[index_of[m.query_id]] = true;
        }
        break;
      }
      ++round;
      ++slot_rounds;
      for (const auto& g : groups) {
        // Members are in ascending query_id, so the first maximum wins ties.
        const auto winner = std::max_element(
            g.members.begin(), g.members.end(),
            [](const ConflictMember& a, const ConflictMember& b) { return a.score < b.score; });
        for (const auto& m : g.members) {
          if (&m == &*winner) continue;
          out.audit.push_back({round, g.answer_id, winner->query_id, m.query_id,
                               static_cast<double>(winner->score) - static_cast<double>(m.score)});
          const std::size_t i = index_of[m.query_id];
          if (pos[i] + 1 < remaining[i].size()) {
            ++pos[i];
          } else {
            active[i] = false;
            unresolved[i] = true;
          }
        }
      }
    }

    for (std::size_t i = 0; i < count; ++i) {
      out.lists[i].entries.push_back(remaining[i][pos[i]]);
      remaining[i].erase(remaining[i].begin() + static_cast<std::ptrdiff_t>(pos[i]));
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    auto& entries = out.lists[i].entries;
    entries.insert(entries.end(), remaining[i].begin(), remaining[i].end());
    out.lists[i].unresolved = unresolved[i];
    if (unresolved[i]) out.unresolved.push_back(out.lists[i].query_id);
  }
  out.rounds = round;
  out.depth = count > 0 ? policy.depth : 0;
  return out;
}

std::vector<RankedList> Resolution::as_ranked_lists() const {
  std::vector<RankedList> ranked;
  ranked.reserve(lists.size());
  for (const auto& list : lists) {
    RankedList r{list.query_id, {}};
    for (const auto& e : list.entries) r.entries.push_back({e.gallery_id, e.score});
    ranked.push_back(std::move(r));
  }
  return ranked;
}

std::size_t Resolution::max_advance() const {
  std::size_t worst = 0;
  for (const auto& list : lists) {
    for (std::size_t p = 0; p < depth && p < list.entries.size(); ++p) {
      worst = std::max(worst, list.entries[p].source_rank - 1);
    }
  }
  return worst;
}

void write_resolution(const std::filesystem::path& path, const Resolution& resolution,
                      const std::string& header_json) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  if (!header_json.empty()) out << "# config: " << header_json << '\n';
  for (const auto& list : resolution.lists) {
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      const auto& e = list.entries[r];
      out << list.query_id << '\t' << (r + 1) << '\t' << e.gallery_id << '\t'
          << format_score(e.score) << '\t' << e.source_rank << '\n';
    }
  }
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

void write_audit(const std::filesystem::path& path, const Resolution& resolution,
                 const std::string& header_json) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  if (!header_json.empty()) out << "# config: " << header_json << '\n';
  char buf[32];
  for (const auto& a : resolution.audit) {
    std::snprintf(buf, sizeof(buf), "%.9g", a.delta_s);
    out << a.round << '\t' << a.answer_id << '\t' << a.winner << '\t' << a.loser << '\t' << buf
        << '\n';
  }
  for (const auto q : resolution.unresolved) out << "# unresolved\t" << q << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

Assignment assignment_exhaustive(const SimilarityMatrix& sims) {
  const std::size_t n = sims.rows;
  const std::size_t m = sims.cols;
  if (n > m) throw Error(ErrorCode::kInvalidConfig, "more queries than gallery items");
  if (m > kExhaustiveAssignmentLimit) {
    throw Error(ErrorCode::kTooLarge, std::to_string(n) + "x" + std::to_string(m) +
                                          " exceeds the exhaustive limit of " +
                                          std::to_string(kExhaustiveAssignmentLimit));
  }

  // Suffix sums of row maxima bound what the unassigned rows can still add.
  std::vector<double> bound(n + 1, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    const auto row = sims.row(i);
    bound[i] = bound[i + 1] + *std::max_element(row.begin(), row.end());
  }

  Assignment best;
  best.total = -std::numeric_limits<double>::infinity();
  std::vector<std::uint32_t> current(n);
  std::vector<bool> used(m, false);
  auto search = [&](auto&& self, std::size_t i, double total) -> void {
    if (i == n) {
      if (total > best.total) {
        best.total = total;
        best.gallery_for_query = current;
      }
      return;
    }
    if (total + bound[i] <= best.total) return;
    for (std::size_t g = 0; g < m; ++g) {
      if (used[g]) continue;
      used[g] = true;
      current[i] = static_cast<std::uint32_t>(g);
      self(self, i + 1, total + static_cast<double>(sims.at(i, g)));
      used[g] = false;
    }
  };
  search(search, 0, 0.0);
  if (n == 0) best.total = 0.0;
  return best;
}

Assignment assignment_hungarian(const SimilarityMatrix& sims) {
  const std::size_t n = sims.rows;
  const std::size_t m = sims.cols;
  if (n > m) throw Error(ErrorCode::kInvalidConfig, "more queries than gallery items");

  // Shortest augmenting path with potentials on cost = -similarity; rows and
  // columns are 1-based, column 0 is the virtual source.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cost = -static_cast<double>(sims.at(i0 - 1, j - 1)) - u[i0] - v[j];
        if (cost < minv[j]) {
          minv[j] = cost;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  out.gallery_for_query.assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (match[j] != 0) out.gallery_for_query[match[j] - 1] = static_cast<std::uint32_t>(j - 1);
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.total += static_cast<double>(sims.at(i, out.gallery_for_query[i]));
  }
  return out;
}

}  // namespace covsearch
