#include "covsearch/similarity.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "covsearch/error.hpp"

namespace covsearch {
namespace {

std::size_t thread_count(ParallelOptions parallel, std::size_t work_items) {
  std::size_t threads = parallel.threads;
  if (threads == 0) threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  return std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, work_items));
}

// Runs body(begin, end) over contiguous blocks of [0, n).
template <typename Body>
void for_row_blocks(std::size_t n, ParallelOptions parallel, Body&& body) {
  const std::size_t threads = thread_count(parallel, n);
  if (threads <= 1) {
    body(std::size_t{0}, n);
    return;
  }
  const std::size_t block = (n + threads - 1) / threads;
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t begin = 0; begin < n; begin += block) {
    const std::size_t end = std::min(n, begin + block);
    workers.emplace_back([&body, begin, end] { body(begin, end); });
  }
}

std::uint32_t parse_u32(std::string_view field, const std::string& where) {
  std::uint32_t value = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw Error(ErrorCode::kParseError, where + ": bad integer '" + std::string(field) + "'");
  }
  return value;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

SimilarityMatrix similarity_matrix(const EmbeddingMatrix& queries,
                                   const EmbeddingMatrix& gallery,
                                   ParallelOptions parallel) {
  if (queries.dim != gallery.dim) {
    throw Error(ErrorCode::kDimensionMismatch,
                "query dim " + std::to_string(queries.dim) + " != gallery dim " +
                    std::to_string(gallery.dim));
  }
  require_normalized(queries, "query");
  require_normalized(gallery, "gallery");

  SimilarityMatrix sims(queries.rows, gallery.rows);
  const std::size_t d = queries.dim;
  for_row_blocks(queries.rows, parallel, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const float* q = queries.data.data() + i * d;
      float* out = sims.data.data() + i * sims.cols;
      for (std::size_t k = 0; k < gallery.rows; ++k) {
        const float* g = gallery.data.data() + k * d;
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(q[c]) * g[c];
        out[k] = static_cast<float>(acc);
      }
    }
  });
  return sims;
}

std::vector<RankedList> top_k(const SimilarityMatrix& sims, std::size_t k,
                              ParallelOptions parallel) {
  if (k < 1 || k > sims.cols) {
    throw Error(ErrorCode::kKOutOfRange, "k=" + std::to_string(k) +
                                             " outside [1, " + std::to_string(sims.cols) + "]");
  }
  std::vector<RankedList> lists(sims.rows);
  for_row_blocks(sims.rows, parallel, [&](std::size_t begin, std::size_t end) {
    std::vector<RankedEntry> scratch(sims.cols);
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = sims.row(i);
      for (std::size_t g = 0; g < sims.cols; ++g) {
        scratch[g] = {static_cast<std::uint32_t>(g), row[g]};
      }
      std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k),
                        scratch.end(), ranks_before);
      lists[i].query_id = static_cast<std::uint32_t>(i);
      lists[i].entries.assign(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k));
    }
  });
  return lists;
}

std::string format_score(float score) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(score));
  return buf;
}

void write_ranked_lists(const std::filesystem::path& path,
                        std::span<const RankedList> lists,
                        const std::string& header_json) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  if (!header_json.empty()) out << "# config: " << header_json << '\n';
  for (const auto& list : lists) {
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      out << list.query_id << '\t' << (r + 1) << '\t' << list.entries[r].gallery_id << '\t'
          << format_score(list.entries[r].score) << '\n';
    }
  }
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

RankedFile read_ranked_lists(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open " + path.string());

  RankedFile file;
  std::string line;
  std::size_t line_no = 0;
  std::optional<bool> has_source_rank;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      constexpr std::string_view kConfig = "# config: ";
      if (line.rfind(kConfig, 0) == 0 && file.header_json.empty()) {
        file.header_json = line.substr(kConfig.size());
      }
      continue;
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto fields = split_tabs(line);
    if (fields.size() != 4 && fields.size() != 5) {
      throw Error(ErrorCode::kParseError, where + ": expected 4 or 5 tab-separated fields");
    }
    const bool five = fields.size() == 5;
    if (has_source_rank && *has_source_rank != five) {
      throw Error(ErrorCode::kParseError, where + ": inconsistent column count");
    }
    has_source_rank = five;

    const std::uint32_t query_id = parse_u32(fields[0], where);
    const std::uint32_t rank = parse_u32(fields[1], where);
    const std::uint32_t gallery_id = parse_u32(fields[2], where);
    float score = 0.0f;
    {
      const std::string text(fields[3]);
      char* end = nullptr;
      score = std::strtof(text.c_str(), &end);
      if (end == text.c_str() || *end != '\0' || !std::isfinite(score)) {
        throw Error(ErrorCode::kParseError, where + ": bad score '" + text + "'");
      }
    }

    if (file.lists.empty() || file.lists.back().query_id != query_id || rank == 1) {
      if (rank != 1) {
        throw Error(ErrorCode::kParseError, where + ": list for query " +
                                                std::to_string(query_id) +
                                                " does not start at rank 1");
      }
      file.lists.push_back({query_id, {}});
      if (five) file.source_ranks.emplace_back();
    }
    auto& list = file.lists.back();
    if (rank != list.entries.size() + 1) {
      throw Error(ErrorCode::kParseError, where + ": ranks must be consecutive");
    }
    list.entries.push_back({gallery_id, score});
    if (five) file.source_ranks.back().push_back(parse_u32(fields[4], where));
  }
  return file;
}

}  // namespace covsearch
