#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "covsearch/embedding_store.hpp"
#include "covsearch/random.hpp"

namespace covsearch::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "covsearch") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline EmbeddingMatrix random_unit_rows(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingMatrix m(rows, dim);
  for (auto& v : m.data) v = static_cast<float>(rng.normal());
  return l2_normalize(m);
}

inline EmbeddingMatrix from_rows(const std::vector<std::vector<float>>& rows) {
  EmbeddingMatrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < m.dim; ++k) m.data[i * m.dim + k] = rows[i][k];
  }
  return m;
}

}  // namespace covsearch::testing
