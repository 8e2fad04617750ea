#include "covsearch/embedding_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <utility>

#include "covsearch/error.hpp"
#include "covsearch/random.hpp"
#include "json.hpp"

namespace covsearch {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr std::size_t kFloatBytes = sizeof(float);
static_assert(kFloatBytes == 4);

std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0x000000FFu) << 24) | ((v & 0x0000FF00u) << 8) |
         ((v & 0x00FF0000u) >> 8) | ((v & 0xFF000000u) >> 24);
}

// A manifest as written on disk, before any semantic checks. validate_dataset
// needs to see ground-truth problems that load_manifest rejects outright.
struct RawManifest {
  DatasetManifest manifest;
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
};

struct Issue {
  ErrorCode code;
  std::string check;
  std::string message;
};

template <typename T>
T required_field(const ordered_json& j, const char* key) {
  if (!j.contains(key)) {
    throw Error(ErrorCode::kParseError,
                std::string("manifest field '") + key + "' is missing");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("manifest field '") + key +
                                            "' has the wrong type: " + e.what());
  }
}

SynthConfig synth_from_json(const ordered_json& j) {
  SynthConfig cfg;
  cfg.name = required_field<std::string>(j, "name");
  cfg.n_identities = required_field<std::size_t>(j, "n_identities");
  cfg.dim = required_field<std::size_t>(j, "dim");
  cfg.noise_sigma = required_field<double>(j, "noise_sigma");
  cfg.confusable_fraction = required_field<double>(j, "confusable_fraction");
  cfg.confusable_gap = required_field<double>(j, "confusable_gap");
  cfg.seed = required_field<std::uint64_t>(j, "seed");
  return cfg;
}

ordered_json synth_to_json(const SynthConfig& cfg) {
  ordered_json j;
  j["name"] = cfg.name;
  j["n_identities"] = cfg.n_identities;
  j["dim"] = cfg.dim;
  j["noise_sigma"] = cfg.noise_sigma;
  j["confusable_fraction"] = cfg.confusable_fraction;
  j["confusable_gap"] = cfg.confusable_gap;
  j["seed"] = cfg.seed;
  return j;
}

RawManifest parse_manifest(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw Error(ErrorCode::kMissingFile, "manifest not found: " + path.string());
  }
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kMissingFile, "cannot open manifest: " + path.string());
  }
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError,
                "manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) {
    throw Error(ErrorCode::kParseError, "manifest root must be an object");
  }

  RawManifest raw;
  DatasetManifest& m = raw.manifest;
  m.name = required_field<std::string>(j, "name");
  const auto dim = required_field<std::int64_t>(j, "dim");
  const auto queries = required_field<std::int64_t>(j, "query_count");
  const auto gallery = required_field<std::int64_t>(j, "gallery_count");
  if (dim < 1) throw Error(ErrorCode::kParseError, "manifest field 'dim' must be >= 1");
  if (queries < 1) {
    throw Error(ErrorCode::kParseError, "manifest field 'query_count' must be >= 1");
  }
  if (gallery < 1) {
    throw Error(ErrorCode::kParseError, "manifest field 'gallery_count' must be >= 1");
  }
  m.dim = static_cast<std::size_t>(dim);
  m.query_count = static_cast<std::size_t>(queries);
  m.gallery_count = static_cast<std::size_t>(gallery);

  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path candidate(p);
    return candidate.is_absolute() ? candidate : base / candidate;
  };
  m.query_path = resolve(required_field<std::string>(j, "query_path"));
  m.gallery_path = resolve(required_field<std::string>(j, "gallery_path"));

  if (!j.contains("ground_truth") || !j["ground_truth"].is_array()) {
    throw Error(ErrorCode::kParseError,
                "manifest field 'ground_truth' must be an array of [query_id, gallery_id]");
  }
  for (const auto& entry : j["ground_truth"]) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_integer() ||
        !entry[1].is_number_integer()) {
      throw Error(ErrorCode::kParseError,
                  "manifest field 'ground_truth' entries must be [query_id, gallery_id]");
    }
    raw.pairs.emplace_back(entry[0].get<std::int64_t>(), entry[1].get<std::int64_t>());
  }

  if (j.contains("seed") && !j["seed"].is_null()) {
    m.seed = required_field<std::uint64_t>(j, "seed");
  }
  if (j.contains("synth") && !j["synth"].is_null()) {
    m.synth = synth_from_json(j["synth"]);
  }
  return raw;
}

// Ground-truth and file-size checks shared by load_manifest and
// validate_dataset. Fills manifest.ground_truth when coverage is complete.
std::vector<Issue> check_manifest(RawManifest& raw) {
  std::vector<Issue> issues;
  DatasetManifest& m = raw.manifest;

  for (const auto& [q, g] : raw.pairs) {
    if (q < 0 || static_cast<std::size_t>(q) >= m.query_count) {
      issues.push_back({ErrorCode::kGroundTruthOutOfRange, "ground_truth_range",
                        "query_id " + std::to_string(q) + " outside [0, " +
                            std::to_string(m.query_count) + ")"});
    }
    if (g < 0 || static_cast<std::size_t>(g) >= m.gallery_count) {
      issues.push_back({ErrorCode::kGroundTruthOutOfRange, "ground_truth_range",
                        "gallery_id " + std::to_string(g) + " for query " +
                            std::to_string(q) + " outside [0, " +
                            std::to_string(m.gallery_count) + ")"});
    }
  }

  std::vector<int> seen(m.query_count, 0);
  std::vector<std::uint32_t> gt(m.query_count, 0);
  for (const auto& [q, g] : raw.pairs) {
    if (q >= 0 && static_cast<std::size_t>(q) < m.query_count) {
      ++seen[static_cast<std::size_t>(q)];
      gt[static_cast<std::size_t>(q)] = static_cast<std::uint32_t>(g);
    }
  }
  for (std::size_t q = 0; q < m.query_count; ++q) {
    if (seen[q] != 1) {
      issues.push_back({ErrorCode::kParseError, "ground_truth_coverage",
                        "query_id " + std::to_string(q) + " has " +
                            std::to_string(seen[q]) +
                            " ground-truth entries (expected exactly 1)"});
      break;
    }
  }
  if (issues.empty()) m.ground_truth = std::move(gt);

  auto check_file = [&](const fs::path& p, std::size_t rows, const char* check) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) {
      issues.push_back({ErrorCode::kMissingFile, check,
                        "embedding file not found: " + p.string()});
      return;
    }
    const auto size = fs::file_size(p, ec);
    const auto expected = rows * m.dim * kFloatBytes;
    if (ec || size != expected) {
      issues.push_back({ErrorCode::kDimensionMismatch, check,
                        p.string() + " has " + std::to_string(size) +
                            " bytes, expected " + std::to_string(expected)});
    }
  };
  check_file(m.query_path, m.query_count, "query_bytes");
  check_file(m.gallery_path, m.gallery_count, "gallery_bytes");
  return issues;
}

std::string relative_or_absolute(const fs::path& p, const fs::path& base) {
  if (!base.empty() && p.parent_path() == base) return p.filename().string();
  return p.string();
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  RawManifest raw = parse_manifest(path);
  const auto issues = check_manifest(raw);
  if (!issues.empty()) throw Error(issues.front().code, issues.front().message);
  return std::move(raw.manifest);
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = path.parent_path();
  ordered_json j;
  j["name"] = m.name;
  j["dim"] = m.dim;
  j["query_count"] = m.query_count;
  j["gallery_count"] = m.gallery_count;
  j["query_path"] = relative_or_absolute(m.query_path, base);
  j["gallery_path"] = relative_or_absolute(m.gallery_path, base);
  ordered_json gt = ordered_json::array();
  for (std::size_t q = 0; q < m.ground_truth.size(); ++q) {
    gt.push_back(ordered_json::array({q, m.ground_truth[q]}));
  }
  j["ground_truth"] = std::move(gt);
  if (m.seed) j["seed"] = *m.seed;
  if (m.synth) j["synth"] = synth_to_json(*m.synth);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "failed writing manifest " + path.string());
}

EmbeddingMatrix read_embedding_file(const fs::path& path, std::size_t rows,
                                    std::size_t dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  EmbeddingMatrix m(rows, dim);
  const std::size_t bytes = rows * dim * kFloatBytes;
  std::vector<unsigned char> buffer(bytes);
  in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw Error(ErrorCode::kIoError, "short read from " + path.string());
  }
  for (std::size_t i = 0; i < rows * dim; ++i) {
    std::uint32_t word;
    std::memcpy(&word, buffer.data() + i * kFloatBytes, kFloatBytes);
    if constexpr (std::endian::native == std::endian::big) word = byteswap32(word);
    const float value = std::bit_cast<float>(word);
    if (!std::isfinite(value)) {
      throw Error(ErrorCode::kNonFiniteValue,
                  path.string() + ": non-finite value at row " +
                      std::to_string(i / dim) + ", column " + std::to_string(i % dim));
    }
    m.data[i] = value;
  }
  return m;
}

void write_embedding_file(const EmbeddingMatrix& m, const fs::path& path) {
  std::vector<unsigned char> buffer(m.data.size() * kFloatBytes);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    std::uint32_t word = std::bit_cast<std::uint32_t>(m.data[i]);
    if constexpr (std::endian::native == std::endian::big) word = byteswap32(word);
    std::memcpy(buffer.data() + i * kFloatBytes, &word, kFloatBytes);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size()));
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

EmbeddingMatrix load_embeddings(const DatasetManifest& manifest, Split split) {
  const bool query = split == Split::kQuery;
  return read_embedding_file(query ? manifest.query_path : manifest.gallery_path,
                             query ? manifest.query_count : manifest.gallery_count,
                             manifest.dim);
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  EmbeddingMatrix out = m;
  for (std::size_t r = 0; r < m.rows; ++r) {
    double sq = 0.0;
    for (const float v : m.row(r)) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (!(norm > kZeroNormThreshold)) {
      throw Error(ErrorCode::kZeroVector,
                  "row " + std::to_string(r) + " has norm " + std::to_string(norm));
    }
    auto dst = out.row(r);
    const auto src = m.row(r);
    for (std::size_t c = 0; c < m.dim; ++c) {
      dst[c] = static_cast<float>(static_cast<double>(src[c]) / norm);
    }
  }
  out.normalized = true;
  return out;
}

void require_normalized(const EmbeddingMatrix& m, std::string_view what) {
  if (!m.normalized) {
    throw Error(ErrorCode::kNotNormalized,
                std::string(what) + " matrix is not flagged as normalized");
  }
  for (std::size_t r = 0; r < m.rows; ++r) {
    double sq = 0.0;
    for (const float v : m.row(r)) sq += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
      throw Error(ErrorCode::kNotNormalized,
                  std::string(what) + " row " + std::to_string(r) + " is not unit length");
    }
  }
}

SyntheticDataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.n_identities < 1 || cfg.dim < 1) {
    throw Error(ErrorCode::kInvalidConfig, "n_identities and dim must be >= 1");
  }
  if (!(cfg.noise_sigma >= 0.0) || !std::isfinite(cfg.noise_sigma)) {
    throw Error(ErrorCode::kInvalidConfig, "noise_sigma must be finite and >= 0");
  }
  if (!(cfg.confusable_fraction >= 0.0 && cfg.confusable_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "confusable_fraction must lie in [0, 1]");
  }
  if (!(cfg.confusable_gap > 0.0 && cfg.confusable_gap < 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "confusable_gap must lie in (0, 1)");
  }
  if (cfg.confusable_fraction > 0.0 && cfg.n_identities < 2) {
    throw Error(ErrorCode::kInvalidConfig,
                "confusable_fraction > 0 requires n_identities >= 2");
  }
  if (cfg.n_identities > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorCode::kInvalidConfig, "n_identities too large");
  }

  const std::size_t n = cfg.n_identities;
  const std::size_t d = cfg.dim;
  Rng rng(cfg.seed);

  auto random_unit = [&](std::vector<double>& v) {
    double sq = 0.0;
    do {
      sq = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        sq += x * x;
      }
    } while (sq <= kZeroNormThreshold);
    const double norm = std::sqrt(sq);
    for (auto& x : v) x /= norm;
  };

  std::vector<std::vector<double>> gallery(n, std::vector<double>(d));
  for (auto& g : gallery) random_unit(g);

  // Plant confusable pairs: partner = c * anchor + sqrt(1 - c^2) * r with r a
  // unit vector orthogonal to anchor, so cos(anchor, partner) = c exactly.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t planted = static_cast<std::size_t>(
      std::floor(cfg.confusable_fraction * static_cast<double>(n)));
  planted -= planted % 2;
  if (d >= 2) {
    const double c = 1.0 - cfg.confusable_gap;
    const double s = std::sqrt(1.0 - c * c);
    std::vector<double> r(d);
    for (std::size_t p = 0; p + 1 < planted; p += 2) {
      const auto& anchor = gallery[order[p]];
      auto& partner = gallery[order[p + 1]];
      double sq = 0.0;
      do {
        random_unit(r);
        double proj = 0.0;
        for (std::size_t k = 0; k < d; ++k) proj += r[k] * anchor[k];
        sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          r[k] -= proj * anchor[k];
          sq += r[k] * r[k];
        }
      } while (sq <= 1e-6);
      const double norm = std::sqrt(sq);
      for (std::size_t k = 0; k < d; ++k) partner[k] = c * anchor[k] + s * r[k] / norm;
    }
  }

  std::vector<std::uint32_t> ground_truth(n);
  for (std::size_t i = 0; i < n; ++i) ground_truth[i] = static_cast<std::uint32_t>(i);
  rng.shuffle(std::span<std::uint32_t>(ground_truth));

  SyntheticDataset out;
  out.gallery = EmbeddingMatrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (const double x : gallery[i]) sq += x * x;
    const double norm = std::sqrt(sq);
    auto row = out.gallery.row(i);
    for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(gallery[i][k] / norm);
  }

  out.queries = EmbeddingMatrix(n, d);
  std::vector<double> q(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto target = out.gallery.row(ground_truth[i]);
    auto row = out.queries.row(i);
    if (cfg.noise_sigma == 0.0) {
      std::copy(target.begin(), target.end(), row.begin());
      continue;
    }
    double sq = 0.0;
    do {
      sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        q[k] = static_cast<double>(target[k]) + cfg.noise_sigma * rng.normal();
        sq += q[k] * q[k];
      }
    } while (sq <= kZeroNormThreshold);
    const double norm = std::sqrt(sq);
    for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(q[k] / norm);
  }
  out.gallery.normalized = true;
  out.queries.normalized = true;

  DatasetManifest& m = out.manifest;
  m.name = cfg.name;
  m.dim = d;
  m.query_count = n;
  m.gallery_count = n;
  m.query_path = "queries.f32";
  m.gallery_path = "gallery.f32";
  m.ground_truth = std::move(ground_truth);
  m.seed = cfg.seed;
  m.synth = cfg;
  return out;
}

DatasetManifest write_synthetic(const SynthConfig& cfg, const fs::path& dir) {
  SyntheticDataset ds = generate_synthetic(cfg);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir.string());
  ds.manifest.query_path = dir / "queries.f32";
  ds.manifest.gallery_path = dir / "gallery.f32";
  write_embedding_file(ds.queries, ds.manifest.query_path);
  write_embedding_file(ds.gallery, ds.manifest.gallery_path);
  save_manifest(ds.manifest, dir / "manifest.json");
  return ds.manifest;
}

bool ValidationReport::ok() const {
  return std::none_of(checks.begin(), checks.end(), [](const ValidationCheck& c) {
    return c.status == CheckStatus::kFail;
  });
}

const ValidationCheck* ValidationReport::find(std::string_view name) const {
  for (const auto& c : checks) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::string ValidationReport::to_string() const {
  std::ostringstream os;
  for (const auto& c : checks) {
    const char* tag = c.status == CheckStatus::kPass   ? "PASS"
                      : c.status == CheckStatus::kWarn ? "WARN"
                                                       : "FAIL";
    os << tag << '\t' << c.name;
    if (!c.detail.empty()) os << '\t' << c.detail;
    os << '\n';
  }
  os << (ok() ? "OK" : "INVALID") << '\n';
  return os.str();
}

ValidationReport validate_dataset(const fs::path& manifest_path) {
  ValidationReport report;
  auto add = [&](std::string name, CheckStatus status, std::string detail = {}) {
    report.checks.push_back({std::move(name), status, std::move(detail)});
  };

  RawManifest raw;
  try {
    raw = parse_manifest(manifest_path);
  } catch (const Error& e) {
    add("manifest", CheckStatus::kFail, e.what());
    return report;
  }
  add("manifest", CheckStatus::kPass);

  const auto issues = check_manifest(raw);
  for (const char* check :
       {"query_bytes", "gallery_bytes", "ground_truth_range", "ground_truth_coverage"}) {
    std::string detail;
    for (const auto& issue : issues) {
      if (issue.check == check) {
        if (!detail.empty()) detail += "; ";
        detail += issue.message;
      }
    }
    add(check, detail.empty() ? CheckStatus::kPass : CheckStatus::kFail, detail);
  }

  // One relevant gallery item per query, and no gallery item shared.
  {
    std::vector<std::int64_t> galleries;
    for (const auto& [q, g] : raw.pairs) galleries.push_back(g);
    std::sort(galleries.begin(), galleries.end());
    const auto dup = std::adjacent_find(galleries.begin(), galleries.end());
    if (dup != galleries.end()) {
      add("ground_truth_one_to_one", CheckStatus::kFail,
          "gallery_id " + std::to_string(*dup) + " is the answer for several queries");
    } else {
      add("ground_truth_one_to_one", CheckStatus::kPass);
    }
  }

  const DatasetManifest& m = raw.manifest;
  auto inspect = [&](const fs::path& p, std::size_t rows, const char* label) {
    const std::string finite_check = std::string(label) + "_finite";
    const std::string norm_check = std::string(label) + "_norms";
    const bool size_ok = report.find(std::string(label) + "_bytes")->status ==
                         CheckStatus::kPass;
    if (!size_ok) {
      add(finite_check, CheckStatus::kFail, "skipped: byte length check failed");
      return;
    }
    EmbeddingMatrix mat;
    try {
      mat = read_embedding_file(p, rows, m.dim);
    } catch (const Error& e) {
      add(finite_check, CheckStatus::kFail, e.what());
      return;
    }
    add(finite_check, CheckStatus::kPass);

    double min_norm = std::numeric_limits<double>::infinity();
    double max_norm = 0.0;
    double sum = 0.0;
    std::size_t zero_rows = 0;
    for (std::size_t r = 0; r < mat.rows; ++r) {
      double sq = 0.0;
      for (const float v : mat.row(r)) sq += static_cast<double>(v) * v;
      const double norm = std::sqrt(sq);
      if (norm <= kZeroNormThreshold) ++zero_rows;
      min_norm = std::min(min_norm, norm);
      max_norm = std::max(max_norm, norm);
      sum += norm;
    }
    std::ostringstream detail;
    detail << "min=" << min_norm << " max=" << max_norm
           << " mean=" << sum / static_cast<double>(mat.rows);
    if (zero_rows > 0) {
      detail << " zero_rows=" << zero_rows;
      add(norm_check, CheckStatus::kFail, detail.str());
    } else if (std::abs(min_norm - 1.0) > kUnitNormTolerance ||
               std::abs(max_norm - 1.0) > kUnitNormTolerance) {
      detail << " (rows are not unit length; they will be normalized on load)";
      add(norm_check, CheckStatus::kWarn, detail.str());
    } else {
      add(norm_check, CheckStatus::kPass, detail.str());
    }
  };
  inspect(m.query_path, m.query_count, "query");
  inspect(m.gallery_path, m.gallery_count, "gallery");
  return report;
}

}  // namespace covsearch
