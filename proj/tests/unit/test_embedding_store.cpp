#include <cmath>
#include <cstring>

#include "covsearch/embedding_store.hpp"
#include "covsearch/error.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace covsearch;
using covsearch::testing::TempDir;

namespace {

// 4 queries / 4 gallery rows, dim 8, ground truth q -> (q + 1) % 4.
std::filesystem::path write_fixture(const TempDir& dir, std::size_t gallery_bytes_short = 0,
                                    int gt_override = -1) {
  EmbeddingMatrix queries(4, 8);
  EmbeddingMatrix gallery(4, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    queries.data[i * 8 + i] = 1.0f;
    gallery.data[i * 8 + ((i + 3) % 4)] = 1.0f;
  }
  write_embedding_file(queries, dir / "q.f32");
  write_embedding_file(gallery, dir / "g.f32");
  if (gallery_bytes_short > 0) {
    auto bytes = covsearch::testing::read_bytes(dir / "g.f32");
    bytes.resize(bytes.size() - gallery_bytes_short);
    covsearch::testing::write_bytes(dir / "g.f32", bytes);
  }
  nlohmann::json j;
  j["name"] = "fixture";
  j["dim"] = 8;
  j["query_count"] = 4;
  j["gallery_count"] = 4;
  j["query_path"] = "q.f32";
  j["gallery_path"] = "g.f32";
  j["ground_truth"] = nlohmann::json::array();
  for (int q = 0; q < 4; ++q) {
    const int g = (q == 0 && gt_override >= 0) ? gt_override : (q + 1) % 4;
    j["ground_truth"].push_back({q, g});
  }
  std::ofstream(dir / "manifest.json") << j.dump(2);
  return dir / "manifest.json";
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected covsearch::Error");
  return ErrorCode::kIoError;
}

}  // namespace

TEST_CASE("load_manifest reads a hand-written fixture") {
  TempDir dir;
  const auto path = write_fixture(dir);
  const DatasetManifest m = load_manifest(path);
  CHECK(m.name == "fixture");
  CHECK(m.dim == 8);
  CHECK(m.query_count == 4);
  CHECK(m.gallery_count == 4);
  CHECK(m.ground_truth == std::vector<std::uint32_t>{1, 2, 3, 0});
  CHECK(m.query_path == dir.path() / "q.f32");
  CHECK_FALSE(m.seed.has_value());

  // save -> load keeps every field.
  save_manifest(m, dir / "copy.json");
  const DatasetManifest again = load_manifest(dir / "copy.json");
  CHECK(again.ground_truth == m.ground_truth);
  CHECK(again.query_path == m.query_path);
  CHECK(again.name == m.name);
}

TEST_CASE("load_manifest error paths") {
  TempDir dir;
  CHECK(code_of([&] { load_manifest(dir / "absent.json"); }) == ErrorCode::kMissingFile);

  covsearch::testing::write_bytes(dir / "bad.json", "{ not json");
  CHECK(code_of([&] { load_manifest(dir / "bad.json"); }) == ErrorCode::kParseError);

  covsearch::testing::write_bytes(dir / "partial.json", R"({"name": "x", "dim": 2})");
  CHECK(code_of([&] { load_manifest(dir / "partial.json"); }) == ErrorCode::kParseError);

  SUBCASE("gallery file one byte short") {
    const auto path = write_fixture(dir, 1);
    CHECK(code_of([&] { load_manifest(path); }) == ErrorCode::kDimensionMismatch);
  }
  SUBCASE("ground truth equal to gallery_count") {
    const auto path = write_fixture(dir, 0, 4);
    CHECK(code_of([&] { load_manifest(path); }) == ErrorCode::kGroundTruthOutOfRange);
  }
  SUBCASE("missing embedding file") {
    const auto path = write_fixture(dir);
    std::filesystem::remove(dir / "q.f32");
    CHECK(code_of([&] { load_manifest(path); }) == ErrorCode::kMissingFile);
  }
}

TEST_CASE("load_embeddings decodes little-endian float32") {
  TempDir dir;
  // 1.0f = 0x3F800000, 0.0f = 0.
  covsearch::testing::write_bytes(dir / "one.f32",
                                  std::string("\x00\x00\x80\x3f\x00\x00\x00\x00", 8));
  const EmbeddingMatrix m = read_embedding_file(dir / "one.f32", 1, 2);
  CHECK(m.rows == 1);
  CHECK(m.data == std::vector<float>{1.0f, 0.0f});
  CHECK_FALSE(m.normalized);

  // quiet NaN 0x7FC00000.
  covsearch::testing::write_bytes(dir / "nan.f32",
                                  std::string("\x00\x00\x80\x3f\x00\x00\xc0\x7f", 8));
  CHECK(code_of([&] { read_embedding_file(dir / "nan.f32", 1, 2); }) ==
        ErrorCode::kNonFiniteValue);
  // +inf 0x7F800000.
  covsearch::testing::write_bytes(dir / "inf.f32",
                                  std::string("\x00\x00\x80\x7f\x00\x00\x00\x00", 8));
  CHECK(code_of([&] { read_embedding_file(dir / "inf.f32", 1, 2); }) ==
        ErrorCode::kNonFiniteValue);
}

TEST_CASE("embedding files round-trip bit-exactly") {
  TempDir dir;
  const EmbeddingMatrix fixture = covsearch::testing::from_rows({{1.5f, -2.0f}, {0.0f, -0.0f},
                                                                 {1e-40f, 3.4e38f}});
  write_embedding_file(fixture, dir / "m.f32");
  const EmbeddingMatrix back = read_embedding_file(dir / "m.f32", 3, 2);
  CHECK(std::memcmp(back.data.data(), fixture.data.data(), fixture.data.size() * 4) == 0);

  // write(read(x)) == x for random finite bit patterns.
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.below(7);
    const std::size_t dim = 1 + rng.below(9);
    std::string bytes;
    while (bytes.size() < rows * dim * 4) {
      std::uint32_t word = static_cast<std::uint32_t>(rng.next());
      if (((word >> 23) & 0xFFu) == 0xFFu) continue;  // skip NaN/Inf patterns
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((word >> (8 * b)) & 0xFF));
    }
    covsearch::testing::write_bytes(dir / "r.f32", bytes);
    const EmbeddingMatrix m = read_embedding_file(dir / "r.f32", rows, dim);
    write_embedding_file(m, dir / "r2.f32");
    CHECK(covsearch::testing::read_bytes(dir / "r2.f32") == bytes);
  }
}

TEST_CASE("l2_normalize") {
  const auto m = l2_normalize(covsearch::testing::from_rows({{3.0f, 4.0f}, {1.0f, 0.0f}}));
  CHECK(m.normalized);
  CHECK(m.data[0] == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(m.data[1] == doctest::Approx(0.8).epsilon(1e-7));
  CHECK(m.data[2] == 1.0f);
  CHECK(m.data[3] == 0.0f);

  try {
    l2_normalize(covsearch::testing::from_rows({{1.0f, 1.0f}, {0.0f, 0.0f}}));
    FAIL("expected ZeroVector");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kZeroVector);
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }

  // Idempotent within 1e-7 per element, on random unnormalized data.
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    EmbeddingMatrix raw(17, 1 + rng.below(40));
    for (auto& v : raw.data) v = static_cast<float>(5.0 * rng.normal());
    const auto once = l2_normalize(raw);
    const auto twice = l2_normalize(once);
    for (std::size_t i = 0; i < once.data.size(); ++i) {
      CHECK(std::abs(once.data[i] - twice.data[i]) <= 1e-7);
    }
  }
}

TEST_CASE("require_normalized rejects unflagged or non-unit rows") {
  auto m = covsearch::testing::from_rows({{1.0f, 0.0f}});
  CHECK(code_of([&] { require_normalized(m, "q"); }) == ErrorCode::kNotNormalized);
  m.normalized = true;
  CHECK_NOTHROW(require_normalized(m, "q"));
  m.data[0] = 2.0f;
  CHECK(code_of([&] { require_normalized(m, "q"); }) == ErrorCode::kNotNormalized);
}

TEST_CASE("generate_synthetic") {
  SynthConfig cfg;
  cfg.n_identities = 20;
  cfg.dim = 16;
  cfg.seed = 5;

  SUBCASE("zero noise makes each query equal its gallery row") {
    cfg.noise_sigma = 0.0;
    const auto ds = generate_synthetic(cfg);
    for (std::size_t q = 0; q < 20; ++q) {
      const auto a = ds.queries.row(q);
      const auto b = ds.gallery.row(ds.manifest.ground_truth[q]);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }

  SUBCASE("ground truth is a permutation") {
    const auto ds = generate_synthetic(cfg);
    auto gt = ds.manifest.ground_truth;
    std::sort(gt.begin(), gt.end());
    for (std::uint32_t i = 0; i < gt.size(); ++i) CHECK(gt[i] == i);
  }

  SUBCASE("confusable partners sit at cosine 1 - gap") {
    cfg.confusable_fraction = 1.0;
    cfg.confusable_gap = 0.05;
    const auto ds = generate_synthetic(cfg);
    // Every identity is paired, so every gallery row has a partner at 0.95.
    std::size_t paired = 0;
    for (std::size_t a = 0; a < 20; ++a) {
      for (std::size_t b = 0; b < 20; ++b) {
        if (a == b) continue;
        double dot = 0.0;
        for (std::size_t k = 0; k < 16; ++k) {
          dot += static_cast<double>(ds.gallery.row(a)[k]) * ds.gallery.row(b)[k];
        }
        if (std::abs(dot - 0.95) < 1e-5) ++paired;
      }
    }
    CHECK(paired == 20);
  }

  SUBCASE("same seed gives byte-identical files") {
    TempDir a;
    TempDir b;
    cfg.confusable_fraction = 0.5;
    write_synthetic(cfg, a.path());
    write_synthetic(cfg, b.path());
    for (const char* name : {"queries.f32", "gallery.f32", "manifest.json"}) {
      CHECK(covsearch::testing::read_bytes(a / name) == covsearch::testing::read_bytes(b / name));
    }
    cfg.seed = 6;
    TempDir c;
    write_synthetic(cfg, c.path());
    CHECK(covsearch::testing::read_bytes(a / "queries.f32") !=
          covsearch::testing::read_bytes(c / "queries.f32"));

    const auto m = load_manifest(a / "manifest.json");
    REQUIRE(m.synth.has_value());
    CHECK(m.synth->confusable_fraction == 0.5);
    CHECK(*m.seed == 5);
  }

  SUBCASE("invalid configs") {
    SynthConfig bad = cfg;
    bad.noise_sigma = -1.0;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidConfig);
    bad = cfg;
    bad.confusable_gap = 0.0;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidConfig);
    bad = cfg;
    bad.confusable_fraction = 1.5;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidConfig);
    bad = cfg;
    bad.n_identities = 1;
    bad.confusable_fraction = 0.5;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidConfig);
    bad = cfg;
    bad.dim = 0;
    CHECK(code_of([&] { generate_synthetic(bad); }) == ErrorCode::kInvalidConfig);
  }
}

TEST_CASE("validate_dataset") {
  TempDir dir;

  SUBCASE("clean fixture passes every check") {
    SynthConfig cfg;
    cfg.n_identities = 8;
    cfg.dim = 4;
    cfg.seed = 1;
    write_synthetic(cfg, dir.path());
    const auto report = validate_dataset(dir / "manifest.json");
    CHECK(report.ok());
    for (const auto& c : report.checks) CHECK_MESSAGE(c.status == CheckStatus::kPass, c.name);
  }

  SUBCASE("two queries sharing one gallery answer are flagged") {
    const auto path = write_fixture(dir, 0, 2);  // q0 -> 2 collides with q1 -> 2
    const auto report = validate_dataset(path);
    CHECK_FALSE(report.ok());
    REQUIRE(report.find("ground_truth_one_to_one") != nullptr);
    CHECK(report.find("ground_truth_one_to_one")->status == CheckStatus::kFail);
    CHECK(report.find("query_bytes")->status == CheckStatus::kPass);
  }

  SUBCASE("un-normalized data is a warning, not an error") {
    const auto path = write_fixture(dir);
    EmbeddingMatrix scaled(4, 8);
    for (std::size_t i = 0; i < 4; ++i) scaled.data[i * 8 + i] = 2.0f;
    write_embedding_file(scaled, dir / "q.f32");
    const auto report = validate_dataset(path);
    CHECK(report.ok());
    CHECK(report.find("query_norms")->status == CheckStatus::kWarn);
  }

  SUBCASE("short file and NaN are reported, not thrown") {
    const auto path = write_fixture(dir, 3);
    auto report = validate_dataset(path);
    CHECK(report.find("gallery_bytes")->status == CheckStatus::kFail);
    CHECK(report.find("gallery_finite")->status == CheckStatus::kFail);

    write_fixture(dir);
    auto bytes = covsearch::testing::read_bytes(dir / "q.f32");
    const float nan = std::nanf("");
    std::memcpy(bytes.data() + 4, &nan, 4);
    covsearch::testing::write_bytes(dir / "q.f32", bytes);
    report = validate_dataset(path);
    CHECK(report.find("query_finite")->status == CheckStatus::kFail);
    CHECK_FALSE(report.ok());
  }

  SUBCASE("missing manifest") {
    const auto report = validate_dataset(dir / "nope.json");
    CHECK_FALSE(report.ok());
    CHECK(report.to_string().find("INVALID") != std::string::npos);
  }
}
