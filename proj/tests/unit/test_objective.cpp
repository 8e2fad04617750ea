#include <cmath>
#include <functional>
#include <numeric>

#include "covsearch/error.hpp"
#include "covsearch/objective.hpp"
#include "covsearch/similarity.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace covsearch;
using covsearch::testing::from_rows;
using covsearch::testing::random_unit_rows;
using covsearch::testing::TempDir;

namespace {

using PairList = std::vector<std::pair<std::uint32_t, std::uint32_t>>;

PairList diagonal_pairs(std::size_t n) {
  PairList pairs;
  for (std::uint32_t i = 0; i < n; ++i) pairs.emplace_back(i, i);
  return pairs;
}

Batch batch_from(const EmbeddingMatrix& texts, const EmbeddingMatrix& images) {
  const auto pairs = diagonal_pairs(texts.rows);
  return make_batch(texts, images, pairs);
}

// Correlated pairs so losses sit away from log N.
Batch random_batch(std::size_t n, std::size_t d, std::uint64_t seed) {
  const auto images = random_unit_rows(n, d, seed);
  auto texts = images;
  Rng rng(seed + 1000);
  for (auto& v : texts.data) v += static_cast<float>(0.5 * rng.normal());
  return batch_from(l2_normalize(texts), images);
}

AdapterParams random_params(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  AdapterParams p = AdapterParams::identity(d);
  for (auto& w : p.w_text) w += 0.3 * rng.normal();
  for (auto& w : p.w_image) w += 0.3 * rng.normal();
  p.match_scale = 2.0 + 4.0 * rng.uniform();
  p.match_bias = rng.normal();
  p.temperature = 0.5 + rng.uniform();
  return p;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1e-8, std::abs(analytic), std::abs(numeric)});
}

// Central differences on every parameter; returns the worst relative error
// among coordinates whose gradient is not negligible.
double worst_gradient_error(const std::function<double(const AdapterParams&)>& loss,
                            const AdapterParams& params, const AdapterGradients& grad) {
  constexpr double kEps = 1e-4;
  double worst = 0.0;
  auto probe = [&](auto&& field_of, double analytic) {
    AdapterParams plus = params;
    AdapterParams minus = params;
    field_of(plus) += kEps;
    field_of(minus) -= kEps;
    const double numeric = (loss(plus) - loss(minus)) / (2.0 * kEps);
    if (std::max(std::abs(analytic), std::abs(numeric)) < 1e-6) return;
    worst = std::max(worst, rel_error(analytic, numeric));
  };
  for (std::size_t i = 0; i < params.w_text.size(); ++i) {
    probe([i](AdapterParams& p) -> double& { return p.w_text[i]; }, grad.w_text[i]);
    probe([i](AdapterParams& p) -> double& { return p.w_image[i]; }, grad.w_image[i]);
  }
  probe([](AdapterParams& p) -> double& { return p.match_scale; }, grad.match_scale);
  probe([](AdapterParams& p) -> double& { return p.match_bias; }, grad.match_bias);
  probe([](AdapterParams& p) -> double& { return p.temperature; }, grad.temperature);
  return worst;
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

TEST_CASE("inbatch_softmax closed forms") {
  DenseMatrix sims(2, 2);
  sims(0, 0) = 1.0;
  sims(1, 1) = 1.0;
  const auto rows = inbatch_softmax(sims, Direction::kImageToText, 1.0);
  CHECK(rows(0, 0) == doctest::Approx(0.7310586).epsilon(1e-6));
  CHECK(rows(0, 1) == doctest::Approx(0.2689414).epsilon(1e-6));

  DenseMatrix asym(2, 2);
  asym(0, 1) = 2.0;  // only image 0 -> text 1 is high
  const auto t2i = inbatch_softmax(asym, Direction::kTextToImage, 1.0);
  // Text 1 sees images {0: 2.0, 1: 0.0}.
  CHECK(t2i(1, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
  CHECK(t2i(0, 0) == doctest::Approx(0.5));

  DenseMatrix same(4, 4);
  for (auto& v : same.data) v = 0.3;
  const auto uniform = inbatch_softmax(same, Direction::kImageToText, 0.7);
  for (double v : uniform.data) CHECK(v == doctest::Approx(0.25));

  DenseMatrix one(1, 1);
  one(0, 0) = -0.4;
  CHECK(inbatch_softmax(one, Direction::kImageToText, 1.0)(0, 0) == 1.0);

  CHECK(code_of([&] { inbatch_softmax(sims, Direction::kImageToText, 0.0); }) ==
        ErrorCode::kInvalidConfig);
}

TEST_CASE("contrastive loss closed forms") {
  const auto params2 = AdapterParams::identity(2);
  const auto diag = batch_from(from_rows({{1, 0}, {0, 1}}), from_rows({{1, 0}, {0, 1}}));
  CHECK(std::abs(contrastive_loss(diag, params2).loss - 0.3132617) <= 1e-6);

  // Identical rows: every logit equal, loss = log N.
  auto ones = from_rows({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}, {1, 0, 0}});
  ones.normalized = true;
  const auto flat = contrastive_loss(batch_from(ones, ones), AdapterParams::identity(3));
  CHECK(std::abs(flat.loss - std::log(4.0)) <= 1e-6);

  const auto single = batch_from(from_rows({{1, 0}}), from_rows({{1, 0}}));
  CHECK(code_of([&] { contrastive_loss(single, params2); }) == ErrorCode::kBatchTooSmall);

  auto bad = diag;
  bad.images.data[0] = std::nan("");
  CHECK(code_of([&] { contrastive_loss(bad, params2); }) == ErrorCode::kNonFinite);

  CHECK(code_of([&] { contrastive_loss(diag, AdapterParams::identity(3)); }) ==
        ErrorCode::kDimensionMismatch);
}

TEST_CASE("match loss closed forms") {
  const auto b = batch_from(from_rows({{1, 0}, {0, 1}}), from_rows({{1, 0}, {0, 1}}));
  const HardNegatives neg{{1, 0}, {1, 0}};

  AdapterParams sharp = AdapterParams::identity(2);
  sharp.match_scale = 1000.0;
  sharp.match_bias = -500.0;
  CHECK(match_loss(b, neg, sharp).loss < 1e-6);

  AdapterParams blank = AdapterParams::identity(2);
  blank.match_scale = 0.0;
  blank.match_bias = 0.0;
  CHECK(std::abs(match_loss(b, neg, blank).loss - std::log(2.0)) <= 1e-6);

  const HardNegatives out_of_range{{2, 0}, {1, 0}};
  CHECK(code_of([&] { match_loss(b, out_of_range, blank); }) == ErrorCode::kPointerOutOfBounds);
}

TEST_CASE("analytic gradients agree with finite differences") {
  int configs = 0;
  for (std::size_t n : {2, 4, 16}) {
    for (std::size_t d : {4, 32}) {
      for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        const Batch batch = random_batch(n, d, seed * 31 + n + d);
        const AdapterParams params = random_params(d, seed * 7 + n);
        const auto c = contrastive_loss(batch, params);
        const double ce = worst_gradient_error(
            [&](const AdapterParams& p) { return contrastive_loss(batch, p).loss; }, params,
            c.grad);
        CHECK_MESSAGE(ce < 1e-4, "contrastive n=" << n << " d=" << d << " seed=" << seed);

        Rng rng(seed);
        const auto neg = sample_hard_negatives(c.image_to_text, c.text_to_image, rng);
        const auto m = match_loss(batch, neg, params);
        const double me = worst_gradient_error(
            [&](const AdapterParams& p) { return match_loss(batch, neg, p).loss; }, params,
            m.grad);
        CHECK_MESSAGE(me < 1e-4, "match n=" << n << " d=" << d << " seed=" << seed);
        ++configs;
      }
    }
  }
  CHECK(configs >= 20);
}

TEST_CASE("hard negative sampling") {
  DenseMatrix two(2, 2);
  two(0, 0) = 0.9;
  two(0, 1) = 0.1;
  two(1, 0) = 0.2;
  two(1, 1) = 0.8;
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto neg = sample_hard_negatives(two, two, rng);
    CHECK(neg.text_for_image == std::vector<std::size_t>{1, 0});
    CHECK(neg.image_for_text == std::vector<std::size_t>{1, 0});
  }

  // Row [0.5, 0.4, 0.1]: off-diagonal mass 0.4 : 0.1 -> 0.8 : 0.2.
  DenseMatrix probs(3, 3);
  const double row[3] = {0.5, 0.4, 0.1};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) probs(i, j) = row[j];
  }
  Rng mc(2024);
  int picked_one = 0;
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    const auto neg = sample_hard_negatives(probs, probs, mc);
    CHECK(neg.text_for_image[0] != 0);
    if (neg.text_for_image[0] == 1) ++picked_one;
  }
  CHECK(std::abs(picked_one / static_cast<double>(kDraws) - 0.8) <= 0.02);

  Rng a(99);
  Rng b(99);
  const auto c = contrastive_loss(random_batch(8, 6, 3), AdapterParams::identity(6));
  const auto na = sample_hard_negatives(c.image_to_text, c.text_to_image, a);
  const auto nb = sample_hard_negatives(c.image_to_text, c.text_to_image, b);
  CHECK(na.text_for_image == nb.text_for_image);
  CHECK(na.image_for_text == nb.image_for_text);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(na.text_for_image[i] != i);
    CHECK(na.image_for_text[i] != i);
  }

  DenseMatrix tiny(1, 1);
  CHECK(code_of([&] { sample_hard_negatives(tiny, tiny, a); }) == ErrorCode::kBatchTooSmall);
}

TEST_CASE("contrastive loss is invariant to batch permutation") {
  const auto images = random_unit_rows(9, 5, 12);
  const auto texts = random_unit_rows(9, 5, 13);
  const auto params = random_params(5, 4);
  const double base = contrastive_loss(batch_from(texts, images), params).loss;

  PairList shuffled = diagonal_pairs(9);
  Rng rng(8);
  rng.shuffle(std::span(shuffled));
  const double permuted = contrastive_loss(make_batch(texts, images, shuffled), params).loss;
  CHECK(std::abs(base - permuted) <= 1e-12);
}

TEST_CASE("train_adapter") {
  SynthConfig synth;
  synth.n_identities = 48;
  synth.dim = 8;
  synth.noise_sigma = 0.3;
  synth.seed = 4;
  const auto ds = generate_synthetic(synth);
  PairList pairs;
  for (std::uint32_t q = 0; q < 48; ++q) pairs.emplace_back(q, ds.manifest.ground_truth[q]);

  TrainConfig cfg;
  cfg.seed = 3;

  SUBCASE("zero epochs returns the identity adapter") {
    cfg.epochs = 0;
    const auto r = train_adapter(ds.queries, ds.gallery, pairs, cfg);
    const auto id = AdapterParams::identity(8);
    CHECK(r.params.w_text == id.w_text);
    CHECK(r.params.w_image == id.w_image);
    CHECK(r.trace.size() == 1);
  }

  SUBCASE("same seed yields identical parameter files") {
    cfg.epochs = 2;
    TempDir dir;
    save_adapter(train_adapter(ds.queries, ds.gallery, pairs, cfg).params, dir / "a.bin");
    save_adapter(train_adapter(ds.queries, ds.gallery, pairs, cfg).params, dir / "b.bin");
    CHECK(covsearch::testing::read_bytes(dir / "a.bin") ==
          covsearch::testing::read_bytes(dir / "b.bin"));
  }

  SUBCASE("loss decreases") {
    cfg.epochs = 5;
    cfg.step_size = 1e-2;
    const auto r = train_adapter(ds.queries, ds.gallery, pairs, cfg);
    REQUIRE(r.trace.size() == 6);
    CHECK(r.trace.back().total < r.trace.front().total);
    for (const auto& row : r.trace) {
      CHECK(row.total == doctest::Approx(row.contrastive + row.lambda_match * row.match));
    }
  }

  SUBCASE("invalid configs") {
    TrainConfig bad = cfg;
    bad.batch_size = 1;
    CHECK(code_of([&] { train_adapter(ds.queries, ds.gallery, pairs, bad); }) ==
          ErrorCode::kInvalidConfig);
    bad = cfg;
    bad.step_size = 0.0;
    CHECK(code_of([&] { train_adapter(ds.queries, ds.gallery, pairs, bad); }) ==
          ErrorCode::kInvalidConfig);
    const PairList one = {{0, 0}};
    CHECK(code_of([&] { train_adapter(ds.queries, ds.gallery, one, cfg); }) ==
          ErrorCode::kBatchTooSmall);
  }
}

TEST_CASE("apply_adapter") {
  const auto m = random_unit_rows(10, 6, 5);
  const auto id = AdapterParams::identity(6);
  const auto same = apply_adapter(m, id, Side::kText);
  CHECK(same.data == m.data);

  AdapterParams twice = id;
  for (auto& w : twice.w_image) w *= 2.0;
  CHECK(apply_adapter(m, twice, Side::kImage).data == m.data);

  // Identity adapter leaves the downstream ranking untouched.
  const auto g = random_unit_rows(12, 6, 6);
  CHECK(top_k(similarity_matrix(apply_adapter(m, id, Side::kText),
                                apply_adapter(g, id, Side::kImage)),
              5) == top_k(similarity_matrix(m, g), 5));

  const auto rotated = apply_adapter(m, random_params(6, 1), Side::kText);
  CHECK(rotated.normalized);
  CHECK_NOTHROW(require_normalized(rotated, "adapted"));

  CHECK(code_of([&] { apply_adapter(m, AdapterParams::identity(5), Side::kText); }) ==
        ErrorCode::kDimensionMismatch);

  AdapterParams zero = id;
  std::fill(zero.w_text.begin(), zero.w_text.end(), 0.0);
  CHECK(code_of([&] { apply_adapter(m, zero, Side::kText); }) == ErrorCode::kZeroVector);
}

TEST_CASE("adapter files") {
  TempDir dir;
  const auto p = random_params(5, 9);
  save_adapter(p, dir / "f64.bin", ParamPrecision::kFloat64);
  const auto back = load_adapter(dir / "f64.bin");
  CHECK(back.dim == 5);
  CHECK(back.w_text == p.w_text);
  CHECK(back.w_image == p.w_image);
  CHECK(back.match_scale == p.match_scale);
  CHECK(back.match_bias == p.match_bias);
  CHECK(back.temperature == p.temperature);

  save_adapter(p, dir / "f32.bin", ParamPrecision::kFloat32);
  const auto narrow = load_adapter(dir / "f32.bin");
  for (std::size_t i = 0; i < p.w_text.size(); ++i) {
    CHECK(narrow.w_text[i] == static_cast<double>(static_cast<float>(p.w_text[i])));
  }
  CHECK(std::filesystem::file_size(dir / "f32.bin") < std::filesystem::file_size(dir / "f64.bin"));

  auto bytes = covsearch::testing::read_bytes(dir / "f64.bin");
  covsearch::testing::write_bytes(dir / "short.bin", bytes.substr(0, bytes.size() - 3));
  CHECK(code_of([&] { load_adapter(dir / "short.bin"); }) == ErrorCode::kParseError);
  bytes[0] = 'X';
  covsearch::testing::write_bytes(dir / "magic.bin", bytes);
  CHECK(code_of([&] { load_adapter(dir / "magic.bin"); }) == ErrorCode::kParseError);
  CHECK(code_of([&] { load_adapter(dir / "none.bin"); }) == ErrorCode::kMissingFile);
}
