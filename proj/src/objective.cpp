#include "covsearch/objective.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "covsearch/error.hpp"

namespace covsearch {
namespace {

using PairSpan = std::span<const std::pair<std::uint32_t, std::uint32_t>>;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double dot(const double* a, const double* b, std::size_t d) {
  double acc = 0.0;
  for (std::size_t k = 0; k < d; ++k) acc += a[k] * b[k];
  return acc;
}

// Rows of x mapped through W and rescaled to unit length.
struct Projection {
  DenseMatrix unit;
  std::vector<double> norms;
};

Projection project(const DenseMatrix& x, const std::vector<double>& w) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  Projection p{DenseMatrix(n, d), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = &x.data[i * d];
    double* ui = &p.unit.data[i * d];
    for (std::size_t r = 0; r < d; ++r) ui[r] = dot(&w[r * d], xi, d);
    const double norm = std::sqrt(dot(ui, ui, d));
    if (!(norm > kZeroNormThreshold)) {
      throw Error(ErrorCode::kZeroVector,
                  "adapter projection collapses batch row " + std::to_string(i));
    }
    for (std::size_t r = 0; r < d; ++r) ui[r] /= norm;
    p.norms[i] = norm;
  }
  return p;
}

// Pulls d(loss)/d(unit rows) back through the normalization and W into dW.
void backprop_projection(const DenseMatrix& x, const Projection& p,
                         const DenseMatrix& grad_unit, std::vector<double>& grad_w) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  std::vector<double> grad_raw(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ui = &p.unit.data[i * d];
    const double* gi = &grad_unit.data[i * d];
    const double radial = dot(ui, gi, d);
    for (std::size_t r = 0; r < d; ++r) grad_raw[r] = (gi[r] - radial * ui[r]) / p.norms[i];
    const double* xi = &x.data[i * d];
    for (std::size_t r = 0; r < d; ++r) {
      double* row = &grad_w[r * d];
      for (std::size_t c = 0; c < d; ++c) row[c] += grad_raw[r] * xi[c];
    }
  }
}

DenseMatrix pairwise_cosines(const DenseMatrix& images, const DenseMatrix& texts) {
  const std::size_t n = images.rows;
  const std::size_t d = images.cols;
  DenseMatrix sims(n, texts.rows);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < texts.rows; ++j) {
      sims(i, j) = dot(&images.data[i * d], &texts.data[j * d], d);
    }
  }
  return sims;
}

void require_finite(const DenseMatrix& m, const char* what) {
  for (const double v : m.data) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, std::string(what) + " is not finite");
  }
}

void check_batch(const Batch& batch) {
  if (batch.images.rows != batch.texts.rows || batch.images.cols != batch.texts.cols) {
    throw Error(ErrorCode::kDimensionMismatch, "image and text batch shapes differ");
  }
}

void check_params(const AdapterParams& params, std::size_t dim) {
  if (params.dim != dim) {
    throw Error(ErrorCode::kDimensionMismatch, "adapter dim " + std::to_string(params.dim) +
                                                   " != embedding dim " + std::to_string(dim));
  }
  params.validate();
}

bool all_finite(const AdapterGradients& g) {
  auto finite = [](double v) { return std::isfinite(v); };
  return std::all_of(g.w_text.begin(), g.w_text.end(), finite) &&
         std::all_of(g.w_image.begin(), g.w_image.end(), finite) && finite(g.match_scale) &&
         finite(g.match_bias) && finite(g.temperature);
}

// Scalar c > 0 with W == c * I exactly, or 0.
double scalar_identity_factor(const std::vector<double>& w, std::size_t d) {
  const double c = w[0];
  if (!(c > 0.0)) return 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t k = 0; k < d; ++k) {
      if (w[r * d + k] != (r == k ? c : 0.0)) return 0.0;
    }
  }
  return c;
}

// Partition of [0, n) into consecutive chunks of `size`; a trailing single
// row is folded into the previous chunk so no pair is dropped.
std::vector<std::pair<std::size_t, std::size_t>> fixed_chunks(std::size_t n, std::size_t size) {
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t begin = 0; begin < n; begin += size) {
    chunks.emplace_back(begin, std::min(n, begin + size));
  }
  if (chunks.size() > 1 && chunks.back().second - chunks.back().first < 2) {
    chunks[chunks.size() - 2].second = chunks.back().second;
    chunks.pop_back();
  }
  return chunks;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 8);
}

std::uint64_t get_le(std::istream& in, int bytes, const std::string& path) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), bytes);
  if (in.gcount() != bytes) throw Error(ErrorCode::kParseError, path + ": truncated adapter file");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

constexpr std::array<char, 4> kAdapterMagic = {'C', 'S', 'A', 'D'};
constexpr std::uint32_t kAdapterVersion = 1;

}  // namespace

Batch make_batch(const EmbeddingMatrix& texts, const EmbeddingMatrix& images, PairSpan pairs) {
  if (texts.dim != images.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "text and image dims differ");
  }
  const std::size_t d = texts.dim;
  Batch batch{DenseMatrix(pairs.size(), d), DenseMatrix(pairs.size(), d)};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [t, g] = pairs[i];
    if (t >= texts.rows || g >= images.rows) {
      throw Error(ErrorCode::kPointerOutOfBounds, "batch pair " + std::to_string(i) +
                                                      " references a missing row");
    }
    const auto trow = texts.row(t);
    const auto grow = images.row(g);
    for (std::size_t k = 0; k < d; ++k) {
      batch.texts(i, k) = trow[k];
      batch.images(i, k) = grow[k];
    }
  }
  return batch;
}

AdapterParams AdapterParams::identity(std::size_t dim) {
  AdapterParams p;
  p.dim = dim;
  p.w_text.assign(dim * dim, 0.0);
  p.w_image.assign(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    p.w_text[i * dim + i] = 1.0;
    p.w_image[i * dim + i] = 1.0;
  }
  return p;
}

void AdapterParams::validate() const {
  if (w_text.size() != dim * dim || w_image.size() != dim * dim) {
    throw Error(ErrorCode::kDimensionMismatch, "adapter matrices are not dim x dim");
  }
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(w_text.begin(), w_text.end(), finite) ||
      !std::all_of(w_image.begin(), w_image.end(), finite) || !finite(match_scale) ||
      !finite(match_bias) || !finite(temperature)) {
    throw Error(ErrorCode::kNonFinite, "adapter parameters contain non-finite values");
  }
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "temperature must be > 0");
  }
}

AdapterGradients& AdapterGradients::operator+=(const AdapterGradients& other) {
  for (std::size_t i = 0; i < w_text.size(); ++i) w_text[i] += other.w_text[i];
  for (std::size_t i = 0; i < w_image.size(); ++i) w_image[i] += other.w_image[i];
  match_scale += other.match_scale;
  match_bias += other.match_bias;
  temperature += other.temperature;
  return *this;
}

AdapterGradients& AdapterGradients::operator*=(double factor) {
  for (auto& v : w_text) v *= factor;
  for (auto& v : w_image) v *= factor;
  match_scale *= factor;
  match_bias *= factor;
  temperature *= factor;
  return *this;
}

DenseMatrix inbatch_softmax(const DenseMatrix& sims, Direction direction, double temperature) {
  if (sims.rows < 1 || sims.rows != sims.cols) {
    throw Error(ErrorCode::kBatchTooSmall, "in-batch similarity matrix must be square, N >= 1");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kInvalidConfig, "temperature must be finite and > 0");
  }
  require_finite(sims, "similarity matrix");

  const std::size_t n = sims.rows;
  DenseMatrix out(n, n);
  const bool transpose = direction == Direction::kTextToImage;
  for (std::size_t a = 0; a < n; ++a) {
    auto logit = [&](std::size_t b) {
      return (transpose ? sims(b, a) : sims(a, b)) / temperature;
    };
    double max_logit = logit(0);
    for (std::size_t b = 1; b < n; ++b) max_logit = std::max(max_logit, logit(b));
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      out(a, b) = std::exp(logit(b) - max_logit);
      total += out(a, b);
    }
    for (std::size_t b = 0; b < n; ++b) out(a, b) /= total;
  }
  return out;
}

ContrastiveResult contrastive_loss(const Batch& batch, const AdapterParams& params) {
  check_batch(batch);
  const std::size_t n = batch.size();
  const std::size_t d = batch.dim();
  if (n < 2) throw Error(ErrorCode::kBatchTooSmall, "contrastive loss needs N >= 2");
  check_params(params, d);
  require_finite(batch.images, "image batch");
  require_finite(batch.texts, "text batch");

  const Projection img = project(batch.images, params.w_image);
  const Projection txt = project(batch.texts, params.w_text);

  ContrastiveResult result;
  result.sims = pairwise_cosines(img.unit, txt.unit);
  const double tau = params.temperature;
  result.image_to_text = inbatch_softmax(result.sims, Direction::kImageToText, tau);
  result.text_to_image = inbatch_softmax(result.sims, Direction::kTextToImage, tau);

  // -log softmax at the diagonal, via log-sum-exp in both directions.
  double loss = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double row_max = -INFINITY;
    double col_max = -INFINITY;
    for (std::size_t b = 0; b < n; ++b) {
      row_max = std::max(row_max, result.sims(a, b) / tau);
      col_max = std::max(col_max, result.sims(b, a) / tau);
    }
    double row_sum = 0.0;
    double col_sum = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      row_sum += std::exp(result.sims(a, b) / tau - row_max);
      col_sum += std::exp(result.sims(b, a) / tau - col_max);
    }
    const double diag = result.sims(a, a) / tau;
    loss += (row_max + std::log(row_sum) - diag) + (col_max + std::log(col_sum) - diag);
  }
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  result.loss = loss * scale;

  // d(loss)/d(logit_ij) = scale * (A_ij + B_ji - 2 * [i == j]).
  DenseMatrix grad_img(n, d);
  DenseMatrix grad_txt(n, d);
  double grad_tau = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double target = i == j ? 2.0 : 0.0;
      const double g_logit =
          scale * (result.image_to_text(i, j) + result.text_to_image(j, i) - target);
      grad_tau -= g_logit * result.sims(i, j) / (tau * tau);
      const double g_sim = g_logit / tau;
      for (std::size_t k = 0; k < d; ++k) {
        grad_img(i, k) += g_sim * txt.unit(j, k);
        grad_txt(j, k) += g_sim * img.unit(i, k);
      }
    }
  }

  result.grad = AdapterGradients(d);
  backprop_projection(batch.images, img, grad_img, result.grad.w_image);
  backprop_projection(batch.texts, txt, grad_txt, result.grad.w_text);
  result.grad.temperature = grad_tau;
  if (!std::isfinite(result.loss) || !all_finite(result.grad)) {
    throw Error(ErrorCode::kNonFinite, "contrastive loss or gradient is not finite");
  }
  return result;
}

HardNegatives sample_hard_negatives(const DenseMatrix& image_to_text,
                                    const DenseMatrix& text_to_image, Rng& rng) {
  const std::size_t n = image_to_text.rows;
  if (n < 2) throw Error(ErrorCode::kBatchTooSmall, "hard-negative sampling needs N >= 2");
  if (image_to_text.cols != n || text_to_image.rows != n || text_to_image.cols != n) {
    throw Error(ErrorCode::kDimensionMismatch, "softmax matrices must both be N x N");
  }

  auto draw = [&](const DenseMatrix& probs, std::size_t anchor) {
    double mass = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      if (b != anchor) mass += probs(anchor, b);
    }
    if (!(mass > 0.0) || !std::isfinite(mass)) {
      // Degenerate row: fall back to a uniform off-diagonal draw.
      const std::size_t pick = static_cast<std::size_t>(rng.below(n - 1));
      return pick < anchor ? pick : pick + 1;
    }
    const double target = rng.uniform() * mass;
    double cumulative = 0.0;
    std::size_t last = anchor;
    for (std::size_t b = 0; b < n; ++b) {
      if (b == anchor) continue;
      cumulative += probs(anchor, b);
      last = b;
      if (target < cumulative) return b;
    }
    return last;
  };

  HardNegatives out;
  out.text_for_image.resize(n);
  out.image_for_text.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.text_for_image[i] = draw(image_to_text, i);
  for (std::size_t j = 0; j < n; ++j) out.image_for_text[j] = draw(text_to_image, j);
  return out;
}

LossResult match_loss(const Batch& batch, const HardNegatives& negatives,
                      const AdapterParams& params) {
  check_batch(batch);
  const std::size_t n = batch.size();
  const std::size_t d = batch.dim();
  check_params(params, d);
  if (negatives.text_for_image.size() != n || negatives.image_for_text.size() != n) {
    throw Error(ErrorCode::kDimensionMismatch, "negative index vectors must have length N");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (negatives.text_for_image[i] >= n || negatives.image_for_text[i] >= n) {
      throw Error(ErrorCode::kPointerOutOfBounds, "negative index outside the batch");
    }
  }

  const Projection img = project(batch.images, params.w_image);
  const Projection txt = project(batch.texts, params.w_text);

  struct Scored {
    std::size_t image;
    std::size_t text;
    double label;
  };
  std::vector<Scored> pairs;
  pairs.reserve(3 * n);
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({i, i, 1.0});
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({i, negatives.text_for_image[i], 0.0});
  for (std::size_t j = 0; j < n; ++j) pairs.push_back({negatives.image_for_text[j], j, 0.0});

  const double inv_count = 1.0 / static_cast<double>(pairs.size());
  LossResult result;
  result.grad = AdapterGradients(d);
  DenseMatrix grad_img(n, d);
  DenseMatrix grad_txt(n, d);
  double loss = 0.0;
  for (const auto& p : pairs) {
    const double cosine = dot(&img.unit.data[p.image * d], &txt.unit.data[p.text * d], d);
    const double logit = params.match_scale * cosine + params.match_bias;
    loss += p.label > 0.5 ? softplus(-logit) : softplus(logit);
    const double g_logit = (sigmoid(logit) - p.label) * inv_count;
    result.grad.match_scale += g_logit * cosine;
    result.grad.match_bias += g_logit;
    const double g_cos = g_logit * params.match_scale;
    for (std::size_t k = 0; k < d; ++k) {
      grad_img(p.image, k) += g_cos * txt.unit(p.text, k);
      grad_txt(p.text, k) += g_cos * img.unit(p.image, k);
    }
  }
  result.loss = loss * inv_count;
  backprop_projection(batch.images, img, grad_img, result.grad.w_image);
  backprop_projection(batch.texts, txt, grad_txt, result.grad.w_text);
  if (!std::isfinite(result.loss) || !all_finite(result.grad)) {
    throw Error(ErrorCode::kNonFinite, "match loss or gradient is not finite");
  }
  return result;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 2");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) {
    throw Error(ErrorCode::kInvalidConfig, "step_size must be finite and > 0");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw Error(ErrorCode::kInvalidConfig, "weight_decay must be finite and >= 0");
  }
  if (!(head_step_multiplier > 0.0) || !std::isfinite(head_step_multiplier)) {
    throw Error(ErrorCode::kInvalidConfig, "head_step_multiplier must be finite and > 0");
  }
  if (!(lambda_match >= 0.0) || !std::isfinite(lambda_match)) {
    throw Error(ErrorCode::kInvalidConfig, "lambda_match must be finite and >= 0");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kInvalidConfig, "temperature must be finite and > 0");
  }
}

LossBreakdown evaluate_loss(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                            PairSpan pairs, const AdapterParams& params,
                            const TrainConfig& cfg) {
  if (pairs.size() < 2) throw Error(ErrorCode::kBatchTooSmall, "need at least 2 pairs");
  Rng rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  double contrastive = 0.0;
  double match = 0.0;
  for (const auto& [begin, end] : fixed_chunks(pairs.size(), cfg.batch_size)) {
    const Batch batch = make_batch(texts, images, pairs.subspan(begin, end - begin));
    const ContrastiveResult con = contrastive_loss(batch, params);
    const HardNegatives neg = sample_hard_negatives(con.image_to_text, con.text_to_image, rng);
    const LossResult m = match_loss(batch, neg, params);
    const double weight = static_cast<double>(end - begin);
    contrastive += weight * con.loss;
    match += weight * m.loss;
  }
  const double count = static_cast<double>(pairs.size());
  LossBreakdown out;
  out.contrastive = contrastive / count;
  out.match = match / count;
  out.lambda_match = cfg.lambda_match;
  out.total = out.contrastive + cfg.lambda_match * out.match;
  return out;
}

TrainResult train_adapter(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                          PairSpan pairs, const TrainConfig& cfg) {
  cfg.validate();
  if (texts.dim != images.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "text and image dims differ");
  }
  require_normalized(texts, "text");
  require_normalized(images, "image");
  if (pairs.size() < 2) throw Error(ErrorCode::kBatchTooSmall, "need at least 2 training pairs");

  const std::size_t d = texts.dim;
  TrainResult result;
  result.params = AdapterParams::identity(d);
  result.params.temperature = cfg.temperature;
  result.trace.push_back(evaluate_loss(texts, images, pairs, result.params, cfg));
  if (cfg.epochs == 0) return result;

  std::vector<std::pair<std::uint32_t, std::uint32_t>> order(pairs.begin(), pairs.end());
  const std::size_t full = order.size() / cfg.batch_size;
  const std::size_t per_epoch = full + (order.size() % cfg.batch_size >= 2 ? 1 : 0);
  const double total_steps = static_cast<double>(per_epoch * cfg.epochs);

  Rng rng(cfg.seed);
  AdapterParams& params = result.params;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const auto slice = std::span<const std::pair<std::uint32_t, std::uint32_t>>(order).subspan(
          begin, end - begin);
      const Batch batch = make_batch(texts, images, slice);

      AdapterGradients grad(d);
      try {
        ContrastiveResult con = contrastive_loss(batch, params);
        const HardNegatives neg = sample_hard_negatives(con.image_to_text, con.text_to_image, rng);
        LossResult m = match_loss(batch, neg, params);
        m.grad *= cfg.lambda_match;
        grad = std::move(con.grad);
        grad += m.grad;
      } catch (const Error& e) {
        throw Error(e.code(), "epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(b) + ": " + e.what());
      }

      // Linear decay to zero over the run, no warm-up; decoupled weight decay.
      const double lr = cfg.step_size * (1.0 - static_cast<double>(step) / total_steps);
      const double head_lr = lr * cfg.head_step_multiplier;
      for (std::size_t i = 0; i < d * d; ++i) {
        params.w_text[i] -= lr * (grad.w_text[i] + cfg.weight_decay * params.w_text[i]);
        params.w_image[i] -= lr * (grad.w_image[i] + cfg.weight_decay * params.w_image[i]);
      }
      params.match_scale -=
          head_lr * (grad.match_scale + cfg.weight_decay * params.match_scale);
      params.match_bias -= head_lr * grad.match_bias;
      try {
        params.validate();
      } catch (const Error& e) {
        throw Error(ErrorCode::kNonFinite, "epoch " + std::to_string(epoch) + ", step " +
                                               std::to_string(b) + ": parameters diverged");
      }
    }
    result.trace.push_back(evaluate_loss(texts, images, pairs, params, cfg));
  }
  return result;
}

EmbeddingMatrix apply_adapter(const EmbeddingMatrix& m, const AdapterParams& params, Side side) {
  check_params(params, m.dim);
  const auto& w = side == Side::kText ? params.w_text : params.w_image;
  const std::size_t d = m.dim;

  // Cosine is scale invariant, so c * I leaves unit rows untouched bit for bit.
  if (scalar_identity_factor(w, d) > 0.0) {
    return m.normalized ? m : l2_normalize(m);
  }

  EmbeddingMatrix out(m.rows, d);
  std::vector<double> y(d);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const auto x = m.row(i);
    double sq = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += w[r * d + c] * static_cast<double>(x[c]);
      y[r] = acc;
      sq += acc * acc;
    }
    const double norm = std::sqrt(sq);
    if (!(norm > kZeroNormThreshold)) {
      throw Error(ErrorCode::kZeroVector, "adapter projection collapses row " + std::to_string(i));
    }
    auto dst = out.row(i);
    for (std::size_t r = 0; r < d; ++r) dst[r] = static_cast<float>(y[r] / norm);
  }
  out.normalized = true;
  return out;
}

void save_adapter(const AdapterParams& params, const std::filesystem::path& path,
                  ParamPrecision precision) {
  params.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out.write(kAdapterMagic.data(), kAdapterMagic.size());
  put_u32(out, kAdapterVersion);
  put_u32(out, static_cast<std::uint32_t>(precision));
  put_u64(out, params.dim);
  auto put = [&](double v) {
    if (precision == ParamPrecision::kFloat32) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  };
  for (const double v : params.w_text) put(v);
  for (const double v : params.w_image) put(v);
  put(params.match_scale);
  put(params.match_bias);
  put(params.temperature);
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

AdapterParams load_adapter(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open adapter " + path.string());
  const std::string where = path.string();
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kAdapterMagic) {
    throw Error(ErrorCode::kParseError, where + ": not an adapter parameter file");
  }
  const auto version = get_le(in, 4, where);
  if (version != kAdapterVersion) {
    throw Error(ErrorCode::kParseError, where + ": unsupported format version " +
                                            std::to_string(version));
  }
  const auto width = get_le(in, 4, where);
  if (width != 4 && width != 8) {
    throw Error(ErrorCode::kParseError, where + ": bad precision flag " + std::to_string(width));
  }
  const auto dim = get_le(in, 8, where);
  if (dim == 0 || dim > (1u << 16)) {
    throw Error(ErrorCode::kParseError, where + ": implausible dim " + std::to_string(dim));
  }
  auto get = [&]() {
    if (width == 4) {
      return static_cast<double>(
          std::bit_cast<float>(static_cast<std::uint32_t>(get_le(in, 4, where))));
    }
    return std::bit_cast<double>(get_le(in, 8, where));
  };
  AdapterParams p;
  p.dim = static_cast<std::size_t>(dim);
  p.w_text.resize(p.dim * p.dim);
  p.w_image.resize(p.dim * p.dim);
  for (auto& v : p.w_text) v = get();
  for (auto& v : p.w_image) v = get();
  p.match_scale = get();
  p.match_bias = get();
  p.temperature = get();
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::kParseError, where + ": trailing bytes after parameters");
  }
  p.validate();
  return p;
}

void write_trace(const std::filesystem::path& path, std::span<const LossBreakdown> trace,
                 const std::string& header_json) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  if (!header_json.empty()) out << "# config: " << header_json << '\n';
  char buf[128];
  for (std::size_t e = 0; e < trace.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.17g\t%.17g\t%.17g\n", e, trace[e].contrastive,
                  trace[e].match, trace[e].total);
    out << buf;
  }
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

}  // namespace covsearch
