#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "covsearch/embedding_store.hpp"
#include "covsearch/random.hpp"

namespace covsearch {

// Dense row-major double matrix used for batch-level loss algebra.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

// Row i of images and row i of texts form a positive pair; every other row
// of the opposite modality is an in-batch negative.
struct Batch {
  DenseMatrix images;  // N x d, unit rows
  DenseMatrix texts;   // N x d, unit rows

  std::size_t size() const { return images.rows; }
  std::size_t dim() const { return images.cols; }
};

// Builds a batch from (text_row, image_row) pairs of two normalized matrices.
Batch make_batch(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                 std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs);

// Linear projections applied to frozen embeddings, plus the logistic match
// head: p(match) = sigmoid(match_scale * cosine + match_bias).
struct AdapterParams {
  std::size_t dim = 0;
  std::vector<double> w_text;   // dim x dim, row-major; applied as W * x
  std::vector<double> w_image;  // dim x dim
  double match_scale = 10.0;
  double match_bias = 0.0;
  double temperature = 1.0;

  static AdapterParams identity(std::size_t dim);
  void validate() const;
};

// Same layout as AdapterParams; d(loss)/d(field).
struct AdapterGradients {
  std::vector<double> w_text;
  std::vector<double> w_image;
  double match_scale = 0.0;
  double match_bias = 0.0;
  double temperature = 0.0;

  explicit AdapterGradients(std::size_t dim = 0)
      : w_text(dim * dim, 0.0), w_image(dim * dim, 0.0) {}
  AdapterGradients& operator+=(const AdapterGradients& other);
  AdapterGradients& operator*=(double factor);
};

enum class Direction { kImageToText, kTextToImage };

// sims(i, j) = cosine(image_i, text_j). kImageToText normalizes each row over
// texts; kTextToImage returns row j = softmax over images of column j.
DenseMatrix inbatch_softmax(const DenseMatrix& sims, Direction direction,
                            double temperature);

struct ContrastiveResult {
  double loss = 0.0;
  AdapterGradients grad;
  DenseMatrix sims;           // adapted image x text cosines
  DenseMatrix image_to_text;  // softmax rows per image
  DenseMatrix text_to_image;  // softmax rows per text
};

// Symmetric in-batch cross-entropy against the diagonal, averaged over the
// batch and over both directions.
ContrastiveResult contrastive_loss(const Batch& batch, const AdapterParams& params);

struct HardNegatives {
  std::vector<std::size_t> text_for_image;  // negative text index per image
  std::vector<std::size_t> image_for_text;  // negative image index per text
};

// Draws, per anchor, one off-diagonal candidate with probability proportional
// to its softmax mass (renormalized without the positive).
HardNegatives sample_hard_negatives(const DenseMatrix& image_to_text,
                                    const DenseMatrix& text_to_image, Rng& rng);

struct LossResult {
  double loss = 0.0;
  AdapterGradients grad;
};

// Binary cross-entropy of the match head over N positives and 2N hard
// negatives, averaged over all 3N pairs.
LossResult match_loss(const Batch& batch, const HardNegatives& negatives,
                      const AdapterParams& params);

struct LossBreakdown {
  double contrastive = 0.0;
  double match = 0.0;
  double total = 0.0;
  double lambda_match = 1.0;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double step_size = 3e-5;
  double weight_decay = 0.01;
  // Step-size multiplier for the match head parameters.
  double head_step_multiplier = 2.0;
  double lambda_match = 1.0;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  AdapterParams params;
  // trace[0] is the loss before any update; trace[e] after epoch e.
  std::vector<LossBreakdown> trace;
};

// Full-data loss with a fixed batch partition and fixed negative-sampling
// seed, so values are comparable across epochs.
LossBreakdown evaluate_loss(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                            std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs,
                            const AdapterParams& params, const TrainConfig& cfg);

TrainResult train_adapter(const EmbeddingMatrix& texts, const EmbeddingMatrix& images,
                          std::span<const std::pair<std::uint32_t, std::uint32_t>> pairs,
                          const TrainConfig& cfg);

enum class Side { kText, kImage };

EmbeddingMatrix apply_adapter(const EmbeddingMatrix& m, const AdapterParams& params,
                              Side side);

enum class ParamPrecision : std::uint32_t { kFloat32 = 4, kFloat64 = 8 };

void save_adapter(const AdapterParams& params, const std::filesystem::path& path,
                  ParamPrecision precision = ParamPrecision::kFloat64);
AdapterParams load_adapter(const std::filesystem::path& path);

void write_trace(const std::filesystem::path& path, std::span<const LossBreakdown> trace,
                 const std::string& header_json);

}  // namespace covsearch
