#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "covsearch/embedding_store.hpp"
#include "covsearch/error.hpp"
#include "covsearch/evaluation.hpp"
#include "covsearch/objective.hpp"
#include "covsearch/sca.hpp"
#include "covsearch/similarity.hpp"

namespace py = pybind11;
using namespace covsearch;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IdArray = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>;

EmbeddingMatrix to_matrix(const FloatArray& a, bool normalized) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  EmbeddingMatrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::memcpy(m.data.data(), a.data(), m.data.size() * sizeof(float));
  m.normalized = normalized;
  return m;
}

FloatArray to_array(const EmbeddingMatrix& m) {
  FloatArray out({m.rows, m.dim});
  std::memcpy(out.mutable_data(), m.data.data(), m.data.size() * sizeof(float));
  return out;
}

SimilarityMatrix to_sims(const FloatArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D similarity matrix");
  SimilarityMatrix s(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::memcpy(s.data.data(), a.data(), s.data.size() * sizeof(float));
  return s;
}

// (ids, scores) arrays of shape (n_queries, k) -> ranked lists.
std::vector<RankedList> to_lists(const IdArray& ids, const FloatArray& scores) {
  if (ids.ndim() != 2 || scores.ndim() != 2 || ids.shape(0) != scores.shape(0) ||
      ids.shape(1) != scores.shape(1)) {
    throw py::value_error("ids and scores must be 2-D arrays of the same shape");
  }
  const auto rows = static_cast<std::size_t>(ids.shape(0));
  const auto k = static_cast<std::size_t>(ids.shape(1));
  std::vector<RankedList> lists(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    lists[i].query_id = static_cast<std::uint32_t>(i);
    for (std::size_t r = 0; r < k; ++r) {
      const std::int64_t g = ids.at(i, r);
      if (g < 0) throw py::value_error("gallery ids must be non-negative");
      lists[i].entries.push_back({static_cast<std::uint32_t>(g), scores.at(i, r)});
    }
  }
  return lists;
}

std::pair<IdArray, FloatArray> from_lists(const std::vector<RankedList>& lists) {
  const std::size_t rows = lists.size();
  const std::size_t k = rows ? lists.front().entries.size() : 0;
  IdArray ids({rows, k});
  FloatArray scores({rows, k});
  auto id = ids.mutable_unchecked<2>();
  auto sc = scores.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t r = 0; r < k; ++r) {
      id(i, r) = lists[i].entries[r].gallery_id;
      sc(i, r) = lists[i].entries[r].score;
    }
  }
  return {ids, scores};
}

std::vector<std::uint32_t> to_ids(const IdArray& a) {
  std::vector<std::uint32_t> out;
  out.reserve(static_cast<std::size_t>(a.size()));
  for (py::ssize_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] < 0) throw py::value_error("ids must be non-negative");
    out.push_back(static_cast<std::uint32_t>(a.data()[i]));
  }
  return out;
}

Batch to_batch(const FloatArray& images, const FloatArray& texts) {
  const EmbeddingMatrix img = to_matrix(images, true);
  const EmbeddingMatrix txt = to_matrix(texts, true);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  for (std::uint32_t i = 0; i < img.rows; ++i) pairs.emplace_back(i, i);
  return make_batch(txt, img, pairs);
}

AdapterParams head_params(std::size_t dim, double scale, double bias, double temperature) {
  AdapterParams p = AdapterParams::identity(dim);
  p.match_scale = scale;
  p.match_bias = bias;
  p.temperature = temperature;
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Exact cosine retrieval, alignment losses and similarity coverage analysis";

  static py::exception<Error> error_type(m, "CovsearchError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type.ptr())(e.what());
      exc.attr("code") = ErrorCodeName(e.code());
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  m.def("l2_normalize",
        [](const FloatArray& x) { return to_array(l2_normalize(to_matrix(x, false))); },
        py::arg("x"), "Scale every row to unit L2 norm.");

  m.def("similarity_matrix",
        [](const FloatArray& q, const FloatArray& g, std::size_t threads) {
          const auto s = similarity_matrix(to_matrix(q, true), to_matrix(g, true), {threads});
          FloatArray out({s.rows, s.cols});
          std::memcpy(out.mutable_data(), s.data.data(), s.data.size() * sizeof(float));
          return out;
        },
        py::arg("queries"), py::arg("gallery"), py::arg("threads") = 0,
        "Cosine scores of unit-norm rows; raises NotNormalized otherwise.");

  m.def("top_k",
        [](const FloatArray& sims, std::size_t k) { return from_lists(top_k(to_sims(sims), k)); },
        py::arg("sims"), py::arg("k"),
        "Per-row top-k as (ids, scores), ties broken by lower gallery id.");

  m.def("recall_at_k",
        [](const IdArray& ids, const IdArray& ground_truth, const std::vector<std::size_t>& ks) {
          FloatArray scores({ids.shape(0), ids.ndim() == 2 ? ids.shape(1) : 0});
          std::fill(scores.mutable_data(), scores.mutable_data() + scores.size(), 0.0f);
          const auto gt = to_ids(ground_truth);
          return recall_at_k(to_lists(ids, scores), gt, ks).recall;
        },
        py::arg("ids"), py::arg("ground_truth"), py::arg("ks"));

  m.def("resolve",
        [](const IdArray& ids, const FloatArray& scores, std::size_t depth,
           std::optional<std::size_t> max_rounds) {
          ResolutionPolicy policy;
          policy.depth = depth;
          policy.max_rounds = max_rounds;
          const Resolution r = resolve(to_lists(ids, scores), policy);
          auto [out_ids, out_scores] = from_lists(r.as_ranked_lists());
          py::list audit;
          for (const auto& a : r.audit) {
            audit.append(py::make_tuple(a.round, a.answer_id, a.winner, a.loser, a.delta_s));
          }
          py::dict out;
          out["ids"] = out_ids;
          out["scores"] = out_scores;
          out["audit"] = audit;
          out["unresolved"] = r.unresolved;
          out["rounds"] = r.rounds;
          return out;
        },
        py::arg("ids"), py::arg("scores"), py::arg("depth") = 1,
        py::arg("max_rounds") = py::none(),
        "Similarity coverage analysis over ranked lists (query i = row i).");

  m.def("assignment",
        [](const FloatArray& sims, bool exhaustive) {
          const auto s = to_sims(sims);
          const Assignment a = exhaustive ? assignment_exhaustive(s) : assignment_hungarian(s);
          return py::make_tuple(a.gallery_for_query, a.total);
        },
        py::arg("sims"), py::arg("exhaustive") = false,
        "Optimal one-to-one assignment as (gallery_for_query, total).");

  m.def("contrastive_loss",
        [](const FloatArray& images, const FloatArray& texts, double temperature) {
          const Batch b = to_batch(images, texts);
          return contrastive_loss(b, head_params(b.dim(), 10.0, 0.0, temperature)).loss;
        },
        py::arg("images"), py::arg("texts"), py::arg("temperature") = 1.0,
        "Symmetric in-batch contrastive loss with identity projections.");

  m.def("match_loss",
        [](const FloatArray& images, const FloatArray& texts,
           const std::vector<std::size_t>& text_for_image,
           const std::vector<std::size_t>& image_for_text, double scale, double bias) {
          const Batch b = to_batch(images, texts);
          return match_loss(b, {text_for_image, image_for_text},
                            head_params(b.dim(), scale, bias, 1.0))
              .loss;
        },
        py::arg("images"), py::arg("texts"), py::arg("text_for_image"),
        py::arg("image_for_text"), py::arg("scale") = 10.0, py::arg("bias") = 0.0);

  m.def("generate_synthetic",
        [](std::size_t identities, std::size_t dim, double sigma, double confusable_fraction,
           double confusable_gap, std::uint64_t seed) {
          SynthConfig cfg;
          cfg.n_identities = identities;
          cfg.dim = dim;
          cfg.noise_sigma = sigma;
          cfg.confusable_fraction = confusable_fraction;
          cfg.confusable_gap = confusable_gap;
          cfg.seed = seed;
          const auto ds = generate_synthetic(cfg);
          const std::vector<std::int64_t> ids(ds.manifest.ground_truth.begin(),
                                              ds.manifest.ground_truth.end());
          IdArray gt(static_cast<py::ssize_t>(ids.size()), ids.data());
          return py::make_tuple(to_array(ds.queries), to_array(ds.gallery), gt);
        },
        py::arg("identities") = 64, py::arg("dim") = 32, py::arg("sigma") = 0.4,
        py::arg("confusable_fraction") = 0.0, py::arg("confusable_gap") = 0.02,
        py::arg("seed") = 0, "Seeded synthetic (queries, gallery, ground_truth).");

  m.def("train_adapter",
        [](const FloatArray& texts, const FloatArray& images, const IdArray& ground_truth,
           std::size_t epochs, std::size_t batch_size, double step_size, double weight_decay,
           double lambda_match, double temperature, std::uint64_t seed) {
          TrainConfig cfg;
          cfg.epochs = epochs;
          cfg.batch_size = batch_size;
          cfg.step_size = step_size;
          cfg.weight_decay = weight_decay;
          cfg.lambda_match = lambda_match;
          cfg.temperature = temperature;
          cfg.seed = seed;
          const auto gt = to_ids(ground_truth);
          std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
          for (std::uint32_t q = 0; q < gt.size(); ++q) pairs.emplace_back(q, gt[q]);
          const auto r = train_adapter(to_matrix(texts, true), to_matrix(images, true), pairs, cfg);
          const std::size_t d = r.params.dim;
          DoubleArray w_text({d, d});
          DoubleArray w_image({d, d});
          std::memcpy(w_text.mutable_data(), r.params.w_text.data(), d * d * sizeof(double));
          std::memcpy(w_image.mutable_data(), r.params.w_image.data(), d * d * sizeof(double));
          std::vector<double> trace;
          for (const auto& row : r.trace) trace.push_back(row.total);
          py::dict out;
          out["w_text"] = w_text;
          out["w_image"] = w_image;
          out["match_scale"] = r.params.match_scale;
          out["match_bias"] = r.params.match_bias;
          out["trace"] = trace;
          return out;
        },
        py::arg("texts"), py::arg("images"), py::arg("ground_truth"), py::arg("epochs") = 10,
        py::arg("batch_size") = 16, py::arg("step_size") = 3e-5, py::arg("weight_decay") = 0.01,
        py::arg("lambda_match") = 1.0, py::arg("temperature") = 1.0, py::arg("seed") = 0);
}
