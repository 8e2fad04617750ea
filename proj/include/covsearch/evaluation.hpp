#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "covsearch/similarity.hpp"
#include "json.hpp"

namespace covsearch {

// Recall@k with one relevant gallery item per query: the fraction of
// queries whose ground-truth id is among their first k entries.
struct EvalReport {
  std::string dataset;
  std::vector<std::size_t> k_values;  // ascending, distinct
  std::map<std::size_t, double> recall;
  std::map<std::size_t, std::size_t> hits;
  std::size_t n_queries = 0;
  // Echo of the run configuration (temperature, lambda_match, SCA policy,
  // seed, ...); stored verbatim in the report.
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::string timestamp;
};

// ground_truth[query_id] = gallery_id.
EvalReport recall_at_k(std::span<const RankedList> lists,
                       std::span<const std::uint32_t> ground_truth,
                       std::span<const std::size_t> ks, std::string dataset = {});

struct DeltaRow {
  std::size_t k = 0;
  double before = 0.0;
  double after = 0.0;
  double delta = 0.0;
  // delta / before; 0 when before is 0.
  double relative = 0.0;
  bool regression = false;
};

struct DeltaReport {
  std::string dataset;
  std::vector<DeltaRow> rows;

  bool any_regression() const;
};

DeltaReport compare_reports(const EvalReport& before, const EvalReport& after);

// Percentages with two decimals, one column per k:
//   Method     R@1    R@5   R@10
std::string render_delta_table(const DeltaReport& delta, const std::string& before_label,
                               const std::string& after_label);

// Stable field order so report diffs stay meaningful.
nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json delta_to_json(const DeltaReport& delta);

void save_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

// Percent value rounded to two decimals, e.g. 0.77864 -> 77.86.
double to_percent(double fraction);

}  // namespace covsearch
