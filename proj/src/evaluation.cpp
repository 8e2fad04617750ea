#include "covsearch/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "covsearch/error.hpp"

namespace covsearch {

using nlohmann::ordered_json;

double to_percent(double fraction) { return std::round(fraction * 10000.0) / 100.0; }

EvalReport recall_at_k(std::span<const RankedList> lists,
                       std::span<const std::uint32_t> ground_truth,
                       std::span<const std::size_t> ks, std::string dataset) {
  if (lists.empty()) throw Error(ErrorCode::kEmptyList, "no ranked lists to evaluate");
  if (ks.empty()) throw Error(ErrorCode::kKOutOfRange, "at least one k is required");

  EvalReport report;
  report.dataset = std::move(dataset);
  report.k_values.assign(ks.begin(), ks.end());
  std::sort(report.k_values.begin(), report.k_values.end());
  report.k_values.erase(std::unique(report.k_values.begin(), report.k_values.end()),
                        report.k_values.end());
  if (report.k_values.front() < 1) throw Error(ErrorCode::kKOutOfRange, "k must be >= 1");
  const std::size_t max_k = report.k_values.back();

  for (const std::size_t k : report.k_values) report.hits[k] = 0;
  for (const auto& list : lists) {
    if (list.query_id >= ground_truth.size()) {
      throw Error(ErrorCode::kMissingGroundTruth,
                  "no ground truth for query " + std::to_string(list.query_id));
    }
    if (list.entries.size() < max_k) {
      throw Error(ErrorCode::kKExceedsDepth,
                  "k=" + std::to_string(max_k) + " exceeds the depth (" +
                      std::to_string(list.entries.size()) + ") of query " +
                      std::to_string(list.query_id));
    }
    const std::uint32_t target = ground_truth[list.query_id];
    const auto it = std::find_if(list.entries.begin(), list.entries.begin() + max_k,
                                 [&](const RankedEntry& e) { return e.gallery_id == target; });
    if (it == list.entries.begin() + max_k) continue;
    const auto rank = static_cast<std::size_t>(it - list.entries.begin()) + 1;
    for (const std::size_t k : report.k_values) {
      if (rank <= k) ++report.hits[k];
    }
  }
  report.n_queries = lists.size();
  for (const std::size_t k : report.k_values) {
    report.recall[k] =
        static_cast<double>(report.hits[k]) / static_cast<double>(report.n_queries);
  }
  return report;
}

bool DeltaReport::any_regression() const {
  return std::any_of(rows.begin(), rows.end(), [](const DeltaRow& r) { return r.regression; });
}

DeltaReport compare_reports(const EvalReport& before, const EvalReport& after) {
  if (before.dataset != after.dataset) {
    throw Error(ErrorCode::kMismatchedRuns,
                "datasets differ: '" + before.dataset + "' vs '" + after.dataset + "'");
  }
  if (before.k_values != after.k_values) {
    throw Error(ErrorCode::kMismatchedRuns, "k values differ between reports");
  }
  DeltaReport delta;
  delta.dataset = before.dataset;
  for (const std::size_t k : before.k_values) {
    DeltaRow row;
    row.k = k;
    row.before = before.recall.at(k);
    row.after = after.recall.at(k);
    row.delta = row.after - row.before;
    row.relative = row.before > 0.0 ? row.delta / row.before : 0.0;
    row.regression = row.delta < 0.0;
    delta.rows.push_back(row);
  }
  return delta;
}

std::string render_delta_table(const DeltaReport& delta, const std::string& before_label,
                               const std::string& after_label) {
  std::size_t label_width = std::max<std::size_t>({6, before_label.size(), after_label.size()});
  std::ostringstream os;
  char buf[64];
  auto label = [&](const std::string& text) {
    os << text << std::string(label_width - text.size(), ' ');
  };
  label("Method");
  for (const auto& row : delta.rows) {
    std::snprintf(buf, sizeof(buf), "%9s", ("R@" + std::to_string(row.k)).c_str());
    os << buf;
  }
  os << '\n';
  label(before_label);
  for (const auto& row : delta.rows) {
    std::snprintf(buf, sizeof(buf), "%9.2f", to_percent(row.before));
    os << buf;
  }
  os << '\n';
  label(after_label);
  for (const auto& row : delta.rows) {
    std::snprintf(buf, sizeof(buf), "%9.2f", to_percent(row.after));
    os << buf;
  }
  os << '\n';
  label("delta");
  for (const auto& row : delta.rows) {
    std::snprintf(buf, sizeof(buf), "%+9.2f", to_percent(row.after) - to_percent(row.before));
    os << buf;
  }
  os << '\n';
  if (delta.any_regression()) os << "REGRESSION\n";
  return os.str();
}

ordered_json report_to_json(const EvalReport& report) {
  ordered_json j;
  j["dataset"] = report.dataset;
  j["n_queries"] = report.n_queries;
  j["k_values"] = report.k_values;
  ordered_json recall = ordered_json::object();
  ordered_json percent = ordered_json::object();
  ordered_json hits = ordered_json::object();
  for (const std::size_t k : report.k_values) {
    recall[std::to_string(k)] = report.recall.at(k);
    percent[std::to_string(k)] = to_percent(report.recall.at(k));
    hits[std::to_string(k)] = report.hits.count(k) ? report.hits.at(k) : 0;
  }
  j["recall"] = std::move(recall);
  j["recall_percent"] = std::move(percent);
  j["hits"] = std::move(hits);
  j["config"] = report.config;
  j["timestamp"] = report.timestamp;
  return j;
}

EvalReport report_from_json(const ordered_json& j) {
  try {
    EvalReport r;
    r.dataset = j.at("dataset").get<std::string>();
    r.n_queries = j.at("n_queries").get<std::size_t>();
    r.k_values = j.at("k_values").get<std::vector<std::size_t>>();
    for (const std::size_t k : r.k_values) {
      r.recall[k] = j.at("recall").at(std::to_string(k)).get<double>();
      if (j.contains("hits")) r.hits[k] = j.at("hits").at(std::to_string(k)).get<std::size_t>();
    }
    if (j.contains("config")) r.config = j.at("config");
    if (j.contains("timestamp")) r.timestamp = j.at("timestamp").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("malformed report: ") + e.what());
  }
}

ordered_json delta_to_json(const DeltaReport& delta) {
  ordered_json j;
  j["dataset"] = delta.dataset;
  ordered_json rows = ordered_json::array();
  for (const auto& row : delta.rows) {
    ordered_json r;
    r["k"] = row.k;
    r["before"] = row.before;
    r["after"] = row.after;
    r["delta"] = row.delta;
    r["relative"] = row.relative;
    r["regression"] = row.regression;
    rows.push_back(std::move(r));
  }
  j["rows"] = std::move(rows);
  j["any_regression"] = delta.any_regression();
  return j;
}

void save_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << report_to_json(report).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open report " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, path.string() + ": " + e.what());
  }
  return report_from_json(j);
}

}  // namespace covsearch
