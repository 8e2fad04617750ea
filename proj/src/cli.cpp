#include "covsearch/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "covsearch/embedding_store.hpp"
#include "covsearch/error.hpp"
#include "covsearch/evaluation.hpp"
#include "covsearch/objective.hpp"
#include "covsearch/sca.hpp"
#include "covsearch/similarity.hpp"
#include "json.hpp"

namespace covsearch::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// Raised for argument combinations CLI11 cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ordered_json parse_header(const std::string& text) {
  if (text.empty()) return nullptr;
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

// Walks the chain of embedded stage configs looking for the first value of key.
ordered_json find_in_chain(const ordered_json& config, const std::string& key) {
  if (!config.is_object()) return nullptr;
  if (config.contains(key) && !config[key].is_null()) return config[key];
  if (config.contains("input")) return find_in_chain(config["input"], key);
  return nullptr;
}

struct GenSynthArgs {
  std::string out;
  SynthConfig cfg;
};

struct SearchArgs {
  std::string manifest;
  std::string out;
  std::size_t k = 10;
  std::string adapter;
  std::size_t threads = 0;
};

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::string trace;
  std::string precision = "f64";
  TrainConfig cfg;
};

struct ResolveArgs {
  std::string in;
  std::string out;
  std::string audit;
  std::string manifest;
  std::size_t depth = 1;
  std::optional<std::size_t> max_rounds;
  std::optional<double> gate;
};

struct EvalArgs {
  std::string in;
  std::string manifest;
  std::vector<std::size_t> ks{1, 5, 10};
  std::string out;
  std::string timestamp;
};

struct ReportArgs {
  std::string before;
  std::string after;
  std::string out;
  std::string before_label = "before";
  std::string after_label = "after";
};

std::pair<EmbeddingMatrix, EmbeddingMatrix> load_normalized(const DatasetManifest& m) {
  return {l2_normalize(load_embeddings(m, Split::kQuery)),
          l2_normalize(load_embeddings(m, Split::kGallery))};
}

int do_gen_synth(const GenSynthArgs& a, std::ostream& out) {
  const DatasetManifest m = write_synthetic(a.cfg, a.out);
  out << "wrote " << (fs::path(a.out) / "manifest.json").string() << " (" << m.query_count
      << " queries, " << m.gallery_count << " gallery, dim " << m.dim << ", seed "
      << *m.seed << ")\n";
  return kExitOk;
}

int do_validate(const std::string& manifest, std::ostream& out) {
  const ValidationReport report = validate_dataset(manifest);
  out << report.to_string();
  return report.ok() ? kExitOk : kExitData;
}

int do_search(const SearchArgs& a, std::ostream& out) {
  const DatasetManifest m = load_manifest(a.manifest);
  auto [queries, gallery] = load_normalized(m);

  ordered_json config;
  config["stage"] = "search";
  config["manifest"] = a.manifest;
  config["dataset"] = m.name;
  config["seed"] = m.seed ? ordered_json(*m.seed) : ordered_json(nullptr);
  config["k"] = a.k;
  if (!a.adapter.empty()) {
    const AdapterParams params = load_adapter(a.adapter);
    queries = apply_adapter(queries, params, Side::kText);
    gallery = apply_adapter(gallery, params, Side::kImage);
    config["adapter"] = a.adapter;
    config["temperature"] = params.temperature;
  } else {
    config["adapter"] = nullptr;
    config["temperature"] = nullptr;
  }

  const ParallelOptions parallel{a.threads};
  const auto sims = similarity_matrix(queries, gallery, parallel);
  const auto lists = top_k(sims, a.k, parallel);
  write_ranked_lists(a.out, lists, config.dump());
  out << "wrote " << a.out << " (" << lists.size() << " queries, k=" << a.k << ")\n";
  return kExitOk;
}

int do_train(const TrainArgs& a, std::ostream& out) {
  ParamPrecision precision;
  if (a.precision == "f32") {
    precision = ParamPrecision::kFloat32;
  } else if (a.precision == "f64") {
    precision = ParamPrecision::kFloat64;
  } else {
    throw UsageError("--precision must be f32 or f64");
  }
  const DatasetManifest m = load_manifest(a.manifest);
  const auto [queries, gallery] = load_normalized(m);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  for (std::size_t q = 0; q < m.query_count; ++q) {
    pairs.emplace_back(static_cast<std::uint32_t>(q), m.ground_truth[q]);
  }
  const TrainResult result = train_adapter(queries, gallery, pairs, a.cfg);
  save_adapter(result.params, a.out, precision);

  ordered_json config;
  config["stage"] = "train-adapter";
  config["manifest"] = a.manifest;
  config["dataset"] = m.name;
  config["epochs"] = a.cfg.epochs;
  config["batch_size"] = a.cfg.batch_size;
  config["step_size"] = a.cfg.step_size;
  config["weight_decay"] = a.cfg.weight_decay;
  config["head_step_multiplier"] = a.cfg.head_step_multiplier;
  config["lambda_match"] = a.cfg.lambda_match;
  config["temperature"] = a.cfg.temperature;
  config["seed"] = a.cfg.seed;
  config["precision"] = a.precision;
  if (!a.trace.empty()) write_trace(a.trace, result.trace, config.dump());

  const auto& first = result.trace.front();
  const auto& last = result.trace.back();
  out << "wrote " << a.out << "; total loss " << first.total << " -> " << last.total << " over "
      << a.cfg.epochs << " epochs\n";
  return kExitOk;
}

int do_resolve(const ResolveArgs& a, std::ostream& out) {
  if (a.gate && a.manifest.empty()) {
    throw UsageError("--gate needs --manifest to read query embeddings");
  }
  const RankedFile input = read_ranked_lists(a.in);
  ResolutionPolicy policy;
  policy.depth = a.depth;
  policy.max_rounds = a.max_rounds;
  policy.similarity_gate = a.gate;

  std::optional<EmbeddingMatrix> queries;
  if (!a.manifest.empty()) {
    queries = l2_normalize(load_embeddings(load_manifest(a.manifest), Split::kQuery));
  }
  const Resolution resolution =
      resolve(input.lists, policy, queries ? &*queries : nullptr);

  ordered_json config;
  config["stage"] = "resolve";
  config["input_file"] = a.in;
  ordered_json p;
  p["depth"] = policy.depth;
  p["max_rounds"] = policy.max_rounds ? ordered_json(*policy.max_rounds) : ordered_json(nullptr);
  p["similarity_gate"] =
      policy.similarity_gate ? ordered_json(*policy.similarity_gate) : ordered_json(nullptr);
  p["tie_break"] = "lower_query_id";
  config["sca_policy"] = std::move(p);
  config["input"] = parse_header(input.header_json);
  const std::string header = config.dump();

  write_resolution(a.out, resolution, header);
  if (!a.audit.empty()) write_audit(a.audit, resolution, header);
  out << "wrote " << a.out << " (" << resolution.audit.size() << " replacements over "
      << resolution.rounds << " rounds, " << resolution.unresolved.size() << " unresolved)\n";
  return kExitOk;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  const DatasetManifest m = load_manifest(a.manifest);
  const RankedFile input = read_ranked_lists(a.in);
  EvalReport report = recall_at_k(input.lists, m.ground_truth, a.ks, m.name);

  const ordered_json chain = parse_header(input.header_json);
  ordered_json echo;
  echo["temperature"] = find_in_chain(chain, "temperature");
  echo["lambda_match"] = find_in_chain(chain, "lambda_match");
  echo["sca_policy"] = find_in_chain(chain, "sca_policy");
  echo["seed"] = m.seed ? ordered_json(*m.seed) : find_in_chain(chain, "seed");
  echo["input_file"] = a.in;
  echo["source"] = chain;
  report.config = std::move(echo);
  report.timestamp = a.timestamp;

  if (a.out.empty()) {
    out << report_to_json(report).dump(2) << '\n';
  } else {
    save_report(report, a.out);
    for (const std::size_t k : report.k_values) {
      out << "R@" << k << '\t' << to_percent(report.recall.at(k)) << '\n';
    }
  }
  return kExitOk;
}

int do_report(const ReportArgs& a, std::ostream& out) {
  const EvalReport before = load_report(a.before);
  const EvalReport after = load_report(a.after);
  const DeltaReport delta = compare_reports(before, after);
  out << render_delta_table(delta, a.before_label, a.after_label);
  if (!a.out.empty()) {
    std::ofstream file(a.out, std::ios::binary | std::ios::trunc);
    if (!file) throw Error(ErrorCode::kIoError, "cannot write " + a.out);
    ordered_json j = delta_to_json(delta);
    j["before"] = a.before;
    j["after"] = a.after;
    file << j.dump(2) << '\n';
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal retrieval over precomputed embeddings with similarity coverage "
               "analysis",
               "covsearch"};
  app.require_subcommand(1);

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Write a seeded synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.cfg.seed, "Generator seed")->required();
  gen_cmd->add_option("--name", gen.cfg.name, "Dataset name")->capture_default_str();
  gen_cmd->add_option("--identities", gen.cfg.n_identities, "Number of identities")
      ->capture_default_str();
  gen_cmd->add_option("--dim", gen.cfg.dim, "Embedding dimension")->capture_default_str();
  gen_cmd->add_option("--sigma", gen.cfg.noise_sigma, "Query noise sigma")
      ->capture_default_str();
  gen_cmd->add_option("--confusable-fraction", gen.cfg.confusable_fraction,
                      "Fraction of identities planted as confusable pairs")
      ->capture_default_str();
  gen_cmd->add_option("--confusable-gap", gen.cfg.confusable_gap,
                      "1 - cosine between planted partners")
      ->capture_default_str();

  std::string validate_manifest;
  auto* validate_cmd = app.add_subcommand("validate", "Check a dataset manifest and its files");
  validate_cmd->add_option("--manifest", validate_manifest, "Manifest path")->required();

  SearchArgs search;
  auto* search_cmd = app.add_subcommand("search", "Exact top-k cosine retrieval");
  search_cmd->add_option("--manifest", search.manifest, "Manifest path")->required();
  search_cmd->add_option("--out", search.out, "Ranked-list output file")->required();
  search_cmd->add_option("--k", search.k, "Retrieval depth")->capture_default_str();
  search_cmd->add_option("--adapter", search.adapter, "Adapter parameter file");
  search_cmd->add_option("--threads", search.threads, "Worker threads (0 = all cores)")
      ->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train-adapter", "Fit the linear adapter");
  train_cmd->add_option("--manifest", train.manifest, "Manifest path")->required();
  train_cmd->add_option("--out", train.out, "Adapter parameter file")->required();
  train_cmd->add_option("--trace", train.trace, "Per-epoch loss trace file");
  train_cmd->add_option("--seed", train.cfg.seed, "Shuffling and sampling seed")->required();
  train_cmd->add_option("--epochs", train.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", train.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--step-size", train.cfg.step_size)->capture_default_str();
  train_cmd->add_option("--weight-decay", train.cfg.weight_decay)->capture_default_str();
  train_cmd->add_option("--head-step-multiplier", train.cfg.head_step_multiplier)
      ->capture_default_str();
  train_cmd->add_option("--lambda-match", train.cfg.lambda_match)->capture_default_str();
  train_cmd->add_option("--temperature", train.cfg.temperature)->capture_default_str();
  train_cmd->add_option("--precision", train.precision, "f32 or f64")->capture_default_str();

  ResolveArgs res;
  auto* resolve_cmd = app.add_subcommand("resolve", "Resolve answer collisions between queries");
  resolve_cmd->add_option("--in", res.in, "Ranked-list input file")->required();
  resolve_cmd->add_option("--out", res.out, "Resolved output file")->required();
  resolve_cmd->add_option("--audit", res.audit, "Audit sidecar file");
  resolve_cmd->add_option("--depth", res.depth, "Positions to de-duplicate")
      ->capture_default_str();
  resolve_cmd->add_option("--max-rounds", res.max_rounds, "Round cap per position");
  resolve_cmd->add_option("--gate", res.gate, "Query-query cosine gate");
  resolve_cmd->add_option("--manifest", res.manifest, "Manifest (query embeddings for --gate)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Recall@k of a ranked or resolved file");
  eval_cmd->add_option("--in", ev.in, "Ranked or resolved file")->required();
  eval_cmd->add_option("--manifest", ev.manifest, "Manifest with ground truth")->required();
  eval_cmd->add_option("--ks", ev.ks, "Comma-separated k values")
      ->delimiter(',')
      ->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Report file (stdout when omitted)");
  eval_cmd->add_option("--timestamp", ev.timestamp, "Timestamp recorded in the report");

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Compare two evaluation reports");
  report_cmd->add_option("--before", rep.before, "Baseline report")->required();
  report_cmd->add_option("--after", rep.after, "Candidate report")->required();
  report_cmd->add_option("--out", rep.out, "Delta report file");
  report_cmd->add_option("--before-label", rep.before_label)->capture_default_str();
  report_cmd->add_option("--after-label", rep.after_label)->capture_default_str();

  // CLI11 consumes arguments from the back of the vector.
  std::vector<std::string> reversed;
  for (std::size_t i = args.size(); i > 1; --i) reversed.push_back(args[i - 1]);
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return do_gen_synth(gen, out);
    if (validate_cmd->parsed()) return do_validate(validate_manifest, out);
    if (search_cmd->parsed()) return do_search(search, out);
    if (train_cmd->parsed()) return do_train(train, out);
    if (resolve_cmd->parsed()) return do_resolve(res, out);
    if (eval_cmd->parsed()) return do_eval(ev, out);
    if (report_cmd->parsed()) return do_report(rep, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace covsearch::cli
