#include "debiaslens/cli.hpp"

#include <CLI11.hpp>
#include <Eigen/QR>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "debiaslens/checkpoint.hpp"
#include "debiaslens/embedding_store.hpp"
#include "debiaslens/errors.hpp"
#include "debiaslens/metrics.hpp"
#include "debiaslens/modulator.hpp"
#include "debiaslens/probe.hpp"
#include "debiaslens/synthetic.hpp"
#include "debiaslens/training.hpp"
#include "file_util.hpp"

namespace debiaslens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct PipelineConfig {
  fs::path embeddings;
  std::vector<fs::path> labels;
  fs::path checkpoint;
  fs::path queries;
  fs::path gallery_after;
  fs::path answers, answers_after;
  fs::path responses, responses_after;
  std::vector<fs::path> reports;

  TrainConfig train;

  double tau = 0.9;
  ProbeMode mode = ProbeMode::kTopOne;
  std::size_t top_samples = 10;

  std::optional<std::vector<std::uint32_t>> bias_set;
  double gamma = 0.0;
  double alpha = 0.6;

  std::size_t k = 100;
  json desired;  // null, array aligned to groups, or {group: share}
  double alpha_sig = 0.05;
  std::size_t pair_samples = 1000;
  json aliases = json::object();

  std::vector<double> alpha_grid;
  std::vector<double> tau_grid;
  std::vector<std::size_t> expansion_grid;

  std::optional<json> planted;
  std::size_t queries_per_group = 50;
  double bias_mix = 0.8;
  double query_noise = -1.0;
};

struct Context {
  std::string command;
  fs::path out;
  bool quiet = false;
  std::optional<std::uint64_t> seed;

  void log(const std::string& line) const {
    if (!quiet) std::cerr << "[" << command << "] " << line << "\n";
  }
};

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& section) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& section) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + section + "." + key + "': " + e.what());
  }
}

PipelineConfig load_config(const fs::path& path) {
  PipelineConfig cfg;
  if (path.empty()) return cfg;
  if (!fs::exists(path)) throw ConfigError("config file does not exist: " + path.string());
  json doc;
  try {
    doc = json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  check_keys(doc, {"paths", "train", "probe", "modulation", "metrics", "sweep", "synth"}, "config");
  const fs::path base = path.parent_path();

  if (doc.contains("paths")) {
    const json& p = doc["paths"];
    check_keys(p, {"embeddings", "labels", "checkpoint", "queries", "gallery_after", "answers", "answers_after",
                   "responses", "responses_after", "reports"},
               "paths");
    auto one = [&](const char* key, fs::path& dst) {
      if (p.contains(key)) dst = resolve(base, get_as<std::string>(p, key, "paths"));
    };
    auto many = [&](const char* key, std::vector<fs::path>& dst) {
      if (!p.contains(key)) return;
      const json& v = p[key];
      if (v.is_string()) {
        dst = {resolve(base, v.get<std::string>())};
      } else {
        for (const auto& s : get_as<std::vector<std::string>>(p, key, "paths")) dst.push_back(resolve(base, s));
      }
    };
    one("embeddings", cfg.embeddings);
    many("labels", cfg.labels);
    one("checkpoint", cfg.checkpoint);
    one("queries", cfg.queries);
    one("gallery_after", cfg.gallery_after);
    one("answers", cfg.answers);
    one("answers_after", cfg.answers_after);
    one("responses", cfg.responses);
    one("responses_after", cfg.responses_after);
    many("reports", cfg.reports);
  }
  if (doc.contains("train")) cfg.train = train_config_from_json(doc["train"]);
  if (doc.contains("probe")) {
    const json& p = doc["probe"];
    check_keys(p, {"tau", "mode", "top_samples"}, "probe");
    if (p.contains("tau")) cfg.tau = get_as<double>(p, "tau", "probe");
    if (p.contains("mode")) cfg.mode = probe_mode_from_string(get_as<std::string>(p, "mode", "probe"));
    if (p.contains("top_samples")) cfg.top_samples = get_as<std::size_t>(p, "top_samples", "probe");
  }
  if (doc.contains("modulation")) {
    const json& m = doc["modulation"];
    check_keys(m, {"bias_set", "gamma", "alpha"}, "modulation");
    if (m.contains("bias_set")) cfg.bias_set = get_as<std::vector<std::uint32_t>>(m, "bias_set", "modulation");
    if (m.contains("gamma")) cfg.gamma = get_as<double>(m, "gamma", "modulation");
    if (m.contains("alpha")) cfg.alpha = get_as<double>(m, "alpha", "modulation");
  }
  if (doc.contains("metrics")) {
    const json& m = doc["metrics"];
    check_keys(m, {"k", "desired", "alpha_sig", "pair_samples", "aliases"}, "metrics");
    if (m.contains("k")) cfg.k = get_as<std::size_t>(m, "k", "metrics");
    if (m.contains("desired")) cfg.desired = m["desired"];
    if (m.contains("alpha_sig")) cfg.alpha_sig = get_as<double>(m, "alpha_sig", "metrics");
    if (m.contains("pair_samples")) cfg.pair_samples = get_as<std::size_t>(m, "pair_samples", "metrics");
    if (m.contains("aliases")) cfg.aliases = m["aliases"];
  }
  if (doc.contains("sweep")) {
    const json& s = doc["sweep"];
    check_keys(s, {"alpha", "tau", "expansion_factor"}, "sweep");
    if (s.contains("alpha")) cfg.alpha_grid = get_as<std::vector<double>>(s, "alpha", "sweep");
    if (s.contains("tau")) cfg.tau_grid = get_as<std::vector<double>>(s, "tau", "sweep");
    if (s.contains("expansion_factor"))
      cfg.expansion_grid = get_as<std::vector<std::size_t>>(s, "expansion_factor", "sweep");
  }
  if (doc.contains("synth")) {
    const json& s = doc["synth"];
    check_keys(s, {"spec", "queries_per_group", "bias_mix", "query_noise"}, "synth");
    if (s.contains("spec")) cfg.planted = s["spec"];
    if (s.contains("queries_per_group")) cfg.queries_per_group = get_as<std::size_t>(s, "queries_per_group", "synth");
    if (s.contains("bias_mix")) cfg.bias_mix = get_as<double>(s, "bias_mix", "synth");
    if (s.contains("query_noise")) cfg.query_noise = get_as<double>(s, "query_noise", "synth");
  }
  return cfg;
}

void require_path(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " path is required");
  if (!fs::exists(p)) throw ConfigError(what + " path does not exist: " + p.string());
}

void require_paths(const std::vector<fs::path>& ps, const std::string& what) {
  if (ps.empty()) throw ConfigError("at least one " + what + " path is required");
  for (const auto& p : ps) require_path(p, what);
}

void validate_tau(double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1], got " + std::to_string(tau));
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_report(const Context& ctx, const std::string& stem, const std::string& title, json body) {
  body["metadata"] = {{"timestamp", utc_timestamp()}, {"command", ctx.command}, {"tool", "debiaslens"}};
  detail::write_file(ctx.out / (stem + ".json"), body.dump(2) + "\n");
  detail::write_file(ctx.out / (stem + ".md"), markdown_summary(title, body));
  ctx.log("wrote " + (ctx.out / (stem + ".json")).string());
}

std::vector<AttributeTable> load_tables(const std::vector<fs::path>& paths, const EmbeddingDataset& ds) {
  std::vector<AttributeTable> tables;
  for (const auto& p : paths) tables.push_back(load_labels(p, ds));
  return tables;
}

Checkpoint load_matching_checkpoint(const fs::path& path, const EmbeddingDataset& ds) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.params.d() != ds.d()) {
    throw ValidationError("checkpoint dimension " + std::to_string(ckpt.params.d()) +
                          " does not match embedding dimension " + std::to_string(ds.d()));
  }
  return ckpt;
}

std::vector<double> desired_shares(const json& desired, const AttributeTable& table) {
  if (desired.is_null()) return {};
  if (desired.is_array()) {
    auto v = desired.get<std::vector<double>>();
    if (v.size() != table.group_count()) throw ConfigError("desired distribution size differs from group count");
    return v;
  }
  if (!desired.is_object()) throw ConfigError("desired distribution must be an array or an object");
  std::vector<double> v(table.group_count(), 0.0);
  for (const auto& [name, share] : desired.items()) v[table.group_index(name)] = share.get<double>();
  return v;
}

/// Z_B from the explicit bias set, else from the referenced reports.
std::vector<std::uint32_t> resolve_bias_set(const PipelineConfig& cfg, const Checkpoint& ckpt, json& sources) {
  if (cfg.bias_set) {
    sources = "explicit";
    return *cfg.bias_set;
  }
  if (cfg.reports.empty()) throw ConfigError("debias needs a bias set or at least one probe report");
  const std::string id = checkpoint_id(ckpt.params);
  std::vector<SocialNeuronReport> reports;
  sources = json::array();
  for (const auto& p : cfg.reports) {
    require_path(p, "report");
    json doc;
    try {
      doc = json::parse(detail::read_file(p));
    } catch (const json::exception& e) {
      throw FormatError("report '" + p.string() + "': " + e.what());
    }
    auto report = report_from_json(doc);
    if (report.checkpoint_sha256 != id) {
      throw ValidationError("report '" + p.string() + "' was produced by a different checkpoint");
    }
    sources.push_back({{"path", p.filename().string()}, {"attribute", report.attribute}});
    reports.push_back(std::move(report));
  }
  return union_bias_sets(reports);
}

// General-capability proxy: share of the variance outside the group-mean
// subspace that survives the edit, 1 - ||P(x' - x)||^2 / ||P(x - mean)||^2.
double non_group_fidelity(const EmbeddingDataset& before, const EmbeddingDataset& after, const AttributeTable& table) {
  const Eigen::MatrixXd x = to_matrix(before);
  const Eigen::MatrixXd y = to_matrix(after);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  std::vector<Eigen::VectorXd> dirs;
  for (std::size_t g = 0; g < table.group_count(); ++g) {
    const auto rows = table.members(g);
    if (rows.empty()) continue;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(x.cols());
    for (auto r : rows) mu += x.row(static_cast<Eigen::Index>(r)).transpose();
    dirs.push_back(mu / static_cast<double>(rows.size()) - mean.transpose());
  }
  Eigen::MatrixXd basis(x.cols(), 0);
  if (!dirs.empty()) {
    Eigen::MatrixXd a(x.cols(), static_cast<Eigen::Index>(dirs.size()));
    for (std::size_t i = 0; i < dirs.size(); ++i) a.col(static_cast<Eigen::Index>(i)) = dirs[i];
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(x.cols(), qr.rank());
    basis = q;
  }
  auto residual_sq = [&](const Eigen::MatrixXd& m) {
    const Eigen::MatrixXd proj = m - (m * basis) * basis.transpose();
    return proj.squaredNorm();
  };
  const double total = residual_sq(x.rowwise() - mean);
  if (total <= 0.0) return 1.0;
  return 1.0 - residual_sq(y - x) / total;
}

std::vector<Answer> load_answers(const fs::path& path) {
  std::istringstream in(detail::read_file(path));
  std::vector<Answer> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json doc = json::parse(line);
      Answer a;
      a.prompt = doc.at("prompt").get<std::string>();
      a.group = doc.at("group").get<std::string>();
      const auto ans = doc.at("answer").get<std::string>();
      if (ans != "yes" && ans != "no") throw ValidationError("answer must be \"yes\" or \"no\"");
      a.yes = ans == "yes";
      a.id = doc.value("id", std::string());
      out.push_back(std::move(a));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<QaItem> load_responses(const fs::path& path) {
  std::istringstream in(detail::read_file(path));
  std::vector<QaItem> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json doc = json::parse(line);
      out.push_back({doc.at("id").get<std::string>(), doc.at("response").get<std::string>(),
                     doc.at("gold").get<std::string>()});
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- subcommands ----

void cmd_synth(const PipelineConfig& cfg, const Context& ctx) {
  if (!cfg.planted) throw ConfigError("synth needs a planted spec under synth.spec");
  PlantedBiasSpec spec = planted_spec_from_json(*cfg.planted);
  if (ctx.seed) spec.seed = *ctx.seed;
  const SyntheticData data = generate_dataset(spec);
  const auto queries = generate_biased_queries(data.resolved, cfg.queries_per_group, cfg.bias_mix, cfg.query_noise);
  const EmbeddingDataset qds = queries_dataset(queries);

  AttributeTable qtable{data.labels.attribute, data.labels.groups, {}};
  for (const auto& q : queries) qtable.labels.push_back(static_cast<int>(qtable.group_index(q.target_group)));

  const std::string label_name = "labels_" + spec.attribute + ".json";
  save_embeddings(data.dataset, ctx.out / "embeddings.emb");
  save_labels(data.labels, data.dataset, ctx.out / label_name);
  save_embeddings(qds, ctx.out / "queries.emb");
  save_labels(qtable, qds, ctx.out / ("queries_labels_" + spec.attribute + ".json"));
  save_manifest(make_manifest(data.dataset, "embeddings.emb", {label_name}, "planted synthetic dataset"),
                ctx.out / "manifest.json");

  json dots = json::array();
  for (Eigen::Index i = 0; i < data.direction_dots.rows(); ++i) {
    std::vector<double> row(data.direction_dots.cols());
    for (Eigen::Index j = 0; j < data.direction_dots.cols(); ++j) row[j] = data.direction_dots(i, j);
    dots.push_back(row);
  }
  write_report(ctx, "synth_report", "Synthetic dataset",
               {{"spec", to_json(data.resolved)},
                {"n", data.dataset.n()},
                {"d", data.dataset.d()},
                {"queries", qds.n()},
                {"bias_mix", cfg.bias_mix},
                {"direction_dots", dots},
                {"payload_sha256", data.dataset.payload_sha256()},
                {"queries_sha256", qds.payload_sha256()}});
}

void cmd_train(PipelineConfig cfg, const Context& ctx) {
  require_path(cfg.embeddings, "embeddings");
  if (ctx.seed) cfg.train.seed = *ctx.seed;
  cfg.train.validate();
  const EmbeddingDataset ds = load_embeddings(cfg.embeddings);
  const Eigen::MatrixXd x = to_matrix(ds);
  const double initial = matryoshka_recon_loss(x, init_params(ds.d(), cfg.train, x), cfg.train.k);

  const json config_echo = to_json(cfg.train);
  auto hook = [&](std::size_t step, const SaeParams& params) {
    save_checkpoint({params, cfg.train.k, config_echo},
                    ctx.out / ("checkpoint_step" + std::to_string(step) + ".sae"));
  };
  ctx.log("training " + std::to_string(cfg.train.steps) + " steps on " + std::to_string(ds.n()) + " rows");
  const TrainResult result = train(ds, cfg.train, hook);
  const double final_loss = matryoshka_recon_loss(x, result.params, cfg.train.k);

  save_checkpoint({result.params, cfg.train.k, config_echo}, ctx.out / "checkpoint.sae");
  detail::write_file(ctx.out / "train_log.jsonl", result.log.to_jsonl());
  const auto& last = result.log.records.back();
  write_report(ctx, "train_report", "Training",
               {{"train_config", config_echo},
                {"dataset_sha256", ds.payload_sha256()},
                {"checkpoint_sha256", checkpoint_id(result.params)},
                {"d", ds.d()},
                {"omega", result.params.omega()},
                {"prefix_schedule", result.params.prefix_schedule},
                {"initial_recon_loss", initial},
                {"final_recon_loss", final_loss},
                {"recon_ratio", initial > 0.0 ? final_loss / initial : 0.0},
                {"final_dead_latents", last.dead_latents},
                {"decoder_renormalized", result.log.decoder_renormalized}});
}

void cmd_probe(const PipelineConfig& cfg, const Context& ctx) {
  validate_tau(cfg.tau);
  require_path(cfg.embeddings, "embeddings");
  require_paths(cfg.labels, "labels");
  require_path(cfg.checkpoint, "checkpoint");
  const EmbeddingDataset ds = load_embeddings(cfg.embeddings);
  const Checkpoint ckpt = load_matching_checkpoint(cfg.checkpoint, ds);
  const auto tables = load_tables(cfg.labels, ds);
  std::set<std::string> seen;
  for (const auto& t : tables) {
    if (!seen.insert(t.attribute).second) throw ConfigError("attribute '" + t.attribute + "' is labeled twice");
  }
  const ActivationMatrix acts = compute_activations(ds, ckpt.params, ckpt.k);
  for (const auto& table : tables) {
    const auto report = build_report(acts, table, cfg.tau, cfg.mode, cfg.top_samples);
    for (const auto& w : report.warnings) ctx.log("warning: " + w);
    write_report(ctx, "probe_" + table.attribute, "Social neurons: " + table.attribute, to_json(report));
  }
}

void cmd_debias(const PipelineConfig& cfg, const Context& ctx) {
  require_path(cfg.embeddings, "embeddings");
  require_path(cfg.checkpoint, "checkpoint");
  const EmbeddingDataset ds = load_embeddings(cfg.embeddings);
  const Checkpoint ckpt = load_matching_checkpoint(cfg.checkpoint, ds);
  json sources;
  ModulationConfig mod{resolve_bias_set(cfg, ckpt, sources), cfg.gamma, cfg.alpha};
  mod.validate(ckpt.params.omega());
  const EmbeddingDataset out = debias_dataset(ds, ckpt.params, mod, ckpt.k);
  save_embeddings(out, ctx.out / "debiased.emb");
  write_report(ctx, "debias_report", "Debiasing",
               {{"modulation", to_json(mod)},
                {"bias_set_source", sources},
                {"checkpoint_sha256", checkpoint_id(ckpt.params)},
                {"input_sha256", ds.payload_sha256()},
                {"output_sha256", out.payload_sha256()},
                {"rows", out.n()}});
}

json skew_block(const std::vector<Query>& queries, const EmbeddingDataset& gallery, const AttributeTable& table,
                const PipelineConfig& cfg, std::uint64_t seed) {
  const auto run = cosine_retrieval(queries, gallery, cfg.k);
  const auto report = max_skew_at_k(run, table, desired_shares(cfg.desired, table));
  json block = to_json(report);
  block["gallery_sha256"] = gallery.payload_sha256();
  if (cfg.pair_samples > 0) block["similarity_gap"] = to_json(similarity_gap(gallery, table, cfg.pair_samples, seed));
  return block;
}

void cmd_eval_skew(const PipelineConfig& cfg, const Context& ctx) {
  require_path(cfg.embeddings, "embeddings");
  require_paths(cfg.labels, "labels");
  require_path(cfg.queries, "queries");
  if (cfg.k == 0) throw ConfigError("metrics.k must be positive");
  const EmbeddingDataset gallery = load_embeddings(cfg.embeddings);
  const EmbeddingDataset qds = load_embeddings(cfg.queries);
  if (qds.d() != gallery.d()) throw ValidationError("query dimension differs from gallery dimension");
  const auto queries = queries_from(qds);
  const std::uint64_t seed = ctx.seed.value_or(0);

  std::optional<EmbeddingDataset> after;
  if (!cfg.gallery_after.empty()) {
    require_path(cfg.gallery_after, "gallery_after");
    after = load_embeddings(cfg.gallery_after);
    if (after->ids() != gallery.ids()) throw ValidationError("before and after galleries carry different ids");
  }
  for (const auto& table : load_tables(cfg.labels, gallery)) {
    json body = {{"attribute", table.attribute}, {"k", cfg.k}, {"before", skew_block(queries, gallery, table, cfg, seed)}};
    if (after) {
      body["after"] = skew_block(queries, *after, table, cfg, seed);
      body["delta_mean_max_skew_x100"] =
          body["after"]["mean_max_skew_x100"].get<double>() - body["before"]["mean_max_skew_x100"].get<double>();
    }
    const std::string stem = "skew_" + table.attribute;
    const auto before_report = max_skew_at_k(cosine_retrieval(queries, gallery, cfg.k), table,
                                             desired_shares(cfg.desired, table));
    detail::write_file(ctx.out / (stem + ".csv"), skew_csv(before_report));
    write_report(ctx, stem, "MaxSkew@" + std::to_string(cfg.k) + ": " + table.attribute, body);
  }
}

void cmd_eval_disproportion(const PipelineConfig& cfg, const Context& ctx) {
  require_path(cfg.answers, "answers");
  if (!(cfg.alpha_sig > 0.0 && cfg.alpha_sig < 1.0)) throw ConfigError("metrics.alpha_sig must lie in (0, 1)");
  const auto before = disproportion_rate(load_answers(cfg.answers), cfg.alpha_sig);
  json body = {{"alpha_sig", cfg.alpha_sig}, {"before", to_json(before)}};
  if (!cfg.answers_after.empty()) {
    require_path(cfg.answers_after, "answers_after");
    const auto after = disproportion_rate(load_answers(cfg.answers_after), cfg.alpha_sig);
    body["after"] = to_json(after);
    body["delta_rate"] = after.rate - before.rate;
  }
  write_report(ctx, "disproportion_report", "Disproportion rate", body);
}

void cmd_eval_qa(const PipelineConfig& cfg, const Context& ctx) {
  require_path(cfg.responses, "responses");
  AliasTable aliases = AliasTable::with_defaults();
  if (!cfg.aliases.is_object()) throw ConfigError("metrics.aliases must be an object");
  for (const auto& [gold, spellings] : cfg.aliases.items()) {
    for (const auto& s : spellings) aliases.add(gold, s.get<std::string>());
  }
  const auto before = ambiguous_qa_accuracy(load_responses(cfg.responses), aliases);
  json body = {{"before", to_json(before)}};
  if (!cfg.responses_after.empty()) {
    require_path(cfg.responses_after, "responses_after");
    const auto after = ambiguous_qa_accuracy(load_responses(cfg.responses_after), aliases);
    body["after"] = to_json(after);
    body["delta_accuracy"] = after.accuracy - before.accuracy;
  }
  write_report(ctx, "qa_report", "Ambiguous QA accuracy", body);
}

void cmd_sweep(PipelineConfig cfg, const std::string& axis, const Context& ctx) {
  if (axis != "alpha" && axis != "tau" && axis != "expansion_factor") {
    throw ConfigError("sweep axis must be alpha, tau or expansion_factor");
  }
  const std::size_t grid_size = axis == "alpha" ? cfg.alpha_grid.size()
                                : axis == "tau" ? cfg.tau_grid.size()
                                                : cfg.expansion_grid.size();
  if (grid_size == 0) throw ConfigError("sweep grid for '" + axis + "' is empty");
  for (double t : cfg.tau_grid) validate_tau(t);
  validate_tau(cfg.tau);
  require_path(cfg.embeddings, "embeddings");
  require_paths(cfg.labels, "labels");
  require_path(cfg.queries, "queries");
  if (axis != "expansion_factor") require_path(cfg.checkpoint, "checkpoint");
  if (ctx.seed) cfg.train.seed = *ctx.seed;

  const EmbeddingDataset ds = load_embeddings(cfg.embeddings);
  const AttributeTable table = load_labels(cfg.labels.front(), ds);
  const EmbeddingDataset qds = load_embeddings(cfg.queries);
  if (qds.d() != ds.d()) throw ValidationError("query dimension differs from gallery dimension");
  const auto queries = queries_from(qds);
  const auto desired = desired_shares(cfg.desired, table);
  auto skew_of = [&](const EmbeddingDataset& gallery) {
    return max_skew_at_k(cosine_retrieval(queries, gallery, cfg.k), table, desired).mean_max_skew;
  };
  const double baseline = skew_of(ds);

  std::optional<Checkpoint> fixed;
  if (axis != "expansion_factor") fixed = load_matching_checkpoint(cfg.checkpoint, ds);

  auto probe_set = [&](const Checkpoint& ckpt, double tau) {
    const auto acts = compute_activations(ds, ckpt.params, ckpt.k);
    return build_report(acts, table, tau, cfg.mode, cfg.top_samples).bias_set;
  };
  std::vector<std::uint32_t> fixed_set;
  if (axis == "alpha") {
    json sources;
    fixed_set = (cfg.bias_set || !cfg.reports.empty()) ? resolve_bias_set(cfg, *fixed, sources)
                                                       : probe_set(*fixed, cfg.tau);
  }

  json rows = json::array();
  for (std::size_t i = 0; i < grid_size; ++i) {
    double alpha = cfg.alpha;
    double tau = cfg.tau;
    Checkpoint ckpt;
    std::vector<std::uint32_t> bias_set;
    json value;
    if (axis == "alpha") {
      alpha = cfg.alpha_grid[i];
      value = alpha;
      ckpt = *fixed;
      bias_set = fixed_set;
    } else if (axis == "tau") {
      tau = cfg.tau_grid[i];
      value = tau;
      ckpt = *fixed;
      bias_set = probe_set(ckpt, tau);
    } else {
      TrainConfig tc = cfg.train;
      tc.expansion_factor = cfg.expansion_grid[i];
      tc.validate();
      value = tc.expansion_factor;
      ctx.log("training expansion factor " + std::to_string(tc.expansion_factor));
      ckpt = {train(ds, tc).params, tc.k, to_json(tc)};
      bias_set = probe_set(ckpt, tau);
    }
    ModulationConfig mod{bias_set, cfg.gamma, alpha};
    mod.validate(ckpt.params.omega());
    const EmbeddingDataset edited = debias_dataset(ds, ckpt.params, mod, ckpt.k);
    rows.push_back({{axis, value},
                    {"alpha", alpha},
                    {"tau", tau},
                    {"omega", ckpt.params.omega()},
                    {"bias_set_size", bias_set.size()},
                    {"max_skew_x100", skew_of(edited)},
                    {"non_group_fidelity", non_group_fidelity(ds, edited, table)}});
  }
  write_report(ctx, "sweep_" + axis, "Sweep over " + axis,
               {{"axis", axis},
                {"attribute", table.attribute},
                {"k", cfg.k},
                {"gamma", cfg.gamma},
                {"probe_mode", to_string(cfg.mode)},
                {"baseline_max_skew_x100", baseline},
                {"general_proxy", "non_group_fidelity: share of non-group-direction variance preserved"},
                {"rows", rows}});
}

int exit_code_for(const Error& e) {
  const std::string c = e.category();
  if (c == "io" || c == "divergence") return kExitRuntime;
  return kExitConfig;
}

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) {
    std::ostringstream os;
    os << std::setprecision(6) << v.get<double>();
    return os.str();
  }
  return v.dump();
}

bool is_flat_object(const json& v) {
  if (!v.is_object()) return false;
  for (const auto& [_, x] : v.items()) {
    if (x.is_structured()) return false;
  }
  return true;
}

void render(std::ostringstream& md, const json& node, int depth) {
  std::vector<std::pair<std::string, const json*>> nested;
  for (const auto& [key, v] : node.items()) {
    if (key == "metadata") continue;
    if (v.is_array() && !v.empty() && v.front().is_structured()) {
      nested.emplace_back(key, &v);
    } else if (v.is_object() && !v.empty()) {
      nested.emplace_back(key, &v);
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& x : v) joined += (joined.empty() ? "" : ", ") + scalar_text(x);
      md << "- " << key << ": [" << joined << "]\n";
    } else {
      md << "- " << key << ": " << scalar_text(v) << "\n";
    }
  }
  const std::string hashes(static_cast<std::size_t>(std::min(depth + 2, 6)), '#');
  for (const auto& [key, v] : nested) {
    md << "\n" << hashes << " " << key << "\n\n";
    if (v->is_array() && is_flat_object(v->front())) {
      std::vector<std::string> cols;
      for (const auto& [c, _] : v->front().items()) cols.push_back(c);
      md << "|";
      for (const auto& c : cols) md << " " << c << " |";
      md << "\n|";
      for (std::size_t i = 0; i < cols.size(); ++i) md << " --- |";
      md << "\n";
      for (const auto& row : *v) {
        md << "|";
        for (const auto& c : cols) md << " " << (row.contains(c) ? scalar_text(row[c]) : "") << " |";
        md << "\n";
      }
    } else if (v->is_array()) {
      for (std::size_t i = 0; i < v->size(); ++i) {
        md << "\n" << hashes << "# " << key << " " << i << "\n\n";
        render(md, (*v)[i], depth + 2);
      }
    } else {
      render(md, *v, depth + 1);
    }
  }
}

}  // namespace

std::string markdown_summary(const std::string& title, const json& report) {
  std::ostringstream md;
  md << "# " << title << "\n\n";
  render(md, report, 1);
  return md.str();
}

json strip_metadata(json report) {
  if (report.is_object()) report.erase("metadata");
  return report;
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Sparse-autoencoder social-neuron probing and debiasing toolkit", "debiaslens"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  bool quiet = false;
  auto* seed_opt = app.add_option("--seed", seed, "Seed overriding every configured seed");
  app.add_option("--config", config_path, "Pipeline config (JSON)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--quiet", quiet, "Suppress progress messages");

  std::string embeddings, checkpoint, queries, gallery_after, answers, answers_after, responses, responses_after;
  std::vector<std::string> labels, reports;
  std::size_t steps = 0, k = 0, expansion = 0, train_k = 0, batch = 0;
  double lr = 0, tau = 0, alpha = 0, gamma = 0, alpha_sig = 0;
  std::string mode, bias_set_text, axis;
  std::vector<double> grid;

  auto* train_cmd = app.add_subcommand("train", "Train a Matryoshka top-k SAE");
  auto* probe_cmd = app.add_subcommand("probe", "Identify social neurons");
  auto* debias_cmd = app.add_subcommand("debias", "Deactivate social neurons and blend");
  auto* skew_cmd = app.add_subcommand("eval-skew", "MaxSkew@k of a retrieval gallery");
  auto* disp_cmd = app.add_subcommand("eval-disproportion", "Disproportion rate of yes/no answers");
  auto* qa_cmd = app.add_subcommand("eval-qa", "Accuracy on ambiguous questions");
  auto* synth_cmd = app.add_subcommand("synth", "Generate a planted-bias dataset");
  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep alpha, tau or expansion factor");

  std::map<std::string, CLI::Option*> opts;
  auto add = [&](CLI::App* cmd, const std::string& name, auto& var, const std::string& help) {
    opts[cmd->get_name() + name] = cmd->add_option(name, var, help);
  };
  for (auto* cmd : {train_cmd, probe_cmd, debias_cmd, skew_cmd, sweep_cmd}) {
    add(cmd, "--embeddings", embeddings, "EMB1 embeddings file");
  }
  for (auto* cmd : {probe_cmd, skew_cmd, sweep_cmd}) add(cmd, "--labels", labels, "Label sidecar(s)");
  for (auto* cmd : {probe_cmd, debias_cmd, sweep_cmd}) add(cmd, "--checkpoint", checkpoint, "SAE checkpoint");
  for (auto* cmd : {skew_cmd, sweep_cmd}) {
    add(cmd, "--queries", queries, "EMB1 query file");
    add(cmd, "--k", k, "Retrieval depth");
  }
  for (auto* cmd : {probe_cmd, sweep_cmd}) {
    add(cmd, "--tau", tau, "Effectiveness threshold");
    add(cmd, "--mode", mode, "Probe mode: top1 or all");
  }
  for (auto* cmd : {debias_cmd, sweep_cmd}) {
    add(cmd, "--alpha", alpha, "Blend weight");
    add(cmd, "--gamma", gamma, "Deactivation value");
    add(cmd, "--report", reports, "Probe report(s) supplying the bias set");
    add(cmd, "--bias-set", bias_set_text, "Comma-separated latent indices");
  }
  add(train_cmd, "--steps", steps, "Optimizer steps");
  add(train_cmd, "--expansion-factor", expansion, "Dictionary size over input dimension");
  add(train_cmd, "--train-k", train_k, "Active latents per input");
  add(train_cmd, "--batch-size", batch, "Batch size");
  add(train_cmd, "--learning-rate", lr, "Base learning rate");
  add(skew_cmd, "--after", gallery_after, "Debiased gallery for a before/after delta");
  add(disp_cmd, "--answers", answers, "Answers file (JSON lines)");
  add(disp_cmd, "--after", answers_after, "Answers after debiasing");
  add(disp_cmd, "--alpha-sig", alpha_sig, "Significance level");
  std::string spec_path;
  std::size_t per_group = 0;
  double bias_mix = 0;
  add(synth_cmd, "--spec", spec_path, "Planted spec (JSON)");
  add(synth_cmd, "--queries-per-group", per_group, "Biased queries per group");
  add(synth_cmd, "--bias-mix", bias_mix, "Group-direction weight of the queries");
  add(qa_cmd, "--responses", responses, "Responses file (JSON lines)");
  add(qa_cmd, "--after", responses_after, "Responses after debiasing");
  sweep_cmd->add_option("--axis", axis, "alpha, tau or expansion_factor")->required();
  add(sweep_cmd, "--grid", grid, "Grid values overriding the config");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  CLI::App* cmd = app.get_subcommands().front();
  Context ctx{cmd->get_name(), fs::path(out_dir), quiet, std::nullopt};
  if (seed_opt->count()) ctx.seed = seed;
  auto given = [&](const std::string& name) {
    const auto it = opts.find(cmd->get_name() + name);
    return it != opts.end() && it->second->count() > 0;
  };

  try {
    PipelineConfig cfg = load_config(config_path);
    if (given("--embeddings")) cfg.embeddings = embeddings;
    if (given("--labels")) cfg.labels.assign(labels.begin(), labels.end());
    if (given("--checkpoint")) cfg.checkpoint = checkpoint;
    if (given("--queries")) cfg.queries = queries;
    if (given("--k")) cfg.k = k;
    if (given("--tau")) cfg.tau = tau;
    if (given("--mode")) cfg.mode = probe_mode_from_string(mode);
    if (given("--alpha")) cfg.alpha = alpha;
    if (given("--gamma")) cfg.gamma = gamma;
    if (given("--report")) {
      cfg.reports.assign(reports.begin(), reports.end());
      cfg.bias_set.reset();
    }
    if (given("--bias-set")) {
      std::vector<std::uint32_t> set;
      std::istringstream in(bias_set_text);
      std::string tok;
      while (std::getline(in, tok, ',')) {
        if (tok.empty()) continue;
        try {
          set.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
        } catch (const std::exception&) {
          throw ConfigError("bad bias-set entry '" + tok + "'");
        }
      }
      cfg.bias_set = set;
    }
    if (given("--steps")) cfg.train.steps = steps;
    if (given("--expansion-factor")) cfg.train.expansion_factor = expansion;
    if (given("--train-k")) cfg.train.k = train_k;
    if (given("--batch-size")) cfg.train.batch_size = batch;
    if (given("--learning-rate")) cfg.train.learning_rate = lr;
    if (cmd == skew_cmd && given("--after")) cfg.gallery_after = gallery_after;
    if (given("--answers")) cfg.answers = answers;
    if (cmd == disp_cmd && given("--after")) cfg.answers_after = answers_after;
    if (given("--alpha-sig")) cfg.alpha_sig = alpha_sig;
    if (given("--responses")) cfg.responses = responses;
    if (cmd == qa_cmd && given("--after")) cfg.responses_after = responses_after;
    if (given("--spec")) {
      require_path(spec_path, "spec");
      try {
        cfg.planted = json::parse(detail::read_file(spec_path));
      } catch (const json::exception& e) {
        throw ConfigError("spec '" + spec_path + "': " + e.what());
      }
    }
    if (given("--queries-per-group")) cfg.queries_per_group = per_group;
    if (given("--bias-mix")) cfg.bias_mix = bias_mix;
    if (given("--grid")) {
      if (axis == "alpha") cfg.alpha_grid = grid;
      if (axis == "tau") cfg.tau_grid = grid;
      if (axis == "expansion_factor") {
        cfg.expansion_grid.clear();
        for (double g : grid) {
          if (!(g >= 1.0) || g != std::floor(g)) throw ConfigError("expansion factors must be positive integers");
          cfg.expansion_grid.push_back(static_cast<std::size_t>(g));
        }
      }
    }

    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec) throw IoError("cannot create output directory '" + ctx.out.string() + "': " + ec.message());

    const std::string name = cmd->get_name();
    if (name == "train") cmd_train(cfg, ctx);
    else if (name == "probe") cmd_probe(cfg, ctx);
    else if (name == "debias") cmd_debias(cfg, ctx);
    else if (name == "eval-skew") cmd_eval_skew(cfg, ctx);
    else if (name == "eval-disproportion") cmd_eval_disproportion(cfg, ctx);
    else if (name == "eval-qa") cmd_eval_qa(cfg, ctx);
    else if (name == "synth") cmd_synth(cfg, ctx);
    else cmd_sweep(cfg, axis, ctx);
  } catch (const Error& e) {
    std::cerr << "debiaslens " << ctx.command << ": " << e.category() << " error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "debiaslens " << ctx.command << ": " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc));
}

}  // namespace debiaslens
