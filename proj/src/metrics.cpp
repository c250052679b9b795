#include "debiaslens/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "debiaslens/errors.hpp"
#include "debiaslens/parallel.hpp"

namespace debiaslens {

using json = nlohmann::json;

std::vector<Query> queries_from(const EmbeddingDataset& ds) {
  std::vector<Query> out;
  out.reserve(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i) out.push_back({ds.ids()[i], ds.row(i)});
  return out;
}

std::vector<std::string> RetrievalRun::ranking_ids(std::size_t q) const {
  std::vector<std::string> ids;
  for (auto r : rankings.at(q)) ids.push_back(gallery_ids[r]);
  return ids;
}

double cosine(const Eigen::VectorXd& a, double norm_a, const Eigen::VectorXd& b, double norm_b) {
  double dot = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (norm_a * norm_b);
}

namespace {

double plain_norm(const Eigen::VectorXd& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

}  // namespace

RetrievalRun cosine_retrieval(const std::vector<Query>& queries, const EmbeddingDataset& gallery, std::size_t k) {
  if (k < 1) throw ArgumentError("retrieval cutoff k must be >= 1");
  const std::size_t n = gallery.n();
  std::vector<Eigen::VectorXd> rows(n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = gallery.row(i);
    norms[i] = plain_norm(rows[i]);
    if (norms[i] == 0.0) throw ValidationError("gallery row " + std::to_string(i) + " has zero norm");
  }
  for (const auto& q : queries) {
    if (static_cast<std::size_t>(q.vector.size()) != gallery.d()) throw ShapeError("query '" + q.id + "' has the wrong dimension");
    if (plain_norm(q.vector) == 0.0) throw ValidationError("query '" + q.id + "' has zero norm");
  }

  RetrievalRun run;
  run.k = k;
  run.gallery_ids = gallery.ids();
  run.query_ids.reserve(queries.size());
  for (const auto& q : queries) run.query_ids.push_back(q.id);
  run.rankings.resize(queries.size());
  const std::size_t keep = std::min(k, n);

  parallel_for(queries.size(), [&](std::size_t qi) {
    const auto& q = queries[qi].vector;
    const double qn = plain_norm(q);
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) score[i] = cosine(q, qn, rows[i], norms[i]);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                      [&score](std::size_t a, std::size_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
    idx.resize(keep);
    run.rankings[qi] = std::move(idx);
  });
  return run;
}

std::optional<double> max_skew_of_counts(const std::vector<std::size_t>& counts, const std::vector<double>& desired) {
  if (counts.size() != desired.size()) throw ShapeError("group counts and desired distribution differ in length");
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  bool any_desired_present = false;
  for (std::size_t a = 0; a < counts.size(); ++a) any_desired_present |= (desired[a] > 0.0 && counts[a] > 0);
  if (!any_desired_present) return std::nullopt;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < counts.size(); ++a) {
    if (counts[a] == 0) continue;
    const double share = static_cast<double>(counts[a]) / total;
    const double skew = desired[a] > 0.0 ? std::log(share / desired[a]) : std::numeric_limits<double>::infinity();
    best = std::max(best, skew);
  }
  return best;
}

SkewReport max_skew_at_k(const RetrievalRun& run, const AttributeTable& table, std::vector<double> desired) {
  const std::size_t groups = table.group_count();
  if (groups == 0) throw ValidationError("attribute '" + table.attribute + "' declares no groups");
  if (table.labels.size() != run.gallery_ids.size()) throw ShapeError("label table does not match the gallery");
  if (std::none_of(table.labels.begin(), table.labels.end(), [](int l) { return l != kUnlabeled; })) {
    throw ValidationError("gallery has no samples labeled for attribute '" + table.attribute + "'");
  }
  if (desired.empty()) desired.assign(groups, 1.0 / static_cast<double>(groups));
  if (desired.size() != groups) throw ConfigError("desired distribution must have one entry per group");
  double sum = 0.0;
  for (double p : desired) {
    if (!(p >= 0.0)) throw ConfigError("desired distribution entries must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("desired distribution must sum to 1");

  SkewReport report;
  report.attribute = table.attribute;
  report.k = run.k;
  report.desired = desired;
  report.query_ids = run.query_ids;
  double total = 0.0;
  for (std::size_t q = 0; q < run.rankings.size(); ++q) {
    std::vector<std::size_t> counts(groups, 0);
    for (auto row : run.rankings[q]) {
      const int label = table.labels[row];
      if (label == kUnlabeled) {
        throw ValidationError("retrieved gallery item '" + run.gallery_ids[row] + "' has no '" + table.attribute + "' label");
      }
      ++counts[static_cast<std::size_t>(label)];
    }
    const auto skew = max_skew_of_counts(counts, desired);
    if (!skew) {
      report.warnings.push_back("query '" + run.query_ids[q] + "' retrieved no group with positive desired share; skipped");
    } else if (!std::isfinite(*skew)) {
      report.warnings.push_back("query '" + run.query_ids[q] + "' has infinite skew; excluded from the mean");
    } else {
      total += *skew;
      ++report.scored_queries;
    }
    report.per_query.push_back(skew);
  }
  if (report.scored_queries == 0) throw ValidationError("no query produced a finite MaxSkew");
  report.mean_max_skew = 100.0 * total / static_cast<double>(report.scored_queries);
  return report;
}

ProportionTest two_proportion_test(std::uint64_t yes_a, std::uint64_t n_a, std::uint64_t yes_b, std::uint64_t n_b) {
  if (n_a < 1 || n_b < 1) throw ArgumentError("two_proportion_test needs n_a, n_b >= 1");
  if (yes_a > n_a || yes_b > n_b) throw ArgumentError("yes count exceeds sample count");
  const double na = static_cast<double>(n_a);
  const double nb = static_cast<double>(n_b);
  const double pooled = static_cast<double>(yes_a + yes_b) / (na + nb);
  if (pooled <= 0.0 || pooled >= 1.0) return {0.0, 1.0};
  const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb));
  const double z = (static_cast<double>(yes_a) / na - static_cast<double>(yes_b) / nb) / se;
  return {z, std::erfc(std::abs(z) / std::sqrt(2.0))};
}

DisproportionReport disproportion_rate(const std::vector<Answer>& answers, double alpha_sig) {
  if (!(alpha_sig > 0.0 && alpha_sig < 1.0)) throw RangeError("significance level must lie in (0, 1)");
  // prompt -> group -> (yes, n)
  std::map<std::string, std::map<std::string, std::pair<std::uint64_t, std::uint64_t>>> tally;
  for (const auto& a : answers) {
    auto& cell = tally[a.prompt][a.group];
    cell.first += a.yes ? 1 : 0;
    cell.second += 1;
  }
  DisproportionReport report;
  report.alpha_sig = alpha_sig;
  std::size_t significant = 0;
  for (const auto& [prompt, groups] : tally) {
    if (groups.size() > 2) throw ValidationError("prompt '" + prompt + "' has answers from more than two groups");
    if (groups.size() < 2) {
      report.warnings.push_back("prompt '" + prompt + "' lacks answers from one group; skipped");
      continue;
    }
    const auto& [ga, ca] = *groups.begin();
    const auto& [gb, cb] = *std::next(groups.begin());
    PromptDisproportion row;
    row.prompt = prompt;
    row.group_a = ga;
    row.group_b = gb;
    row.yes_a = ca.first;
    row.n_a = ca.second;
    row.yes_b = cb.first;
    row.n_b = cb.second;
    row.p_yes_a = static_cast<double>(row.yes_a) / static_cast<double>(row.n_a);
    row.p_yes_b = static_cast<double>(row.yes_b) / static_cast<double>(row.n_b);
    row.test = two_proportion_test(row.yes_a, row.n_a, row.yes_b, row.n_b);
    row.significant = row.test.p_value < alpha_sig;
    significant += row.significant;
    report.prompts.push_back(std::move(row));
  }
  if (report.prompts.empty()) throw ValidationError("no prompt has answers from two groups");
  report.rate = static_cast<double>(significant) / static_cast<double>(report.prompts.size());
  return report;
}

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string trimmed(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n.");
  return s.substr(b, e - b + 1);
}

}  // namespace

void AliasTable::add(const std::string& gold, const std::string& alias) {
  aliases_[lower(trimmed(gold))].push_back(lower(trimmed(alias)));
}

std::vector<std::string> AliasTable::spellings(const std::string& gold) const {
  const auto key = lower(trimmed(gold));
  std::vector<std::string> out{key};
  if (const auto it = aliases_.find(key); it != aliases_.end()) out.insert(out.end(), it->second.begin(), it->second.end());
  return out;
}

AliasTable AliasTable::with_defaults() {
  AliasTable table;
  for (const char* alias : {"unknown", "can't be determined", "can not be determined", "cannot be answered",
                            "not enough information", "undetermined", "cannot determine"}) {
    table.add("cannot be determined", alias);
  }
  return table;
}

bool response_matches(const std::string& response, const std::string& gold, const AliasTable& aliases) {
  const auto text = lower(response);
  for (const auto& needle : aliases.spellings(gold)) {
    if (needle.empty()) continue;
    for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) {
      const bool left_ok = pos == 0 || !is_word_char(text[pos - 1]);
      const std::size_t end = pos + needle.size();
      const bool right_ok = end == text.size() || !is_word_char(text[end]);
      if (left_ok && right_ok) return true;
    }
  }
  return false;
}

QaReport ambiguous_qa_accuracy(const std::vector<QaItem>& items, const AliasTable& aliases) {
  if (items.empty()) throw ArgumentError("QA scoring needs at least one response");
  QaReport report;
  report.total = items.size();
  for (const auto& item : items) {
    const bool ok = response_matches(item.response, item.gold, aliases);
    report.matched.push_back(ok);
    report.correct += ok;
  }
  report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.total);
  return report;
}

SimilarityGapReport similarity_gap(const EmbeddingDataset& ds, const AttributeTable& table, std::size_t pair_samples,
                                   std::uint64_t seed) {
  if (table.labels.size() != ds.n()) throw ShapeError("label table does not match dataset row count");
  if (pair_samples < 1) throw ArgumentError("pair_samples must be >= 1");
  SimilarityGapReport report;
  report.attribute = table.attribute;
  report.seed = seed;

  std::vector<std::vector<std::size_t>> eligible;
  std::vector<std::size_t> labeled;
  for (std::size_t g = 0; g < table.group_count(); ++g) {
    auto rows = table.members(g);
    labeled.insert(labeled.end(), rows.begin(), rows.end());
    if (rows.size() < 2) {
      report.warnings.push_back("group '" + table.groups[g] + "' has fewer than 2 samples; excluded");
      continue;
    }
    eligible.push_back(std::move(rows));
  }
  if (eligible.empty()) throw ValidationError("no group of '" + table.attribute + "' has two samples");
  std::sort(labeled.begin(), labeled.end());

  std::vector<Eigen::VectorXd> rows(ds.n());
  std::vector<double> norms(ds.n());
  for (auto i : labeled) {
    rows[i] = ds.row(i);
    norms[i] = plain_norm(rows[i]);
    if (norms[i] == 0.0) throw ValidationError("row " + std::to_string(i) + " has zero norm");
  }

  std::mt19937_64 rng(seed);
  auto distinct_pair = [&rng](const std::vector<std::size_t>& pool) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    return std::pair{pool[a], pool[b]};
  };

  double same = 0.0, random = 0.0;
  std::uniform_int_distribution<std::size_t> pick_group(0, eligible.size() - 1);
  for (std::size_t s = 0; s < pair_samples; ++s) {
    const auto [a, b] = distinct_pair(eligible[pick_group(rng)]);
    same += cosine(rows[a], norms[a], rows[b], norms[b]);
  }
  for (std::size_t s = 0; s < pair_samples; ++s) {
    const auto [a, b] = distinct_pair(labeled);
    random += cosine(rows[a], norms[a], rows[b], norms[b]);
  }
  report.same_group_pairs = pair_samples;
  report.random_pairs = pair_samples;
  report.same_group_mean = same / static_cast<double>(pair_samples);
  report.random_mean = random / static_cast<double>(pair_samples);
  report.gap = report.same_group_mean - report.random_mean;
  return report;
}

json to_json(const SkewReport& report) {
  json per_query = json::array();
  for (std::size_t q = 0; q < report.per_query.size(); ++q) {
    const auto& v = report.per_query[q];
    per_query.push_back({{"query", report.query_ids[q]},
                         {"max_skew", v && std::isfinite(*v) ? json(*v) : json(nullptr)},
                         {"skipped", !v.has_value()}});
  }
  return json{{"attribute", report.attribute},
              {"k", report.k},
              {"desired", report.desired},
              {"mean_max_skew_x100", report.mean_max_skew},
              {"scored_queries", report.scored_queries},
              {"per_query", per_query},
              {"warnings", report.warnings}};
}

json to_json(const DisproportionReport& report) {
  json prompts = json::array();
  for (const auto& p : report.prompts) {
    prompts.push_back({{"prompt", p.prompt},
                       {"group_a", p.group_a},
                       {"group_b", p.group_b},
                       {"yes_a", p.yes_a},
                       {"n_a", p.n_a},
                       {"yes_b", p.yes_b},
                       {"n_b", p.n_b},
                       {"p_yes_a", p.p_yes_a},
                       {"p_yes_b", p.p_yes_b},
                       {"statistic", p.test.statistic},
                       {"p_value", p.test.p_value},
                       {"significant", p.significant}});
  }
  return json{{"alpha_sig", report.alpha_sig}, {"rate", report.rate}, {"prompts", prompts}, {"warnings", report.warnings}};
}

json to_json(const QaReport& report) {
  return json{{"total", report.total}, {"correct", report.correct}, {"accuracy", report.accuracy}};
}

json to_json(const SimilarityGapReport& report) {
  return json{{"attribute", report.attribute},
              {"same_group_mean", report.same_group_mean},
              {"random_mean", report.random_mean},
              {"gap", report.gap},
              {"same_group_pairs", report.same_group_pairs},
              {"random_pairs", report.random_pairs},
              {"seed", report.seed},
              {"warnings", report.warnings}};
}

std::string skew_csv(const SkewReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "query,max_skew\n";
  for (std::size_t q = 0; q < report.per_query.size(); ++q) {
    out << report.query_ids[q] << ',';
    if (report.per_query[q] && std::isfinite(*report.per_query[q])) out << *report.per_query[q];
    out << '\n';
  }
  return out.str();
}

}  // namespace debiaslens
