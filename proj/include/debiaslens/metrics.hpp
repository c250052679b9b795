#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "debiaslens/embedding_store.hpp"

namespace debiaslens {

struct Query {
  std::string id;
  Eigen::VectorXd vector;
};

std::vector<Query> queries_from(const EmbeddingDataset& ds);

/// Top-k gallery rows per query by descending cosine similarity.
struct RetrievalRun {
  std::size_t k = 0;
  std::vector<std::string> query_ids;
  std::vector<std::vector<std::size_t>> rankings;  // gallery row indices
  std::vector<std::string> gallery_ids;

  std::vector<std::string> ranking_ids(std::size_t q) const;
};

/// Cosine similarity of two vectors given their precomputed norms. Sums run
/// in index order.
double cosine(const Eigen::VectorXd& a, double norm_a, const Eigen::VectorXd& b, double norm_b);

/// Exact top-k with ties to the lower gallery row. Throws ValidationError
/// naming the offending row for a zero-norm gallery row or query.
RetrievalRun cosine_retrieval(const std::vector<Query>& queries, const EmbeddingDataset& gallery, std::size_t k);

struct SkewReport {
  std::string attribute;
  std::size_t k = 0;
  std::vector<double> desired;
  std::vector<std::string> query_ids;
  /// Unscaled per-query MaxSkew; nullopt when the query was skipped.
  std::vector<std::optional<double>> per_query;
  /// Mean of the finite per-query values, times 100.
  double mean_max_skew = 0.0;
  std::size_t scored_queries = 0;
  std::vector<std::string> warnings;
};

/// MaxSkew of one query's retrieved group counts:
/// max over groups with count > 0 of ln((count / total) / desired).
/// Returns nullopt when every group with positive desired share is absent.
std::optional<double> max_skew_of_counts(const std::vector<std::size_t>& counts, const std::vector<double>& desired);

/// `desired` empty means uniform over the table's groups.
SkewReport max_skew_at_k(const RetrievalRun& run, const AttributeTable& table, std::vector<double> desired = {});

struct ProportionTest {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Two-sided pooled two-proportion z-test. A pooled proportion of 0 or 1
/// yields statistic 0 and p = 1.
ProportionTest two_proportion_test(std::uint64_t yes_a, std::uint64_t n_a, std::uint64_t yes_b, std::uint64_t n_b);

struct Answer {
  std::string prompt;
  std::string group;
  bool yes = false;
  std::string id;
};

struct PromptDisproportion {
  std::string prompt;
  std::string group_a, group_b;  // lexicographic order
  std::uint64_t yes_a = 0, n_a = 0, yes_b = 0, n_b = 0;
  double p_yes_a = 0.0, p_yes_b = 0.0;
  ProportionTest test;
  bool significant = false;
};

struct DisproportionReport {
  double alpha_sig = 0.05;
  std::vector<PromptDisproportion> prompts;  // sorted by prompt
  double rate = 0.0;
  std::vector<std::string> warnings;
};

DisproportionReport disproportion_rate(const std::vector<Answer>& answers, double alpha_sig = 0.05);

/// Gold option -> accepted spellings. Lookups are case-insensitive.
class AliasTable {
 public:
  AliasTable() = default;
  void add(const std::string& gold, const std::string& alias);
  /// The gold string itself plus its registered aliases, lower-cased.
  std::vector<std::string> spellings(const std::string& gold) const;
  static AliasTable with_defaults();

 private:
  std::map<std::string, std::vector<std::string>> aliases_;
};

struct QaItem {
  std::string id;
  std::string response;
  std::string gold;
};

struct QaReport {
  std::size_t total = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  std::vector<bool> matched;
};

/// True when any spelling of `gold` appears in `response` case-insensitively
/// and is not glued to a neighbouring letter or digit.
bool response_matches(const std::string& response, const std::string& gold, const AliasTable& aliases);
QaReport ambiguous_qa_accuracy(const std::vector<QaItem>& items, const AliasTable& aliases = AliasTable::with_defaults());

struct SimilarityGapReport {
  std::string attribute;
  double same_group_mean = 0.0;
  double random_mean = 0.0;
  double gap = 0.0;
  std::size_t same_group_pairs = 0;
  std::size_t random_pairs = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

/// Mean cosine of seeded same-group pairs (group chosen uniformly, then a
/// distinct pair inside it) against seeded random pairs of labeled rows.
SimilarityGapReport similarity_gap(const EmbeddingDataset& ds, const AttributeTable& table, std::size_t pair_samples,
                                   std::uint64_t seed);

nlohmann::json to_json(const SkewReport& report);
nlohmann::json to_json(const DisproportionReport& report);
nlohmann::json to_json(const QaReport& report);
nlohmann::json to_json(const SimilarityGapReport& report);
std::string skew_csv(const SkewReport& report);

}  // namespace debiaslens
