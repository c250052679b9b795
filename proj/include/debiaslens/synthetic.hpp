#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "debiaslens/embedding_store.hpp"
#include "debiaslens/metrics.hpp"

namespace debiaslens {

struct PlantedGroup {
  std::string name;
  std::size_t count = 0;
  /// Unit direction; left empty to have one generated.
  Eigen::VectorXd direction;
  double strength = 1.0;
};

/// Gaussian data with one planted direction per group:
///   x = base_offset + strength_g * direction_g + noise_scale * eta.
/// Missing directions are drawn as a seeded orthonormal set; with
/// `correlation` c > 0 every generated direction after the first is tilted
/// so that its dot product with the first is c.
struct PlantedBiasSpec {
  std::string attribute = "group";
  std::size_t d = 0;
  std::vector<PlantedGroup> groups;
  double noise_scale = 0.1;
  Eigen::VectorXd base_offset;  // empty means zero
  double correlation = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

PlantedBiasSpec planted_spec_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const PlantedBiasSpec& spec);

/// Fills in generated directions and the base offset; the result has every
/// direction set and unit-norm.
PlantedBiasSpec resolve_spec(const PlantedBiasSpec& spec);

struct SyntheticData {
  EmbeddingDataset dataset;
  AttributeTable labels;
  PlantedBiasSpec resolved;
  /// Pairwise direction dot products, groups x groups.
  Eigen::MatrixXd direction_dots;
};

/// Rows are emitted in a seeded shuffled order; ids are "<group>_<i>".
SyntheticData generate_dataset(const PlantedBiasSpec& spec);

struct BiasedQuery {
  std::string id;
  std::string target_group;
  Eigen::VectorXd vector;
};

/// base_offset + bias_mix * direction_g + query_noise * eta for each group g,
/// `per_group` queries each. A negative query_noise selects the default of
/// 0.1 * noise_scale.
std::vector<BiasedQuery> generate_biased_queries(const PlantedBiasSpec& spec, std::size_t per_group, double bias_mix,
                                                 double query_noise = -1.0);

std::vector<Query> as_queries(const std::vector<BiasedQuery>& queries);
EmbeddingDataset queries_dataset(const std::vector<BiasedQuery>& queries);

/// Exhaustive MaxSkew per query: full similarity matrix, stable sort of every
/// gallery row, uniform desired distribution. Unscaled natural-log values.
std::vector<std::optional<double>> oracle_max_skew(const EmbeddingDataset& gallery, const AttributeTable& table,
                                                   const std::vector<Query>& queries, std::size_t k);
std::vector<std::optional<double>> oracle_expected_skew(const PlantedBiasSpec& spec,
                                                        const std::vector<BiasedQuery>& queries, std::size_t k);

}  // namespace debiaslens
