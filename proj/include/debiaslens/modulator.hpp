#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <vector>

#include "debiaslens/embedding_store.hpp"
#include "debiaslens/sae.hpp"

namespace debiaslens {

/// The intervention: latents in `bias_set` are overwritten with `gamma`
/// and the decoded result is blended with the input by `alpha`.
struct ModulationConfig {
  std::vector<std::uint32_t> bias_set;
  double gamma = 0.0;
  double alpha = 0.6;

  /// Throws ConfigError/RangeError; omega bounds the bias-set indices.
  void validate(std::size_t omega) const;
};

nlohmann::json to_json(const ModulationConfig& cfg);
ModulationConfig modulation_config_from_json(const nlohmann::json& doc);

/// z'[j] = gamma for j in the bias set, z[j] otherwise. Zero-valued results
/// are not stored, so gamma = 0 removes entries.
LatentVector modulate_latent(const SparseActivation& z, const ModulationConfig& cfg);

/// alpha * decode(modulate_latent(encode(v))) + (1 - alpha) * v.
Eigen::VectorXd debias(const Eigen::VectorXd& v, const SaeParams& params, const ModulationConfig& cfg, std::size_t k);

/// Row-wise debias; ids and order are preserved.
EmbeddingDataset debias_dataset(const EmbeddingDataset& ds, const SaeParams& params, const ModulationConfig& cfg,
                                std::size_t k);

}  // namespace debiaslens
