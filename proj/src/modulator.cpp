#include "debiaslens/modulator.hpp"

#include <algorithm>
#include <cmath>

#include "debiaslens/errors.hpp"
#include "debiaslens/parallel.hpp"

namespace debiaslens {

using json = nlohmann::json;

void ModulationConfig::validate(std::size_t omega) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw RangeError("alpha must lie in [0, 1]");
  if (!std::isfinite(gamma)) throw ConfigError("gamma must be finite");
  for (auto j : bias_set) {
    if (j >= omega) throw RangeError("bias-set latent " + std::to_string(j) + " >= omega " + std::to_string(omega));
  }
}

json to_json(const ModulationConfig& cfg) {
  return json{{"bias_set", cfg.bias_set}, {"gamma", cfg.gamma}, {"alpha", cfg.alpha}};
}

ModulationConfig modulation_config_from_json(const json& doc) {
  ModulationConfig cfg;
  try {
    cfg.bias_set = doc.value("bias_set", std::vector<std::uint32_t>{});
    cfg.gamma = doc.value("gamma", 0.0);
    cfg.alpha = doc.value("alpha", 0.6);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("modulation config: ") + e.what());
  }
  std::sort(cfg.bias_set.begin(), cfg.bias_set.end());
  cfg.bias_set.erase(std::unique(cfg.bias_set.begin(), cfg.bias_set.end()), cfg.bias_set.end());
  return cfg;
}

LatentVector modulate_latent(const SparseActivation& z, const ModulationConfig& cfg) {
  for (auto j : cfg.bias_set) {
    if (j >= z.dim()) throw RangeError("bias-set latent " + std::to_string(j) + " >= omega " + std::to_string(z.dim()));
  }
  std::vector<std::uint32_t> bias(cfg.bias_set);
  std::sort(bias.begin(), bias.end());
  bias.erase(std::unique(bias.begin(), bias.end()), bias.end());

  // Merge the stored entries with the bias set, both sorted by index.
  std::vector<LatentEntry> out;
  auto entry = z.entries().begin();
  auto b = bias.begin();
  while (entry != z.entries().end() || b != bias.end()) {
    if (b == bias.end() || (entry != z.entries().end() && entry->index < *b)) {
      out.push_back(*entry++);
      continue;
    }
    if (entry != z.entries().end() && entry->index == *b) ++entry;
    if (cfg.gamma != 0.0) out.push_back({*b, cfg.gamma});
    ++b;
  }
  return LatentVector(z.dim(), std::move(out));
}

Eigen::VectorXd debias(const Eigen::VectorXd& v, const SaeParams& params, const ModulationConfig& cfg, std::size_t k) {
  if (!v.allFinite()) throw ValidationError("input vector has non-finite entries");
  const Eigen::VectorXd v_hat = decode(modulate_latent(encode(v, params, k), cfg), params);
  // 0 * x + v would turn a -0.0 input into +0.0.
  if (cfg.alpha == 0.0) return v;
  return cfg.alpha * v_hat + (1.0 - cfg.alpha) * v;
}

EmbeddingDataset debias_dataset(const EmbeddingDataset& ds, const SaeParams& params, const ModulationConfig& cfg,
                                std::size_t k) {
  if (ds.d() != params.d()) {
    throw ShapeError("dataset dimension " + std::to_string(ds.d()) + " does not match SAE dimension " +
                     std::to_string(params.d()));
  }
  cfg.validate(params.omega());
  RowMatrixF out(ds.rows().rows(), ds.rows().cols());
  parallel_for(ds.n(), [&](std::size_t i) {
    out.row(static_cast<Eigen::Index>(i)) = debias(ds.row(i), params, cfg, k).cast<float>().transpose();
  });
  return EmbeddingDataset(std::move(out), ds.ids());
}

}  // namespace debiaslens
