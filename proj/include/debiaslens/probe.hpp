#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "debiaslens/embedding_store.hpp"
#include "debiaslens/sae.hpp"

namespace debiaslens {

/// Per-sample encoder outputs for a dataset, with the checksums of the
/// checkpoint and dataset that produced them.
struct ActivationMatrix {
  std::size_t omega = 0;
  std::vector<SparseActivation> rows;
  std::vector<std::string> ids;
  std::string checkpoint_sha256;
  std::string dataset_sha256;

  std::size_t n() const { return rows.size(); }
};

struct EffectiveSet {
  std::string group;
  std::vector<std::uint32_t> neurons;  // sorted
  double tau = 0.0;
  std::size_t group_size = 0;
};

struct RankedNeuron {
  std::uint32_t index;
  double mean_activation;

  friend bool operator==(const RankedNeuron&, const RankedNeuron&) = default;
};

enum class ProbeMode { kTopOne, kAllEffective };

std::string to_string(ProbeMode mode);
/// Accepts "top1" and "all".
ProbeMode probe_mode_from_string(const std::string& text);

struct GroupProbe {
  std::string group;
  std::size_t group_size = 0;
  std::vector<std::uint32_t> effective;  // E_g
  std::vector<std::uint32_t> specific;   // N_g
  std::vector<RankedNeuron> ranking;     // N_g by mean activation, descending
  std::optional<std::uint32_t> selected; // j*_g
  /// Ids of the samples activating j*_g most strongly, strongest first.
  std::vector<std::string> top_sample_ids;
};

struct SocialNeuronReport {
  std::string attribute;
  ProbeMode mode = ProbeMode::kTopOne;
  double tau = 0.9;
  std::size_t omega = 0;
  std::string checkpoint_sha256;
  std::string dataset_sha256;
  std::vector<GroupProbe> groups;
  std::vector<std::uint32_t> bias_set;  // Z_B, sorted
  std::vector<std::string> warnings;
};

ActivationMatrix compute_activations(const EmbeddingDataset& ds, const SaeParams& params, std::size_t k);

/// Latents firing on at least floor(tau * S_g) samples of `group`.
EffectiveSet effective_neurons(const ActivationMatrix& acts, const AttributeTable& table, const std::string& group,
                               double tau);

/// N_g = E_g minus the union of every other group's E_h, in input order.
std::vector<std::vector<std::uint32_t>> group_specific(const std::vector<EffectiveSet>& effective_sets);

/// Mean activation over all S_g samples of the group (non-firing samples
/// count as zero), sorted descending with ties to the lower index.
std::vector<RankedNeuron> rank_by_mean_activation(const ActivationMatrix& acts, const AttributeTable& table,
                                                  const std::string& group,
                                                  const std::vector<std::uint32_t>& candidates);

SocialNeuronReport build_report(const ActivationMatrix& acts, const AttributeTable& table, double tau,
                                ProbeMode mode, std::size_t top_samples = 10);

/// Throws ValidationError if any report invariant is broken (N_g disjoint,
/// j*_g attains the max in N_g, Z_B consistent with the mode).
void check_report_invariants(const SocialNeuronReport& report);

/// Z_B of several attributes combined (intersectional probing).
std::vector<std::uint32_t> union_bias_sets(const std::vector<SocialNeuronReport>& reports);

nlohmann::json to_json(const SocialNeuronReport& report);
SocialNeuronReport report_from_json(const nlohmann::json& doc);

}  // namespace debiaslens
