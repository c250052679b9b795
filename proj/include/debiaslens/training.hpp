#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "debiaslens/embedding_store.hpp"
#include "debiaslens/sae.hpp"

namespace debiaslens {

struct TrainConfig {
  std::size_t expansion_factor = 8;
  std::size_t k = 20;
  double l1_weight = 0.0;   // lambda
  double aux_weight = 0.03; // beta
  std::size_t aux_k = 512;  // m_aux, clamped to omega
  std::vector<double> group_fractions{0.0625, 0.125, 0.25, 0.5625};
  std::size_t steps = 110000;
  std::size_t batch_size = 4096;
  double learning_rate = 1e-4;
  /// Defaults to steps - 1 when unset.
  std::optional<std::size_t> lr_decay_start;
  std::size_t dead_after_steps = 1000;
  std::uint64_t seed = 0;
  bool normalize_decoder = true;
  bool sample_with_replacement = true;
  std::size_t log_every = 100;
  /// 0 disables periodic checkpoints (the final one is always produced).
  std::size_t checkpoint_every = 0;

  std::size_t decay_start() const { return lr_decay_start.value_or(steps - 1); }
  /// Throws ConfigError on any broken invariant.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Unknown keys are rejected; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& doc);

/// Counts, per latent, the optimizer steps since it last fired.
class DeadLatentTracker {
 public:
  DeadLatentTracker(std::size_t omega, std::size_t dead_after_steps);

  std::size_t omega() const { return steps_since_fire_.size(); }
  std::size_t dead_after_steps() const { return dead_after_; }
  bool is_dead(std::size_t j) const { return steps_since_fire_[j] >= dead_after_; }
  std::size_t dead_count() const;
  std::uint64_t steps_since_fire(std::size_t j) const { return steps_since_fire_[j]; }

  /// One step: latents in `fired` reset to 0, all others advance by one.
  void record_step(const std::vector<bool>& fired);
  /// Test hook: marks latent j as having been silent for `steps` steps.
  void set_steps_since_fire(std::size_t j, std::uint64_t steps) { steps_since_fire_[j] = steps; }

 private:
  std::vector<std::uint64_t> steps_since_fire_;
  std::size_t dead_after_;
};

struct LossComponents {
  double recon = 0.0;  // multi-scale reconstruction term L_R
  double l1 = 0.0;
  double aux = 0.0;
  double total = 0.0;
};

struct TrainRecord {
  std::size_t step = 0;
  LossComponents loss;
  std::size_t dead_latents = 0;
  double learning_rate = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  bool decoder_renormalized = true;

  /// Newline-delimited JSON, one record per line.
  std::string to_jsonl() const;
};

/// Latents whose selection is frozen while differentiating: the top-k set
/// and the auxiliary dead-latent set of one sample. `aux_active` is false
/// when no latent was dead, which switches the auxiliary term off.
struct SampleMask {
  std::vector<std::uint32_t> selected;
  std::vector<std::uint32_t> aux;
  bool aux_active = false;
};

struct ParamGrads {
  Eigen::MatrixXd w_enc;
  Eigen::MatrixXd w_dec;
  Eigen::VectorXd b1;
  Eigen::VectorXd b2;
};

/// Loss weights used by the gradient routine.
struct LossWeights {
  double l1 = 0.0;
  double aux = 0.0;
};

/// Prefix schedule from the dictionary group fractions: cumulative sums of
/// ceil(fraction * omega), capped at omega, duplicates dropped, last = omega.
std::vector<std::size_t> prefix_schedule_for(std::size_t omega, const std::vector<double>& fractions);

/// Decoder rows are seeded uniform-on-sphere unit vectors, the encoder is
/// their transpose, b1 is the column mean of `sample`, b2 is zero.
SaeParams init_params(std::size_t d, const TrainConfig& cfg, const Eigen::MatrixXd& sample);

/// Mean over rows of sum over m in the prefix schedule of
/// ||v - prefix_decode(encode(v), m)||^2.
double matryoshka_recon_loss(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k);
/// lambda * mean over rows of the sum of stored activation values.
double sparsity_penalty(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k, double lambda);
/// beta * mean ||e - e_hat||^2 where e is the full reconstruction residual
/// and e_hat decodes (without b2) the aux_k dead latents with the largest
/// positive pre-activations. Zero when no latent is dead.
double aux_loss(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k,
                const DeadLatentTracker& tracker, std::size_t aux_k, double beta);

std::vector<SampleMask> compute_masks(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k,
                                      const DeadLatentTracker& tracker, std::size_t aux_k);

/// Total loss with the masks held fixed; masked latents take their linear
/// pre-activation value.
LossComponents masked_loss(const Eigen::MatrixXd& batch, const SaeParams& params,
                           const std::vector<SampleMask>& masks, const LossWeights& weights);
/// Analytic gradient of masked_loss with respect to every parameter block.
LossComponents masked_loss_and_grad(const Eigen::MatrixXd& batch, const SaeParams& params,
                                    const std::vector<SampleMask>& masks, const LossWeights& weights,
                                    ParamGrads& grads);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(const SaeParams& like, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void apply(SaeParams& params, const ParamGrads& grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  ParamGrads m_, v_;
};

/// Linearly decays from the base rate at decay_start toward 0 at `steps`.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);

struct TrainState {
  SaeParams params;
  AdamOptimizer optimizer;
  DeadLatentTracker tracker;

  TrainState(SaeParams p, const TrainConfig& cfg);
};

/// One optimizer step on `batch`. Throws DivergenceError on a non-finite loss.
TrainRecord train_step(TrainState& state, const Eigen::MatrixXd& batch, const TrainConfig& cfg, std::size_t step);

struct TrainResult {
  SaeParams params;
  TrainLog log;
};

/// Called with (step, params) every cfg.checkpoint_every steps.
using CheckpointHook = std::function<void(std::size_t, const SaeParams&)>;

TrainResult train(const EmbeddingDataset& ds, const TrainConfig& cfg, const CheckpointHook& on_checkpoint = {});

/// Rows of the dataset widened to double.
Eigen::MatrixXd to_matrix(const EmbeddingDataset& ds);

}  // namespace debiaslens
