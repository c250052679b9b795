#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace debiaslens {

/// Sparse autoencoder parameters.
///
///   encode: z = topk(relu(w_enc^T (v - b1)))
///   decode: v_hat = w_dec^T z + b2
///
/// w_enc is d x omega, w_dec is omega x d (row j is latent j's decoder
/// direction). prefix_schedule lists the nested dictionary depths used by
/// the multi-scale reconstruction loss; it is strictly increasing and ends
/// at omega.
struct SaeParams {
  Eigen::MatrixXd w_enc;
  Eigen::MatrixXd w_dec;
  Eigen::VectorXd b1;
  Eigen::VectorXd b2;
  std::vector<std::size_t> prefix_schedule;

  std::size_t d() const { return static_cast<std::size_t>(w_enc.rows()); }
  std::size_t omega() const { return static_cast<std::size_t>(w_enc.cols()); }

  /// Throws ValidationError/ShapeError on any broken invariant.
  void validate() const;
};

struct LatentEntry {
  std::uint32_t index;
  double value;

  friend bool operator==(const LatentEntry&, const LatentEntry&) = default;
};

/// Arbitrary sparse latent vector: strictly increasing indices, nonzero
/// values of either sign. Produced by modulation.
class LatentVector {
 public:
  LatentVector() = default;
  LatentVector(std::size_t dim, std::vector<LatentEntry> entries);

  std::size_t dim() const { return dim_; }
  std::span<const LatentEntry> entries() const { return entries_; }
  std::size_t nnz() const { return entries_.size(); }
  /// Dense value at latent j (0 when not stored).
  double at(std::size_t j) const;
  Eigen::VectorXd to_dense() const;

  friend bool operator==(const LatentVector&, const LatentVector&) = default;

 protected:
  std::size_t dim_ = 0;
  std::vector<LatentEntry> entries_;
};

/// Encoder output: a LatentVector whose stored values are all positive.
class SparseActivation : public LatentVector {
 public:
  SparseActivation() = default;
  SparseActivation(std::size_t dim, std::vector<LatentEntry> entries);
};

/// Indices of the latents firing for one input, sorted ascending.
struct ActiveSet {
  std::vector<std::uint32_t> indices;

  bool contains(std::uint32_t j) const;
  friend bool operator==(const ActiveSet&, const ActiveSet&) = default;
};

/// d x d linear part and offset of the decoder-after-encoder map on one
/// active-set region: decode(encode(v)) = linear * v + offset.
struct AffineMap {
  Eigen::MatrixXd linear;
  Eigen::VectorXd offset;
};

/// w_enc^T (v - b1), before the rectifier.
Eigen::VectorXd pre_activations(const Eigen::VectorXd& v, const SaeParams& params);

/// Keeps the k largest positive entries of `pre` (ties: lower index wins).
SparseActivation select_top_k(const Eigen::VectorXd& pre, std::size_t k);

SparseActivation encode(const Eigen::VectorXd& v, const SaeParams& params, std::size_t k);
Eigen::VectorXd decode(const LatentVector& z, const SaeParams& params);
/// Decode using only latents with index < m (the first m dictionary slots).
Eigen::VectorXd prefix_decode(const LatentVector& z, const SaeParams& params, std::size_t m);
ActiveSet active_set(const Eigen::VectorXd& v, const SaeParams& params, std::size_t k);
AffineMap effective_linear_map(const ActiveSet& active, const SaeParams& params);

}  // namespace debiaslens
