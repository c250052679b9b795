#include "debiaslens/sae.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "debiaslens/errors.hpp"

namespace debiaslens {

void SaeParams::validate() const {
  const auto dd = w_enc.rows();
  const auto om = w_enc.cols();
  if (dd < 1) throw ValidationError("SAE input dimension must be >= 1");
  if (om < dd) throw ValidationError("SAE dictionary size " + std::to_string(om) + " is smaller than d=" + std::to_string(dd));
  if (w_dec.rows() != om || w_dec.cols() != dd) throw ShapeError("w_dec must be omega x d");
  if (b1.size() != dd || b2.size() != dd) throw ShapeError("SAE biases must have length d");
  if (prefix_schedule.empty() || prefix_schedule.back() != static_cast<std::size_t>(om)) {
    throw ValidationError("prefix schedule must end at omega");
  }
  for (std::size_t i = 0; i < prefix_schedule.size(); ++i) {
    if (prefix_schedule[i] < 1 || prefix_schedule[i] > static_cast<std::size_t>(om)) {
      throw ValidationError("prefix depth out of [1, omega]");
    }
    if (i > 0 && prefix_schedule[i] <= prefix_schedule[i - 1]) {
      throw ValidationError("prefix schedule must be strictly increasing");
    }
  }
  if (!w_enc.allFinite() || !w_dec.allFinite() || !b1.allFinite() || !b2.allFinite()) {
    throw ValidationError("SAE parameters contain non-finite values");
  }
}

LatentVector::LatentVector(std::size_t dim, std::vector<LatentEntry> entries) : dim_(dim), entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].index >= dim_) throw RangeError("latent index " + std::to_string(entries_[i].index) + " >= " + std::to_string(dim_));
    if (i > 0 && entries_[i].index <= entries_[i - 1].index) throw ValidationError("latent indices must be strictly increasing");
  }
}

double LatentVector::at(std::size_t j) const {
  const auto it = std::lower_bound(entries_.begin(), entries_.end(), j,
                                   [](const LatentEntry& e, std::size_t idx) { return e.index < idx; });
  return (it != entries_.end() && it->index == j) ? it->value : 0.0;
}

Eigen::VectorXd LatentVector::to_dense() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
  for (const auto& e : entries_) out[e.index] = e.value;
  return out;
}

SparseActivation::SparseActivation(std::size_t dim, std::vector<LatentEntry> entries)
    : LatentVector(dim, std::move(entries)) {
  for (const auto& e : entries_) {
    if (!(e.value > 0.0)) throw ValidationError("sparse activation values must be positive");
  }
}

bool ActiveSet::contains(std::uint32_t j) const { return std::binary_search(indices.begin(), indices.end(), j); }

Eigen::VectorXd pre_activations(const Eigen::VectorXd& v, const SaeParams& params) {
  if (static_cast<std::size_t>(v.size()) != params.d()) {
    throw ShapeError("input has length " + std::to_string(v.size()) + ", SAE expects " + std::to_string(params.d()));
  }
  return params.w_enc.transpose() * (v - params.b1);
}

SparseActivation select_top_k(const Eigen::VectorXd& pre, std::size_t k) {
  const auto omega = static_cast<std::size_t>(pre.size());
  if (k < 1 || k > omega) throw RangeError("k=" + std::to_string(k) + " outside [1, " + std::to_string(omega) + "]");
  std::vector<std::uint32_t> positive;
  for (std::size_t j = 0; j < omega; ++j) {
    if (pre[static_cast<Eigen::Index>(j)] > 0.0) positive.push_back(static_cast<std::uint32_t>(j));
  }
  if (positive.size() > k) {
    const auto by_value = [&pre](std::uint32_t a, std::uint32_t b) {
      return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
    };
    std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(k - 1), positive.end(), by_value);
    positive.resize(k);
    std::sort(positive.begin(), positive.end());
  }
  std::vector<LatentEntry> entries;
  entries.reserve(positive.size());
  for (auto j : positive) entries.push_back({j, pre[j]});
  return SparseActivation(omega, std::move(entries));
}

SparseActivation encode(const Eigen::VectorXd& v, const SaeParams& params, std::size_t k) {
  return select_top_k(pre_activations(v, params), k);
}

Eigen::VectorXd prefix_decode(const LatentVector& z, const SaeParams& params, std::size_t m) {
  if (z.dim() != params.omega()) {
    throw ShapeError("latent has dimension " + std::to_string(z.dim()) + ", SAE has " + std::to_string(params.omega()));
  }
  if (m < 1 || m > params.omega()) throw RangeError("prefix depth " + std::to_string(m) + " outside [1, omega]");
  Eigen::VectorXd out = params.b2;
  for (const auto& e : z.entries()) {
    if (e.index >= m) break;
    out.noalias() += e.value * params.w_dec.row(e.index).transpose();
  }
  return out;
}

Eigen::VectorXd decode(const LatentVector& z, const SaeParams& params) { return prefix_decode(z, params, params.omega()); }

ActiveSet active_set(const Eigen::VectorXd& v, const SaeParams& params, std::size_t k) {
  ActiveSet out;
  const auto z = encode(v, params, k);
  for (const auto& e : z.entries()) out.indices.push_back(e.index);
  return out;
}

AffineMap effective_linear_map(const ActiveSet& active, const SaeParams& params) {
  const auto d = static_cast<Eigen::Index>(params.d());
  AffineMap map{Eigen::MatrixXd::Zero(d, d), Eigen::VectorXd()};
  // W_dec^T D_A W_enc^T, summed as outer products over the active latents.
  for (auto j : active.indices) {
    if (j >= params.omega()) throw RangeError("active-set index " + std::to_string(j) + " >= omega");
    map.linear.noalias() += params.w_dec.row(j).transpose() * params.w_enc.col(j).transpose();
  }
  map.offset = params.b2 - map.linear * params.b1;
  return map;
}

}  // namespace debiaslens
