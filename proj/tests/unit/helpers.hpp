#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "debiaslens/embedding_store.hpp"
#include "debiaslens/sae.hpp"

namespace testing {

inline debiaslens::EmbeddingDataset random_dataset(std::size_t n, std::size_t d, std::uint64_t seed,
                                                   const std::string& prefix = "r") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  debiaslens::RowMatrixF m(n, d);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return debiaslens::EmbeddingDataset(std::move(m), std::move(ids));
}

inline debiaslens::SaeParams random_params(std::size_t d, std::size_t omega, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  auto fill = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng);
  };
  debiaslens::SaeParams p;
  p.w_enc.resize(d, omega);
  p.w_dec.resize(omega, d);
  fill(p.w_enc);
  fill(p.w_dec);
  Eigen::MatrixXd b(2, d);
  fill(b);
  p.b1 = b.row(0).transpose() * 0.1;
  p.b2 = b.row(1).transpose() * 0.1;
  p.prefix_schedule = {omega};
  if (omega >= 4) p.prefix_schedule = {omega / 4, omega / 2, omega};
  return p;
}

inline Eigen::VectorXd random_vector(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::VectorXd v(d);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = nd(rng);
  return v;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("debiaslens_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
