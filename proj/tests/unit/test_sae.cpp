#include <doctest.h>

#include <algorithm>
#include <set>

#include "debiaslens/errors.hpp"
#include "debiaslens/sae.hpp"
#include "helpers.hpp"

using namespace debiaslens;

namespace {

SaeParams identity_params(std::size_t d) {
  SaeParams p;
  p.w_enc = Eigen::MatrixXd::Identity(d, d);
  p.w_dec = Eigen::MatrixXd::Identity(d, d);
  p.b1 = Eigen::VectorXd::Zero(d);
  p.b2 = Eigen::VectorXd::Zero(d);
  p.prefix_schedule = {d};
  return p;
}

// Dense oracle: rectify, then pick the k largest by (value desc, index asc).
std::vector<LatentEntry> brute_top_k(const Eigen::VectorXd& pre, std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> pos;
  for (Eigen::Index j = 0; j < pre.size(); ++j) {
    if (pre[j] > 0) pos.push_back({pre[j], static_cast<std::uint32_t>(j)});
  }
  std::sort(pos.begin(), pos.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  if (pos.size() > k) pos.resize(k);
  std::vector<LatentEntry> out;
  for (auto [v, j] : pos) out.push_back({j, v});
  std::sort(out.begin(), out.end(), [](auto a, auto b) { return a.index < b.index; });
  return out;
}

}  // namespace

TEST_CASE("encode keeps only positive pre-activations") {
  const auto p = identity_params(2);
  const auto z = encode(Eigen::Vector2d(3, -1), p, 2);
  REQUIRE(z.nnz() == 1);
  CHECK(z.entries()[0] == LatentEntry{0, 3.0});
}

TEST_CASE("encode at v = b1 is empty") {
  auto p = testing::random_params(3, 6, 1);
  CHECK(encode(p.b1, p, 3).nnz() == 0);
  CHECK(active_set(p.b1, p, 3).indices.empty());
}

TEST_CASE("top-k ties go to the lower index") {
  SaeParams p;
  p.w_enc = Eigen::MatrixXd::Zero(2, 4);
  p.w_enc.row(0) << 5, 2, 2, 1;
  p.w_dec = Eigen::MatrixXd::Zero(4, 2);
  p.b1 = Eigen::VectorXd::Zero(2);
  p.b2 = Eigen::VectorXd::Zero(2);
  p.prefix_schedule = {4};
  CHECK(pre_activations(Eigen::Vector2d(1, 0), p) == Eigen::Vector4d(5, 2, 2, 1));
  const auto z = encode(Eigen::Vector2d(1, 0), p, 2);
  REQUIRE(z.nnz() == 2);
  CHECK(z.entries()[0] == LatentEntry{0, 5.0});
  CHECK(z.entries()[1] == LatentEntry{1, 2.0});
}

TEST_CASE("select_top_k matches a sort-based oracle") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(-3, 3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t omega = 1 + rng() % 12;
    Eigen::VectorXd pre(omega);
    for (Eigen::Index j = 0; j < pre.size(); ++j) pre[j] = small(rng);  // many ties
    const std::size_t k = 1 + rng() % omega;
    const auto z = select_top_k(pre, k);
    const auto expect = brute_top_k(pre, k);
    CHECK(std::vector<LatentEntry>(z.entries().begin(), z.entries().end()) == expect);
    CHECK(z.nnz() <= k);
  }
}

TEST_CASE("encode argument errors") {
  auto p = testing::random_params(3, 6, 2);
  CHECK_THROWS_AS(encode(Eigen::VectorXd::Zero(4), p, 2), ShapeError);
  CHECK_THROWS_AS(encode(Eigen::VectorXd::Zero(3), p, 0), RangeError);
  CHECK_THROWS_AS(encode(Eigen::VectorXd::Zero(3), p, 7), RangeError);
}

TEST_CASE("decode") {
  auto p = testing::random_params(3, 6, 3);
  CHECK(decode(LatentVector(6, {}), p) == p.b2);
  const Eigen::VectorXd one = decode(LatentVector(6, {{4, 1.0}}), p);
  CHECK((one - (p.w_dec.row(4).transpose() + p.b2)).norm() == doctest::Approx(0.0));
  CHECK_THROWS_AS(decode(LatentVector(5, {}), p), ShapeError);

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd dense = Eigen::VectorXd::Zero(6);
    std::vector<LatentEntry> entries;
    for (std::uint32_t j = 0; j < 6; ++j) {
      if (rng() % 2) {
        const double v = std::uniform_real_distribution<double>(-2, 2)(rng);
        dense[j] = v;
        entries.push_back({j, v});
      }
    }
    const Eigen::VectorXd expect = p.w_dec.transpose() * dense + p.b2;
    const Eigen::VectorXd got = decode(LatentVector(6, entries), p);
    CHECK((got - expect).norm() <= 1e-12 * std::max(1.0, expect.norm()));
  }
}

TEST_CASE("prefix_decode") {
  auto p = testing::random_params(3, 8, 4);
  std::mt19937_64 rng(1);
  const auto v = testing::random_vector(3, rng);
  const auto z = encode(v, p, 4);
  CHECK(prefix_decode(z, p, 8) == decode(z, p));
  CHECK(prefix_decode(LatentVector(8, {{5, 2.0}}), p, 1) == p.b2);

  const LatentVector two(8, {{0, 1.5}, {3, -0.5}});
  const Eigen::VectorXd expect = 1.5 * p.w_dec.row(0).transpose() + p.b2;
  CHECK((prefix_decode(two, p, 2) - expect).norm() < 1e-14);

  CHECK_THROWS_AS(prefix_decode(two, p, 0), RangeError);
  CHECK_THROWS_AS(prefix_decode(two, p, 9), RangeError);
}

TEST_CASE("prefix index sets nest") {
  auto p = testing::random_params(4, 16, 5);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto z = encode(testing::random_vector(4, rng), p, 6);
    std::set<std::uint32_t> prev;
    for (std::size_t m = 1; m <= 16; ++m) {
      std::set<std::uint32_t> used;
      for (const auto& e : z.entries()) {
        if (e.index < m) used.insert(e.index);
      }
      CHECK(std::includes(used.begin(), used.end(), prev.begin(), prev.end()));
      prev = used;
    }
  }
}

TEST_CASE("active set equals encode's index set and is scale invariant") {
  auto p = testing::random_params(5, 20, 6);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = testing::random_vector(5, rng);
    const auto a = active_set(v, p, 7);
    const auto z = encode(v, p, 7);
    std::vector<std::uint32_t> idx;
    for (const auto& e : z.entries()) idx.push_back(e.index);
    CHECK(a.indices == idx);
    const Eigen::VectorXd scaled = p.b1 + 3.7 * (v - p.b1);
    CHECK(active_set(scaled, p, 7) == a);
  }
}

TEST_CASE("effective linear map") {
  auto p = testing::random_params(3, 6, 7);
  const auto empty = effective_linear_map(ActiveSet{}, p);
  CHECK(empty.linear.isZero(0.0));
  CHECK(empty.offset == p.b2);

  const auto id = identity_params(2);
  const auto m = effective_linear_map(ActiveSet{{0}}, id);
  CHECK(m.linear == Eigen::Matrix2d(Eigen::Vector2d(1, 0).asDiagonal()));
  CHECK(m.offset.isZero(0.0));

  CHECK_THROWS_AS(effective_linear_map(ActiveSet{{6}}, p), RangeError);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = testing::random_vector(3, rng);
    const auto a = active_set(v, p, 3);
    const auto map = effective_linear_map(a, p);
    const Eigen::VectorXd forward = decode(encode(v, p, 3), p);
    const Eigen::VectorXd affine = map.linear * v + map.offset;
    CHECK((forward - affine).norm() <= 1e-10 * std::max(1.0, forward.norm()));
  }
}

TEST_CASE("collinear inputs sharing an active set decode collinearly") {
  auto p = testing::random_params(4, 12, 8);
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 50; ++trial) {
    const auto v = testing::random_vector(4, rng);
    const Eigen::VectorXd u = testing::random_vector(4, rng) * 1e-4;
    const auto a0 = active_set(v, p, 4);
    if (active_set(v + u, p, 4) != a0 || active_set(v + 2 * u, p, 4) != a0) continue;
    const Eigen::VectorXd y0 = decode(encode(v, p, 4), p);
    const Eigen::VectorXd y1 = decode(encode(v + u, p, 4), p);
    const Eigen::VectorXd y2 = decode(encode(v + 2 * u, p, 4), p);
    CHECK(((y2 - y1) - (y1 - y0)).norm() <= 1e-10 * std::max(1.0, y0.norm()));
    ++checked;
  }
  CHECK(checked >= 50);
}

TEST_CASE("latent vector invariants") {
  CHECK_THROWS_AS(LatentVector(4, {{2, 1.0}, {1, 1.0}}), ValidationError);
  CHECK_THROWS_AS(LatentVector(4, {{1, 1.0}, {1, 2.0}}), ValidationError);
  CHECK_THROWS_AS(LatentVector(4, {{4, 1.0}}), RangeError);
  CHECK_THROWS_AS(SparseActivation(4, {{1, -1.0}}), ValidationError);
  const LatentVector z(4, {{1, 2.0}, {3, -1.0}});
  CHECK(z.at(1) == 2.0);
  CHECK(z.at(0) == 0.0);
  CHECK(z.to_dense() == Eigen::Vector4d(0, 2, 0, -1));
}

TEST_CASE("params validation") {
  auto p = testing::random_params(3, 6, 9);
  CHECK_NOTHROW(p.validate());
  auto bad = p;
  bad.prefix_schedule = {3, 2, 6};
  CHECK_THROWS(bad.validate());
  bad = p;
  bad.prefix_schedule = {2, 4};
  CHECK_THROWS(bad.validate());
  bad = p;
  bad.w_dec(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  auto narrow = testing::random_params(4, 2, 1);
  CHECK_THROWS(narrow.validate());
}
