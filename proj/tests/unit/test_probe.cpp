#include <doctest.h>

#include "debiaslens/errors.hpp"
#include "debiaslens/probe.hpp"
#include "helpers.hpp"
#include "probe_oracle.hpp"

using namespace debiaslens;

namespace {

ActivationMatrix from_dense(const std::vector<std::vector<double>>& dense) {
  ActivationMatrix a;
  a.omega = dense.front().size();
  a.checkpoint_sha256 = "c";
  a.dataset_sha256 = "d";
  for (std::size_t i = 0; i < dense.size(); ++i) {
    std::vector<LatentEntry> e;
    for (std::size_t j = 0; j < dense[i].size(); ++j) {
      if (dense[i][j] != 0.0) e.push_back({static_cast<std::uint32_t>(j), dense[i][j]});
    }
    a.rows.emplace_back(a.omega, e);
    a.ids.push_back("s" + std::to_string(i));
  }
  return a;
}

EffectiveSet eff(std::string g, std::vector<std::uint32_t> n) { return {std::move(g), std::move(n), 0.5, 1}; }

}  // namespace

TEST_CASE("compute_activations") {
  const auto p = testing::random_params(3, 12, 1);
  const auto ds = testing::random_dataset(1, 3, 2);
  const auto a = compute_activations(ds, p, 4);
  REQUIRE(a.n() == 1);
  CHECK(a.rows[0] == encode(ds.row(0), p, 4));
  CHECK(!a.checkpoint_sha256.empty());
  CHECK(a.dataset_sha256 == ds.payload_sha256());

  const auto big = testing::random_dataset(50, 3, 3);
  const auto x = compute_activations(big, p, 4);
  const auto y = compute_activations(big, p, 4);
  for (std::size_t i = 0; i < x.n(); ++i) {
    CHECK(x.rows[i] == y.rows[i]);
    CHECK(x.rows[i].nnz() <= 4);
  }
  CHECK_THROWS_AS(compute_activations(testing::random_dataset(2, 4, 1), p, 4), ShapeError);
}

TEST_CASE("effectiveness criterion with the floor") {
  // Group g of 4 rows; latent 0 fires in 3, latent 1 in 4, latent 2 never.
  const auto acts = from_dense({{1, 1, 0}, {1, 1, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 0}});
  const AttributeTable t{"a", {"g", "h"}, {0, 0, 0, 0, 1}};
  CHECK(effective_neurons(acts, t, "g", 0.9).neurons == std::vector<std::uint32_t>{0, 1});  // floor(3.6) = 3
  CHECK(effective_neurons(acts, t, "g", 1.0).neurons == std::vector<std::uint32_t>{1});     // floor(4) = 4
  CHECK(effective_neurons(acts, t, "g", 0.0).neurons == std::vector<std::uint32_t>{0, 1, 2});
  CHECK_THROWS_AS(effective_neurons(acts, t, "zz", 0.5), LookupError);
  CHECK_THROWS_AS(effective_neurons(acts, t, "g", 1.1), RangeError);
}

TEST_CASE("a never-firing latent passes when floor(tau * S_g) is zero") {
  // S_g = 5 and tau = 0.1: floor(0.5) = 0, and a count of 0 meets a threshold of 0.
  const auto acts = from_dense({{1, 0}, {1, 0}, {1, 0}, {1, 0}, {1, 0}, {0, 1}});
  const AttributeTable t{"a", {"g", "h"}, {0, 0, 0, 0, 0, 1}};
  const auto e = effective_neurons(acts, t, "g", 0.1);
  CHECK(e.neurons == std::vector<std::uint32_t>{0, 1});
  CHECK(e.group_size == 5);
}

TEST_CASE("group-specific set difference") {
  auto n = group_specific({eff("a", {1, 2}), eff("b", {2, 3})});
  CHECK(n[0] == std::vector<std::uint32_t>{1});
  CHECK(n[1] == std::vector<std::uint32_t>{3});
  n = group_specific({eff("a", {1, 2}), eff("b", {1, 2})});
  CHECK(n[0].empty());
  CHECK(n[1].empty());
  // Three groups sharing one latent pairwise.
  n = group_specific({eff("a", {0, 1, 4}), eff("b", {1, 2, 5}), eff("c", {0, 2, 6})});
  CHECK(n[0] == std::vector<std::uint32_t>{4});
  CHECK(n[1] == std::vector<std::uint32_t>{5});
  CHECK(n[2] == std::vector<std::uint32_t>{6});
  CHECK_THROWS_AS(group_specific({eff("a", {1})}), ArgumentError);
}

TEST_CASE("ranking by mean activation") {
  const auto acts = from_dense({{2, 1, 3}, {0, 1, 0}, {4, 1, 0}, {9, 9, 9}});
  const AttributeTable t{"a", {"g", "h"}, {0, 0, 0, 1}};
  auto r = rank_by_mean_activation(acts, t, "g", {0, 1, 2});
  REQUIRE(r.size() == 3);
  CHECK(r[0] == RankedNeuron{0, 2.0});
  CHECK(r[1] == RankedNeuron{1, 1.0});
  CHECK(r[2] == RankedNeuron{2, 1.0});  // tie with latent 1, higher index second
  CHECK(rank_by_mean_activation(acts, t, "g", {}).empty());
  CHECK_THROWS_AS(rank_by_mean_activation(acts, t, "g", {3}), RangeError);
}

TEST_CASE("hand table of 3 latents by 4 samples") {
  const auto acts = from_dense({{0.5, 2, 1}, {0.5, 0, 1}, {3, 0, 1}, {0, 1, 1}, {7, 7, 7}});
  const AttributeTable t{"a", {"g", "h"}, {0, 0, 0, 0, 1}};
  // Means: latent 0 = 4/4 = 1, latent 1 = 3/4, latent 2 = 1.
  const auto r = rank_by_mean_activation(acts, t, "g", {0, 1, 2});
  CHECK(r == std::vector<RankedNeuron>{{0, 1.0}, {2, 1.0}, {1, 0.75}});
}

TEST_CASE("report modes") {
  // Group a fires latents 1 and 0; group b fires 3 and 0.
  const auto acts = from_dense({{1, 2, 0, 0}, {1, 1, 0, 0}, {1, 0, 0, 5}, {1, 0, 0, 4}});
  const AttributeTable t{"a", {"x", "y"}, {0, 0, 1, 1}};
  const auto top = build_report(acts, t, 0.9, ProbeMode::kTopOne);
  CHECK(top.groups[0].specific == std::vector<std::uint32_t>{1});
  CHECK(top.groups[1].specific == std::vector<std::uint32_t>{3});
  CHECK(top.bias_set == std::vector<std::uint32_t>{1, 3});
  CHECK(top.groups[0].top_sample_ids == std::vector<std::string>{"s0", "s1"});
  const auto all = build_report(acts, t, 0.9, ProbeMode::kAllEffective);
  CHECK(all.bias_set == std::vector<std::uint32_t>{1, 3});
  CHECK(top.warnings.empty());
}

TEST_CASE("identical groups give an empty bias set with warnings") {
  const auto acts = from_dense({{1, 2}, {1, 2}, {1, 2}, {1, 2}});
  const AttributeTable t{"a", {"x", "y"}, {0, 1, 0, 1}};
  const auto r = build_report(acts, t, 0.9, ProbeMode::kTopOne);
  CHECK(r.bias_set.empty());
  CHECK(r.warnings.size() == 2);
  CHECK(!r.groups[0].selected);
}

TEST_CASE("empty groups are skipped with a warning") {
  const auto acts = from_dense({{1, 0}, {0, 1}, {1, 0}});
  const AttributeTable t{"a", {"x", "y", "z"}, {0, 1, 0}};
  const auto r = build_report(acts, t, 1.0, ProbeMode::kTopOne);
  CHECK(r.groups.size() == 2);
  CHECK(r.bias_set == std::vector<std::uint32_t>{0, 1});
  CHECK(r.warnings.size() == 1);
  const AttributeTable lonely{"a", {"x", "y"}, {0, kUnlabeled, 0}};
  CHECK_THROWS_AS(build_report(acts, lonely, 0.5, ProbeMode::kTopOne), ValidationError);
}

TEST_CASE("probing matches the brute-force oracle") {
  std::mt19937_64 rng(99);
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    const auto inst = testing::random_probe_instance(trial);
    const double tau = std::uniform_real_distribution<double>()(rng);
    std::string why;
    INFO("trial " << trial << " tau " << tau);
    CHECK_MESSAGE(testing::probe_matches_oracle(inst, tau, why), why);
    const double other = std::uniform_real_distribution<double>()(rng);
    CHECK(testing::effective_sets_monotone(inst, std::min(tau, other), std::max(tau, other)));
  }
}

TEST_CASE("permutation invariance and scale covariance") {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    auto inst = testing::random_probe_instance(1000 + trial);
    const auto base = build_report(inst.acts, inst.table, 0.6, ProbeMode::kTopOne);

    // Reverse the row order; labels and activations move together.
    auto perm = inst;
    std::reverse(perm.acts.rows.begin(), perm.acts.rows.end());
    std::reverse(perm.acts.ids.begin(), perm.acts.ids.end());
    std::reverse(perm.table.labels.begin(), perm.table.labels.end());
    const auto shuffled = build_report(perm.acts, perm.table, 0.6, ProbeMode::kTopOne);
    CHECK(shuffled.bias_set == base.bias_set);
    for (std::size_t g = 0; g < base.groups.size(); ++g) {
      CHECK(shuffled.groups[g].effective == base.groups[g].effective);
      CHECK(shuffled.groups[g].ranking == base.groups[g].ranking);
    }

    auto scaled = inst;
    for (auto& row : scaled.acts.rows) {
      std::vector<LatentEntry> e(row.entries().begin(), row.entries().end());
      for (auto& x : e) x.value *= 4.0;
      row = SparseActivation(row.dim(), e);
    }
    const auto s = build_report(scaled.acts, scaled.table, 0.6, ProbeMode::kTopOne);
    CHECK(s.bias_set == base.bias_set);
    for (std::size_t g = 0; g < base.groups.size(); ++g) {
      CHECK(s.groups[g].specific == base.groups[g].specific);
      CHECK(s.groups[g].selected == base.groups[g].selected);
      for (std::size_t q = 0; q < s.groups[g].ranking.size(); ++q) {
        CHECK(s.groups[g].ranking[q].mean_activation == 4.0 * base.groups[g].ranking[q].mean_activation);
      }
    }
  }
}

TEST_CASE("report JSON round trip and invariant checks") {
  const auto acts = from_dense({{1, 2, 0, 0}, {1, 1, 0, 0}, {1, 0, 0, 5}, {1, 0, 0, 4}});
  const AttributeTable t{"gender", {"x", "y"}, {0, 0, 1, 1}};
  const auto r = build_report(acts, t, 0.9, ProbeMode::kTopOne);
  const auto back = report_from_json(to_json(r));
  CHECK(to_json(back) == to_json(r));

  auto broken = to_json(r);
  broken["bias_set"] = {1};
  CHECK_THROWS_AS(report_from_json(broken), ValidationError);
  broken = to_json(r);
  broken["groups"][1]["specific"] = {1, 3};
  CHECK_THROWS_AS(report_from_json(broken), ValidationError);
  broken = to_json(r);
  broken.erase("groups");
  CHECK_THROWS_AS(report_from_json(broken), FormatError);
}

TEST_CASE("intersectional union of bias sets") {
  SocialNeuronReport a, b;
  a.bias_set = {1, 5};
  b.bias_set = {2, 5};
  CHECK(union_bias_sets({a, b}) == std::vector<std::uint32_t>{1, 2, 5});
}
