#include "debiaslens/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "debiaslens/errors.hpp"

namespace debiaslens {

using json = nlohmann::json;

void PlantedBiasSpec::validate() const {
  if (d < 1) throw ConfigError("planted spec: d must be >= 1");
  if (groups.empty()) throw ConfigError("planted spec: at least one group required");
  if (!(noise_scale >= 0.0)) throw ConfigError("planted spec: noise_scale must be >= 0");
  if (!(correlation >= 0.0 && correlation < 1.0)) throw ConfigError("planted spec: correlation must lie in [0, 1)");
  if (base_offset.size() != 0 && static_cast<std::size_t>(base_offset.size()) != d) {
    throw ConfigError("planted spec: base_offset must have length d");
  }
  std::size_t generated = 0;
  for (const auto& g : groups) {
    if (g.count < 2) throw ConfigError("planted spec: group '" + g.name + "' needs count >= 2");
    if (!(g.strength > 0.0)) throw ConfigError("planted spec: group '" + g.name + "' needs strength > 0");
    if (g.direction.size() == 0) {
      ++generated;
    } else if (static_cast<std::size_t>(g.direction.size()) != d || std::abs(g.direction.norm() - 1.0) > 1e-9) {
      throw ConfigError("planted spec: direction of '" + g.name + "' must be a unit vector of length d");
    }
  }
  if (generated > d) throw ConfigError("planted spec: cannot generate more orthogonal directions than d");
}

PlantedBiasSpec planted_spec_from_json(const json& doc) {
  PlantedBiasSpec spec;
  try {
    spec.attribute = doc.value("attribute", std::string("group"));
    spec.d = doc.at("d").get<std::size_t>();
    spec.noise_scale = doc.value("noise_scale", 0.1);
    spec.correlation = doc.value("correlation", 0.0);
    spec.seed = doc.value("seed", std::uint64_t{0});
    if (doc.contains("base_offset")) {
      const auto v = doc.at("base_offset").get<std::vector<double>>();
      spec.base_offset = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    for (const auto& g : doc.at("groups")) {
      PlantedGroup group;
      group.name = g.at("name").get<std::string>();
      group.count = g.at("count").get<std::size_t>();
      group.strength = g.value("strength", 1.0);
      if (g.contains("direction")) {
        const auto v = g.at("direction").get<std::vector<double>>();
        group.direction = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      }
      spec.groups.push_back(std::move(group));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("planted spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

json to_json(const PlantedBiasSpec& spec) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json groups = json::array();
  for (const auto& g : spec.groups) {
    json entry = {{"name", g.name}, {"count", g.count}, {"strength", g.strength}};
    if (g.direction.size() != 0) entry["direction"] = vec(g.direction);
    groups.push_back(entry);
  }
  json doc = {{"attribute", spec.attribute}, {"d", spec.d},       {"groups", groups},
              {"noise_scale", spec.noise_scale}, {"correlation", spec.correlation}, {"seed", spec.seed}};
  if (spec.base_offset.size() != 0) doc["base_offset"] = vec(spec.base_offset);
  return doc;
}

PlantedBiasSpec resolve_spec(const PlantedBiasSpec& spec) {
  spec.validate();
  PlantedBiasSpec out = spec;
  const auto d = static_cast<Eigen::Index>(spec.d);
  if (out.base_offset.size() == 0) out.base_offset = Eigen::VectorXd::Zero(d);

  // Gram-Schmidt over seeded Gaussian draws, orthogonal to any given direction.
  std::mt19937_64 rng(spec.seed ^ 0xD1B54A32D192ED03ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Eigen::VectorXd> basis;
  for (const auto& g : out.groups) {
    if (g.direction.size() != 0) basis.push_back(g.direction);
  }
  std::vector<Eigen::VectorXd> generated;
  for (auto& g : out.groups) {
    if (g.direction.size() != 0) continue;
    Eigen::VectorXd v(d);
    for (int attempt = 0;; ++attempt) {
      for (Eigen::Index i = 0; i < d; ++i) v[i] = normal(rng);
      for (const auto& b : basis) v -= b.dot(v) / b.squaredNorm() * b;
      if (v.norm() > 1e-6) break;
      if (attempt > 100) throw ConfigError("planted spec: could not generate an orthogonal direction");
    }
    v.normalize();
    basis.push_back(v);
    generated.push_back(v);
  }
  if (spec.correlation > 0.0 && generated.size() > 1) {
    const double c = spec.correlation;
    const double s = std::sqrt(1.0 - c * c);
    for (std::size_t i = 1; i < generated.size(); ++i) generated[i] = c * generated[0] + s * generated[i];
  }
  std::size_t next = 0;
  for (auto& g : out.groups) {
    if (g.direction.size() == 0) g.direction = generated[next++].normalized();
  }
  return out;
}

SyntheticData generate_dataset(const PlantedBiasSpec& spec) {
  const auto resolved = resolve_spec(spec);
  const auto d = static_cast<Eigen::Index>(spec.d);
  std::size_t n = 0;
  for (const auto& g : resolved.groups) n += g.count;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Eigen::VectorXd> rows;
  std::vector<std::string> ids;
  std::vector<int> labels;
  rows.reserve(n);
  for (std::size_t g = 0; g < resolved.groups.size(); ++g) {
    const auto& group = resolved.groups[g];
    const Eigen::VectorXd center = resolved.base_offset + group.strength * group.direction;
    for (std::size_t i = 0; i < group.count; ++i) {
      Eigen::VectorXd x = center;
      for (Eigen::Index c = 0; c < d; ++c) x[c] += resolved.noise_scale * normal(rng);
      rows.push_back(std::move(x));
      ids.push_back(group.name + "_" + std::to_string(i));
      labels.push_back(static_cast<int>(g));
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  RowMatrixF matrix(static_cast<Eigen::Index>(n), d);
  std::vector<std::string> shuffled_ids;
  AttributeTable table{resolved.attribute, {}, {}};
  for (const auto& g : resolved.groups) table.groups.push_back(g.name);
  for (std::size_t r = 0; r < n; ++r) {
    matrix.row(static_cast<Eigen::Index>(r)) = rows[order[r]].cast<float>().transpose();
    shuffled_ids.push_back(ids[order[r]]);
    table.labels.push_back(labels[order[r]]);
  }

  const auto groups = static_cast<Eigen::Index>(resolved.groups.size());
  Eigen::MatrixXd dots(groups, groups);
  for (Eigen::Index a = 0; a < groups; ++a)
    for (Eigen::Index b = 0; b < groups; ++b)
      dots(a, b) = resolved.groups[static_cast<std::size_t>(a)].direction.dot(resolved.groups[static_cast<std::size_t>(b)].direction);

  return SyntheticData{EmbeddingDataset(std::move(matrix), std::move(shuffled_ids)), std::move(table), resolved, dots};
}

std::vector<BiasedQuery> generate_biased_queries(const PlantedBiasSpec& spec, std::size_t per_group, double bias_mix,
                                                 double query_noise) {
  if (!(bias_mix >= 0.0 && bias_mix <= 1.0)) throw RangeError("bias_mix must lie in [0, 1]");
  const auto resolved = resolve_spec(spec);
  if (query_noise < 0.0) query_noise = 0.1 * resolved.noise_scale;
  std::mt19937_64 rng(spec.seed ^ 0x94D049BB133111EBULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<BiasedQuery> out;
  for (const auto& g : resolved.groups) {
    for (std::size_t i = 0; i < per_group; ++i) {
      Eigen::VectorXd q = resolved.base_offset + bias_mix * g.direction;
      for (Eigen::Index c = 0; c < q.size(); ++c) q[c] += query_noise * normal(rng);
      out.push_back({"neutral_" + g.name + "_" + std::to_string(i), g.name, std::move(q)});
    }
  }
  return out;
}

std::vector<Query> as_queries(const std::vector<BiasedQuery>& queries) {
  std::vector<Query> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back({q.id, q.vector});
  return out;
}

EmbeddingDataset queries_dataset(const std::vector<BiasedQuery>& queries) {
  if (queries.empty()) throw ValidationError("no queries to store");
  RowMatrixF rows(static_cast<Eigen::Index>(queries.size()), queries.front().vector.size());
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = queries[i].vector.cast<float>().transpose();
    ids.push_back(queries[i].id);
  }
  return EmbeddingDataset(std::move(rows), std::move(ids));
}

std::vector<std::optional<double>> oracle_max_skew(const EmbeddingDataset& gallery, const AttributeTable& table,
                                                   const std::vector<Query>& queries, std::size_t k) {
  const std::size_t n = gallery.n();
  const std::size_t groups = table.group_count();
  auto length = [](const Eigen::VectorXd& v) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += v[i] * v[i];
    return std::sqrt(s);
  };

  std::vector<std::vector<double>> sim(queries.size(), std::vector<double>(n));
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const double qn = length(queries[q].vector);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::VectorXd x = gallery.row(i);
      double dot = 0.0;
      for (Eigen::Index c = 0; c < x.size(); ++c) dot += queries[q].vector[c] * x[c];
      sim[q][i] = dot / (qn * length(x));
    }
  }

  std::vector<std::optional<double>> out;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[q][a] > sim[q][b]; });
    const std::size_t keep = std::min(k, n);
    std::vector<double> counts(groups, 0.0);
    for (std::size_t r = 0; r < keep; ++r) counts[static_cast<std::size_t>(table.labels[order[r]])] += 1.0;
    std::optional<double> best;
    for (std::size_t a = 0; a < groups; ++a) {
      if (counts[a] == 0.0) continue;
      const double skew = std::log((counts[a] / static_cast<double>(keep)) * static_cast<double>(groups));
      if (!best || skew > *best) best = skew;
    }
    out.push_back(best);
  }
  return out;
}

std::vector<std::optional<double>> oracle_expected_skew(const PlantedBiasSpec& spec,
                                                        const std::vector<BiasedQuery>& queries, std::size_t k) {
  const auto data = generate_dataset(spec);
  return oracle_max_skew(data.dataset, data.labels, as_queries(queries), k);
}

}  // namespace debiaslens
