#include "debiaslens/probe.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>

#include "debiaslens/checkpoint.hpp"
#include "debiaslens/errors.hpp"
#include "debiaslens/parallel.hpp"

namespace debiaslens {

using json = nlohmann::json;

std::string to_string(ProbeMode mode) { return mode == ProbeMode::kTopOne ? "top1" : "all"; }

ProbeMode probe_mode_from_string(const std::string& text) {
  if (text == "top1") return ProbeMode::kTopOne;
  if (text == "all") return ProbeMode::kAllEffective;
  throw ConfigError("unknown probe mode '" + text + "' (expected top1 or all)");
}

ActivationMatrix compute_activations(const EmbeddingDataset& ds, const SaeParams& params, std::size_t k) {
  if (ds.d() != params.d()) {
    throw ShapeError("dataset dimension " + std::to_string(ds.d()) + " does not match SAE dimension " +
                     std::to_string(params.d()));
  }
  ActivationMatrix acts;
  acts.omega = params.omega();
  acts.rows.resize(ds.n());
  acts.ids = ds.ids();
  parallel_for(ds.n(), [&](std::size_t i) { acts.rows[i] = encode(ds.row(i), params, k); });
  acts.checkpoint_sha256 = checkpoint_id(params);
  acts.dataset_sha256 = ds.payload_sha256();
  return acts;
}

namespace {

std::vector<std::size_t> group_rows(const ActivationMatrix& acts, const AttributeTable& table, const std::string& group) {
  if (table.labels.size() != acts.n()) throw ShapeError("label table does not match activation rows");
  return table.members(table.group_index(group));
}

}  // namespace

EffectiveSet effective_neurons(const ActivationMatrix& acts, const AttributeTable& table, const std::string& group,
                               double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw RangeError("tau must lie in [0, 1]");
  const auto rows = group_rows(acts, table, group);
  if (rows.empty()) throw ValidationError("group '" + group + "' has no labeled samples");

  std::vector<std::size_t> count(acts.omega, 0);
  for (auto i : rows)
    for (const auto& e : acts.rows[i].entries()) ++count[e.index];
  const auto threshold = static_cast<std::size_t>(std::floor(tau * static_cast<double>(rows.size())));

  EffectiveSet out{group, {}, tau, rows.size()};
  for (std::size_t j = 0; j < acts.omega; ++j) {
    if (count[j] >= threshold) out.neurons.push_back(static_cast<std::uint32_t>(j));
  }
  return out;
}

std::vector<std::vector<std::uint32_t>> group_specific(const std::vector<EffectiveSet>& effective_sets) {
  if (effective_sets.size() < 2) throw ArgumentError("group-specific neurons need at least two groups");
  std::vector<std::vector<std::uint32_t>> out;
  out.reserve(effective_sets.size());
  for (std::size_t g = 0; g < effective_sets.size(); ++g) {
    std::vector<std::uint32_t> others;
    for (std::size_t h = 0; h < effective_sets.size(); ++h) {
      if (h == g) continue;
      std::vector<std::uint32_t> merged;
      std::set_union(others.begin(), others.end(), effective_sets[h].neurons.begin(), effective_sets[h].neurons.end(),
                     std::back_inserter(merged));
      others = std::move(merged);
    }
    std::vector<std::uint32_t> specific;
    std::set_difference(effective_sets[g].neurons.begin(), effective_sets[g].neurons.end(), others.begin(),
                        others.end(), std::back_inserter(specific));
    out.push_back(std::move(specific));
  }
  return out;
}

std::vector<RankedNeuron> rank_by_mean_activation(const ActivationMatrix& acts, const AttributeTable& table,
                                                  const std::string& group,
                                                  const std::vector<std::uint32_t>& candidates) {
  const auto rows = group_rows(acts, table, group);
  for (auto j : candidates) {
    if (j >= acts.omega) throw RangeError("candidate latent " + std::to_string(j) + " >= omega");
  }
  if (candidates.empty()) return {};
  if (rows.empty()) throw ValidationError("group '" + group + "' has no labeled samples");

  std::vector<RankedNeuron> ranking;
  ranking.reserve(candidates.size());
  for (auto j : candidates) {
    double sum = 0.0;
    for (auto i : rows) sum += acts.rows[i].at(j);
    ranking.push_back({j, sum / static_cast<double>(rows.size())});
  }
  std::sort(ranking.begin(), ranking.end(), [](const RankedNeuron& a, const RankedNeuron& b) {
    return a.mean_activation > b.mean_activation || (a.mean_activation == b.mean_activation && a.index < b.index);
  });
  return ranking;
}

SocialNeuronReport build_report(const ActivationMatrix& acts, const AttributeTable& table, double tau,
                                ProbeMode mode, std::size_t top_samples) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw RangeError("tau must lie in [0, 1]");
  SocialNeuronReport report;
  report.attribute = table.attribute;
  report.mode = mode;
  report.tau = tau;
  report.omega = acts.omega;
  report.checkpoint_sha256 = acts.checkpoint_sha256;
  report.dataset_sha256 = acts.dataset_sha256;

  std::vector<EffectiveSet> effective;
  for (std::size_t g = 0; g < table.group_count(); ++g) {
    if (table.group_size(g) == 0) {
      report.warnings.push_back("group '" + table.groups[g] + "' has no labeled samples; excluded from probing");
      continue;
    }
    effective.push_back(effective_neurons(acts, table, table.groups[g], tau));
  }
  if (effective.size() < 2) {
    throw ValidationError("attribute '" + table.attribute + "' needs at least two groups with labeled samples");
  }
  const auto specific = group_specific(effective);

  for (std::size_t g = 0; g < effective.size(); ++g) {
    GroupProbe probe;
    probe.group = effective[g].group;
    probe.group_size = effective[g].group_size;
    probe.effective = effective[g].neurons;
    probe.specific = specific[g];
    probe.ranking = rank_by_mean_activation(acts, table, probe.group, probe.specific);
    if (probe.ranking.empty()) {
      report.warnings.push_back("group '" + probe.group + "': no specific neuron");
    } else {
      const auto j = probe.ranking.front().index;
      probe.selected = j;
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < acts.n(); ++i) {
        if (acts.rows[i].at(j) > 0.0) order.push_back(i);
      }
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return acts.rows[a].at(j) > acts.rows[b].at(j); });
      if (order.size() > top_samples) order.resize(top_samples);
      for (auto i : order) probe.top_sample_ids.push_back(acts.ids[i]);
    }
    report.groups.push_back(std::move(probe));
  }

  for (const auto& probe : report.groups) {
    if (mode == ProbeMode::kTopOne) {
      if (probe.selected) report.bias_set.push_back(*probe.selected);
    } else {
      report.bias_set.insert(report.bias_set.end(), probe.specific.begin(), probe.specific.end());
    }
  }
  std::sort(report.bias_set.begin(), report.bias_set.end());
  report.bias_set.erase(std::unique(report.bias_set.begin(), report.bias_set.end()), report.bias_set.end());
  check_report_invariants(report);
  return report;
}

void check_report_invariants(const SocialNeuronReport& report) {
  std::vector<std::uint32_t> expected;
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const auto& probe = report.groups[g];
    for (std::size_t h = g + 1; h < report.groups.size(); ++h) {
      std::vector<std::uint32_t> overlap;
      std::set_intersection(probe.specific.begin(), probe.specific.end(), report.groups[h].specific.begin(),
                            report.groups[h].specific.end(), std::back_inserter(overlap));
      if (!overlap.empty()) throw ValidationError("specific sets of '" + probe.group + "' and '" + report.groups[h].group + "' overlap");
    }
    if (!std::includes(probe.effective.begin(), probe.effective.end(), probe.specific.begin(), probe.specific.end())) {
      throw ValidationError("specific set of '" + probe.group + "' is not inside its effective set");
    }
    if (probe.selected) {
      if (!std::binary_search(probe.specific.begin(), probe.specific.end(), *probe.selected)) {
        throw ValidationError("selected neuron of '" + probe.group + "' is not group-specific");
      }
      const bool leads = !probe.ranking.empty() && probe.ranking.front().index == *probe.selected;
      if (!leads || std::any_of(probe.ranking.begin(), probe.ranking.end(), [&](const RankedNeuron& r) {
            return r.mean_activation > probe.ranking.front().mean_activation;
          })) {
        throw ValidationError("selected neuron of '" + probe.group + "' does not attain the maximum mean");
      }
    } else if (!probe.specific.empty()) {
      throw ValidationError("group '" + probe.group + "' has specific neurons but none selected");
    }
    if (report.mode == ProbeMode::kTopOne) {
      if (probe.selected) expected.push_back(*probe.selected);
    } else {
      expected.insert(expected.end(), probe.specific.begin(), probe.specific.end());
    }
  }
  std::sort(expected.begin(), expected.end());
  expected.erase(std::unique(expected.begin(), expected.end()), expected.end());
  if (expected != report.bias_set) throw ValidationError("bias set does not match the probe mode");
}

std::vector<std::uint32_t> union_bias_sets(const std::vector<SocialNeuronReport>& reports) {
  std::vector<std::uint32_t> out;
  for (const auto& r : reports) out.insert(out.end(), r.bias_set.begin(), r.bias_set.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

json to_json(const SocialNeuronReport& report) {
  json groups = json::array();
  for (const auto& g : report.groups) {
    json ranking = json::array();
    for (const auto& r : g.ranking) ranking.push_back({{"neuron", r.index}, {"mean_activation", r.mean_activation}});
    groups.push_back({{"group", g.group},
                      {"group_size", g.group_size},
                      {"effective", g.effective},
                      {"specific", g.specific},
                      {"ranking", ranking},
                      {"selected", g.selected ? json(*g.selected) : json(nullptr)},
                      {"top_sample_ids", g.top_sample_ids}});
  }
  return json{{"attribute", report.attribute},
              {"mode", to_string(report.mode)},
              {"tau", report.tau},
              {"omega", report.omega},
              {"provenance", {{"checkpoint_sha256", report.checkpoint_sha256}, {"dataset_sha256", report.dataset_sha256}}},
              {"groups", groups},
              {"bias_set", report.bias_set},
              {"warnings", report.warnings}};
}

SocialNeuronReport report_from_json(const json& doc) {
  SocialNeuronReport report;
  try {
    report.attribute = doc.at("attribute").get<std::string>();
    report.mode = probe_mode_from_string(doc.at("mode").get<std::string>());
    report.tau = doc.at("tau").get<double>();
    report.omega = doc.at("omega").get<std::size_t>();
    report.checkpoint_sha256 = doc.at("provenance").at("checkpoint_sha256").get<std::string>();
    report.dataset_sha256 = doc.at("provenance").at("dataset_sha256").get<std::string>();
    for (const auto& g : doc.at("groups")) {
      GroupProbe probe;
      probe.group = g.at("group").get<std::string>();
      probe.group_size = g.at("group_size").get<std::size_t>();
      probe.effective = g.at("effective").get<std::vector<std::uint32_t>>();
      probe.specific = g.at("specific").get<std::vector<std::uint32_t>>();
      for (const auto& r : g.at("ranking")) {
        probe.ranking.push_back({r.at("neuron").get<std::uint32_t>(), r.at("mean_activation").get<double>()});
      }
      if (!g.at("selected").is_null()) probe.selected = g.at("selected").get<std::uint32_t>();
      probe.top_sample_ids = g.value("top_sample_ids", std::vector<std::string>{});
      report.groups.push_back(std::move(probe));
    }
    report.bias_set = doc.at("bias_set").get<std::vector<std::uint32_t>>();
    report.warnings = doc.value("warnings", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw FormatError(std::string("social neuron report: ") + e.what());
  }
  check_report_invariants(report);
  return report;
}

}  // namespace debiaslens
