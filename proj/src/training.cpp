#include "debiaslens/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "debiaslens/errors.hpp"

namespace debiaslens {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (expansion_factor < 1) throw ConfigError("expansion_factor must be >= 1");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (!(l1_weight >= 0.0)) throw ConfigError("l1_weight must be >= 0");
  if (!(aux_weight >= 0.0)) throw ConfigError("aux_weight must be >= 0");
  if (aux_k < 1) throw ConfigError("aux_k must be >= 1");
  if (group_fractions.empty()) throw ConfigError("group_fractions must be non-empty");
  double sum = 0.0;
  for (double f : group_fractions) {
    if (!(f > 0.0)) throw ConfigError("group_fractions entries must be > 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("group_fractions must sum to 1 (got " + std::to_string(sum) + ")");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be finite and >= 0");
  if (decay_start() >= steps) throw ConfigError("lr_decay_start must be < steps");
  if (dead_after_steps < 1) throw ConfigError("dead_after_steps must be >= 1");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
}

json to_json(const TrainConfig& cfg) {
  return json{{"expansion_factor", cfg.expansion_factor},
              {"k", cfg.k},
              {"l1_weight", cfg.l1_weight},
              {"aux_weight", cfg.aux_weight},
              {"aux_k", cfg.aux_k},
              {"group_fractions", cfg.group_fractions},
              {"steps", cfg.steps},
              {"batch_size", cfg.batch_size},
              {"learning_rate", cfg.learning_rate},
              {"lr_decay_start", cfg.decay_start()},
              {"dead_after_steps", cfg.dead_after_steps},
              {"seed", cfg.seed},
              {"normalize_decoder", cfg.normalize_decoder},
              {"sample_with_replacement", cfg.sample_with_replacement},
              {"log_every", cfg.log_every},
              {"checkpoint_every", cfg.checkpoint_every}};
}

TrainConfig train_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("training config must be a JSON object");
  static const std::set<std::string> known = {
      "expansion_factor", "k", "l1_weight", "aux_weight", "aux_k", "group_fractions", "steps", "batch_size",
      "learning_rate", "lr_decay_start", "dead_after_steps", "seed", "normalize_decoder",
      "sample_with_replacement", "log_every", "checkpoint_every"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown training config key '" + key + "'");
  }
  TrainConfig cfg;
  try {
    auto read = [&doc](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
    };
    read("expansion_factor", cfg.expansion_factor);
    read("k", cfg.k);
    read("l1_weight", cfg.l1_weight);
    read("aux_weight", cfg.aux_weight);
    read("aux_k", cfg.aux_k);
    read("group_fractions", cfg.group_fractions);
    read("steps", cfg.steps);
    read("batch_size", cfg.batch_size);
    read("learning_rate", cfg.learning_rate);
    if (doc.contains("lr_decay_start") && !doc.at("lr_decay_start").is_null()) {
      cfg.lr_decay_start = doc.at("lr_decay_start").get<std::size_t>();
    }
    read("dead_after_steps", cfg.dead_after_steps);
    read("seed", cfg.seed);
    read("normalize_decoder", cfg.normalize_decoder);
    read("sample_with_replacement", cfg.sample_with_replacement);
    read("log_every", cfg.log_every);
    read("checkpoint_every", cfg.checkpoint_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

DeadLatentTracker::DeadLatentTracker(std::size_t omega, std::size_t dead_after_steps)
    : steps_since_fire_(omega, 0), dead_after_(dead_after_steps) {}

std::size_t DeadLatentTracker::dead_count() const {
  return static_cast<std::size_t>(
      std::count_if(steps_since_fire_.begin(), steps_since_fire_.end(), [this](auto s) { return s >= dead_after_; }));
}

void DeadLatentTracker::record_step(const std::vector<bool>& fired) {
  if (fired.size() != steps_since_fire_.size()) throw ShapeError("firing mask does not match tracker size");
  for (std::size_t j = 0; j < fired.size(); ++j) steps_since_fire_[j] = fired[j] ? 0 : steps_since_fire_[j] + 1;
}

std::string TrainLog::to_jsonl() const {
  std::ostringstream out;
  for (const auto& r : records) {
    json line = {{"step", r.step},
                 {"recon", r.loss.recon},
                 {"l1", r.loss.l1},
                 {"aux", r.loss.aux},
                 {"total", r.loss.total},
                 {"dead_latents", r.dead_latents},
                 {"learning_rate", r.learning_rate},
                 {"decoder_renormalized", decoder_renormalized}};
    out << line.dump() << '\n';
  }
  return out.str();
}

std::vector<std::size_t> prefix_schedule_for(std::size_t omega, const std::vector<double>& fractions) {
  std::vector<std::size_t> schedule;
  std::size_t total = 0;
  for (double f : fractions) {
    total += static_cast<std::size_t>(std::ceil(f * static_cast<double>(omega)));
    const std::size_t depth = std::min(total, omega);
    if (depth >= 1 && (schedule.empty() || depth > schedule.back())) schedule.push_back(depth);
  }
  if (schedule.empty() || schedule.back() != omega) schedule.push_back(omega);
  return schedule;
}

SaeParams init_params(std::size_t d, const TrainConfig& cfg, const Eigen::MatrixXd& sample) {
  if (sample.rows() < 1) throw ArgumentError("init_params needs a non-empty sample");
  if (static_cast<std::size_t>(sample.cols()) != d) throw ShapeError("init sample has the wrong dimension");
  const std::size_t omega = cfg.expansion_factor * d;
  const auto dd = static_cast<Eigen::Index>(d);
  const auto om = static_cast<Eigen::Index>(omega);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SaeParams p;
  p.w_dec.resize(om, dd);
  for (Eigen::Index j = 0; j < om; ++j) {
    double norm = 0.0;
    do {
      for (Eigen::Index c = 0; c < dd; ++c) p.w_dec(j, c) = normal(rng);
      norm = p.w_dec.row(j).norm();
    } while (norm == 0.0);
    p.w_dec.row(j) /= norm;
  }
  p.w_enc = p.w_dec.transpose();
  p.b1 = sample.colwise().mean().transpose();
  p.b2 = Eigen::VectorXd::Zero(dd);
  p.prefix_schedule = prefix_schedule_for(omega, cfg.group_fractions);
  p.validate();
  return p;
}

namespace {

void check_batch(const Eigen::MatrixXd& batch, const SaeParams& params) {
  if (batch.rows() < 1) throw ArgumentError("empty batch");
  if (static_cast<std::size_t>(batch.cols()) != params.d()) throw ShapeError("batch rows have the wrong dimension");
}

// The aux_k dead latents with the largest positive pre-activations, sorted
// by index.
std::vector<std::uint32_t> dead_top(const Eigen::VectorXd& pre, const DeadLatentTracker& tracker, std::size_t aux_k) {
  std::vector<std::uint32_t> dead;
  for (std::size_t j = 0; j < tracker.omega(); ++j) {
    if (tracker.is_dead(j) && pre[static_cast<Eigen::Index>(j)] > 0.0) dead.push_back(static_cast<std::uint32_t>(j));
  }
  if (dead.size() > aux_k) {
    const auto by_value = [&pre](std::uint32_t a, std::uint32_t b) {
      return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
    };
    std::nth_element(dead.begin(), dead.begin() + static_cast<std::ptrdiff_t>(aux_k - 1), dead.end(), by_value);
    dead.resize(aux_k);
    std::sort(dead.begin(), dead.end());
  }
  return dead;
}

}  // namespace

double matryoshka_recon_loss(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k) {
  check_batch(batch, params);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const Eigen::VectorXd v = batch.row(i).transpose();
    const auto z = encode(v, params, k);
    for (auto m : params.prefix_schedule) sum += (v - prefix_decode(z, params, m)).squaredNorm();
  }
  return sum / static_cast<double>(batch.rows());
}

double sparsity_penalty(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k, double lambda) {
  check_batch(batch, params);
  if (lambda == 0.0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const auto z = encode(batch.row(i).transpose(), params, k);
    for (const auto& e : z.entries()) sum += e.value;
  }
  return lambda * sum / static_cast<double>(batch.rows());
}

double aux_loss(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k,
                const DeadLatentTracker& tracker, std::size_t aux_k, double beta) {
  check_batch(batch, params);
  if (tracker.omega() != params.omega()) throw ShapeError("tracker size does not match omega");
  if (beta == 0.0 || tracker.dead_count() == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const Eigen::VectorXd v = batch.row(i).transpose();
    const Eigen::VectorXd pre = pre_activations(v, params);
    const Eigen::VectorXd residual = v - decode(select_top_k(pre, k), params);
    Eigen::VectorXd e_hat = Eigen::VectorXd::Zero(v.size());
    for (auto j : dead_top(pre, tracker, aux_k)) e_hat.noalias() += pre[j] * params.w_dec.row(j).transpose();
    sum += (residual - e_hat).squaredNorm();
  }
  return beta * sum / static_cast<double>(batch.rows());
}

std::vector<SampleMask> compute_masks(const Eigen::MatrixXd& batch, const SaeParams& params, std::size_t k,
                                      const DeadLatentTracker& tracker, std::size_t aux_k) {
  check_batch(batch, params);
  const bool any_dead = tracker.dead_count() > 0;
  const Eigen::MatrixXd pre_all = (batch.rowwise() - params.b1.transpose()) * params.w_enc;
  std::vector<SampleMask> masks(static_cast<std::size_t>(batch.rows()));
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const Eigen::VectorXd pre = pre_all.row(i).transpose();
    auto& mask = masks[static_cast<std::size_t>(i)];
    const auto z = select_top_k(pre, k);
    for (const auto& e : z.entries()) mask.selected.push_back(e.index);
    mask.aux_active = any_dead;
    if (any_dead) mask.aux = dead_top(pre, tracker, aux_k);
  }
  return masks;
}

LossComponents masked_loss_and_grad(const Eigen::MatrixXd& batch, const SaeParams& params,
                                    const std::vector<SampleMask>& masks, const LossWeights& weights,
                                    ParamGrads& grads) {
  check_batch(batch, params);
  if (masks.size() != static_cast<std::size_t>(batch.rows())) throw ShapeError("one mask per batch row required");
  const auto d = static_cast<Eigen::Index>(params.d());
  const auto& schedule = params.prefix_schedule;
  const std::size_t levels = schedule.size();

  grads.w_enc = Eigen::MatrixXd::Zero(params.w_enc.rows(), params.w_enc.cols());
  grads.w_dec = Eigen::MatrixXd::Zero(params.w_dec.rows(), params.w_dec.cols());
  grads.b1 = Eigen::VectorXd::Zero(d);
  grads.b2 = Eigen::VectorXd::Zero(d);

  LossComponents loss;
  std::vector<Eigen::VectorXd> residual(levels), suffix(levels + 1);
  std::vector<double> z, a, gz, ga;

  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const auto& mask = masks[static_cast<std::size_t>(i)];
    const Eigen::VectorXd v = batch.row(i).transpose();
    const Eigen::VectorXd u = v - params.b1;

    z.resize(mask.selected.size());
    for (std::size_t s = 0; s < mask.selected.size(); ++s) z[s] = params.w_enc.col(mask.selected[s]).dot(u);
    a.resize(mask.aux.size());
    for (std::size_t s = 0; s < mask.aux.size(); ++s) a[s] = params.w_enc.col(mask.aux[s]).dot(u);

    // Residual at each prefix depth; `selected` is sorted so a single sweep
    // accumulates the nested reconstructions.
    Eigen::VectorXd running = v - params.b2;
    std::size_t cursor = 0;
    for (std::size_t t = 0; t < levels; ++t) {
      while (cursor < mask.selected.size() && mask.selected[cursor] < schedule[t]) {
        running.noalias() -= z[cursor] * params.w_dec.row(mask.selected[cursor]).transpose();
        ++cursor;
      }
      residual[t] = running;
      loss.recon += running.squaredNorm();
    }
    suffix[levels] = Eigen::VectorXd::Zero(d);
    for (std::size_t t = levels; t-- > 0;) suffix[t] = suffix[t + 1] + residual[t];

    gz.assign(z.size(), 0.0);
    ga.assign(a.size(), 0.0);

    // d/d(b2) of sum_m ||r_m||^2, and the decoder rows by the prefixes that use them.
    grads.b2.noalias() -= 2.0 * suffix[0];
    std::size_t level = 0;
    for (std::size_t s = 0; s < mask.selected.size(); ++s) {
      const auto j = mask.selected[s];
      while (schedule[level] <= j) ++level;
      const Eigen::VectorXd& r_sum = suffix[level];
      gz[s] -= 2.0 * params.w_dec.row(j).dot(r_sum);
      grads.w_dec.row(j).noalias() -= 2.0 * z[s] * r_sum.transpose();
    }

    if (weights.l1 != 0.0) {
      for (std::size_t s = 0; s < z.size(); ++s) {
        loss.l1 += weights.l1 * z[s];
        gz[s] += weights.l1;
      }
    }

    if (weights.aux != 0.0 && mask.aux_active) {
      Eigen::VectorXd q = residual[levels - 1];
      for (std::size_t s = 0; s < mask.aux.size(); ++s) q.noalias() -= a[s] * params.w_dec.row(mask.aux[s]).transpose();
      loss.aux += weights.aux * q.squaredNorm();
      const Eigen::VectorXd dq = -2.0 * weights.aux * q;
      grads.b2.noalias() += dq;
      for (std::size_t s = 0; s < mask.selected.size(); ++s) {
        const auto j = mask.selected[s];
        gz[s] += params.w_dec.row(j).dot(dq);
        grads.w_dec.row(j).noalias() += z[s] * dq.transpose();
      }
      for (std::size_t s = 0; s < mask.aux.size(); ++s) {
        const auto j = mask.aux[s];
        ga[s] += params.w_dec.row(j).dot(dq);
        grads.w_dec.row(j).noalias() += a[s] * dq.transpose();
      }
    }

    // Chain through the pre-activation w_enc[:, j] . (v - b1).
    auto back = [&](std::uint32_t j, double g) {
      if (g == 0.0) return;
      grads.w_enc.col(j).noalias() += g * u;
      grads.b1.noalias() -= g * params.w_enc.col(j);
    };
    for (std::size_t s = 0; s < mask.selected.size(); ++s) back(mask.selected[s], gz[s]);
    for (std::size_t s = 0; s < mask.aux.size(); ++s) back(mask.aux[s], ga[s]);
  }

  const double inv = 1.0 / static_cast<double>(batch.rows());
  loss.recon *= inv;
  loss.l1 *= inv;
  loss.aux *= inv;
  loss.total = loss.recon + loss.l1 + loss.aux;
  grads.w_enc *= inv;
  grads.w_dec *= inv;
  grads.b1 *= inv;
  grads.b2 *= inv;
  return loss;
}

LossComponents masked_loss(const Eigen::MatrixXd& batch, const SaeParams& params,
                           const std::vector<SampleMask>& masks, const LossWeights& weights) {
  ParamGrads scratch;
  return masked_loss_and_grad(batch, params, masks, weights, scratch);
}

AdamOptimizer::AdamOptimizer(const SaeParams& like, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* state : {&m_, &v_}) {
    state->w_enc = Eigen::MatrixXd::Zero(like.w_enc.rows(), like.w_enc.cols());
    state->w_dec = Eigen::MatrixXd::Zero(like.w_dec.rows(), like.w_dec.cols());
    state->b1 = Eigen::VectorXd::Zero(like.b1.size());
    state->b2 = Eigen::VectorXd::Zero(like.b2.size());
  }
}

void AdamOptimizer::apply(SaeParams& params, const ParamGrads& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = beta1_ * m + (1.0 - beta1_) * grad;
    v = beta2_ * v + (1.0 - beta2_) * grad.cwiseProduct(grad);
    if (lr != 0.0) param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  };
  update(params.w_enc, grads.w_enc, m_.w_enc, v_.w_enc);
  update(params.w_dec, grads.w_dec, m_.w_dec, v_.w_dec);
  update(params.b1, grads.b1, m_.b1, v_.b1);
  update(params.b2, grads.b2, m_.b2, v_.b2);
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  const std::size_t start = cfg.decay_start();
  if (step < start) return cfg.learning_rate;
  const double remaining = static_cast<double>(cfg.steps - std::min(step, cfg.steps));
  return cfg.learning_rate * remaining / static_cast<double>(cfg.steps - start);
}

TrainState::TrainState(SaeParams p, const TrainConfig& cfg)
    : params(std::move(p)), optimizer(params), tracker(params.omega(), cfg.dead_after_steps) {}

TrainRecord train_step(TrainState& state, const Eigen::MatrixXd& batch, const TrainConfig& cfg, std::size_t step) {
  auto& params = state.params;
  const std::size_t aux_k = std::min(cfg.aux_k, params.omega());
  const auto masks = compute_masks(batch, params, cfg.k, state.tracker, aux_k);

  ParamGrads grads;
  TrainRecord record;
  record.step = step;
  record.loss = masked_loss_and_grad(batch, params, masks, {cfg.l1_weight, cfg.aux_weight}, grads);
  if (!std::isfinite(record.loss.total)) {
    throw DivergenceError("non-finite training loss at step " + std::to_string(step));
  }
  record.learning_rate = learning_rate_at(cfg, step);
  record.dead_latents = state.tracker.dead_count();

  state.optimizer.apply(params, grads, record.learning_rate);
  if (cfg.normalize_decoder && record.learning_rate != 0.0) {
    for (Eigen::Index j = 0; j < params.w_dec.rows(); ++j) {
      const double norm = params.w_dec.row(j).norm();
      if (norm > 0.0) params.w_dec.row(j) /= norm;
    }
  }

  std::vector<bool> fired(params.omega(), false);
  for (const auto& mask : masks)
    for (auto j : mask.selected) fired[j] = true;
  state.tracker.record_step(fired);
  return record;
}

Eigen::MatrixXd to_matrix(const EmbeddingDataset& ds) { return ds.rows().cast<double>(); }

TrainResult train(const EmbeddingDataset& ds, const TrainConfig& cfg, const CheckpointHook& on_checkpoint) {
  cfg.validate();
  if (cfg.k > cfg.expansion_factor * ds.d()) throw ConfigError("k exceeds the dictionary size");
  if (!cfg.sample_with_replacement && ds.n() < cfg.batch_size) {
    throw ConfigError("dataset has fewer rows than batch_size and sampling with replacement is disabled");
  }
  const Eigen::MatrixXd data = to_matrix(ds);
  TrainState state(init_params(ds.d(), cfg, data), cfg);
  TrainResult result;
  result.log.decoder_renormalized = cfg.normalize_decoder;

  // Separate stream from the initializer so changing batch settings never
  // perturbs the initial dictionary.
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(ds.n());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = ds.n();

  Eigen::MatrixXd batch(static_cast<Eigen::Index>(cfg.batch_size), data.cols());
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      std::size_t row;
      if (cfg.sample_with_replacement) {
        row = std::uniform_int_distribution<std::size_t>(0, ds.n() - 1)(rng);
      } else {
        if (cursor == ds.n()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        row = order[cursor++];
      }
      batch.row(static_cast<Eigen::Index>(b)) = data.row(static_cast<Eigen::Index>(row));
    }
    auto record = train_step(state, batch, cfg, step);
    if (step % cfg.log_every == 0 || step + 1 == cfg.steps) result.log.records.push_back(record);
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
      on_checkpoint(step + 1, state.params);
    }
  }
  result.params = std::move(state.params);
  return result;
}

}  // namespace debiaslens
