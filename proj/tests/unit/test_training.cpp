#include <doctest.h>

#include <numeric>

#include "debiaslens/errors.hpp"
#include "debiaslens/training.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace debiaslens;

namespace {

SaeParams scalar_params(double w_enc, double w_dec) {
  SaeParams p;
  p.w_enc = Eigen::MatrixXd::Constant(1, 1, w_enc);
  p.w_dec = Eigen::MatrixXd::Constant(1, 1, w_dec);
  p.b1 = Eigen::VectorXd::Zero(1);
  p.b2 = Eigen::VectorXd::Zero(1);
  p.prefix_schedule = {1};
  return p;
}

Eigen::MatrixXd two_clusters(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = 0.1 * nd(rng);
    x(i, i % 2) += 2.0;
  }
  return x;
}

TrainConfig small_config() {
  TrainConfig c;
  c.expansion_factor = 2;
  c.k = 2;
  c.steps = 200;
  c.batch_size = 16;
  c.learning_rate = 1e-2;
  c.dead_after_steps = 20;
  c.aux_k = 4;
  c.log_every = 1;
  return c;
}

EmbeddingDataset as_dataset(const Eigen::MatrixXd& x) {
  RowMatrixF m = x.cast<float>();
  std::vector<std::string> ids;
  for (Eigen::Index i = 0; i < x.rows(); ++i) ids.push_back("s" + std::to_string(i));
  return EmbeddingDataset(std::move(m), std::move(ids));
}

}  // namespace

TEST_CASE("prefix schedule from the default fractions") {
  const std::vector<double> f{0.0625, 0.125, 0.25, 0.5625};
  // omega = 8: ceil(0.5)=1, ceil(1)=1, ceil(2)=2, ceil(4.5)=5 -> 1, 2, 4, 9 capped to 8.
  CHECK(prefix_schedule_for(8, f) == std::vector<std::size_t>{1, 2, 4, 8});
  CHECK(prefix_schedule_for(256, f) == std::vector<std::size_t>{16, 48, 112, 256});
  CHECK(prefix_schedule_for(1, f) == std::vector<std::size_t>{1});
  CHECK(prefix_schedule_for(4, {1.0}) == std::vector<std::size_t>{4});
}

TEST_CASE("init_params") {
  TrainConfig cfg;
  cfg.expansion_factor = 2;
  const auto x = two_clusters(10, 4, 1);
  const auto p = init_params(4, cfg, x);
  CHECK(p.omega() == 8);
  CHECK(p.w_enc == p.w_dec.transpose());
  for (Eigen::Index j = 0; j < 8; ++j) CHECK(p.w_dec.row(j).norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((p.b1 - x.colwise().mean().transpose()).norm() < 1e-15);
  CHECK(p.b2.isZero(0.0));
  const auto q = init_params(4, cfg, x);
  CHECK(q.w_dec == p.w_dec);
  cfg.seed = 1;
  CHECK(init_params(4, cfg, x).w_dec != p.w_dec);
}

TEST_CASE("reconstruction loss hand toys") {
  Eigen::MatrixXd v(1, 1);
  v << 2.0;
  CHECK(matryoshka_recon_loss(v, scalar_params(1.0, 1.0), 1) == 0.0);
  CHECK(matryoshka_recon_loss(v, scalar_params(1.0, 0.5), 1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(matryoshka_recon_loss(Eigen::MatrixXd(0, 1), scalar_params(1, 1), 1), ArgumentError);
}

TEST_CASE("reconstruction loss is additive over prefixes and its last term is the plain error") {
  auto p = testing::random_params(3, 8, 4);
  std::mt19937_64 rng(1);
  Eigen::MatrixXd x(5, 3);
  for (int i = 0; i < 5; ++i) x.row(i) = testing::random_vector(3, rng).transpose();

  p.prefix_schedule = {8};
  double plain = 0.0;
  for (int i = 0; i < 5; ++i) {
    const Eigen::VectorXd v = x.row(i).transpose();
    plain += (v - decode(encode(v, p, 3), p)).squaredNorm();
  }
  CHECK(matryoshka_recon_loss(x, p, 3) == doctest::Approx(plain / 5).epsilon(1e-12));

  auto q = p;
  q.prefix_schedule = {3};
  const double partial = matryoshka_recon_loss(x, q, 3);
  q.prefix_schedule = {3, 8};
  CHECK(matryoshka_recon_loss(x, q, 3) == doctest::Approx(partial + plain / 5).epsilon(1e-12));
}

TEST_CASE("sparsity penalty") {
  Eigen::MatrixXd v(1, 1);
  v << 3.0;
  CHECK(sparsity_penalty(v, scalar_params(1.0, 1.0), 1, 0.0) == 0.0);
  CHECK(sparsity_penalty(v, scalar_params(1.0, 1.0), 1, 2.0) == doctest::Approx(6.0));
  v << -3.0;
  CHECK(sparsity_penalty(v, scalar_params(1.0, 1.0), 1, 2.0) == 0.0);
}

TEST_CASE("auxiliary loss") {
  // d = 1, omega = 2. Latent 0 is live: w_enc 1, w_dec 0.5, so v = 2 gives
  // v_hat = 1 and residual e = 1. Latent 1 is dead with decoder 1 and
  // encoder c, so its pre-activation is 2c and e_hat = 2c.
  auto toy = [](double c) {
    SaeParams p;
    p.w_enc.resize(1, 2);
    p.w_enc << 1.0, c;
    p.w_dec.resize(2, 1);
    p.w_dec << 0.5, 1.0;
    p.b1 = Eigen::VectorXd::Zero(1);
    p.b2 = Eigen::VectorXd::Zero(1);
    p.prefix_schedule = {2};
    return p;
  };
  Eigen::MatrixXd v(1, 1);
  v << 2.0;
  DeadLatentTracker tracker(2, 5);
  CHECK(aux_loss(v, toy(0.5), 1, tracker, 1, 1.0) == 0.0);  // nothing dead yet

  tracker.set_steps_since_fire(1, 5);
  CHECK(aux_loss(v, toy(0.5), 1, tracker, 1, 1.0) == doctest::Approx(0.0));
  CHECK(aux_loss(v, toy(0.25), 1, tracker, 1, 1.0) == doctest::Approx(0.25));
  CHECK(aux_loss(v, toy(0.25), 1, tracker, 1, 0.0) == 0.0);
  // A dead latent with a non-positive pre-activation contributes nothing.
  CHECK(aux_loss(v, toy(-1.0), 1, tracker, 1, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("dead latent tracker") {
  DeadLatentTracker t(3, 2);
  CHECK(t.dead_count() == 0);
  t.record_step({true, false, false});
  t.record_step({false, false, true});
  CHECK(t.steps_since_fire(0) == 1);
  CHECK(t.steps_since_fire(1) == 2);
  CHECK(t.steps_since_fire(2) == 0);
  CHECK(t.is_dead(1));
  CHECK(t.dead_count() == 1);
  CHECK_THROWS_AS(t.record_step({true}), ShapeError);
}

TEST_CASE("analytic gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = testing::gradient_check(seed, 0.01, 0.03);
    CHECK(r.aux_active);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("masked loss equals the encode-based losses at the mask point") {
  auto p = testing::random_params(3, 8, 2);
  std::mt19937_64 rng(4);
  Eigen::MatrixXd x(6, 3);
  for (int i = 0; i < 6; ++i) x.row(i) = testing::random_vector(3, rng).transpose();
  DeadLatentTracker tracker(8, 3);
  tracker.set_steps_since_fire(1, 3);
  tracker.set_steps_since_fire(6, 9);
  const auto masks = compute_masks(x, p, 2, tracker, 2);
  const auto l = masked_loss(x, p, masks, {0.1, 0.05});
  CHECK(l.recon == doctest::Approx(matryoshka_recon_loss(x, p, 2)).epsilon(1e-12));
  CHECK(l.l1 == doctest::Approx(sparsity_penalty(x, p, 2, 0.1)).epsilon(1e-12));
  CHECK(l.aux == doctest::Approx(aux_loss(x, p, 2, tracker, 2, 0.05)).epsilon(1e-12));
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.steps = 10;
  c.learning_rate = 1.0;
  c.lr_decay_start = 5;
  CHECK(learning_rate_at(c, 0) == 1.0);
  CHECK(learning_rate_at(c, 4) == 1.0);
  CHECK(learning_rate_at(c, 5) == doctest::Approx(1.0));
  CHECK(learning_rate_at(c, 9) < learning_rate_at(c, 7));
  CHECK(learning_rate_at(c, 9) > 0.0);
}

TEST_CASE("zero learning rate leaves parameters untouched but updates the tracker") {
  auto cfg = small_config();
  cfg.learning_rate = 0.0;
  const auto x = two_clusters(16, 4, 2);
  TrainState state(init_params(4, cfg, x), cfg);
  const auto before = state.params;
  train_step(state, x, cfg, 0);
  CHECK(state.params.w_enc == before.w_enc);
  CHECK(state.params.w_dec == before.w_dec);
  CHECK(state.params.b1 == before.b1);
  CHECK(state.params.b2 == before.b2);
  std::size_t fired = 0;
  for (std::size_t j = 0; j < state.tracker.omega(); ++j) fired += state.tracker.steps_since_fire(j) == 0;
  CHECK(fired > 0);
  CHECK(fired < state.tracker.omega() + 1);
  for (std::size_t j = 0; j < state.tracker.omega(); ++j) CHECK(state.tracker.steps_since_fire(j) <= 1);
}

TEST_CASE("latents firing in a step have counter zero afterwards") {
  auto cfg = small_config();
  const auto x = two_clusters(16, 4, 3);
  TrainState state(init_params(4, cfg, x), cfg);
  for (std::size_t step = 0; step < 5; ++step) {
    const auto masks = compute_masks(x, state.params, cfg.k, state.tracker, cfg.aux_k);
    train_step(state, x, cfg, step);
    for (const auto& m : masks)
      for (auto j : m.selected) CHECK(state.tracker.steps_since_fire(j) == 0);
  }
}

TEST_CASE("divergence is reported with the step") {
  auto cfg = small_config();
  const auto x = two_clusters(4, 2, 1);
  auto p = init_params(2, cfg, x);
  p.w_dec *= 1e200;
  TrainState state(p, cfg);
  try {
    train_step(state, x, cfg, 17);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }
}

TEST_CASE("loss decreases on a two-cluster toy") {
  const auto cfg = small_config();
  const auto result = train(as_dataset(two_clusters(128, 4, 5)), cfg);
  const auto& rec = result.log.records;
  REQUIRE(rec.size() == 200);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += rec[i].loss.total;
    return s / 20;
  };
  CHECK(window(180) < 0.5 * window(0));
  for (std::size_t i = 1; i < rec.size(); ++i) CHECK(rec[i].step > rec[i - 1].step);
}

TEST_CASE("training is deterministic") {
  auto cfg = small_config();
  cfg.steps = 50;
  const auto ds = as_dataset(two_clusters(64, 4, 6));
  const auto a = train(ds, cfg);
  const auto b = train(ds, cfg);
  CHECK(a.params.w_dec == b.params.w_dec);
  CHECK(a.params.w_enc == b.params.w_enc);
  CHECK(a.log.to_jsonl() == b.log.to_jsonl());
}

TEST_CASE("periodic checkpoint hook") {
  auto cfg = small_config();
  cfg.steps = 30;
  cfg.checkpoint_every = 10;
  std::vector<std::size_t> seen;
  train(as_dataset(two_clusters(32, 4, 1)), cfg, [&](std::size_t s, const SaeParams&) { seen.push_back(s); });
  CHECK(seen == std::vector<std::size_t>{10, 20});
}

TEST_CASE("config validation and JSON") {
  TrainConfig c;
  c.group_fractions = {0.5, 0.4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_decay_start = c.steps;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto bad = small_config();
  bad.group_fractions = {0.3, 0.3};
  CHECK_THROWS_AS(train(as_dataset(two_clusters(8, 2, 1)), bad), ConfigError);

  const auto cfg = small_config();
  const auto back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK_THROWS_AS(train_config_from_json({{"stepz", 3}}), ConfigError);
  CHECK(train_config_from_json(nlohmann::json::object()).steps == 110000);
}
