#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ad3d/rng.hpp"
#include "ad3d/training.hpp"

using namespace ad3d;

namespace {

GeneratorConfig small_gen() {
  GeneratorConfig cfg;
  cfg.action_dim = 1;
  cfg.horizon = 4;
  cfg.mlp_hidden = {8, 8};
  cfg.obs_dim = 2;
  cfg.obs_hidden = 4;
  cfg.obs_feat = 3;
  cfg.film_hidden = 4;
  return cfg;
}

TrainDataset synthetic_dataset(std::uint64_t seed, std::int64_t contexts = 2,
                               std::int64_t demos = 6, std::int64_t dim = 4) {
  TrainDataset ds;
  ds.flat_dim = dim;
  Rng rng(seed);
  for (std::int64_t c = 0; c < contexts; ++c) {
    TrainContext ctx;
    ctx.id = static_cast<int>(c);
    ctx.obs = {{0.5 * static_cast<double>(c), 0.1}, {0.1, 0.5 * static_cast<double>(c)}};
    Tensor d({demos, dim});
    for (std::int64_t i = 0; i < d.size(); ++i)
      d.data()[i] = (i % 2 == 0 ? 1.0 : -1.0) + 0.1 * rng.normal();
    ctx.demos = d;
    ds.contexts.push_back(std::move(ctx));
  }
  return ds;
}

TrainOptions base_options(Method method, std::uint64_t seed, std::int64_t epochs = 10) {
  TrainOptions opts;
  opts.method = method;
  opts.gen = small_gen();
  opts.sched.epochs = epochs;
  opts.sched.checkpoint_every = 0;
  opts.opt.batch = 8;
  opts.opt.lr = 1e-3;
  opts.seed = seed;
  opts.config_hash = 0xfeed;
  return opts;
}

std::string param_bytes(ParamSet& ps) {
  std::string s;
  for (const auto& [name, t] : ps.items())
    s.append(reinterpret_cast<const char*>(t.data()),
             static_cast<std::size_t>(t.size()) * sizeof(double));
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ad3d_test_" + name);
}

}  // namespace

TEST_CASE("schedule weights hit the pinned anchor points") {
  ScheduleConfig cfg;
  cfg.epochs = 10;

  auto [w_mid_d, w_mid_m] = schedule_weights(7, cfg);  // 0.7 E
  CHECK(w_mid_d == 0.5);
  CHECK(w_mid_m == 0.5);

  auto [w0, w0m] = schedule_weights(0, cfg);
  CHECK(std::fabs(w0 - 1.0 / (1.0 + std::exp(14.0))) < 1e-12);
  CHECK(w0 == Catch::Approx(8.315280276641321e-07).epsilon(1e-9));

  auto [wE, wEm] = schedule_weights(10, cfg);
  CHECK(std::fabs(wE - 1.0 / (1.0 + std::exp(-6.0))) < 1e-12);
  CHECK(wE == Catch::Approx(0.9975273768433653).epsilon(1e-9));
}

TEST_CASE("schedule weights sum to one and increase strictly") {
  ScheduleConfig cfg;
  cfg.epochs = 500;
  double prev = -1;
  for (std::int64_t e = 0; e <= cfg.epochs; ++e) {
    auto [wd, wm] = schedule_weights(e, cfg);
    CHECK(wd + wm == 1.0);
    CHECK(wd > prev);
    prev = wd;
  }
}

TEST_CASE("schedule config validation") {
  ScheduleConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ScheduleConfig{};
  bad.crossover = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ScheduleConfig{};
  bad.sharpness = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("drift loss closed forms and stop-gradient algebra") {
  SECTION("zero field means zero loss and zero gradient") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor v({2, 3});
    Tape tape;
    Tensor xt = tape.watch(x);
    Tensor loss = drift_loss(xt, v);
    CHECK(loss.value() == 0.0);
    tape.backward(loss);
    for (double g : tape.grad_for(x)) CHECK(g == 0.0);
  }

  SECTION("N = 1, V = [3, 4]") {
    Tensor x({1, 2}, {0.7, -0.2});
    Tensor v({1, 2}, {3, 4});
    Tape tape;
    Tensor xt = tape.watch(x);
    Tensor loss = drift_loss(xt, v);
    CHECK(loss.value() == Catch::Approx(25.0).margin(1e-12));
    tape.backward(loss);
    const auto& g = tape.grad_for(x);
    CHECK(g[0] == Catch::Approx(-6.0).margin(1e-12));
    CHECK(g[1] == Catch::Approx(-8.0).margin(1e-12));
  }

  SECTION("gradient equals -2 V / N within 1e-10") {
    Rng rng(55);
    const std::int64_t n = 5, d = 7;
    Tensor x({n, d});
    Tensor v({n, d});
    rng.fill_normal(x.data(), static_cast<std::size_t>(x.size()));
    rng.fill_normal(v.data(), static_cast<std::size_t>(v.size()));
    Tape tape;
    Tensor xt = tape.watch(x);
    Tensor loss = drift_loss(xt, v);
    double expect = 0;
    for (std::int64_t i = 0; i < v.size(); ++i) expect += v.data()[i] * v.data()[i];
    expect /= static_cast<double>(n);
    CHECK(loss.value() == Catch::Approx(expect).epsilon(1e-12));
    tape.backward(loss);
    const auto& g = tape.grad_for(x);
    for (std::int64_t i = 0; i < v.size(); ++i)
      CHECK(std::fabs(g[static_cast<std::size_t>(i)] -
                      (-2.0 * v.data()[i] / static_cast<double>(n))) < 1e-10);
  }
}

TEST_CASE("drift loss gradient through the generator matches finite differences") {
  GeneratorConfig cfg = small_gen();
  Generator gen(cfg, 77);
  Rng rng(78);
  const std::int64_t n = 3;
  Tensor z({n, cfg.flat_dim()});
  rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
  std::vector<std::vector<double>> obs(2, std::vector<double>(2, 0.4));

  // Freeze the sg target at the base point: target = xhat0 + V.
  Tensor xhat0 = gen.forward_batch(z, gen.encode_obs(obs, nullptr), nullptr);
  Tensor target(xhat0.shape());
  for (std::int64_t i = 0; i < target.size(); ++i)
    target.data()[i] = xhat0.data()[i] + 0.3 * rng.normal();

  auto frozen_loss = [&](Tape* tape) {
    Tensor xhat = gen.forward_batch(z, gen.encode_obs(obs, tape), tape);
    Tensor d = sub(xhat, target);
    return mul_scalar(reduce_sum(mul(d, d)), 1.0 / static_cast<double>(n));
  };

  Tape tape;
  Tensor loss = frozen_loss(&tape);
  tape.backward(loss);

  const double h = 1e-5;
  for (const auto& [name, param] : gen.params().items()) {
    const auto& analytic = tape.grad_for(param);
    Tensor& p = const_cast<Tensor&>(param);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + h;
      const double up = frozen_loss(nullptr).value();
      p.data()[i] = keep - h;
      const double down = frozen_loss(nullptr).value();
      p.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-10});
      INFO(name << "[" << i << "]");
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("mse loss closed forms") {
  Tensor x({1, 1}, {1.0});
  Tensor y({1, 1}, {3.0});
  CHECK(mse_loss(x, y).value() == 4.0);

  Tensor same({2, 2}, {1, 2, 3, 4});
  CHECK(mse_loss(same, same).value() == 0.0);

  SECTION("gradient is 2 (xhat - y) / (N D)") {
    Rng rng(66);
    Tensor a({3, 4});
    Tensor b({3, 4});
    rng.fill_normal(a.data(), static_cast<std::size_t>(a.size()));
    rng.fill_normal(b.data(), static_cast<std::size_t>(b.size()));
    Tape tape;
    Tensor at = tape.watch(a);
    tape.backward(mse_loss(at, b));
    const auto& g = tape.grad_for(a);
    for (std::int64_t i = 0; i < a.size(); ++i)
      CHECK(g[static_cast<std::size_t>(i)] ==
            Catch::Approx(2.0 * (a.data()[i] - b.data()[i]) / 12.0).margin(1e-14));
  }
}

TEST_CASE("total loss follows the schedule") {
  Tensor x({1, 2}, {1.0, 2.0});
  Tensor y({1, 2}, {2.0, 3.0});
  Tensor v({1, 2}, {0.5, 0.5});
  ScheduleConfig cfg;
  cfg.epochs = 10;

  Tape tape;
  Tensor xt = tape.watch(x);
  const double at_cross = total_loss(xt, y, v, 7, cfg).value();
  const double ld = drift_loss(x, v).value();
  const double lm = mse_loss(x, y).value();
  CHECK(at_cross == Catch::Approx(0.5 * ld + 0.5 * lm).epsilon(1e-12));

  ScheduleConfig big;
  big.epochs = 100000;
  const double early = total_loss(x, y, v, 0, big).value();
  CHECK(std::fabs(early - lm) / lm < 1e-5);
}

TEST_CASE("adamw single step matches the update rule") {
  ParamSet ps;
  Tensor p = ps.add("w", Tensor({2}, {1.0, -2.0}));
  OptimizerConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  AdamW opt(ps, cfg);
  std::vector<std::vector<double>> grads{{0.5, -0.25}};
  opt.step(grads);

  for (int i = 0; i < 2; ++i) {
    const double g = grads[0][static_cast<std::size_t>(i)];
    const double m = (1 - cfg.beta1) * g, v = (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - cfg.beta1), vhat = v / (1 - cfg.beta2);
    const double init = i == 0 ? 1.0 : -2.0;
    const double expect = init - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                           cfg.weight_decay * init);
    CHECK(p.data()[i] == Catch::Approx(expect).margin(1e-15));
  }
  CHECK(opt.steps() == 1);
}

TEST_CASE("training is bit-deterministic in the seed") {
  for (Method method : {Method::kAda3Drift, Method::kFm}) {
    TrainDataset ds = synthetic_dataset(1234);
    std::string metrics_a, metrics_b, params_a, params_b;
    {
      Trainer t(base_options(method, 42), synthetic_dataset(1234));
      for (int e = 0; e < 5; ++e) metrics_a += metrics_json_line(t.run_epoch()) + "\n";
      params_a = param_bytes(t.params());
    }
    {
      Trainer t(base_options(method, 42), synthetic_dataset(1234));
      for (int e = 0; e < 5; ++e) metrics_b += metrics_json_line(t.run_epoch()) + "\n";
      params_b = param_bytes(t.params());
    }
    CHECK(metrics_a == metrics_b);
    CHECK(params_a == params_b);
  }
}

TEST_CASE("naive drift pins full drift weight and a single temperature") {
  Trainer t(base_options(Method::kNaiveDrift, 3), synthetic_dataset(9));
  CHECK(t.options().temps == std::vector<double>{0.05});
  auto [wd, wm] = t.weights_at(0);
  CHECK(wd == 1.0);
  CHECK(wm == 0.0);
  EpochMetrics m = t.run_epoch();
  CHECK(m.w_drift == 1.0);
  CHECK(std::isfinite(m.l_total));
}

TEST_CASE("dataset validation failures") {
  TrainOptions opts = base_options(Method::kAda3Drift, 1);
  CHECK_THROWS_AS(Trainer(opts, TrainDataset{}), DataError);

  TrainDataset wrong = synthetic_dataset(5, 1, 4, 3);  // dim 3 vs flat_dim 4
  CHECK_THROWS_AS(Trainer(opts, std::move(wrong)), DataError);
}

TEST_CASE("non-finite loss raises a numeric error with context") {
  Trainer t(base_options(Method::kAda3Drift, 8), synthetic_dataset(8));
  Tensor* w = t.params().find("mlp.out.w");
  REQUIRE(w != nullptr);
  w->data()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(t.run_epoch(), NumericError);
}

TEST_CASE("checkpoint save/load/save produces identical bytes") {
  auto path_a = temp_path("ckpt_a.bin");
  auto path_b = temp_path("ckpt_b.bin");

  Trainer t(base_options(Method::kAda3Drift, 77), synthetic_dataset(77));
  for (int e = 0; e < 3; ++e) t.run_epoch();
  save_checkpoint(path_a, t);

  Trainer fresh(base_options(Method::kAda3Drift, 77), synthetic_dataset(77));
  restore_checkpoint(fresh, path_a);
  save_checkpoint(path_b, fresh);

  CHECK(read_file(path_a) == read_file(path_b));
  std::filesystem::remove(path_a);
  std::filesystem::remove(path_b);
}

TEST_CASE("checkpoint format errors are distinct") {
  auto path = temp_path("ckpt_fmt.bin");
  Trainer t(base_options(Method::kAda3Drift, 10), synthetic_dataset(10));
  t.run_epoch();
  save_checkpoint(path, t);
  const std::string good = read_file(path);

  Trainer probe(base_options(Method::kAda3Drift, 10), synthetic_dataset(10));

  {
    std::string bad = good;
    bad[0] = 'X';
    write_file_atomic(path, bad);
    CHECK_THROWS_AS(restore_checkpoint(probe, path), CheckpointMagicError);
  }
  {
    std::string bad = good;
    bad[4] = 99;  // version field
    write_file_atomic(path, bad);
    CHECK_THROWS_AS(restore_checkpoint(probe, path), CheckpointVersionError);
  }
  {
    std::string bad = good.substr(0, good.size() / 2);
    write_file_atomic(path, bad);
    CHECK_THROWS_AS(restore_checkpoint(probe, path), CheckpointTruncatedError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("resume continues the schedule and matches an uninterrupted run bitwise") {
  const int total = 6, split = 3;
  auto path = temp_path("ckpt_resume.bin");

  Trainer straight(base_options(Method::kAda3Drift, 99), synthetic_dataset(99));
  std::string straight_metrics;
  for (int e = 0; e < total; ++e) straight_metrics += metrics_json_line(straight.run_epoch()) + "\n";

  Trainer first(base_options(Method::kAda3Drift, 99), synthetic_dataset(99));
  std::string resumed_metrics;
  for (int e = 0; e < split; ++e) resumed_metrics += metrics_json_line(first.run_epoch()) + "\n";
  save_checkpoint(path, first);

  Trainer second(base_options(Method::kAda3Drift, 99), synthetic_dataset(99));
  restore_checkpoint(second, path);
  CHECK(second.epoch() == split);
  auto [wd_resumed, wm_resumed] = second.weights_at(second.epoch());
  auto [wd_expect, wm_expect] = schedule_weights(split, base_options(Method::kAda3Drift, 99).sched);
  CHECK(wd_resumed == wd_expect);
  for (int e = split; e < total; ++e) resumed_metrics += metrics_json_line(second.run_epoch()) + "\n";

  CHECK(param_bytes(straight.params()) == param_bytes(second.params()));
  CHECK(straight_metrics == resumed_metrics);
  std::filesystem::remove(path);
}

TEST_CASE("early epochs decompose exactly and stay mse-dominated") {
  // The composite loss is exactly w_d l_drift + w_m l_mse, so for e < 0.3 E
  // (w_drift below sigma(-8) ~ 3.4e-4) the deviation from l_mse is bounded by
  // w_drift |l_drift - l_mse|. The 1e-3 relative claim on the benchmark lives
  // in the acceptance suite; here the decomposition itself is asserted.
  TrainOptions opts = base_options(Method::kAda3Drift, 21, 40);
  Trainer t(opts, synthetic_dataset(21));
  for (int e = 0; e < 12; ++e) {  // 0.3 E = 12
    EpochMetrics m = t.run_epoch();
    auto [wd, wm] = schedule_weights(e, opts.sched);
    CHECK(wd < 3.4e-4);
    const double recombined = wd * m.l_drift + wm * m.l_mse;
    CHECK(std::fabs(m.l_total - recombined) <= 1e-12 * std::max(1.0, std::fabs(m.l_total)));
    const double bound = wd * std::fabs(m.l_drift - m.l_mse) / std::max(m.l_mse, 1e-9);
    const double rel = std::fabs(m.l_total - m.l_mse) / std::max(m.l_mse, 1e-9);
    CHECK(rel <= bound + 1e-12);
  }
}
