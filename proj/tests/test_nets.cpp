#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ad3d/nets.hpp"
#include "ad3d/rng.hpp"

using namespace ad3d;

namespace {

GeneratorConfig tiny_mlp_config() {
  GeneratorConfig cfg;
  cfg.arch = GeneratorConfig::Arch::kMlp;
  cfg.action_dim = 1;
  cfg.horizon = 4;
  cfg.mlp_hidden = {8, 8};
  cfg.obs_dim = 2;
  cfg.obs_hidden = 4;
  cfg.obs_feat = 3;
  cfg.film_hidden = 4;
  return cfg;
}

GeneratorConfig tiny_unet_config() {
  GeneratorConfig cfg;
  cfg.arch = GeneratorConfig::Arch::kUnet1d;
  cfg.action_dim = 2;
  cfg.horizon = 8;
  cfg.unet_widths = {4, 4, 4};
  cfg.obs_dim = 2;
  cfg.obs_hidden = 4;
  cfg.obs_feat = 3;
  cfg.film_hidden = 4;
  return cfg;
}

std::vector<std::vector<double>> test_obs(const GeneratorConfig& cfg, double fill = 0.3) {
  return std::vector<std::vector<double>>(
      static_cast<std::size_t>(cfg.obs_steps),
      std::vector<double>(static_cast<std::size_t>(cfg.obs_dim), fill));
}

Tensor random_noise_rows(Rng& rng, std::int64_t n, std::int64_t d) {
  Tensor t({n, d});
  rng.fill_normal(t.data(), static_cast<std::size_t>(t.size()));
  return t;
}

// Scalar loss over the full pipeline: sum(P (*) f(Z, encode(obs))).
double pipeline_loss(const Generator& gen, const Tensor& z, const Tensor& proj,
                     const std::vector<std::vector<double>>& obs, Tape* tape,
                     const Tensor** out = nullptr) {
  Tensor g = gen.encode_obs(obs, tape);
  Tensor y = gen.forward_batch(z, g, tape);
  Tensor loss = reduce_sum(mul(y, stop_gradient(proj)));
  if (tape) tape->backward(loss);
  if (out) *out = nullptr;
  return loss.value();
}

}  // namespace

TEST_CASE("encode_obs closed form with a zeroed final layer") {
  GeneratorConfig cfg = tiny_mlp_config();
  Generator gen(cfg, 7);
  Tensor* w2 = gen.params().find("enc.w2");
  Tensor* b2 = gen.params().find("enc.b2");
  REQUIRE(w2 != nullptr);
  REQUIRE(b2 != nullptr);
  for (std::int64_t i = 0; i < w2->size(); ++i) w2->data()[i] = 0.0;
  for (std::int64_t i = 0; i < b2->size(); ++i) b2->data()[i] = 0.5 + 0.25 * static_cast<double>(i);

  std::vector<std::vector<double>> zero_obs(2, std::vector<double>(2, 0.0));
  Tensor g = gen.encode_obs(zero_obs, nullptr);
  REQUIRE(g.shape() == std::vector<std::int64_t>{1, cfg.cond_dim()});
  for (std::int64_t step = 0; step < cfg.obs_steps; ++step)
    for (std::int64_t j = 0; j < cfg.obs_feat; ++j)
      CHECK(g.data()[step * cfg.obs_feat + j] == b2->data()[j]);
}

TEST_CASE("encode_obs is deterministic and validates the window length") {
  Generator gen(tiny_mlp_config(), 9);
  auto obs = test_obs(gen.config(), 0.7);
  Tensor g1 = gen.encode_obs(obs, nullptr);
  Tensor g2 = gen.encode_obs(obs, nullptr);
  CHECK(g1.values() == g2.values());

  std::vector<std::vector<double>> short_obs(1, std::vector<double>(2, 0.0));
  CHECK_THROWS_AS(gen.encode_obs(short_obs, nullptr), ShapeError);
}

TEST_CASE("encoder gradient of ||g||^2 matches finite differences") {
  Generator gen(tiny_mlp_config(), 11);
  auto obs = test_obs(gen.config(), 0.9);

  auto loss_value = [&]() {
    Tensor g = gen.encode_obs(obs, nullptr);
    return reduce_sum(mul(g, g)).value();
  };

  Tape tape;
  Tensor g = gen.encode_obs(obs, &tape);
  tape.backward(reduce_sum(mul(g, g)));

  const double h = 1e-5;
  for (const char* name : {"enc.w1", "enc.b1", "enc.w2", "enc.b2"}) {
    Tensor* p = gen.params().find(name);
    REQUIRE(p != nullptr);
    const auto& analytic = tape.grad_for(*p);
    for (std::int64_t i = 0; i < p->size(); ++i) {
      const double keep = p->data()[i];
      p->data()[i] = keep + h;
      const double up = loss_value();
      p->data()[i] = keep - h;
      const double down = loss_value();
      p->data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-10});
      INFO(name << "[" << i << "]");
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("film heads start as near-identity modulation") {
  GeneratorConfig cfg = tiny_mlp_config();
  ParamSet ps;
  Rng rng(13);
  FilmHead film(ps, "film", cfg.cond_dim(), cfg.film_hidden, 8, rng);
  Tensor cond({1, cfg.cond_dim()});
  Rng(99).fill_normal(cond.data(), static_cast<std::size_t>(cond.size()));
  auto [gamma, beta] = film.gamma_beta(cond, nullptr);
  for (std::int64_t i = 0; i < gamma.size(); ++i) {
    CHECK(std::fabs(gamma.data()[i] - 1.0) < 1e-2);
    CHECK(std::fabs(beta.data()[i]) < 1e-2);
  }

  SECTION("zeroed heads give exact identity") {
    for (const char* name : {"film.wg", "film.bg", "film.wb", "film.bb"}) {
      Tensor* p = ps.find(name);
      REQUIRE(p != nullptr);
      for (std::int64_t i = 0; i < p->size(); ++i) p->data()[i] = 0.0;
    }
    auto [g1, b1] = film.gamma_beta(cond, nullptr);
    for (std::int64_t i = 0; i < g1.size(); ++i) {
      CHECK(g1.data()[i] == 1.0);
      CHECK(b1.data()[i] == 0.0);
    }
  }
}

TEST_CASE("generate returns H x D_a trajectories for both architectures") {
  for (auto make : {tiny_mlp_config, tiny_unet_config}) {
    GeneratorConfig cfg = make();
    Generator gen(cfg, 21);
    Rng rng(22);
    Tensor z({cfg.action_dim, cfg.horizon});
    rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
    Tensor g = gen.encode_obs(test_obs(cfg), nullptr);
    NfeSession session;
    ActionTrajectory traj = gen.generate(z, g, &session);
    CHECK(traj.horizon == cfg.horizon);
    CHECK(traj.action_dim == cfg.action_dim);
    CHECK(static_cast<std::int64_t>(traj.waypoints.size()) == cfg.flat_dim());
    CHECK(count_nfe(session) == 1);
  }
}

TEST_CASE("nfe counting is additive across chunks") {
  GeneratorConfig cfg = tiny_mlp_config();
  Generator gen(cfg, 31);
  Tensor g = gen.encode_obs(test_obs(cfg), nullptr);
  NfeSession session;
  Rng rng(32);
  for (int chunk = 0; chunk < 4; ++chunk) {
    Tensor z({cfg.action_dim, cfg.horizon});
    rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
    gen.generate(z, g, &session);
  }
  CHECK(count_nfe(session) == 4);
}

TEST_CASE("different noise with the same conditioning produces different outputs") {
  for (auto make : {tiny_mlp_config, tiny_unet_config}) {
    GeneratorConfig cfg = make();
    Generator gen(cfg, 41);
    Rng rng(42);
    Tensor g = gen.encode_obs(test_obs(cfg), nullptr);
    Tensor z1({cfg.action_dim, cfg.horizon});
    Tensor z2({cfg.action_dim, cfg.horizon});
    rng.fill_normal(z1.data(), static_cast<std::size_t>(z1.size()));
    rng.fill_normal(z2.data(), static_cast<std::size_t>(z2.size()));
    ActionTrajectory t1 = gen.generate(z1, g, nullptr);
    ActionTrajectory t2 = gen.generate(z2, g, nullptr);
    double diff = 0;
    for (std::size_t i = 0; i < t1.waypoints.size(); ++i)
      diff += std::fabs(t1.waypoints[i] - t2.waypoints[i]);
    CHECK(diff > 0.0);
  }
}

TEST_CASE("every parameter receives nonzero gradient at init") {
  for (auto make : {tiny_mlp_config, tiny_unet_config}) {
    GeneratorConfig cfg = make();
    Generator gen(cfg, 51);
    Rng rng(52);
    Tensor z = random_noise_rows(rng, 3, cfg.flat_dim());
    Tensor proj = random_noise_rows(rng, 3, cfg.flat_dim());

    Tape tape;
    Tensor g = gen.encode_obs(test_obs(cfg, 0.4), &tape);
    Tensor y = gen.forward_batch(z, g, &tape);
    tape.backward(reduce_sum(mul(y, mul(y, stop_gradient(proj)))));

    for (const auto& [name, param] : gen.params().items()) {
      REQUIRE(tape.has_grad_for(param));
      const auto& grad = tape.grad_for(param);
      double mag = 0;
      for (double v : grad) mag += std::fabs(v);
      INFO(name);
      CHECK(mag > 0.0);
    }
  }
}

TEST_CASE("full tiny-mlp pipeline gradient matches finite differences per element") {
  GeneratorConfig cfg = tiny_mlp_config();
  Generator gen(cfg, 61);
  REQUIRE(gen.params().total_size() <= 2000);

  Rng rng(62);
  Tensor z = random_noise_rows(rng, 2, cfg.flat_dim());
  Tensor proj = random_noise_rows(rng, 2, cfg.flat_dim());
  auto obs = test_obs(cfg, 0.6);

  Tape tape;
  pipeline_loss(gen, z, proj, obs, &tape);

  const double h = 1e-5;
  for (const auto& [name, param] : gen.params().items()) {
    const auto& analytic = tape.grad_for(param);
    Tensor& p = const_cast<Tensor&>(param);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + h;
      const double up = pipeline_loss(gen, z, proj, obs, nullptr);
      p.data()[i] = keep - h;
      const double down = pipeline_loss(gen, z, proj, obs, nullptr);
      p.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-10});
      INFO(name << "[" << i << "]");
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("desk-width networks pass directional derivative checks") {
  // Directional FD over all parameters at once; a handful of random
  // directions per architecture at the default benchmark widths.
  for (int arch = 0; arch < 2; ++arch) {
    GeneratorConfig cfg;
    if (arch == 1) {
      cfg.arch = GeneratorConfig::Arch::kUnet1d;
      cfg.action_dim = 2;
      cfg.horizon = 16;
    }
    Generator gen(cfg, 71);
    Rng rng(72);
    const std::int64_t batch = arch == 0 ? 4 : 1;
    Tensor z = random_noise_rows(rng, batch, cfg.flat_dim());
    Tensor proj = random_noise_rows(rng, batch, cfg.flat_dim());
    auto obs = test_obs(cfg, 0.2);

    Tape tape;
    pipeline_loss(gen, z, proj, obs, &tape);

    for (int trial = 0; trial < 3; ++trial) {
      std::vector<std::vector<double>> dir;
      double analytic_dot = 0;
      for (const auto& [name, param] : gen.params().items()) {
        std::vector<double> u(static_cast<std::size_t>(param.size()));
        for (auto& v : u) v = rng.normal();
        const auto& grad = tape.grad_for(param);
        for (std::size_t i = 0; i < u.size(); ++i) analytic_dot += grad[i] * u[i];
        dir.push_back(std::move(u));
      }

      const double h = 1e-6;
      auto nudge = [&](double sign) {
        std::size_t k = 0;
        for (const auto& [name, param] : gen.params().items()) {
          Tensor& p = const_cast<Tensor&>(param);
          for (std::int64_t i = 0; i < p.size(); ++i)
            p.data()[i] += sign * h * dir[k][static_cast<std::size_t>(i)];
          ++k;
        }
      };
      nudge(+1);
      const double up = pipeline_loss(gen, z, proj, obs, nullptr);
      nudge(-2);
      const double down = pipeline_loss(gen, z, proj, obs, nullptr);
      nudge(+1);

      const double numeric = (up - down) / (2 * h);
      const double err = std::fabs(analytic_dot - numeric) /
                         std::max({std::fabs(analytic_dot), std::fabs(numeric), 1e-10});
      INFO("arch " << arch << " trial " << trial);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("ablating a unet skip connection changes the output") {
  GeneratorConfig cfg = tiny_unet_config();
  Generator gen(cfg, 81);
  Rng rng(82);
  Tensor z({cfg.action_dim, cfg.horizon});
  rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
  Tensor g = gen.encode_obs(test_obs(cfg), nullptr);
  ActionTrajectory base = gen.generate(z, g, nullptr);

  // Zeroing the skip columns of the first decoder conv is equivalent to
  // zeroing the skip tensor itself (decoder input is [upsampled | skip]).
  for (const char* name : {"unet.dec2.rb0.conv1.w", "unet.dec1.rb0.conv1.w", "unet.dec0.rb0.conv1.w"}) {
    Tensor* w = gen.params().find(name);
    REQUIRE(w != nullptr);
    std::vector<double> keep = w->values();
    const std::int64_t cout = w->extent(0), cin = w->extent(1);
    const std::int64_t skip_start = cin / 2;
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t ci = skip_start; ci < cin; ++ci)
        for (std::int64_t k = 0; k < 5; ++k) w->data()[(co * cin + ci) * 5 + k] = 0.0;

    ActionTrajectory ablated = gen.generate(z, g, nullptr);
    double diff = 0;
    for (std::size_t i = 0; i < base.waypoints.size(); ++i)
      diff += std::fabs(base.waypoints[i] - ablated.waypoints[i]);
    INFO(name);
    CHECK(diff > 1e-9);
    std::copy(keep.begin(), keep.end(), w->data());
  }
}

TEST_CASE("generator config validation") {
  GeneratorConfig cfg = tiny_unet_config();
  cfg.horizon = 10;  // not divisible by 4
  CHECK_THROWS_AS(Generator(cfg, 1), ConfigError);

  GeneratorConfig bad = tiny_unet_config();
  bad.unet_widths = {4, 4};
  CHECK_THROWS_AS(Generator(bad, 1), ConfigError);

  GeneratorConfig mlp = tiny_mlp_config();
  mlp.mlp_hidden.clear();
  CHECK_THROWS_AS(Generator(mlp, 1), ConfigError);
}

TEST_CASE("batched and single-sample forwards agree") {
  for (auto make : {tiny_mlp_config, tiny_unet_config}) {
    GeneratorConfig cfg = make();
    Generator gen(cfg, 91);
    Rng rng(92);
    Tensor z = random_noise_rows(rng, 3, cfg.flat_dim());
    Tensor g = gen.encode_obs(test_obs(cfg, -0.1), nullptr);
    Tensor batch = gen.forward_batch(z, g, nullptr);

    for (std::int64_t i = 0; i < 3; ++i) {
      Tensor zi({cfg.horizon, cfg.action_dim},
                std::vector<double>(z.data() + i * cfg.flat_dim(),
                                    z.data() + (i + 1) * cfg.flat_dim()));
      ActionTrajectory traj = gen.generate(transpose(zi), g, nullptr);
      for (std::int64_t j = 0; j < cfg.flat_dim(); ++j)
        CHECK(traj.waypoints[static_cast<std::size_t>(j)] ==
              Catch::Approx(batch.data()[i * cfg.flat_dim() + j]).margin(1e-12));
    }
  }
}
