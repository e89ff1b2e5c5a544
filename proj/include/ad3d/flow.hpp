#pragma once

// Conditional flow-matching baseline. The network is the same generator core
// but additionally conditioned on t through a sinusoidal embedding projected
// into the conditioning vector; sampling integrates the learned field with a
// plain Euler scheme (K steps = K NFE, K = 1 is the single-step sampler).

#include <cmath>
#include <cstdint>
#include <vector>

#include "ad3d/errors.hpp"
#include "ad3d/nets.hpp"
#include "ad3d/rng.hpp"
#include "ad3d/tensor.hpp"

namespace ad3d {

// x_t = (1 - t) z + t a, t in [0, 1].
inline Tensor fm_interpolate(const Tensor& z, const Tensor& a, double t) {
  if (t < 0.0 || t > 1.0) throw NumericError("fm_interpolate: t out of [0, 1]");
  if (z.shape() != a.shape()) throw ShapeError("fm_interpolate: shape mismatch");
  Tensor out(z.shape());
  for (std::int64_t i = 0; i < out.size(); ++i)
    out.data()[i] = (1.0 - t) * z.data()[i] + t * a.data()[i];
  return out;
}

// Conditional target field u_t = a - z (independent of t for linear paths).
inline Tensor fm_target(const Tensor& z, const Tensor& a) { return sub(a, z); }

// Squared field error, mean over batch rows.
inline Tensor fm_loss(const Tensor& v_pred, const Tensor& target) {
  if (v_pred.shape() != target.shape()) throw ShapeError("fm_loss: shape mismatch");
  Tensor d = sub(v_pred, stop_gradient(target));
  return mul_scalar(reduce_sum(mul(d, d)), 1.0 / static_cast<double>(v_pred.extent(0)));
}

// Sinusoidal embedding of t, projected and summed into the conditioning row.
class TimeEmbed {
 public:
  TimeEmbed() = default;
  TimeEmbed(ParamSet& ps, const GeneratorConfig& cfg, std::int64_t dim, Rng& rng) : dim_(dim) {
    w_ = nets_detail::uniform_init(ps, "temb.w", {dim, cfg.cond_dim()}, dim, rng);
  }

  std::int64_t dim() const { return dim_; }

  // Multi-scale sin/cos features over [0, 1].
  static std::vector<double> features(double t, std::int64_t dim) {
    std::vector<double> f(static_cast<std::size_t>(dim));
    for (std::int64_t i = 0; i < dim / 2; ++i) {
      const double freq = 3.14159265358979323846 * static_cast<double>(1ll << i);
      f[static_cast<std::size_t>(2 * i)] = std::sin(freq * t);
      f[static_cast<std::size_t>(2 * i + 1)] = std::cos(freq * t);
    }
    return f;
  }

  // g [1 x cond] + emb(t) W -> [1 x cond]
  Tensor apply(const Tensor& g, double t, Tape* tape) const {
    Tensor emb({1, dim_}, features(t, dim_));
    return add(g, matmul(emb, nets_detail::P(tape, w_)));
  }

  // g [1 x cond] broadcast over rows, each shifted by its own emb(t_i).
  Tensor apply_batch(const Tensor& g, const std::vector<double>& ts, Tape* tape) const {
    const std::int64_t n = static_cast<std::int64_t>(ts.size());
    Tensor emb({n, dim_});
    for (std::int64_t i = 0; i < n; ++i) {
      const auto f = features(ts[static_cast<std::size_t>(i)], dim_);
      std::copy(f.begin(), f.end(), emb.data() + i * dim_);
    }
    Tensor shift = matmul(emb, nets_detail::P(tape, w_));
    Tensor base = matmul(Tensor::full({n, 1}, 1.0), g);
    return add(base, shift);
  }

 private:
  std::int64_t dim_ = 16;
  Tensor w_;
};

// Generator core + time conditioning; the parameters of both live in the
// core's ParamSet so the optimizer and checkpoints see one flat registry.
class FlowNet {
 public:
  FlowNet(const GeneratorConfig& cfg, std::uint64_t init_seed, std::int64_t time_embed_dim = 16)
      : core_(cfg, init_seed) {
    Rng rng = Rng::stream(init_seed, 0x74656d62);
    temb_ = TimeEmbed(core_.params(), cfg, time_embed_dim, rng);
  }

  const GeneratorConfig& config() const { return core_.config(); }
  Generator& core() { return core_; }
  const Generator& core() const { return core_; }
  const TimeEmbed& time_embed() const { return temb_; }
  ParamSet& params() { return core_.params(); }
  const ParamSet& params() const { return core_.params(); }

  Tensor encode_obs(const std::vector<std::vector<double>>& states, Tape* tape) const {
    return core_.encode_obs(states, tape);
  }

  // Batched training forward: rows of x_t with per-row t.
  Tensor forward_batch(const Tensor& x_rows, const Tensor& g, const std::vector<double>& ts,
                       Tape* tape) const {
    Tensor cond = temb_.apply_batch(g, ts, tape);
    return core_.forward_batch(x_rows, cond, tape);
  }

  // v_theta(x, t, g) for a single [D_a x H] sample; one NFE.
  Tensor velocity(const Tensor& x, double t, const Tensor& g, NfeSession* nfe) const {
    Tensor cond = temb_.apply(g, t, nullptr);
    Tensor flat = reshape(transpose(x), {1, config().flat_dim()});
    Tensor row = core_.forward_batch(flat, cond, nullptr);
    if (nfe) nfe->nfe += 1;
    return transpose(reshape(row, {config().horizon, config().action_dim}));
  }

 private:
  Generator core_;
  TimeEmbed temb_;
};

// Euler integration of the learned field from noise z; x_{i+1} = x_i +
// (1/K) v(x_i, i/K). Consumes exactly K NFE.
inline ActionTrajectory euler_sample(const FlowNet& net, const Tensor& g, std::int64_t steps,
                                     const Tensor& z, NfeSession* nfe) {
  if (steps < 1) throw ConfigError("euler_sample: steps must be >= 1");
  const GeneratorConfig& cfg = net.config();
  Tensor x(z.shape(), z.values());
  for (std::int64_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps);
    Tensor v = net.velocity(x, t, g, nfe);
    for (std::int64_t j = 0; j < x.size(); ++j)
      x.data()[j] += v.data()[j] / static_cast<double>(steps);
  }
  Tensor way = transpose(x);
  ActionTrajectory traj;
  traj.horizon = cfg.horizon;
  traj.action_dim = cfg.action_dim;
  traj.waypoints = way.values();
  return traj;
}

}  // namespace ad3d
