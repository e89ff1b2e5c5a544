#pragma once

// Timestep-free single-step generators: a FiLM-conditioned MLP (the benchmark
// default) and a reduced-width 1D conv U-Net, plus the proprioceptive-state
// conditioning encoder. Neither network consumes a timestep or noise level
// anywhere; one forward pass produces one action chunk.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ad3d/errors.hpp"
#include "ad3d/rng.hpp"
#include "ad3d/tensor.hpp"

namespace ad3d {

// Counts generator forward passes consumed while sampling.
struct NfeSession {
  std::int64_t nfe = 0;
};

inline std::int64_t count_nfe(const NfeSession& session) { return session.nfe; }

struct ActionTrajectory {
  std::int64_t horizon = 0;
  std::int64_t action_dim = 0;
  std::vector<double> waypoints;  // H x D_a, waypoint-major

  double at(std::int64_t t, std::int64_t d) const {
    return waypoints[static_cast<std::size_t>(t * action_dim + d)];
  }
};

struct GeneratorConfig {
  enum class Arch { kMlp, kUnet1d };

  Arch arch = Arch::kMlp;
  std::int64_t action_dim = 2;
  std::int64_t horizon = 16;
  std::vector<std::int64_t> mlp_hidden{64, 64};
  std::vector<std::int64_t> unet_widths{16, 32, 64};
  std::int64_t groups = 8;
  std::int64_t obs_dim = 2;    // proprioceptive state dim per step
  std::int64_t obs_steps = 2;  // observation window T_o
  std::int64_t obs_feat = 16;  // per-step feature dim
  std::int64_t obs_hidden = 32;
  std::int64_t film_hidden = 32;

  std::int64_t flat_dim() const { return action_dim * horizon; }
  std::int64_t cond_dim() const { return obs_steps * obs_feat; }

  // Group count for a given width: 8 when it divides, else min(8, width/2).
  std::int64_t groups_for(std::int64_t channels) const {
    if (channels % groups == 0) return groups;
    return std::min<std::int64_t>(groups, channels / 2);
  }

  void validate() const {
    if (action_dim < 1 || horizon < 1) throw ConfigError("generator: bad action_dim/horizon");
    if (obs_dim < 1 || obs_steps < 1 || obs_feat < 1 || obs_hidden < 1 || film_hidden < 1)
      throw ConfigError("generator: bad observation encoder dims");
    if (arch == Arch::kMlp) {
      if (mlp_hidden.empty()) throw ConfigError("generator: mlp needs hidden widths");
      for (auto w : mlp_hidden)
        if (w < 1) throw ConfigError("generator: non-positive mlp width");
    } else {
      if (unet_widths.size() != 3) throw ConfigError("generator: unet1d has exactly 3 levels");
      if (horizon % 4 != 0) throw ConfigError("generator: unet1d horizon must be divisible by 4");
      for (auto w : unet_widths) {
        if (w < 2) throw ConfigError("generator: unet width too small");
        const std::int64_t g = groups_for(w);
        if (g < 1 || w % g != 0)
          throw ConfigError("generator: width " + std::to_string(w) + " has no valid group count");
      }
    }
  }
};

// Named parameter registry. Entries share buffers with the owning modules, so
// the optimizer and checkpointing mutate network weights in place.
class ParamSet {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, items_.size());
    items_.emplace_back(name, t);
    return t;
  }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  Tensor* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }
  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace nets_detail {

inline Tensor uniform_init(ParamSet& ps, const std::string& name,
                           std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng,
                           double scale = 1.0) {
  Tensor t(std::move(shape));
  const double bound = scale / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
  return ps.add(name, std::move(t));
}

inline Tensor zeros_init(ParamSet& ps, const std::string& name,
                         std::vector<std::int64_t> shape) {
  return ps.add(name, Tensor(std::move(shape)));
}

// Watch-or-passthrough for parameters inside forward passes.
inline Tensor P(Tape* tape, const Tensor& t) { return tape ? tape->watch(t) : t; }

// x [N x I] * w [I x O] + b [1 x O] broadcast over rows.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor xw = matmul(x, w);
  if (x.extent(0) == 1) return add(xw, b);
  Tensor ones = Tensor::full({x.extent(0), 1}, 1.0);
  return add(xw, matmul(ones, b));
}

// Broadcast a row [1 x C] to [C x T].
inline Tensor row_to_channels(const Tensor& row, std::int64_t tlen) {
  return matmul(transpose(row), Tensor::full({1, tlen}, 1.0));
}

}  // namespace nets_detail

// Per-channel scale and bias predicted from the conditioning vector through a
// Mish-activated hidden layer. The gamma/beta heads start near zero so the
// block begins as identity modulation (gamma ~ 1, beta ~ 0) while still
// passing gradient to the conditioning path.
class FilmHead {
 public:
  FilmHead() = default;
  FilmHead(ParamSet& ps, const std::string& prefix, std::int64_t cond_dim,
           std::int64_t hidden, std::int64_t channels, Rng& rng) {
    using namespace nets_detail;
    wf_ = uniform_init(ps, prefix + ".wf", {cond_dim, hidden}, cond_dim, rng);
    bf_ = zeros_init(ps, prefix + ".bf", {1, hidden});
    wg_ = uniform_init(ps, prefix + ".wg", {hidden, channels}, hidden, rng, 1e-3);
    bg_ = zeros_init(ps, prefix + ".bg", {1, channels});
    wb_ = uniform_init(ps, prefix + ".wb", {hidden, channels}, hidden, rng, 1e-3);
    bb_ = zeros_init(ps, prefix + ".bb", {1, channels});
  }

  // cond [R x cond_dim] -> (gamma, beta), each [R x C]
  std::pair<Tensor, Tensor> gamma_beta(const Tensor& cond, Tape* tape) const {
    using namespace nets_detail;
    Tensor feat = mish(affine(cond, P(tape, wf_), P(tape, bf_)));
    Tensor gamma = add_scalar(affine(feat, P(tape, wg_), P(tape, bg_)), 1.0);
    Tensor beta = affine(feat, P(tape, wb_), P(tape, bb_));
    return {gamma, beta};
  }

 private:
  Tensor wf_, bf_, wg_, bg_, wb_, bb_;
};

// Two-layer per-step MLP over proprioceptive states; per-step features are
// concatenated into the conditioning vector g.
class StateEncoder {
 public:
  StateEncoder() = default;
  StateEncoder(ParamSet& ps, const GeneratorConfig& cfg, Rng& rng) : cfg_(&cfg) {
    using namespace nets_detail;
    w1_ = uniform_init(ps, "enc.w1", {cfg.obs_dim, cfg.obs_hidden}, cfg.obs_dim, rng);
    b1_ = zeros_init(ps, "enc.b1", {1, cfg.obs_hidden});
    w2_ = uniform_init(ps, "enc.w2", {cfg.obs_hidden, cfg.obs_feat}, cfg.obs_hidden, rng);
    b2_ = zeros_init(ps, "enc.b2", {1, cfg.obs_feat});
  }

  // states: exactly T_o vectors of dim obs_dim -> g [1 x cond_dim]
  Tensor encode(const std::vector<std::vector<double>>& states, Tape* tape) const {
    using namespace nets_detail;
    if (static_cast<std::int64_t>(states.size()) != cfg_->obs_steps)
      throw ShapeError("encode_obs: expected " + std::to_string(cfg_->obs_steps) + " states");
    Tensor g_cols;  // built as [cond_dim x 1], transposed at the end
    for (const auto& s : states) {
      if (static_cast<std::int64_t>(s.size()) != cfg_->obs_dim)
        throw ShapeError("encode_obs: state dim mismatch");
      Tensor row({1, cfg_->obs_dim}, s);
      Tensor h = mish(affine(row, P(tape, w1_), P(tape, b1_)));
      Tensor c = affine(h, P(tape, w2_), P(tape, b2_));
      Tensor col = transpose(c);
      g_cols = g_cols.defined() ? concat_rows(g_cols, col) : col;
    }
    return transpose(g_cols);
  }

 private:
  const GeneratorConfig* cfg_ = nullptr;
  Tensor w1_, b1_, w2_, b2_;
};

// Flattened-trajectory MLP: each hidden layer is affine -> FiLM -> Mish.
class MlpGenerator {
 public:
  MlpGenerator() = default;
  MlpGenerator(ParamSet& ps, const GeneratorConfig& cfg, Rng& rng) {
    using namespace nets_detail;
    std::int64_t in = cfg.flat_dim();
    for (std::size_t l = 0; l < cfg.mlp_hidden.size(); ++l) {
      const std::int64_t out = cfg.mlp_hidden[l];
      const std::string prefix = "mlp.h" + std::to_string(l);
      layers_.push_back(Layer{
          uniform_init(ps, prefix + ".w", {in, out}, in, rng),
          zeros_init(ps, prefix + ".b", {1, out}),
          FilmHead(ps, prefix + ".film", cfg.cond_dim(), cfg.film_hidden, out, rng)});
      in = out;
    }
    w_out_ = uniform_init(ps, "mlp.out.w", {in, cfg.flat_dim()}, in, rng);
    b_out_ = zeros_init(ps, "mlp.out.b", {1, cfg.flat_dim()});
  }

  // z_flat [N x D], cond [N x cond_dim] -> [N x D]
  Tensor forward(const Tensor& z_flat, const Tensor& cond, Tape* tape) const {
    using namespace nets_detail;
    Tensor h = z_flat;
    for (const Layer& layer : layers_) {
      Tensor u = affine(h, P(tape, layer.w), P(tape, layer.b));
      auto [gamma, beta] = layer.film.gamma_beta(cond, tape);
      h = mish(add(mul(gamma, u), beta));
    }
    return affine(h, P(tape, w_out_), P(tape, b_out_));
  }

 private:
  struct Layer {
    Tensor w, b;
    FilmHead film;
  };
  std::vector<Layer> layers_;
  Tensor w_out_, b_out_;
};

// Residual block: Conv1D(k5) -> GroupNorm -> FiLM -> Mish -> Conv1D(k5) ->
// GroupNorm -> Mish, plus a shortcut (1x1 projection when widths differ).
class ResBlock1d {
 public:
  ResBlock1d() = default;
  ResBlock1d(ParamSet& ps, const std::string& prefix, std::int64_t in_ch, std::int64_t out_ch,
             const GeneratorConfig& cfg, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), groups_(cfg.groups_for(out_ch)) {
    using namespace nets_detail;
    w1_ = uniform_init(ps, prefix + ".conv1.w", {out_ch, in_ch, 5}, in_ch * 5, rng);
    b1_ = zeros_init(ps, prefix + ".conv1.b", {1, out_ch});
    film_ = FilmHead(ps, prefix + ".film", cfg.cond_dim(), cfg.film_hidden, out_ch, rng);
    w2_ = uniform_init(ps, prefix + ".conv2.w", {out_ch, out_ch, 5}, out_ch * 5, rng);
    b2_ = zeros_init(ps, prefix + ".conv2.b", {1, out_ch});
    if (in_ch != out_ch)
      w_sc_ = uniform_init(ps, prefix + ".shortcut.w", {out_ch, in_ch}, in_ch, rng);
  }

  Tensor apply(const Tensor& h, const Tensor& g, Tape* tape) const {
    using namespace nets_detail;
    const std::int64_t tlen = h.extent(1);
    Tensor u = conv1d(h, P(tape, w1_), 1);
    u = add(u, row_to_channels(P(tape, b1_), tlen));
    u = group_norm(u, groups_);
    auto [gamma, beta] = film_.gamma_beta(g, tape);
    u = add(mul(row_to_channels(gamma, tlen), u), row_to_channels(beta, tlen));
    u = mish(u);
    u = conv1d(u, P(tape, w2_), 1);
    u = add(u, row_to_channels(P(tape, b2_), tlen));
    u = mish(group_norm(u, groups_));
    Tensor sc = (in_ch_ == out_ch_) ? h : matmul(P(tape, w_sc_), h);
    return add(u, sc);
  }

 private:
  std::int64_t in_ch_ = 0, out_ch_ = 0, groups_ = 1;
  Tensor w1_, b1_, w2_, b2_, w_sc_;
  FilmHead film_;
};

// Three-level 1D conv U-Net over [D_a x H]. Encoder stages downsample the
// temporal axis (H -> H/2 -> H/4) with strided convolutions; the decoder
// mirrors them with nearest-neighbour upsampling and skip concatenation.
class UNet1d {
 public:
  UNet1d() = default;
  UNet1d(ParamSet& ps, const GeneratorConfig& cfg, Rng& rng) : cfg_(&cfg) {
    using namespace nets_detail;
    const auto& w = cfg.unet_widths;
    conv_in_w_ = uniform_init(ps, "unet.in.w", {w[0], cfg.action_dim, 5}, cfg.action_dim * 5, rng);
    conv_in_b_ = zeros_init(ps, "unet.in.b", {1, w[0]});

    enc_[0][0] = ResBlock1d(ps, "unet.enc0.rb0", w[0], w[0], cfg, rng);
    enc_[0][1] = ResBlock1d(ps, "unet.enc0.rb1", w[0], w[0], cfg, rng);
    down_w_[0] = uniform_init(ps, "unet.down0.w", {w[0], w[0], 5}, w[0] * 5, rng);
    down_b_[0] = zeros_init(ps, "unet.down0.b", {1, w[0]});
    enc_[1][0] = ResBlock1d(ps, "unet.enc1.rb0", w[0], w[1], cfg, rng);
    enc_[1][1] = ResBlock1d(ps, "unet.enc1.rb1", w[1], w[1], cfg, rng);
    down_w_[1] = uniform_init(ps, "unet.down1.w", {w[1], w[1], 5}, w[1] * 5, rng);
    down_b_[1] = zeros_init(ps, "unet.down1.b", {1, w[1]});
    enc_[2][0] = ResBlock1d(ps, "unet.enc2.rb0", w[1], w[2], cfg, rng);
    enc_[2][1] = ResBlock1d(ps, "unet.enc2.rb1", w[2], w[2], cfg, rng);

    mid_[0] = ResBlock1d(ps, "unet.mid.rb0", w[2], w[2], cfg, rng);
    mid_[1] = ResBlock1d(ps, "unet.mid.rb1", w[2], w[2], cfg, rng);

    dec_[0][0] = ResBlock1d(ps, "unet.dec2.rb0", w[2] + w[2], w[1], cfg, rng);
    dec_[0][1] = ResBlock1d(ps, "unet.dec2.rb1", w[1], w[1], cfg, rng);
    dec_[1][0] = ResBlock1d(ps, "unet.dec1.rb0", w[1] + w[1], w[0], cfg, rng);
    dec_[1][1] = ResBlock1d(ps, "unet.dec1.rb1", w[0], w[0], cfg, rng);
    dec_[2][0] = ResBlock1d(ps, "unet.dec0.rb0", w[0] + w[0], w[0], cfg, rng);
    dec_[2][1] = ResBlock1d(ps, "unet.dec0.rb1", w[0], w[0], cfg, rng);

    final_w_ = uniform_init(ps, "unet.final.w", {w[0], w[0], 5}, w[0] * 5, rng);
    final_b_ = zeros_init(ps, "unet.final.b", {1, w[0]});
    proj_w_ = uniform_init(ps, "unet.proj.w", {cfg.action_dim, w[0]}, w[0], rng);
    proj_b_ = zeros_init(ps, "unet.proj.b", {1, cfg.action_dim});
  }

  // z [D_a x H], g [1 x cond_dim] -> [D_a x H]
  Tensor forward(const Tensor& z, const Tensor& g, Tape* tape) const {
    using namespace nets_detail;
    const std::int64_t tlen = z.extent(1);
    Tensor h = conv1d(z, P(tape, conv_in_w_), 1);
    h = add(h, row_to_channels(P(tape, conv_in_b_), tlen));

    h = enc_[0][1].apply(enc_[0][0].apply(h, g, tape), g, tape);
    Tensor skip0 = h;
    h = conv1d(h, P(tape, down_w_[0]), 2);
    h = add(h, row_to_channels(P(tape, down_b_[0]), h.extent(1)));
    h = enc_[1][1].apply(enc_[1][0].apply(h, g, tape), g, tape);
    Tensor skip1 = h;
    h = conv1d(h, P(tape, down_w_[1]), 2);
    h = add(h, row_to_channels(P(tape, down_b_[1]), h.extent(1)));
    h = enc_[2][1].apply(enc_[2][0].apply(h, g, tape), g, tape);
    Tensor skip2 = h;

    h = mid_[1].apply(mid_[0].apply(h, g, tape), g, tape);

    h = dec_[0][1].apply(dec_[0][0].apply(concat_rows(h, skip2), g, tape), g, tape);
    h = upsample2x(h);
    h = dec_[1][1].apply(dec_[1][0].apply(concat_rows(h, skip1), g, tape), g, tape);
    h = upsample2x(h);
    h = dec_[2][1].apply(dec_[2][0].apply(concat_rows(h, skip0), g, tape), g, tape);

    h = conv1d(h, P(tape, final_w_), 1);
    h = add(h, row_to_channels(P(tape, final_b_), tlen));
    h = mish(group_norm(h, cfg_->groups_for(cfg_->unet_widths[0])));
    Tensor out = matmul(P(tape, proj_w_), h);  // 1x1 projection to D_a
    return add(out, row_to_channels(P(tape, proj_b_), tlen));
  }

 private:
  const GeneratorConfig* cfg_ = nullptr;
  Tensor conv_in_w_, conv_in_b_;
  ResBlock1d enc_[3][2];
  Tensor down_w_[2], down_b_[2];
  ResBlock1d mid_[2];
  ResBlock1d dec_[3][2];
  Tensor final_w_, final_b_, proj_w_, proj_b_;
};

// Facade owning the encoder, the chosen generator core and their parameters.
class Generator {
 public:
  explicit Generator(const GeneratorConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::stream(init_seed, 0x696e6974);
    enc_ = StateEncoder(params_, cfg_, rng);
    if (cfg_.arch == GeneratorConfig::Arch::kMlp)
      mlp_.emplace(params_, cfg_, rng);
    else
      unet_.emplace(params_, cfg_, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  Tensor encode_obs(const std::vector<std::vector<double>>& states, Tape* tape) const {
    return enc_.encode(states, tape);
  }

  // z_flat [N x D] (waypoint-major rows), cond [1 x cond_dim] or [N x cond_dim].
  Tensor forward_batch(const Tensor& z_flat, const Tensor& cond, Tape* tape) const {
    const std::int64_t n = z_flat.extent(0);
    Tensor cond_mat = cond;
    if (cond.extent(0) == 1 && n > 1 && mlp_.has_value())
      cond_mat = matmul(Tensor::full({n, 1}, 1.0), cond);
    if (mlp_) return mlp_->forward(z_flat, cond_mat, tape);

    // U-Net path: per-sample forwards stacked back into flattened rows.
    Tensor out;
    for (std::int64_t i = 0; i < n; ++i) {
      Tensor zi({cfg_.horizon, cfg_.action_dim},
                std::vector<double>(z_flat.data() + i * cfg_.flat_dim(),
                                    z_flat.data() + (i + 1) * cfg_.flat_dim()));
      Tensor gi = cond_mat;
      if (cond_mat.extent(0) > 1) {
        Tensor pick({1, n});
        pick.data()[i] = 1.0;
        gi = matmul(pick, cond_mat);
      }
      Tensor yi = unet_->forward(transpose(zi), gi, tape);       // [D_a x H]
      Tensor row = reshape(transpose(yi), {1, cfg_.flat_dim()});  // waypoint-major
      out = out.defined() ? concat_rows(out, row) : row;
    }
    return out;
  }

  // One forward pass; z is [D_a x H] noise drawn by the caller.
  ActionTrajectory generate(const Tensor& z, const Tensor& g, NfeSession* nfe) const {
    if (z.ndim() != 2 || z.extent(0) != cfg_.action_dim || z.extent(1) != cfg_.horizon)
      throw ShapeError("generate: z must be [D_a x H]");
    Tensor flat = reshape(transpose(z), {1, cfg_.flat_dim()});
    Tensor row = forward_batch(flat, g, nullptr);
    if (nfe) nfe->nfe += 1;
    ActionTrajectory traj;
    traj.horizon = cfg_.horizon;
    traj.action_dim = cfg_.action_dim;
    traj.waypoints = row.values();
    return traj;
  }

 private:
  GeneratorConfig cfg_;
  ParamSet params_;
  StateEncoder enc_;
  std::optional<MlpGenerator> mlp_;
  std::optional<UNet1d> unet_;
};

}  // namespace ad3d
