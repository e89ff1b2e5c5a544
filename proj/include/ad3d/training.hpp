#pragma once

// Sigmoid-scheduled composite loss, AdamW optimization loop, deterministic
// epoch streams and bit-exact checkpointing.
//
// Training is a pure function of (dataset, configs, seed): every random draw
// comes from a stream addressed by (seed, purpose, epoch, context), so runs
// replay bit-identically and a resumed run continues exactly where the
// uninterrupted one would be.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ad3d/drift.hpp"
#include "ad3d/errors.hpp"
#include "ad3d/flow.hpp"
#include "ad3d/nets.hpp"
#include "ad3d/rng.hpp"
#include "ad3d/tensor.hpp"
#include "ad3d/util.hpp"

#include "json.hpp"

namespace ad3d {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  std::int64_t epochs = 2000;
  double crossover = 0.7;   // crossover fraction of total epochs
  double sharpness = 0.05;  // k
  std::int64_t checkpoint_every = 500;

  void validate() const {
    if (epochs < 1) throw ConfigError("schedule: epochs must be >= 1");
    if (!(crossover > 0.0 && crossover < 1.0))
      throw ConfigError("schedule: crossover must lie in (0, 1)");
    if (!(sharpness > 0.0)) throw ConfigError("schedule: sharpness must be positive");
  }
};

// w_drift(e) = sigmoid((e - crossover E) / (k E)), w_mse = 1 - w_drift.
inline std::pair<double, double> schedule_weights(std::int64_t epoch, const ScheduleConfig& cfg) {
  const double e = static_cast<double>(epoch);
  const double total = static_cast<double>(cfg.epochs);
  const double w_drift =
      detail::sigmoid_stable((e - cfg.crossover * total) / (cfg.sharpness * total));
  return {w_drift, 1.0 - w_drift};
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean over the batch of ||xhat - sg(xhat + V)||^2. The whole drift target is
// a constant, so the value equals mean ||V||^2 and the gradient w.r.t. xhat
// is -2 V / N.
inline Tensor drift_loss(const Tensor& xhat, const Tensor& v_total) {
  if (xhat.shape() != v_total.shape()) throw ShapeError("drift_loss: shape mismatch");
  Tensor target(xhat.shape());
  for (std::int64_t i = 0; i < target.size(); ++i)
    target.data()[i] = xhat.data()[i] + v_total.data()[i];
  Tensor d = sub(xhat, target);  // target is untracked by construction
  return mul_scalar(reduce_sum(mul(d, d)), 1.0 / static_cast<double>(xhat.extent(0)));
}

// Mean squared error over batch and dims against per-row paired demos.
inline Tensor mse_loss(const Tensor& xhat, const Tensor& paired) {
  if (xhat.shape() != paired.shape()) throw ShapeError("mse_loss: shape mismatch");
  Tensor d = sub(xhat, stop_gradient(paired));
  return reduce_mean(mul(d, d));
}

inline Tensor total_loss(const Tensor& xhat, const Tensor& paired, const Tensor& v_total,
                         std::int64_t epoch, const ScheduleConfig& cfg) {
  auto [w_drift, w_mse] = schedule_weights(epoch, cfg);
  return add(mul_scalar(drift_loss(xhat, v_total), w_drift),
             mul_scalar(mse_loss(xhat, paired), w_mse));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;  // global-norm cap; <= 0 disables
  std::int64_t batch = 32;  // noise draws per context per epoch

  void validate() const {
    if (lr <= 0) throw ConfigError("optimizer: lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (batch < 1) throw ConfigError("optimizer: batch must be >= 1");
  }
};

// AdamW with decoupled weight decay, moments aligned with the ParamSet order.
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamSet& params, OptimizerConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& [name, t] : params.items()) {
      m_.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
    }
  }

  void step(const std::vector<std::vector<double>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_->items().size(); ++k) {
      auto& m = m_[k];
      auto& v = v_[k];
      const auto& g = grads[k];
      double* p = params_->items()[k].second.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::vector<std::vector<double>>& moments_m() { return m_; }
  std::vector<std::vector<double>>& moments_v() { return v_; }

 private:
  ParamSet* params_ = nullptr;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

enum class Method { kAda3Drift, kNaiveDrift, kFm };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kAda3Drift: return "ada3drift";
    case Method::kNaiveDrift: return "naive-drift";
    case Method::kFm: return "fm";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "ada3drift") return Method::kAda3Drift;
  if (s == "naive-drift") return Method::kNaiveDrift;
  if (s == "fm") return Method::kFm;
  throw ConfigError("unknown method: " + s);
}

// One discrete conditioning context: its observation window and the expert
// trajectories (flattened waypoint-major rows) recorded under it.
struct TrainContext {
  int id = 0;
  std::vector<std::vector<double>> obs;
  Tensor demos;  // M x D
};

struct TrainDataset {
  std::vector<TrainContext> contexts;
  std::int64_t flat_dim = 0;
};

struct TrainOptions {
  Method method = Method::kAda3Drift;
  GeneratorConfig gen;
  ScheduleConfig sched;
  OptimizerConfig opt;
  std::vector<double> temps{kDefaultTemps.begin(), kDefaultTemps.end()};
  std::int64_t fm_steps = 10;
  std::int64_t time_embed_dim = 16;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double l_total = 0, l_mse = 0, l_drift = 0;
  double w_drift = 0;
  double v_norm_mean = 0;
  std::vector<double> lambda;  // per temperature, averaged over contexts
};

// One JSON object per epoch; key order is fixed so identical runs emit
// byte-identical metric streams.
inline std::string metrics_json_line(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["l_total"] = m.l_total;
  j["l_mse"] = m.l_mse;
  j["l_drift"] = m.l_drift;
  j["w_drift"] = m.w_drift;
  j["v_norm_mean"] = m.v_norm_mean;
  j["lambda"] = m.lambda;
  return j.dump();
}

class Trainer {
 public:
  Trainer(const TrainOptions& opts, TrainDataset dataset)
      : opts_(opts), data_(std::move(dataset)) {
    opts_.gen.validate();
    opts_.sched.validate();
    opts_.opt.validate();
    if (data_.contexts.empty()) throw DataError("training: empty dataset");
    for (const auto& ctx : data_.contexts) {
      if (ctx.demos.ndim() != 2 || ctx.demos.extent(1) != data_.flat_dim)
        throw DataError("training: context demo dimension mismatch");
      if (ctx.demos.extent(0) < 1) throw DataError("training: context without demos");
    }
    if (data_.flat_dim != opts_.gen.flat_dim())
      throw DataError("training: dataset dimension does not match generator config");
    if (opts_.method == Method::kNaiveDrift) opts_.temps = {0.05};
    if (opts_.temps.empty()) throw ConfigError("training: no drift temperatures");

    if (opts_.method == Method::kFm) {
      flow_ = std::make_unique<FlowNet>(opts_.gen, opts_.seed, opts_.time_embed_dim);
    } else {
      gen_ = std::make_unique<Generator>(opts_.gen, opts_.seed);
    }
    optimizer_ = AdamW(params(), opts_.opt);
  }

  const TrainOptions& options() const { return opts_; }
  const TrainDataset& dataset() const { return data_; }
  std::int64_t epoch() const { return epoch_; }
  Generator& generator() { return gen_ ? *gen_ : flow_->core(); }
  FlowNet* flownet() { return flow_.get(); }
  const FlowNet* flownet() const { return flow_.get(); }
  ParamSet& params() { return gen_ ? gen_->params() : flow_->params(); }
  AdamW& optimizer() { return optimizer_; }

  // Schedule weights for this trainer's method at a given epoch.
  std::pair<double, double> weights_at(std::int64_t epoch) const {
    if (opts_.method == Method::kNaiveDrift) return {1.0, 0.0};
    return schedule_weights(epoch, opts_.sched);
  }

  EpochMetrics run_epoch() {
    EpochMetrics m = opts_.method == Method::kFm ? epoch_fm() : epoch_drift();
    ++epoch_;
    return m;
  }

 private:
  Tensor draw_noise(Rng& rng, std::int64_t n) const {
    Tensor z({n, data_.flat_dim});
    rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
    return z;
  }

  Tensor pair_demos(Rng& rng, const TrainContext& ctx, std::int64_t n) const {
    Tensor paired({n, data_.flat_dim});
    const std::int64_t m = ctx.demos.extent(0);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t j = rng.uniform_int(m);
      std::copy(ctx.demos.data() + j * data_.flat_dim,
                ctx.demos.data() + (j + 1) * data_.flat_dim,
                paired.data() + i * data_.flat_dim);
    }
    return paired;
  }

  std::vector<std::vector<double>> collect_grads(Tape& tape) const {
    std::vector<std::vector<double>> grads;
    const ParamSet& ps = gen_ ? gen_->params() : flow_->params();
    for (const auto& [name, param] : ps.items()) {
      if (tape.has_grad_for(param))
        grads.push_back(tape.grad_for(param));
      else
        grads.emplace_back(static_cast<std::size_t>(param.size()), 0.0);
    }
    if (opts_.opt.grad_clip > 0) {
      double sq = 0;
      for (const auto& g : grads)
        for (double v : g) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm > opts_.opt.grad_clip) {
        const double s = opts_.opt.grad_clip / norm;
        for (auto& g : grads)
          for (double& v : g) v *= s;
      }
    }
    return grads;
  }

  void check_finite(double loss, const char* what, int ctx_id) const {
    if (!std::isfinite(loss))
      throw NumericError(std::string("non-finite ") + what + " at epoch " +
                         std::to_string(epoch_) + " context " + std::to_string(ctx_id));
  }

  EpochMetrics epoch_drift() {
    EpochMetrics m;
    m.epoch = epoch_;
    auto [w_drift, w_mse] = weights_at(epoch_);
    m.w_drift = w_drift;
    m.lambda.assign(opts_.temps.size(), 0.0);

    const std::int64_t n = opts_.opt.batch;
    std::int64_t samples = 0;
    for (const TrainContext& ctx : data_.contexts) {
      Rng rng = Rng::stream(opts_.seed, 0x65706f63, static_cast<std::uint64_t>(epoch_),
                            static_cast<std::uint64_t>(ctx.id));
      Tensor z = draw_noise(rng, n);
      Tensor paired = pair_demos(rng, ctx, n);

      Tape tape;
      Tensor g = gen_->encode_obs(ctx.obs, &tape);
      Tensor xhat = gen_->forward_batch(z, g, &tape);

      SampleBatch batch{xhat.detached(), ctx.demos, ctx.id};
      DriftField field = aggregate_multi_temp(batch, opts_.temps);

      Tensor l_drift = drift_loss(xhat, field.v);
      Tensor l_mse = mse_loss(xhat, paired);
      Tensor loss = add(mul_scalar(l_drift, w_drift), mul_scalar(l_mse, w_mse));
      check_finite(loss.value(), "loss", ctx.id);

      tape.backward(loss);
      optimizer_.step(collect_grads(tape));

      m.l_total += loss.value();
      m.l_mse += l_mse.value();
      m.l_drift += l_drift.value();
      for (std::size_t l = 0; l < opts_.temps.size(); ++l) m.lambda[l] += field.lambda[l];
      for (std::int64_t i = 0; i < n; ++i) {
        double sq = 0;
        for (std::int64_t d = 0; d < data_.flat_dim; ++d) {
          const double v = field.v.data()[i * data_.flat_dim + d];
          sq += v * v;
        }
        m.v_norm_mean += std::sqrt(sq);
      }
      samples += n;
    }
    const double nctx = static_cast<double>(data_.contexts.size());
    m.l_total /= nctx;
    m.l_mse /= nctx;
    m.l_drift /= nctx;
    for (double& l : m.lambda) l /= nctx;
    m.v_norm_mean /= static_cast<double>(samples);
    return m;
  }

  EpochMetrics epoch_fm() {
    EpochMetrics m;
    m.epoch = epoch_;
    const std::int64_t n = opts_.opt.batch;
    for (const TrainContext& ctx : data_.contexts) {
      Rng rng = Rng::stream(opts_.seed, 0x666d6f63, static_cast<std::uint64_t>(epoch_),
                            static_cast<std::uint64_t>(ctx.id));
      Tensor z = draw_noise(rng, n);
      Tensor a = pair_demos(rng, ctx, n);
      std::vector<double> ts(static_cast<std::size_t>(n));
      for (auto& t : ts) t = rng.uniform();

      Tensor xt({n, data_.flat_dim});
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = ts[static_cast<std::size_t>(i)];
        for (std::int64_t d = 0; d < data_.flat_dim; ++d)
          xt.data()[i * data_.flat_dim + d] = (1.0 - t) * z.data()[i * data_.flat_dim + d] +
                                              t * a.data()[i * data_.flat_dim + d];
      }
      Tensor target = fm_target(z, a);

      Tape tape;
      Tensor g = flow_->encode_obs(ctx.obs, &tape);
      Tensor v = flow_->forward_batch(xt, g, ts, &tape);
      Tensor loss = fm_loss(v, target);
      check_finite(loss.value(), "fm loss", ctx.id);

      tape.backward(loss);
      optimizer_.step(collect_grads(tape));

      m.l_total += loss.value();
      m.l_mse += loss.value();
    }
    const double nctx = static_cast<double>(data_.contexts.size());
    m.l_total /= nctx;
    m.l_mse /= nctx;
    return m;
  }

  TrainOptions opts_;
  TrainDataset data_;
  std::unique_ptr<Generator> gen_;
  std::unique_ptr<FlowNet> flow_;
  AdamW optimizer_;
  std::int64_t epoch_ = 0;

  friend void save_checkpoint(const std::filesystem::path&, Trainer&);
  friend void restore_checkpoint(Trainer&, const std::filesystem::path&);
};

// ---------------------------------------------------------------------------
// checkpoints: "AD3D" magic, u32 version, config hash, seed, epoch, adam step
// count, then length-prefixed named float64 tensors (params, then adam.m.* /
// adam.v.* moments). Everything little-endian.
// ---------------------------------------------------------------------------

struct CheckpointMagicError : DataError {
  explicit CheckpointMagicError(const std::string& w) : DataError(w) {}
};
struct CheckpointVersionError : DataError {
  explicit CheckpointVersionError(const std::string& w) : DataError(w) {}
};
struct CheckpointTruncatedError : DataError {
  explicit CheckpointTruncatedError(const std::string& w) : DataError(w) {}
};

namespace ckpt_detail {

constexpr char kMagic[4] = {'A', 'D', '3', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
inline void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void put_tensor(std::string& out, const std::string& name, const double* data,
                       const std::vector<std::int64_t>& shape) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  std::int64_t n = 1;
  for (auto e : shape) {
    put<std::int64_t>(out, e);
    n *= e;
  }
  out.append(reinterpret_cast<const char*>(data), static_cast<std::size_t>(n) * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > buf_.size())
      throw CheckpointTruncatedError("checkpoint truncated: " + path_);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw CheckpointTruncatedError("checkpoint truncated: " + path_);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline void save_checkpoint(const std::filesystem::path& path, Trainer& trainer) {
  using namespace ckpt_detail;
  std::string out;
  out.append(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, trainer.opts_.config_hash);
  put<std::uint64_t>(out, trainer.opts_.seed);
  put<std::int64_t>(out, trainer.epoch_);
  put<std::int64_t>(out, trainer.optimizer().steps());

  const auto& items = trainer.params().items();
  auto& m = trainer.optimizer().moments_m();
  auto& v = trainer.optimizer().moments_v();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(items.size() * 3));
  for (const auto& [name, t] : items) put_tensor(out, "p." + name, t.data(), t.shape());
  for (std::size_t k = 0; k < items.size(); ++k)
    put_tensor(out, "adam.m." + items[k].first, m[k].data(),
               {static_cast<std::int64_t>(m[k].size())});
  for (std::size_t k = 0; k < items.size(); ++k)
    put_tensor(out, "adam.v." + items[k].first, v[k].data(),
               {static_cast<std::int64_t>(v[k].size())});

  write_file_atomic(path, out);
}

inline void restore_checkpoint(Trainer& trainer, const std::filesystem::path& path) {
  using namespace ckpt_detail;
  const std::string buf = read_file(path);
  Reader r(buf, path.string());

  const std::string magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw CheckpointMagicError("checkpoint: bad magic in " + path.string());
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw CheckpointVersionError("checkpoint: version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kVersion) + ")");
  const auto config_hash = r.get<std::uint64_t>();
  if (trainer.opts_.config_hash != 0 && config_hash != trainer.opts_.config_hash)
    throw DataError("checkpoint: config hash mismatch for " + path.string());
  trainer.opts_.seed = r.get<std::uint64_t>();
  trainer.epoch_ = r.get<std::int64_t>();
  trainer.optimizer().set_steps(r.get<std::int64_t>());

  const auto count = r.get<std::uint32_t>();
  std::map<std::string, std::vector<double>> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name = r.get_bytes(name_len);
    const auto ndim = r.get<std::uint32_t>();
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) n *= r.get<std::int64_t>();
    const std::string bytes = r.get_bytes(static_cast<std::size_t>(n) * sizeof(double));
    std::vector<double> data(static_cast<std::size_t>(n));
    std::memcpy(data.data(), bytes.data(), bytes.size());
    loaded.emplace(name, std::move(data));
  }

  auto& items = trainer.params().items();
  auto& m = trainer.optimizer().moments_m();
  auto& v = trainer.optimizer().moments_v();
  for (std::size_t k = 0; k < items.size(); ++k) {
    auto& [name, t] = items[k];
    auto fetch = [&](const std::string& key) -> const std::vector<double>& {
      auto it = loaded.find(key);
      if (it == loaded.end()) throw DataError("checkpoint: missing tensor " + key);
      return it->second;
    };
    const auto& pd = fetch("p." + name);
    if (static_cast<std::int64_t>(pd.size()) != t.size())
      throw DataError("checkpoint: shape mismatch for " + name);
    std::copy(pd.begin(), pd.end(), t.data());
    m[k] = fetch("adam.m." + name);
    v[k] = fetch("adam.v." + name);
  }
}

}  // namespace ad3d
