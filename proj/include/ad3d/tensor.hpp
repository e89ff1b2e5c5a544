#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// The op vocabulary is fixed to what the generators, losses and drift math
// need: elementwise add/sub/mul (same-shape or scalar broadcast), matmul,
// conv1d (k=5, p=2, stride 1|2), group_norm, mish, softmax over rows,
// transpose, row concat, nearest 2x temporal upsample, reshape and full
// reductions. Every kernel evaluates in a fixed sequential order so repeated
// forward passes are bit-identical.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ad3d/errors.hpp"

namespace ad3d {

class Tape;

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<std::int64_t>(data_->size()) != count(shape_))
      throw ShapeError("tensor data length does not match shape");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ShapeError("from_rows: no rows");
    std::int64_t n = static_cast<std::int64_t>(rows.size());
    std::int64_t d = static_cast<std::int64_t>(rows[0].size());
    Tensor t({n, d});
    double* p = t.data();
    for (std::int64_t i = 0; i < n; ++i) {
      if (static_cast<std::int64_t>(rows[i].size()) != d)
        throw ShapeError("from_rows: ragged rows");
      for (std::int64_t j = 0; j < d; ++j) p[i * d + j] = rows[i][j];
    }
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  std::int64_t extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  const std::vector<double>& values() const { return *data_; }

  double value() const {
    if (size() != 1) throw ShapeError("value(): tensor is not scalar");
    return (*data_)[0];
  }

  bool defined() const { return static_cast<bool>(data_); }
  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

  // Detached view: same buffer, no gradient history.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  static std::int64_t count(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
      if (e <= 0) throw ShapeError("non-positive extent in shape");
      n *= e;
    }
    return n;
  }

 private:
  friend class Tape;
  friend Tensor make_tracked(Tape* tp, Tensor t, int node);

  std::vector<std::int64_t> shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape: op records in execution order, walked backwards once.
// Gradients accumulate additively across fan-out. A tape is a per-step
// object; dropping it frees the whole graph.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers (or finds) a leaf node for `t` and returns a tracked handle
  // sharing its buffer. Watching the same buffer twice yields the same node.
  Tensor watch(const Tensor& t) {
    if (!t.defined()) throw ShapeError("watch: undefined tensor");
    auto it = leaves_.find(t.data_.get());
    int node;
    if (it != leaves_.end()) {
      node = it->second;
    } else {
      node = add_node(static_cast<std::size_t>(t.size()));
      leaves_.emplace(t.data_.get(), node);
    }
    Tensor out = t.detached();
    out.tape_ = this;
    out.node_ = node;
    return out;
  }

  // dLoss/dNode for every node reachable from `loss`; loss must be scalar.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
    if (loss.tape() != this || !loss.tracked())
      throw ShapeError("backward: loss is not tracked on this tape");
    if (backward_done_) throw std::logic_error("backward already ran on this tape");
    backward_done_ = true;
    grads_[static_cast<std::size_t>(loss.node())][0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)(*this);
  }

  // Gradient buffer of a tracked tensor.
  const std::vector<double>& grad(const Tensor& t) const {
    if (t.tape() != &const_cast<Tape&>(*this) || !t.tracked())
      throw ShapeError("grad: tensor is not tracked on this tape");
    return grads_[static_cast<std::size_t>(t.node())];
  }

  // Gradient of a watched parameter, looked up by its buffer. Parameters that
  // were never watched on this tape receive nothing.
  bool has_grad_for(const Tensor& param) const {
    return leaves_.count(param.data_.get()) != 0;
  }
  const std::vector<double>& grad_for(const Tensor& param) const {
    auto it = leaves_.find(param.data_.get());
    if (it == leaves_.end())
      throw ShapeError("grad_for: parameter was not watched on this tape");
    return grads_[static_cast<std::size_t>(it->second)];
  }

  std::size_t num_records() const { return records_.size(); }

  // --- used by op implementations ---
  int add_node(std::size_t n) {
    grads_.emplace_back(n, 0.0);
    return static_cast<int>(grads_.size()) - 1;
  }
  void record(std::function<void(Tape&)> back) { records_.push_back(std::move(back)); }
  std::vector<double>& node_grad(int id) { return grads_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<std::vector<double>> grads_;
  std::vector<std::function<void(Tape&)>> records_;
  std::unordered_map<const void*, int> leaves_;
  bool backward_done_ = false;
};

inline Tensor make_tracked(Tape* tp, Tensor t, int node) {
  t.tape_ = tp;
  t.node_ = node;
  return t;
}

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (tape == nullptr) tape = t->tape();
    else if (tape != t->tape())
      throw ShapeError("operands tracked on different tapes");
  }
  return tape;
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Broadcasting covers scalar-with-tensor and identical
// shapes only.
// ---------------------------------------------------------------------------

enum class EwOp { add, sub, mul };

namespace detail {

// Ops register the output node first, then a backward record built from it.
template <typename Back>
inline Tensor finish(Tape* tp, Tensor out, Back&& make_back) {
  if (tp == nullptr) return out;
  int node = tp->add_node(static_cast<std::size_t>(out.size()));
  tp->record(make_back(node));
  return make_tracked(tp, std::move(out), node);
}

}  // namespace detail

inline Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!detail::same_shape(a, b) && !a_scalar && !b_scalar)
    throw ShapeError("elementwise: shapes differ and neither operand is scalar");

  const Tensor& big = (a_scalar && !b_scalar) ? b : a;
  Tensor out(big.shape());
  const std::int64_t n = out.size();
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::int64_t sa = a_scalar ? 0 : 1;
    const std::int64_t sb = b_scalar ? 0 : 1;
    switch (op) {
      case EwOp::add:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] + pb[i * sb];
        break;
      case EwOp::sub:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] - pb[i * sb];
        break;
      case EwOp::mul:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] * pb[i * sb];
        break;
    }
  }

  Tape* tp = detail::common_tape({&a, &b});
  if (tp == nullptr) return out;
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  std::shared_ptr<std::vector<double>> adata, bdata;
  if (op == EwOp::mul) {  // saved operands, only mul needs them
    adata = std::make_shared<std::vector<double>>(a.values());
    bdata = std::make_shared<std::vector<double>>(b.values());
  }
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      const std::int64_t sa = a_scalar ? 0 : 1;
      const std::int64_t sb = b_scalar ? 0 : 1;
      if (an >= 0) {
        auto& ga = t.node_grad(an);
        for (std::int64_t i = 0; i < n; ++i) {
          double d = 0;
          switch (op) {
            case EwOp::add: d = g[i]; break;
            case EwOp::sub: d = g[i]; break;
            case EwOp::mul: d = g[i] * (*bdata)[static_cast<std::size_t>(i * sb)]; break;
          }
          ga[static_cast<std::size_t>(i * sa)] += d;
        }
      }
      if (bn >= 0) {
        auto& gb = t.node_grad(bn);
        for (std::int64_t i = 0; i < n; ++i) {
          double d = 0;
          switch (op) {
            case EwOp::add: d = g[i]; break;
            case EwOp::sub: d = -g[i]; break;
            case EwOp::mul: d = g[i] * (*adata)[static_cast<std::size_t>(i * sa)]; break;
          }
          gb[static_cast<std::size_t>(i * sb)] += d;
        }
      }
    };
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }

inline Tensor add_scalar(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor mul_scalar(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: operands must be 2-D");
  const std::int64_t m = a.extent(0), k = a.extent(1);
  const std::int64_t k2 = b.extent(0), n = b.extent(1);
  if (k != k2) throw ShapeError("matmul: inner extents differ");

  Tensor out({m, n});
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        double* orow = po + i * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }

  Tape* tp = detail::common_tape({&a, &b});
  if (tp == nullptr) return out;
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  auto av = std::make_shared<std::vector<double>>(a.values());
  auto bv = std::make_shared<std::vector<double>>(b.values());
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      if (an >= 0) {  // dA = G * B^T
        auto& ga = t.node_grad(an);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t p = 0; p < k; ++p) {
            double acc = 0;
            const double* grow = g.data() + i * n;
            const double* brow = bv->data() + p * n;
            for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<std::size_t>(i * k + p)] += acc;
          }
      }
      if (bn >= 0) {  // dB = A^T * G
        auto& gb = t.node_grad(bn);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t p = 0; p < k; ++p) {
            const double avip = (*av)[static_cast<std::size_t>(i * k + p)];
            const double* grow = g.data() + i * n;
            double* gbrow = gb.data() + p * n;
            for (std::int64_t j = 0; j < n; ++j) gbrow[j] += avip * grow[j];
          }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// conv1d: cross-correlation over [C_in x T] with kernel [C_out x C_in x 5],
// zero padding 2. stride 2 yields T' = ceil(T/2).
// ---------------------------------------------------------------------------

inline Tensor conv1d(const Tensor& x, const Tensor& w, int stride) {
  if (x.ndim() != 2 || w.ndim() != 3) throw ShapeError("conv1d: x must be 2-D, w 3-D");
  if (w.extent(2) != 5) throw ShapeError("conv1d: kernel size must be 5");
  if (stride != 1 && stride != 2) throw ShapeError("conv1d: stride must be 1 or 2");
  const std::int64_t cin = x.extent(0), tlen = x.extent(1);
  const std::int64_t cout = w.extent(0);
  if (w.extent(1) != cin) throw ShapeError("conv1d: channel mismatch");
  constexpr std::int64_t kK = 5, kPad = 2;
  const std::int64_t tout = (tlen + 2 * kPad - kK) / stride + 1;

  Tensor out({cout, tout});
  {
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t to = 0; to < tout; ++to) {
        double acc = 0;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const double* xrow = px + ci * tlen;
          const double* wrow = pw + (co * cin + ci) * kK;
          for (std::int64_t k = 0; k < kK; ++k) {
            const std::int64_t ti = to * stride + k - kPad;
            if (ti >= 0 && ti < tlen) acc += xrow[ti] * wrow[k];
          }
        }
        po[co * tout + to] = acc;
      }
  }

  Tape* tp = detail::common_tape({&x, &w});
  if (tp == nullptr) return out;
  const int xn = x.tracked() ? x.node() : -1;
  const int wn = w.tracked() ? w.node() : -1;
  auto xv = std::make_shared<std::vector<double>>(x.values());
  auto wv = std::make_shared<std::vector<double>>(w.values());
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      if (xn >= 0) {
        auto& gx = t.node_grad(xn);
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t to = 0; to < tout; ++to) {
            const double gv = g[static_cast<std::size_t>(co * tout + to)];
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              const double* wrow = wv->data() + (co * cin + ci) * kK;
              for (std::int64_t k = 0; k < kK; ++k) {
                const std::int64_t ti = to * stride + k - kPad;
                if (ti >= 0 && ti < tlen) gx[static_cast<std::size_t>(ci * tlen + ti)] += gv * wrow[k];
              }
            }
          }
      }
      if (wn >= 0) {
        auto& gw = t.node_grad(wn);
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t to = 0; to < tout; ++to) {
            const double gv = g[static_cast<std::size_t>(co * tout + to)];
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              const double* xrow = xv->data() + ci * tlen;
              double* gwrow = gw.data() + (co * cin + ci) * kK;
              for (std::int64_t k = 0; k < kK; ++k) {
                const std::int64_t ti = to * stride + k - kPad;
                if (ti >= 0 && ti < tlen) gwrow[k] += gv * xrow[ti];
              }
            }
          }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// group_norm over [C x T]: each group of channels is normalized to zero mean
// and unit variance across (channels-in-group x T). eps = 1e-5. No affine.
// ---------------------------------------------------------------------------

inline Tensor group_norm(const Tensor& x, std::int64_t groups) {
  if (x.ndim() != 2) throw ShapeError("group_norm: input must be [C x T]");
  const std::int64_t c = x.extent(0), tlen = x.extent(1);
  if (groups < 1 || c % groups != 0)
    throw ShapeError("group_norm: channel count not divisible by groups");
  constexpr double kEps = 1e-5;
  const std::int64_t gc = c / groups;     // channels per group
  const std::int64_t gn = gc * tlen;      // elements per group

  Tensor out(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups));
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const double* base = px + gi * gc * tlen;
      double mean = 0;
      for (std::int64_t i = 0; i < gn; ++i) mean += base[i];
      mean /= static_cast<double>(gn);
      double var = 0;
      for (std::int64_t i = 0; i < gn; ++i) {
        const double d = base[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(gn);
      const double is = 1.0 / std::sqrt(var + kEps);
      (*inv_std)[static_cast<std::size_t>(gi)] = is;
      double* obase = po + gi * gc * tlen;
      for (std::int64_t i = 0; i < gn; ++i) obase[i] = (base[i] - mean) * is;
    }
  }

  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  auto yv = std::make_shared<std::vector<double>>(out.values());
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      auto& gx = t.node_grad(xn);
      for (std::int64_t gi = 0; gi < groups; ++gi) {
        const std::int64_t off = gi * gc * tlen;
        double gmean = 0, gymean = 0;
        for (std::int64_t i = 0; i < gn; ++i) {
          gmean += g[static_cast<std::size_t>(off + i)];
          gymean += g[static_cast<std::size_t>(off + i)] * (*yv)[static_cast<std::size_t>(off + i)];
        }
        gmean /= static_cast<double>(gn);
        gymean /= static_cast<double>(gn);
        const double is = (*inv_std)[static_cast<std::size_t>(gi)];
        for (std::int64_t i = 0; i < gn; ++i) {
          const double y = (*yv)[static_cast<std::size_t>(off + i)];
          gx[static_cast<std::size_t>(off + i)] +=
              is * (g[static_cast<std::size_t>(off + i)] - gmean - y * gymean);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// mish: x * tanh(softplus(x)), with the softplus evaluated stably.
// ---------------------------------------------------------------------------

namespace detail {
inline double softplus_stable(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid_stable(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

inline Tensor mish(const Tensor& x) {
  Tensor out(x.shape());
  const std::int64_t n = x.size();
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < n; ++i)
      po[i] = px[i] * std::tanh(detail::softplus_stable(px[i]));
  }
  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  auto xv = std::make_shared<std::vector<double>>(x.values());
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      auto& gx = t.node_grad(xn);
      for (std::int64_t i = 0; i < n; ++i) {
        const double xi = (*xv)[static_cast<std::size_t>(i)];
        const double th = std::tanh(detail::softplus_stable(xi));
        const double d = th + xi * (1.0 - th * th) * detail::sigmoid_stable(xi);
        gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * d;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// softmax over each row of [m x n], max-subtracted for stability. Column
// softmax is obtained by transposing around this op.
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("softmax_rows: input must be 2-D");
  const std::int64_t m = x.extent(0), n = x.extent(1);
  Tensor out(x.shape());
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < m; ++i) {
      const double* row = px + i * n;
      double mx = row[0];
      for (std::int64_t j = 1; j < n; ++j) mx = row[j] > mx ? row[j] : mx;
      double denom = 0;
      double* orow = po + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        orow[j] = std::exp(row[j] - mx);
        denom += orow[j];
      }
      for (std::int64_t j = 0; j < n; ++j) orow[j] /= denom;
    }
  }
  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  auto yv = std::make_shared<std::vector<double>>(out.values());
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      auto& gx = t.node_grad(xn);
      for (std::int64_t i = 0; i < m; ++i) {
        const double* yrow = yv->data() + i * n;
        const double* grow = g.data() + i * n;
        double dot = 0;
        for (std::int64_t j = 0; j < n; ++j) dot += grow[j] * yrow[j];
        double* gxrow = gx.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// transpose, concat over rows, nearest 2x upsample, reshape
// ---------------------------------------------------------------------------

inline Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("transpose: input must be 2-D");
  const std::int64_t m = x.extent(0), n = x.extent(1);
  Tensor out({n, m});
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
  }
  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      auto& gx = t.node_grad(xn);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          gx[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(j * m + i)];
    };
  });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("concat_rows: operands must be 2-D");
  if (a.extent(1) != b.extent(1)) throw ShapeError("concat_rows: column counts differ");
  const std::int64_t ra = a.extent(0), rb = b.extent(0), n = a.extent(1);
  Tensor out({ra + rb, n});
  {
    double* po = out.data();
    std::copy(a.data(), a.data() + ra * n, po);
    std::copy(b.data(), b.data() + rb * n, po + ra * n);
  }
  Tape* tp = detail::common_tape({&a, &b});
  if (tp == nullptr) return out;
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      if (an >= 0) {
        auto& ga = t.node_grad(an);
        for (std::int64_t i = 0; i < ra * n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
      if (bn >= 0) {
        auto& gb = t.node_grad(bn);
        for (std::int64_t i = 0; i < rb * n; ++i)
          gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(ra * n + i)];
      }
    };
  });
}

// Nearest-neighbour temporal upsample: [C x T] -> [C x 2T].
inline Tensor upsample2x(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("upsample2x: input must be [C x T]");
  const std::int64_t c = x.extent(0), tlen = x.extent(1);
  Tensor out({c, 2 * tlen});
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t ti = 0; ti < tlen; ++ti) {
        const double v = px[ci * tlen + ti];
        po[ci * 2 * tlen + 2 * ti] = v;
        po[ci * 2 * tlen + 2 * ti + 1] = v;
      }
  }
  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      auto& gx = t.node_grad(xn);
      for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ti = 0; ti < tlen; ++ti)
          gx[static_cast<std::size_t>(ci * tlen + ti)] +=
              g[static_cast<std::size_t>(ci * 2 * tlen + 2 * ti)] +
              g[static_cast<std::size_t>(ci * 2 * tlen + 2 * ti + 1)];
    };
  });
}

inline Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape) {
  if (Tensor::count(shape) != x.size()) throw ShapeError("reshape: element count mismatch");
  Tensor out(std::move(shape), x.values());
  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  const std::int64_t n = x.size();
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const auto& g = t.node_grad(on);
      auto& gx = t.node_grad(xn);
      for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
    };
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor reduce_sum(const Tensor& x) {
  const std::int64_t n = x.size();
  double acc = 0;
  const double* px = x.data();
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc);
  Tape* tp = detail::common_tape({&x});
  if (tp == nullptr) return out;
  const int xn = x.node();
  return detail::finish(tp, std::move(out), [=](int on) {
    return [=](Tape& t) {
      const double g = t.node_grad(on)[0];
      auto& gx = t.node_grad(xn);
      for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g;
    };
  });
}

inline Tensor reduce_mean(const Tensor& x) {
  return mul_scalar(reduce_sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// stop_gradient: identical values, no gradient path.
// ---------------------------------------------------------------------------

inline Tensor stop_gradient(const Tensor& x) { return x.detached(); }

}  // namespace ad3d
