#pragma once

// Randomized central-difference checks for every differentiable tensor op.
// The oracle side only ever calls forward kernels, so it stays independent of
// the tape's backward rules.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ad3d/rng.hpp"
#include "ad3d/tensor.hpp"

namespace ad3d {

struct GradCheckResult {
  std::string op;
  int trials = 0;
  double max_err = 0.0;  // max of per-element rel err (abs err where analytic is tiny)
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  bool all_pass = true;
};

namespace gradcheck_detail {

inline double elem_error(double analytic, double numeric) {
  const double diff = std::fabs(analytic - numeric);
  const double mag = std::max(std::fabs(analytic), std::fabs(numeric));
  if (std::fabs(analytic) > 1e-8) return diff / mag;
  return diff;  // absolute error in the tiny-gradient regime
}

using MakeInputs = std::function<std::vector<Tensor>(Rng&)>;
using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline GradCheckResult check_op(const std::string& name, int trials, double tol,
                                Rng& rng, const MakeInputs& make_inputs,
                                const LossFn& loss_fn, double h = 1e-5) {
  GradCheckResult res;
  res.op = name;
  res.trials = trials;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> inputs = make_inputs(rng);

    Tape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const Tensor& in : inputs) tracked.push_back(tape.watch(in));
    Tensor loss = loss_fn(tracked);
    tape.backward(loss);

    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto& analytic = tape.grad_for(inputs[k]);
      for (std::int64_t i = 0; i < inputs[k].size(); ++i) {
        auto eval_at = [&](double delta) {
          std::vector<Tensor> probe;
          probe.reserve(inputs.size());
          for (std::size_t q = 0; q < inputs.size(); ++q) {
            Tensor copy(inputs[q].shape(), inputs[q].values());
            if (q == k) copy.data()[i] += delta;
            probe.push_back(std::move(copy));
          }
          return loss_fn(probe).value();
        };
        const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        const double err = elem_error(analytic[static_cast<std::size_t>(i)], numeric);
        if (err > res.max_err) res.max_err = err;
      }
    }
  }
  res.pass = res.max_err < tol;
  return res;
}

inline Tensor randn(Rng& rng, std::vector<std::int64_t> shape, double std = 1.0) {
  Tensor t(std::move(shape));
  rng.fill_normal(t.data(), static_cast<std::size_t>(t.size()), 0.0, std);
  return t;
}

// Scalar loss: sum(P (*) out) with a fixed random projection P.
inline LossFn projected(std::function<Tensor(const std::vector<Tensor>&)> op, Rng& rng,
                        std::vector<std::int64_t> out_shape) {
  Tensor proj = randn(rng, std::move(out_shape));
  return [op = std::move(op), proj](const std::vector<Tensor>& ins) {
    return reduce_sum(mul(op(ins), stop_gradient(proj)));
  };
}

}  // namespace gradcheck_detail

// Runs the finite-difference suite over the full op vocabulary.
inline GradCheckReport run_gradcheck_suite(std::uint64_t seed, int trials_per_op = 50,
                                           double tol = 1e-5) {
  using namespace gradcheck_detail;
  Rng rng = Rng::stream(seed, 0x67726164);  // dedicated stream for the suite
  GradCheckReport report;

  auto run = [&](const std::string& name, const MakeInputs& mk,
                 std::function<Tensor(const std::vector<Tensor>&)> op,
                 std::vector<std::int64_t> out_shape) {
    LossFn loss = projected(std::move(op), rng, std::move(out_shape));
    report.results.push_back(check_op(name, trials_per_op, tol, rng, mk, loss));
  };

  run("add",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4}), randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }, {3, 4});
  run("add_scalar_broadcast",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4}), randn(r, {1})}; },
      [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }, {3, 4});
  run("sub",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4}), randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); }, {3, 4});
  run("mul",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4}), randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }, {3, 4});
  run("mul_scalar_broadcast",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {1}), randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }, {3, 4});
  run("matmul",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4}), randn(r, {4, 2})}; },
      [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }, {3, 2});
  run("conv1d_s1",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {2, 8}), randn(r, {3, 2, 5})}; },
      [](const std::vector<Tensor>& in) { return conv1d(in[0], in[1], 1); }, {3, 8});
  run("conv1d_s2",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {2, 8}), randn(r, {3, 2, 5})}; },
      [](const std::vector<Tensor>& in) { return conv1d(in[0], in[1], 2); }, {3, 4});
  run("group_norm",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {8, 4})}; },
      [](const std::vector<Tensor>& in) { return group_norm(in[0], 2); }, {8, 4});
  run("mish",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {4, 5}, 3.0)}; },
      [](const std::vector<Tensor>& in) { return mish(in[0]); }, {4, 5});
  run("softmax_rows",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 5}, 2.0)}; },
      [](const std::vector<Tensor>& in) { return softmax_rows(in[0]); }, {3, 5});
  run("transpose",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 5})}; },
      [](const std::vector<Tensor>& in) { return transpose(in[0]); }, {5, 3});
  run("concat_rows",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {2, 4}), randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return concat_rows(in[0], in[1]); }, {5, 4});
  run("upsample2x",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return upsample2x(in[0]); }, {3, 8});
  run("reshape",
      [](Rng& r) { return std::vector<Tensor>{randn(r, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return reshape(in[0], {2, 6}); }, {2, 6});

  // Direct scalar reductions (no projection needed).
  report.results.push_back(check_op(
      "reduce_sum", trials_per_op, tol, rng,
      [](Rng& r) { return std::vector<Tensor>{randn(r, {4, 3})}; },
      [](const std::vector<Tensor>& in) { return reduce_sum(in[0]); }));
  report.results.push_back(check_op(
      "reduce_mean", trials_per_op, tol, rng,
      [](Rng& r) { return std::vector<Tensor>{randn(r, {4, 3})}; },
      [](const std::vector<Tensor>& in) { return reduce_mean(in[0]); }));

  for (const auto& r : report.results) report.all_pass = report.all_pass && r.pass;
  return report;
}

}  // namespace ad3d
