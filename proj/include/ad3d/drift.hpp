#pragma once

// Training-time drifting field: bidirectional affinities, joint
// attraction/repulsion weights, sqrt(D) sample normalization and
// multi-temperature aggregation. Everything here operates on values only;
// the field is a constant target from the tape's point of view.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ad3d/errors.hpp"
#include "ad3d/tensor.hpp"

namespace ad3d {

inline constexpr std::array<double, 3> kDefaultTemps{0.02, 0.05, 0.2};

// One drift batch: predictions and expert positives from a single discrete
// conditioning context. The field never mixes contexts.
struct SampleBatch {
  Tensor predictions;  // N x D
  Tensor positives;    // M x D
  int context_id = 0;

  void validate() const {
    if (predictions.ndim() != 2 || positives.ndim() != 2)
      throw ShapeError("SampleBatch: predictions and positives must be 2-D");
    if (predictions.extent(1) != positives.extent(1))
      throw ShapeError("SampleBatch: row dimensions differ");
    for (const Tensor* t : {&predictions, &positives})
      for (std::int64_t i = 0; i < t->size(); ++i)
        if (!std::isfinite(t->data()[i]))
          throw NumericError("SampleBatch: non-finite row in context " +
                             std::to_string(context_id));
  }
};

struct AffinityMatrix {
  Tensor a;  // N x M, entries in (0, 1]
  double tau = 0.0;
};

struct DriftField {
  Tensor v;                     // N x D, original scale
  std::vector<Tensor> v_tau;    // per-temperature raw fields (normalized coordinates)
  std::vector<double> lambda;   // per-temperature RMS normalizers
  double scale = 1.0;           // s from normalize_scale
};

struct ScaledPair {
  Tensor x, y;
  double scale = 1.0;
};

namespace drift_detail {

inline double row_distance(const double* a, const double* b, std::int64_t d) {
  double acc = 0;
  for (std::int64_t i = 0; i < d; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

}  // namespace drift_detail

// Rescales the pooled sample set so its mean pairwise distance equals
// sqrt(dim). Returns the factor s; fields computed in scaled coordinates map
// back as V = V' / s.
inline ScaledPair normalize_scale(const Tensor& x, const Tensor& y, std::int64_t dim) {
  if (x.ndim() != 2 || y.ndim() != 2 || x.extent(1) != dim || y.extent(1) != dim)
    throw ShapeError("normalize_scale: rows must be [n x dim]");
  const std::int64_t n = x.extent(0), m = y.extent(0), d = dim;

  std::vector<const double*> rows;
  rows.reserve(static_cast<std::size_t>(n + m));
  for (std::int64_t i = 0; i < n; ++i) rows.push_back(x.data() + i * d);
  for (std::int64_t j = 0; j < m; ++j) rows.push_back(y.data() + j * d);

  double mean = 0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      mean += drift_detail::row_distance(rows[i], rows[j], d);
      ++pairs;
    }
  if (pairs == 0) throw NumericError("normalize_scale: need at least two pooled rows");
  mean /= static_cast<double>(pairs);
  if (mean < 1e-12)
    throw NumericError("normalize_scale: degenerate pool, all rows coincide");

  ScaledPair out;
  out.scale = std::sqrt(static_cast<double>(d)) / mean;
  out.x = Tensor(x.shape(), x.values());
  out.y = Tensor(y.shape(), y.values());
  for (std::int64_t i = 0; i < out.x.size(); ++i) out.x.data()[i] *= out.scale;
  for (std::int64_t i = 0; i < out.y.size(); ++i) out.y.data()[i] *= out.scale;
  return out;
}

// A = sqrt(softmax_rows(L) (*) softmax_cols(L)) with L_ij = -|x_i - y_j| / tau.
// Column softmax reuses the row kernel around a transpose.
inline AffinityMatrix bidirectional_affinity(const Tensor& xs, const Tensor& ys, double tau) {
  if (tau <= 0) throw NumericError("bidirectional_affinity: tau must be positive");
  if (xs.ndim() != 2 || ys.ndim() != 2 || xs.extent(1) != ys.extent(1))
    throw ShapeError("bidirectional_affinity: row dimensions differ");
  const std::int64_t n = xs.extent(0), m = ys.extent(0), d = xs.extent(1);

  Tensor logits({n, m});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      logits.data()[i * m + j] =
          -drift_detail::row_distance(xs.data() + i * d, ys.data() + j * d, d) / tau;

  Tensor by_row = softmax_rows(logits);
  Tensor by_col = transpose(softmax_rows(transpose(logits)));

  AffinityMatrix out;
  out.tau = tau;
  out.a = Tensor({n, m});
  for (std::int64_t i = 0; i < n * m; ++i)
    out.a.data()[i] = std::sqrt(by_row.data()[i] * by_col.data()[i]);
  return out;
}

// Drift at one temperature on scaled inputs. Attraction (toward positives)
// and repulsion (away from the other predictions, self pair included) share a
// joint per-prediction normalizer, so each field value is a weighted sum of
// displacements with weights summing to one.
inline Tensor drift_field_single_temp(const Tensor& xs, const Tensor& ys, double tau) {
  const std::int64_t n = xs.extent(0), m = ys.extent(0), d = xs.extent(1);
  Tensor a_pos = bidirectional_affinity(xs, ys, tau).a;
  Tensor a_neg = bidirectional_affinity(xs, xs, tau).a;

  Tensor v({n, d});
  std::vector<double> attract(static_cast<std::size_t>(d));
  std::vector<double> repel(static_cast<std::size_t>(d));
  for (std::int64_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::int64_t j = 0; j < m; ++j) z += a_pos.data()[i * m + j];
    for (std::int64_t k = 0; k < n; ++k) z += a_neg.data()[i * n + k];
    const double* xi = xs.data() + i * d;
    // The two sums are accumulated separately so that at the X = Y fixed
    // point they are bitwise equal and the field is exactly zero.
    std::fill(attract.begin(), attract.end(), 0.0);
    std::fill(repel.begin(), repel.end(), 0.0);
    for (std::int64_t j = 0; j < m; ++j) {
      const double w = a_pos.data()[i * m + j] / z;
      const double* yj = ys.data() + j * d;
      for (std::int64_t t = 0; t < d; ++t) attract[static_cast<std::size_t>(t)] += w * (yj[t] - xi[t]);
    }
    for (std::int64_t k = 0; k < n; ++k) {
      const double w = a_neg.data()[i * n + k] / z;
      const double* xk = xs.data() + k * d;
      for (std::int64_t t = 0; t < d; ++t) repel[static_cast<std::size_t>(t)] += w * (xk[t] - xi[t]);
    }
    double* vrow = v.data() + i * d;
    for (std::int64_t t = 0; t < d; ++t)
      vrow[t] = attract[static_cast<std::size_t>(t)] - repel[static_cast<std::size_t>(t)];
  }
  return v;
}

// Full field: normalize, one field per temperature, each scaled to unit RMS
// per dimension (lambda floored at 1e-12 so the exact fixed point stays 0),
// summed and mapped back to the original scale.
inline DriftField aggregate_multi_temp(const Tensor& x, const Tensor& y, std::int64_t dim,
                                       std::span<const double> temps) {
  if (temps.empty()) throw ConfigError("aggregate_multi_temp: need at least one temperature");
  for (double tau : temps)
    if (tau <= 0) throw ConfigError("aggregate_multi_temp: temperatures must be positive");

  ScaledPair scaled = normalize_scale(x, y, dim);
  const std::int64_t n = x.extent(0), d = dim;

  DriftField field;
  field.scale = scaled.scale;
  Tensor total({n, d});
  for (double tau : temps) {
    Tensor v = drift_field_single_temp(scaled.x, scaled.y, tau);
    double msq = 0;
    for (std::int64_t i = 0; i < v.size(); ++i) msq += v.data()[i] * v.data()[i];
    msq /= static_cast<double>(n);
    double lambda = std::max(std::sqrt(msq / static_cast<double>(d)), 1e-12);
    for (std::int64_t i = 0; i < v.size(); ++i) total.data()[i] += v.data()[i] / lambda;
    field.v_tau.push_back(std::move(v));
    field.lambda.push_back(lambda);
  }
  for (std::int64_t i = 0; i < total.size(); ++i) total.data()[i] /= scaled.scale;
  field.v = std::move(total);
  return field;
}

inline DriftField aggregate_multi_temp(const SampleBatch& batch, std::span<const double> temps) {
  batch.validate();
  return aggregate_multi_temp(batch.predictions, batch.positives,
                              batch.predictions.extent(1), temps);
}

}  // namespace ad3d
