#pragma once

// Focal classification loss on the probability of the true class plus a
// squared offset error gated on positive labels:
//   L = (1 - p_t)^gamma * BCE(p, y) + (d_hat - d)^2 * [y = 1]

#include <algorithm>
#include <cmath>

#include "heimdal/errors.hpp"
#include "heimdal/tensor.hpp"

namespace heimdal {

inline constexpr double kFocalGamma = 4.0;
inline constexpr double kLogClamp = 1e-12;

struct LossValue {
  double total = 0;
  double cls = 0;
  double offset = 0;
  double grad_logit = 0;
  double grad_offset = 0;
};

namespace detail {

// log(sigmoid(z)) without overflow.
inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1 / (1 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1 + e);
}

}  // namespace detail

inline LossValue focal_offset_loss(double logit, int label, double predicted_offset, double target_offset,
                                   double gamma = kFocalGamma) {
  if (gamma < 0) throw PreconditionError("focal gamma must be >= 0");
  // Orient so that q is the probability of the true class: q = sigmoid(s).
  const double s = label == 1 ? logit : -logit;
  const double q = detail::stable_sigmoid(s);
  const double miss = detail::stable_sigmoid(-s);  // 1 - q
  const double log_floor = std::log(kLogClamp);
  double log_q = detail::log_sigmoid(s);
  const bool clamped = log_q < log_floor;
  if (clamped) log_q = log_floor;

  LossValue v;
  const double focal = std::pow(miss, gamma);
  const double bce = -log_q;
  v.cls = focal * bce;
  // d/ds of (1-q)^gamma is -gamma (1-q)^gamma q; d/ds of -log q is -(1-q).
  const double d_focal = gamma == 0 ? 0.0 : -gamma * focal * q;
  const double d_bce = clamped ? 0.0 : -miss;
  const double grad_s = d_focal * bce + focal * d_bce;
  v.grad_logit = label == 1 ? grad_s : -grad_s;

  if (label == 1) {
    const double diff = predicted_offset - target_offset;
    v.offset = diff * diff;
    v.grad_offset = 2 * diff;
  }
  v.total = v.cls + v.offset;
  return v;
}

struct BatchLoss {
  double mean = 0, mean_cls = 0, mean_offset = 0;
  Tensor<float> grad_detection;  // d(mean)/d(logit), shaped like the logits
  Tensor<float> grad_offset;
};

// Mean over segments. `logits` and `offsets` hold one value per segment.
inline BatchLoss batch_loss(const Tensor<float>& logits, const Tensor<float>& offsets, const std::vector<int>& labels,
                            const std::vector<double>& targets, double gamma = kFocalGamma) {
  const std::size_t n = labels.size();
  if (logits.size() != n || offsets.size() != n || targets.size() != n)
    throw ShapeError("loss: " + std::to_string(logits.size()) + " logits, " + std::to_string(offsets.size()) +
                     " offsets, " + std::to_string(n) + " labels");
  BatchLoss out{0, 0, 0, Tensor<float>(logits.dims()), Tensor<float>(offsets.dims())};
  if (n == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    const LossValue v = focal_offset_loss(logits[i], labels[i], offsets[i], targets[i], gamma);
    out.mean += v.total;
    out.mean_cls += v.cls;
    out.mean_offset += v.offset;
    out.grad_detection[i] = static_cast<float>(v.grad_logit / n);
    out.grad_offset[i] = static_cast<float>(v.grad_offset / n);
  }
  out.mean /= n;
  out.mean_cls /= n;
  out.mean_offset /= n;
  return out;
}

}  // namespace heimdal
