#ifndef SOTALIGN_OPTIM_HPP
#define SOTALIGN_OPTIM_HPP

#include <cmath>
#include <numbers>

#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"

namespace sotalign {

struct LionHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0;
};

namespace detail {
inline double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }
}  // namespace detail

/// One LION update in place:
///   param    <- param - lr * (sign(b1 m + (1 - b1) g) + wd * param)
///   momentum <- b2 m + (1 - b2) g
inline void lion_step(Matrix& param, const Matrix& grad, Matrix& momentum, const LionHyper& h) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() || momentum.rows() != grad.rows() ||
      momentum.cols() != grad.cols())
    throw DimensionError("lion_step: shapes differ");
  const Matrix update =
      (h.beta1 * momentum + (1.0 - h.beta1) * grad).unaryExpr([](double x) { return detail::sign(x); });
  param -= h.lr * (update + h.weight_decay * param);
  momentum = h.beta2 * momentum + (1.0 - h.beta2) * grad;
}

/// Scalar overload, used for the SigLIP scale and bias.
inline void lion_step(double& param, double grad, double& momentum, const LionHyper& h) {
  const double update = detail::sign(h.beta1 * momentum + (1.0 - h.beta1) * grad);
  param -= h.lr * (update + h.weight_decay * param);
  momentum = h.beta2 * momentum + (1.0 - h.beta2) * grad;
}

/// lr_max * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(long step, long total, double lr_max) {
  if (total < 1 || step < 0 || step > total) throw ParameterError("cosine_lr: need 0 <= step <= total, total >= 1");
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace sotalign

#endif  // SOTALIGN_OPTIM_HPP
