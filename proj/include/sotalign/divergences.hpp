#ifndef SOTALIGN_DIVERGENCES_HPP
#define SOTALIGN_DIVERGENCES_HPP

#include <cmath>
#include <string>
#include <string_view>
#include <utility>

#include "sotalign/embeddings.hpp"
#include "sotalign/entropic_ot.hpp"
#include "sotalign/errors.hpp"

namespace sotalign {

enum class DivergenceKind { cka, infonce, klot };

inline std::string_view to_string(DivergenceKind k) {
  switch (k) {
    case DivergenceKind::cka:
      return "cka";
    case DivergenceKind::infonce:
      return "infonce";
    case DivergenceKind::klot:
      return "klot";
  }
  return "?";
}

inline DivergenceKind parse_divergence_kind(std::string_view s) {
  if (s == "cka") return DivergenceKind::cka;
  if (s == "infonce") return DivergenceKind::infonce;
  if (s == "klot") return DivergenceKind::klot;
  throw ParameterError("unknown divergence kind '" + std::string(s) + "'");
}

/// Divergence between a learned affinity K and a target K*.
/// epsilon is the learned-space temperature, epsilon_star the target-space one.
struct DivergenceSpec {
  DivergenceKind kind = DivergenceKind::klot;
  double epsilon = 0.05;
  double epsilon_star = 0.01;
  SinkhornOptions sinkhorn{};
};

struct ValueAndGrad {
  double value = 0.0;
  Matrix grad;
};

// ---------------------------------------------------------------------------
// CKA

namespace detail {

inline Matrix double_center(const Matrix& k) {
  const Vector row_mean = k.rowwise().mean();
  const Eigen::RowVectorXd col_mean = k.colwise().mean();
  const double total = k.mean();
  Matrix c = k.colwise() - row_mean;
  c.rowwise() -= col_mean;
  c.array() += total;
  return c;
}

}  // namespace detail

/// <K1 H, H K2> / sqrt(<K1 H, H K1> <K2 H, H K2>), H = I - 11^T / n.
inline double cka_from_kernels(const Matrix& k1, const Matrix& k2) {
  if (k1.rows() != k1.cols() || k2.rows() != k2.cols() || k1.rows() != k2.rows())
    throw DimensionError("cka_from_kernels: kernels must be square and of equal size");
  const Matrix c1 = detail::double_center(k1);
  const Matrix c2 = detail::double_center(k2);
  const double n1 = c1.squaredNorm();
  const double n2 = c2.squaredNorm();
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw UndefinedCkaError("CKA undefined: centered kernel has zero norm");
  return c1.cwiseProduct(c2).sum() / std::sqrt(n1 * n2);
}

/// Linear-kernel CKA of two representations without forming any n x n matrix:
/// |X1c^T X2c|_F^2 / (|X1c^T X1c|_F |X2c^T X2c|_F). Memory O(n d + d^2).
inline double cka_div(const Matrix& x1, const Matrix& x2) {
  if (x1.rows() != x2.rows()) throw DimensionError("cka_div: row counts differ");
  const Matrix a = x1.rowwise() - x1.colwise().mean();
  const Matrix b = x2.rowwise() - x2.colwise().mean();
  const double cross = (a.transpose() * b).squaredNorm();
  const double sa = (a.transpose() * a).norm();
  const double sb = (b.transpose() * b).norm();
  if (!(sa > 0.0) || !(sb > 0.0)) throw UndefinedCkaError("CKA undefined: constant representation");
  return cross / (sa * sb);
}

/// Loss 1 - CKA(K, K*) and its gradient with respect to K.
inline ValueAndGrad cka_loss(const Matrix& k, const Matrix& k_star) {
  const Matrix c = detail::double_center(k);
  const Matrix cs = detail::double_center(k_star);
  const double nk = c.squaredNorm();
  const double ns = cs.squaredNorm();
  if (!(nk > 0.0) || !(ns > 0.0)) throw UndefinedCkaError("CKA undefined: centered kernel has zero norm");
  const double num = c.cwiseProduct(cs).sum();
  const double denom = std::sqrt(nk * ns);
  const double cka = num / denom;
  // d<K, HK*H>/dK = HK*H and d|HKH|^2/dK = 2 HKH.
  ValueAndGrad out;
  out.value = 1.0 - cka;
  out.grad = -(cs / denom - cka * c / nk);
  return out;
}

// ---------------------------------------------------------------------------
// Generalized InfoNCE

/// Mean over rows of KL(Softmax_{eps*}(K*)_i || Softmax_eps(K)_i), and its gradient
/// (Softmax_eps(K) - Softmax_{eps*}(K*)) / (eps n).
inline ValueAndGrad generalized_infonce(const Matrix& k, const Matrix& k_star, double eps, double eps_star) {
  if (k.rows() != k_star.rows() || k.cols() != k_star.cols())
    throw DimensionError("generalized_infonce: K and K* sizes differ");
  const Matrix log_p = row_log_softmax(k, eps);
  const Matrix log_t = row_log_softmax(k_star, eps_star);
  const Matrix t = log_t.array().exp().matrix();
  const auto n = static_cast<double>(k.rows());
  double kl = 0.0;
  for (Index j = 0; j < k.cols(); ++j)
    for (Index i = 0; i < k.rows(); ++i)
      if (t(i, j) > 0.0) kl += t(i, j) * (log_t(i, j) - log_p(i, j));
  ValueAndGrad out;
  out.value = kl / n;
  out.grad = (log_p.array().exp().matrix() - t) / (eps * n);
  return out;
}

/// Classical InfoNCE with temperature 1 and identity targets:
/// -(1/n) sum_i log(exp(K_ii) / sum_j exp(K_ij)).
inline double classical_infonce(const Matrix& k) {
  const Matrix log_p = row_log_softmax(k, 1.0);
  return -log_p.diagonal().mean();
}

// ---------------------------------------------------------------------------
// KLOT adaptor

/// KLOT divided by n, with gradient (OT_eps(K) - OT_{eps*}(K*)) / (eps n).
inline ValueAndGrad klot_loss(const Matrix& k, const Matrix& k_star, double eps, double eps_star,
                              const SinkhornOptions& opts = {}) {
  detail::require_pair(k, k_star, eps, eps_star, "klot_loss");
  const TransportPlan target = sinkhorn(k_star, eps_star, opts);
  const TransportPlan plan = sinkhorn(k, eps, opts);
  const auto n = static_cast<double>(k.rows());
  ValueAndGrad out;
  out.value = kl_between_plans(target, k_star, plan, k) / n;
  out.grad = klot_gradient_from_plans(plan, target) / n;
  return out;
}

/// Value and dValue/dK for the requested divergence. K* is treated as a constant.
inline ValueAndGrad divergence_value_and_grad(const DivergenceSpec& spec, const Matrix& k, const Matrix& k_star) {
  if (k.rows() != k.cols() || k_star.rows() != k_star.cols() || k.rows() != k_star.rows())
    throw DimensionError("divergence: K and K* must be square and of equal size");
  switch (spec.kind) {
    case DivergenceKind::cka:
      return cka_loss(k, k_star);
    case DivergenceKind::infonce:
      return generalized_infonce(k, k_star, spec.epsilon, spec.epsilon_star);
    case DivergenceKind::klot:
      return klot_loss(k, k_star, spec.epsilon, spec.epsilon_star, spec.sinkhorn);
  }
  throw ParameterError("divergence: unknown kind");
}

// ---------------------------------------------------------------------------
// SigLIP

struct SigLIPParams {
  double scale = 20.0;
  double bias = -10.0;
};

struct SigLIPResult {
  double value = 0.0;
  Matrix grad_k;
  double grad_scale = 0.0;
  double grad_bias = 0.0;
};

namespace detail {

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Pairwise sigmoid loss against identity targets, averaged per anchor:
/// (1/n) sum_ij log(1 + exp(-z_ij (t K_ij + b))), z_ii = 1, z_ij = -1 otherwise.
inline SigLIPResult siglip_loss(const Matrix& k_p, const SigLIPParams& params) {
  if (k_p.rows() != k_p.cols() || k_p.rows() < 1) throw DimensionError("siglip_loss: K_p must be square");
  if (!(params.scale > 0.0)) throw ParameterError("siglip_loss: scale must be positive");
  const Index n = k_p.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  SigLIPResult out;
  out.grad_k.resize(n, n);
  double loss = 0.0;
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) {
      const double z = i == j ? 1.0 : -1.0;
      const double logit = params.scale * k_p(i, j) + params.bias;
      loss += detail::softplus(-z * logit);
      // d softplus(-z l)/dl = -z sigmoid(-z l)
      const double dl = -z * detail::sigmoid(-z * logit) * inv_n;
      out.grad_k(i, j) = params.scale * dl;
      out.grad_scale += dl * k_p(i, j);
      out.grad_bias += dl;
    }
  out.value = loss * inv_n;
  return out;
}

}  // namespace sotalign

#endif  // SOTALIGN_DIVERGENCES_HPP
