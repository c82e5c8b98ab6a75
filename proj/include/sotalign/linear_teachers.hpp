#ifndef SOTALIGN_LINEAR_TEACHERS_HPP
#define SOTALIGN_LINEAR_TEACHERS_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sotalign/divergences.hpp"
#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"
#include "sotalign/optim.hpp"
#include "sotalign/rng.hpp"
#include "sotalign/semb.hpp"

namespace sotalign {

enum class TeacherKind { procrustes, cca, contrastive };

inline std::string_view to_string(TeacherKind k) {
  switch (k) {
    case TeacherKind::procrustes:
      return "procrustes";
    case TeacherKind::cca:
      return "cca";
    case TeacherKind::contrastive:
      return "contrastive";
  }
  return "?";
}

inline TeacherKind parse_teacher_kind(std::string_view s) {
  if (s == "procrustes") return TeacherKind::procrustes;
  if (s == "cca") return TeacherKind::cca;
  if (s == "contrastive") return TeacherKind::contrastive;
  throw ParameterError("unknown teacher kind '" + std::string(s) + "'");
}

/// Centering by a stored mean, optionally followed by unit-norm rows.
struct Preprocessor {
  Vector mean;
  bool normalize = true;

  static Preprocessor fit(const Matrix& m, bool normalize) {
    return Preprocessor{m.colwise().mean().transpose(), normalize};
  }

  Matrix apply(const Matrix& m) const {
    if (m.cols() != mean.size()) throw DimensionError("preprocessor: feature dimension mismatch");
    Matrix c = m.rowwise() - mean.transpose();
    return normalize ? detail::normalize_rows(c) : c;
  }
};

/// Pair of linear maps into a shared d'-dimensional space, rows are output directions.
struct LinearTeacher {
  TeacherKind kind = TeacherKind::procrustes;
  Matrix w_x;  // d' x d_x
  Matrix w_y;  // d' x d_y
  Preprocessor pre_x;
  Preprocessor pre_y;
  Vector singular_values;  // top-d' values of the aligned cross-covariance
  std::vector<std::string> warnings;

  Index d_prime() const noexcept { return w_x.rows(); }
  Matrix project_x(const Matrix& x) const { return pre_x.apply(x) * w_x.transpose(); }
  Matrix project_y(const Matrix& y) const { return pre_y.apply(y) * w_y.transpose(); }
};

struct LinearMaps {
  Matrix w_x;
  Matrix w_y;
  Vector singular_values;
  bool rank_deficient = false;
};

namespace detail {

/// Flip each singular pair so the largest-magnitude entry of the left vector is positive.
inline void fix_svd_signs(Matrix& u, Matrix& v) {
  for (Index c = 0; c < u.cols(); ++c) {
    Index arg = 0;
    u.col(c).cwiseAbs().maxCoeff(&arg);
    if (u(arg, c) < 0.0) {
      u.col(c) *= -1.0;
      v.col(c) *= -1.0;
    }
  }
}

inline void check_d_prime(Index d_prime, Index dx, Index dy) {
  if (d_prime < 1 || d_prime > std::min(dx, dy))
    throw ParameterError("d' must satisfy 1 <= d' <= min(d_x, d_y) = " + std::to_string(std::min(dx, dy)));
}

/// Symmetric inverse square root of (S + lambda I).
inline Matrix inverse_sqrt(const Matrix& s, double lambda) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  Vector ev = es.eigenvalues().array() + lambda;
  for (Index i = 0; i < ev.size(); ++i)
    if (!(ev(i) >= 1e-12))
      throw SingularityError("covariance eigenvalue + lambda = " + std::to_string(ev(i)) +
                             " is below 1e-12; increase the CCA regularization lambda");
  return es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// argmax_{P P^T = Q Q^T = I} <A P^T, B Q^T> on already-preprocessed A, B.
/// W_x, W_y are the top-d' left/right singular vectors of A^T B (as rows).
inline LinearMaps procrustes_maps(const Matrix& a, const Matrix& b, Index d_prime) {
  detail::check_d_prime(d_prime, a.cols(), b.cols());
  const Matrix m = a.transpose() * b;
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU().leftCols(d_prime);
  Matrix v = svd.matrixV().leftCols(d_prime);
  detail::fix_svd_signs(u, v);
  LinearMaps out;
  out.w_x = u.transpose();
  out.w_y = v.transpose();
  out.singular_values = svd.singularValues().head(d_prime);
  const double top = svd.singularValues()(0);
  out.rank_deficient = !(out.singular_values(d_prime - 1) > 1e-10 * std::max(top, 1e-300));
  return out;
}

/// CCA closed form on already-centered A, B with Sigma_xx = A^T A etc.
/// lambda is added to every covariance eigenvalue before the inverse square root.
inline LinearMaps cca_maps(const Matrix& a, const Matrix& b, Index d_prime, double lambda) {
  detail::check_d_prime(d_prime, a.cols(), b.cols());
  if (!(lambda >= 0.0)) throw ParameterError("CCA lambda must be non-negative");
  const Matrix sxx_is = detail::inverse_sqrt(a.transpose() * a, lambda);
  const Matrix syy_is = detail::inverse_sqrt(b.transpose() * b, lambda);
  const Matrix m = sxx_is * (a.transpose() * b) * syy_is;
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU().leftCols(d_prime);
  Matrix v = svd.matrixV().leftCols(d_prime);
  detail::fix_svd_signs(u, v);
  LinearMaps out;
  out.w_x = u.transpose() * sxx_is;
  out.w_y = v.transpose() * syy_is;
  out.singular_values = svd.singularValues().head(d_prime);
  return out;
}

/// <A W_x^T, B W_y^T>, the quantity both closed forms maximize.
inline double alignment_objective(const Matrix& a, const Matrix& b, const Matrix& w_x, const Matrix& w_y) {
  return (a * w_x.transpose()).cwiseProduct(b * w_y.transpose()).sum();
}

/// Procrustes teacher. A and B are centered with the paired means and row-normalized first.
inline LinearTeacher fit_procrustes(const PairedDataset& paired, Index d_prime) {
  if (paired.size() < 2) throw ParameterError("fit_procrustes: need at least 2 pairs");
  LinearTeacher t;
  t.kind = TeacherKind::procrustes;
  t.pre_x = Preprocessor::fit(paired.a, true);
  t.pre_y = Preprocessor::fit(paired.b, true);
  LinearMaps maps = procrustes_maps(t.pre_x.apply(paired.a), t.pre_y.apply(paired.b), d_prime);
  if (maps.rank_deficient)
    t.warnings.push_back("rank(A^T B) < d'; trailing directions are an arbitrary orthonormal completion");
  t.w_x = std::move(maps.w_x);
  t.w_y = std::move(maps.w_y);
  t.singular_values = std::move(maps.singular_values);
  return t;
}

/// CCA teacher. A and B are centered with the paired means (no row normalization).
inline LinearTeacher fit_cca(const PairedDataset& paired, Index d_prime, double lambda = 0.1) {
  if (paired.size() < 2) throw ParameterError("fit_cca: need at least 2 pairs");
  LinearTeacher t;
  t.kind = TeacherKind::cca;
  t.pre_x = Preprocessor::fit(paired.a, false);
  t.pre_y = Preprocessor::fit(paired.b, false);
  LinearMaps maps = cca_maps(t.pre_x.apply(paired.a), t.pre_y.apply(paired.b), d_prime, lambda);
  t.w_x = std::move(maps.w_x);
  t.w_y = std::move(maps.w_y);
  t.singular_values = std::move(maps.singular_values);
  return t;
}

enum class ContrastiveLoss { siglip, infonce };

struct ContrastiveConfig {
  int steps = 2000;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  ContrastiveLoss loss = ContrastiveLoss::siglip;
  SigLIPParams init{};
  std::uint64_t seed = 0;
};

/// Linear maps trained with LION to minimize a contrastive loss on K[A W_x^T, B W_y^T]
/// with identity targets. Inputs are centered and row-normalized as for Procrustes.
inline LinearTeacher fit_linear_contrastive(const PairedDataset& paired, Index d_shared,
                                            const ContrastiveConfig& cfg = {}) {
  if (paired.size() < 2) throw ParameterError("fit_linear_contrastive: need at least 2 pairs");
  if (d_shared < 1) throw ParameterError("fit_linear_contrastive: d_shared must be positive");
  LinearTeacher t;
  t.kind = TeacherKind::contrastive;
  t.pre_x = Preprocessor::fit(paired.a, true);
  t.pre_y = Preprocessor::fit(paired.b, true);
  const Matrix a = t.pre_x.apply(paired.a);
  const Matrix b = t.pre_y.apply(paired.b);

  Rng rng(cfg.seed);
  Rng rx = rng.split(0), ry = rng.split(1);
  t.w_x = rx.normal_matrix(d_shared, a.cols(), 1.0 / std::sqrt(static_cast<double>(a.cols())));
  t.w_y = ry.normal_matrix(d_shared, b.cols(), 1.0 / std::sqrt(static_cast<double>(b.cols())));
  SigLIPParams sp = cfg.init;
  Matrix m_x = Matrix::Zero(t.w_x.rows(), t.w_x.cols());
  Matrix m_y = Matrix::Zero(t.w_y.rows(), t.w_y.cols());
  double m_scale = 0.0, m_bias = 0.0;

  for (int step = 0; step < cfg.steps; ++step) {
    const Matrix f = a * t.w_x.transpose();
    const Matrix g = b * t.w_y.transpose();
    const Matrix k = detail::cosine_affinity(f, g);
    Matrix grad_k;
    double value = 0.0, grad_scale = 0.0, grad_bias = 0.0;
    if (cfg.loss == ContrastiveLoss::siglip) {
      SigLIPResult r = siglip_loss(k, sp);
      value = r.value;
      grad_k = std::move(r.grad_k);
      grad_scale = r.grad_scale;
      grad_bias = r.grad_bias;
    } else {
      ValueAndGrad r = generalized_infonce(k, Matrix::Identity(k.rows(), k.cols()), 1.0, 1e-4);
      value = r.value;
      grad_k = std::move(r.grad);
    }
    if (!std::isfinite(value)) throw DivergenceError("contrastive teacher: non-finite loss", step);
    auto [gf, gg] = affinity_backward(grad_k, f, g);
    const Matrix gw_x = gf.transpose() * a;
    const Matrix gw_y = gg.transpose() * b;
    if (!gw_x.allFinite() || !gw_y.allFinite())
      throw DivergenceError("contrastive teacher: non-finite gradient", step);
    const double lr = cosine_lr(step, cfg.steps, cfg.lr);
    const LionHyper h{lr, cfg.beta1, cfg.beta2, cfg.weight_decay};
    lion_step(t.w_x, gw_x, m_x, h);
    lion_step(t.w_y, gw_y, m_y, h);
    if (cfg.loss == ContrastiveLoss::siglip) {
      const LionHyper hs{lr, cfg.beta1, cfg.beta2, 0.0};
      lion_step(sp.scale, grad_scale, m_scale, hs);
      lion_step(sp.bias, grad_bias, m_bias, hs);
    }
  }
  return t;
}

/// cosine(pre_x(X) W_x^T, pre_y(Y) W_y^T).
inline AffinityMatrix teacher_affinity(const LinearTeacher& teacher, const Matrix& x, const Matrix& y) {
  if (x.cols() != teacher.w_x.cols() || y.cols() != teacher.w_y.cols())
    throw DimensionError("teacher_affinity: embedding dimension does not match the teacher");
  Matrix k = detail::cosine_affinity(teacher.project_x(x), teacher.project_y(y));
  return AffinityMatrix(k.cwiseMax(-1.0).cwiseMin(1.0));
}

// ---------------------------------------------------------------------------
// Serialization

inline MatrixContainer to_container(const LinearTeacher& t) {
  MatrixContainer c;
  c.kind = std::string("teacher:") + std::string(to_string(t.kind));
  c.entries["w_x"] = t.w_x;
  c.entries["w_y"] = t.w_y;
  c.entries["mean_x"] = t.pre_x.mean;
  c.entries["mean_y"] = t.pre_y.mean;
  c.entries["normalize"] = Matrix::Constant(1, 2, 0.0);
  c.entries["normalize"](0, 0) = t.pre_x.normalize ? 1.0 : 0.0;
  c.entries["normalize"](0, 1) = t.pre_y.normalize ? 1.0 : 0.0;
  c.entries["d_prime"] = Matrix::Constant(1, 1, static_cast<double>(t.d_prime()));
  c.entries["singular_values"] = t.singular_values;
  return c;
}

inline LinearTeacher teacher_from_container(const MatrixContainer& c) {
  const std::string prefix = "teacher:";
  if (c.kind.rfind(prefix, 0) != 0) throw FormatError("container is not a teacher (kind '" + c.kind + "')");
  LinearTeacher t;
  t.kind = parse_teacher_kind(c.kind.substr(prefix.size()));
  t.w_x = c.at("w_x");
  t.w_y = c.at("w_y");
  t.pre_x.mean = c.at("mean_x");
  t.pre_y.mean = c.at("mean_y");
  t.pre_x.normalize = c.at("normalize")(0, 0) != 0.0;
  t.pre_y.normalize = c.at("normalize")(0, 1) != 0.0;
  t.singular_values = c.at("singular_values");
  if (static_cast<Index>(c.at("d_prime")(0, 0)) != t.w_x.rows() || t.w_x.rows() != t.w_y.rows() ||
      t.pre_x.mean.size() != t.w_x.cols() || t.pre_y.mean.size() != t.w_y.cols())
    throw FormatError("teacher container: inconsistent shapes");
  return t;
}

inline void save_teacher(const std::filesystem::path& path, const LinearTeacher& t) {
  save_container(path, to_container(t));
}

inline LinearTeacher load_teacher(const std::filesystem::path& path) {
  return teacher_from_container(load_container(path));
}

}  // namespace sotalign

#endif  // SOTALIGN_LINEAR_TEACHERS_HPP
