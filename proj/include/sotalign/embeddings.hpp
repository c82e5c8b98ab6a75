#ifndef SOTALIGN_EMBEDDINGS_HPP
#define SOTALIGN_EMBEDDINGS_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sotalign/errors.hpp"
#include "sotalign/rng.hpp"

namespace sotalign {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// n x d block of finite feature vectors, one sample per row.
class EmbeddingMatrix {
 public:
  explicit EmbeddingMatrix(Matrix values) : values_(std::move(values)) {
    if (values_.rows() < 1 || values_.cols() < 1)
      throw DimensionError("embedding matrix must have n >= 1 and d >= 1");
    if (!values_.allFinite()) throw DataError("embedding matrix contains non-finite entries");
  }

  Index rows() const noexcept { return values_.rows(); }
  Index cols() const noexcept { return values_.cols(); }
  const Matrix& values() const noexcept { return values_; }
  operator const Matrix&() const noexcept { return values_; }

 private:
  Matrix values_;
};

/// Pairwise cosine similarities; every entry lies in [-1 - 1e-6, 1 + 1e-6].
class AffinityMatrix {
 public:
  static constexpr double kRangeTolerance = 1e-6;

  explicit AffinityMatrix(Matrix values) : values_(std::move(values)) {
    if (!values_.allFinite()) throw DataError("affinity matrix contains non-finite entries");
    if (values_.size() > 0 && values_.cwiseAbs().maxCoeff() > 1.0 + kRangeTolerance)
      throw DataError("affinity entry outside [-1, 1]");
  }

  Index rows() const noexcept { return values_.rows(); }
  Index cols() const noexcept { return values_.cols(); }
  const Matrix& values() const noexcept { return values_; }
  operator const Matrix&() const noexcept { return values_; }

 private:
  Matrix values_;
};

/// Row i of `a` and row i of `b` describe the same sample.
struct PairedDataset {
  EmbeddingMatrix a;
  EmbeddingMatrix b;

  PairedDataset(EmbeddingMatrix a_in, EmbeddingMatrix b_in) : a(std::move(a_in)), b(std::move(b_in)) {
    if (a.rows() != b.rows()) throw DimensionError("paired dataset: row counts differ");
  }
  Index size() const noexcept { return a.rows(); }
};

/// Independent image-side and text-side collections; no row correspondence.
struct UnpairedPool {
  EmbeddingMatrix x;
  EmbeddingMatrix y;
};

struct Batch {
  std::vector<std::size_t> paired_idx;
  std::vector<std::size_t> unpaired_x_idx;
  std::vector<std::size_t> unpaired_y_idx;
  std::uint64_t seed = 0;
};

namespace detail {

inline constexpr double kDegenerateNorm = 1e-12;

inline Vector checked_row_norms(const Matrix& m) {
  Vector norms = m.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i)
    if (!(norms(i) >= kDegenerateNorm)) throw DegenerateRowError(static_cast<std::size_t>(i));
  return norms;
}

inline Matrix normalize_rows(const Matrix& m) {
  const Vector norms = checked_row_norms(m);
  return norms.cwiseInverse().asDiagonal() * m;
}

/// Cosine affinity on raw matrices. Accumulates in double.
inline Matrix cosine_affinity(const Matrix& u, const Matrix& v) {
  if (u.cols() != v.cols())
    throw DimensionError("cosine_affinity: feature dimensions " + std::to_string(u.cols()) + " and " +
                         std::to_string(v.cols()) + " differ");
  const Matrix un = normalize_rows(u);
  const Matrix vn = normalize_rows(v);
  return un * vn.transpose();
}

/// Rows of `m` selected by `idx`, in order.
inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = m.row(static_cast<Index>(idx[r]));
  return out;
}

}  // namespace detail

inline EmbeddingMatrix l2_normalize_rows(const EmbeddingMatrix& e) {
  return EmbeddingMatrix(detail::normalize_rows(e.values()));
}

/// Subtracts the column means. Returns the centered matrix and the mean that was removed.
inline std::pair<EmbeddingMatrix, Vector> center_rows(const EmbeddingMatrix& e) {
  const Vector mean = e.values().colwise().mean().transpose();
  Matrix centered = e.values().rowwise() - mean.transpose();
  return {EmbeddingMatrix(std::move(centered)), mean};
}

inline AffinityMatrix cosine_affinity(const EmbeddingMatrix& u, const EmbeddingMatrix& v) {
  Matrix k = detail::cosine_affinity(u.values(), v.values());
  // Rounding can push |k| a few ulps past 1.
  k = k.cwiseMax(-1.0).cwiseMin(1.0);
  return AffinityMatrix(std::move(k));
}

/// Row-wise Softmax_eps(K)_{ij} = exp(K_ij / eps) / sum_k exp(K_ik / eps), max-subtracted.
inline Matrix row_softmax(const Matrix& k, double eps) {
  if (!(eps > 0.0)) throw ParameterError("row_softmax: temperature must be positive");
  Matrix out(k.rows(), k.cols());
  for (Index i = 0; i < k.rows(); ++i) {
    const double m = k.row(i).maxCoeff();
    out.row(i) = ((k.row(i).array() - m) / eps).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Row-wise log-softmax, same conventions as row_softmax.
inline Matrix row_log_softmax(const Matrix& k, double eps) {
  if (!(eps > 0.0)) throw ParameterError("row_log_softmax: temperature must be positive");
  Matrix out(k.rows(), k.cols());
  for (Index i = 0; i < k.rows(); ++i) {
    const double m = k.row(i).maxCoeff();
    const auto shifted = ((k.row(i).array() - m) / eps).eval();
    out.row(i) = (shifted - std::log(shifted.exp().sum())).matrix();
  }
  return out;
}

/// Backpropagates dL/dK through K = cosine_affinity(U, V).
///
/// dk(u,v)/du = v / (|u||v|) - k(u,v) u / |u|^2, accumulated over the rows of grad_k.
inline std::pair<Matrix, Matrix> affinity_backward(const Matrix& grad_k, const Matrix& u, const Matrix& v) {
  if (u.cols() != v.cols() || grad_k.rows() != u.rows() || grad_k.cols() != v.rows())
    throw DimensionError("affinity_backward: inconsistent shapes");
  const Vector nu = detail::checked_row_norms(u);
  const Vector nv = detail::checked_row_norms(v);
  const Matrix un = nu.cwiseInverse().asDiagonal() * u;
  const Matrix vn = nv.cwiseInverse().asDiagonal() * v;
  const Matrix k = un * vn.transpose();

  // Gradient w.r.t. the unit rows, then projected onto the tangent space and scaled.
  const Matrix gk = grad_k.cwiseProduct(k);
  Matrix grad_u = grad_k * vn - gk.rowwise().sum().asDiagonal() * un;
  Matrix grad_v = grad_k.transpose() * un - gk.colwise().sum().transpose().asDiagonal() * vn;
  grad_u = nu.cwiseInverse().asDiagonal() * grad_u;
  grad_v = nv.cwiseInverse().asDiagonal() * grad_v;
  return {std::move(grad_u), std::move(grad_v)};
}

/// Uniform sampling without replacement within each list; deterministic given `seed`.
inline Batch sample_batch(const PairedDataset& paired, const UnpairedPool& pool, std::size_t n_pair,
                          std::size_t n_unpaired_x, std::size_t n_unpaired_y, std::uint64_t seed) {
  const auto np = static_cast<std::size_t>(paired.size());
  const auto nx = static_cast<std::size_t>(pool.x.rows());
  const auto ny = static_cast<std::size_t>(pool.y.rows());
  if (n_pair > np || n_unpaired_x > nx || n_unpaired_y > ny)
    throw ParameterError("sample_batch: requested more rows than available");
  Rng rng(seed);
  Rng rp = rng.split(0), rx = rng.split(1), ry = rng.split(2);
  Batch batch;
  batch.paired_idx = rp.sample_without_replacement(np, n_pair);
  batch.unpaired_x_idx = rx.sample_without_replacement(nx, n_unpaired_x);
  batch.unpaired_y_idx = ry.sample_without_replacement(ny, n_unpaired_y);
  batch.seed = seed;
  return batch;
}

}  // namespace sotalign

#endif  // SOTALIGN_EMBEDDINGS_HPP
