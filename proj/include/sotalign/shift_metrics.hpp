#ifndef SOTALIGN_SHIFT_METRICS_HPP
#define SOTALIGN_SHIFT_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"
#include "sotalign/rng.hpp"

namespace sotalign {

struct ShiftReport {
  double ssw_x = 0.0;
  double ssw_y = 0.0;
  double total = 0.0;
  int n_projections = 500;
  double p = 2.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline void require_order(double p) {
  if (!(p >= 1.0)) throw ParameterError("Wasserstein order p must be >= 1");
}

/// W_p^p between two empirical measures with uniform weights, by quantile matching.
/// Both inputs must be sorted.
inline double wasserstein_1d_pow_sorted(const std::vector<double>& a, const std::vector<double>& b, double p) {
  const std::size_t n = a.size(), m = b.size();
  if (n == m) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::pow(std::abs(a[i] - b[i]), p);
    return acc / static_cast<double>(n);
  }
  // Walk the merged quantile breakpoints k/n and l/m in exact integer arithmetic.
  const double nm = static_cast<double>(n) * static_cast<double>(m);
  std::size_t i = 0, j = 0;
  std::uint64_t level = 0;  // current quantile level times n*m
  double acc = 0.0;
  while (i < n && j < m) {
    const std::uint64_t next_a = static_cast<std::uint64_t>(i + 1) * m;
    const std::uint64_t next_b = static_cast<std::uint64_t>(j + 1) * n;
    const std::uint64_t next = std::min(next_a, next_b);
    acc += static_cast<double>(next - level) / nm * std::pow(std::abs(a[i] - b[j]), p);
    level = next;
    if (next_a == next) ++i;
    if (next_b == next) ++j;
  }
  return acc;
}

inline double circle_distance(double x, double y) {
  const double d = std::abs(x - y);
  return std::min(d, 2.0 * std::numbers::pi - d);
}

/// min over cyclic shifts k of (1/n) sum_i d(a_i, b_{i+k})^p on sorted angles.
inline double circular_wasserstein_pow_sorted(const std::vector<double>& a, const std::vector<double>& b, double p) {
  const std::size_t n = a.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n && acc < best * static_cast<double>(n); ++i)
      acc += std::pow(circle_distance(a[i], b[(i + k) % n]), p);
    best = std::min(best, acc / static_cast<double>(n));
  }
  return best;
}

inline Vector random_unit_vector(Index d, Rng& rng) {
  Vector v(d);
  do {
    for (Index i = 0; i < d; ++i) v(i) = rng.normal();
  } while (v.norm() < 1e-12);
  return v / v.norm();
}

inline std::vector<double> sorted_copy(const Vector& v) {
  std::vector<double> out(v.data(), v.data() + v.size());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<double> angles_on_plane(const Matrix& x, const Vector& e1, const Vector& e2) {
  const Vector c1 = x * e1;
  const Vector c2 = x * e2;
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    double t = std::atan2(c2(i), c1(i));
    if (t < 0.0) t += 2.0 * std::numbers::pi;
    if (t >= 2.0 * std::numbers::pi) t = 0.0;
    out[static_cast<std::size_t>(i)] = t;
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void require_unit_rows(const Matrix& x, const char* who) {
  for (Index i = 0; i < x.rows(); ++i)
    if (std::abs(x.row(i).norm() - 1.0) > 1e-5)
      throw DataError(std::string(who) + ": row " + std::to_string(i) + " is not unit-norm (tolerance 1e-5)");
}

}  // namespace detail

/// (1/n sum_i |a_(i) - b_(i)|^p)^{1/p} on sorted values; unequal sizes use quantile matching.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b, double p) {
  if (a.empty() || b.empty()) throw ParameterError("wasserstein_1d: empty input");
  detail::require_order(p);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return std::pow(detail::wasserstein_1d_pow_sorted(a, b, p), 1.0 / p);
}

/// p-Wasserstein on the circle with geodesic distance, exact over the n cyclic matchings.
inline double circular_wasserstein_1d(std::vector<double> a, std::vector<double> b, double p) {
  if (a.size() != b.size()) throw ParameterError("circular_wasserstein_1d: counts differ");
  if (a.empty()) throw ParameterError("circular_wasserstein_1d: empty input");
  detail::require_order(p);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return std::pow(detail::circular_wasserstein_pow_sorted(a, b, p), 1.0 / p);
}

/// ((1/N) sum_theta W_p^p(X theta, Y theta))^{1/p} over N seeded directions on the sphere.
inline double sliced_wasserstein(const Matrix& x, const Matrix& y, int n_proj, double p, std::uint64_t seed) {
  if (x.cols() != y.cols()) throw DimensionError("sliced_wasserstein: dimensions differ");
  if (n_proj < 1) throw ParameterError("sliced_wasserstein: need at least one projection");
  detail::require_order(p);
  Rng rng(seed);
  double acc = 0.0;
  for (int s = 0; s < n_proj; ++s) {
    Rng slice = rng.split(static_cast<std::uint64_t>(s));
    const Vector theta = detail::random_unit_vector(x.cols(), slice);
    acc += detail::wasserstein_1d_pow_sorted(detail::sorted_copy(x * theta), detail::sorted_copy(y * theta), p);
  }
  return std::pow(acc / n_proj, 1.0 / p);
}

inline constexpr int kSubsampleRepeats = 20;

/// Spherical sliced Wasserstein on unit-norm rows.
///
/// Each slice draws a random 2-D subspace, maps points to angles on the great circle it
/// spans, and solves circular 1-D OT. When sample counts differ, the larger side is
/// subsampled to the smaller one (20 seeded resamples averaged per slice).
inline double spherical_sliced_wasserstein(const Matrix& x, const Matrix& y, int n_proj, double p,
                                           std::uint64_t seed) {
  if (x.cols() != y.cols()) throw DimensionError("spherical_sliced_wasserstein: dimensions differ");
  if (x.cols() < 2) throw DimensionError("spherical_sliced_wasserstein: need d >= 2");
  if (n_proj < 1) throw ParameterError("spherical_sliced_wasserstein: need at least one projection");
  detail::require_order(p);
  detail::require_unit_rows(x, "spherical_sliced_wasserstein");
  detail::require_unit_rows(y, "spherical_sliced_wasserstein");

  const bool swap = x.rows() > y.rows();
  const Matrix& small = swap ? y : x;
  const Matrix& large = swap ? x : y;
  const auto ns = static_cast<std::size_t>(small.rows());
  const auto nl = static_cast<std::size_t>(large.rows());
  const int repeats = ns == nl ? 1 : kSubsampleRepeats;

  Rng rng(seed);
  Rng sub = rng.split(1u << 20);
  std::vector<Matrix> subsets;
  for (int r = 0; r < repeats; ++r) {
    if (ns == nl) {
      subsets.push_back(large);
    } else {
      Rng rr = sub.split(static_cast<std::uint64_t>(r));
      subsets.push_back(detail::gather_rows(large, rr.sample_without_replacement(nl, ns)));
    }
  }

  double acc = 0.0;
  for (int s = 0; s < n_proj; ++s) {
    Rng slice = rng.split(static_cast<std::uint64_t>(s));
    const Vector e1 = detail::random_unit_vector(x.cols(), slice);
    Vector e2;
    do {
      e2 = detail::random_unit_vector(x.cols(), slice);
      e2 -= e2.dot(e1) * e1;
    } while (e2.norm() < 1e-8);
    e2.normalize();
    const std::vector<double> a = detail::angles_on_plane(small, e1, e2);
    double slice_cost = 0.0;
    for (const Matrix& subset : subsets)
      slice_cost += detail::circular_wasserstein_pow_sorted(a, detail::angles_on_plane(subset, e1, e2), p);
    acc += slice_cost / repeats;
  }
  return std::pow(acc / n_proj, 1.0 / p);
}

/// SSW(X, A) + SSW(Y, B) on row-normalized inputs.
inline ShiftReport total_ssw(const UnpairedPool& pool, const PairedDataset& paired, int n_proj = 500, double p = 2.0,
                             std::uint64_t seed = 0) {
  if (pool.x.cols() != paired.a.cols() || pool.y.cols() != paired.b.cols())
    throw DimensionError("total_ssw: pool and paired dimensions differ");
  ShiftReport r;
  r.n_projections = n_proj;
  r.p = p;
  r.seed = seed;
  const Rng rng(seed);
  r.ssw_x = spherical_sliced_wasserstein(detail::normalize_rows(pool.x), detail::normalize_rows(paired.a), n_proj, p,
                                         rng.split(0).next_u64());
  r.ssw_y = spherical_sliced_wasserstein(detail::normalize_rows(pool.y), detail::normalize_rows(paired.b), n_proj, p,
                                         rng.split(1).next_u64());
  r.total = r.ssw_x + r.ssw_y;
  return r;
}

namespace detail {

/// Indices of the k highest cosine similarities to row i (self excluded), ties to lower index.
inline std::vector<std::vector<Index>> knn_cosine(const Matrix& x, int k) {
  const Matrix xn = normalize_rows(x);
  const Matrix sim = xn * xn.transpose();
  const Index n = x.rows();
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(n));
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    order.erase(order.begin() + i);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      return sim(i, a) > sim(i, b) || (sim(i, a) == sim(i, b) && a < b);
    });
    auto& nb = out[static_cast<std::size_t>(i)];
    nb.assign(order.begin(), order.begin() + k);
    std::sort(nb.begin(), nb.end());
    order.resize(static_cast<std::size_t>(n));
  }
  return out;
}

}  // namespace detail

/// Mean over i of |kNN_X(i) ∩ kNN_Y(i)| / k, cosine neighborhoods, self excluded.
inline double mutual_knn(const Matrix& x, const Matrix& y, int k = 10) {
  if (x.rows() != y.rows()) throw DimensionError("mutual_knn: row counts differ");
  if (k < 1 || k >= x.rows()) throw ParameterError("mutual_knn: need 1 <= k < n");
  const auto nx = detail::knn_cosine(x, k);
  const auto ny = detail::knn_cosine(y, k);
  double acc = 0.0;
  for (std::size_t i = 0; i < nx.size(); ++i) {
    std::vector<Index> common;
    std::set_intersection(nx[i].begin(), nx[i].end(), ny[i].begin(), ny[i].end(), std::back_inserter(common));
    acc += static_cast<double>(common.size()) / k;
  }
  return acc / static_cast<double>(nx.size());
}

}  // namespace sotalign

#endif  // SOTALIGN_SHIFT_METRICS_HPP
