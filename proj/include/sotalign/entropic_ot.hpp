#ifndef SOTALIGN_ENTROPIC_OT_HPP
#define SOTALIGN_ENTROPIC_OT_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"
#include "sotalign/rng.hpp"

namespace sotalign {

struct SinkhornOptions {
  double tol = 1e-6;   // max L-inf marginal violation
  int max_iter = 100;  // one iteration = one row update + one column update, or one Newton step
  // Switch to damped Newton steps on the dual after this many unconverged sweeps.
  // Negative keeps plain sweeps throughout.
  int newton_after = 20;
};

/// Entropic OT plan with uniform unit marginals (P1 = 1, P^T 1 = 1, total mass n).
///
/// log(values) = u 1^T + K / epsilon + 1 v^T.
struct TransportPlan {
  Matrix values;
  Vector u;
  Vector v;
  double epsilon = 0.0;
  int iterations_used = 0;
  double marginal_error = std::numeric_limits<double>::infinity();
  bool converged = false;

  Matrix log_values(const Matrix& k) const {
    return ((k / epsilon).colwise() + u).rowwise() + v.transpose();
  }
  Index size() const noexcept { return values.rows(); }
};

/// W_eps(T, K) = -<T, K> + eps * H(T) with H(T) = sum T log T.
struct OtValue {
  double value = 0.0;
  double transport_cost = 0.0;
  double entropy = 0.0;
};

namespace detail {

/// lse_i = log sum_j exp(s_ij + v_j), column-major friendly.
inline Vector row_logsumexp(const Matrix& s, const Vector& v) {
  const Index n = s.rows(), m = s.cols();
  Eigen::ArrayXd mx = Eigen::ArrayXd::Constant(n, -std::numeric_limits<double>::infinity());
  for (Index j = 0; j < m; ++j) mx = mx.max(s.col(j).array() + v(j));
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(n);
  for (Index j = 0; j < m; ++j) acc += (s.col(j).array() + (v(j) - mx)).exp();
  return (mx + acc.log()).matrix();
}

/// lse_j = log sum_i exp(s_ij + u_i).
inline Vector col_logsumexp(const Matrix& s, const Vector& u) {
  const Index m = s.cols();
  Vector out(m);
  for (Index j = 0; j < m; ++j) {
    const auto z = (s.col(j).array() + u.array()).eval();
    const double mx = z.maxCoeff();
    out(j) = mx + std::log((z - mx).exp().sum());
  }
  return out;
}

/// One damped Newton ascent step on D(u, v) = sum u + sum v - sum exp(s + u 1^T + 1 v^T).
/// Returns false when no step length improves D.
inline bool newton_dual_step(const Matrix& s, Vector& u, Vector& v) {
  const Index n = s.rows();
  const Matrix p = ((s.colwise() + u).rowwise() + v.transpose()).array().exp().matrix();
  const Vector r = p.rowwise().sum();
  const Vector c = p.colwise().sum().transpose();
  const Vector gu = Vector::Ones(n) - r;
  const Vector gv = Vector::Ones(n) - c;
  // Eliminate du through the diagonal block; the Schur complement has null vector 1,
  // which the rank-one term pins without changing solutions orthogonal to it.
  const Matrix pr = r.cwiseInverse().asDiagonal() * p;
  Matrix schur = -p.transpose() * pr;
  schur.diagonal() += c;
  schur.array() += 1.0 / static_cast<double>(n);
  const Vector rhs = gv - pr.transpose() * gu;
  const Vector dv = schur.ldlt().solve(rhs);
  const Vector du = (gu - p * dv).cwiseQuotient(r);
  if (!du.allFinite() || !dv.allFinite()) return false;
  const double slope = gu.dot(du) + gv.dot(dv);
  if (!(slope > 0.0)) return false;
  const double mass = p.sum();
  for (double t = 1.0; t > 1e-10; t *= 0.5) {
    const Vector ut = u + t * du, vt = v + t * dv;
    const double trial_mass = ((s.colwise() + ut).rowwise() + vt.transpose()).array().exp().sum();
    const double gain = t * (du.sum() + dv.sum()) - (trial_mass - mass);
    if (std::isfinite(gain) && gain >= 1e-4 * t * slope) {
      u = ut;
      v = vt;
      return true;
    }
  }
  return false;
}

inline void require_square(const Matrix& k, const char* who) {
  if (k.rows() != k.cols() || k.rows() < 1)
    throw DimensionError(std::string(who) + ": affinity must be square and non-empty");
}

inline void require_positive(double eps, const char* who) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ParameterError(std::string(who) + ": epsilon must be positive");
}

}  // namespace detail

/// Log-domain Sinkhorn solving argmin_{P in Pi_n} -<P, K> + eps H(P).
///
/// Alternates u <- -LSE_row(K/eps + 1 v^T), v <- -LSE_col(K/eps + u 1^T). Columns are
/// exact after each v update, so the stopping test measures the row marginal.
/// Sweeps contract slowly when the plan is close to a permutation (small eps), so after
/// `newton_after` sweeps the row update is replaced by a damped Newton step on the dual,
/// which has the same fixed point. Each Newton step costs O(n^3).
/// When `max_iter` is exhausted the plan is returned with converged = false.
inline TransportPlan sinkhorn(const Matrix& k, double eps, const SinkhornOptions& opts = {}) {
  detail::require_square(k, "sinkhorn");
  detail::require_positive(eps, "sinkhorn");
  if (!k.allFinite()) throw DataError("sinkhorn: non-finite affinity");
  const Index n = k.rows();
  const Matrix s = k / eps;

  TransportPlan plan;
  plan.epsilon = eps;
  plan.v = Vector::Zero(n);
  plan.u = -detail::row_logsumexp(s, plan.v);
  plan.v = -detail::col_logsumexp(s, plan.u);
  plan.iterations_used = 1;
  while (true) {
    const Vector lse = detail::row_logsumexp(s, plan.v);
    plan.marginal_error = ((plan.u + lse).array().exp() - 1.0).abs().maxCoeff();
    if (plan.marginal_error <= opts.tol) {
      plan.converged = true;
      break;
    }
    if (plan.iterations_used >= opts.max_iter) break;
    const bool newton = opts.newton_after >= 0 && plan.iterations_used >= opts.newton_after && n > 1 &&
                        detail::newton_dual_step(s, plan.u, plan.v);
    if (!newton) plan.u = -lse;
    plan.v = -detail::col_logsumexp(s, plan.u);
    ++plan.iterations_used;
  }
  plan.values = ((s.colwise() + plan.u).rowwise() + plan.v.transpose()).array().exp().matrix();
  return plan;
}

inline OtValue entropic_ot_value(const TransportPlan& plan, const Matrix& k) {
  if (plan.values.rows() != k.rows() || plan.values.cols() != k.cols())
    throw DimensionError("entropic_ot_value: plan and affinity sizes differ");
  OtValue out;
  out.transport_cost = plan.values.cwiseProduct(k).sum();
  double h = 0.0;
  for (Index j = 0; j < k.cols(); ++j)
    for (Index i = 0; i < k.rows(); ++i) {
      const double t = plan.values(i, j);
      if (t > 0.0) h += t * std::log(t);
    }
  out.entropy = h;
  out.value = -out.transport_cost + plan.epsilon * h;
  return out;
}

/// sum_ij T*_ij (log T*_ij - log T_ij), both logs taken from the dual potentials.
inline double kl_between_plans(const TransportPlan& target, const Matrix& k_star, const TransportPlan& plan,
                               const Matrix& k) {
  const Matrix log_t = target.log_values(k_star);
  const Matrix log_p = plan.log_values(k);
  double kl = 0.0;
  for (Index j = 0; j < k.cols(); ++j)
    for (Index i = 0; i < k.rows(); ++i) {
      const double t = target.values(i, j);
      if (t > 0.0) kl += t * (log_t(i, j) - log_p(i, j));
    }
  return kl;
}

namespace detail {
inline void require_pair(const Matrix& k, const Matrix& k_star, double eps, double eps_star, const char* who) {
  require_square(k, who);
  require_square(k_star, who);
  if (k.rows() != k_star.rows()) throw DimensionError(std::string(who) + ": K and K* sizes differ");
  require_positive(eps, who);
  require_positive(eps_star, who);
}
}  // namespace detail

/// KLOT(K || K*) = KL(OT_{eps*}(K*) || OT_eps(K)), raw sum over all entries.
inline double klot(const Matrix& k, const Matrix& k_star, double eps, double eps_star,
                   const SinkhornOptions& opts = {}) {
  detail::require_pair(k, k_star, eps, eps_star, "klot");
  const TransportPlan target = sinkhorn(k_star, eps_star, opts);
  const TransportPlan plan = sinkhorn(k, eps, opts);
  return kl_between_plans(target, k_star, plan, k);
}

/// Closed-form gradient of KLOT w.r.t. K from two converged plans: (OT_eps(K) - T*) / eps.
inline Matrix klot_gradient_from_plans(const TransportPlan& plan, const TransportPlan& target) {
  return (plan.values - target.values) / plan.epsilon;
}

inline Matrix klot_gradient(const Matrix& k, const Matrix& k_star, double eps, double eps_star,
                            const SinkhornOptions& opts = {}) {
  detail::require_pair(k, k_star, eps, eps_star, "klot_gradient");
  return klot_gradient_from_plans(sinkhorn(k, eps, opts), sinkhorn(k_star, eps_star, opts));
}

/// Central finite differences of a scalar function of a matrix.
template <typename F>
Matrix fd_gradient(F&& f, const Matrix& k, double h) {
  if (!(h > 0.0)) throw ParameterError("fd_gradient: step must be positive");
  Matrix grad(k.rows(), k.cols());
  Matrix probe = k;
  for (Index j = 0; j < k.cols(); ++j)
    for (Index i = 0; i < k.rows(); ++i) {
      probe(i, j) = k(i, j) + h;
      const double fp = f(static_cast<const Matrix&>(probe));
      probe(i, j) = k(i, j) - h;
      const double fm = f(static_cast<const Matrix&>(probe));
      probe(i, j) = k(i, j);
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw DataError("fd_gradient: non-finite evaluation at (" + std::to_string(i) + ", " + std::to_string(j) +
                        ")");
      grad(i, j) = (fp - fm) / (2.0 * h);
    }
  return grad;
}

/// Counts floats held by the buffers a gradient path keeps alive.
class BufferMeter {
 public:
  void acquire(std::size_t floats) {
    live_ += floats;
    peak_ = std::max(peak_, live_);
  }
  void release(std::size_t floats) { live_ -= floats; }
  std::size_t live() const noexcept { return live_; }
  std::size_t peak() const noexcept { return peak_; }

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

struct GradientResult {
  double value = 0.0;
  Matrix grad;
};

/// KLOT value and closed-form gradient for exactly `iterations` Sinkhorn sweeps.
///
/// Retained state: both plans (2 n^2) and both potential pairs (4 n). Nothing
/// depends on the iteration count.
inline GradientResult klot_closed_form_metered(const Matrix& k, const Matrix& k_star, double eps, double eps_star,
                                               int iterations, BufferMeter& meter) {
  detail::require_pair(k, k_star, eps, eps_star, "klot_closed_form_metered");
  const auto n = static_cast<std::size_t>(k.rows());
  const SinkhornOptions fixed{0.0, iterations, -1};
  const TransportPlan target = sinkhorn(k_star, eps_star, fixed);
  meter.acquire(n * n + 2 * n);
  const TransportPlan plan = sinkhorn(k, eps, fixed);
  meter.acquire(n * n + 2 * n);
  GradientResult out;
  out.value = kl_between_plans(target, k_star, plan, k);
  out.grad = klot_gradient_from_plans(plan, target);
  meter.release(2 * (n * n + 2 * n));
  return out;
}

/// Reference path: reverse-mode differentiation through `iterations` unrolled
/// Sinkhorn sweeps on K, with the target plan T* held constant. The tape stores u^t
/// and v^t for every sweep, 2 n floats per iteration.
inline GradientResult klot_unrolled_metered(const Matrix& k, const TransportPlan& target, const Matrix& k_star,
                                            double eps, int iterations, BufferMeter& meter) {
  detail::require_pair(k, k_star, eps, target.epsilon, "klot_unrolled_metered");
  if (iterations < 1) throw ParameterError("klot_unrolled_metered: need at least one iteration");
  const Index n = k.rows();
  const auto nn = static_cast<std::size_t>(n);
  const Matrix s = k / eps;

  std::vector<Vector> us, vs;
  us.reserve(static_cast<std::size_t>(iterations));
  vs.reserve(static_cast<std::size_t>(iterations));
  Vector v = Vector::Zero(n);
  for (int t = 0; t < iterations; ++t) {
    Vector u = -detail::row_logsumexp(s, v);
    v = -detail::col_logsumexp(s, u);
    us.push_back(std::move(u));
    vs.push_back(v);
    meter.acquire(2 * nn);
  }

  // L = sum T* (log T* - log P), log P = u 1^T + S + 1 v^T.
  const Matrix log_t = target.log_values(k_star);
  const Matrix log_p = (s.colwise() + us.back()).rowwise() + vs.back().transpose();
  double value = 0.0;
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i)
      if (target.values(i, j) > 0.0) value += target.values(i, j) * (log_t(i, j) - log_p(i, j));

  // Adjoints of log P = -T*. Sweep t used Q = exp(S + u^t 1^T + 1 v^t^T) for the column
  // update and R = Q diag(exp(v^{t-1} - v^t)) for the row update.
  const Matrix& g = target.values;
  Matrix s_bar = -g;
  Vector u_bar = -g.rowwise().sum();
  Vector v_bar = -g.colwise().sum().transpose();
  Matrix q(n, n);
  for (int t = iterations - 1; t >= 0; --t) {
    const Vector& ut = us[static_cast<std::size_t>(t)];
    const Vector& vt = vs[static_cast<std::size_t>(t)];
    q = ((s.colwise() + ut).rowwise() + vt.transpose()).array().exp().matrix();
    u_bar.noalias() -= q * v_bar;
    const Vector w = t > 0 ? Vector((vs[static_cast<std::size_t>(t - 1)] - vt).array().exp().matrix())
                           : Vector((-vt).array().exp().matrix());
    for (Index j = 0; j < n; ++j)
      s_bar.col(j).array() -= q.col(j).array() * (v_bar(j) + w(j) * u_bar.array());
    v_bar = -(w.array() * (q.transpose() * u_bar).array()).matrix();
    u_bar.setZero();
  }
  meter.release(static_cast<std::size_t>(iterations) * 2 * nn);

  GradientResult out;
  out.value = value;
  out.grad = s_bar / eps;
  return out;
}

inline GradientResult klot_unrolled_metered(const Matrix& k, const Matrix& k_star, double eps, double eps_star,
                                            int iterations, BufferMeter& meter) {
  detail::require_pair(k, k_star, eps, eps_star, "klot_unrolled_metered");
  return klot_unrolled_metered(k, sinkhorn(k_star, eps_star, SinkhornOptions{0.0, iterations, -1}), k_star, eps,
                               iterations, meter);
}

struct ProfileRow {
  Index n = 0;
  double epsilon = 0.0;
  int iterations = 0;
  std::size_t closed_form_floats = 0;
  std::size_t unrolled_floats = 0;
  double solve_ms = 0.0;
  double grad_ms = 0.0;
};

/// Auxiliary memory of the closed-form and unrolled gradient paths per iteration count.
///
/// solve_ms times the closed-form path (both solves plus the gradient); grad_ms times
/// the unrolled path on K (forward with tape plus reverse sweep), reusing the T* solve.
inline std::vector<ProfileRow> grad_cost_profile(Index n, double eps, const std::vector<int>& iter_counts,
                                                 std::uint64_t seed = 0, bool run_unrolled = true) {
  if (n < 2) throw ParameterError("grad_cost_profile: n must be at least 2");
  detail::require_positive(eps, "grad_cost_profile");
  Rng rng(seed);
  Rng ra = rng.split(0), rb = rng.split(1), rc = rng.split(2);
  const Index d = 16;
  const Matrix x = ra.normal_matrix(n, d);
  const Matrix y = rb.normal_matrix(n, d);
  const Matrix z = rc.normal_matrix(n, d);
  const Matrix k = detail::cosine_affinity(x, y);
  const Matrix k_star = detail::cosine_affinity(x, z);

  std::vector<ProfileRow> rows;
  for (const int iters : iter_counts) {
    if (iters < 1) throw ParameterError("grad_cost_profile: iteration counts must be positive");
    ProfileRow row;
    row.n = n;
    row.epsilon = eps;
    row.iterations = iters;
    using clock = std::chrono::steady_clock;
    BufferMeter closed;
    auto t0 = clock::now();
    (void)klot_closed_form_metered(k, k_star, eps, eps, iters, closed);
    row.solve_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    row.closed_form_floats = closed.peak();
    BufferMeter unrolled;
    if (run_unrolled) {
      const TransportPlan target = sinkhorn(k_star, eps, SinkhornOptions{0.0, iters, -1});
      t0 = clock::now();
      (void)klot_unrolled_metered(k, target, k_star, eps, iters, unrolled);
      row.grad_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      row.unrolled_floats = unrolled.peak();
    } else {
      row.unrolled_floats = static_cast<std::size_t>(iters) * 2 * static_cast<std::size_t>(n);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace sotalign

#endif  // SOTALIGN_ENTROPIC_OT_HPP
