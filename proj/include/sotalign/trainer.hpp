#ifndef SOTALIGN_TRAINER_HPP
#define SOTALIGN_TRAINER_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sotalign/divergences.hpp"
#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"
#include "sotalign/linear_teachers.hpp"
#include "sotalign/optim.hpp"
#include "sotalign/rng.hpp"
#include "sotalign/semb.hpp"

namespace sotalign {

/// Trainable linear alignment layers f(x) = pre_x(x) W_f^T, g(y) = pre_y(y) W_g^T,
/// plus the learned SigLIP logit scale and bias.
struct Aligner {
  Matrix w_f;  // d x d_x
  Matrix w_g;  // d x d_y
  SigLIPParams siglip{};
  Preprocessor pre_x;
  Preprocessor pre_y;

  Matrix embed_x(const Matrix& x) const { return pre_x.apply(x) * w_f.transpose(); }
  Matrix embed_y(const Matrix& y) const { return pre_y.apply(y) * w_g.transpose(); }
};

struct TrainConfig {
  double alpha = 1e-4;
  DivergenceSpec div{};
  int n_steps = 2000;
  double lr_max = 1e-4;
  double weight_decay = 1e-5;
  std::size_t batch_paired = 0;  // 0 = every pair each step
  std::size_t batch_unpaired_x = 256;
  std::size_t batch_unpaired_y = 256;
  Index d = 1024;
  std::uint64_t seed = 0;
  double lion_beta1 = 0.9;
  double lion_beta2 = 0.99;
  bool init_from_teacher = false;
  SigLIPParams siglip_init{};

  void validate() const {
    if (!(alpha >= 0.0)) throw ParameterError("alpha must be non-negative");
    if (n_steps < 1) throw ParameterError("n_steps must be at least 1");
    if (d < 1) throw ParameterError("shared dimension d must be positive");
    if (!(lr_max >= 0.0) || !(weight_decay >= 0.0)) throw ParameterError("lr and weight decay must be non-negative");
  }
};

struct LossBreakdown {
  double supervised = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
};

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct OptimizerState {
  Matrix m_f;
  Matrix m_g;
  double m_scale = 0.0;
  double m_bias = 0.0;

  static OptimizerState zeros_like(const Aligner& a) {
    return OptimizerState{Matrix::Zero(a.w_f.rows(), a.w_f.cols()), Matrix::Zero(a.w_g.rows(), a.w_g.cols()), 0.0,
                          0.0};
  }
};

struct TrainReport {
  std::vector<StepRecord> steps;
  Aligner aligner;
  LinearTeacher teacher;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

/// Full gradient of L_alpha for one batch, without updating anything.
struct AlignerGradient {
  LossBreakdown loss;
  Matrix w_f;
  Matrix w_g;
  double scale = 0.0;
  double bias = 0.0;
};

/// Loss and gradient for the batch. Inputs are already preprocessed.
///
/// K_p = cos(f(A_b), g(B_b)) feeds SigLIP against the identity; K = cos(f(X_b), g(Y_b))
/// feeds DIV(K, K*) with K* from the teacher. With alpha = 0 the unpaired branch is skipped.
inline AlignerGradient aligner_gradient(const Aligner& aligner, const Matrix& a, const Matrix& b, const Matrix& x,
                                        const Matrix& y, const Matrix& k_star, const TrainConfig& cfg) {
  AlignerGradient out;
  const Matrix fa = a * aligner.w_f.transpose();
  const Matrix gb = b * aligner.w_g.transpose();
  const Matrix k_p = detail::cosine_affinity(fa, gb);
  const SigLIPResult sup = siglip_loss(k_p, aligner.siglip);
  auto [d_fa, d_gb] = affinity_backward(sup.grad_k, fa, gb);
  out.w_f = d_fa.transpose() * a;
  out.w_g = d_gb.transpose() * b;
  out.scale = sup.grad_scale;
  out.bias = sup.grad_bias;
  out.loss.supervised = sup.value;

  if (cfg.alpha > 0.0) {
    const Matrix fx = x * aligner.w_f.transpose();
    const Matrix gy = y * aligner.w_g.transpose();
    const Matrix k = detail::cosine_affinity(fx, gy);
    const ValueAndGrad reg = divergence_value_and_grad(cfg.div, k, k_star);
    auto [d_fx, d_gy] = affinity_backward(cfg.alpha * reg.grad, fx, gy);
    out.w_f.noalias() += d_fx.transpose() * x;
    out.w_g.noalias() += d_gy.transpose() * y;
    out.loss.regularizer = reg.value;
  }
  out.loss.total = out.loss.supervised + cfg.alpha * out.loss.regularizer;
  return out;
}

struct TrainData {
  const PairedDataset& paired;
  const UnpairedPool& pool;
};

struct StepResult {
  Aligner aligner;
  OptimizerState state;
  LossBreakdown loss;
};

/// One iteration of the semi-supervised objective followed by a LION update.
inline StepResult train_step(const Aligner& aligner, const Batch& batch, const TrainData& data,
                             const LinearTeacher& teacher, const TrainConfig& cfg, const OptimizerState& state,
                             int step) {
  if (aligner.w_f.cols() != data.paired.a.cols() || aligner.w_g.cols() != data.paired.b.cols())
    throw DimensionError("train_step: aligner does not match the data dimensions");
  const Matrix a = aligner.pre_x.apply(detail::gather_rows(data.paired.a, batch.paired_idx));
  const Matrix b = aligner.pre_y.apply(detail::gather_rows(data.paired.b, batch.paired_idx));
  Matrix x, y, k_star;
  if (cfg.alpha > 0.0) {
    const Matrix xr = detail::gather_rows(data.pool.x, batch.unpaired_x_idx);
    const Matrix yr = detail::gather_rows(data.pool.y, batch.unpaired_y_idx);
    k_star = teacher_affinity(teacher, xr, yr).values();
    x = aligner.pre_x.apply(xr);
    y = aligner.pre_y.apply(yr);
  }
  AlignerGradient grad = aligner_gradient(aligner, a, b, x, y, k_star, cfg);
  if (!std::isfinite(grad.loss.total)) throw DivergenceError("non-finite loss", step);
  if (!grad.w_f.allFinite() || !grad.w_g.allFinite() || !std::isfinite(grad.scale) || !std::isfinite(grad.bias))
    throw DivergenceError("non-finite gradient", step);

  StepResult out{aligner, state, grad.loss};
  const double lr = cosine_lr(step, cfg.n_steps, cfg.lr_max);
  const LionHyper h{lr, cfg.lion_beta1, cfg.lion_beta2, cfg.weight_decay};
  const LionHyper h_nodecay{lr, cfg.lion_beta1, cfg.lion_beta2, 0.0};
  lion_step(out.aligner.w_f, grad.w_f, out.state.m_f, h);
  lion_step(out.aligner.w_g, grad.w_g, out.state.m_g, h);
  lion_step(out.aligner.siglip.scale, grad.scale, out.state.m_scale, h_nodecay);
  lion_step(out.aligner.siglip.bias, grad.bias, out.state.m_bias, h_nodecay);
  if (!out.aligner.w_f.allFinite() || !out.aligner.w_g.allFinite())
    throw DivergenceError("non-finite parameters", step);
  return out;
}

/// Initial aligner: teacher maps when requested and d = d', otherwise Gaussian with std 1/sqrt(d_in).
inline Aligner init_aligner(const PairedDataset& paired, const LinearTeacher& teacher, const TrainConfig& cfg) {
  Aligner al;
  al.pre_x = Preprocessor::fit(paired.a, true);
  al.pre_y = Preprocessor::fit(paired.b, true);
  al.siglip = cfg.siglip_init;
  if (cfg.init_from_teacher && teacher.d_prime() == cfg.d) {
    al.w_f = teacher.w_x;
    al.w_g = teacher.w_y;
    return al;
  }
  Rng rng = Rng(cfg.seed).split(100);
  Rng rf = rng.split(0), rg = rng.split(1);
  const auto dx = paired.a.cols(), dy = paired.b.cols();
  al.w_f = rf.normal_matrix(cfg.d, dx, 1.0 / std::sqrt(static_cast<double>(dx)));
  al.w_g = rg.normal_matrix(cfg.d, dy, 1.0 / std::sqrt(static_cast<double>(dy)));
  return al;
}

/// Runs the second stage against an already fitted teacher.
inline TrainReport train_with_teacher(const PairedDataset& paired, const UnpairedPool& pool,
                                      const LinearTeacher& teacher, const TrainConfig& cfg) {
  cfg.validate();
  if (pool.x.cols() != paired.a.cols() || pool.y.cols() != paired.b.cols())
    throw DimensionError("unpaired pool dimensions do not match the paired data");
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport report;
  report.seed = cfg.seed;
  report.teacher = teacher;
  Aligner aligner = init_aligner(paired, teacher, cfg);
  OptimizerState state = OptimizerState::zeros_like(aligner);
  const auto np = static_cast<std::size_t>(paired.size());
  const std::size_t n_pair = cfg.batch_paired == 0 ? np : std::min(cfg.batch_paired, np);
  const std::size_t n_x = cfg.alpha > 0.0 ? std::min<std::size_t>(cfg.batch_unpaired_x, pool.x.rows()) : 0;
  const std::size_t n_y = cfg.alpha > 0.0 ? std::min<std::size_t>(cfg.batch_unpaired_y, pool.y.rows()) : 0;
  if (cfg.alpha > 0.0 && n_x != n_y)
    throw ParameterError("the regularizer needs a square affinity: unpaired batch sizes must match");
  const Rng batch_streams = Rng(cfg.seed).split(200);
  report.steps.reserve(static_cast<std::size_t>(cfg.n_steps));
  for (int step = 0; step < cfg.n_steps; ++step) {
    const std::uint64_t batch_seed = batch_streams.split(static_cast<std::uint64_t>(step)).next_u64();
    const Batch batch = sample_batch(paired, pool, n_pair, n_x, n_y, batch_seed);
    StepResult r = train_step(aligner, batch, TrainData{paired, pool}, teacher, cfg, state, step);
    report.steps.push_back(StepRecord{step, cosine_lr(step, cfg.n_steps, cfg.lr_max), r.loss});
    aligner = std::move(r.aligner);
    state = std::move(r.state);
  }
  report.aligner = std::move(aligner);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

struct TeacherOptions {
  Index d_prime = 0;  // 0 = min(d_x, d_y) for procrustes/cca, 1024 for contrastive
  double cca_lambda = 0.1;
  ContrastiveConfig contrastive{};
};

inline LinearTeacher fit_teacher(const PairedDataset& paired, TeacherKind kind, const TeacherOptions& opts = {}) {
  const Index dmin = std::min(paired.a.cols(), paired.b.cols());
  switch (kind) {
    case TeacherKind::procrustes:
      return fit_procrustes(paired, opts.d_prime > 0 ? opts.d_prime : dmin);
    case TeacherKind::cca:
      return fit_cca(paired, opts.d_prime > 0 ? opts.d_prime : dmin, opts.cca_lambda);
    case TeacherKind::contrastive:
      return fit_linear_contrastive(paired, opts.d_prime > 0 ? opts.d_prime : 1024, opts.contrastive);
  }
  throw ParameterError("unknown teacher kind");
}

/// Two-stage training: fit the linear teacher on the pairs, then train the aligner.
inline TrainReport train_sotalign(const PairedDataset& paired, const UnpairedPool& pool, TeacherKind teacher_kind,
                                  const TrainConfig& cfg, const TeacherOptions& teacher_opts = {}) {
  cfg.validate();
  const LinearTeacher teacher = fit_teacher(paired, teacher_kind, teacher_opts);
  return train_with_teacher(paired, pool, teacher, cfg);
}

// ---------------------------------------------------------------------------
// Serialization

inline MatrixContainer to_container(const Aligner& a) {
  MatrixContainer c;
  c.kind = "aligner";
  c.entries["w_f"] = a.w_f;
  c.entries["w_g"] = a.w_g;
  c.entries["mean_x"] = a.pre_x.mean;
  c.entries["mean_y"] = a.pre_y.mean;
  Matrix flags(1, 2);
  flags << (a.pre_x.normalize ? 1.0 : 0.0), (a.pre_y.normalize ? 1.0 : 0.0);
  c.entries["normalize"] = flags;
  Matrix sp(1, 2);
  sp << a.siglip.scale, a.siglip.bias;
  c.entries["siglip"] = sp;
  return c;
}

inline Aligner aligner_from_container(const MatrixContainer& c) {
  if (c.kind != "aligner") throw FormatError("container is not an aligner (kind '" + c.kind + "')");
  Aligner a;
  a.w_f = c.at("w_f");
  a.w_g = c.at("w_g");
  a.pre_x.mean = c.at("mean_x");
  a.pre_y.mean = c.at("mean_y");
  a.pre_x.normalize = c.at("normalize")(0, 0) != 0.0;
  a.pre_y.normalize = c.at("normalize")(0, 1) != 0.0;
  a.siglip.scale = c.at("siglip")(0, 0);
  a.siglip.bias = c.at("siglip")(0, 1);
  if (a.w_f.rows() != a.w_g.rows() || a.pre_x.mean.size() != a.w_f.cols() || a.pre_y.mean.size() != a.w_g.cols())
    throw FormatError("aligner container: inconsistent shapes");
  return a;
}

inline void save_aligner(const std::filesystem::path& path, const Aligner& a) { save_container(path, to_container(a)); }

inline Aligner load_aligner(const std::filesystem::path& path) {
  return aligner_from_container(load_container(path));
}

}  // namespace sotalign

#endif  // SOTALIGN_TRAINER_HPP
