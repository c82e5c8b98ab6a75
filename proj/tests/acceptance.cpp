// Acceptance runner: prints one PASS/FAIL line per criterion and exits non-zero if any fail.
// Usage: acceptance [criterion ...]   (no arguments runs all ten)

#include <sys/wait.h>
#include <zlib.h>

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "test_helpers.hpp"

using namespace sotalign;
namespace fs = std::filesystem;
namespace tk = sotalign::testkit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const SinkhornOptions kTight{1e-12, 100000};

double frob(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b).sum(); }

// ---------------------------------------------------------------------------

Outcome gradient_vs_finite_differences() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  const std::vector<Index> sizes{4, 8};
  const std::vector<double> epss{0.05, 0.5}, eps_stars{0.01, 0.1};
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const Index n = sizes[inst % 2];
    const double eps = epss[(inst / 2) % 2];
    const double eps_star = eps_stars[(inst / 4) % 2];
    const Matrix k = tk::random_affinity(n, rng);
    const Matrix ks = tk::random_affinity(n, rng);
    const Matrix g = klot_gradient(k, ks, eps, eps_star, kTight);
    const Matrix fd = fd_gradient([&](const Matrix& m) { return klot(m, ks, eps, eps_star, kTight); }, k, 1e-5);
    worst = std::max(worst, tk::rel_error(g, fd));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, fmt("max relative error %.3e over 20 instances (%.2fs)", worst, secs)};
}

Outcome inner_product_identity() {
  Rng rng(1002);
  const Matrix k = tk::random_affinity(5, rng);
  const double eps = 0.1;
  const TransportPlan p = sinkhorn(k, eps, kTight);
  const double w = entropic_ot_value(p, k).value;
  const Matrix log_ot = p.log_values(k);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Matrix tp = tk::random_bistochastic(5, 4, rng);
    worst = std::max(worst, std::abs(frob(tp, log_ot) - (frob(tp, k) + w) / eps));
  }
  return {worst < 1e-5, fmt("max deviation %.3e over 20 bistochastic T", worst)};
}

Outcome sinkhorn_correctness() {
  Rng rng(1003);
  double marg = 0.0;
  bool all_converged = true;
  for (Index n : {4, 16, 64, 256})
    for (double eps : {0.01, 0.05, 0.5}) {
      const Matrix k = tk::random_affinity(n, rng);
      const TransportPlan p = sinkhorn(k, eps, SinkhornOptions{1e-6, 10000});
      all_converged = all_converged && p.converged;
      marg = std::max({marg, (p.values.rowwise().sum().array() - 1.0).abs().maxCoeff(),
                       (p.values.colwise().sum().array() - 1.0).abs().maxCoeff()});
    }

  const Matrix k3 = tk::random_affinity(3, rng);
  const double eps3 = 0.5;
  const double opt = entropic_ot_value(sinkhorn(k3, eps3, kTight), k3).value;
  int beaten = 0;
  Rng cand(1004);
  for (int c = 0; c < 100000; ++c) {
    const Matrix t = tk::random_bistochastic(3, 1 + static_cast<int>(cand.uniform_index(6)), cand);
    if (tk::entropic_objective(t, k3, eps3) < opt - 1e-12) ++beaten;
  }

  int matched = 0;
  double worst_mass = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix k = tk::random_affinity(4, rng);
    double best = -1e300;
    std::vector<Index> best_perm;
    for (const auto& perm : tk::all_permutations(4)) {
      double score = 0.0;
      for (Index i = 0; i < 4; ++i) score += k(i, perm[static_cast<std::size_t>(i)]);
      if (score > best) best = score, best_perm = perm;
    }
    const TransportPlan p = sinkhorn(k, 1e-3, kTight);
    double mass = 0.0;
    for (Index i = 0; i < 4; ++i) mass += p.values(i, best_perm[static_cast<std::size_t>(i)]);
    worst_mass = std::max(worst_mass, std::abs(mass - 4.0));
    if (std::abs(mass - 4.0) < 1e-3) ++matched;
  }
  const bool pass = all_converged && marg <= 1e-6 && beaten == 0 && matched == 5;
  return {pass, fmt("marginal error %.2e (all converged: %s); %d of 1e5 candidates beat the plan; "
                    "eps=1e-3 plan on the optimal permutation in %d/5 (mass gap %.1e)",
                    marg, all_converged ? "yes" : "no", beaten, matched, worst_mass)};
}

Outcome gradient_cost_separation() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = grad_cost_profile(1024, 0.05, {100, 1000}, 0, true);
  const double secs = seconds_since(t0);
  const bool constant = rows[0].closed_form_floats == rows[1].closed_form_floats;
  const bool linear = rows[1].unrolled_floats == 10 * rows[0].unrolled_floats;
  return {constant && linear && secs < 60.0,
          fmt("closed form %zu / %zu floats, unrolled %zu / %zu floats at T=100/1000, n=1024 (%.1fs)",
              rows[0].closed_form_floats, rows[1].closed_form_floats, rows[0].unrolled_floats,
              rows[1].unrolled_floats, secs)};
}

Matrix centered(const Matrix& m) { return m.rowwise() - m.colwise().mean(); }

Vector canonical_correlations_oracle(const Matrix& a, const Matrix& b) {
  const Index dx = a.cols(), dy = b.cols();
  Matrix lhs = Matrix::Zero(dx + dy, dx + dy), rhs = Matrix::Zero(dx + dy, dx + dy);
  lhs.topRightCorner(dx, dy) = a.transpose() * b;
  lhs.bottomLeftCorner(dy, dx) = b.transpose() * a;
  rhs.topLeftCorner(dx, dx) = a.transpose() * a;
  rhs.bottomRightCorner(dy, dy) = b.transpose() * b;
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(lhs, rhs);
  return es.eigenvalues().reverse().head(std::min(dx, dy));
}

Outcome linear_teachers() {
  Rng rng(1005);
  auto semi_orthonormal = [&](Index rows, Index cols) { return Matrix(random_orthogonal(cols, rng).topRows(rows)); };

  const Matrix pa = detail::normalize_rows(centered(rng.normal_matrix(50, 8)));
  const Matrix pb = detail::normalize_rows(centered(pa.leftCols(6) + rng.normal_matrix(50, 6)));
  const LinearMaps pro = procrustes_maps(pa, pb, 4);
  const double pro_best = alignment_objective(pa, pb, pro.w_x, pro.w_y);
  int pro_beaten = 0;
  for (int c = 0; c < 1000; ++c)
    if (alignment_objective(pa, pb, semi_orthonormal(4, 8), semi_orthonormal(4, 6)) > pro_best + 1e-12) ++pro_beaten;
  const double orth = std::max((pro.w_x * pro.w_x.transpose() - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(),
                               (pro.w_y * pro.w_y.transpose() - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff());

  const Matrix ca = centered(rng.normal_matrix(50, 5));
  const Matrix cb = centered(ca.leftCols(4) + rng.normal_matrix(50, 4));
  const LinearMaps cca = cca_maps(ca, cb, 3, 0.0);
  const double cca_best = alignment_objective(ca, cb, cca.w_x, cca.w_y);
  const Matrix sxx_is = detail::inverse_sqrt(ca.transpose() * ca, 0.0);
  const Matrix syy_is = detail::inverse_sqrt(cb.transpose() * cb, 0.0);
  int cca_beaten = 0;
  for (int c = 0; c < 1000; ++c)
    if (alignment_objective(ca, cb, semi_orthonormal(3, 5) * sxx_is, semi_orthonormal(3, 4) * syy_is) >
        cca_best + 1e-12)
      ++cca_beaten;
  const LinearMaps full = cca_maps(ca, cb, 4, 0.0);
  const double corr_err = (full.singular_values - canonical_correlations_oracle(ca, cb)).cwiseAbs().maxCoeff();
  const Matrix px = ca * full.w_x.transpose(), py = cb * full.w_y.transpose();
  const double whiten = std::max((px.transpose() * px - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(),
                                 (py.transpose() * py - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff());

  const bool pass = pro_beaten == 0 && cca_beaten == 0 && corr_err < 1e-6 && orth < 1e-6 && whiten < 1e-5;
  return {pass, fmt("Procrustes beaten by %d/1000, CCA beaten by %d/1000; correlation error %.2e; "
                    "orthonormality %.2e; whitening %.2e",
                    pro_beaten, cca_beaten, corr_err, orth, whiten)};
}

Outcome cka_properties() {
  Rng rng(1006);
  const Matrix x1 = rng.normal_matrix(64, 5), x2 = rng.normal_matrix(64, 9);
  const Matrix k1 = x1 * x1.transpose(), k2 = x2 * x2.transpose();
  const double path_gap = std::abs(cka_div(x1, x2) - cka_from_kernels(k1, k2));
  const double self_gap = std::abs(cka_from_kernels(k1, k1) - 1.0);
  const double scale_gap = std::abs(cka_from_kernels(7.3 * k1, k2) - cka_from_kernels(k1, k2));
  return {path_gap < 1e-10 && self_gap < 1e-12 && scale_gap < 1e-12,
          fmt("factorized vs kernel %.2e; |CKA(K,K) - 1| %.2e; scale gap %.2e", path_gap, self_gap, scale_gap)};
}

Outcome infonce_recovery() {
  Rng rng(1007);
  Matrix k = tk::random_affinity(6, rng);
  k.diagonal().array() = 1.0;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j)
      if (i != j) k(i, j) = std::min(k(i, j), 0.9);
  double expected = 0.0;
  for (Index i = 0; i < 6; ++i) {
    double denom = 0.0;
    for (Index j = 0; j < 6; ++j) denom += std::exp(k(i, j));
    expected -= std::log(std::exp(k(i, i)) / denom);
  }
  expected /= 6.0;
  const double got = generalized_infonce(k, Matrix::Identity(6, 6), 1.0, 1e-4).value;
  return {std::abs(got - expected) < 1e-3, fmt("generalized %.6f vs classical %.6f", got, expected)};
}

// ---------------------------------------------------------------------------
// End-to-end runs shared by criteria 8 and 9.

struct SeedRun {
  double teacher = 0.0, baseline = 0.0, best = 0.0, ssw = 0.0;
};

const std::vector<double> kShiftLevels{0.0, 0.5, 1.0};
const std::vector<double> kAlphas{1.0, 10.0};

double mean_r1(const Matrix& x, const Matrix& y) {
  return retrieval_recall(x, y, identity_ground_truth(x.rows()), {1}).mean_r1;
}

SeedRun run_seed(int seed, double shift) {
  SynthConfig sc;
  sc.seed = static_cast<std::uint64_t>(seed);
  sc.pool_shift = shift;
  const SynthData data = make_synthetic(sc);
  const PairedDataset paired(EmbeddingMatrix(data.paired_x), EmbeddingMatrix(data.paired_y));
  const UnpairedPool pool{EmbeddingMatrix(data.unpaired_x), EmbeddingMatrix(data.unpaired_y)};

  TeacherOptions to;
  to.d_prime = 32;
  const LinearTeacher teacher = fit_teacher(paired, TeacherKind::procrustes, to);
  SeedRun out;
  out.teacher = mean_r1(teacher.project_x(data.heldout_x), teacher.project_y(data.heldout_y));
  out.ssw = total_ssw(pool, paired, 500, 2.0, sc.seed).total;

  auto train = [&](double alpha) {
    TrainConfig cfg;
    cfg.alpha = alpha;
    cfg.n_steps = 1000;
    cfg.lr_max = 3e-3;
    cfg.d = 32;
    cfg.seed = sc.seed;
    cfg.batch_unpaired_x = cfg.batch_unpaired_y = 128;
    const TrainReport rep = train_with_teacher(paired, pool, teacher, cfg);
    return mean_r1(rep.aligner.embed_x(data.heldout_x), rep.aligner.embed_y(data.heldout_y));
  };
  out.baseline = train(0.0);
  out.best = -1.0;
  for (double a : kAlphas) out.best = std::max(out.best, train(a));
  return out;
}

std::map<std::pair<int, double>, SeedRun>& e2e_cache() {
  static std::map<std::pair<int, double>, SeedRun> cache;
  return cache;
}

const SeedRun& e2e(int seed, double shift) {
  auto& cache = e2e_cache();
  const auto key = std::make_pair(seed, shift);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, run_seed(seed, shift)).first;
  return it->second;
}

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  int over_baseline = 0, over_teacher = 0;
  std::string rows;
  for (int seed = 0; seed < 5; ++seed) {
    const SeedRun& r = e2e(seed, 0.0);
    if (r.best >= r.baseline) ++over_baseline;
    if (r.best >= r.teacher) ++over_teacher;
    rows += fmt(" [seed %d: sotalign %.1f, baseline %.1f, teacher %.1f]", seed, r.best, r.baseline, r.teacher);
  }
  const double secs = seconds_since(t0);
  return {over_baseline >= 4 && over_teacher >= 4 && secs < 600.0,
          fmt("beats baseline %d/5, teacher %d/5 (%.0fs);", over_baseline, over_teacher, secs) + rows};
}

Outcome shift_sanity() {
  int monotone_ssw = 0, non_increasing_gain = 0;
  std::string rows;
  for (int seed = 0; seed < 5; ++seed) {
    std::vector<double> ssw, gain;
    for (double s : kShiftLevels) {
      const SeedRun& r = e2e(seed, s);
      ssw.push_back(r.ssw);
      gain.push_back(r.best - r.baseline);
    }
    if (ssw[0] < ssw[1] && ssw[1] < ssw[2]) ++monotone_ssw;
    if (gain[0] >= gain[1] && gain[1] >= gain[2]) ++non_increasing_gain;
    rows += fmt(" [seed %d: ssw %.3f/%.3f/%.3f gain %.1f/%.1f/%.1f]", seed, ssw[0], ssw[1], ssw[2], gain[0], gain[1],
                gain[2]);
  }
  return {monotone_ssw == 5 && non_increasing_gain >= 4,
          fmt("ssw increasing in %d/5 seeds, gain non-increasing in %d/5 at shifts 0/0.5/1;", monotone_ssw,
              non_increasing_gain) +
              rows};
}

// ---------------------------------------------------------------------------
// Determinism of the CLI.

int run_in(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && " + SOTALIGN_CLI_PATH + " " + args + " >> cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// CRC-32 of a file. For the gradient profile the two timing columns are dropped first.
unsigned long file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string content = ss.str();
  if (p.filename() == "grad_profile.csv") {
    std::stringstream lines(content);
    std::string line, kept;
    while (std::getline(lines, line)) {
      if (!line.empty() && line[0] != '#') {
        for (int drop = 0; drop < 2; ++drop) line = line.substr(0, line.rfind(','));
      }
      kept += line + "\n";
    }
    content = kept;
  }
  return crc32(0L, reinterpret_cast<const Bytef*>(content.data()), static_cast<uInt>(content.size()));
}

std::map<std::string, unsigned long> run_pipeline(const fs::path& dir) {
  const std::vector<std::string> steps{
      "synth --n-pairs 60 --n-unpaired 300 --n-heldout 40 --seed 7 --out data",
      "fit-teacher --kind procrustes --paired-x data/paired_x.semb --paired-y data/paired_y.semb --d-prime 16 "
      "--seed 7 --out procrustes",
      "fit-teacher --kind cca --paired-x data/paired_x.semb --paired-y data/paired_y.semb --d-prime 16 --out cca",
      "fit-teacher --kind contrastive --paired-x data/paired_x.semb --paired-y data/paired_y.semb --d-prime 16 "
      "--contrastive-steps 50 --seed 7 --out contrastive",
      "train --paired-x data/paired_x.semb --paired-y data/paired_y.semb --unpaired-x data/unpaired_x.semb "
      "--unpaired-y data/unpaired_y.semb --teacher procrustes/teacher.sotc --alpha 1 --steps 30 --dim 16 "
      "--batch-unpaired 32 --seed 7 --out train",
      "eval --img data/heldout_x.semb --txt data/heldout_y.semb --aligner train/aligner.sotc --ks 1,5 --out eval",
      "shift --pool-x data/unpaired_x.semb --pool-y data/unpaired_y.semb --paired-x data/paired_x.semb "
      "--paired-y data/paired_y.semb --n-proj 100 --seed 7 --out shift",
      "bench-grad --n 32 --iters 10,100 --seed 7 --out bench",
  };
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::map<std::string, unsigned long> digests;
  for (const auto& s : steps)
    if (run_in(dir, s) != 0) {
      digests["failed: " + s] = 0;
      return digests;
    }
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() != "cli.log")
      digests[fs::relative(entry.path(), dir).string()] = file_digest(entry.path());
  return digests;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "sotalign_acceptance_determinism";
  const auto a = run_pipeline(root / "a");
  const auto b = run_pipeline(root / "b");
  for (const auto& [name, _] : a)
    if (name.rfind("failed: ", 0) == 0) return {false, name};
  std::size_t differing = 0;
  std::string which;
  for (const auto& [name, digest] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != digest) {
      ++differing;
      which += " " + name;
    }
  }
  const bool pass = differing == 0 && a.size() == b.size() && a.size() >= 20;
  return {pass, fmt("%zu output files hashed per run, %zu differ", a.size(), differing) + which};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"closed-form KLOT gradient vs finite differences", gradient_vs_finite_differences},
      {"inner product of a bistochastic plan with the log OT plan", inner_product_identity},
      {"Sinkhorn marginals, optimality and zero-temperature limit", sinkhorn_correctness},
      {"gradient memory constant in iterations vs linear unrolled tape", gradient_cost_separation},
      {"Procrustes and CCA closed forms", linear_teachers},
      {"CKA factorized path, self-alignment and scale invariance", cka_properties},
      {"generalized InfoNCE recovers the classical loss", infonce_recovery},
      {"SOTAlign-KLOT beats the supervised baseline and the teacher", end_to_end},
      {"pool shift metric monotone and SOTAlign gain non-increasing", shift_sanity},
      {"CLI outputs bit-identical across runs", cli_determinism},
  };

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  if (selected.empty())
    for (int c = 1; c <= 10; ++c) selected.insert(c);

  int failures = 0;
  for (int c : selected) {
    if (c < 1 || c > 10) {
      std::fprintf(stderr, "unknown criterion %d\n", c);
      return 2;
    }
    const auto& [name, check] = criteria[static_cast<std::size_t>(c - 1)];
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %d: %s. %s\n", o.pass ? "PASS" : "FAIL", c, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
