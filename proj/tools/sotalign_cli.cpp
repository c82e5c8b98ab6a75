#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sotalign/sotalign.hpp"

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace sotalign;

constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kDataFailure = 1, kUsage = 2, kNumericalDivergence = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::uint64_t seed = 0;
  std::string out = ".";
};

/// Registers options on a subcommand and remembers them so the effective values
/// can be serialized after parsing.
class Params {
 public:
  explicit Params(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    recorders_.emplace_back([name, &var](json& j) { j[name] = var; });
    return app_->add_option("--" + name, var, desc)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    recorders_.emplace_back([name, &var](json& j) { j[name] = var; });
    return app_->add_flag("--" + name, var, desc);
  }

  json dump() const {
    json j = json::object();
    for (const auto& r : recorders_) r(j);
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> recorders_;
};

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

json run_config(const std::string& command, const Common& common, const std::string& config_file,
                const Params& params) {
  json j;
  j["tool"] = "sotalign";
  j["version"] = kVersion;
  j["command"] = command;
  j["seed"] = common.seed;
  j["out"] = common.out;
  j["config_file"] = config_file;
  j["params"] = params.dump();
  return j;
}

/// CSV with the run config as a leading comment line.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const json& config, const std::vector<std::string>& header) : path_(path) {
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "# run_config: " << config.dump() << "\n";
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

fs::path prepare_out(const Common& common) {
  const fs::path out(common.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

EmbeddingMatrix require_embeddings(const std::string& path, const char* flag) {
  if (path.empty()) throw UsageError(std::string("missing required input ") + flag);
  return load_embeddings(path);
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

Index parse_index(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw DataError(where + ": expected a non-negative integer, got '" + s + "'");
  }
}

bool is_header(const std::vector<std::string>& row) {
  return !row.empty() && !row[0].empty() && !std::isdigit(static_cast<unsigned char>(row[0][0]));
}

/// Ground truth from "image,text" rows; identity when no file is given.
GroundTruth load_ground_truth(const std::string& path, Index n_img, Index n_txt) {
  if (path.empty()) {
    if (n_img != n_txt) throw DimensionError("identity ground truth needs equal image and text counts");
    return identity_ground_truth(n_img);
  }
  GroundTruth gt(static_cast<std::size_t>(n_img));
  const auto rows = read_csv_rows(path);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (r == 0 && is_header(rows[r])) continue;
    if (rows[r].size() != 2) throw DataError(path + ": expected 'image,text' rows");
    const Index img = parse_index(rows[r][0], path), txt = parse_index(rows[r][1], path);
    if (img >= n_img || txt >= n_txt) throw DataError(path + ": index out of range on row " + std::to_string(r));
    gt[static_cast<std::size_t>(img)].push_back(txt);
  }
  return gt;
}

std::vector<Index> load_labels(const std::string& path) {
  std::vector<Index> labels;
  const auto rows = read_csv_rows(path);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (r == 0 && is_header(rows[r])) continue;
    if (rows[r].empty()) continue;
    labels.push_back(parse_index(rows[r][0], path));
  }
  return labels;
}

json teacher_summary(const LinearTeacher& t) {
  json j;
  j["kind"] = std::string(to_string(t.kind));
  j["d_prime"] = t.d_prime();
  j["singular_values"] = std::vector<double>(t.singular_values.data(), t.singular_values.data() + t.singular_values.size());
  j["warnings"] = t.warnings;
  return j;
}

double max_identity_error(const Matrix& m) {
  return (m - Matrix::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// synth

struct SynthCmd {
  SynthConfig cfg;
  int latent_dim = 16, d_x = 48, d_y = 32, n_pairs = 200, n_unpaired = 5000, n_heldout = 500;

  void add(Params& p) {
    p.add("latent-dim", latent_dim, "latent dimension");
    p.add("dx", d_x, "dimension of the X modality");
    p.add("dy", d_y, "dimension of the Y modality");
    p.add("n-pairs", n_pairs, "paired training rows");
    p.add("n-unpaired", n_unpaired, "unpaired rows per side");
    p.add("n-heldout", n_heldout, "held-out pairs for evaluation");
    p.add("noise", cfg.noise_std, "observation noise standard deviation");
    p.flag("identity-maps", cfg.identity_maps, "use identity observation maps (needs dx = dy = latent-dim)");
    p.add("pool-shift", cfg.pool_shift, "shift of the unpaired pool away from the paired data, in [0, 1]");
  }

  int run(const Common& common, const json& rc) {
    cfg.latent_dim = latent_dim;
    cfg.d_x = d_x;
    cfg.d_y = d_y;
    cfg.n_pairs = n_pairs;
    cfg.n_unpaired = n_unpaired;
    cfg.n_heldout = n_heldout;
    cfg.seed = common.seed;
    const SynthData data = make_synthetic(cfg);
    const fs::path out = prepare_out(common);
    json files = json::array();
    auto emit = [&](const char* name, const Matrix& m, const char* modality) {
      write_embeddings(out / name, EmbeddingMatrix(m), "synth", modality, rc);
      files.push_back(name);
    };
    emit("paired_x.semb", data.paired_x, "x");
    emit("paired_y.semb", data.paired_y, "y");
    emit("unpaired_x.semb", data.unpaired_x, "x");
    emit("unpaired_y.semb", data.unpaired_y, "y");
    if (cfg.n_heldout > 0) {
      emit("heldout_x.semb", data.heldout_x, "x");
      emit("heldout_y.semb", data.heldout_y, "y");
    }
    json manifest;
    manifest["files"] = files;
    manifest["run_config"] = rc;
    detail::write_json(out / "synth_manifest.json", manifest);
    std::cout << "wrote " << files.size() << " embedding files to " << out.string() << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// fit-teacher

struct TeacherFlags {
  std::string kind = "procrustes";
  int d_prime = 0;
  double lambda = 0.1;
  int contrastive_steps = 2000;
  double contrastive_lr = 1e-4;
  double contrastive_wd = 1e-5;
  std::string contrastive_loss = "siglip";

  void add(Params& p, const std::string& prefix) {
    p.add(prefix + "kind", kind, "teacher kind")
        ->check(CLI::IsMember({"procrustes", "cca", "contrastive"}));
    p.add("d-prime", d_prime, "teacher dimension (0: min(dx, dy), or 1024 for contrastive)");
    p.add("lambda", lambda, "CCA eigenvalue regularization");
    p.add("contrastive-steps", contrastive_steps, "training steps of the contrastive teacher");
    p.add("contrastive-lr", contrastive_lr, "peak learning rate of the contrastive teacher");
    p.add("contrastive-weight-decay", contrastive_wd, "weight decay of the contrastive teacher");
    p.add("contrastive-loss", contrastive_loss, "contrastive teacher loss")
        ->check(CLI::IsMember({"siglip", "infonce"}));
  }

  LinearTeacher fit(const PairedDataset& paired, std::uint64_t seed) const {
    if (d_prime < 0) throw UsageError("--d-prime must be non-negative");
    TeacherOptions opts;
    opts.d_prime = d_prime;
    opts.cca_lambda = lambda;
    opts.contrastive.steps = contrastive_steps;
    opts.contrastive.lr = contrastive_lr;
    opts.contrastive.weight_decay = contrastive_wd;
    opts.contrastive.loss = contrastive_loss == "infonce" ? ContrastiveLoss::infonce : ContrastiveLoss::siglip;
    opts.contrastive.seed = seed;
    return fit_teacher(paired, parse_teacher_kind(kind), opts);
  }
};

struct FitTeacherCmd {
  std::string paired_x, paired_y;
  TeacherFlags teacher;

  void add(Params& p) {
    p.add("paired-x", paired_x, "paired X embeddings (SEMB)");
    p.add("paired-y", paired_y, "paired Y embeddings (SEMB)");
    teacher.add(p, "");
  }

  int run(const Common& common, const json& rc) {
    const PairedDataset paired(require_embeddings(paired_x, "--paired-x"), require_embeddings(paired_y, "--paired-y"));
    const LinearTeacher t = teacher.fit(paired, common.seed);
    const fs::path out = prepare_out(common);
    const fs::path file = out / "teacher.sotc";
    save_teacher(file, t);

    json extra = teacher_summary(t);
    if (t.kind == TeacherKind::cca) extra["lambda"] = teacher.lambda;
    if (t.kind == TeacherKind::procrustes) {
      extra["orthonormality_error"] = std::max(max_identity_error(t.w_x * t.w_x.transpose()),
                                               max_identity_error(t.w_y * t.w_y.transpose()));
    } else if (t.kind == TeacherKind::cca) {
      const Matrix za = t.project_x(paired.a), zb = t.project_y(paired.b);
      extra["whitening_error"] =
          std::max(max_identity_error(za.transpose() * za), max_identity_error(zb.transpose() * zb));
    }
    extra["run_config"] = rc;
    write_container_manifest(file, to_container(t), extra);
    std::cout << "teacher " << to_string(t.kind) << " d'=" << t.d_prime() << " -> " << file.string() << "\n";
    for (const auto& w : t.warnings) std::cerr << "warning: " << w << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainCmd {
  std::string paired_x, paired_y, unpaired_x, unpaired_y, teacher_path;
  TeacherFlags teacher;
  TrainConfig cfg;
  std::string div = "klot";
  int sinkhorn_iters = 100;
  double sinkhorn_tol = 1e-6;
  std::size_t batch_unpaired = 256;
  int dim = 1024;

  void add(Params& p) {
    p.add("paired-x", paired_x, "paired X embeddings (SEMB)");
    p.add("paired-y", paired_y, "paired Y embeddings (SEMB)");
    p.add("unpaired-x", unpaired_x, "unpaired X pool (SEMB)");
    p.add("unpaired-y", unpaired_y, "unpaired Y pool (SEMB)");
    p.add("teacher", teacher_path, "fitted teacher file; when empty the teacher is fit here");
    teacher.add(p, "teacher-");
    p.add("alpha", cfg.alpha, "regularization weight (0: supervised baseline)");
    p.add("div", div, "divergence")->check(CLI::IsMember({"klot", "infonce", "cka"}));
    p.add("eps", cfg.div.epsilon, "temperature in the learned space");
    p.add("eps-star", cfg.div.epsilon_star, "temperature in the teacher space");
    p.add("sinkhorn-iters", sinkhorn_iters, "Sinkhorn iteration cap");
    p.add("sinkhorn-tol", sinkhorn_tol, "Sinkhorn marginal tolerance");
    p.add("steps", cfg.n_steps, "training steps");
    p.add("lr", cfg.lr_max, "peak learning rate (cosine schedule)");
    p.add("weight-decay", cfg.weight_decay, "LION weight decay on W_f, W_g");
    p.add("beta1", cfg.lion_beta1, "LION beta1");
    p.add("beta2", cfg.lion_beta2, "LION beta2");
    p.add("batch-paired", cfg.batch_paired, "paired rows per step (0: all)");
    p.add("batch-unpaired", batch_unpaired, "unpaired rows per side per step");
    p.add("dim", dim, "shared dimension d");
    p.flag("init-from-teacher", cfg.init_from_teacher, "start from the teacher maps when d = d'");
    p.add("siglip-scale", cfg.siglip_init.scale, "initial SigLIP logit scale");
    p.add("siglip-bias", cfg.siglip_init.bias, "initial SigLIP logit bias");
  }

  int run(const Common& common, const json& rc) {
    const PairedDataset paired(require_embeddings(paired_x, "--paired-x"), require_embeddings(paired_y, "--paired-y"));
    if (cfg.alpha > 0.0 && (unpaired_x.empty() || unpaired_y.empty()))
      throw UsageError("--unpaired-x and --unpaired-y are required when --alpha > 0");
    // The pool is never read when alpha = 0; the paired rows stand in as a placeholder.
    const UnpairedPool pool = cfg.alpha > 0.0 ? UnpairedPool{load_embeddings(unpaired_x), load_embeddings(unpaired_y)}
                                              : UnpairedPool{paired.a, paired.b};
    const LinearTeacher t = teacher_path.empty() ? teacher.fit(paired, common.seed) : load_teacher(teacher_path);

    cfg.div.kind = parse_divergence_kind(div);
    cfg.div.sinkhorn = SinkhornOptions{sinkhorn_tol, sinkhorn_iters};
    cfg.batch_unpaired_x = cfg.batch_unpaired_y = batch_unpaired;
    cfg.d = dim;
    cfg.seed = common.seed;
    const TrainReport report = train_with_teacher(paired, pool, t, cfg);

    const std::string label = cfg.alpha == 0.0 ? "supervised-baseline" : "sotalign-" + div;
    const fs::path out = prepare_out(common);
    {
      CsvWriter csv(out / "train_report.csv", rc, {"step", "lr", "supervised", "regularizer", "total"});
      for (const auto& s : report.steps)
        csv.row({std::to_string(s.step), num(s.lr), num(s.loss.supervised), num(s.loss.regularizer),
                 num(s.loss.total)});
    }
    const fs::path file = out / "aligner.sotc";
    save_aligner(file, report.aligner);
    json extra;
    extra["label"] = label;
    extra["run_config"] = rc;
    write_container_manifest(file, to_container(report.aligner), extra);

    json manifest;
    manifest["label"] = label;
    manifest["teacher"] = teacher_summary(t);
    const auto& last = report.steps.back().loss;
    manifest["final_loss"] = {{"supervised", last.supervised}, {"regularizer", last.regularizer}, {"total", last.total}};
    manifest["siglip"] = {{"scale", report.aligner.siglip.scale}, {"bias", report.aligner.siglip.bias}};
    manifest["run_config"] = rc;
    detail::write_json(out / "train_manifest.json", manifest);
    std::cout << label << ": " << report.steps.size() << " steps, final loss " << num(last.total) << ", "
              << report.wall_seconds << " s\n";
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// eval

struct EvalCmd {
  std::string img, txt, aligner_path, teacher_path, gt_path, prototypes, labels;
  std::vector<int> ks{1, 5, 10};

  void add(Params& p) {
    p.add("img", img, "image-side embeddings (SEMB)");
    p.add("txt", txt, "text-side embeddings (SEMB)");
    p.add("aligner", aligner_path, "aligner file; embeddings are used as-is when neither map is given");
    p.add("teacher", teacher_path, "evaluate a teacher's projections instead of an aligner");
    p.add("gt", gt_path, "CSV of image,text index pairs (default: row i matches row i)");
    p.add("ks", ks, "recall cutoffs")->delimiter(',');
    p.add("prototypes", prototypes, "class prototypes in the text space (SEMB)");
    p.add("labels", labels, "one class index per image row");
  }

  int run(const Common& common, const json& rc) {
    if (!aligner_path.empty() && !teacher_path.empty()) throw UsageError("give at most one of --aligner, --teacher");
    if (prototypes.empty() != labels.empty()) throw UsageError("--prototypes and --labels go together");
    const EmbeddingMatrix ei = require_embeddings(img, "--img");
    const EmbeddingMatrix et = require_embeddings(txt, "--txt");
    std::function<Matrix(const Matrix&)> fx = [](const Matrix& m) { return m; };
    std::function<Matrix(const Matrix&)> gy = fx;
    if (!aligner_path.empty()) {
      const Aligner a = load_aligner(aligner_path);
      fx = [a](const Matrix& m) { return a.embed_x(m); };
      gy = [a](const Matrix& m) { return a.embed_y(m); };
    } else if (!teacher_path.empty()) {
      const LinearTeacher t = load_teacher(teacher_path);
      fx = [t](const Matrix& m) { return t.project_x(m); };
      gy = [t](const Matrix& m) { return t.project_y(m); };
    }
    const Matrix zi = fx(ei.values()), zt = gy(et.values());
    const RecallReport r = retrieval_recall(zi, zt, load_ground_truth(gt_path, ei.rows(), et.rows()), ks);

    const fs::path out = prepare_out(common);
    json manifest;
    {
      CsvWriter csv(out / "eval_report.csv", rc, {"metric", "k", "value"});
      for (const auto& [k, v] : r.t2i_at) csv.row({"t2i_recall", std::to_string(k), num(v)});
      for (const auto& [k, v] : r.i2t_at) csv.row({"i2t_recall", std::to_string(k), num(v)});
      csv.row({"mean_r1", "1", num(r.mean_r1)});
      if (!prototypes.empty()) {
        const Matrix protos = gy(load_embeddings(prototypes).values());
        const double acc = zero_shot_classify(zi, protos, load_labels(labels));
        csv.row({"zero_shot_top1", "1", num(acc)});
        manifest["zero_shot_top1"] = acc;
      }
    }
    std::cout << "  K    T2I      I2T\n";
    for (const auto& [k, v] : r.t2i_at) {
      char line[64];
      std::snprintf(line, sizeof line, "%3d  %6.2f   %6.2f\n", k, v, r.i2t_at.at(k));
      std::cout << line;
    }
    std::cout << "MeanR@1 " << num(r.mean_r1) << "\n";
    manifest["mean_r1"] = r.mean_r1;
    json t2i, i2t;
    for (const auto& [k, v] : r.t2i_at) t2i[std::to_string(k)] = v;
    for (const auto& [k, v] : r.i2t_at) i2t[std::to_string(k)] = v;
    manifest["t2i"] = t2i;
    manifest["i2t"] = i2t;
    manifest["run_config"] = rc;
    detail::write_json(out / "eval_manifest.json", manifest);
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// shift

struct ShiftCmd {
  std::string pool_x, pool_y, paired_x, paired_y, dataset_x, dataset_y;
  int n_proj = 500;
  double p = 2.0;
  int knn_k = 10;

  void add(Params& params) {
    params.add("pool-x", pool_x, "unpaired X pool (SEMB)");
    params.add("pool-y", pool_y, "unpaired Y pool (SEMB)");
    params.add("paired-x", paired_x, "paired X embeddings (SEMB)");
    params.add("paired-y", paired_y, "paired Y embeddings (SEMB)");
    params.add("dataset-x", dataset_x, "label for the X side (default: pool file stem)");
    params.add("dataset-y", dataset_y, "label for the Y side (default: pool file stem)");
    params.add("n-proj", n_proj, "number of great-circle slices");
    params.add("p", p, "Wasserstein order");
    params.add("knn-k", knn_k, "mutual k-NN neighborhood size on the paired data (0: skip)");
  }

  int run(const Common& common, const json& rc) {
    const UnpairedPool pool{require_embeddings(pool_x, "--pool-x"), require_embeddings(pool_y, "--pool-y")};
    const PairedDataset paired(require_embeddings(paired_x, "--paired-x"), require_embeddings(paired_y, "--paired-y"));
    const ShiftReport r = total_ssw(pool, paired, n_proj, p, common.seed);
    const std::string lx = dataset_x.empty() ? fs::path(pool_x).stem().string() : dataset_x;
    const std::string ly = dataset_y.empty() ? fs::path(pool_y).stem().string() : dataset_y;

    const fs::path out = prepare_out(common);
    {
      CsvWriter csv(out / "shift_report.csv", rc,
                    {"dataset_x", "dataset_y", "ssw_x", "ssw_y", "total", "n_proj", "p", "seed"});
      csv.row({lx, ly, num(r.ssw_x), num(r.ssw_y), num(r.total), std::to_string(r.n_projections), num(r.p),
               std::to_string(r.seed)});
    }
    json manifest;
    manifest["ssw_x"] = r.ssw_x;
    manifest["ssw_y"] = r.ssw_y;
    manifest["total"] = r.total;
    if (knn_k > 0) manifest["mutual_knn"] = {{"k", knn_k}, {"score", mutual_knn(paired.a, paired.b, knn_k)}};
    manifest["run_config"] = rc;
    detail::write_json(out / "shift_manifest.json", manifest);
    std::cout << "total SSW " << num(r.total) << " (x " << num(r.ssw_x) << ", y " << num(r.ssw_y) << ")\n";
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// bench-grad

struct BenchGradCmd {
  int n = 256;
  double eps = 0.05;
  std::vector<int> iters{100, 1000};
  bool skip_unrolled = false;

  void add(Params& p) {
    p.add("n", n, "problem size");
    p.add("eps", eps, "entropic temperature");
    p.add("iters", iters, "Sinkhorn iteration counts")->delimiter(',');
    p.flag("skip-unrolled", skip_unrolled, "only count the unrolled tape, do not run it");
  }

  int run(const Common& common, const json& rc) {
    const auto rows = grad_cost_profile(n, eps, iters, common.seed, !skip_unrolled);
    const fs::path out = prepare_out(common);
    {
      CsvWriter csv(out / "grad_profile.csv", rc,
                    {"n", "epsilon", "iterations", "closed_form_floats", "unrolled_floats", "solve_ms", "grad_ms"});
      for (const auto& r : rows)
        csv.row({std::to_string(r.n), num(r.epsilon), std::to_string(r.iterations),
                 std::to_string(r.closed_form_floats), std::to_string(r.unrolled_floats), num(r.solve_ms),
                 num(r.grad_ms)});
    }
    bool constant = true;
    for (const auto& r : rows) constant = constant && r.closed_form_floats == rows.front().closed_form_floats;
    json manifest;
    manifest["closed_form_constant"] = constant;
    manifest["run_config"] = rc;
    detail::write_json(out / "grad_profile_manifest.json", manifest);
    for (const auto& r : rows)
      std::cout << "T=" << r.iterations << " closed-form floats " << r.closed_form_floats << ", unrolled floats "
                << r.unrolled_floats << "\n";
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sotalign: semi-supervised alignment of embedding spaces with a linear teacher and KLOT"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--seed", common.seed, "RNG seed")->capture_default_str();
  app.add_option("--out", common.out, "output directory")->capture_default_str();
  app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");

  SynthCmd synth;
  FitTeacherCmd fit;
  TrainCmd train;
  EvalCmd eval;
  ShiftCmd shift;
  BenchGradCmd bench;

  std::vector<std::pair<Params, std::function<int(const json&)>>> commands;
  auto add_command = [&](const char* name, const char* desc, auto& cmd) {
    Params params(app.add_subcommand(name, desc));
    cmd.add(params);
    commands.emplace_back(params, [&cmd, &common](const json& rc) { return cmd.run(common, rc); });
  };
  add_command("synth", "generate synthetic paired and unpaired embeddings", synth);
  add_command("fit-teacher", "fit a linear teacher on paired embeddings", fit);
  add_command("train", "train the aligner against a teacher", train);
  add_command("eval", "retrieval and zero-shot evaluation", eval);
  add_command("shift", "total spherical sliced Wasserstein between pool and paired data", shift);
  add_command("bench-grad", "memory and time of the closed-form vs unrolled KLOT gradient", bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  const auto config_opt = app.get_config_ptr();
  const std::string config_file = config_opt != nullptr && config_opt->count() > 0 ? config_opt->as<std::string>() : "";
  for (auto& [params, run] : commands) {
    if (!params.app()->parsed()) continue;
    try {
      return run(run_config(params.app()->get_name(), common, config_file, params));
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return kUsage;
    } catch (const ParameterError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return kUsage;
    } catch (const DivergenceError& e) {
      std::cerr << "numerical divergence: " << e.what() << "\n";
      return kNumericalDivergence;
    } catch (const SingularityError& e) {
      std::cerr << "numerical error: " << e.what() << "\n";
      return kNumericalDivergence;
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kDataFailure;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kDataFailure;
    }
  }
  return kUsage;
}
