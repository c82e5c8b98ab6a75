#ifndef SOTALIGN_EVAL_HPP
#define SOTALIGN_EVAL_HPP

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"

namespace sotalign {

struct RecallReport {
  std::map<int, double> t2i_at;  // K -> recall percent
  std::map<int, double> i2t_at;
  double mean_r1 = 0.0;
};

/// Image i -> text rows that caption it.
using GroundTruth = std::vector<std::vector<Index>>;

inline GroundTruth identity_ground_truth(Index n) {
  GroundTruth gt(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) gt[static_cast<std::size_t>(i)] = {i};
  return gt;
}

namespace detail {

/// 0-based rank of `target` in row `q` of `sim`; ties go to the lower index.
inline Index rank_of(const Matrix& sim, Index q, Index target) {
  const double s = sim(q, target);
  Index rank = 0;
  for (Index j = 0; j < sim.cols(); ++j) {
    const double v = sim(q, j);
    if (v > s || (v == s && j < target)) ++rank;
  }
  return rank;
}

}  // namespace detail

/// Recall@K in both directions by cosine similarity.
///
/// An image query hits when any of its captions ranks in the top K; a text query has
/// exactly one valid image. MeanR@1 is the average of the two R@1 values.
inline RecallReport retrieval_recall(const Matrix& z_img, const Matrix& z_txt, const GroundTruth& gt,
                                     const std::vector<int>& ks) {
  if (static_cast<Index>(gt.size()) != z_img.rows())
    throw DimensionError("retrieval_recall: ground truth must list every image");
  std::vector<Index> image_of(static_cast<std::size_t>(z_txt.rows()), -1);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i].empty()) throw ParameterError("retrieval_recall: image " + std::to_string(i) + " has no caption");
    for (const Index t : gt[i]) {
      if (t < 0 || t >= z_txt.rows()) throw ParameterError("retrieval_recall: caption index out of range");
      image_of[static_cast<std::size_t>(t)] = static_cast<Index>(i);
    }
  }
  const Matrix sim = detail::cosine_affinity(z_img, z_txt);  // images x texts
  const Matrix sim_t = sim.transpose();

  std::vector<Index> i2t_rank(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    Index best = sim.cols();
    for (const Index t : gt[i]) best = std::min(best, detail::rank_of(sim, static_cast<Index>(i), t));
    i2t_rank[i] = best;
  }
  std::vector<Index> t2i_rank;
  for (Index t = 0; t < z_txt.rows(); ++t)
    if (image_of[static_cast<std::size_t>(t)] >= 0)
      t2i_rank.push_back(detail::rank_of(sim_t, t, image_of[static_cast<std::size_t>(t)]));

  auto recall = [](const std::vector<Index>& ranks, int k) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](Index r) { return r < k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
  };
  RecallReport out;
  std::vector<int> all_ks = ks;
  if (std::find(all_ks.begin(), all_ks.end(), 1) == all_ks.end()) all_ks.push_back(1);
  for (const int k : all_ks) {
    if (k < 1) throw ParameterError("retrieval_recall: K must be positive");
    out.i2t_at[k] = recall(i2t_rank, k);
    out.t2i_at[k] = recall(t2i_rank, k);
  }
  out.mean_r1 = (out.t2i_at[1] + out.i2t_at[1]) / 2.0;
  return out;
}

/// Top-1 accuracy (percent) of nearest-prototype classification by cosine similarity.
inline double zero_shot_classify(const Matrix& z_img, const Matrix& prototypes, const std::vector<Index>& labels) {
  if (static_cast<Index>(labels.size()) != z_img.rows())
    throw DimensionError("zero_shot_classify: one label per image required");
  for (const Index l : labels)
    if (l < 0 || l >= prototypes.rows()) throw ParameterError("zero_shot_classify: label out of range");
  const Matrix sim = detail::cosine_affinity(z_img, prototypes);
  Index correct = 0;
  for (Index i = 0; i < sim.rows(); ++i) {
    Index arg = 0;
    for (Index c = 1; c < sim.cols(); ++c)
      if (sim(i, c) > sim(i, arg)) arg = c;
    if (arg == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(sim.rows());
}

}  // namespace sotalign

#endif  // SOTALIGN_EVAL_HPP
