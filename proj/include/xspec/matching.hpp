#pragma once

#include "xspec/extraction.hpp"

#include <Eigen/Core>

#include <vector>

namespace xspec {

struct Match {
  Keypoint src;
  Keypoint pseudo_tgt;
  double score_m = 0.0;
  double score_in = 0.0;
  double weight = 0.0;
  int src_index = -1;
  int tgt_index = -1;  // -1 for soft (pseudo-target) matches
};

struct MatcherConfig {
  double temperature = 0.01;

  void validate() const;
};

enum class Similarity { Zncc, Dot };

/// Zero-mean, unit-norm copy of d. Throws ZeroVariance when the per-element
/// variance after mean removal is at most 1e-12.
Eigen::VectorXd zncc_normalize(const Eigen::VectorXd& d);

/// Zero-normalized cross-correlation in [-1, 1].
double zncc(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// (zncc(a, b) + 1) / 2.
double match_score(const Eigen::VectorXd& d_src, const Eigen::VectorXd& d_pseudo);

/// Pseudo-target per source keypoint: softmax_j((zncc_ij + 1) / tau) weighted
/// sum of target locations, with score and descriptor resampled from the
/// target maps and score_m from the resampled descriptor. score_in and
/// weight are left at zero.
std::vector<Match> soft_match(const std::vector<Keypoint>& src, const std::vector<Keypoint>& tgt,
                              const Heatmap& tgt_heatmap, const Grid3& tgt_descriptors,
                              const MatcherConfig& cfg);

/// N_src x N_tgt similarity table.
Eigen::MatrixXd similarity_matrix(const std::vector<Keypoint>& src,
                                  const std::vector<Keypoint>& tgt, Similarity sim);

struct IndexMatch {
  int src = -1;
  int tgt = -1;
  double similarity = 0.0;
};

/// Mutual nearest neighbours under `sim`; ties resolve to the lowest index.
std::vector<IndexMatch> mutual_nn(const std::vector<Keypoint>& src,
                                  const std::vector<Keypoint>& tgt, Similarity sim);

}  // namespace xspec
