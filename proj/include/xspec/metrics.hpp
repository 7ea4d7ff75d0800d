#pragma once

#include "xspec/geometry.hpp"
#include "xspec/matching.hpp"

#include <Eigen/Core>

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace xspec {

struct MetricsConfig {
  std::vector<double> ace_thresholds{2.0, 5.0, 10.0, 25.0};
  double correct_dist = 3.0;
  int eval_width = 640;
  int eval_height = 512;

  void validate() const;
};

/// Average corner error: mean over the four image corners p of
/// |p - (Hest^-1 H) p|. Image size comes from the ground-truth frame.
double ace(const Homography& h_gt, const Homography& h_est);

/// Fraction of values strictly below each threshold.
std::vector<double> success_fractions(const std::vector<double>& ace_values,
                                      const std::vector<double>& thresholds);

/// Symmetric repeatability of detections a (source) and b (target) under
/// h_gt (source to target, pixel frame). Points that leave the other image are
/// dropped; a point repeats if a counterpart lies within correct_dist.
double repeatability(const Eigen::Matrix2Xd& a, const Eigen::Matrix2Xd& b, const Homography& h_gt,
                     double correct_dist);

bool is_correct_match(const Homography& h_gt, const Eigen::Vector2d& src,
                      const Eigen::Vector2d& tgt, double correct_dist);

/// Correct in-view matches divided by the smaller in-view detection count.
double matching_score(const Eigen::Matrix2Xd& a, const Eigen::Matrix2Xd& b,
                      const std::vector<IndexMatch>& matches, const Homography& h_gt,
                      double correct_dist);

/// Correct matches over reported matches; 0 when nothing was reported.
double mma(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt, const Homography& h_gt,
           double correct_dist);

struct ScoredCandidate {
  double score = 0.0;
  bool correct = false;
};

/// Area under the precision-recall curve of candidates ranked by descending
/// score (stable for ties), by trapezoidal integration starting from
/// (recall 0, precision 1). Recall is relative to the correct candidates in
/// the pool; 0 when there are none.
double mean_ap(std::vector<ScoredCandidate> candidates);

/// Per-pair evaluation record.
struct PairEvaluation {
  double ace = 0.0;  // +inf on failure
  bool failed = false;
  std::optional<double> repeatability;
  std::optional<double> mscore;
  std::optional<double> mma;
  std::optional<double> detections;  // mean over the two images
  std::vector<ScoredCandidate> candidates;
};

struct MetricsReport {
  std::vector<double> ace_values;
  std::vector<double> thresholds;
  std::vector<double> success;
  int pairs = 0;
  int failures = 0;
  std::optional<double> repeatability;
  std::optional<double> mscore;
  std::optional<double> mma;
  std::optional<double> map;
  std::optional<double> n_k;
};

/// Per-image averages for repeatability, M-score, MMA and N_K; mAP pooled
/// over all candidates.
MetricsReport aggregate(const std::vector<PairEvaluation>& pairs, const MetricsConfig& cfg);

/// CSV header and one row per report, columns: method, pipeline, pairs,
/// failures, one column per ACE threshold, rep, ms, mma, map, n_k.
void write_metrics_csv(std::ostream& out, const std::vector<std::string>& labels_method,
                       const std::vector<std::string>& labels_pipeline,
                       const std::vector<MetricsReport>& reports);

}  // namespace xspec
