#pragma once

#include "xspec/extraction.hpp"
#include "xspec/geometry.hpp"
#include "xspec/matching.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

namespace xspec {

/// Sigmoid inlier score parameters: threshold a (pixels), sharpness b.
struct InlierConfig {
  double threshold = 50.0;
  double sharpness = 5.0;

  /// Threshold scaled linearly with the image diagonal, 50 px at 320 x 240.
  static InlierConfig for_image(int width, int height);
  void validate() const;
};

struct RansacConfig {
  int iterations = 2000;
  double inlier_threshold = 3.0;
  std::uint64_t seed = 0;
  bool weighted_sampling = false;
  unsigned threads = 1;

  void validate() const;
};

struct RefineConfig {
  int max_iterations = 100;
  double step_tolerance = 1e-10;
};

struct RegistrationDiagnostics {
  int ransac_iterations = 0;
  int ransac_best_iteration = -1;
  int inlier_count = 0;
  int refine_iterations = 0;
  double initial_cost = 0.0;  // summed squared reprojection error over inliers
  double final_cost = 0.0;
};

struct RegistrationResult {
  Homography h_est;
  std::vector<Match> matches;
  std::vector<int> inliers;
  RegistrationDiagnostics diagnostics;
};

/// 1 / (1 + exp(b (x / a - 1))).
double inlier_score(double x, const InlierConfig& cfg);

/// Product of source keypoint, pseudo-target keypoint, match and inlier scores.
double match_weight(const Match& m);

/// Sets score_in from the ground-truth reprojection error and weight from
/// the score product.
std::vector<Match> score_inliers_gt(std::vector<Match> matches, const Homography& h_gt,
                                    const InlierConfig& cfg);

/// Homography mapping src to tgt minimizing the weighted algebraic error.
/// Each correspondence's two DLT rows are scaled by its weight; both point
/// sets are Hartley-normalized with weighted statistics.
Homography weighted_dlt(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt,
                        const Eigen::VectorXd& weights, Frame frame);
Homography dlt(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt, Frame frame);

/// Forward reprojection errors |H src_i - tgt_i|; +inf for points sent to infinity.
Eigen::VectorXd reprojection_errors(const Eigen::Matrix3d& h, const Eigen::Matrix2Xd& src,
                                    const Eigen::Matrix2Xd& tgt);
double reprojection_cost(const Eigen::Matrix3d& h, const Eigen::Matrix2Xd& src,
                         const Eigen::Matrix2Xd& tgt);

struct RansacResult {
  Homography h;
  std::vector<int> inliers;
  int best_iteration = -1;
};

/// Four-point RANSAC with a final DLT refit on the consensus set. When
/// cfg.weighted_sampling is set, minimal samples are drawn with probability
/// proportional to `sampling_weights`. Iteration i draws from substream i of
/// cfg.seed, so results do not depend on cfg.threads.
RansacResult ransac(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt, Frame frame,
                    const RansacConfig& cfg,
                    const std::optional<Eigen::VectorXd>& sampling_weights = std::nullopt);

struct RefineResult {
  Homography h;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
};

/// Levenberg-Marquardt over the 8 free parameters minimizing summed squared
/// forward reprojection error.
RefineResult refine_dls(const Homography& h0, const Eigen::Matrix2Xd& src,
                        const Eigen::Matrix2Xd& tgt, const RefineConfig& cfg = {});

struct WeightedPipelineConfig {
  SoftExtractConfig extract;
  MatcherConfig match;
  RansacConfig ransac{.weighted_sampling = true};
};

struct ClassicalPipelineConfig {
  ClassicalExtractConfig extract;
  Similarity similarity = Similarity::Dot;
  RansacConfig ransac;
  RefineConfig refine;
};

/// Soft extraction, soft matching, weighted RANSAC with binary inlier scores,
/// then weighted DLT over the inliers.
RegistrationResult run_weighted_pipeline(const DetectionResponse& src_det,
                                         const DescriptorMap& src_desc,
                                         const DetectionResponse& tgt_det,
                                         const DescriptorMap& tgt_desc,
                                         const WeightedPipelineConfig& cfg);

/// Mutual nearest neighbours, RANSAC, damped least-squares refinement.
RegistrationResult run_classical_pipeline(const std::vector<Keypoint>& src,
                                          const std::vector<Keypoint>& tgt, int width, int height,
                                          const ClassicalPipelineConfig& cfg);

/// Classical extraction on both maps followed by run_classical_pipeline.
RegistrationResult run_classical_pipeline(const DetectionResponse& src_det,
                                          const DescriptorMap& src_desc,
                                          const DetectionResponse& tgt_det,
                                          const DescriptorMap& tgt_desc,
                                          const ClassicalPipelineConfig& cfg);

}  // namespace xspec
