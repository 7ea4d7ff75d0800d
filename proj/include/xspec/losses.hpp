#pragma once

#include "xspec/featuregrid.hpp"
#include "xspec/geometry.hpp"

#include <Eigen/Core>

#include <array>

namespace xspec {

struct LossWeights {
  double corner = 0.0;
  double frobenius = 0.0;
  double transfer = 1.0;
  double descriptor = 1.0;
  double detector = 1.0;

  void validate() const;
};

struct LossTerms {
  double corner = 0.0;
  double frobenius = 0.0;
  double transfer = 0.0;
  double descriptor = 0.0;
  double detector = 0.0;
};

struct RobustConfig {
  double alpha = 0.1;
};

struct DescriptorLossConfig {
  double positive_margin = 1.0;
  double negative_margin = 0.2;
  double positive_weight = 250.0;
  double correspondence_radius = 4.0;  // pixels, half a cell

  void validate() const;
};

struct DetectorLossWeights {
  std::array<double, kDetectorChannels> w;

  /// 64/65 for keypoint classes, 1/65 for the dustbin.
  static DetectorLossWeights defaults();
  static DetectorLossWeights uniform();
};

/// Welsch penalty 1 - exp(-(e/alpha)^2 / 2).
double welsch(double e, double alpha);
/// d welsch / d e = (e / alpha^2) exp(-(e/alpha)^2 / 2).
double welsch_derivative(double e, double alpha);

/// Robust reprojection error of the normalized corners under H^-1 Hest and
/// Hest^-1 H, averaged over all 16 entries.
double corner_loss(const Homography& h_gt_norm, const Homography& h_est_norm, double alpha);

/// Robust deviation of H^-1 Hest and Hest^-1 H from the identity, averaged
/// over all 18 entries. Both inputs are scale-fixed (m22 = 1) first.
double frobenius_loss(const Homography& h_gt_norm, const Homography& h_est_norm, double alpha);

/// Robust forward (H src - tgt) and inverse (H^-1 tgt - src) transfer errors
/// in normalized coordinates, averaged over all 4 N entries.
double transfer_loss(const Homography& h_gt_norm, const Eigen::Matrix2Xd& src_norm,
                     const Eigen::Matrix2Xd& tgt_norm, double alpha);
/// As above, also writing d loss / d src_norm and d loss / d tgt_norm.
double transfer_loss(const Homography& h_gt_norm, const Eigen::Matrix2Xd& src_norm,
                     const Eigen::Matrix2Xd& tgt_norm, double alpha, Eigen::Matrix2Xd* grad_src,
                     Eigen::Matrix2Xd* grad_tgt);

/// Binary cell correspondence: the source cell center warped by h_gt (pixels)
/// lies within cfg.correspondence_radius of the target cell center.
Eigen::MatrixXd cell_correspondence(const Homography& h_gt, int rows, int cols,
                                    const DescriptorLossConfig& cfg);

/// Contrastive hinge loss over every source/target cell pair, averaged.
double descriptor_loss(const Grid3& src, const Grid3& tgt, const Homography& h_gt,
                       const DescriptorLossConfig& cfg);
/// Same loss with a precomputed correspondence table; gradients w.r.t. the
/// raw grid entries are accumulated into the optional outputs.
double descriptor_loss(const Grid3& src, const Grid3& tgt, const Eigen::MatrixXd& correspondence,
                       const DescriptorLossConfig& cfg, Grid3* grad_src = nullptr,
                       Grid3* grad_tgt = nullptr);

/// Weighted categorical cross-entropy averaged over the cells of both images.
double detector_loss(const Grid3& src_logits, const Grid3& tgt_logits,
                     const DetectorTarget& src_labels, const DetectorTarget& tgt_labels,
                     const DetectorLossWeights& w);
/// Same loss, accumulating gradients w.r.t. the logits into the optional outputs.
double detector_loss(const Grid3& src_logits, const Grid3& tgt_logits,
                     const DetectorTarget& src_labels, const DetectorTarget& tgt_labels,
                     const DetectorLossWeights& w, Grid3* grad_src, Grid3* grad_tgt);

/// Weighted sum of the five terms. Throws NonFinite.
double total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace xspec
