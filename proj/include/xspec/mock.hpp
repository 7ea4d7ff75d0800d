#pragma once

#include "xspec/featuregrid.hpp"
#include "xspec/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <vector>

namespace xspec {

/// Synthetic stand-in for network outputs: keypoints planted at known
/// source locations and their warped target locations.
struct MockFeatureConfig {
  int width = 640;
  int height = 512;
  int keypoints = 200;
  int descriptor_length = kDefaultDescriptorLength;
  /// Soft-argmax temperature the planted logits are encoded for.
  double temperature = 0.01;
  double peak = 0.2;    // heatmap probability at the strongest planted pixel
  double floor = 1e-6;  // heatmap probability elsewhere
  /// Planted points stay within this Chebyshev distance (px) of a cell center.
  double center_tolerance = 1.0;
  int placement_attempts = 8;
  double jitter_sigma = 0.0;      // px, applied to target locations
  double descriptor_noise = 0.0;  // per-component sigma before renormalization
  double outlier_fraction = 0.0;

  void validate() const;
};

struct MockFeatures {
  Homography h_gt;
  DetectionResponse src_det;
  DetectionResponse tgt_det;
  DescriptorMap src_desc;
  DescriptorMap tgt_desc;
  DetectorTarget src_labels;
  DetectorTarget tgt_labels;
  Eigen::Matrix2Xd src_points;  // planted, pixels
  Eigen::Matrix2Xd tgt_points;  // planted after jitter / outlier relocation
  std::vector<bool> outlier;
};

/// Logits of a cell whose soft-argmax at `temperature` is exactly `p`
/// (pixel position inside the cell, clamped to it): the bilinear weights of p
/// are encoded in the 2 x 2 pixel block around it.
void encode_keypoint(Grid3& logits, int row, int col, const Eigen::Vector2d& p, double temperature,
                     double peak, double floor);
/// Logits of a cell with every pixel at `floor` and the rest on the dustbin.
void encode_background(Grid3& logits, int row, int col, double floor);

/// Random unit vector of the given length.
Eigen::VectorXd random_unit_vector(int length, std::mt19937_64& rng);

/// Plants up to cfg.keypoints correspondences (fewer if placement fails)
/// consistent with h_gt (pixel frame, cfg.width x cfg.height).
MockFeatures generate_mock_features(const Homography& h_gt, const MockFeatureConfig& cfg,
                                    std::uint64_t seed);

}  // namespace xspec
