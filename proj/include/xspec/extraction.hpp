#pragma once

#include "xspec/featuregrid.hpp"

#include <Eigen/Core>

#include <vector>

namespace xspec {

struct Keypoint {
  Eigen::Vector2d p = Eigen::Vector2d::Zero();  // pixels, (u, v)
  double score = 0.0;
  Eigen::VectorXd desc;  // unit length
};

struct SoftExtractConfig {
  int window = 8;
  double temperature = 0.01;

  void validate() const;
};

struct ClassicalExtractConfig {
  double detection_threshold = 0.015;
  int nms_radius = 4;    // Chebyshev distance
  int max_keypoints = 0;  // 0 = unlimited

  void validate() const;
};

/// Spatial soft-argmax over one window of a heatmap: sum_k softmax(h_k / T) x_k.
/// `weights` (optional) receives the softmax weights in row-major window order.
Eigen::Vector2d soft_argmax_window(const Heatmap& h, int top, int left, int window,
                                   double temperature, std::vector<double>* weights = nullptr);

/// One keypoint per non-overlapping window, in row-major window order.
std::vector<Keypoint> extract_soft(const Heatmap& h, const Grid3& descriptors,
                                   const SoftExtractConfig& cfg);
std::vector<Keypoint> extract_soft(const Heatmap& h, const DescriptorMap& d,
                                   const SoftExtractConfig& cfg);

/// Threshold, greedy non-maximum suppression by descending score (ties by
/// row-major index) and optional top-k cap. Descriptors are sampled at the
/// integer pixel location.
std::vector<Keypoint> extract_classical(const Heatmap& h, const DescriptorMap& d,
                                        const ClassicalExtractConfig& cfg);

}  // namespace xspec
