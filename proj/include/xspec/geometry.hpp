#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>

namespace xspec {

/// Coordinate frame of a homography or point set. Pixel coordinates have the
/// origin at the top-left pixel center, u = column and v = row. Normalized
/// coordinates map [0, W-1] x [0, H-1] onto [-1, 1]^2; the originating image
/// size is kept so the conversion can be undone.
struct Frame {
  enum class Kind { Pixel, Normalized };

  Kind kind = Kind::Pixel;
  int width = 0;
  int height = 0;

  static Frame pixel(int width, int height) { return {Kind::Pixel, width, height}; }
  static Frame normalized(int width, int height) { return {Kind::Normalized, width, height}; }

  bool is_pixel() const { return kind == Kind::Pixel; }
  bool operator==(const Frame&) const = default;
};

/// Invertible 3x3 projective transform. Stored unnormalized.
class Homography {
 public:
  Homography(const Eigen::Matrix3d& m, Frame frame);

  static Homography identity(Frame frame) { return {Eigen::Matrix3d::Identity(), frame}; }
  static Homography translation(double tu, double tv, Frame frame);

  const Eigen::Matrix3d& matrix() const { return m_; }
  const Frame& frame() const { return frame_; }

  Homography inverse() const;

  /// Matrix rescaled so that m(2,2) == 1 (unchanged when m(2,2) == 0).
  Eigen::Matrix3d scale_fixed() const;

  /// this * other; both must share a frame.
  Homography operator*(const Homography& other) const;

 private:
  Eigen::Matrix3d m_;
  Frame frame_;
};

/// 2xN point set; column i is (u_i, v_i).
struct PointSet {
  Eigen::Matrix2Xd coords;
  Frame frame;

  Eigen::Index size() const { return coords.cols(); }
};

/// Dehomogenized m * [p; 1]. Throws NearInfinitePoint when |w| < 1e-12.
Eigen::Vector2d transform_point(const Eigen::Matrix3d& m, const Eigen::Vector2d& p);

PointSet transform_points(const Homography& h, const PointSet& p);

/// T with T * [u, v, 1]^T = [2u/(W-1) - 1, 2v/(H-1) - 1, 1]^T.
Eigen::Matrix3d normalization_matrix(int width, int height);

Homography normalize_homography(const Homography& h);
Homography denormalize_homography(const Homography& h);
PointSet normalize_points(const PointSet& p);
PointSet denormalize_points(const PointSet& p);

/// {(0,0), (W-1,0), (0,H-1), (W-1,H-1)} in pixel coordinates.
PointSet corner_set(int width, int height);

struct HomographySamplerConfig {
  double max_translation_frac = 0.1;
  double max_rotation_rad = 0.2617993877991494;  // 15 degrees
  double scale_min = 0.85;
  double scale_max = 1.15;
  double max_perspective = 1e-4;  // per pixel

  /// Throws InvalidConfig on out-of-range values.
  void validate() const;
};

/// Draws translation * rotation * scale * perspective, with rotation, scale
/// and perspective acting about the image center. Deterministic in `seed`.
Homography sample_homography(const HomographySamplerConfig& cfg, int width, int height,
                             std::uint64_t seed);

/// Upper bound on the displacement of any image corner under a homography
/// drawn by sample_homography with this configuration.
double max_corner_displacement(const HomographySamplerConfig& cfg, int width, int height);

}  // namespace xspec
