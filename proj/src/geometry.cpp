#include "xspec/geometry.hpp"

#include "xspec/error.hpp"

#include <Eigen/LU>

#include <cmath>
#include <random>

namespace xspec {
namespace {

constexpr double kDetEpsilon = 1e-12;
constexpr double kInfinityEpsilon = 1e-12;

void require_image_size(int width, int height) {
  if (width < 2 || height < 2)
    throw Error(ErrorCode::DegenerateImageSize,
                "image must be at least 2x2, got " + std::to_string(width) + "x" +
                    std::to_string(height));
}

Eigen::Matrix3d translation_matrix(double tu, double tv) {
  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 2) = tu;
  t(1, 2) = tv;
  return t;
}

}  // namespace

Homography::Homography(const Eigen::Matrix3d& m, Frame frame) : m_(m), frame_(frame) {
  if (!m.allFinite()) throw Error(ErrorCode::NonFinite, "homography has non-finite entries");
  const double s = m(2, 2) != 0.0 ? m(2, 2) : m.cwiseAbs().maxCoeff();
  if (s == 0.0 || std::abs((m / s).determinant()) <= kDetEpsilon)
    throw Error(ErrorCode::NonInvertible, "homography is singular");
}

Homography Homography::translation(double tu, double tv, Frame frame) {
  return {translation_matrix(tu, tv), frame};
}

Homography Homography::inverse() const { return {m_.inverse(), frame_}; }

Eigen::Matrix3d Homography::scale_fixed() const {
  if (m_(2, 2) == 0.0) return m_;
  return m_ / m_(2, 2);
}

Homography Homography::operator*(const Homography& other) const {
  if (!(frame_ == other.frame_))
    throw Error(ErrorCode::FrameMismatch, "cannot compose homographies in different frames");
  return {m_ * other.m_, frame_};
}

Eigen::Vector2d transform_point(const Eigen::Matrix3d& m, const Eigen::Vector2d& p) {
  const Eigen::Vector3d q = m * p.homogeneous();
  if (std::abs(q.z()) < kInfinityEpsilon)
    throw Error(ErrorCode::NearInfinitePoint, "point maps to the line at infinity");
  return q.head<2>() / q.z();
}

PointSet transform_points(const Homography& h, const PointSet& p) {
  if (!(h.frame() == p.frame))
    throw Error(ErrorCode::FrameMismatch, "homography and points use different frames");
  PointSet out{Eigen::Matrix2Xd(2, p.size()), p.frame};
  for (Eigen::Index i = 0; i < p.size(); ++i)
    out.coords.col(i) = transform_point(h.matrix(), p.coords.col(i));
  return out;
}

Eigen::Matrix3d normalization_matrix(int width, int height) {
  require_image_size(width, height);
  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 0) = 2.0 / (width - 1);
  t(1, 1) = 2.0 / (height - 1);
  t(0, 2) = -1.0;
  t(1, 2) = -1.0;
  return t;
}

Homography normalize_homography(const Homography& h) {
  const Frame& f = h.frame();
  if (!f.is_pixel()) throw Error(ErrorCode::FrameMismatch, "homography is already normalized");
  const Eigen::Matrix3d t = normalization_matrix(f.width, f.height);
  return {t * h.matrix() * t.inverse(), Frame::normalized(f.width, f.height)};
}

Homography denormalize_homography(const Homography& h) {
  const Frame& f = h.frame();
  if (f.is_pixel()) throw Error(ErrorCode::FrameMismatch, "homography is already in pixels");
  const Eigen::Matrix3d t = normalization_matrix(f.width, f.height);
  return {t.inverse() * h.matrix() * t, Frame::pixel(f.width, f.height)};
}

PointSet normalize_points(const PointSet& p) {
  const Frame& f = p.frame;
  if (!f.is_pixel()) throw Error(ErrorCode::FrameMismatch, "points are already normalized");
  require_image_size(f.width, f.height);
  PointSet out{p.coords, Frame::normalized(f.width, f.height)};
  out.coords.row(0) = (2.0 / (f.width - 1)) * p.coords.row(0).array() - 1.0;
  out.coords.row(1) = (2.0 / (f.height - 1)) * p.coords.row(1).array() - 1.0;
  return out;
}

PointSet denormalize_points(const PointSet& p) {
  const Frame& f = p.frame;
  if (f.is_pixel()) throw Error(ErrorCode::FrameMismatch, "points are already in pixels");
  require_image_size(f.width, f.height);
  PointSet out{p.coords, Frame::pixel(f.width, f.height)};
  out.coords.row(0) = (p.coords.row(0).array() + 1.0) * (0.5 * (f.width - 1));
  out.coords.row(1) = (p.coords.row(1).array() + 1.0) * (0.5 * (f.height - 1));
  return out;
}

PointSet corner_set(int width, int height) {
  require_image_size(width, height);
  const double u = width - 1;
  const double v = height - 1;
  PointSet c{Eigen::Matrix2Xd(2, 4), Frame::pixel(width, height)};
  c.coords << 0, u, 0, u,
              0, 0, v, v;
  return c;
}

void HomographySamplerConfig::validate() const {
  auto fail = [](const char* msg) { throw Error(ErrorCode::InvalidConfig, msg); };
  if (!(max_translation_frac >= 0.0 && max_translation_frac < 1.0))
    fail("max_translation_frac must be in [0, 1)");
  if (!(max_rotation_rad >= 0.0 && max_rotation_rad <= M_PI))
    fail("max_rotation_rad must be in [0, pi]");
  if (!(scale_min > 0.0 && scale_min <= scale_max)) fail("scale range must satisfy 0 < min <= max");
  if (!(max_perspective >= 0.0)) fail("max_perspective must be nonnegative");
}

Homography sample_homography(const HomographySamplerConfig& cfg, int width, int height,
                             std::uint64_t seed) {
  cfg.validate();
  require_image_size(width, height);
  const double cu = 0.5 * (width - 1);
  const double cv = 0.5 * (height - 1);
  if (cfg.max_perspective * (cu + cv) >= 0.5)
    throw Error(ErrorCode::InvalidConfig, "max_perspective too large for the image size");

  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  const double tu = uniform(-cfg.max_translation_frac * width, cfg.max_translation_frac * width);
  const double tv = uniform(-cfg.max_translation_frac * height, cfg.max_translation_frac * height);
  const double theta = uniform(-cfg.max_rotation_rad, cfg.max_rotation_rad);
  const double scale = uniform(cfg.scale_min, cfg.scale_max);
  const double p1 = uniform(-cfg.max_perspective, cfg.max_perspective);
  const double p2 = uniform(-cfg.max_perspective, cfg.max_perspective);

  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  rotation(0, 0) = std::cos(theta);
  rotation(0, 1) = -std::sin(theta);
  rotation(1, 0) = std::sin(theta);
  rotation(1, 1) = std::cos(theta);
  Eigen::Matrix3d scaling = Eigen::Matrix3d::Identity();
  scaling(0, 0) = scale;
  scaling(1, 1) = scale;
  Eigen::Matrix3d perspective = Eigen::Matrix3d::Identity();
  perspective(2, 0) = p1;
  perspective(2, 1) = p2;

  const Eigen::Matrix3d m = translation_matrix(cu + tu, cv + tv) * rotation * scaling *
                            perspective * translation_matrix(-cu, -cv);
  return {m, Frame::pixel(width, height)};
}

double max_corner_displacement(const HomographySamplerConfig& cfg, int width, int height) {
  cfg.validate();
  const double hu = 0.5 * (width - 1);
  const double hv = 0.5 * (height - 1);
  const double radius = std::hypot(hu, hv);
  const double delta = cfg.max_perspective * (hu + hv);
  const double perspective_shift = radius * delta / (1.0 - delta);
  const double scale_dev = std::max(cfg.scale_max - 1.0, 1.0 - cfg.scale_min);
  const double rotation_shift = 2.0 * std::sin(0.5 * cfg.max_rotation_rad) * cfg.scale_max * radius;
  const double translation = cfg.max_translation_frac * std::hypot(width, height);
  return translation + cfg.scale_max * perspective_shift + rotation_shift + scale_dev * radius;
}

}  // namespace xspec
