#include "xspec/losses.hpp"

#include "xspec/error.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>

namespace xspec {
namespace {

void require_normalized(const Homography& h) {
  if (h.frame().is_pixel())
    throw Error(ErrorCode::FrameMismatch, "task losses expect normalized homographies");
}

Eigen::Matrix2Xd normalized_corners() {
  Eigen::Matrix2Xd c(2, 4);
  c << -1, 1, -1, 1,
       -1, -1, 1, 1;
  return c;
}

Eigen::Matrix2d projective_jacobian(const Eigen::Matrix3d& m, const Eigen::Vector2d& x,
                                    Eigen::Vector2d& y) {
  const Eigen::Vector3d q = m * x.homogeneous();
  if (std::abs(q.z()) < 1e-12) throw Error(ErrorCode::NearInfinitePoint, "point maps to infinity");
  y = q.head<2>() / q.z();
  return (m.topLeftCorner<2, 2>() - y * m.block<1, 2>(2, 0)) / q.z();
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {corner, frobenius, transfer, descriptor, detector})
    if (!(w >= 0.0) || !std::isfinite(w))
      throw Error(ErrorCode::InvalidConfig, "loss weights must be finite and nonnegative");
}

void DescriptorLossConfig::validate() const {
  if (!(positive_margin > negative_margin && negative_margin >= 0.0 && positive_weight > 0.0))
    throw Error(ErrorCode::InvalidConfig, "descriptor loss needs m_P > m_N >= 0 and lambda_P > 0");
}

DetectorLossWeights DetectorLossWeights::defaults() {
  DetectorLossWeights d;
  d.w.fill(64.0 / 65.0);
  d.w[kDustbin] = 1.0 / 65.0;
  return d;
}

DetectorLossWeights DetectorLossWeights::uniform() {
  DetectorLossWeights d;
  d.w.fill(1.0);
  return d;
}

double welsch(double e, double alpha) {
  const double r = e / alpha;
  return -std::expm1(-0.5 * r * r);
}

double welsch_derivative(double e, double alpha) {
  const double r = e / alpha;
  return r / alpha * std::exp(-0.5 * r * r);
}

double corner_loss(const Homography& h_gt_norm, const Homography& h_est_norm, double alpha) {
  require_normalized(h_gt_norm);
  require_normalized(h_est_norm);
  const Eigen::Matrix3d fwd = h_gt_norm.matrix().inverse() * h_est_norm.matrix();
  const Eigen::Matrix3d inv = h_est_norm.matrix().inverse() * h_gt_norm.matrix();
  const Eigen::Matrix2Xd c = normalized_corners();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < 4; ++i) {
    const Eigen::Vector2d e = c.col(i) - transform_point(fwd, c.col(i));
    const Eigen::Vector2d e2 = c.col(i) - transform_point(inv, c.col(i));
    sum += welsch(e.x(), alpha) + welsch(e.y(), alpha) + welsch(e2.x(), alpha) + welsch(e2.y(), alpha);
  }
  return sum / 16.0;
}

double frobenius_loss(const Homography& h_gt_norm, const Homography& h_est_norm, double alpha) {
  require_normalized(h_gt_norm);
  require_normalized(h_est_norm);
  const Eigen::Matrix3d g = h_gt_norm.scale_fixed();
  const Eigen::Matrix3d e = h_est_norm.scale_fixed();
  const Eigen::Matrix3d fwd = g.inverse() * e - Eigen::Matrix3d::Identity();
  const Eigen::Matrix3d inv = e.inverse() * g - Eigen::Matrix3d::Identity();
  double sum = 0.0;
  for (int i = 0; i < 9; ++i) sum += welsch(fwd(i), alpha) + welsch(inv(i), alpha);
  return sum / 18.0;
}

double transfer_loss(const Homography& h_gt_norm, const Eigen::Matrix2Xd& src_norm,
                     const Eigen::Matrix2Xd& tgt_norm, double alpha) {
  return transfer_loss(h_gt_norm, src_norm, tgt_norm, alpha, nullptr, nullptr);
}

double transfer_loss(const Homography& h_gt_norm, const Eigen::Matrix2Xd& src_norm,
                     const Eigen::Matrix2Xd& tgt_norm, double alpha, Eigen::Matrix2Xd* grad_src,
                     Eigen::Matrix2Xd* grad_tgt) {
  require_normalized(h_gt_norm);
  const Eigen::Index n = src_norm.cols();
  if (tgt_norm.cols() != n) throw Error(ErrorCode::ShapeMismatch, "match point counts differ");
  if (n == 0) throw Error(ErrorCode::EmptyMatches, "transfer loss needs at least one match");
  const Eigen::Matrix3d h = h_gt_norm.matrix();
  const Eigen::Matrix3d h_inv = h.inverse();
  const double scale = 1.0 / (4.0 * static_cast<double>(n));
  if (grad_src) grad_src->setZero(2, n);
  if (grad_tgt) grad_tgt->setZero(2, n);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Vector2d y, z;
    const Eigen::Matrix2d jf = projective_jacobian(h, src_norm.col(i), y);
    const Eigen::Matrix2d ji = projective_jacobian(h_inv, tgt_norm.col(i), z);
    const Eigen::Vector2d ef = y - tgt_norm.col(i);
    const Eigen::Vector2d ei = z - src_norm.col(i);
    sum += welsch(ef.x(), alpha) + welsch(ef.y(), alpha) + welsch(ei.x(), alpha) + welsch(ei.y(), alpha);
    if (grad_src || grad_tgt) {
      const Eigen::Vector2d gf(welsch_derivative(ef.x(), alpha), welsch_derivative(ef.y(), alpha));
      const Eigen::Vector2d gi(welsch_derivative(ei.x(), alpha), welsch_derivative(ei.y(), alpha));
      if (grad_src) grad_src->col(i) = scale * (jf.transpose() * gf - gi);
      if (grad_tgt) grad_tgt->col(i) = scale * (ji.transpose() * gi - gf);
    }
  }
  return sum * scale;
}

Eigen::MatrixXd cell_correspondence(const Homography& h_gt, int rows, int cols,
                                    const DescriptorLossConfig& cfg) {
  if (!h_gt.frame().is_pixel())
    throw Error(ErrorCode::FrameMismatch, "correspondence needs a pixel-frame homography");
  const double center = 0.5 * (kCellSize - 1);
  const int reach = static_cast<int>(std::ceil(cfg.correspondence_radius / kCellSize)) + 1;
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(rows * cols, rows * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const Eigen::Vector3d q =
          h_gt.matrix() * Eigen::Vector3d(kCellSize * j + center, kCellSize * i + center, 1.0);
      if (std::abs(q.z()) < 1e-12) continue;
      const Eigen::Vector2d w = q.head<2>() / q.z();
      const int ci = static_cast<int>(std::lround((w.y() - center) / kCellSize));
      const int cj = static_cast<int>(std::lround((w.x() - center) / kCellSize));
      for (int ti = std::max(0, ci - reach); ti <= std::min(rows - 1, ci + reach); ++ti)
        for (int tj = std::max(0, cj - reach); tj <= std::min(cols - 1, cj + reach); ++tj) {
          const Eigen::Vector2d t(kCellSize * tj + center, kCellSize * ti + center);
          if ((w - t).norm() <= cfg.correspondence_radius) c(i * cols + j, ti * cols + tj) = 1.0;
        }
    }
  return c;
}

double descriptor_loss(const Grid3& src, const Grid3& tgt, const Homography& h_gt,
                       const DescriptorLossConfig& cfg) {
  if (!src.same_shape(tgt)) throw Error(ErrorCode::ShapeMismatch, "descriptor maps differ in shape");
  return descriptor_loss(src, tgt, cell_correspondence(h_gt, src.rows, src.cols, cfg), cfg);
}

double descriptor_loss(const Grid3& src, const Grid3& tgt, const Eigen::MatrixXd& correspondence,
                       const DescriptorLossConfig& cfg, Grid3* grad_src, Grid3* grad_tgt) {
  cfg.validate();
  if (!src.same_shape(tgt)) throw Error(ErrorCode::ShapeMismatch, "descriptor maps differ in shape");
  const Eigen::Index n = static_cast<Eigen::Index>(src.rows) * src.cols;
  if (correspondence.rows() != n || correspondence.cols() != n)
    throw Error(ErrorCode::ShapeMismatch, "correspondence table does not match the grids");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> s(src.data.data(), n, src.channels);
  const Eigen::Map<const RowMat> t(tgt.data.data(), n, tgt.channels);
  const Eigen::MatrixXd dots = s * t.transpose();
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  const bool want_grad = grad_src || grad_tgt;
  Eigen::MatrixXd g = want_grad ? Eigen::MatrixXd(n, n) : Eigen::MatrixXd();
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double c = correspondence(i, j);
      const double d = dots(i, j);
      sum += (1.0 - c) * std::max(0.0, d - cfg.negative_margin) +
             cfg.positive_weight * c * std::max(0.0, cfg.positive_margin - d);
      if (want_grad)
        g(i, j) = scale * ((1.0 - c) * (d > cfg.negative_margin ? 1.0 : 0.0) -
                           cfg.positive_weight * c * (d < cfg.positive_margin ? 1.0 : 0.0));
    }
  if (grad_src) {
    if (!grad_src->same_shape(src)) *grad_src = Grid3(src.rows, src.cols, src.channels);
    Eigen::Map<RowMat>(grad_src->data.data(), n, src.channels) += g * t;
  }
  if (grad_tgt) {
    if (!grad_tgt->same_shape(tgt)) *grad_tgt = Grid3(tgt.rows, tgt.cols, tgt.channels);
    Eigen::Map<RowMat>(grad_tgt->data.data(), n, tgt.channels) += g.transpose() * s;
  }
  return sum * scale;
}

double detector_loss(const Grid3& src_logits, const Grid3& tgt_logits,
                     const DetectorTarget& src_labels, const DetectorTarget& tgt_labels,
                     const DetectorLossWeights& w) {
  return detector_loss(src_logits, tgt_logits, src_labels, tgt_labels, w, nullptr, nullptr);
}

double detector_loss(const Grid3& src_logits, const Grid3& tgt_logits,
                     const DetectorTarget& src_labels, const DetectorTarget& tgt_labels,
                     const DetectorLossWeights& w, Grid3* grad_src, Grid3* grad_tgt) {
  for (const auto* pair : {&src_logits, &tgt_logits})
    if (pair->channels != kDetectorChannels)
      throw Error(ErrorCode::ShapeMismatch, "detector logits must have 65 channels");
  if (src_logits.rows != src_labels.rows || src_logits.cols != src_labels.cols ||
      tgt_logits.rows != tgt_labels.rows || tgt_logits.cols != tgt_labels.cols)
    throw Error(ErrorCode::ShapeMismatch, "labels do not match the logit grids");
  const double cells = static_cast<double>(src_logits.rows) * src_logits.cols +
                       static_cast<double>(tgt_logits.rows) * tgt_logits.cols;
  double sum = 0.0;
  auto accumulate = [&](const Grid3& logits, const DetectorTarget& labels, Grid3* grad) {
    if (grad && !grad->same_shape(logits)) *grad = Grid3(logits.rows, logits.cols, logits.channels);
    double p[kDetectorChannels];
    for (int r = 0; r < logits.rows; ++r)
      for (int c = 0; c < logits.cols; ++c) {
        const int y = labels.label(r, c);
        if (y < 0 || y >= kDetectorChannels) throw Error(ErrorCode::ShapeMismatch, "label out of range");
        const auto x = logits.cell(r, c);
        const double mx = *std::max_element(x.begin(), x.end());
        double z = 0.0;
        for (int k = 0; k < kDetectorChannels; ++k) z += (p[k] = std::exp(x[k] - mx));
        sum += -w.w[y] * (x[y] - mx - std::log(z));
        if (grad) {
          auto g = grad->cell(r, c);
          for (int k = 0; k < kDetectorChannels; ++k)
            g[k] += w.w[y] / cells * (p[k] / z - (k == y ? 1.0 : 0.0));
        }
      }
  };
  accumulate(src_logits, src_labels, grad_src);
  accumulate(tgt_logits, tgt_labels, grad_tgt);
  return sum / cells;
}

double total_loss(const LossTerms& t, const LossWeights& w) {
  w.validate();
  for (double v : {t.corner, t.frobenius, t.transfer, t.descriptor, t.detector})
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "loss term is not finite");
  return w.corner * t.corner + w.frobenius * t.frobenius + w.transfer * t.transfer +
         w.descriptor * t.descriptor + w.detector * t.detector;
}

}  // namespace xspec
