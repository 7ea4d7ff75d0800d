#include "xspec/gradients.hpp"

#include "xspec/error.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <limits>
#include <random>

namespace xspec {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_shapes(const PipelineParams& p) {
  if (p.src_logits.channels != kDetectorChannels || !p.src_logits.same_shape(p.tgt_logits))
    throw Error(ErrorCode::ShapeMismatch, "logit grids must share a (rows, cols, 65) shape");
  if (!p.src_desc.same_shape(p.tgt_desc) || p.src_desc.rows != p.src_logits.rows ||
      p.src_desc.cols != p.src_logits.cols)
    throw Error(ErrorCode::ShapeMismatch, "descriptor grids must match the logit grid layout");
}

Grid3 cell_softmax(const Grid3& logits) {
  Grid3 prob(logits.rows, logits.cols, logits.channels);
  for (int r = 0; r < logits.rows; ++r)
    for (int c = 0; c < logits.cols; ++c) {
      const auto x = logits.cell(r, c);
      auto y = prob.cell(r, c);
      const double mx = *std::max_element(x.begin(), x.end());
      double sum = 0.0;
      for (int k = 0; k < logits.channels; ++k) sum += (y[k] = std::exp(x[k] - mx));
      for (int k = 0; k < logits.channels; ++k) y[k] /= sum;
    }
  return prob;
}

void forward_side(const Grid3& logits, const Grid3& desc, const SoftExtractConfig& cfg,
                  PipelineTape::Side& s) {
  s.prob = cell_softmax(logits);
  s.heat = decode_heatmap(logits);
  if (s.heat.width % cfg.window || s.heat.height % cfg.window)
    throw Error(ErrorCode::ShapeMismatch, "window must divide the heatmap dimensions");
  const int wr = s.heat.height / cfg.window;
  const int wc = s.heat.width / cfg.window;
  const int n = wr * wc;
  s.window_top.resize(n);
  s.window_left.resize(n);
  s.window_weights.resize(n);
  s.points.resize(2, n);
  s.scores.resize(n);
  s.raw.resize(n, desc.channels);
  s.raw_norm.resize(n);
  for (int r = 0; r < wr; ++r)
    for (int c = 0; c < wc; ++c) {
      const int k = r * wc + c;
      s.window_top[k] = r * cfg.window;
      s.window_left[k] = c * cfg.window;
      s.points.col(k) = soft_argmax_window(s.heat, s.window_top[k], s.window_left[k], cfg.window,
                                           cfg.temperature, &s.window_weights[k]);
      s.scores[k] = bilinear_sample_scalar(s.heat, s.points.col(k));
      s.raw.row(k) = interpolate_descriptor(desc, s.points.col(k)).transpose();
      s.raw_norm[k] = s.raw.row(k).norm();
      if (!(s.raw_norm[k] > 0.0)) throw Error(ErrorCode::NonFinite, "interpolated descriptor vanished");
    }
  s.desc = s.raw.array().colwise() / s.raw_norm.array();
  s.centered = s.desc.colwise() - s.desc.rowwise().mean();
  s.centered_norm = s.centered.rowwise().norm();
  for (int k = 0; k < n; ++k)
    if (!(s.centered_norm[k] * s.centered_norm[k] / desc.channels > 1e-12))
      throw Error(ErrorCode::ZeroVariance, "descriptor is numerically constant");
  s.zn = s.centered.array().colwise() / s.centered_norm.array();
}

Eigen::Matrix2d projective_jacobian(const Eigen::Matrix3d& m, const Eigen::Vector2d& x) {
  const Eigen::Vector3d q = m * x.homogeneous();
  const Eigen::Vector2d y = q.head<2>() / q.z();
  return (m.topLeftCorner<2, 2>() - y * m.block<1, 2>(2, 0)) / q.z();
}

Eigen::Vector2d pixel_to_normalized_scale(int width, int height) {
  return {2.0 / (width - 1), 2.0 / (height - 1)};
}

Eigen::Matrix2Xd to_normalized(const Eigen::Matrix2Xd& p, int width, int height) {
  const Eigen::Vector2d s = pixel_to_normalized_scale(width, height);
  return (s.asDiagonal() * p).colwise() - Eigen::Vector2d::Ones();
}

Eigen::Matrix2Xd select_columns(const Eigen::Matrix2Xd& m, const std::vector<int>& idx) {
  Eigen::Matrix2Xd out(2, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(k) = m.col(idx[k]);
  return out;
}

/// lambda_C corner + lambda_F Frobenius through the weighted DLT.
double homography_objective(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt,
                            const Eigen::VectorXd& w, const Homography& h_gt, double alpha,
                            double lambda_c, double lambda_f, double* corner = nullptr,
                            double* frob = nullptr) {
  const Frame f = h_gt.frame();
  const Homography est = normalize_homography(weighted_dlt(src, tgt, w, f));
  const Homography gt = normalize_homography(h_gt);
  const double c = corner_loss(gt, est, alpha);
  const double fr = frobenius_loss(gt, est, alpha);
  if (corner) *corner = c;
  if (frob) *frob = fr;
  return lambda_c * c + lambda_f * fr;
}

void axpy(Grid3& y, double a, const Grid3& x) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

void require_finite(const Grid3& g) {
  for (double v : g.data)
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteGradient, "gradient is not finite");
}

void normalize_cells(Grid3& g) {
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) {
      auto cell = g.cell(r, c);
      Eigen::Map<Eigen::VectorXd> v(cell.data(), g.channels);
      const double n = v.norm();
      if (n > 0.0) v /= n;
    }
}

}  // namespace

std::size_t PipelineParams::size() const {
  return src_logits.data.size() + tgt_logits.data.size() + src_desc.data.size() +
         tgt_desc.data.size();
}

double& PipelineParams::operator[](std::size_t i) {
  for (Grid3* g : {&src_logits, &tgt_logits, &src_desc, &tgt_desc}) {
    if (i < g->data.size()) return g->data[i];
    i -= g->data.size();
  }
  throw Error(ErrorCode::OutOfBounds, "parameter index out of range");
}

double PipelineParams::operator[](std::size_t i) const {
  return const_cast<PipelineParams&>(*this)[i];
}

std::size_t PipelineGradients::size() const {
  return src_logits.data.size() + tgt_logits.data.size() + src_desc.data.size() +
         tgt_desc.data.size();
}

double PipelineGradients::operator[](std::size_t i) const {
  for (const Grid3* g : {&src_logits, &tgt_logits, &src_desc, &tgt_desc}) {
    if (i < g->data.size()) return g->data[i];
    i -= g->data.size();
  }
  throw Error(ErrorCode::OutOfBounds, "gradient index out of range");
}

PipelineTape record_forward(const PipelineParams& params, const PipelineProblem& problem,
                            const SoftPipelineConfig& cfg, const LossWeights& weights) {
  check_shapes(params);
  weights.validate();
  cfg.extract.validate();
  cfg.match.validate();
  cfg.inlier.validate();
  cfg.descriptor.validate();
  const int width = params.src_logits.cols * kCellSize;
  const int height = params.src_logits.rows * kCellSize;
  if (!(problem.h_gt.frame() == Frame::pixel(width, height)))
    throw Error(ErrorCode::FrameMismatch, "ground truth must be a pixel homography of the image size");

  PipelineTape t{params, problem, cfg, weights};
  forward_side(params.src_logits, params.src_desc, cfg.extract, t.src);
  forward_side(params.tgt_logits, params.tgt_desc, cfg.extract, t.tgt);
  const Eigen::Index n = t.src.points.cols();
  const Eigen::Index m = t.tgt.points.cols();
  if (m == 0) throw Error(ErrorCode::EmptyTargetSet, "no target keypoints");

  // Soft matching.
  const double inv_tau = 1.0 / cfg.match.temperature;
  t.pi = t.src.zn * t.tgt.zn.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = t.pi.row(i);
    const double mx = row.maxCoeff();
    row = ((row.array() - mx) * inv_tau).exp();
    row /= row.sum();
  }
  t.pseudo = t.tgt.points * t.pi.transpose();

  const Eigen::Matrix3d h = problem.h_gt.matrix();
  t.pseudo_scores.resize(n);
  t.pseudo_raw.resize(n, params.tgt_desc.channels);
  t.pseudo_raw_norm.resize(n);
  t.match_scores.resize(n);
  t.reproj.resize(n);
  t.inlier_scores.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector2d ph = t.pseudo.col(i);
    t.pseudo_scores[i] = bilinear_sample_scalar(t.tgt.heat, ph);
    t.pseudo_raw.row(i) = interpolate_descriptor(params.tgt_desc, ph).transpose();
    t.pseudo_raw_norm[i] = t.pseudo_raw.row(i).norm();
    if (!(t.pseudo_raw_norm[i] > 0.0))
      throw Error(ErrorCode::NonFinite, "interpolated descriptor vanished");
    t.match_scores[i] = match_score(t.src.desc.row(i).transpose(),
                                    t.pseudo_raw.row(i).transpose() / t.pseudo_raw_norm[i]);
    t.reproj[i] = (transform_point(h, t.src.points.col(i)) - ph).norm();
    t.inlier_scores[i] = inlier_score(t.reproj[i], cfg.inlier);
  }
  t.pseudo_desc = t.pseudo_raw.array().colwise() / t.pseudo_raw_norm.array();
  t.match_weights = t.src.scores.cwiseProduct(t.pseudo_scores)
                        .cwiseProduct(t.match_scores)
                        .cwiseProduct(t.inlier_scores);

  // Losses.
  for (Eigen::Index i = 0; i < n; ++i) {
    if (cfg.transfer_visible_only) {
      const Eigen::Vector2d w = transform_point(h, t.src.points.col(i));
      const double b = cfg.transfer_margin;
      if (!(w.x() >= b && w.x() <= width - 1 - b && w.y() >= b && w.y() <= height - 1 - b)) continue;
    }
    t.transfer_set.push_back(static_cast<int>(i));
  }
  const Homography h_norm = normalize_homography(problem.h_gt);
  if (!t.transfer_set.empty())
    t.terms.transfer = transfer_loss(
        h_norm, to_normalized(select_columns(t.src.points, t.transfer_set), width, height),
        to_normalized(select_columns(t.pseudo, t.transfer_set), width, height), cfg.robust.alpha);
  else if (weights.transfer > 0.0)
    throw Error(ErrorCode::EmptyMatches, "no matches enter the transfer loss");

  try {
    homography_objective(t.src.points, t.pseudo, t.match_weights, problem.h_gt, cfg.robust.alpha,
                         0.0, 0.0, &t.terms.corner, &t.terms.frobenius);
  } catch (const Error&) {
    if (weights.corner > 0.0 || weights.frobenius > 0.0) throw;
    t.terms.corner = t.terms.frobenius = std::numeric_limits<double>::quiet_NaN();
  }

  t.correspondence = cell_correspondence(problem.h_gt, params.src_desc.rows, params.src_desc.cols,
                                         cfg.descriptor);
  t.terms.descriptor =
      descriptor_loss(params.src_desc, params.tgt_desc, t.correspondence, cfg.descriptor);
  t.terms.detector = detector_loss(params.src_logits, params.tgt_logits, problem.src_labels,
                                   problem.tgt_labels, cfg.detector);

  LossTerms used = t.terms;
  if (std::isnan(used.corner)) used.corner = used.frobenius = 0.0;
  t.total = total_loss(used, weights);
  return t;
}

double replay(const PipelineTape& tape) {
  return record_forward(tape.params, tape.problem, tape.cfg, tape.weights).total;
}

Eigen::VectorXd softmax_backward(const Eigen::VectorXd& y, const Eigen::VectorXd& grad_y) {
  return (y.array() * (grad_y.array() - y.dot(grad_y))).matrix();
}

Eigen::VectorXd soft_argmax_backward(const Eigen::Matrix2Xd& coords, const Eigen::VectorXd& a,
                                     const Eigen::Vector2d& p, double temperature,
                                     const Eigen::Vector2d& grad_p) {
  // dp/dh_k = a_k (x_k - p) / T
  return (a.array() * ((coords.colwise() - p).transpose() * grad_p).array() / temperature).matrix();
}

void zncc_backward(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double grad_z,
                   Eigen::VectorXd& grad_a, Eigen::VectorXd& grad_b) {
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  const double na = ca.norm(), nb = cb.norm();
  const Eigen::VectorXd za = ca / na, zb = cb / nb;
  const double z = za.dot(zb);
  // The mean removal projects out the constant direction, which za and zb lack.
  grad_a = grad_z * (zb - z * za) / na;
  grad_b = grad_z * (za - z * zb) / nb;
}

Eigen::VectorXd normalize_backward(const Eigen::VectorXd& x, const Eigen::VectorXd& grad_y) {
  const double n = x.norm();
  const Eigen::VectorXd y = x / n;
  return (grad_y - grad_y.dot(y) * y) / n;
}

Eigen::Vector2d bilinear_scalar_backward(const Heatmap& h, const Eigen::Vector2d& p, double grad_s,
                                         Heatmap& grad_heat) {
  const BilinearStencil s = heatmap_stencil(p, h.width, h.height);
  grad_heat.at(s.v0, s.u0) += grad_s * s.w00();
  grad_heat.at(s.v0, s.u1) += grad_s * s.w10();
  grad_heat.at(s.v1, s.u0) += grad_s * s.w01();
  grad_heat.at(s.v1, s.u1) += grad_s * s.w11();
  Eigen::Vector2d g = Eigen::Vector2d::Zero();
  if (!s.clamped_u)
    g.x() = grad_s * ((1 - s.fv) * (h.at(s.v0, s.u1) - h.at(s.v0, s.u0)) +
                      s.fv * (h.at(s.v1, s.u1) - h.at(s.v1, s.u0)));
  if (!s.clamped_v)
    g.y() = grad_s * ((1 - s.fu) * (h.at(s.v1, s.u0) - h.at(s.v0, s.u0)) +
                      s.fu * (h.at(s.v1, s.u1) - h.at(s.v0, s.u1)));
  return g;
}

Eigen::Vector2d bilinear_descriptor_backward(const Grid3& grid, const Eigen::Vector2d& p,
                                             const Eigen::VectorXd& grad_d, Grid3& grad_grid) {
  const BilinearStencil s = descriptor_stencil(p, grid.cols, grid.rows);
  const Eigen::Index n = grid.channels;
  using CMap = Eigen::Map<const Eigen::VectorXd>;
  using MMap = Eigen::Map<Eigen::VectorXd>;
  MMap(grad_grid.cell(s.v0, s.u0).data(), n) += s.w00() * grad_d;
  MMap(grad_grid.cell(s.v0, s.u1).data(), n) += s.w10() * grad_d;
  MMap(grad_grid.cell(s.v1, s.u0).data(), n) += s.w01() * grad_d;
  MMap(grad_grid.cell(s.v1, s.u1).data(), n) += s.w11() * grad_d;
  const double d00 = grad_d.dot(CMap(grid.cell(s.v0, s.u0).data(), n));
  const double d10 = grad_d.dot(CMap(grid.cell(s.v0, s.u1).data(), n));
  const double d01 = grad_d.dot(CMap(grid.cell(s.v1, s.u0).data(), n));
  const double d11 = grad_d.dot(CMap(grid.cell(s.v1, s.u1).data(), n));
  Eigen::Vector2d g = Eigen::Vector2d::Zero();
  if (!s.clamped_u) g.x() = ((1 - s.fv) * (d10 - d00) + s.fv * (d11 - d01)) / kCellSize;
  if (!s.clamped_v) g.y() = ((1 - s.fu) * (d01 - d00) + s.fu * (d11 - d10)) / kCellSize;
  return g;
}

void decode_backward(const Grid3& prob, const Heatmap& grad_heat, Grid3& grad_logits) {
  if (!grad_logits.same_shape(prob)) grad_logits = Grid3(prob.rows, prob.cols, prob.channels);
  Eigen::VectorXd y(kDetectorChannels), gy(kDetectorChannels);
  for (int r = 0; r < prob.rows; ++r)
    for (int c = 0; c < prob.cols; ++c) {
      const auto p = prob.cell(r, c);
      for (int k = 0; k < kDetectorChannels; ++k) {
        y[k] = p[k];
        gy[k] = k < kCellPixels
                    ? grad_heat.at(r * kCellSize + k / kCellSize, c * kCellSize + k % kCellSize)
                    : 0.0;
      }
      const Eigen::VectorXd gx = softmax_backward(y, gy);
      auto out = grad_logits.cell(r, c);
      for (int k = 0; k < kDetectorChannels; ++k) out[k] += gx[k];
    }
}

PipelineGradients grad_total_loss(const PipelineTape& t, const LossWeights& weights) {
  weights.validate();
  const PipelineParams& prm = t.params;
  const SoftPipelineConfig& cfg = t.cfg;
  const int width = prm.src_logits.cols * kCellSize;
  const int height = prm.src_logits.rows * kCellSize;
  const Eigen::Index n = t.src.points.cols();
  const Eigen::Index m = t.tgt.points.cols();
  const Eigen::Index dim = prm.src_desc.channels;

  PipelineGradients g{Grid3(prm.src_logits.rows, prm.src_logits.cols, kDetectorChannels),
                      Grid3(prm.tgt_logits.rows, prm.tgt_logits.cols, kDetectorChannels),
                      Grid3(prm.src_desc.rows, prm.src_desc.cols, prm.src_desc.channels),
                      Grid3(prm.tgt_desc.rows, prm.tgt_desc.cols, prm.tgt_desc.channels)};
  Heatmap gheat_s{height, width, std::vector<double>(static_cast<std::size_t>(width) * height)};
  Heatmap gheat_t = gheat_s;
  Eigen::Matrix2Xd gp_s = Eigen::Matrix2Xd::Zero(2, n);
  Eigen::Matrix2Xd gp_t = Eigen::Matrix2Xd::Zero(2, m);
  Eigen::Matrix2Xd gp_hat = Eigen::Matrix2Xd::Zero(2, n);
  Eigen::MatrixXd gdesc_s = Eigen::MatrixXd::Zero(n, dim);
  Eigen::MatrixXd gdesc_t = Eigen::MatrixXd::Zero(m, dim);
  const Eigen::Matrix3d h = t.problem.h_gt.matrix();

  if (weights.transfer > 0.0 && !t.transfer_set.empty()) {
    Eigen::Matrix2Xd gs, gt;
    transfer_loss(normalize_homography(t.problem.h_gt),
                  to_normalized(select_columns(t.src.points, t.transfer_set), width, height),
                  to_normalized(select_columns(t.pseudo, t.transfer_set), width, height),
                  cfg.robust.alpha, &gs, &gt);
    const Eigen::Vector2d scale = weights.transfer * pixel_to_normalized_scale(width, height);
    for (std::size_t k = 0; k < t.transfer_set.size(); ++k) {
      gp_s.col(t.transfer_set[k]) += scale.cwiseProduct(gs.col(k));
      gp_hat.col(t.transfer_set[k]) += scale.cwiseProduct(gt.col(k));
    }
  }

  if (weights.corner > 0.0 || weights.frobenius > 0.0) {
    Eigen::Matrix2Xd ps = t.src.points, ph = t.pseudo;
    Eigen::VectorXd w = t.match_weights;
    auto f = [&] {
      return homography_objective(ps, ph, w, t.problem.h_gt, cfg.robust.alpha, weights.corner,
                                  weights.frobenius);
    };
    const double step = cfg.dlt_fd_step;
    auto central = [&](double& x, double dx) {
      const double x0 = x;
      x = x0 + dx;
      const double fp = f();
      x = x0 - dx;
      const double fm = f();
      x = x0;
      return (fp - fm) / (2.0 * dx);
    };
    Eigen::VectorXd gw(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int a = 0; a < 2; ++a) {
        gp_s(a, i) += central(ps(a, i), step);
        gp_hat(a, i) += central(ph(a, i), step);
      }
      gw[i] = w[i] > 0.0 ? central(w[i], step * w[i]) : 0.0;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const double ss = t.src.scores[i], sh = t.pseudo_scores[i], sm = t.match_scores[i],
                   si = t.inlier_scores[i];
      const Eigen::Vector2d ps_i = t.src.points.col(i), ph_i = t.pseudo.col(i);
      gp_s.col(i) += bilinear_scalar_backward(t.src.heat, ps_i, gw[i] * sh * sm * si, gheat_s);
      gp_hat.col(i) += bilinear_scalar_backward(t.tgt.heat, ph_i, gw[i] * ss * sm * si, gheat_t);

      Eigen::VectorXd ga, gb;
      zncc_backward(t.src.desc.row(i).transpose(), t.pseudo_desc.row(i).transpose(),
                    0.5 * gw[i] * ss * sh * si, ga, gb);
      gdesc_s.row(i) += ga.transpose();
      const Eigen::VectorXd graw = normalize_backward(t.pseudo_raw.row(i).transpose(), gb);
      gp_hat.col(i) += bilinear_descriptor_backward(prm.tgt_desc, ph_i, graw, g.tgt_desc);

      const double gx = gw[i] * ss * sh * sm *
                        (-cfg.inlier.sharpness / cfg.inlier.threshold * si * (1.0 - si));
      if (t.reproj[i] > 0.0) {
        const Eigen::Vector2d e = transform_point(h, ps_i) - ph_i;
        const Eigen::Vector2d u = gx * e / t.reproj[i];
        gp_hat.col(i) -= u;
        gp_s.col(i) += projective_jacobian(h, ps_i).transpose() * u;
      }
    }
  }

  // Pseudo-target locations: p_hat = Pi P_t^T.
  if (!gp_hat.isZero(0.0)) {
    gp_t += gp_hat * t.pi;
    const Eigen::MatrixXd gpi = gp_hat.transpose() * t.tgt.points;
    Eigen::MatrixXd gz(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double inner = t.pi.row(i).dot(gpi.row(i));
      gz.row(i) = t.pi.row(i).array() * (gpi.row(i).array() - inner) / cfg.match.temperature;
    }
    const Eigen::MatrixXd gzn_s = gz * t.tgt.zn;
    const Eigen::MatrixXd gzn_t = gz.transpose() * t.src.zn;
    auto zn_backward = [](const PipelineTape::Side& s, const Eigen::MatrixXd& gzn,
                          Eigen::MatrixXd& gdesc) {
      for (Eigen::Index k = 0; k < gzn.rows(); ++k) {
        const Eigen::RowVectorXd zn = s.zn.row(k);
        Eigen::RowVectorXd gc = (gzn.row(k) - gzn.row(k).dot(zn) * zn) / s.centered_norm[k];
        gdesc.row(k) += (gc.array() - gc.mean()).matrix();
      }
    };
    zn_backward(t.src, gzn_s, gdesc_s);
    zn_backward(t.tgt, gzn_t, gdesc_t);
  }

  auto side_backward = [&](const PipelineTape::Side& s, const Grid3& desc, const Eigen::MatrixXd& gdesc,
                           Eigen::Matrix2Xd& gp, Grid3& gdesc_grid, Heatmap& gheat) {
    for (Eigen::Index k = 0; k < gdesc.rows(); ++k) {
      if (gdesc.row(k).isZero(0.0)) continue;
      const Eigen::VectorXd graw = normalize_backward(s.raw.row(k).transpose(), gdesc.row(k).transpose());
      gp.col(k) += bilinear_descriptor_backward(desc, s.points.col(k), graw, gdesc_grid);
    }
    const int window = cfg.extract.window;
    Eigen::Matrix2Xd coords(2, window * window);
    for (Eigen::Index k = 0; k < gp.cols(); ++k) {
      if (gp.col(k).isZero(0.0)) continue;
      for (int q = 0; q < window * window; ++q)
        coords.col(q) << s.window_left[k] + q % window, s.window_top[k] + q / window;
      const Eigen::Map<const Eigen::VectorXd> a(s.window_weights[k].data(), window * window);
      const Eigen::VectorXd gh =
          soft_argmax_backward(coords, a, s.points.col(k), cfg.extract.temperature, gp.col(k));
      for (int q = 0; q < window * window; ++q)
        gheat.at(s.window_top[k] + q / window, s.window_left[k] + q % window) += gh[q];
    }
  };
  side_backward(t.src, prm.src_desc, gdesc_s, gp_s, g.src_desc, gheat_s);
  side_backward(t.tgt, prm.tgt_desc, gdesc_t, gp_t, g.tgt_desc, gheat_t);
  decode_backward(t.src.prob, gheat_s, g.src_logits);
  decode_backward(t.tgt.prob, gheat_t, g.tgt_logits);

  if (weights.descriptor > 0.0) {
    Grid3 gs, gt;
    descriptor_loss(prm.src_desc, prm.tgt_desc, t.correspondence, cfg.descriptor, &gs, &gt);
    axpy(g.src_desc, weights.descriptor, gs);
    axpy(g.tgt_desc, weights.descriptor, gt);
  }
  if (weights.detector > 0.0) {
    Grid3 gs, gt;
    detector_loss(prm.src_logits, prm.tgt_logits, t.problem.src_labels, t.problem.tgt_labels,
                  cfg.detector, &gs, &gt);
    axpy(g.src_logits, weights.detector, gs);
    axpy(g.tgt_logits, weights.detector, gt);
  }
  for (const Grid3* x : {&g.src_logits, &g.tgt_logits, &g.src_desc, &g.tgt_desc}) require_finite(*x);
  return g;
}

Eigen::VectorXd finite_diff(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y[i] = x[i] + h;
    const double fp = f(y);
    y[i] = x[i] - h;
    const double fm = f(y);
    y[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// ---------------------------------------------------------------------------
// Toy training

namespace {

/// Cell logits whose heatmap is a Gaussian bump around p over a constant floor.
void encode_bump(Grid3& logits, int row, int col, const Eigen::Vector2d& p, const ToyConfig& cfg) {
  double prob[kDetectorChannels];
  double sum = 0.0;
  for (int k = 0; k < kCellPixels; ++k) {
    const Eigen::Vector2d x(kCellSize * col + k % kCellSize, kCellSize * row + k / kCellSize);
    prob[k] = cfg.init_floor + cfg.init_amplitude * std::exp(-(x - p).squaredNorm() /
                                                             (2.0 * cfg.init_sigma * cfg.init_sigma));
    sum += prob[k];
  }
  if (!(sum < 1.0)) throw Error(ErrorCode::InvalidConfig, "toy heatmap bump exceeds unit mass");
  prob[kDustbin] = 1.0 - sum;
  auto cell = logits.cell(row, col);
  for (int k = 0; k < kDetectorChannels; ++k) cell[k] = std::log(prob[k]);
}

int label_for(const Eigen::Vector2d& p, int row, int col) {
  const int du = std::clamp(static_cast<int>(std::lround(p.x())) - kCellSize * col, 0, kCellSize - 1);
  const int dv = std::clamp(static_cast<int>(std::lround(p.y())) - kCellSize * row, 0, kCellSize - 1);
  return dv * kCellSize + du;
}

double positive_mod(double x, double m) {
  const double r = std::fmod(x, m);
  return r < 0 ? r + m : r;
}

}  // namespace

ToyProblem make_toy_problem(const ToyConfig& cfg, std::uint64_t seed) {
  if (cfg.width % kCellSize || cfg.height % kCellSize || cfg.width < 4 * kCellSize ||
      cfg.height < 4 * kCellSize)
    throw Error(ErrorCode::InvalidConfig, "toy image size must be a multiple of 8, at least 32");
  if (cfg.max_translation < 0 || cfg.descriptor_length < 2)
    throw Error(ErrorCode::InvalidConfig, "invalid toy translation or descriptor length");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shift(-cfg.max_translation, cfg.max_translation);
  const int tu = shift(rng), tv = shift(rng);
  // A common intra-cell offset keeps warped points one per target cell and
  // away from cell edges on both sides.
  std::uniform_real_distribution<double> off(1.0, 6.0);
  auto pick_offset = [&](int t) {
    for (;;) {
      const double o = off(rng);
      const double w = positive_mod(o + t, kCellSize);
      if (w >= 1.0 && w <= 6.0) return o;
    }
  };
  const double ou = pick_offset(tu), ov = pick_offset(tv);

  const int rows = cfg.height / kCellSize, cols = cfg.width / kCellSize;
  const Frame frame = Frame::pixel(cfg.width, cfg.height);
  ToyProblem toy{PipelineParams{Grid3(rows, cols, kDetectorChannels), Grid3(rows, cols, kDetectorChannels),
                                Grid3(rows, cols, cfg.descriptor_length),
                                Grid3(rows, cols, cfg.descriptor_length)},
                 PipelineProblem{Homography::translation(tu, tv, frame),
                                 DetectorTarget{rows, cols, std::vector<int>(rows * cols, kDustbin)},
                                 DetectorTarget{rows, cols, std::vector<int>(rows * cols, kDustbin)}}};
  PipelineParams& p = toy.init;
  std::normal_distribution<double> jitter(0.0, cfg.init_jitter);
  auto set_desc = [](Grid3& g, int r, int c, const Eigen::VectorXd& d) {
    std::copy(d.data(), d.data() + d.size(), g.cell(r, c).begin());
  };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      encode_background(p.tgt_logits, r, c, cfg.init_floor);
      set_desc(p.tgt_desc, r, c, random_unit_vector(cfg.descriptor_length, rng));
    }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const Eigen::Vector2d ps(kCellSize * c + ou, kCellSize * r + ov);
      encode_bump(p.src_logits, r, c, ps, cfg);
      toy.problem.src_labels.labels[r * cols + c] = label_for(ps, r, c);
      const Eigen::VectorXd shared = random_unit_vector(cfg.descriptor_length, rng);
      set_desc(p.src_desc, r, c, shared);
      const Eigen::Vector2d pt = ps + Eigen::Vector2d(tu, tv);
      if (!(pt.x() >= 0.0 && pt.x() <= cfg.width - 1 && pt.y() >= 0.0 && pt.y() <= cfg.height - 1))
        continue;
      const int tr = static_cast<int>(pt.y()) / kCellSize, tc = static_cast<int>(pt.x()) / kCellSize;
      Eigen::Vector2d init = pt + Eigen::Vector2d(jitter(rng), jitter(rng));
      init.x() = std::clamp(init.x(), kCellSize * tc + 0.5, kCellSize * tc + 6.5);
      init.y() = std::clamp(init.y(), kCellSize * tr + 0.5, kCellSize * tr + 6.5);
      encode_bump(p.tgt_logits, tr, tc, init, cfg);
      toy.problem.tgt_labels.labels[tr * cols + tc] = label_for(pt, tr, tc);
      set_desc(p.tgt_desc, tr, tc, shared);
    }
  std::normal_distribution<double> logit_noise(0.0, cfg.init_logit_noise);
  std::normal_distribution<double> desc_noise(0.0, cfg.init_descriptor_noise);
  for (Grid3* g : {&p.src_logits, &p.tgt_logits})
    for (double& v : g->data) v += logit_noise(rng);
  for (Grid3* g : {&p.src_desc, &p.tgt_desc}) {
    for (double& v : g->data) v += desc_noise(rng);
    normalize_cells(*g);
  }
  return toy;
}

TrainState toy_train(const ToyProblem& toy, const ToyConfig& cfg, const LossWeights& weights,
                     int steps, double lr) {
  if (steps < 0 || !(lr >= 0.0) || !std::isfinite(lr) || !(cfg.descriptor_lr_scale >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "steps and learning rate must be nonnegative");
  TrainState state{toy.init, 0, {}};
  for (int s = 0; s <= steps; ++s) {
    const PipelineTape tape = record_forward(state.params, toy.problem, cfg.pipeline, weights);
    if (!std::isfinite(tape.total))
      throw Error(ErrorCode::DivergenceDetected, "loss diverged at step " + std::to_string(s));
    LossCurveRow row{s, tape.terms, tape.total, 0.0};
    if (!tape.transfer_set.empty()) {
      for (int i : tape.transfer_set) row.mean_reprojection += tape.reproj[i];
      row.mean_reprojection /= static_cast<double>(tape.transfer_set.size());
    }
    state.history.push_back(row);
    if (s == steps) break;
    const PipelineGradients g = grad_total_loss(tape, weights);
    axpy(state.params.src_logits, -lr, g.src_logits);
    axpy(state.params.tgt_logits, -lr, g.tgt_logits);
    axpy(state.params.src_desc, -lr * cfg.descriptor_lr_scale, g.src_desc);
    axpy(state.params.tgt_desc, -lr * cfg.descriptor_lr_scale, g.tgt_desc);
    normalize_cells(state.params.src_desc);
    normalize_cells(state.params.tgt_desc);
    state.step = s + 1;
  }
  return state;
}

void write_loss_curve_csv(std::ostream& out, const std::vector<LossCurveRow>& rows) {
  out << "step,L_C,L_F,L_T,L_D,L_K,total\n";
  out << std::setprecision(10);
  for (const LossCurveRow& r : rows)
    out << r.step << ',' << r.terms.corner << ',' << r.terms.frobenius << ',' << r.terms.transfer
        << ',' << r.terms.descriptor << ',' << r.terms.detector << ',' << r.total << '\n';
}

// ---------------------------------------------------------------------------
// Averaging effect

AveragingReport averaging_effect_demo(int n_matches, const Homography& h_gt, std::uint64_t seed,
                                      AveragingObjective objective, const AveragingConfig& cfg) {
  if (n_matches < 8) throw Error(ErrorCode::InvalidConfig, "averaging demo needs at least 8 matches");
  if (!h_gt.frame().is_pixel() || h_gt.frame().width != cfg.width || h_gt.frame().height != cfg.height)
    throw Error(ErrorCode::FrameMismatch, "ground truth must be a pixel homography of the demo size");
  std::mt19937_64 rng(seed);
  const Eigen::Matrix3d h = h_gt.matrix();
  const InlierConfig inlier = InlierConfig::for_image(cfg.width, cfg.height);
  std::uniform_real_distribution<double> uu(0.0, cfg.width - 1.0), vv(0.0, cfg.height - 1.0);
  std::bernoulli_distribution sign(0.5);

  Eigen::Matrix2Xd src(2, n_matches), truth(2, n_matches), tgt(2, n_matches);
  for (int i = 0; i < n_matches; ++i) {
    src.col(i) << uu(rng), vv(rng);
    truth.col(i) = transform_point(h, src.col(i));
    tgt.col(i) = truth.col(i) + cfg.perturbation * Eigen::Vector2d(sign(rng) ? 1.0 : -1.0,
                                                                   sign(rng) ? 1.0 : -1.0);
  }
  const Homography gt_norm = normalize_homography(h_gt);
  const Eigen::Matrix2Xd src_norm = to_normalized(src, cfg.width, cfg.height);

  auto corner_of = [&](const Eigen::Matrix2Xd& t) {
    Eigen::VectorXd w(n_matches);
    for (int i = 0; i < n_matches; ++i)
      w[i] = inlier_score((transform_point(h, src.col(i)) - t.col(i)).norm(), inlier);
    return corner_loss(gt_norm, normalize_homography(weighted_dlt(src, t, w, h_gt.frame())), cfg.alpha);
  };
  auto transfer_of = [&](const Eigen::Matrix2Xd& t, Eigen::Matrix2Xd* grad) {
    Eigen::Matrix2Xd gt;
    const double v = transfer_loss(gt_norm, src_norm, to_normalized(t, cfg.width, cfg.height),
                                   cfg.alpha, nullptr, grad ? &gt : nullptr);
    if (grad) *grad = pixel_to_normalized_scale(cfg.width, cfg.height).asDiagonal() * gt;
    return v;
  };
  auto objective_of = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    const Eigen::Map<const Eigen::Matrix2Xd> t(x.data(), 2, n_matches);
    if (objective == AveragingObjective::Transfer) {
      Eigen::Matrix2Xd g;
      const double v = transfer_of(t, grad ? &g : nullptr);
      if (grad) *grad = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
      return v;
    }
    if (grad)
      *grad = finite_diff(
          [&](const Eigen::VectorXd& y) { return corner_of(Eigen::Map<const Eigen::Matrix2Xd>(y.data(), 2, n_matches)); },
          x, cfg.fd_step);
    return corner_of(t);
  };
  auto mean_error = [&](const Eigen::Matrix2Xd& t) { return (t - truth).colwise().norm().mean(); };

  AveragingReport rep;
  rep.corner_loss_initial = corner_of(tgt);
  rep.mean_transfer_error_initial = mean_error(tgt);

  // Gradient descent with Barzilai-Borwein steps and a nonmonotone Armijo test.
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(tgt.data(), tgt.size());
  Eigen::VectorXd g;
  double f = objective_of(x, &g);
  std::deque<double> recent{f};
  double step = g.norm() > 0.0 ? 1.0 / g.norm() : 0.0;
  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    if (!(g.norm() > 1e-14) || f < 1e-14) break;
    const double ref = *std::max_element(recent.begin(), recent.end());
    Eigen::VectorXd x_new, g_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int tries = 0; tries < 40; ++tries, step *= 0.5) {
      x_new = x - step * g;
      try {
        f_new = objective_of(x_new, nullptr);
      } catch (const Error&) {
        continue;
      }
      if (f_new <= ref - 1e-4 * step * g.squaredNorm()) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    objective_of(x_new, &g_new);
    const Eigen::VectorXd s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    step = sy > 0.0 ? s.squaredNorm() / sy : step * 2.0;
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
    recent.push_back(f);
    if (recent.size() > 10) recent.pop_front();
  }
  const Eigen::Map<const Eigen::Matrix2Xd> final_t(x.data(), 2, n_matches);
  rep.corner_loss_final = corner_of(final_t);
  rep.mean_transfer_error_final = mean_error(final_t);
  rep.iterations = it;
  return rep;
}

}  // namespace xspec
