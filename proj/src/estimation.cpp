#include "xspec/estimation.hpp"

#include "xspec/error.hpp"
#include "xspec/parallel.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace xspec {
namespace {

constexpr double kRankTolerance = 1e-10;

/// Similarity transform moving the weighted centroid to the origin with mean
/// weighted distance sqrt(2).
Eigen::Matrix3d hartley(const Eigen::Matrix2Xd& pts, const Eigen::VectorXd& w) {
  const double total = w.sum();
  const Eigen::Vector2d c = pts * w / total;
  double spread = 0.0;
  for (Eigen::Index i = 0; i < pts.cols(); ++i) spread += w[i] * (pts.col(i) - c).norm();
  spread /= total;
  if (!(spread > 1e-12)) throw Error(ErrorCode::RankDeficient, "correspondences are coincident");
  const double s = std::sqrt(2.0) / spread;
  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 0) = t(1, 1) = s;
  t(0, 2) = -s * c.x();
  t(1, 2) = -s * c.y();
  return t;
}

Eigen::Matrix2Xd apply(const Eigen::Matrix3d& t, const Eigen::Matrix2Xd& pts) {
  return (t.topLeftCorner<2, 2>() * pts).colwise() + t.topRightCorner<2, 1>();
}

std::vector<int> inliers_of(const Eigen::VectorXd& err, double threshold) {
  std::vector<int> in;
  for (Eigen::Index i = 0; i < err.size(); ++i)
    if (err[i] < threshold) in.push_back(static_cast<int>(i));
  return in;
}

Eigen::Matrix2Xd gather(const Eigen::Matrix2Xd& pts, const std::vector<int>& idx) {
  Eigen::Matrix2Xd out(2, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = pts.col(idx[i]);
  return out;
}

}  // namespace

InlierConfig InlierConfig::for_image(int width, int height) {
  InlierConfig cfg;
  cfg.threshold = 50.0 * std::hypot(width, height) / std::hypot(320.0, 240.0);
  return cfg;
}

void InlierConfig::validate() const {
  if (!(threshold > 0.0 && sharpness > 0.0))
    throw Error(ErrorCode::InvalidConfig, "inlier threshold and sharpness must be positive");
}

void RansacConfig::validate() const {
  if (iterations < 1) throw Error(ErrorCode::InvalidConfig, "RANSAC needs at least one iteration");
  if (!(inlier_threshold > 0.0)) throw Error(ErrorCode::InvalidConfig, "inlier threshold must be positive");
}

double inlier_score(double x, const InlierConfig& cfg) {
  return 1.0 / (1.0 + std::exp(cfg.sharpness * (x / cfg.threshold - 1.0)));
}

double match_weight(const Match& m) {
  return m.src.score * m.pseudo_tgt.score * m.score_m * m.score_in;
}

std::vector<Match> score_inliers_gt(std::vector<Match> matches, const Homography& h_gt,
                                    const InlierConfig& cfg) {
  cfg.validate();
  if (!h_gt.frame().is_pixel())
    throw Error(ErrorCode::FrameMismatch, "ground-truth homography must be in pixel coordinates");
  for (Match& m : matches) {
    const double x = (transform_point(h_gt.matrix(), m.src.p) - m.pseudo_tgt.p).norm();
    m.score_in = inlier_score(x, cfg);
    m.weight = match_weight(m);
  }
  return matches;
}

Homography weighted_dlt(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt,
                        const Eigen::VectorXd& weights, Frame frame) {
  const Eigen::Index n = src.cols();
  if (tgt.cols() != n || weights.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "correspondence and weight counts differ");
  int positive = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i]))
      throw Error(ErrorCode::InvalidConfig, "DLT weights must be finite and nonnegative");
    positive += weights[i] > 0.0;
  }
  if (positive < 4) throw Error(ErrorCode::InsufficientPoints, "DLT needs 4 weighted correspondences");

  const Eigen::Matrix3d ts = hartley(src, weights);
  const Eigen::Matrix3d tt = hartley(tgt, weights);
  const Eigen::Matrix2Xd xs = apply(ts, src);
  const Eigen::Matrix2Xd xt = apply(tt, tgt);

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(std::max<Eigen::Index>(2 * positive, 9), 9);
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[i];
    if (w == 0.0) continue;
    const double x = xs(0, i), y = xs(1, i), u = xt(0, i), v = xt(1, i);
    a.row(row++) << 0, 0, 0, -w * x, -w * y, -w, w * v * x, w * v * y, w * v;
    a.row(row++) << w * x, w * y, w, 0, 0, 0, -w * u * x, -w * u * y, -w * u;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (!(sv[7] > kRankTolerance * sv[0]))
    throw Error(ErrorCode::RankDeficient, "degenerate correspondence configuration");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
  Eigen::Matrix3d m = tt.inverse() * hn * ts;
  if (m(2, 2) != 0.0) m /= m(2, 2);
  return {m, frame};
}

Homography dlt(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt, Frame frame) {
  return weighted_dlt(src, tgt, Eigen::VectorXd::Ones(src.cols()), frame);
}

Eigen::VectorXd reprojection_errors(const Eigen::Matrix3d& h, const Eigen::Matrix2Xd& src,
                                    const Eigen::Matrix2Xd& tgt) {
  Eigen::VectorXd err(src.cols());
  for (Eigen::Index i = 0; i < src.cols(); ++i) {
    const Eigen::Vector3d q = h * src.col(i).homogeneous();
    err[i] = std::abs(q.z()) < 1e-12 ? std::numeric_limits<double>::infinity()
                                     : (q.head<2>() / q.z() - tgt.col(i)).norm();
  }
  return err;
}

double reprojection_cost(const Eigen::Matrix3d& h, const Eigen::Matrix2Xd& src,
                         const Eigen::Matrix2Xd& tgt) {
  return reprojection_errors(h, src, tgt).squaredNorm();
}

RansacResult ransac(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt, Frame frame,
                    const RansacConfig& cfg, const std::optional<Eigen::VectorXd>& sampling_weights) {
  cfg.validate();
  const Eigen::Index n = src.cols();
  if (tgt.cols() != n) throw Error(ErrorCode::ShapeMismatch, "correspondence counts differ");
  if (n < 4) throw Error(ErrorCode::InsufficientPoints, "RANSAC needs at least 4 matches");

  std::vector<double> cdf;
  if (cfg.weighted_sampling) {
    if (!sampling_weights || sampling_weights->size() != n)
      throw Error(ErrorCode::InvalidConfig, "weighted sampling requires one weight per match");
    cdf.resize(static_cast<std::size_t>(n));
    double acc = 0.0;
    int positive = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double w = (*sampling_weights)[i];
      if (!(w >= 0.0) || !std::isfinite(w))
        throw Error(ErrorCode::InvalidConfig, "sampling weights must be finite and nonnegative");
      positive += w > 0.0;
      cdf[static_cast<std::size_t>(i)] = (acc += w);
    }
    if (positive < 4) throw Error(ErrorCode::InsufficientPoints, "fewer than 4 matches with nonzero weight");
  }

  struct Hypothesis {
    int count = -1;
    int iteration = -1;
    Eigen::Matrix3d h;
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(cfg.threads, cfg.iterations));
  std::vector<Hypothesis> best(workers);
  const int chunk = (cfg.iterations + static_cast<int>(workers) - 1) / static_cast<int>(workers);

  parallel_for(workers, workers, [&](std::size_t w) {
    Hypothesis& local = best[w];
    Eigen::Matrix2Xd s4(2, 4), t4(2, 4);
    const int end = std::min(cfg.iterations, static_cast<int>(w + 1) * chunk);
    for (int it = static_cast<int>(w) * chunk; it < end; ++it) {
      std::mt19937_64 rng(substream_seed(cfg.seed, static_cast<std::uint64_t>(it)));
      int idx[4];
      int drawn = 0;
      for (int attempt = 0; drawn < 4 && attempt < 1000; ++attempt) {
        int k;
        if (cfg.weighted_sampling) {
          const double u = std::uniform_real_distribution<double>(0.0, cdf.back())(rng);
          k = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
          if (k >= n) continue;
        } else {
          k = static_cast<int>(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
        }
        if (std::find(idx, idx + drawn, k) == idx + drawn) idx[drawn++] = k;
      }
      if (drawn < 4) continue;
      for (int j = 0; j < 4; ++j) {
        s4.col(j) = src.col(idx[j]);
        t4.col(j) = tgt.col(idx[j]);
      }
      Eigen::Matrix3d h;
      try {
        h = dlt(s4, t4, frame).matrix();
      } catch (const Error&) {
        continue;
      }
      const Eigen::VectorXd err = reprojection_errors(h, src, tgt);
      const int count = static_cast<int>((err.array() < cfg.inlier_threshold).count());
      if (count > local.count) local = {count, it, h};
    }
  });

  Hypothesis winner;
  for (const auto& b : best)
    if (b.count > winner.count || (b.count == winner.count && b.iteration < winner.iteration))
      winner = b;
  if (winner.count < 4) throw Error(ErrorCode::NoConsensus, "no hypothesis reached 4 inliers");

  std::vector<int> inliers = inliers_of(reprojection_errors(winner.h, src, tgt), cfg.inlier_threshold);
  RansacResult result{Homography(winner.h, frame), inliers, winner.iteration};
  try {
    Homography refit = dlt(gather(src, inliers), gather(tgt, inliers), frame);
    std::vector<int> refit_inliers =
        inliers_of(reprojection_errors(refit.matrix(), src, tgt), cfg.inlier_threshold);
    if (refit_inliers.size() >= inliers.size()) {
      result.h = refit;
      result.inliers = std::move(refit_inliers);
    }
  } catch (const Error&) {
  }
  return result;
}

RefineResult refine_dls(const Homography& h0, const Eigen::Matrix2Xd& src,
                        const Eigen::Matrix2Xd& tgt, const RefineConfig& cfg) {
  const Eigen::Index n = src.cols();
  if (tgt.cols() != n) throw Error(ErrorCode::ShapeMismatch, "correspondence counts differ");
  if (n < 4) throw Error(ErrorCode::InsufficientPoints, "refinement needs at least 4 inliers");

  // Work in conditioned coordinates; the target conditioner is a similarity,
  // so the conditioned cost is a constant multiple of the pixel cost.
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  Eigen::Matrix3d ts, tt;
  try {
    ts = hartley(src, ones);
    tt = hartley(tgt, ones);
  } catch (const Error&) {
    throw Error(ErrorCode::SingularNormalEquations, "correspondences are coincident");
  }
  const Eigen::Matrix2Xd xs = apply(ts, src);
  const Eigen::Matrix2Xd xt = apply(tt, tgt);
  Eigen::Matrix3d hn = tt * h0.matrix() * ts.inverse();
  if (std::abs(hn(2, 2)) < 1e-12)
    throw Error(ErrorCode::SingularNormalEquations, "cannot fix homography scale");
  hn /= hn(2, 2);

  using Vec8 = Eigen::Matrix<double, 8, 1>;
  using Mat8 = Eigen::Matrix<double, 8, 8>;
  auto to_matrix = [](const Vec8& x) {
    Eigen::Matrix3d m;
    m << x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], 1.0;
    return m;
  };
  auto residuals = [&](const Vec8& x, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    r.resize(2 * n);
    if (jac) jac->setZero(2 * n, 8);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double px = xs(0, i), py = xs(1, i);
      const double w = x[6] * px + x[7] * py + 1.0;
      if (std::abs(w) < 1e-12) return false;
      const double u = (x[0] * px + x[1] * py + x[2]) / w;
      const double v = (x[3] * px + x[4] * py + x[5]) / w;
      r[2 * i] = u - xt(0, i);
      r[2 * i + 1] = v - xt(1, i);
      if (jac) {
        auto ju = jac->row(2 * i);
        auto jv = jac->row(2 * i + 1);
        ju(0) = px / w, ju(1) = py / w, ju(2) = 1.0 / w;
        ju(6) = -u * px / w, ju(7) = -u * py / w;
        jv(3) = px / w, jv(4) = py / w, jv(5) = 1.0 / w;
        jv(6) = -v * px / w, jv(7) = -v * py / w;
      }
    }
    return true;
  };

  Vec8 x;
  x << hn(0, 0), hn(0, 1), hn(0, 2), hn(1, 0), hn(1, 1), hn(1, 2), hn(2, 0), hn(2, 1);
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  if (!residuals(x, r, &jac))
    throw Error(ErrorCode::SingularNormalEquations, "initial homography sends a point to infinity");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(jac);
  qr.setThreshold(1e-10);
  if (qr.rank() < 8) throw Error(ErrorCode::SingularNormalEquations, "Jacobian is rank deficient");

  const double cost_scale = 1.0 / (tt(0, 0) * tt(0, 0));
  RefineResult result{h0, 0, r.squaredNorm() * cost_scale, 0.0};
  double cost = r.squaredNorm();
  Mat8 jtj = jac.transpose() * jac;
  Vec8 grad = jac.transpose() * r;
  double lambda = 1e-3 * jtj.diagonal().maxCoeff();
  bool improved = false;
  Eigen::VectorXd r_new;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    result.iterations = it + 1;
    if (grad.norm() < 1e-15) break;
    Mat8 a = jtj;
    a.diagonal() += lambda * jtj.diagonal();
    const Vec8 step = a.ldlt().solve(-grad);
    if (!step.allFinite()) throw Error(ErrorCode::SingularNormalEquations, "LM step is not finite");
    const Vec8 candidate = x + step;
    if (residuals(candidate, r_new, nullptr) && r_new.squaredNorm() < cost) {
      x = candidate;
      cost = r_new.squaredNorm();
      improved = true;
      residuals(x, r, &jac);
      jtj = jac.transpose() * jac;
      grad = jac.transpose() * r;
      lambda = std::max(lambda * 0.1, 1e-12);
      if (step.norm() < cfg.step_tolerance * (1.0 + x.norm())) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e16) break;
    }
  }
  if (improved) {
    Eigen::Matrix3d m = tt.inverse() * to_matrix(x) * ts;
    m /= m(2, 2);
    result.h = Homography(m, h0.frame());
  }
  result.final_cost = improved ? cost * cost_scale : result.initial_cost;
  return result;
}

RegistrationResult run_weighted_pipeline(const DetectionResponse& src_det,
                                         const DescriptorMap& src_desc,
                                         const DetectionResponse& tgt_det,
                                         const DescriptorMap& tgt_desc,
                                         const WeightedPipelineConfig& cfg) {
  if (src_det.width() != tgt_det.width() || src_det.height() != tgt_det.height())
    throw Error(ErrorCode::ShapeMismatch, "source and target images differ in size");
  const Frame frame = Frame::pixel(src_det.width(), src_det.height());
  const Heatmap src_heat = decode_heatmap(src_det);
  const Heatmap tgt_heat = decode_heatmap(tgt_det);
  const auto src_kps = extract_soft(src_heat, src_desc, cfg.extract);
  const auto tgt_kps = extract_soft(tgt_heat, tgt_desc, cfg.extract);
  if (src_kps.size() < 4 || tgt_kps.size() < 4)
    throw Error(ErrorCode::InsufficientPoints, "fewer than 4 keypoints per image");
  std::vector<Match> matches = soft_match(src_kps, tgt_kps, tgt_heat, tgt_desc.grid(), cfg.match);

  const auto n = static_cast<Eigen::Index>(matches.size());
  Eigen::Matrix2Xd s(2, n), t(2, n);
  Eigen::VectorXd sampling(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.col(i) = matches[i].src.p;
    t.col(i) = matches[i].pseudo_tgt.p;
    sampling[i] = matches[i].src.score * matches[i].pseudo_tgt.score * matches[i].score_m;
  }
  RansacConfig rcfg = cfg.ransac;
  rcfg.weighted_sampling = true;
  const RansacResult rs = ransac(s, t, frame, rcfg, sampling);

  for (Match& m : matches) m.score_in = 0.0;
  for (int i : rs.inliers) matches[i].score_in = 1.0;
  Eigen::VectorXd weights(n);
  for (Eigen::Index i = 0; i < n; ++i) weights[i] = matches[i].weight = match_weight(matches[i]);

  RegistrationResult result{weighted_dlt(s, t, weights, frame), std::move(matches), rs.inliers, {}};
  result.diagnostics.ransac_iterations = rcfg.iterations;
  result.diagnostics.ransac_best_iteration = rs.best_iteration;
  result.diagnostics.inlier_count = static_cast<int>(rs.inliers.size());
  const Eigen::Matrix2Xd si = gather(s, rs.inliers), ti = gather(t, rs.inliers);
  result.diagnostics.initial_cost = reprojection_cost(rs.h.matrix(), si, ti);
  result.diagnostics.final_cost = reprojection_cost(result.h_est.matrix(), si, ti);
  return result;
}

RegistrationResult run_classical_pipeline(const std::vector<Keypoint>& src,
                                          const std::vector<Keypoint>& tgt, int width, int height,
                                          const ClassicalPipelineConfig& cfg) {
  if (src.size() < 4 || tgt.size() < 4)
    throw Error(ErrorCode::InsufficientPoints, "fewer than 4 keypoints per image");
  const Frame frame = Frame::pixel(width, height);
  const std::vector<IndexMatch> pairs = mutual_nn(src, tgt, cfg.similarity);
  const auto n = static_cast<Eigen::Index>(pairs.size());
  if (n < 4) throw Error(ErrorCode::InsufficientPoints, "fewer than 4 mutual matches");

  std::vector<Match> matches(pairs.size());
  Eigen::Matrix2Xd s(2, n), t(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const IndexMatch& pm = pairs[i];
    Match& m = matches[i];
    m.src = src[pm.src];
    m.pseudo_tgt = tgt[pm.tgt];
    m.src_index = pm.src;
    m.tgt_index = pm.tgt;
    m.score_m = std::clamp(0.5 * (pm.similarity + 1.0), 0.0, 1.0);
    s.col(i) = m.src.p;
    t.col(i) = m.pseudo_tgt.p;
  }
  const RansacResult rs = ransac(s, t, frame, cfg.ransac);
  for (int i : rs.inliers) matches[i].score_in = 1.0;
  for (Match& m : matches) m.weight = match_weight(m);

  const Eigen::Matrix2Xd si = gather(s, rs.inliers), ti = gather(t, rs.inliers);
  const RefineResult refined = refine_dls(rs.h, si, ti, cfg.refine);
  RegistrationResult result{refined.h, std::move(matches), rs.inliers, {}};
  result.diagnostics.ransac_iterations = cfg.ransac.iterations;
  result.diagnostics.ransac_best_iteration = rs.best_iteration;
  result.diagnostics.inlier_count = static_cast<int>(rs.inliers.size());
  result.diagnostics.refine_iterations = refined.iterations;
  result.diagnostics.initial_cost = refined.initial_cost;
  result.diagnostics.final_cost = refined.final_cost;
  return result;
}

RegistrationResult run_classical_pipeline(const DetectionResponse& src_det,
                                          const DescriptorMap& src_desc,
                                          const DetectionResponse& tgt_det,
                                          const DescriptorMap& tgt_desc,
                                          const ClassicalPipelineConfig& cfg) {
  if (src_det.width() != tgt_det.width() || src_det.height() != tgt_det.height())
    throw Error(ErrorCode::ShapeMismatch, "source and target images differ in size");
  const auto src = extract_classical(decode_heatmap(src_det), src_desc, cfg.extract);
  const auto tgt = extract_classical(decode_heatmap(tgt_det), tgt_desc, cfg.extract);
  return run_classical_pipeline(src, tgt, src_det.width(), src_det.height(), cfg);
}

}  // namespace xspec
