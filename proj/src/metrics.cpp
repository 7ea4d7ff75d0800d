#include "xspec/metrics.hpp"

#include "xspec/error.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace xspec {
namespace {

bool in_image(const Eigen::Vector3d& q, int width, int height, Eigen::Vector2d& out) {
  if (std::abs(q.z()) < 1e-12) return false;
  out = q.head<2>() / q.z();
  return out.x() >= 0.0 && out.x() <= width - 1 && out.y() >= 0.0 && out.y() <= height - 1;
}

/// Columns of `pts` that `m` maps inside the image, with their images.
std::vector<std::pair<Eigen::Index, Eigen::Vector2d>> visible(const Eigen::Matrix3d& m,
                                                              const Eigen::Matrix2Xd& pts,
                                                              int width, int height) {
  std::vector<std::pair<Eigen::Index, Eigen::Vector2d>> out;
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    Eigen::Vector2d w;
    if (in_image(m * pts.col(i).homogeneous(), width, height, w)) out.emplace_back(i, w);
  }
  return out;
}

std::string format_optional(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

void MetricsConfig::validate() const {
  if (!std::is_sorted(ace_thresholds.begin(), ace_thresholds.end()) ||
      std::any_of(ace_thresholds.begin(), ace_thresholds.end(), [](double t) { return !(t > 0.0); }))
    throw Error(ErrorCode::InvalidConfig, "ACE thresholds must be positive and ascending");
  if (!(correct_dist > 0.0)) throw Error(ErrorCode::InvalidConfig, "correct_dist must be positive");
}

double ace(const Homography& h_gt, const Homography& h_est) {
  if (!h_gt.frame().is_pixel() || !(h_gt.frame() == h_est.frame()))
    throw Error(ErrorCode::FrameMismatch, "ACE needs pixel-frame homographies of one image size");
  const Eigen::Matrix3d m = h_est.matrix().inverse() * h_gt.matrix();
  const PointSet corners = corner_set(h_gt.frame().width, h_gt.frame().height);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < 4; ++i)
    sum += (corners.coords.col(i) - transform_point(m, corners.coords.col(i))).norm();
  return sum / 4.0;
}

std::vector<double> success_fractions(const std::vector<double>& ace_values,
                                      const std::vector<double>& thresholds) {
  std::vector<double> out(thresholds.size(), 0.0);
  if (ace_values.empty()) return out;
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const auto below = std::count_if(ace_values.begin(), ace_values.end(),
                                     [&](double v) { return v < thresholds[t]; });
    out[t] = static_cast<double>(below) / static_cast<double>(ace_values.size());
  }
  return out;
}

double repeatability(const Eigen::Matrix2Xd& a, const Eigen::Matrix2Xd& b, const Homography& h_gt,
                     double correct_dist) {
  const int w = h_gt.frame().width;
  const int h = h_gt.frame().height;
  const auto a_in_b = visible(h_gt.matrix(), a, w, h);
  const auto b_in_a = visible(h_gt.matrix().inverse(), b, w, h);
  if (a_in_b.empty() && b_in_a.empty()) return 0.0;
  std::vector<char> a_kept(a.cols(), 0), b_kept(b.cols(), 0);
  for (const auto& [i, p] : a_in_b) a_kept[i] = 1;
  for (const auto& [j, p] : b_in_a) b_kept[j] = 1;

  int repeated = 0;
  for (const auto& [i, p] : a_in_b)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      if (b_kept[j] && (p - b.col(j)).norm() <= correct_dist) {
        ++repeated;
        break;
      }
  for (const auto& [j, p] : b_in_a)
    for (Eigen::Index i = 0; i < a.cols(); ++i)
      if (a_kept[i] && (p - a.col(i)).norm() <= correct_dist) {
        ++repeated;
        break;
      }
  return static_cast<double>(repeated) / static_cast<double>(a_in_b.size() + b_in_a.size());
}

bool is_correct_match(const Homography& h_gt, const Eigen::Vector2d& src,
                      const Eigen::Vector2d& tgt, double correct_dist) {
  const Eigen::Vector3d q = h_gt.matrix() * src.homogeneous();
  if (std::abs(q.z()) < 1e-12) return false;
  return (q.head<2>() / q.z() - tgt).norm() < correct_dist;
}

double matching_score(const Eigen::Matrix2Xd& a, const Eigen::Matrix2Xd& b,
                      const std::vector<IndexMatch>& matches, const Homography& h_gt,
                      double correct_dist) {
  const int w = h_gt.frame().width;
  const int h = h_gt.frame().height;
  const auto a_vis = visible(h_gt.matrix(), a, w, h);
  const auto b_vis = visible(h_gt.matrix().inverse(), b, w, h);
  const std::size_t denom = std::min(a_vis.size(), b_vis.size());
  if (denom == 0) return 0.0;
  std::vector<char> a_in(a.cols(), 0), b_in(b.cols(), 0);
  for (const auto& [i, p] : a_vis) a_in[i] = 1;
  for (const auto& [j, p] : b_vis) b_in[j] = 1;
  std::size_t correct = 0;
  for (const IndexMatch& m : matches)
    if (a_in[m.src] && b_in[m.tgt] && is_correct_match(h_gt, a.col(m.src), b.col(m.tgt), correct_dist))
      ++correct;
  return std::min(1.0, static_cast<double>(correct) / static_cast<double>(denom));
}

double mma(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& tgt, const Homography& h_gt,
           double correct_dist) {
  if (src.cols() == 0) return 0.0;
  int correct = 0;
  for (Eigen::Index i = 0; i < src.cols(); ++i)
    correct += is_correct_match(h_gt, src.col(i), tgt.col(i), correct_dist);
  return static_cast<double>(correct) / static_cast<double>(src.cols());
}

double mean_ap(std::vector<ScoredCandidate> candidates) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const ScoredCandidate& x, const ScoredCandidate& y) { return x.score > y.score; });
  const auto positives = std::count_if(candidates.begin(), candidates.end(),
                                       [](const ScoredCandidate& c) { return c.correct; });
  if (positives == 0) return 0.0;
  double area = 0.0, prev_recall = 0.0, prev_precision = 1.0;
  int tp = 0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    tp += candidates[k].correct;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    area += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    prev_recall = recall;
    prev_precision = precision;
  }
  return area;
}

MetricsReport aggregate(const std::vector<PairEvaluation>& pairs, const MetricsConfig& cfg) {
  cfg.validate();
  MetricsReport r;
  r.thresholds = cfg.ace_thresholds;
  r.pairs = static_cast<int>(pairs.size());
  std::vector<ScoredCandidate> pool;
  auto mean_of = [&](auto member) -> std::optional<double> {
    double sum = 0.0;
    int n = 0;
    for (const auto& p : pairs)
      if (const auto& v = p.*member) {
        sum += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / n;
  };
  bool any_candidates = false;
  for (const auto& p : pairs) {
    r.ace_values.push_back(p.failed ? std::numeric_limits<double>::infinity() : p.ace);
    r.failures += p.failed;
    any_candidates |= p.repeatability.has_value();
    pool.insert(pool.end(), p.candidates.begin(), p.candidates.end());
  }
  r.success = success_fractions(r.ace_values, r.thresholds);
  r.repeatability = mean_of(&PairEvaluation::repeatability);
  r.mscore = mean_of(&PairEvaluation::mscore);
  r.mma = mean_of(&PairEvaluation::mma);
  r.n_k = mean_of(&PairEvaluation::detections);
  if (any_candidates) r.map = mean_ap(pool);
  return r;
}

void write_metrics_csv(std::ostream& out, const std::vector<std::string>& labels_method,
                       const std::vector<std::string>& labels_pipeline,
                       const std::vector<MetricsReport>& reports) {
  out << "method,pipeline,pairs,failures";
  const std::vector<double> thresholds =
      reports.empty() ? MetricsConfig{}.ace_thresholds : reports.front().thresholds;
  for (double t : thresholds) out << ",ace_lt_" << t;
  out << ",rep,ms,mma,map,n_k\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const MetricsReport& r = reports[i];
    out << labels_method[i] << ',' << labels_pipeline[i] << ',' << r.pairs << ',' << r.failures;
    for (double s : r.success) out << ',' << format_optional(s);
    out << ',' << format_optional(r.repeatability) << ',' << format_optional(r.mscore) << ','
        << format_optional(r.mma) << ',' << format_optional(r.map) << ',' << format_optional(r.n_k)
        << '\n';
  }
}

}  // namespace xspec
