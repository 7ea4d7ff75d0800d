#pragma once

#include "xspec/metrics.hpp"

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

// Brute-force metric implementations written without the library's helpers.
namespace xspec::oracle {

inline bool warp(const Eigen::Matrix3d& m, const Eigen::Vector2d& p, Eigen::Vector2d& out) {
  const double w = m(2, 0) * p.x() + m(2, 1) * p.y() + m(2, 2);
  if (std::abs(w) < 1e-12) return false;
  out = {(m(0, 0) * p.x() + m(0, 1) * p.y() + m(0, 2)) / w,
         (m(1, 0) * p.x() + m(1, 1) * p.y() + m(1, 2)) / w};
  return true;
}

inline bool inside(const Eigen::Vector2d& p, int w, int h) {
  return p.x() >= 0 && p.x() <= w - 1 && p.y() >= 0 && p.y() <= h - 1;
}

inline double ace(const Eigen::Matrix3d& h_gt, const Eigen::Matrix3d& h_est, int w, int h) {
  const Eigen::Matrix3d m = h_est.inverse() * h_gt;
  double sum = 0.0;
  for (double u : {0.0, w - 1.0})
    for (double v : {0.0, h - 1.0}) {
      Eigen::Vector2d q = Eigen::Vector2d::Zero();
      sum += warp(m, {u, v}, q) ? std::hypot(q.x() - u, q.y() - v) : std::numeric_limits<double>::infinity();
    }
  return sum / 4.0;
}

inline std::vector<double> success(const std::vector<double>& values, const std::vector<double>& thresholds) {
  std::vector<double> out;
  for (double t : thresholds) {
    int below = 0;
    for (double v : values) below += v < t;
    out.push_back(values.empty() ? 0.0 : static_cast<double>(below) / values.size());
  }
  return out;
}

inline double repeatability(const Eigen::Matrix2Xd& a, const Eigen::Matrix2Xd& b, const Eigen::Matrix3d& h,
                            int w, int hh, double d) {
  const Eigen::Matrix3d hinv = h.inverse();
  std::vector<bool> av(a.cols()), bv(b.cols());
  std::vector<Eigen::Vector2d> aw(a.cols()), bw(b.cols());
  for (int i = 0; i < a.cols(); ++i) av[i] = warp(h, a.col(i), aw[i]) && inside(aw[i], w, hh);
  for (int j = 0; j < b.cols(); ++j) bv[j] = warp(hinv, b.col(j), bw[j]) && inside(bw[j], w, hh);
  int n = 0, rep = 0;
  for (int i = 0; i < a.cols(); ++i) {
    if (!av[i]) continue;
    ++n;
    bool hit = false;
    for (int j = 0; j < b.cols(); ++j) hit = hit || (bv[j] && (aw[i] - b.col(j)).norm() <= d);
    rep += hit;
  }
  for (int j = 0; j < b.cols(); ++j) {
    if (!bv[j]) continue;
    ++n;
    bool hit = false;
    for (int i = 0; i < a.cols(); ++i) hit = hit || (av[i] && (bw[j] - a.col(i)).norm() <= d);
    rep += hit;
  }
  return n == 0 ? 0.0 : static_cast<double>(rep) / n;
}

inline bool correct(const Eigen::Matrix3d& h, const Eigen::Vector2d& s, const Eigen::Vector2d& t, double d) {
  Eigen::Vector2d q;
  return warp(h, s, q) && (q - t).norm() < d;
}

inline double matching_score(const Eigen::Matrix2Xd& a, const Eigen::Matrix2Xd& b,
                             const std::vector<IndexMatch>& matches, const Eigen::Matrix3d& h, int w, int hh,
                             double d) {
  const Eigen::Matrix3d hinv = h.inverse();
  auto a_in = [&](int i) {
    Eigen::Vector2d q;
    return warp(h, a.col(i), q) && inside(q, w, hh);
  };
  auto b_in = [&](int j) {
    Eigen::Vector2d q;
    return warp(hinv, b.col(j), q) && inside(q, w, hh);
  };
  int av = 0, bv = 0, good = 0;
  for (int i = 0; i < a.cols(); ++i) av += a_in(i);
  for (int j = 0; j < b.cols(); ++j) bv += b_in(j);
  for (const IndexMatch& m : matches)
    good += a_in(m.src) && b_in(m.tgt) && correct(h, a.col(m.src), b.col(m.tgt), d);
  const int denom = std::min(av, bv);
  return denom == 0 ? 0.0 : std::min(1.0, static_cast<double>(good) / denom);
}

inline double mma(const Eigen::Matrix2Xd& s, const Eigen::Matrix2Xd& t, const Eigen::Matrix3d& h, double d) {
  int good = 0;
  for (int i = 0; i < s.cols(); ++i) good += correct(h, s.col(i), t.col(i), d);
  return s.cols() == 0 ? 0.0 : static_cast<double>(good) / s.cols();
}

inline double average_precision(const std::vector<ScoredCandidate>& c) {
  std::vector<int> order(c.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    return c[x].score != c[y].score ? c[x].score > c[y].score : x < y;
  });
  int pos = 0;
  for (const auto& x : c) pos += x.correct;
  if (pos == 0) return 0.0;
  std::vector<double> r{0.0}, p{1.0};
  int tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += c[order[k]].correct;
    r.push_back(static_cast<double>(tp) / pos);
    p.push_back(static_cast<double>(tp) / (k + 1.0));
  }
  double area = 0.0;
  for (std::size_t k = 1; k < r.size(); ++k) area += (r[k] - r[k - 1]) * (p[k] + p[k - 1]) / 2.0;
  return area;
}

struct Instance {
  Homography h;
  Eigen::Matrix2Xd a, b;
  std::vector<IndexMatch> matches;
  std::vector<ScoredCandidate> candidates;
  double dist;
  int width, height;
};

/// Random metric instance with up to 20 keypoints per image, some of them
/// planted near each other's warped positions.
template <class Gen>
Instance random_instance(Gen& g) {
  const int w = 96, hh = 72;
  Instance in{g.homography(w, hh), {}, {}, {}, {}, g.uniform(1.0, 5.0), w, hh};
  const int na = g.integer(0, 20), nb = g.integer(0, 20);
  in.a = g.points(na, w, hh);
  in.b = g.points(nb, w, hh);
  for (int j = 0; j < std::min(na, nb); ++j) {
    Eigen::Vector2d q;
    if (g.coin() && warp(in.h.matrix(), in.a.col(j), q)) in.b.col(j) = q + Eigen::Vector2d(g.normal(2.0), g.normal(2.0));
    in.matches.push_back({j, j, 0.0});
  }
  for (int k = 0; k < 20; ++k) in.candidates.push_back({std::round(g.uniform(0, 5)), g.coin()});
  return in;
}

}  // namespace xspec::oracle
