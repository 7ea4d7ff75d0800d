#include "xspec/matching.hpp"

#include "xspec/error.hpp"

#include <algorithm>
#include <cmath>

namespace xspec {
namespace {

constexpr double kVarianceEpsilon = 1e-12;
constexpr Eigen::Index kBlockRows = 256;

Eigen::MatrixXd zncc_rows(const std::vector<Keypoint>& kps) {
  if (kps.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(kps.size()), kps.front().desc.size());
  for (std::size_t i = 0; i < kps.size(); ++i) {
    if (kps[i].desc.size() != m.cols())
      throw Error(ErrorCode::ShapeMismatch, "descriptor lengths differ");
    m.row(static_cast<Eigen::Index>(i)) = zncc_normalize(kps[i].desc).transpose();
  }
  return m;
}

Eigen::MatrixXd desc_rows(const std::vector<Keypoint>& kps) {
  if (kps.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(kps.size()), kps.front().desc.size());
  for (std::size_t i = 0; i < kps.size(); ++i) {
    if (kps[i].desc.size() != m.cols())
      throw Error(ErrorCode::ShapeMismatch, "descriptor lengths differ");
    m.row(static_cast<Eigen::Index>(i)) = kps[i].desc.transpose();
  }
  return m;
}

}  // namespace

void MatcherConfig::validate() const {
  if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidConfig, "matcher temperature must be positive");
}

Eigen::VectorXd zncc_normalize(const Eigen::VectorXd& d) {
  if (d.size() == 0) throw Error(ErrorCode::ZeroVariance, "empty descriptor");
  Eigen::VectorXd c = d.array() - d.mean();
  const double sq = c.squaredNorm();
  if (!(sq / static_cast<double>(d.size()) > kVarianceEpsilon))
    throw Error(ErrorCode::ZeroVariance, "descriptor is numerically constant");
  return c / std::sqrt(sq);
}

double zncc(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "descriptor lengths differ");
  return std::clamp(zncc_normalize(a).dot(zncc_normalize(b)), -1.0, 1.0);
}

double match_score(const Eigen::VectorXd& d_src, const Eigen::VectorXd& d_pseudo) {
  return 0.5 * (zncc(d_src, d_pseudo) + 1.0);
}

std::vector<Match> soft_match(const std::vector<Keypoint>& src, const std::vector<Keypoint>& tgt,
                              const Heatmap& tgt_heatmap, const Grid3& tgt_descriptors,
                              const MatcherConfig& cfg) {
  cfg.validate();
  if (tgt.empty()) throw Error(ErrorCode::EmptyTargetSet, "no target keypoints to match against");
  std::vector<Match> out(src.size());
  if (src.empty()) return out;

  const Eigen::MatrixXd s = zncc_rows(src);
  const Eigen::MatrixXd t = zncc_rows(tgt);
  if (s.cols() != t.cols()) throw Error(ErrorCode::ShapeMismatch, "descriptor lengths differ");
  Eigen::Matrix2Xd tgt_pts(2, t.rows());
  for (Eigen::Index j = 0; j < t.rows(); ++j) tgt_pts.col(j) = tgt[j].p;

  const double inv_tau = 1.0 / cfg.temperature;
  // One column per source keypoint so each softmax runs over contiguous memory.
  Eigen::MatrixXd z;
  for (Eigen::Index start = 0; start < s.rows(); start += kBlockRows) {
    const Eigen::Index n = std::min(kBlockRows, s.rows() - start);
    z.noalias() = t * s.middleRows(start, n).transpose();
    for (Eigen::Index r = 0; r < n; ++r) {
      auto col = z.col(r);
      const double mx = col.maxCoeff();
      col = ((col.array() - mx) * inv_tau).exp();
      const double sum = col.sum();
      Match& m = out[start + r];
      m.src = src[start + r];
      m.src_index = static_cast<int>(start + r);
      m.pseudo_tgt.p = tgt_pts * col / sum;
    }
  }
  for (Match& m : out) {
    m.pseudo_tgt.score = bilinear_sample_scalar(tgt_heatmap, m.pseudo_tgt.p);
    m.pseudo_tgt.desc = bilinear_sample_descriptor(tgt_descriptors, m.pseudo_tgt.p);
    m.score_m = match_score(m.src.desc, m.pseudo_tgt.desc);
  }
  return out;
}

Eigen::MatrixXd similarity_matrix(const std::vector<Keypoint>& src,
                                  const std::vector<Keypoint>& tgt, Similarity sim) {
  if (src.empty() || tgt.empty())
    return Eigen::MatrixXd(static_cast<Eigen::Index>(src.size()), static_cast<Eigen::Index>(tgt.size()));
  const Eigen::MatrixXd s = sim == Similarity::Zncc ? zncc_rows(src) : desc_rows(src);
  const Eigen::MatrixXd t = sim == Similarity::Zncc ? zncc_rows(tgt) : desc_rows(tgt);
  if (s.cols() != t.cols()) throw Error(ErrorCode::ShapeMismatch, "descriptor lengths differ");
  return s * t.transpose();
}

std::vector<IndexMatch> mutual_nn(const std::vector<Keypoint>& src,
                                  const std::vector<Keypoint>& tgt, Similarity sim) {
  std::vector<IndexMatch> out;
  if (src.empty() || tgt.empty()) return out;
  const Eigen::MatrixXd table = similarity_matrix(src, tgt, sim);
  std::vector<Eigen::Index> best_tgt(table.rows());
  std::vector<Eigen::Index> best_src(table.cols());
  std::fill(best_tgt.begin(), best_tgt.end(), 0);
  std::fill(best_src.begin(), best_src.end(), 0);
  // Strict comparisons keep the lowest index among ties.
  for (Eigen::Index i = 0; i < table.rows(); ++i)
    for (Eigen::Index j = 0; j < table.cols(); ++j) {
      if (table(i, j) > table(i, best_tgt[i])) best_tgt[i] = j;
      if (table(i, j) > table(best_src[j], j)) best_src[j] = i;
    }
  for (Eigen::Index i = 0; i < table.rows(); ++i) {
    const Eigen::Index j = best_tgt[i];
    if (best_src[j] == i)
      out.push_back({static_cast<int>(i), static_cast<int>(j), table(i, j)});
  }
  return out;
}

}  // namespace xspec
