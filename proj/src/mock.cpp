#include "xspec/mock.hpp"

#include "xspec/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xspec {
namespace {

constexpr double kCenter = 0.5 * (kCellSize - 1);

Eigen::Vector2d cell_center(int row, int col) {
  return {kCellSize * col + kCenter, kCellSize * row + kCenter};
}

int nearest_pixel_label(const Eigen::Vector2d& p, int row, int col) {
  const int du = std::clamp(static_cast<int>(std::lround(p.x())) - kCellSize * col, 0, kCellSize - 1);
  const int dv = std::clamp(static_cast<int>(std::lround(p.y())) - kCellSize * row, 0, kCellSize - 1);
  return dv * kCellSize + du;
}

Eigen::VectorXd noisy(const Eigen::VectorXd& d, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0.0) return d;
  std::normal_distribution<double> n(0.0, sigma);
  Eigen::VectorXd out = d;
  for (Eigen::Index k = 0; k < out.size(); ++k) out[k] += n(rng);
  return out.normalized();
}

void set_descriptor(Grid3& g, int row, int col, const Eigen::VectorXd& d) {
  auto cell = g.cell(row, col);
  std::copy(d.data(), d.data() + d.size(), cell.begin());
}

}  // namespace

void MockFeatureConfig::validate() const {
  if (width < kCellSize || height < kCellSize || width % kCellSize || height % kCellSize)
    throw Error(ErrorCode::InvalidConfig, "mock image size must be a positive multiple of 8");
  if (keypoints < 0 || descriptor_length < 2 || placement_attempts < 1)
    throw Error(ErrorCode::InvalidConfig, "invalid mock keypoint or descriptor settings");
  if (!(temperature > 0.0) || !(floor > 0.0) || !(peak > floor) || 4.0 * peak + kCellPixels * floor >= 1.0)
    throw Error(ErrorCode::InvalidConfig, "mock heatmap levels must satisfy 0 < floor < peak < 1/4");
  if (!(center_tolerance >= 0.0) || center_tolerance > kCenter)
    throw Error(ErrorCode::InvalidConfig, "center tolerance must lie in [0, 3.5]");
  if (!(jitter_sigma >= 0.0) || !(descriptor_noise >= 0.0) ||
      !(outlier_fraction >= 0.0 && outlier_fraction <= 1.0))
    throw Error(ErrorCode::InvalidConfig, "corruption settings out of range");
}

void encode_keypoint(Grid3& logits, int row, int col, const Eigen::Vector2d& p, double temperature,
                     double peak, double floor) {
  const double left = kCellSize * col;
  const double top = kCellSize * row;
  const double lu = std::clamp(p.x() - left, 0.0, kCellSize - 1.0);
  const double lv = std::clamp(p.y() - top, 0.0, kCellSize - 1.0);
  const int u0 = std::min(static_cast<int>(std::floor(lu)), kCellSize - 2);
  const int v0 = std::min(static_cast<int>(std::floor(lv)), kCellSize - 2);
  const double fu = lu - u0;
  const double fv = lv - v0;
  const double w[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv};
  const double wmax = *std::max_element(w, w + 4);

  double prob[kDetectorChannels];
  std::fill(prob, prob + kCellPixels, floor);
  const int idx[4] = {v0 * kCellSize + u0, v0 * kCellSize + u0 + 1, (v0 + 1) * kCellSize + u0,
                      (v0 + 1) * kCellSize + u0 + 1};
  for (int k = 0; k < 4; ++k)
    if (w[k] > 0.0) prob[idx[k]] = std::max(floor, peak + temperature * std::log(w[k] / wmax));
  prob[kDustbin] = 1.0 - std::accumulate(prob, prob + kCellPixels, 0.0);
  auto cell = logits.cell(row, col);
  for (int k = 0; k < kDetectorChannels; ++k) cell[k] = std::log(prob[k]);
}

void encode_background(Grid3& logits, int row, int col, double floor) {
  auto cell = logits.cell(row, col);
  std::fill(cell.begin(), cell.begin() + kCellPixels, std::log(floor));
  cell[kDustbin] = std::log1p(-kCellPixels * floor);
}

Eigen::VectorXd random_unit_vector(int length, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(length);
  do {
    for (int k = 0; k < length; ++k) v[k] = n(rng);
  } while (!(v.norm() > 1e-8));
  return v.normalized();
}

MockFeatures generate_mock_features(const Homography& h_gt, const MockFeatureConfig& cfg,
                                    std::uint64_t seed) {
  cfg.validate();
  if (!h_gt.frame().is_pixel() || h_gt.frame().width != cfg.width ||
      h_gt.frame().height != cfg.height)
    throw Error(ErrorCode::FrameMismatch, "mock features need a pixel homography of the image size");
  std::mt19937_64 rng(seed);
  const int rows = cfg.height / kCellSize;
  const int cols = cfg.width / kCellSize;
  const int cells = rows * cols;
  const double tol = cfg.center_tolerance;
  std::uniform_real_distribution<double> offset(-tol, tol);

  // Placement: source near its cell center, warped target near an unused
  // target cell center.
  std::vector<int> order(cells);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> tgt_used(cells, 0);
  std::vector<int> src_cell, tgt_cell;
  std::vector<Eigen::Vector2d> src_pts, tgt_pts;
  for (int c : order) {
    if (static_cast<int>(src_pts.size()) >= cfg.keypoints) break;
    const Eigen::Vector2d center = cell_center(c / cols, c % cols);
    for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
      const Eigen::Vector2d ps = center + Eigen::Vector2d(offset(rng), offset(rng));
      const Eigen::Vector3d q = h_gt.matrix() * ps.homogeneous();
      if (std::abs(q.z()) < 1e-12) continue;
      const Eigen::Vector2d pt = q.head<2>() / q.z();
      if (!(pt.x() >= 0.0 && pt.x() <= cfg.width - 1 && pt.y() >= 0.0 && pt.y() <= cfg.height - 1))
        continue;
      const int tc = std::clamp(static_cast<int>(pt.x()) / kCellSize, 0, cols - 1);
      const int tr = std::clamp(static_cast<int>(pt.y()) / kCellSize, 0, rows - 1);
      const Eigen::Vector2d d = (pt - cell_center(tr, tc)).cwiseAbs();
      if (d.maxCoeff() > tol || tgt_used[tr * cols + tc]) continue;
      tgt_used[tr * cols + tc] = 1;
      src_cell.push_back(c);
      tgt_cell.push_back(tr * cols + tc);
      src_pts.push_back(ps);
      tgt_pts.push_back(pt);
      break;
    }
  }
  const int n = static_cast<int>(src_pts.size());

  // Outliers move to a random unused target cell.
  std::vector<bool> outlier(n, false);
  const int n_out = static_cast<int>(std::lround(cfg.outlier_fraction * n));
  std::vector<int> pick(n);
  std::iota(pick.begin(), pick.end(), 0);
  std::shuffle(pick.begin(), pick.end(), rng);
  std::vector<int> free_cells;
  for (int c = 0; c < cells; ++c)
    if (!tgt_used[c]) free_cells.push_back(c);
  std::shuffle(free_cells.begin(), free_cells.end(), rng);
  for (int k = 0; k < n_out && k < static_cast<int>(free_cells.size()); ++k) {
    const int i = pick[k];
    const int c = free_cells[k];
    tgt_used[tgt_cell[i]] = 0;
    tgt_used[c] = 1;
    tgt_cell[i] = c;
    tgt_pts[i] = cell_center(c / cols, c % cols) + Eigen::Vector2d(offset(rng), offset(rng));
    outlier[i] = true;
  }

  if (cfg.jitter_sigma > 0.0) {
    std::normal_distribution<double> jitter(0.0, cfg.jitter_sigma);
    for (int i = 0; i < n; ++i) {
      const int r = tgt_cell[i] / cols, c = tgt_cell[i] % cols;
      tgt_pts[i].x() = std::clamp(tgt_pts[i].x() + jitter(rng), kCellSize * c + 0.0, kCellSize * c + 7.0);
      tgt_pts[i].y() = std::clamp(tgt_pts[i].y() + jitter(rng), kCellSize * r + 0.0, kCellSize * r + 7.0);
    }
  }

  Grid3 src_logits(rows, cols, kDetectorChannels), tgt_logits(rows, cols, kDetectorChannels);
  Grid3 src_desc(rows, cols, cfg.descriptor_length), tgt_desc(rows, cols, cfg.descriptor_length);
  DetectorTarget src_labels{rows, cols, std::vector<int>(cells, kDustbin)};
  DetectorTarget tgt_labels = src_labels;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      encode_background(src_logits, r, c, cfg.floor);
      encode_background(tgt_logits, r, c, cfg.floor);
      set_descriptor(src_desc, r, c, random_unit_vector(cfg.descriptor_length, rng));
      set_descriptor(tgt_desc, r, c, random_unit_vector(cfg.descriptor_length, rng));
    }

  MockFeatures out{h_gt,
                   DetectionResponse(Grid3(1, 1, kDetectorChannels)),
                   DetectionResponse(Grid3(1, 1, kDetectorChannels)),
                   DescriptorMap::normalized(Grid3(1, 1, 2, 1.0)),
                   DescriptorMap::normalized(Grid3(1, 1, 2, 1.0)),
                   {},
                   {},
                   Eigen::Matrix2Xd(2, n),
                   Eigen::Matrix2Xd(2, n),
                   outlier};
  for (int i = 0; i < n; ++i) {
    const int sr = src_cell[i] / cols, sc = src_cell[i] % cols;
    const int tr = tgt_cell[i] / cols, tc = tgt_cell[i] % cols;
    encode_keypoint(src_logits, sr, sc, src_pts[i], cfg.temperature, cfg.peak, cfg.floor);
    encode_keypoint(tgt_logits, tr, tc, tgt_pts[i], cfg.temperature, cfg.peak, cfg.floor);
    src_labels.labels[src_cell[i]] = nearest_pixel_label(src_pts[i], sr, sc);
    tgt_labels.labels[tgt_cell[i]] = nearest_pixel_label(tgt_pts[i], tr, tc);
    const Eigen::VectorXd shared = random_unit_vector(cfg.descriptor_length, rng);
    set_descriptor(src_desc, sr, sc, noisy(shared, cfg.descriptor_noise, rng));
    set_descriptor(tgt_desc, tr, tc, noisy(shared, cfg.descriptor_noise, rng));
    out.src_points.col(i) = src_pts[i];
    out.tgt_points.col(i) = tgt_pts[i];
  }
  out.src_det = DetectionResponse(std::move(src_logits));
  out.tgt_det = DetectionResponse(std::move(tgt_logits));
  out.src_desc = DescriptorMap::normalized(std::move(src_desc));
  out.tgt_desc = DescriptorMap::normalized(std::move(tgt_desc));
  out.src_labels = std::move(src_labels);
  out.tgt_labels = std::move(tgt_labels);
  return out;
}

}  // namespace xspec
