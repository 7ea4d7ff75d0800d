#include "xspec/extraction.hpp"

#include "xspec/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xspec {

void SoftExtractConfig::validate() const {
  if (window < 1) throw Error(ErrorCode::InvalidConfig, "window must be positive");
  if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidConfig, "temperature must be positive");
}

void ClassicalExtractConfig::validate() const {
  if (!(detection_threshold > 0.0 && detection_threshold < 1.0))
    throw Error(ErrorCode::InvalidConfig, "detection_threshold must be in (0, 1)");
  if (nms_radius < 1) throw Error(ErrorCode::InvalidConfig, "nms_radius must be >= 1");
  if (max_keypoints < 0) throw Error(ErrorCode::InvalidConfig, "max_keypoints must be >= 0");
}

Eigen::Vector2d soft_argmax_window(const Heatmap& h, int top, int left, int window,
                                   double temperature, std::vector<double>* weights) {
  const int n = window * window;
  std::vector<double> local(n);
  std::vector<double>& a = weights ? *weights : local;
  a.resize(n);
  double mx = -INFINITY;
  for (int k = 0; k < n; ++k) mx = std::max(mx, h.at(top + k / window, left + k % window));
  double sum = 0.0;
  for (int k = 0; k < n; ++k)
    sum += (a[k] = std::exp((h.at(top + k / window, left + k % window) - mx) / temperature));
  Eigen::Vector2d p = Eigen::Vector2d::Zero();
  for (int k = 0; k < n; ++k) {
    a[k] /= sum;
    p.x() += a[k] * (left + k % window);
    p.y() += a[k] * (top + k / window);
  }
  return p;
}

std::vector<Keypoint> extract_soft(const Heatmap& h, const Grid3& descriptors,
                                   const SoftExtractConfig& cfg) {
  cfg.validate();
  if (h.width % cfg.window != 0 || h.height % cfg.window != 0)
    throw Error(ErrorCode::ShapeMismatch, "window must divide the heatmap dimensions");
  if (descriptors.cols * kCellSize != h.width || descriptors.rows * kCellSize != h.height)
    throw Error(ErrorCode::ShapeMismatch, "descriptor map does not match heatmap size");
  const int wr = h.height / cfg.window;
  const int wc = h.width / cfg.window;
  std::vector<Keypoint> out;
  out.reserve(static_cast<std::size_t>(wr) * wc);
  for (int r = 0; r < wr; ++r)
    for (int c = 0; c < wc; ++c) {
      Keypoint k;
      k.p = soft_argmax_window(h, r * cfg.window, c * cfg.window, cfg.window, cfg.temperature);
      k.score = bilinear_sample_scalar(h, k.p);
      k.desc = bilinear_sample_descriptor(descriptors, k.p);
      out.push_back(std::move(k));
    }
  return out;
}

std::vector<Keypoint> extract_soft(const Heatmap& h, const DescriptorMap& d,
                                   const SoftExtractConfig& cfg) {
  return extract_soft(h, d.grid(), cfg);
}

std::vector<Keypoint> extract_classical(const Heatmap& h, const DescriptorMap& d,
                                        const ClassicalExtractConfig& cfg) {
  cfg.validate();
  if (d.width() != h.width || d.height() != h.height)
    throw Error(ErrorCode::ShapeMismatch, "descriptor map does not match heatmap size");
  std::vector<int> candidates;
  for (int i = 0; i < static_cast<int>(h.values.size()); ++i)
    if (h.values[i] > cfg.detection_threshold) candidates.push_back(i);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](int a, int b) { return h.values[a] > h.values[b]; });

  std::vector<char> suppressed(h.values.size(), 0);
  std::vector<Keypoint> out;
  const int r = cfg.nms_radius;
  for (int idx : candidates) {
    if (suppressed[idx]) continue;
    const int v = idx / h.width;
    const int u = idx % h.width;
    for (int dv = std::max(0, v - r); dv <= std::min(h.height - 1, v + r); ++dv)
      for (int du = std::max(0, u - r); du <= std::min(h.width - 1, u + r); ++du)
        suppressed[static_cast<std::size_t>(dv) * h.width + du] = 1;
    Keypoint k;
    k.p = Eigen::Vector2d(u, v);
    k.score = h.values[idx];
    k.desc = bilinear_sample_descriptor(d, k.p);
    out.push_back(std::move(k));
    if (cfg.max_keypoints > 0 && static_cast<int>(out.size()) == cfg.max_keypoints) break;
  }
  return out;
}

}  // namespace xspec
