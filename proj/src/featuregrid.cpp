#include "xspec/featuregrid.hpp"

#include "xspec/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xspec {
namespace {

constexpr double kBoundsSlack = 1e-9;
constexpr double kCellCenter = 0.5 * (kCellSize - 1);

void check_finite(const Grid3& g, const char* what) {
  for (double x : g.data)
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, std::string(what) + " has non-finite entries");
}

void axis_stencil(double x, int n, int& i0, int& i1, double& f, bool& clamped) {
  clamped = false;
  if (n == 1) {
    i0 = i1 = 0;
    f = 0.0;
    clamped = true;
    return;
  }
  if (x <= 0.0) {
    clamped = x < 0.0;
    x = 0.0;
  } else if (x >= n - 1) {
    clamped = x > n - 1;
    x = n - 1;
  }
  i0 = std::min(static_cast<int>(std::floor(x)), n - 2);
  i1 = i0 + 1;
  f = x - i0;
}

}  // namespace

Grid3::Grid3(int r, int c, int ch, double fill)
    : rows(r), cols(c), channels(ch), data(static_cast<std::size_t>(r) * c * ch, fill) {
  if (r < 0 || c < 0 || ch < 0) throw Error(ErrorCode::ShapeMismatch, "negative grid dimension");
}

DetectionResponse::DetectionResponse(Grid3 logits) : logits_(std::move(logits)) {
  if (logits_.channels != kDetectorChannels || logits_.rows < 1 || logits_.cols < 1)
    throw Error(ErrorCode::ShapeMismatch, "detection response must be (H/8) x (W/8) x 65");
  check_finite(logits_, "detection response");
}

DescriptorMap::DescriptorMap(Grid3 values) : values_(std::move(values)) {
  if (values_.rows < 1 || values_.cols < 1 || values_.channels < 1)
    throw Error(ErrorCode::ShapeMismatch, "descriptor map must be non-empty");
  check_finite(values_, "descriptor map");
  for (int r = 0; r < values_.rows; ++r)
    for (int c = 0; c < values_.cols; ++c) {
      const auto cell = values_.cell(r, c);
      const double n = Eigen::Map<const Eigen::VectorXd>(cell.data(), cell.size()).norm();
      if (std::abs(n - 1.0) > 1e-6)
        throw Error(ErrorCode::ShapeMismatch, "descriptor cell is not unit norm");
    }
}

DescriptorMap DescriptorMap::normalized(Grid3 values) {
  for (int r = 0; r < values.rows; ++r)
    for (int c = 0; c < values.cols; ++c) {
      auto cell = values.cell(r, c);
      Eigen::Map<Eigen::VectorXd> v(cell.data(), cell.size());
      const double n = v.norm();
      if (!(n > 0.0)) throw Error(ErrorCode::NonFinite, "cannot normalize a zero descriptor");
      v /= n;
    }
  return DescriptorMap(std::move(values));
}

BilinearStencil heatmap_stencil(const Eigen::Vector2d& p, int width, int height) {
  if (!(p.x() >= -kBoundsSlack && p.x() <= width - 1 + kBoundsSlack && p.y() >= -kBoundsSlack &&
        p.y() <= height - 1 + kBoundsSlack))
    throw Error(ErrorCode::OutOfBounds, "sample position outside the heatmap");
  BilinearStencil s;
  axis_stencil(std::clamp(p.x(), 0.0, width - 1.0), width, s.u0, s.u1, s.fu, s.clamped_u);
  axis_stencil(std::clamp(p.y(), 0.0, height - 1.0), height, s.v0, s.v1, s.fv, s.clamped_v);
  return s;
}

BilinearStencil descriptor_stencil(const Eigen::Vector2d& p, int cols, int rows) {
  BilinearStencil s;
  axis_stencil((p.x() - kCellCenter) / kCellSize, cols, s.u0, s.u1, s.fu, s.clamped_u);
  axis_stencil((p.y() - kCellCenter) / kCellSize, rows, s.v0, s.v1, s.fv, s.clamped_v);
  return s;
}

Heatmap decode_heatmap(const Grid3& logits) {
  if (logits.channels != kDetectorChannels)
    throw Error(ErrorCode::ShapeMismatch, "detection response must have 65 channels");
  Heatmap h{logits.rows * kCellSize, logits.cols * kCellSize, {}};
  h.values.resize(static_cast<std::size_t>(h.height) * h.width);
  double prob[kDetectorChannels];
  for (int r = 0; r < logits.rows; ++r)
    for (int c = 0; c < logits.cols; ++c) {
      const auto x = logits.cell(r, c);
      const double mx = *std::max_element(x.begin(), x.end());
      double sum = 0.0;
      for (int k = 0; k < kDetectorChannels; ++k) sum += (prob[k] = std::exp(x[k] - mx));
      for (int k = 0; k < kCellPixels; ++k)
        h.at(r * kCellSize + k / kCellSize, c * kCellSize + k % kCellSize) = prob[k] / sum;
    }
  return h;
}

Heatmap decode_heatmap(const DetectionResponse& r) { return decode_heatmap(r.logits()); }

double bilinear_sample_scalar(const Heatmap& h, const Eigen::Vector2d& p) {
  const BilinearStencil s = heatmap_stencil(p, h.width, h.height);
  return s.w00() * h.at(s.v0, s.u0) + s.w10() * h.at(s.v0, s.u1) + s.w01() * h.at(s.v1, s.u0) +
         s.w11() * h.at(s.v1, s.u1);
}

Eigen::VectorXd interpolate_descriptor(const Grid3& grid, const Eigen::Vector2d& p) {
  const int width = grid.cols * kCellSize;
  const int height = grid.rows * kCellSize;
  if (!(p.x() >= -kBoundsSlack && p.x() <= width - 1 + kBoundsSlack && p.y() >= -kBoundsSlack &&
        p.y() <= height - 1 + kBoundsSlack))
    throw Error(ErrorCode::OutOfBounds, "sample position outside the descriptor map");
  const BilinearStencil s = descriptor_stencil(p, grid.cols, grid.rows);
  using CMap = Eigen::Map<const Eigen::VectorXd>;
  const Eigen::Index n = grid.channels;
  return s.w00() * CMap(grid.cell(s.v0, s.u0).data(), n) +
         s.w10() * CMap(grid.cell(s.v0, s.u1).data(), n) +
         s.w01() * CMap(grid.cell(s.v1, s.u0).data(), n) +
         s.w11() * CMap(grid.cell(s.v1, s.u1).data(), n);
}

Eigen::VectorXd bilinear_sample_descriptor(const Grid3& grid, const Eigen::Vector2d& p) {
  Eigen::VectorXd d = interpolate_descriptor(grid, p);
  const double n = d.norm();
  if (!(n > 1e-12)) throw Error(ErrorCode::NonFinite, "interpolated descriptor vanishes");
  return d / n;
}

Eigen::VectorXd bilinear_sample_descriptor(const DescriptorMap& d, const Eigen::Vector2d& p) {
  return bilinear_sample_descriptor(d.grid(), p);
}

}  // namespace xspec
