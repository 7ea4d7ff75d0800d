#pragma once

#include <Eigen/Core>

#include <span>
#include <vector>

namespace xspec {

inline constexpr int kCellSize = 8;
inline constexpr int kCellPixels = kCellSize * kCellSize;
inline constexpr int kDetectorChannels = kCellPixels + 1;
inline constexpr int kDustbin = kCellPixels;
inline constexpr int kDefaultDescriptorLength = 64;

/// Dense row-major rows x cols x channels grid of reals.
struct Grid3 {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<double> data;

  Grid3() = default;
  Grid3(int rows, int cols, int channels, double fill = 0.0);

  std::size_t index(int r, int c, int k = 0) const {
    return (static_cast<std::size_t>(r) * cols + c) * channels + k;
  }
  double& at(int r, int c, int k) { return data[index(r, c, k)]; }
  double at(int r, int c, int k) const { return data[index(r, c, k)]; }
  std::span<double> cell(int r, int c) { return {data.data() + index(r, c), std::size_t(channels)}; }
  std::span<const double> cell(int r, int c) const {
    return {data.data() + index(r, c), std::size_t(channels)};
  }
  bool same_shape(const Grid3& o) const {
    return rows == o.rows && cols == o.cols && channels == o.channels;
  }
};

/// Cell-logit detection response of shape (H/8) x (W/8) x 65.
class DetectionResponse {
 public:
  explicit DetectionResponse(Grid3 logits);

  const Grid3& logits() const { return logits_; }
  int height() const { return logits_.rows * kCellSize; }
  int width() const { return logits_.cols * kCellSize; }

 private:
  Grid3 logits_;
};

/// H x W keypoint probability heatmap, row-major.
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int v, int u) const { return values[static_cast<std::size_t>(v) * width + u]; }
  double& at(int v, int u) { return values[static_cast<std::size_t>(v) * width + u]; }
};

/// Semi-dense (H/8) x (W/8) x C grid of unit descriptors. The descriptor of
/// cell (i, j) is anchored at pixel (8j + 3.5, 8i + 3.5).
class DescriptorMap {
 public:
  /// Requires unit-norm cells (within 1e-6).
  explicit DescriptorMap(Grid3 values);
  /// L2-normalizes every cell.
  static DescriptorMap normalized(Grid3 values);

  const Grid3& grid() const { return values_; }
  int height() const { return values_.rows * kCellSize; }
  int width() const { return values_.cols * kCellSize; }
  int length() const { return values_.channels; }

 private:
  Grid3 values_;
};

/// Per-cell class labels in [0, 64]; 64 is the dustbin ("no keypoint").
struct DetectorTarget {
  int rows = 0;
  int cols = 0;
  std::vector<int> labels;

  int label(int r, int c) const { return labels[static_cast<std::size_t>(r) * cols + c]; }
  double one_hot(int r, int c, int k) const { return label(r, c) == k ? 1.0 : 0.0; }
};

/// Bilinear interpolation stencil. Weights are (1-fu)(1-fv), fu(1-fv),
/// (1-fu)fv and fu*fv for (u0,v0), (u1,v0), (u0,v1), (u1,v1). A clamped axis
/// has zero derivative with respect to the query position.
struct BilinearStencil {
  int u0 = 0, u1 = 0, v0 = 0, v1 = 0;
  double fu = 0.0, fv = 0.0;
  bool clamped_u = false, clamped_v = false;

  double w00() const { return (1 - fu) * (1 - fv); }
  double w10() const { return fu * (1 - fv); }
  double w01() const { return (1 - fu) * fv; }
  double w11() const { return fu * fv; }
};

/// Stencil on a heatmap pixel lattice. Throws OutOfBounds outside
/// [0, W-1] x [0, H-1] (1e-9 slack for rounding).
BilinearStencil heatmap_stencil(const Eigen::Vector2d& p, int width, int height);

/// Stencil on a descriptor cell lattice for a pixel position; grid
/// coordinates outside the cell-center hull clamp to the border cells.
BilinearStencil descriptor_stencil(const Eigen::Vector2d& p, int cols, int rows);

/// Cell-wise softmax of a logit grid, dustbin dropped, cells unpacked with
/// channel k at (row k / 8, col k % 8) inside the cell.
Heatmap decode_heatmap(const Grid3& logits);
Heatmap decode_heatmap(const DetectionResponse& r);

double bilinear_sample_scalar(const Heatmap& h, const Eigen::Vector2d& p);

/// Interpolated (not renormalized) descriptor from a raw grid.
Eigen::VectorXd interpolate_descriptor(const Grid3& grid, const Eigen::Vector2d& p);

/// Interpolated and renormalized descriptor.
Eigen::VectorXd bilinear_sample_descriptor(const DescriptorMap& d, const Eigen::Vector2d& p);
Eigen::VectorXd bilinear_sample_descriptor(const Grid3& grid, const Eigen::Vector2d& p);

}  // namespace xspec
