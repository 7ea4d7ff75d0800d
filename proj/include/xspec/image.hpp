#pragma once

#include "xspec/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace xspec {

/// Single-channel image with intensities in [0, 255], row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int width, int height, double fill = 0.0);

  double at(int v, int u) const { return pixels[static_cast<std::size_t>(v) * width + u]; }
  double& at(int v, int u) { return pixels[static_cast<std::size_t>(v) * width + u]; }
};

/// Reads 8-bit PGM (P2/P5) or PNG (gray or color, converted to luma).
/// Throws ImageLoadError.
Image load_image(const std::filesystem::path& path);
/// Writes 8-bit PGM or PNG depending on the extension, rounding and clamping.
void save_image(const std::filesystem::path& path, const Image& img);

/// Smooth deterministic test pattern.
Image reference_image(int width, int height, std::uint64_t seed);

/// Bilinear sample with out-of-range positions reported through `valid`.
double sample_bilinear(const Image& img, double u, double v, bool* valid = nullptr);

/// target(x) = source(H^-1 x); pixels mapping outside the source are 0 and
/// marked invalid in `mask`.
Image warp_image(const Image& source, const Homography& h, std::vector<std::uint8_t>* mask = nullptr);

struct PhotometricConfig {
  bool enabled = true;
  double brightness = 20.0;   // max absolute shift, intensity levels
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double noise_sigma = 3.0;   // intensity levels
  double gamma_min = 0.8;
  double gamma_max = 1.2;

  void validate() const;
};

/// Contrast about mid-gray, brightness shift, gamma, then Gaussian noise.
Image photometric_augment(const Image& img, const PhotometricConfig& cfg, std::uint64_t seed);

struct SyntheticPairConfig {
  int width = 320;
  int height = 240;
  HomographySamplerConfig sampler;
  PhotometricConfig photometric;

  void validate() const;
  /// No geometric or photometric change.
  static SyntheticPairConfig identity(int width, int height);
};

struct SyntheticPair {
  Image source;
  Image target;
  Homography h_gt;
  std::vector<std::uint8_t> valid;
};

/// Crops or requires `image` at cfg size, samples H and warps it. Throws
/// ImageLoadError for an empty image.
SyntheticPair make_pair(const Image& image, const SyntheticPairConfig& cfg, std::uint64_t seed);

}  // namespace xspec
