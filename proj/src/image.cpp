#include "xspec/image.hpp"

#include "xspec/error.hpp"
#include "xspec/parallel.hpp"

#include <png.h>

#include <Eigen/LU>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>

namespace xspec {
namespace {

std::string lower_extension(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

/// Next PNM header token, skipping whitespace and comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

Image load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ImageLoadError, "cannot open " + path.string());
  const std::string magic = pnm_token(in);
  if (magic != "P5" && magic != "P2") throw Error(ErrorCode::ImageLoadError, "not a PGM file: " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(pnm_token(in));
    h = std::stoi(pnm_token(in));
    maxval = std::stoi(pnm_token(in));
  } catch (const std::exception&) {
    throw Error(ErrorCode::ImageLoadError, "malformed PGM header: " + path.string());
  }
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
    throw Error(ErrorCode::ImageLoadError, "unsupported PGM (8-bit only): " + path.string());
  Image img(w, h);
  if (magic == "P5") {
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
      throw Error(ErrorCode::ImageLoadError, "truncated PGM: " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] * 255.0 / maxval;
  } else {
    for (double& px : img.pixels) {
      int v;
      if (!(in >> v)) throw Error(ErrorCode::ImageLoadError, "truncated PGM: " + path.string());
      px = v * 255.0 / maxval;
    }
  }
  return img;
}

Image load_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw Error(ErrorCode::ImageLoadError, "cannot read PNG " + path.string() + ": " + png.message);
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error(ErrorCode::ImageLoadError, "cannot decode PNG " + path.string() + ": " + png.message);
  }
  Image img(static_cast<int>(png.width), static_cast<int>(png.height));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = buf[i];
  return img;
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

Image::Image(int w, int h, double fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::ImageLoadError, "missing image " + path.string());
  const std::string ext = lower_extension(path);
  if (ext == ".png") return load_png(path);
  if (ext == ".pgm" || ext == ".pnm") return load_pgm(path);
  throw Error(ErrorCode::ImageLoadError, "unsupported image format: " + path.string());
}

void save_image(const std::filesystem::path& path, const Image& img) {
  std::vector<unsigned char> buf(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), buf.begin(), to_byte);
  const std::string ext = lower_extension(path);
  if (ext == ".png") {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, buf.data(), 0, nullptr))
      throw Error(ErrorCode::IoError, "cannot write PNG " + path.string());
    return;
  }
  if (ext != ".pgm") throw Error(ErrorCode::IoError, "unsupported output format: " + path.string());
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

Image reference_image(int width, int height, std::uint64_t seed) {
  if (width < 2 || height < 2) throw Error(ErrorCode::DegenerateImageSize, "image must be at least 2 x 2");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(2.0 * M_PI / 96.0, 2.0 * M_PI / 24.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  struct Wave {
    double ku, kv, phase, amp;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 6; ++k) {
    const double f = freq(rng), a = angle(rng);
    waves.push_back({f * std::cos(a), f * std::sin(a), angle(rng), 1.0 / (k + 1)});
  }
  double norm = 0.0;
  for (const Wave& w : waves) norm += w.amp;
  Image img(width, height);
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) {
      double s = 0.0;
      for (const Wave& w : waves) s += w.amp * std::sin(w.ku * u + w.kv * v + w.phase);
      img.at(v, u) = 127.5 + 110.0 * s / norm;
    }
  return img;
}

double sample_bilinear(const Image& img, double u, double v, bool* valid) {
  const bool inside = u >= 0.0 && v >= 0.0 && u <= img.width - 1 && v <= img.height - 1;
  if (valid) *valid = inside;
  if (!inside) return 0.0;
  const int u0 = std::min(static_cast<int>(u), img.width - 2 < 0 ? 0 : img.width - 2);
  const int v0 = std::min(static_cast<int>(v), img.height - 2 < 0 ? 0 : img.height - 2);
  const int u1 = std::min(u0 + 1, img.width - 1), v1 = std::min(v0 + 1, img.height - 1);
  const double fu = u - u0, fv = v - v0;
  return (1 - fu) * (1 - fv) * img.at(v0, u0) + fu * (1 - fv) * img.at(v0, u1) +
         (1 - fu) * fv * img.at(v1, u0) + fu * fv * img.at(v1, u1);
}

Image warp_image(const Image& source, const Homography& h, std::vector<std::uint8_t>* mask) {
  const Eigen::Matrix3d inv = h.matrix().inverse();
  Image out(source.width, source.height);
  if (mask) mask->assign(out.pixels.size(), 0);
  for (int v = 0; v < out.height; ++v)
    for (int u = 0; u < out.width; ++u) {
      const Eigen::Vector3d q = inv * Eigen::Vector3d(u, v, 1.0);
      if (std::abs(q.z()) < 1e-12) continue;
      bool valid = false;
      const double s = sample_bilinear(source, q.x() / q.z(), q.y() / q.z(), &valid);
      out.at(v, u) = s;
      if (mask) (*mask)[static_cast<std::size_t>(v) * out.width + u] = valid;
    }
  return out;
}

void PhotometricConfig::validate() const {
  if (!(brightness >= 0.0) || !(noise_sigma >= 0.0) || !(contrast_min > 0.0) ||
      contrast_min > contrast_max || !(gamma_min > 0.0) || gamma_min > gamma_max)
    throw Error(ErrorCode::InvalidConfig, "invalid photometric ranges");
}

Image photometric_augment(const Image& img, const PhotometricConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!cfg.enabled) return img;
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  const double shift = uniform(-cfg.brightness, cfg.brightness);
  const double gain = uniform(cfg.contrast_min, cfg.contrast_max);
  const double gamma = uniform(cfg.gamma_min, cfg.gamma_max);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
  Image out = img;
  for (double& p : out.pixels) {
    double x = std::clamp((gain * (p - 127.5) + 127.5 + shift) / 255.0, 0.0, 1.0);
    x = 255.0 * std::pow(x, gamma);
    if (cfg.noise_sigma > 0.0) x += noise(rng);
    p = std::clamp(x, 0.0, 255.0);
  }
  return out;
}

void SyntheticPairConfig::validate() const {
  if (width < 8 || height < 8 || width % 8 || height % 8)
    throw Error(ErrorCode::InvalidConfig, "pair size must be a positive multiple of 8");
  sampler.validate();
  photometric.validate();
}

SyntheticPairConfig SyntheticPairConfig::identity(int width, int height) {
  SyntheticPairConfig cfg;
  cfg.width = width;
  cfg.height = height;
  cfg.sampler.max_translation_frac = 0.0;
  cfg.sampler.max_rotation_rad = 0.0;
  cfg.sampler.scale_min = cfg.sampler.scale_max = 1.0;
  cfg.sampler.max_perspective = 0.0;
  cfg.photometric.enabled = false;
  return cfg;
}

SyntheticPair make_pair(const Image& image, const SyntheticPairConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (image.width < cfg.width || image.height < cfg.height || image.pixels.empty())
    throw Error(ErrorCode::ImageLoadError, "image smaller than the requested pair size");
  Image source(cfg.width, cfg.height);
  for (int v = 0; v < cfg.height; ++v)
    for (int u = 0; u < cfg.width; ++u) source.at(v, u) = image.at(v, u);
  const Homography h = sample_homography(cfg.sampler, cfg.width, cfg.height, substream_seed(seed, 0));
  SyntheticPair pair{source, {}, h, {}};
  pair.target = photometric_augment(warp_image(source, h, &pair.valid), cfg.photometric,
                                    substream_seed(seed, 1));
  return pair;
}

}  // namespace xspec
