#include "xspec/grid_io.hpp"

#include "xspec/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace xspec {
namespace {

constexpr char kMagic[4] = {'X', 'S', 'F', 'M'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 0;

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw Error(ErrorCode::IoError, "truncated XSFM header");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_xsfm(std::ostream& out, const XsfmArray& a) {
  std::size_t count = 1;
  for (auto d : a.dims) count *= d;
  if (count != a.values.size() || a.dims.size() > 255)
    throw Error(ErrorCode::ShapeMismatch, "XSFM dims do not match payload size");
  out.write(kMagic, 4);
  put_le<std::uint16_t>(out, kVersion);
  put_le<std::uint8_t>(out, kFloat32);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(a.dims.size()));
  for (auto d : a.dims) put_le<std::uint32_t>(out, d);
  for (float f : a.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  if (!out) throw Error(ErrorCode::IoError, "failed writing XSFM payload");
}

XsfmArray read_xsfm(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw Error(ErrorCode::IoError, "missing XSFM magic");
  if (get_le<std::uint16_t>(in) != kVersion) throw Error(ErrorCode::IoError, "unsupported XSFM version");
  if (get_le<std::uint8_t>(in) != kFloat32) throw Error(ErrorCode::IoError, "unsupported XSFM dtype");
  XsfmArray a;
  a.dims.resize(get_le<std::uint8_t>(in));
  std::size_t count = 1;
  for (auto& d : a.dims) count *= (d = get_le<std::uint32_t>(in));
  a.values.resize(count);
  std::vector<unsigned char> raw(count * 4);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw Error(ErrorCode::IoError, "truncated XSFM payload");
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[4 * i + b]) << (8 * b);
    a.values[i] = std::bit_cast<float>(bits);
  }
  return a;
}

void write_xsfm(const std::filesystem::path& path, const XsfmArray& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  write_xsfm(out, a);
}

XsfmArray read_xsfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return read_xsfm(in);
}

XsfmArray to_xsfm(const Grid3& g) {
  XsfmArray a;
  a.dims = {static_cast<std::uint32_t>(g.rows), static_cast<std::uint32_t>(g.cols),
            static_cast<std::uint32_t>(g.channels)};
  a.values.assign(g.data.begin(), g.data.end());
  return a;
}

Grid3 grid_from_xsfm(const XsfmArray& a) {
  if (a.dims.size() != 3) throw Error(ErrorCode::ShapeMismatch, "expected a 3-D XSFM grid");
  Grid3 g(static_cast<int>(a.dims[0]), static_cast<int>(a.dims[1]), static_cast<int>(a.dims[2]));
  g.data.assign(a.values.begin(), a.values.end());
  return g;
}

DetectionResponse load_detection_response(const std::filesystem::path& path) {
  return DetectionResponse(grid_from_xsfm(read_xsfm(path)));
}

DescriptorMap load_descriptor_map(const std::filesystem::path& path) {
  return DescriptorMap::normalized(grid_from_xsfm(read_xsfm(path)));
}

void save_grid(const std::filesystem::path& path, const Grid3& g) { write_xsfm(path, to_xsfm(g)); }

}  // namespace xspec
