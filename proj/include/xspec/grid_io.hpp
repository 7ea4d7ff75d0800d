#pragma once

#include "xspec/featuregrid.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace xspec {

/// Raw contents of an XSFM file: magic "XSFM", u16 version (1), u8 dtype
/// (0 = float32 LE), u8 ndim, ndim u32 dims, row-major payload.
struct XsfmArray {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void write_xsfm(std::ostream& out, const XsfmArray& a);
XsfmArray read_xsfm(std::istream& in);
void write_xsfm(const std::filesystem::path& path, const XsfmArray& a);
XsfmArray read_xsfm(const std::filesystem::path& path);

XsfmArray to_xsfm(const Grid3& g);
Grid3 grid_from_xsfm(const XsfmArray& a);

DetectionResponse load_detection_response(const std::filesystem::path& path);
/// Cells are renormalized after the float32 round trip.
DescriptorMap load_descriptor_map(const std::filesystem::path& path);
void save_grid(const std::filesystem::path& path, const Grid3& g);

}  // namespace xspec
