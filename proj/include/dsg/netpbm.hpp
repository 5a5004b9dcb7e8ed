#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsg/tensor.hpp"

namespace dsg {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit raster as read from / written to a binary PPM (3 channels) or PGM (1).
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

Raster parse_netpbm(const std::string& bytes, const std::string& origin = "<memory>");
std::string encode_netpbm(const Raster& r);

Raster read_netpbm(const std::filesystem::path& path);
void write_netpbm(const std::filesystem::path& path, const Raster& r);

/// Image tensor [3,H,W] in [0,1] <-> P6 raster; values are rounded to the
/// nearest multiple of 1/255 and clamped.
Raster image_to_raster(const Tensor& image);
Tensor raster_to_image(const Raster& r);

/// Mask [H,W] of class ids <-> P5 raster whose pixel value is the id.
Raster mask_to_raster(const LabelMap& mask);
LabelMap raster_to_mask(const Raster& r);

}  // namespace dsg
