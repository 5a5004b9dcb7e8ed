#include "dsg/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dsg {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& origin) : b_(bytes), origin_(origin) {}

  int next_int(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long long v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1 << 24)) fail(std::string(what) + " is too large");
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what);
    return static_cast<int>(v);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void single_whitespace() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      fail("expected whitespace after maxval");
    }
    ++pos_;
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(origin_ + ": " + msg + " at byte " + std::to_string(pos_));
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

Raster parse_netpbm(const std::string& bytes, const std::string& origin) {
  HeaderReader rd(bytes, origin);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    rd.fail("bad magic (expected P6 or P5)");
  }
  Raster r;
  r.channels = bytes[1] == '6' ? 3 : 1;
  rd.seek(2);
  r.width = rd.next_int("width");
  r.height = rd.next_int("height");
  const int maxval = rd.next_int("maxval");
  if (r.width < 1 || r.height < 1) rd.fail("image dimensions must be positive");
  if (maxval != 255) rd.fail("unsupported maxval " + std::to_string(maxval) + " (expected 255)");
  rd.single_whitespace();
  const std::size_t need = static_cast<std::size_t>(r.width) * r.height * r.channels;
  if (bytes.size() - rd.pos() < need) {
    throw ParseError(origin + ": truncated raster: need " + std::to_string(need) + " bytes from offset " +
                     std::to_string(rd.pos()) + ", have " + std::to_string(bytes.size() - rd.pos()));
  }
  r.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(rd.pos()),
                  bytes.begin() + static_cast<std::ptrdiff_t>(rd.pos() + need));
  return r;
}

std::string encode_netpbm(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw std::invalid_argument("netpbm: channels must be 1 or 3");
  if (r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels) {
    throw std::invalid_argument("netpbm: pixel buffer size mismatch");
  }
  std::string out = (r.channels == 3 ? "P6\n" : "P5\n") + std::to_string(r.width) + " " +
                    std::to_string(r.height) + "\n255\n";
  out.append(r.pixels.begin(), r.pixels.end());
  return out;
}

Raster read_netpbm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_netpbm(ss.str(), path.string());
}

void write_netpbm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = encode_netpbm(r);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Raster image_to_raster(const Tensor& image) {
  require_rank(image.shape(), 3, "image_to_raster");
  if (image.dim(0) != 3) throw ShapeError("image_to_raster: expected 3 channels, got " + shape_str(image.shape()));
  Raster r{image.dim(2), image.dim(1), 3, {}};
  const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
  r.pixels.resize(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * plane + p], 0.0f, 1.0f);
      r.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return r;
}

Tensor raster_to_image(const Raster& r) {
  if (r.channels != 3) throw ParseError("expected a 3-channel (P6) image");
  Tensor t({3, r.height, r.width});
  const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) t[c * plane + p] = static_cast<float>(r.pixels[p * 3 + c]) / 255.0f;
  return t;
}

Raster mask_to_raster(const LabelMap& mask) {
  require_rank(mask.shape, 2, "mask_to_raster");
  Raster r{mask.shape[1], mask.shape[0], 1, {}};
  r.pixels.resize(mask.numel());
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask.data[i] < 0 || mask.data[i] > 255) throw std::invalid_argument("mask id outside [0, 255]");
    r.pixels[i] = static_cast<std::uint8_t>(mask.data[i]);
  }
  return r;
}

LabelMap raster_to_mask(const Raster& r) {
  if (r.channels != 1) throw ParseError("expected a 1-channel (P5) mask");
  LabelMap m({r.height, r.width});
  for (std::size_t i = 0; i < m.numel(); ++i) m.data[i] = r.pixels[i];
  return m;
}

}  // namespace dsg
