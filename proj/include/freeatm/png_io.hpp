#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"

// PNG encode/decode over in-memory buffers. Encoding writes no ancillary
// chunks, so equal pixels always give equal bytes.
namespace freeatm::png {

using Bytes = std::vector<std::uint8_t>;

namespace detail {

struct ReadCursor {
  const Bytes* data;
  std::size_t offset;
};

inline void on_error(png_structp png_ptr, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png_ptr));
  if (text) *text = message;
  png_longjmp(png_ptr, 1);
}

inline void on_warning(png_structp, png_const_charp) {}

inline void on_write(png_structp png_ptr, png_bytep data, png_size_t length) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png_ptr));
  out->insert(out->end(), data, data + length);
}

inline void on_flush(png_structp) {}

inline void on_read(png_structp png_ptr, png_bytep data, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png_ptr));
  if (cursor->offset + length > cursor->data->size()) png_error(png_ptr, "truncated PNG data");
  std::memcpy(data, cursor->data->data() + cursor->offset, length);
  cursor->offset += length;
}

// bit_depth 8 or 16; rows are big-endian for 16-bit samples.
inline Bytes encode(std::size_t h, std::size_t w, int color_type, int bit_depth,
                    const std::vector<Bytes>& rows) {
  std::string error;
  png_structp png_ptr = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, on_error, on_warning);
  require<IoError>(png_ptr != nullptr, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png_ptr);
  Bytes out;
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_write_struct(&png_ptr, &info);
    throw IoError("PNG encode failed: " + error);
  }
  png_set_write_fn(png_ptr, &out, on_write, on_flush);
  png_set_compression_level(png_ptr, 6);
  png_set_IHDR(png_ptr, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png_ptr, info);
  for (const auto& row : rows) png_write_row(png_ptr, row.data());
  png_write_end(png_ptr, nullptr);
  png_destroy_write_struct(&png_ptr, &info);
  return out;
}

struct Decoded {
  std::size_t h = 0;
  std::size_t w = 0;
  int color_type = 0;
  int bit_depth = 0;
  std::vector<Bytes> rows;
};

inline Decoded decode(const Bytes& data) {
  require<IoError>(data.size() >= 8 && png_sig_cmp(data.data(), 0, 8) == 0, "not a PNG file");
  std::string error;
  png_structp png_ptr = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, on_error, on_warning);
  require<IoError>(png_ptr != nullptr, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png_ptr);
  ReadCursor cursor{&data, 0};
  Decoded out;
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_read_struct(&png_ptr, &info, nullptr);
    throw IoError("PNG decode failed: " + error);
  }
  png_set_read_fn(png_ptr, &cursor, on_read);
  png_read_info(png_ptr, info);
  out.w = png_get_image_width(png_ptr, info);
  out.h = png_get_image_height(png_ptr, info);
  out.color_type = png_get_color_type(png_ptr, info);
  out.bit_depth = png_get_bit_depth(png_ptr, info);
  const std::size_t stride = png_get_rowbytes(png_ptr, info);
  out.rows.assign(out.h, Bytes(stride));
  for (auto& row : out.rows) png_read_row(png_ptr, row.data(), nullptr);
  png_read_end(png_ptr, nullptr);
  png_destroy_read_struct(&png_ptr, &info, nullptr);
  return out;
}

}  // namespace detail

inline Bytes encode_rgb(const RgbImage& image) {
  require<ShapeError>(image.depth() == 3 && image.height() >= 1 && image.width() >= 1,
                      "RGB PNG needs a non-empty 3-channel image");
  std::vector<Bytes> rows(image.height(), Bytes(image.width() * 3));
  for (std::size_t y = 0; y < image.height(); ++y)
    std::memcpy(rows[y].data(), image.pixel(y, 0).data(), image.width() * 3);
  return detail::encode(image.height(), image.width(), PNG_COLOR_TYPE_RGB, 8, rows);
}

// Values in [0,1] stored as round(v * 65535).
inline Bytes encode_mask16(const Map& mask) {
  require<ShapeError>(mask.depth() == 1 && mask.height() >= 1 && mask.width() >= 1,
                      "mask PNG needs a non-empty single-channel map");
  std::vector<Bytes> rows(mask.height(), Bytes(mask.width() * 2));
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      const double v = mask(y, x);
      require<ParameterError>(v >= 0.0 && v <= 1.0, "mask value outside [0,1]");
      const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      rows[y][2 * x] = static_cast<std::uint8_t>(q >> 8);
      rows[y][2 * x + 1] = static_cast<std::uint8_t>(q & 0xff);
    }
  }
  return detail::encode(mask.height(), mask.width(), PNG_COLOR_TYPE_GRAY, 16, rows);
}

inline RgbImage decode_rgb(const Bytes& data) {
  const auto d = detail::decode(data);
  require<IoError>(d.color_type == PNG_COLOR_TYPE_RGB && d.bit_depth == 8,
                   "expected an 8-bit RGB PNG");
  RgbImage out(d.h, d.w, 3);
  for (std::size_t y = 0; y < d.h; ++y) std::memcpy(out.pixel(y, 0).data(), d.rows[y].data(), d.w * 3);
  return out;
}

inline Map decode_mask16(const Bytes& data) {
  const auto d = detail::decode(data);
  require<IoError>(d.color_type == PNG_COLOR_TYPE_GRAY && d.bit_depth == 16,
                   "expected a 16-bit grayscale PNG");
  Map out(d.h, d.w);
  for (std::size_t y = 0; y < d.h; ++y)
    for (std::size_t x = 0; x < d.w; ++x)
      out(y, x) = static_cast<double>((d.rows[y][2 * x] << 8) | d.rows[y][2 * x + 1]) / 65535.0;
  return out;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(out), "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require<IoError>(static_cast<bool>(out), "short write to " + path.string());
}

}  // namespace freeatm::png
