#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freeatm/errors.hpp"

namespace freeatm {

// Dense row-major height x width x depth array. Element (y, x, k) lives at
// (y * width + x) * depth + k, so a depth slice at one pixel is contiguous.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t height, std::size_t width, std::size_t depth = 1, T fill = T{})
      : height_(height), width_(width), depth_(depth), data_(height * width * depth, fill) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t depth() const noexcept { return depth_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t pixels() const noexcept { return height_ * width_; }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t y, std::size_t x, std::size_t k = 0) noexcept {
    return data_[(y * width_ + x) * depth_ + k];
  }
  const T& operator()(std::size_t y, std::size_t x, std::size_t k = 0) const noexcept {
    return data_[(y * width_ + x) * depth_ + k];
  }

  std::span<T> pixel(std::size_t y, std::size_t x) noexcept {
    return {data_.data() + (y * width_ + x) * depth_, depth_};
  }
  std::span<const T> pixel(std::size_t y, std::size_t x) const noexcept {
    return {data_.data() + (y * width_ + x) * depth_, depth_};
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  template <typename U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return height_ == other.height() && width_ == other.width() && depth_ == other.depth();
  }

  std::string shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" + std::to_string(depth_);
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.depth_ == b.depth_ &&
           a.data_ == b.data_;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t depth_ = 0;
  std::vector<T> data_;
};

// Single-channel real map (attention maps, instance masks).
using Map = Grid<double>;
// Single-channel {0,1} mask.
using BinaryMask = Grid<std::uint8_t>;
// 8-bit RGB image, depth 3.
using RgbImage = Grid<std::uint8_t>;
// Real-valued image in [0,1], depth 3.
using FloatImage = Grid<double>;

// Extracts channel k of a multi-channel grid as a single-channel map.
template <typename T>
Grid<T> channel(const Grid<T>& g, std::size_t k) {
  require<IndexError>(k < g.depth(), "channel index out of range");
  Grid<T> out(g.height(), g.width());
  for (std::size_t y = 0; y < g.height(); ++y)
    for (std::size_t x = 0; x < g.width(); ++x) out(y, x) = g(y, x, k);
  return out;
}

// Bilinear resize with half-pixel centres (align_corners = false); source
// coordinates are clamped to the valid range at the borders. Every channel is
// resized independently. Resizing to the same size returns an exact copy.
inline Grid<double> resize_bilinear(const Grid<double>& src, std::size_t out_h, std::size_t out_w) {
  require<ShapeError>(src.height() >= 1 && src.width() >= 1, "resize of empty grid");
  require<ShapeError>(out_h >= 1 && out_w >= 1, "resize target must be at least 1x1");
  if (src.height() == out_h && src.width() == out_w) return src;

  const std::size_t depth = src.depth();
  Grid<double> out(out_h, out_w, depth);
  const double scale_y = static_cast<double>(src.height()) / static_cast<double>(out_h);
  const double scale_x = static_cast<double>(src.width()) / static_cast<double>(out_w);
  const double max_y = static_cast<double>(src.height() - 1);
  const double max_x = static_cast<double>(src.width() - 1);

  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * scale_y - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, src.height() - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * scale_x - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, src.width() - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t k = 0; k < depth; ++k) {
        const double top = src(y0, x0, k) * (1.0 - fx) + src(y0, x1, k) * fx;
        const double bottom = src(y1, x0, k) * (1.0 - fx) + src(y1, x1, k) * fx;
        out(y, x, k) = top * (1.0 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

inline Map to_map(const BinaryMask& mask) {
  Map out(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) out.storage()[i] = mask.storage()[i] ? 1.0 : 0.0;
  return out;
}

inline FloatImage to_float_image(const RgbImage& image) {
  FloatImage out(image.height(), image.width(), image.depth());
  for (std::size_t i = 0; i < image.size(); ++i) out.storage()[i] = image.storage()[i] / 255.0;
  return out;
}

inline RgbImage to_rgb_image(const FloatImage& image) {
  RgbImage out(image.height(), image.width(), image.depth());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(image.storage()[i], 0.0, 1.0);
    out.storage()[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

}  // namespace freeatm
