#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>

#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"

namespace freeatm::geometry {

struct CropRect {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  friend bool operator==(const CropRect&, const CropRect&) = default;
};

struct ViewTransform {
  CropRect crop;
  bool hflip = false;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  static ViewTransform identity(std::size_t h, std::size_t w) { return {{0, 0, w, h}, false, h, w}; }

  void validate(std::size_t src_h, std::size_t src_w) const {
    require<GeometryError>(crop.w >= 1 && crop.h >= 1, "crop must be at least 1x1");
    require<GeometryError>(crop.x0 + crop.w <= src_w && crop.y0 + crop.h <= src_h,
                           "crop rect lies outside the source bounds");
    require<GeometryError>(out_h >= 1 && out_w >= 1, "output size must be at least 1x1");
  }

  friend bool operator==(const ViewTransform&, const ViewTransform&) = default;
};

// Half-open box [x0, x1) x [y0, y1).
struct BoundingBox {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t x1 = 0;
  std::size_t y1 = 0;

  std::size_t width() const noexcept { return x1 - x0; }
  std::size_t height() const noexcept { return y1 - y0; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct BlockGrid {
  std::size_t rows = 3;
  std::size_t cols = 3;
  std::size_t image_h = 0;
  std::size_t image_w = 0;
};

// Crop, optional horizontal flip, bilinear resize. Works on any depth, so the
// same call transforms images and masks.
inline Grid<double> apply_transform(const Grid<double>& src, const ViewTransform& t) {
  t.validate(src.height(), src.width());
  Grid<double> cropped(t.crop.h, t.crop.w, src.depth());
  for (std::size_t y = 0; y < t.crop.h; ++y) {
    for (std::size_t x = 0; x < t.crop.w; ++x) {
      const std::size_t sx = t.hflip ? t.crop.x0 + t.crop.w - 1 - x : t.crop.x0 + x;
      const auto from = src.pixel(t.crop.y0 + y, sx);
      std::copy(from.begin(), from.end(), cropped.pixel(y, x).begin());
    }
  }
  return resize_bilinear(cropped, t.out_h, t.out_w);
}

inline Map transform_mask(const Map& mask, const ViewTransform& t) {
  Map out = apply_transform(mask, t);
  for (double& v : out.storage()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// 1 where mask >= threshold.
inline BinaryMask binarize(const Map& mask, double threshold = 0.5) {
  BinaryMask out(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i)
    out.storage()[i] = mask.storage()[i] >= threshold ? 1 : 0;
  return out;
}

inline std::optional<BoundingBox> bbox(const BinaryMask& mask) {
  std::optional<BoundingBox> box;
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      if (!mask(y, x)) continue;
      if (!box) {
        box = BoundingBox{x, y, x + 1, y + 1};
      } else {
        box->x0 = std::min(box->x0, x);
        box->y0 = std::min(box->y0, y);
        box->x1 = std::max(box->x1, x + 1);
        box->y1 = std::max(box->y1, y + 1);
      }
    }
  }
  return box;
}

// Block containing the box centre, row-major. With centre c = (x0 + x1) / 2
// the column is floor(c / (W / cols)) = floor((x0 + x1) * cols / (2 W)),
// evaluated in integers so cell boundaries fall into the higher cell exactly.
// A centre on the right/bottom image edge is clamped into the last cell.
inline int block_index(const BoundingBox& box, const BlockGrid& grid) {
  require<GeometryError>(grid.rows >= 1 && grid.cols >= 1, "block grid must be at least 1x1");
  require<GeometryError>(grid.image_h >= 1 && grid.image_w >= 1, "block grid image is empty");
  require<GeometryError>(box.x1 > box.x0 && box.y1 > box.y0, "bounding box is empty");
  require<GeometryError>(box.x1 <= grid.image_w && box.y1 <= grid.image_h,
                         "bounding box lies outside the image");
  const std::size_t row =
      std::min((box.y0 + box.y1) * grid.rows / (2 * grid.image_h), grid.rows - 1);
  const std::size_t col =
      std::min((box.x0 + box.x1) * grid.cols / (2 * grid.image_w), grid.cols - 1);
  return static_cast<int>(row * grid.cols + col);
}

inline std::size_t mask_area(const BinaryMask& m) {
  std::size_t n = 0;
  for (const auto v : m.storage()) n += v ? 1 : 0;
  return n;
}

// |a and b| / |a or b|, 1 when both are empty.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  require<ShapeError>(a.same_shape(b), "iou of masks with different shapes: " +
                                           a.shape_string() + " vs " + b.shape_string());
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a.storage()[i] != 0;
    const bool pb = b.storage()[i] != 0;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Fraction threshold below which a transformed mask counts as absent from a view.
inline constexpr double kAbsentFraction = 1e-3;

inline bool absent_in_view(const Map& transformed) {
  double sum = 0.0;
  for (const double v : transformed.storage()) sum += v;
  return sum < kAbsentFraction * static_cast<double>(transformed.pixels());
}

// Nearest (pixel-centre) sampling of a binary mask onto an out_h x out_w grid.
inline BinaryMask downsample_nearest(const BinaryMask& mask, std::size_t out_h, std::size_t out_w) {
  require<ShapeError>(out_h >= 1 && out_w >= 1, "downsample target must be at least 1x1");
  BinaryMask out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = ((2 * y + 1) * mask.height()) / (2 * out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = ((2 * x + 1) * mask.width()) / (2 * out_w);
      out(y, x) = mask(sy, sx);
    }
  }
  return out;
}

}  // namespace freeatm::geometry
