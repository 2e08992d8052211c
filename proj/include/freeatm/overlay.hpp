#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freeatm/errors.hpp"
#include "freeatm/geometry.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/pipeline.hpp"
#include "freeatm/png_io.hpp"
#include "freeatm/prompt.hpp"
#include "freeatm/scene.hpp"

namespace freeatm::pipeline {

struct OverlayOptions {
  double tint_alpha = 0.45;
  double grid_alpha = 0.5;
};

struct OverlayReport {
  bool refused = false;
  ValidationReport validation;
  std::vector<std::string> written;  // overlay PNG paths relative to out_dir
};

namespace detail {

inline void blend(RgbImage& img, std::size_t y, std::size_t x, const scene::Rgb& c, double alpha) {
  const std::uint8_t rgb[3] = {c.r, c.g, c.b};
  for (std::size_t k = 0; k < 3; ++k) {
    const double v = (1.0 - alpha) * img(y, x, k) + alpha * rgb[k];
    img(y, x, k) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
}

inline void draw_rect(RgbImage& img, const geometry::BoundingBox& b, const scene::Rgb& c) {
  for (std::size_t x = b.x0; x < b.x1; ++x) {
    blend(img, b.y0, x, c, 1.0);
    blend(img, b.y1 - 1, x, c, 1.0);
  }
  for (std::size_t y = b.y0; y < b.y1; ++y) {
    blend(img, y, b.x0, c, 1.0);
    blend(img, y, b.x1 - 1, c, 1.0);
  }
}

}  // namespace detail

// Annotated copy of one record's image: mask tint, bbox outline and block-grid
// lines, plus the sidecar JSON describing it.
inline RgbImage render_overlay(const RgbImage& image, const std::vector<Map>& masks,
                               const ShardRecord& record, const geometry::BlockGrid& grid,
                               const OverlayOptions& opt, nlohmann::json& sidecar) {
  RgbImage out = image;
  const auto& colors = scene::palette();
  nlohmann::json prompts = nlohmann::json::array();
  nlohmann::json warnings = nlohmann::json::array();
  for (std::size_t i = 0; i < record.instances.size(); ++i) {
    const auto& inst = record.instances[i];
    const scene::Rgb& c = colors[i % colors.size()];
    const Map& m = masks.at(i);
    for (std::size_t y = 0; y < out.height(); ++y)
      for (std::size_t x = 0; x < out.width(); ++x)
        if (m(y, x) > 0.0) detail::blend(out, y, x, c, opt.tint_alpha * m(y, x));
    if (inst.bbox) {
      detail::draw_rect(out, *inst.bbox, c);
      prompts.push_back(prompt::position_prompt(inst.noun, *inst.block).rendered);
    } else {
      warnings.push_back("instance " + std::to_string(inst.instance_id) + " (" + inst.noun +
                         ") has an empty mask; no box drawn");
    }
  }
  const scene::Rgb white{255, 255, 255};
  for (std::size_t r = 1; r < grid.rows; ++r) {
    const std::size_t y = r * out.height() / grid.rows;
    for (std::size_t x = 0; x < out.width(); ++x) detail::blend(out, y, x, white, opt.grid_alpha);
  }
  for (std::size_t col = 1; col < grid.cols; ++col) {
    const std::size_t x = col * out.width() / grid.cols;
    for (std::size_t y = 0; y < out.height(); ++y) detail::blend(out, y, x, white, opt.grid_alpha);
  }
  sidecar = {{"index", record.index},
             {"image_file", record.image_file},
             {"caption", record.vlp_text},
             {"position_prompts", prompts},
             {"warnings", warnings}};
  return out;
}

// Validates the shard first and refuses to draw anything if it is not clean.
inline OverlayReport render_overlays(const fs::path& shard, const fs::path& out_dir,
                                     const OverlayOptions& opt = {}) {
  OverlayReport report;
  report.validation = validate_shard(shard);
  if (!report.validation.clean()) {
    report.refused = true;
    return report;
  }
  std::ifstream mf(shard / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  const auto& cfg = manifest.at("config");
  const std::size_t h = cfg.at("canvas_h").get<std::size_t>();
  const std::size_t w = cfg.at("canvas_w").get<std::size_t>();
  const geometry::BlockGrid grid{cfg.at("block_rows").get<std::size_t>(),
                                 cfg.at("block_cols").get<std::size_t>(), h, w};
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require<IoError>(fs::is_directory(out_dir), "cannot create " + out_dir.string());
  for (const auto& record : load_records(shard)) {
    const RgbImage image = png::decode_rgb(png::read_file(shard / record.image_file));
    std::vector<Map> masks;
    for (const auto& inst : record.instances)
      masks.push_back(png::decode_mask16(png::read_file(shard / inst.mask_file)));
    nlohmann::json sidecar;
    const RgbImage overlay = render_overlay(image, masks, record, grid, opt, sidecar);
    const std::string stem = record_stem(record.index);
    png::write_file(out_dir / (stem + ".png"), png::encode_rgb(overlay));
    std::ofstream side(out_dir / (stem + ".json"), std::ios::binary | std::ios::trunc);
    require<IoError>(static_cast<bool>(side), "cannot write overlay sidecar for " + stem);
    side << sidecar.dump(2) << '\n';
    report.written.push_back(stem + ".png");
  }
  return report;
}

}  // namespace freeatm::pipeline
