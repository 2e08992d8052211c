#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "freeatm/attention.hpp"
#include "freeatm/errors.hpp"
#include "freeatm/geometry.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/prompt.hpp"
#include "freeatm/rng.hpp"

namespace freeatm::scene {

enum class Shape { kDisk, kSquare, kTriangle };
enum class Texture { kSolid, kStripes, kChecker };

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct InstanceSpec {
  std::string noun;
  Shape shape = Shape::kDisk;
  Texture texture = Texture::kSolid;
  double center_x = 0.0;  // pixels
  double center_y = 0.0;
  double scale = 1.0;  // disk radius, square half-side, triangle half-height
  Rgb color;
};

struct SceneSpec {
  std::size_t canvas_h = 64;
  std::size_t canvas_w = 64;
  std::vector<InstanceSpec> instances;
  Rgb background{200, 200, 200};
  double background_variation = 0.0;  // amplitude of seeded low-frequency colour variation, 0-255 scale
  std::uint64_t seed = 0;
};

struct OracleScene {
  SceneSpec spec;
  RgbImage image;
  std::vector<BinaryMask> truth_masks;
  std::string prompt;
  attention::TokenAlignment alignment;
};

inline constexpr std::size_t kMaxInstances = 8;
inline constexpr double kMaxOverlapFraction = 0.2;

inline bool covers(const InstanceSpec& inst, double px, double py) {
  const double dx = px - inst.center_x;
  const double dy = py - inst.center_y;
  const double s = inst.scale;
  switch (inst.shape) {
    case Shape::kDisk:
      return dx * dx + dy * dy <= s * s;
    case Shape::kSquare:
      return std::abs(dx) <= s && std::abs(dy) <= s;
    case Shape::kTriangle: {
      // Apex at (cx, cy - s), base on y = cy + s with half-width s.
      if (dy < -s || dy > s) return false;
      return std::abs(dx) <= 0.5 * (dy + s);
    }
  }
  return false;
}

// Pixel-centre rasterisation of the full (unoccluded) footprint.
inline BinaryMask footprint(const InstanceSpec& inst, std::size_t h, std::size_t w) {
  BinaryMask m(h, w);
  const double s = inst.scale + 1.0;
  const auto y_lo = static_cast<std::size_t>(std::max(0.0, std::floor(inst.center_y - s)));
  const auto y_hi = static_cast<std::size_t>(
      std::clamp(std::ceil(inst.center_y + s), 0.0, static_cast<double>(h)));
  const auto x_lo = static_cast<std::size_t>(std::max(0.0, std::floor(inst.center_x - s)));
  const auto x_hi = static_cast<std::size_t>(
      std::clamp(std::ceil(inst.center_x + s), 0.0, static_cast<double>(w)));
  for (std::size_t y = y_lo; y < y_hi; ++y)
    for (std::size_t x = x_lo; x < x_hi; ++x)
      if (covers(inst, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) m(y, x) = 1;
  return m;
}

inline bool texture_on(Texture t, double px, double py) {
  switch (t) {
    case Texture::kSolid:
      return true;
    case Texture::kStripes:
      return static_cast<long>(std::floor(py / 3.0)) % 2 == 0;
    case Texture::kChecker:
      return (static_cast<long>(std::floor(px / 3.0)) + static_cast<long>(std::floor(py / 3.0))) %
                 2 ==
             0;
  }
  return true;
}

// Throws PlacementError when the scene is ill-posed: instance count outside
// [1, 8], a centre off-canvas, an empty footprint, or two footprints
// overlapping by more than 20% of the smaller one.
inline std::vector<BinaryMask> validated_footprints(const SceneSpec& spec) {
  require<PlacementError>(spec.canvas_h >= 1 && spec.canvas_w >= 1, "canvas is empty");
  require<PlacementError>(!spec.instances.empty() && spec.instances.size() <= kMaxInstances,
                          "instance count must be in [1, 8]");
  std::vector<BinaryMask> masks;
  for (const auto& inst : spec.instances) {
    require<PlacementError>(inst.center_x >= 0.0 && inst.center_y >= 0.0 &&
                                inst.center_x < static_cast<double>(spec.canvas_w) &&
                                inst.center_y < static_cast<double>(spec.canvas_h),
                            "instance '" + inst.noun + "' centre lies outside the canvas");
    require<PlacementError>(inst.scale > 0.0, "instance scale must be positive");
    masks.push_back(footprint(inst, spec.canvas_h, spec.canvas_w));
    require<PlacementError>(geometry::mask_area(masks.back()) > 0,
                            "instance '" + inst.noun + "' rasterises to an empty mask");
  }
  for (std::size_t i = 0; i < masks.size(); ++i) {
    for (std::size_t j = i + 1; j < masks.size(); ++j) {
      std::size_t overlap = 0;
      for (std::size_t k = 0; k < masks[i].size(); ++k)
        overlap += (masks[i].storage()[k] && masks[j].storage()[k]) ? 1 : 0;
      const std::size_t smaller =
          std::min(geometry::mask_area(masks[i]), geometry::mask_area(masks[j]));
      require<PlacementError>(static_cast<double>(overlap) <=
                                  kMaxOverlapFraction * static_cast<double>(smaller),
                              "instances " + std::to_string(i) + " and " + std::to_string(j) +
                                  " overlap beyond the occlusion bound");
    }
  }
  return masks;
}

// Value noise in [-1, 1]: uniform lattice values bilinearly interpolated.
inline Map smooth_noise(std::size_t h, std::size_t w, std::size_t lattice, std::uint64_t seed) {
  Rng rng(seed);
  Map coarse(lattice + 1, lattice + 1);
  for (double& v : coarse.storage()) v = rng.uniform(-1.0, 1.0);
  return resize_bilinear(coarse, h, w);
}

inline OracleScene generate_scene(const SceneSpec& spec) {
  OracleScene scene;
  scene.spec = spec;
  scene.truth_masks = validated_footprints(spec);

  // 4x4 supersampled compositing in instance order (later instances in front),
  // plus seeded per-pixel grain.
  constexpr int kSub = 4;
  FloatImage canvas(spec.canvas_h, spec.canvas_w, 3);
  std::vector<Map> backdrop;
  for (std::uint64_t k = 0; k < 3; ++k)
    backdrop.push_back(spec.background_variation > 0.0
                           ? smooth_noise(spec.canvas_h, spec.canvas_w, 3,
                                          derive_seed({spec.seed, 0xbac6, k}))
                           : Map(spec.canvas_h, spec.canvas_w));
  Rng grain(derive_seed({spec.seed, 0x6772a1e}));
  for (std::size_t y = 0; y < spec.canvas_h; ++y) {
    for (std::size_t x = 0; x < spec.canvas_w; ++x) {
      std::array<double, 3> acc{0, 0, 0};
      std::array<double, 3> bg{};
      for (std::size_t k = 0; k < 3; ++k) {
        const Rgb& b = spec.background;
        const double base = k == 0 ? b.r : (k == 1 ? b.g : b.b);
        bg[k] = std::clamp(base + spec.background_variation * backdrop[k](y, x), 0.0, 255.0);
      }
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub;
          std::array<double, 3> c = bg;
          for (const auto& inst : spec.instances) {
            if (!covers(inst, px, py)) continue;
            const double dim = texture_on(inst.texture, px, py) ? 1.0 : 1.0 / 3.0;
            c = {std::floor(inst.color.r * dim), std::floor(inst.color.g * dim),
                 std::floor(inst.color.b * dim)};
          }
          for (std::size_t k = 0; k < 3; ++k) acc[k] += c[k];
        }
      }
      const double noise = grain.uniform(-6.0, 6.0);
      for (std::size_t k = 0; k < 3; ++k)
        canvas(y, x, k) = (acc[k] / (kSub * kSub) + noise) / 255.0;
    }
  }
  scene.image = to_rgb_image(canvas);

  std::vector<std::string> nouns;
  std::vector<prompt::NounRef> refs;
  for (std::size_t i = 0; i < spec.instances.size(); ++i) {
    nouns.push_back(spec.instances[i].noun);
    refs.push_back({static_cast<int>(i), spec.instances[i].noun});
  }
  scene.prompt = prompt::scene_prompt(nouns);
  scene.alignment = prompt::align_nouns(scene.prompt, refs);
  return scene;
}

struct SimulationOptions {
  std::size_t attention_h = 0;  // 0: canvas / 2
  std::size_t attention_w = 0;
  double gain = 8.0;       // noun logit inside its footprint
  double bos_logit = 3.0;  // BOS token absorbs residual attention
  std::size_t noise_lattice = 4;
};

inline std::size_t attention_height(const OracleScene& scene, const SimulationOptions& opt) {
  return opt.attention_h ? opt.attention_h : std::max<std::size_t>(1, scene.spec.canvas_h / 2);
}
inline std::size_t attention_width(const OracleScene& scene, const SimulationOptions& opt) {
  return opt.attention_w ? opt.attention_w : std::max<std::size_t>(1, scene.spec.canvas_w / 2);
}

// Simulated head-averaged cross-attention for every (layer, timestep). Noun
// tokens get logit gain * (footprint + noise_level * smooth noise) over the
// nearest-sampled footprint at attention resolution, split evenly across a
// multi-token noun (minus log of its token count) so every noun carries the
// same mass; the BOS token gets a constant logit, every other token 0;
// softmax across tokens.
inline attention::AttentionStack simulate_attention(const OracleScene& scene, double noise_level,
                                                    int layers, int timesteps, std::uint64_t seed,
                                                    const SimulationOptions& opt = {}) {
  require<ParameterError>(layers >= 1 && timesteps >= 1, "layers and timesteps must be >= 1");
  require<ParameterError>(noise_level >= 0.0 && noise_level < 1.0, "noise_level must be in [0,1)");
  const std::size_t h = attention_height(scene, opt);
  const std::size_t w = attention_width(scene, opt);
  const std::size_t tokens = scene.alignment.tokens.size();

  std::vector<Map> footprints;
  for (const auto& m : scene.truth_masks) footprints.push_back(to_map(geometry::downsample_nearest(m, h, w)));

  // Half of each noun's perturbation is shared by all entries (a systematic
  // localisation error), half is drawn fresh per (layer, timestep).
  std::vector<Map> shared_noise;
  for (std::size_t i = 0; i < footprints.size(); ++i) {
    shared_noise.push_back(noise_level > 0.0
                               ? smooth_noise(h, w, opt.noise_lattice, derive_seed({seed, i}))
                               : Map(h, w));
  }

  attention::AttentionStack stack;
  stack.prompt_length = tokens;
  std::vector<double> logits(tokens);
  for (int layer = 0; layer < layers; ++layer) {
    for (int step = 0; step < timesteps; ++step) {
      std::vector<Map> noise;
      for (std::size_t i = 0; i < footprints.size(); ++i) {
        Map n = noise_level > 0.0
                    ? smooth_noise(h, w, opt.noise_lattice,
                                   derive_seed({seed, static_cast<std::uint64_t>(layer),
                                                static_cast<std::uint64_t>(step), i}))
                    : Map(h, w);
        for (std::size_t k = 0; k < n.size(); ++k)
          n.storage()[k] = 0.5 * (n.storage()[k] + shared_noise[i].storage()[k]);
        noise.push_back(std::move(n));
      }
      attention::AttentionEntry entry{layer, step, Grid<double>(h, w, tokens)};
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          std::fill(logits.begin(), logits.end(), 0.0);
          logits[0] = opt.bos_logit;
          for (std::size_t i = 0; i < scene.alignment.noun_spans.size(); ++i) {
            const auto& span = scene.alignment.noun_spans[i];
            const double value = opt.gain * (footprints[i](y, x) + noise_level * noise[i](y, x)) -
                                 std::log(static_cast<double>(span.token_indices.size()));
            for (const std::size_t t : span.token_indices) logits[t] = value;
          }
          const double mx = *std::max_element(logits.begin(), logits.end());
          double total = 0.0;
          for (double& v : logits) {
            v = std::exp(v - mx);
            total += v;
          }
          auto row = entry.map.pixel(y, x);
          for (std::size_t t = 0; t < tokens; ++t) row[t] = logits[t] / total;
        }
      }
      stack.entries.push_back(std::move(entry));
    }
  }
  return stack;
}

// Truth masks resampled onto the attention grid.
inline std::vector<BinaryMask> truth_at(const OracleScene& scene, std::size_t h, std::size_t w) {
  std::vector<BinaryMask> out;
  for (const auto& m : scene.truth_masks) out.push_back(geometry::downsample_nearest(m, h, w));
  return out;
}

// Object classes used by the random scene sampler. Class identity is carried
// by shape and texture; colour is drawn independently per instance.
struct ObjectClass {
  std::string noun;
  Shape shape;
  Texture texture;
};

inline const std::vector<ObjectClass>& object_classes() {
  static const std::vector<ObjectClass> classes = {
      {"dog", Shape::kDisk, Texture::kSolid},
      {"cat", Shape::kSquare, Texture::kSolid},
      {"bird", Shape::kTriangle, Texture::kSolid},
      {"ball", Shape::kDisk, Texture::kStripes},
      {"teddy bear", Shape::kSquare, Texture::kStripes},
      {"kite", Shape::kTriangle, Texture::kStripes},
      {"hot air balloon", Shape::kDisk, Texture::kChecker},
      {"traffic light", Shape::kSquare, Texture::kChecker},
      {"tent", Shape::kTriangle, Texture::kChecker},
  };
  return classes;
}

inline int class_index(const std::string& noun) {
  const auto& classes = object_classes();
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i].noun == noun) return static_cast<int>(i);
  return -1;
}

struct SamplerOptions {
  std::size_t canvas_h = 64;
  std::size_t canvas_w = 64;
  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  double min_scale_fraction = 0.10;  // of min(canvas_h, canvas_w)
  double max_scale_fraction = 0.20;
  std::size_t placement_attempts = 200;
  double background_variation = 0.0;
  bool shared_color = false;  // every instance takes the first instance's colour
};

inline const std::vector<Rgb>& palette() {
  static const std::vector<Rgb> colors = {
      {220, 40, 40}, {40, 160, 60}, {50, 80, 220}, {230, 200, 40},
      {200, 60, 200}, {40, 190, 200}, {240, 130, 30}, {120, 70, 30},
  };
  return colors;
}

// Seeded random scene: instances placed by rejection so the occlusion bound
// holds. The same seed always yields the same spec.
inline SceneSpec sample_scene_spec(std::uint64_t seed, const SamplerOptions& opt = {}) {
  require<ParameterError>(opt.min_instances >= 1 && opt.min_instances <= opt.max_instances &&
                              opt.max_instances <= kMaxInstances,
                          "sampler instance range must lie within [1, 8]");
  Rng rng(seed);
  SceneSpec spec;
  spec.canvas_h = opt.canvas_h;
  spec.canvas_w = opt.canvas_w;
  spec.seed = seed;
  spec.background_variation = opt.background_variation;
  spec.background = {static_cast<std::uint8_t>(150 + rng.below(80)),
                     static_cast<std::uint8_t>(150 + rng.below(80)),
                     static_cast<std::uint8_t>(150 + rng.below(80))};
  const std::size_t count =
      opt.min_instances + rng.below(opt.max_instances - opt.min_instances + 1);
  const double side = static_cast<double>(std::min(opt.canvas_h, opt.canvas_w));
  const auto& classes = object_classes();
  for (std::size_t n = 0; n < count; ++n) {
    const auto& cls = classes[rng.below(classes.size())];
    Rgb color = palette()[rng.below(palette().size())];
    if (opt.shared_color && n > 0) color = spec.instances.front().color;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < opt.placement_attempts && !placed; ++attempt) {
      InstanceSpec inst;
      inst.noun = cls.noun;
      inst.shape = cls.shape;
      inst.texture = cls.texture;
      inst.color = color;
      inst.scale = side * rng.uniform(opt.min_scale_fraction, opt.max_scale_fraction);
      inst.center_x = rng.uniform(inst.scale, static_cast<double>(opt.canvas_w) - inst.scale);
      inst.center_y = rng.uniform(inst.scale, static_cast<double>(opt.canvas_h) - inst.scale);
      spec.instances.push_back(inst);
      try {
        validated_footprints(spec);
        placed = true;
      } catch (const PlacementError&) {
        spec.instances.pop_back();
      }
    }
    require<PlacementError>(placed, "could not place instance " + std::to_string(n));
  }
  return spec;
}

}  // namespace freeatm::scene
