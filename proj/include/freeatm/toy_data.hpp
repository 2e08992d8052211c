#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "freeatm/attention.hpp"
#include "freeatm/rng.hpp"
#include "freeatm/scene.hpp"
#include "freeatm/toy_train.hpp"

namespace freeatm::contrastive {

struct ToyDataOptions {
  scene::SamplerOptions sampler;
  scene::SimulationOptions simulation;
  double noise_level = 0.0;
  int layers = 3;
  int timesteps = 4;
  std::size_t min_instances = 2;
};

// Oracle scenes paired with their extracted attention masks (upsampled to the
// canvas) and class labels. Scene i uses seed derive_seed({seed, i}).
inline std::vector<ToySample> oracle_toy_samples(std::size_t count, std::uint64_t seed,
                                                 const ToyDataOptions& opt = {}) {
  scene::SamplerOptions sampler = opt.sampler;
  sampler.min_instances = std::max(sampler.min_instances, opt.min_instances);
  sampler.max_instances = std::max(sampler.max_instances, sampler.min_instances);
  std::vector<ToySample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed({seed, i});
    const scene::OracleScene sc = scene::generate_scene(scene::sample_scene_spec(s, sampler));
    const auto stack = scene::simulate_attention(sc, opt.noise_level, opt.layers, opt.timesteps,
                                                 derive_seed({s, 0xa77e}), opt.simulation);
    const auto masks = attention::extract_instance_masks(stack, sc.alignment, sc.spec.canvas_h,
                                                         sc.spec.canvas_w);
    ToySample sample;
    sample.image = to_float_image(sc.image);
    for (const auto& m : masks) {
      sample.masks.push_back({m.instance_id, m.values});
      sample.labels.push_back(scene::class_index(m.noun));
    }
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace freeatm::contrastive
