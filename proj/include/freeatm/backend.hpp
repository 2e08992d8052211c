#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "freeatm/attention.hpp"
#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/prompt.hpp"
#include "freeatm/rng.hpp"
#include "freeatm/scene.hpp"

namespace freeatm {

struct GenerationRequest {
  std::uint64_t seed = 0;
  std::size_t canvas_h = 64;
  std::size_t canvas_w = 64;
};

struct GeneratedSample {
  RgbImage image;
  attention::AttentionStack stack;
  attention::TokenAlignment alignment;
  // Only backends with ground truth (the scene oracle) fill this in.
  std::optional<std::vector<BinaryMask>> truth_masks;
};

// Provider of (attention stack, token alignment, image) triples.
class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual std::string name() const = 0;
  virtual std::string version() const = 0;
  virtual GeneratedSample generate(const GenerationRequest& request) const = 0;
};

struct OracleBackendOptions {
  scene::SamplerOptions sampler;
  scene::SimulationOptions simulation;
  double noise_level = 0.3;
  int layers = 3;
  int timesteps = 4;
};

class SceneOracleBackend final : public GeneratorBackend {
 public:
  explicit SceneOracleBackend(OracleBackendOptions options) : options_(std::move(options)) {}

  std::string name() const override { return "scene_oracle"; }
  std::string version() const override { return "1.0"; }

  GeneratedSample generate(const GenerationRequest& request) const override {
    scene::SamplerOptions sampler = options_.sampler;
    sampler.canvas_h = request.canvas_h;
    sampler.canvas_w = request.canvas_w;
    const scene::OracleScene s =
        scene::generate_scene(scene::sample_scene_spec(request.seed, sampler));
    GeneratedSample out;
    out.image = s.image;
    out.alignment = s.alignment;
    out.stack = scene::simulate_attention(s, options_.noise_level, options_.layers,
                                          options_.timesteps, derive_seed({request.seed, 0xa77e}),
                                          options_.simulation);
    out.truth_masks = s.truth_masks;
    return out;
  }

  const OracleBackendOptions& options() const noexcept { return options_; }

 private:
  OracleBackendOptions options_;
};

// What a diffusion hook reports for one prompt: the generated image plus the
// query/key projections seen at every hooked cross-attention call.
struct DiffusionCapture {
  struct Call {
    int layer_id = 0;
    int timestep = 0;
    Grid<double> queries;  // H x W x C, head-averaged
    Grid<double> keys;     // L x C
  };
  RgbImage image;
  int scale_dim = 1;
  std::vector<Call> calls;
};

using DiffusionHook = std::function<DiffusionCapture(const std::string& prompt, std::uint64_t seed,
                                                     std::size_t height, std::size_t width)>;

// Adapter for a real text-to-image model. A hook installed in the model's
// cross-attention layers supplies Q and K; this class turns them into an
// attention stack with cross_attention() and aligns nouns to the prompt
// tokens. Without a hook every request fails with BackendError.
class DiffusionHookBackend final : public GeneratorBackend {
 public:
  explicit DiffusionHookBackend(DiffusionHook hook = {}, std::size_t max_nouns = 3)
      : hook_(std::move(hook)), max_nouns_(max_nouns) {}

  std::string name() const override { return "diffusion_hook"; }
  std::string version() const override { return "1.0"; }

  GeneratedSample generate(const GenerationRequest& request) const override {
    require<BackendError>(static_cast<bool>(hook_),
                          "diffusion_hook backend has no model hook installed");
    Rng rng(request.seed);
    const auto& classes = scene::object_classes();
    const std::size_t count = 1 + rng.below(max_nouns_);
    std::vector<std::string> nouns;
    std::vector<prompt::NounRef> refs;
    for (std::size_t i = 0; i < count; ++i) {
      nouns.push_back(classes[rng.below(classes.size())].noun);
      refs.push_back({static_cast<int>(i), nouns.back()});
    }
    const std::string text = prompt::scene_prompt(nouns);

    DiffusionCapture capture = hook_(text, request.seed, request.canvas_h, request.canvas_w);
    GeneratedSample out;
    out.image = std::move(capture.image);
    out.alignment = prompt::align_nouns(text, refs);
    out.stack.prompt_length = out.alignment.tokens.size();
    require<BackendError>(!capture.calls.empty(), "diffusion hook captured no attention calls");
    for (const auto& call : capture.calls) {
      require<BackendError>(call.keys.height() == out.stack.prompt_length,
                            "hooked key length does not match the prompt token count");
      out.stack.entries.push_back(
          {call.layer_id, call.timestep,
           attention::cross_attention(call.queries, call.keys, capture.scale_dim)});
    }
    return out;
  }

 private:
  DiffusionHook hook_;
  std::size_t max_nouns_;
};

inline std::unique_ptr<GeneratorBackend> make_backend(const std::string& name,
                                                      const OracleBackendOptions& oracle) {
  if (name == "scene_oracle") return std::make_unique<SceneOracleBackend>(oracle);
  if (name == "diffusion_hook") return std::make_unique<DiffusionHookBackend>();
  throw ConfigError("unknown generator backend '" + name + "'");
}

}  // namespace freeatm
