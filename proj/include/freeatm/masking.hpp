#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "json.hpp"

#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/rng.hpp"

namespace freeatm::masking {

struct BetaSchedule {
  double beta_max = 0.8;
  double total_epochs = 1.0;
};

// Linear ramp beta_max * epoch / total_epochs. Fractional epochs are allowed
// so callers can step per iteration.
inline double beta_at(const BetaSchedule& schedule, double epoch) {
  require<ParameterError>(schedule.beta_max >= 0.0 && schedule.beta_max <= 1.0,
                          "beta_max must be in [0,1]");
  require<ParameterError>(schedule.total_epochs >= 1.0, "total_epochs must be >= 1");
  require<ParameterError>(epoch >= 0.0 && epoch <= schedule.total_epochs,
                          "epoch outside [0, total_epochs]");
  return std::clamp(schedule.beta_max * (epoch / schedule.total_epochs), 0.0, schedule.beta_max);
}

struct PatchScores {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;  // row-major, length rows * cols
  std::vector<std::uint8_t> padded;  // 1: patch lies entirely in the zero padding
};

// Elementwise maximum of several instance maps of equal shape.
inline Map fuse_max(std::span<const Map> maps) {
  require<ParameterError>(!maps.empty(), "fuse_max needs at least one map");
  Map out = maps.front();
  for (const auto& m : maps.subspan(1)) {
    require<ShapeError>(m.same_shape(out), "fused maps must share a shape");
    for (std::size_t i = 0; i < out.size(); ++i)
      out.storage()[i] = std::max(out.storage()[i], m.storage()[i]);
  }
  return out;
}

// Mean map value per patch on a rows x cols patch grid. Maps that do not
// divide evenly are zero-padded on the bottom/right to rows*ceil(H/rows) x
// cols*ceil(W/cols).
inline PatchScores patch_scores(const Map& map, std::size_t rows, std::size_t cols) {
  require<ParameterError>(rows >= 1 && cols >= 1, "patch grid must be at least 1x1");
  require<ShapeError>(map.height() >= 1 && map.width() >= 1 && map.depth() == 1,
                      "patch_scores expects a non-empty single-channel map");
  const std::size_t ph = (map.height() + rows - 1) / rows;
  const std::size_t pw = (map.width() + cols - 1) / cols;
  PatchScores out{rows, cols, std::vector<double>(rows * cols, 0.0),
                  std::vector<std::uint8_t>(rows * cols, 0)};
  const double inv_area = 1.0 / static_cast<double>(ph * pw);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t y0 = r * ph;
      const std::size_t x0 = c * pw;
      out.padded[r * cols + c] = (y0 >= map.height() || x0 >= map.width()) ? 1 : 0;
      double sum = 0.0;
      for (std::size_t y = y0; y < std::min(y0 + ph, map.height()); ++y)
        for (std::size_t x = x0; x < std::min(x0 + pw, map.width()); ++x) sum += map(y, x);
      out.scores[r * cols + c] = sum * inv_area;
    }
  }
  return out;
}

inline PatchScores patch_scores(std::span<const Map> maps, std::size_t rows, std::size_t cols) {
  return patch_scores(fuse_max(maps), rows, cols);
}

struct MaskPlan {
  std::size_t num_patches = 0;
  double ratio = 0.75;
  double beta = 0.0;
  std::size_t masked_total = 0;
  std::vector<std::size_t> attn_indices;    // ascending
  std::vector<std::size_t> random_indices;  // ascending
  std::uint64_t seed = 0;

  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

// round-half-up(ratio * P)
inline std::size_t masked_count(std::size_t num_patches, double ratio) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(num_patches) + 0.5));
}

// floor(beta * masked_total); the 1e-9 slack absorbs representation error in
// products that are mathematically integral.
inline std::size_t attention_count(double beta, std::size_t masked_total) {
  return static_cast<std::size_t>(std::floor(beta * static_cast<double>(masked_total) + 1e-9));
}

// Top-k patches by score (ties to the lowest index) plus a seeded uniform
// sample of the remaining masked budget. Patches flagged in `attn_ineligible`
// are never chosen by score but may be drawn at random.
inline MaskPlan plan_mask(std::span<const double> scores, double ratio, double beta,
                          std::uint64_t seed, std::span<const std::uint8_t> attn_ineligible = {}) {
  require<ParameterError>(ratio > 0.0 && ratio < 1.0, "mask ratio must be in (0,1)");
  require<ParameterError>(beta >= 0.0 && beta <= 1.0, "beta must be in [0,1]");
  require<ParameterError>(attn_ineligible.empty() || attn_ineligible.size() == scores.size(),
                          "eligibility flags must match the score count");
  MaskPlan plan;
  plan.num_patches = scores.size();
  plan.ratio = ratio;
  plan.beta = beta;
  plan.seed = seed;
  plan.masked_total = masked_count(scores.size(), ratio);
  require<ParameterError>(plan.masked_total > 0 && plan.masked_total < scores.size(),
                          "mask ratio selects no patches or every patch");
  const std::size_t k = attention_count(beta, plan.masked_total);

  std::vector<std::size_t> ranked;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (attn_ineligible.empty() || !attn_ineligible[i]) ranked.push_back(i);
  require<ParameterError>(ranked.size() >= k, "too few eligible patches for the attention budget");
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  plan.attn_indices.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(plan.attn_indices.begin(), plan.attn_indices.end());

  std::vector<bool> taken(scores.size(), false);
  for (const std::size_t i : plan.attn_indices) taken[i] = true;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!taken[i]) pool.push_back(i);
  Rng rng(seed);
  const std::size_t need = plan.masked_total - k;
  for (std::size_t i = 0; i < need; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  plan.random_indices.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(need));
  std::sort(plan.random_indices.begin(), plan.random_indices.end());
  return plan;
}

inline MaskPlan plan_mask(const PatchScores& scores, double ratio, double beta, std::uint64_t seed) {
  return plan_mask(scores.scores, ratio, beta, seed, scores.padded);
}

inline nlohmann::json to_json(const MaskPlan& plan) {
  return {{"P", plan.num_patches},           {"ratio", plan.ratio},
          {"beta", plan.beta},               {"attn_indices", plan.attn_indices},
          {"random_indices", plan.random_indices}, {"seed", plan.seed}};
}

inline MaskPlan mask_plan_from_json(const nlohmann::json& j) {
  MaskPlan plan;
  plan.num_patches = j.at("P").get<std::size_t>();
  plan.ratio = j.at("ratio").get<double>();
  plan.beta = j.at("beta").get<double>();
  plan.attn_indices = j.at("attn_indices").get<std::vector<std::size_t>>();
  plan.random_indices = j.at("random_indices").get<std::vector<std::size_t>>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.masked_total = plan.attn_indices.size() + plan.random_indices.size();
  return plan;
}

}  // namespace freeatm::masking
