#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"

namespace freeatm::attention {

// One stored cross-attention map: H x W x L, softmax-normalised over the
// token axis. Entries are assumed head-averaged already.
struct AttentionEntry {
  int layer_id = 0;
  int timestep = 0;
  Grid<double> map;
};

struct AttentionStack {
  std::vector<AttentionEntry> entries;
  std::size_t prompt_length = 0;

  // Throws ShapeError when an entry has the wrong token depth or an empty
  // spatial extent, or when a spatial row does not sum to one within `tol`.
  void validate(double tol = 1e-6) const {
    for (const auto& e : entries) {
      require<ShapeError>(e.map.height() >= 1 && e.map.width() >= 1,
                          "attention entry has empty spatial extent");
      require<ShapeError>(e.map.depth() == prompt_length,
                          "attention entry depth " + std::to_string(e.map.depth()) +
                              " != prompt length " + std::to_string(prompt_length));
      for (std::size_t y = 0; y < e.map.height(); ++y) {
        for (std::size_t x = 0; x < e.map.width(); ++x) {
          double sum = 0.0;
          for (const double v : e.map.pixel(y, x)) {
            require<ShapeError>(v >= 0.0, "attention value is negative");
            sum += v;
          }
          require<ShapeError>(std::abs(sum - 1.0) <= tol, "attention row does not sum to 1");
        }
      }
    }
  }
};

struct NounSpan {
  int instance_id = 0;
  std::string noun;
  std::vector<std::size_t> token_indices;
};

struct TokenAlignment {
  std::string prompt;
  std::vector<std::string> tokens;
  std::vector<NounSpan> noun_spans;

  void validate(std::size_t prompt_length) const {
    require<EmptyAlignmentError>(!noun_spans.empty(), "alignment has no noun spans");
    std::set<int> ids;
    for (const auto& span : noun_spans) {
      require<EmptyAlignmentError>(!span.token_indices.empty(),
                                   "noun '" + span.noun + "' has no token indices");
      require<ParameterError>(ids.insert(span.instance_id).second,
                              "duplicate instance id " + std::to_string(span.instance_id));
      for (const std::size_t t : span.token_indices) {
        require<IndexError>(t < prompt_length, "token index " + std::to_string(t) +
                                                   " out of range for prompt length " +
                                                   std::to_string(prompt_length));
      }
    }
  }
};

// Per-instance raw maps, one per stack entry, in entry order.
struct InstanceMaps {
  int instance_id = 0;
  std::string noun;
  std::vector<Map> maps;
};

// Aggregated and min-max normalised map bound to one instance.
struct InstanceMask {
  int instance_id = 0;
  std::string noun;
  Map values;
};

// softmax_l(Q[h,w,:] . K[l,:] / sqrt(d)) for every spatial position.
// `queries` is H x W x C, `keys` is an L x C grid (height L, width C).
inline Grid<double> cross_attention(const Grid<double>& queries, const Grid<double>& keys,
                                    int scale_dim) {
  require<ParameterError>(scale_dim >= 1, "scale dimension d must be >= 1");
  require<ShapeError>(queries.depth() >= 1, "query feature dimension must be >= 1");
  require<ShapeError>(keys.depth() == 1, "keys must be an L x C matrix");
  require<ShapeError>(keys.width() == queries.depth(),
                      "feature dimension mismatch: Q has " + std::to_string(queries.depth()) +
                          ", K has " + std::to_string(keys.width()));
  require<ShapeError>(keys.height() >= 1, "prompt length must be >= 1");

  const std::size_t tokens = keys.height();
  const std::size_t features = keys.width();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(scale_dim));
  Grid<double> out(queries.height(), queries.width(), tokens);
  std::vector<double> logits(tokens);

  for (std::size_t y = 0; y < queries.height(); ++y) {
    for (std::size_t x = 0; x < queries.width(); ++x) {
      const auto q = queries.pixel(y, x);
      double max_logit = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < tokens; ++l) {
        double dot = 0.0;
        for (std::size_t c = 0; c < features; ++c) dot += q[c] * keys(l, c);
        logits[l] = dot * inv_sqrt_d;
        max_logit = std::max(max_logit, logits[l]);
      }
      double total = 0.0;
      for (std::size_t l = 0; l < tokens; ++l) {
        logits[l] = std::exp(logits[l] - max_logit);
        total += logits[l];
      }
      auto row = out.pixel(y, x);
      for (std::size_t l = 0; l < tokens; ++l) row[l] = logits[l] / total;
    }
  }
  return out;
}

// Slices each stack entry at the tokens of every noun. Multi-token nouns take
// the elementwise mean of their token slices.
inline std::vector<InstanceMaps> select_token_maps(const AttentionStack& stack,
                                                   const TokenAlignment& alignment) {
  alignment.validate(stack.prompt_length);
  std::vector<InstanceMaps> result;
  result.reserve(alignment.noun_spans.size());
  for (const auto& span : alignment.noun_spans) {
    InstanceMaps inst{span.instance_id, span.noun, {}};
    inst.maps.reserve(stack.entries.size());
    const double inv_count = 1.0 / static_cast<double>(span.token_indices.size());
    for (const auto& entry : stack.entries) {
      require<ShapeError>(entry.map.depth() == stack.prompt_length,
                          "attention entry depth does not match prompt length");
      Map m(entry.map.height(), entry.map.width());
      for (std::size_t y = 0; y < m.height(); ++y) {
        for (std::size_t x = 0; x < m.width(); ++x) {
          if (span.token_indices.size() == 1) {
            m(y, x) = entry.map(y, x, span.token_indices.front());
          } else {
            double sum = 0.0;
            for (const std::size_t t : span.token_indices) sum += entry.map(y, x, t);
            m(y, x) = sum * inv_count;
          }
        }
      }
      inst.maps.push_back(std::move(m));
    }
    result.push_back(std::move(inst));
  }
  return result;
}

// Resizes every map to target_h x target_w and takes the unweighted mean.
inline Map aggregate_maps(std::span<const Map> maps, std::size_t target_h, std::size_t target_w) {
  require<ParameterError>(!maps.empty(), "aggregate_maps needs at least one map");
  require<ShapeError>(target_h >= 1 && target_w >= 1, "aggregation target must be >= 1x1");
  Map sum(target_h, target_w);
  for (const auto& m : maps) {
    require<ShapeError>(m.depth() == 1, "aggregate_maps expects single-channel maps");
    const Map resized = resize_bilinear(m, target_h, target_w);
    for (std::size_t i = 0; i < sum.size(); ++i) sum.storage()[i] += resized.storage()[i];
  }
  if (maps.size() > 1) {
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (double& v : sum.storage()) v *= inv;
  }
  return sum;
}

// Min-max normalisation to [0,1]; a constant map becomes all zeros.
inline Map normalize_map(const Map& map) {
  require<ShapeError>(map.size() >= 1, "normalize_map needs at least one element");
  const auto [lo_it, hi_it] = std::minmax_element(map.storage().begin(), map.storage().end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  Map out(map.height(), map.width(), map.depth());
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < map.size(); ++i) {
    out.storage()[i] = std::clamp((map.storage()[i] - lo) / range, 0.0, 1.0);
  }
  return out;
}

// select -> aggregate -> normalise for every noun of the alignment.
inline std::vector<InstanceMask> extract_instance_masks(const AttentionStack& stack,
                                                        const TokenAlignment& alignment,
                                                        std::size_t target_h,
                                                        std::size_t target_w) {
  require<ParameterError>(!stack.entries.empty(), "attention stack has no entries");
  std::vector<InstanceMask> masks;
  for (auto& inst : select_token_maps(stack, alignment)) {
    masks.push_back({inst.instance_id, inst.noun,
                     normalize_map(aggregate_maps(inst.maps, target_h, target_w))});
  }
  return masks;
}

}  // namespace freeatm::attention
