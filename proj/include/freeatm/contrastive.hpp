#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "freeatm/errors.hpp"
#include "freeatm/geometry.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/rng.hpp"

namespace freeatm::contrastive {

using Vec = std::vector<double>;

// sum_ij a_ij z_ij / sum_ij a_ij. `features` is h x w x c, `weights` h x w.
inline Vec attentive_pool(const Grid<double>& features, const Map& weights) {
  require<ShapeError>(features.height() == weights.height() && features.width() == weights.width(),
                      "mask " + weights.shape_string() + " does not match feature grid " +
                          features.shape_string());
  double total = 0.0;
  for (const double a : weights.storage()) total += a;
  require<DegenerateMaskError>(total > 0.0, "attentive pooling over a mask with zero weight");
  Vec out(features.depth(), 0.0);
  for (std::size_t y = 0; y < features.height(); ++y) {
    for (std::size_t x = 0; x < features.width(); ++x) {
      const double a = weights(y, x);
      if (a == 0.0) continue;
      const auto z = features.pixel(y, x);
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += a * z[k];
    }
  }
  for (double& v : out) v /= total;
  return out;
}

// Gradient of attentive_pool w.r.t. the feature grid for upstream gradient g.
inline void attentive_pool_backward(const Map& weights, std::span<const double> upstream,
                                    Grid<double>& feature_grad) {
  double total = 0.0;
  for (const double a : weights.storage()) total += a;
  for (std::size_t y = 0; y < weights.height(); ++y) {
    for (std::size_t x = 0; x < weights.width(); ++x) {
      const double a = weights(y, x) / total;
      if (a == 0.0) continue;
      auto g = feature_grad.pixel(y, x);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += a * upstream[k];
    }
  }
}

inline double dot(std::span<const double> u, std::span<const double> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

inline double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
  require<ShapeError>(u.size() == v.size(), "cosine_sim of vectors with different lengths");
  const double nu = norm(u);
  const double nv = norm(v);
  require<NormError>(nu > 0.0 && nv > 0.0, "cosine_sim of a zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline Vec l2_normalized(std::span<const double> u) {
  const double n = norm(u);
  require<NormError>(n > 0.0, "cannot normalise a zero vector");
  Vec out(u.begin(), u.end());
  for (double& v : out) v /= n;
  return out;
}

// -log( e^{p/t} / (e^{p/t} + sum_n e^{n/t}) ), evaluated as
// logsumexp(p/t, n_1/t, ...) - p/t.
inline double instance_nce_loss(double pos_sim, std::span<const double> neg_sims,
                                double temperature = 1.0) {
  require<ParameterError>(temperature > 0.0, "temperature must be positive");
  const double pos = pos_sim / temperature;
  double mx = pos;
  for (const double n : neg_sims) mx = std::max(mx, n / temperature);
  double sum = std::exp(pos - mx);
  for (const double n : neg_sims) sum += std::exp(n / temperature - mx);
  return (mx + std::log(sum)) - pos;
}

enum class NegativeSet {
  // Other instances from both views.
  kCrossAndSameView,
  // Other instances from the anchor's own view only, as in the literal equation.
  kSameViewOnly,
};

struct LossOptions {
  double temperature = 1.0;
  NegativeSet negatives = NegativeSet::kCrossAndSameView;
  // Anchors from both views; otherwise view A only (MoCo-style query side).
  bool symmetric = true;
};

struct LossResult {
  double loss = 0.0;
  std::vector<Vec> grad_a;  // d loss / d view_a[m]
  std::vector<Vec> grad_b;
};

namespace detail {

// d cos(u, v) / du
inline void cosine_grad(std::span<const double> u, std::span<const double> v, double scale,
                        std::span<double> out) {
  const double nu = norm(u);
  const double nv = norm(v);
  const double c = dot(u, v) / (nu * nv);
  for (std::size_t i = 0; i < u.size(); ++i)
    out[i] += scale * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
}

}  // namespace detail

// Instance contrastive loss over a batch. Row m of view_a and row m of view_b
// are the same instance seen in two views; every other row is a negative.
// Bank entries are extra negatives and receive no gradient. Returns the mean
// loss over all anchors and its gradient with respect to every row.
inline LossResult batch_instance_loss_with_grad(std::span<const Vec> view_a,
                                                std::span<const Vec> view_b,
                                                std::span<const Vec> bank,
                                                const LossOptions& opt = {}) {
  require<EmptyBatchError>(!view_a.empty(), "batch has no shared instances");
  require<ShapeError>(view_a.size() == view_b.size(), "views have different instance counts");
  require<ParameterError>(opt.temperature > 0.0, "temperature must be positive");
  const std::size_t n = view_a.size();
  const std::size_t dim = view_a.front().size();
  for (std::size_t m = 0; m < n; ++m) {
    require<ShapeError>(view_a[m].size() == dim && view_b[m].size() == dim,
                        "feature vectors have inconsistent dimensions");
    require<NormError>(norm(view_a[m]) > 0.0 && norm(view_b[m]) > 0.0,
                       "zero feature vector in batch");
  }

  LossResult result;
  result.grad_a.assign(n, Vec(dim, 0.0));
  result.grad_b.assign(n, Vec(dim, 0.0));
  const std::size_t passes = opt.symmetric ? 2 : 1;
  const double anchors = static_cast<double>(n * passes);

  struct Candidate {
    const Vec* vec;
    Vec* grad;  // nullptr for bank entries
  };
  std::vector<Candidate> cands;
  std::vector<double> logits;

  for (std::size_t pass = 0; pass < passes; ++pass) {
    const auto& own = pass == 0 ? view_a : view_b;
    const auto& other = pass == 0 ? view_b : view_a;
    auto& own_grad = pass == 0 ? result.grad_a : result.grad_b;
    auto& other_grad = pass == 0 ? result.grad_b : result.grad_a;

    for (std::size_t m = 0; m < n; ++m) {
      cands.clear();
      cands.push_back({&other[m], &other_grad[m]});  // positive first
      for (std::size_t k = 0; k < n; ++k) {
        if (k == m) continue;
        cands.push_back({&own[k], &own_grad[k]});
        if (opt.negatives == NegativeSet::kCrossAndSameView) cands.push_back({&other[k], &other_grad[k]});
      }
      for (const auto& q : bank) cands.push_back({&q, nullptr});

      logits.resize(cands.size());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < cands.size(); ++j) {
        logits[j] = cosine_sim(own[m], *cands[j].vec) / opt.temperature;
        mx = std::max(mx, logits[j]);
      }
      double sum = 0.0;
      for (const double l : logits) sum += std::exp(l - mx);
      const double lse = mx + std::log(sum);
      result.loss += (lse - logits[0]) / anchors;

      for (std::size_t j = 0; j < cands.size(); ++j) {
        const double p = std::exp(logits[j] - lse);
        const double dlogit = (p - (j == 0 ? 1.0 : 0.0)) / (opt.temperature * anchors);
        if (dlogit == 0.0) continue;
        detail::cosine_grad(own[m], *cands[j].vec, dlogit, own_grad[m]);
        if (cands[j].grad) detail::cosine_grad(*cands[j].vec, own[m], dlogit, *cands[j].grad);
      }
    }
  }
  return result;
}

inline double batch_instance_loss(std::span<const Vec> view_a, std::span<const Vec> view_b,
                                  std::span<const Vec> bank = {}, const LossOptions& opt = {}) {
  return batch_instance_loss_with_grad(view_a, view_b, bank, opt).loss;
}

// theta_k <- m * theta_k + (1 - m) * theta_q
inline void ema_update(std::span<double> key_params, std::span<const double> query_params,
                       double momentum) {
  require<ParameterError>(momentum >= 0.0 && momentum <= 1.0, "momentum must be in [0,1]");
  require<ShapeError>(key_params.size() == query_params.size(),
                      "key and query encoders have different parameter counts");
  if (momentum == 1.0) return;
  if (momentum == 0.0) {
    std::copy(query_params.begin(), query_params.end(), key_params.begin());
    return;
  }
  for (std::size_t i = 0; i < key_params.size(); ++i)
    key_params[i] = momentum * key_params[i] + (1.0 - momentum) * query_params[i];
}

// FIFO ring buffer of unit-norm instance features.
class MemoryBank {
 public:
  struct Entry {
    Vec vector;
    int instance_tag = 0;
  };

  explicit MemoryBank(std::size_t capacity) : capacity_(capacity) {
    require<ParameterError>(capacity >= 1, "memory bank capacity must be >= 1");
    slots_.reserve(capacity);
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return slots_.size(); }
  bool empty() const noexcept { return slots_.empty(); }
  std::size_t write_pointer() const noexcept { return write_pointer_; }

  // Throws NormError (and leaves the bank unchanged) if any vector is not
  // unit-norm within 1e-5.
  void push(std::span<const Vec> feats, std::span<const int> tags = {}) {
    for (const auto& f : feats)
      require<NormError>(std::abs(norm(f) - 1.0) <= 1e-5, "memory bank entries must be unit-norm");
    for (std::size_t i = 0; i < feats.size(); ++i) {
      Entry e{feats[i], i < tags.size() ? tags[i] : 0};
      if (slots_.size() < capacity_) {
        slots_.push_back(std::move(e));
      } else {
        slots_[write_pointer_] = std::move(e);
      }
      write_pointer_ = (write_pointer_ + 1) % capacity_;
    }
  }

  // Oldest first.
  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    out.reserve(slots_.size());
    const std::size_t start = slots_.size() < capacity_ ? 0 : write_pointer_;
    for (std::size_t i = 0; i < slots_.size(); ++i) out.push_back(slots_[(start + i) % slots_.size()]);
    return out;
  }

  std::vector<Vec> vectors() const {
    std::vector<Vec> out;
    for (auto& e : entries()) out.push_back(std::move(e.vector));
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t write_pointer_ = 0;
  std::vector<Entry> slots_;
};

struct KeyedMask {
  int instance_id = 0;
  Map values;
};

struct View {
  FloatImage image;
  geometry::ViewTransform transform;
  std::vector<KeyedMask> masks;
};

struct ViewPair {
  View a;
  View b;
  std::vector<int> shared_instances;
};

struct AugmentConfig {
  std::size_t out_h = 32;
  std::size_t out_w = 32;
  double min_scale = 0.35;  // crop area fraction
  double max_scale = 1.0;
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double channel_shuffle_prob = 0.0;
};

// Random-resized-crop parameters; falls back to the full frame after 10 tries.
inline geometry::ViewTransform sample_transform(std::size_t h, std::size_t w,
                                                const AugmentConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(h * w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.min_scale, cfg.max_scale);
    const double log_ratio = rng.uniform(std::log(cfg.min_aspect), std::log(cfg.max_aspect));
    const double aspect = std::exp(log_ratio);
    const auto cw = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto ch = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
    geometry::ViewTransform t;
    t.crop = {static_cast<std::size_t>(rng.below(w - cw + 1)),
              static_cast<std::size_t>(rng.below(h - ch + 1)), cw, ch};
    t.hflip = rng.bernoulli(cfg.flip_prob);
    t.out_h = cfg.out_h;
    t.out_w = cfg.out_w;
    return t;
  }
  geometry::ViewTransform t = geometry::ViewTransform::identity(h, w);
  t.hflip = rng.bernoulli(cfg.flip_prob);
  t.out_h = cfg.out_h;
  t.out_w = cfg.out_w;
  return t;
}

// Brightness, contrast and saturation jitter plus optional channel shuffle,
// clamped to [0,1]. A zero-strength config leaves the image unchanged.
inline void photometric_jitter(FloatImage& img, const AugmentConfig& cfg, Rng& rng) {
  const double b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness);
  const double c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
  const double s = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation);
  const bool shuffle = rng.bernoulli(cfg.channel_shuffle_prob);
  std::size_t perm[3] = {0, 1, 2};
  if (shuffle) rng.shuffle(perm, perm + 3);
  if (b == 1.0 && c == 1.0 && s == 1.0 && !shuffle) return;

  double mean = 0.0;
  for (const double v : img.storage()) mean += v * b;
  mean /= static_cast<double>(img.size());
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x) {
      auto px = img.pixel(y, x);
      double rgb[3];
      for (std::size_t k = 0; k < 3; ++k) rgb[k] = (px[perm[k]] * b - mean) * c + mean;
      const double gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      for (std::size_t k = 0; k < 3; ++k) px[k] = std::clamp(gray + (rgb[k] - gray) * s, 0.0, 1.0);
    }
  }
}

inline View make_view(const FloatImage& image, std::span<const KeyedMask> masks,
                      const geometry::ViewTransform& t) {
  View v;
  v.transform = t;
  v.image = geometry::apply_transform(image, t);
  for (const auto& m : masks) v.masks.push_back({m.instance_id, geometry::transform_mask(m.values, t)});
  return v;
}

inline std::vector<int> shared_instances(const View& a, const View& b) {
  std::vector<int> shared;
  for (std::size_t i = 0; i < a.masks.size(); ++i) {
    if (!geometry::absent_in_view(a.masks[i].values) && !geometry::absent_in_view(b.masks[i].values))
      shared.push_back(a.masks[i].instance_id);
  }
  return shared;
}

// Two views from explicit transforms, without photometric jitter.
inline ViewPair make_view_pair_with(const FloatImage& image, std::span<const KeyedMask> masks,
                                    const geometry::ViewTransform& ta,
                                    const geometry::ViewTransform& tb) {
  require<ParameterError>(!masks.empty(), "view pair needs at least one instance mask");
  ViewPair pair{make_view(image, masks, ta), make_view(image, masks, tb), {}};
  pair.shared_instances = shared_instances(pair.a, pair.b);
  return pair;
}

// Two independent seeded crops/flips/jitters; masks follow the geometric part.
// Resamples up to 10 times when no instance survives in both views.
inline ViewPair make_view_pair(const FloatImage& image, std::span<const KeyedMask> masks,
                               const AugmentConfig& cfg, std::uint64_t seed) {
  require<ParameterError>(!masks.empty(), "view pair needs at least one instance mask");
  Rng rng(seed);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const auto ta = sample_transform(image.height(), image.width(), cfg, rng);
    const auto tb = sample_transform(image.height(), image.width(), cfg, rng);
    ViewPair pair = make_view_pair_with(image, masks, ta, tb);
    photometric_jitter(pair.a.image, cfg, rng);
    photometric_jitter(pair.b.image, cfg, rng);
    if (!pair.shared_instances.empty()) return pair;
  }
  throw ViewSamplingError("no instance present in both views after 10 attempts");
}


enum class ViewTag { kA, kB };

struct InstanceFeature {
  int instance_id = 0;
  Vec vector;
  ViewTag view = ViewTag::kA;
};

// Loss for one view pair: rows are the pair's shared instances in order.
inline double batch_instance_loss(const ViewPair& pair, std::span<const InstanceFeature> features,
                                  const MemoryBank* bank, const LossOptions& opt = {}) {
  require<EmptyBatchError>(!pair.shared_instances.empty(), "view pair has no shared instances");
  auto find = [&](int id, ViewTag tag) -> const Vec& {
    for (const auto& f : features)
      if (f.instance_id == id && f.view == tag) return f.vector;
    throw ParameterError("missing feature for instance " + std::to_string(id));
  };
  std::vector<Vec> rows_a, rows_b;
  for (const int id : pair.shared_instances) {
    rows_a.push_back(find(id, ViewTag::kA));
    rows_b.push_back(find(id, ViewTag::kB));
  }
  const std::vector<Vec> bank_vectors = bank ? bank->vectors() : std::vector<Vec>{};
  return batch_instance_loss(rows_a, rows_b, bank_vectors, opt);
}

}  // namespace freeatm::contrastive
