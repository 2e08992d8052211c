#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freeatm/contrastive.hpp"
#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/nn.hpp"
#include "freeatm/rng.hpp"

namespace freeatm::contrastive {

enum class TrainMode { kImageLevel, kInstanceLevel };

inline std::string to_string(TrainMode mode) {
  return mode == TrainMode::kImageLevel ? "image_level" : "instance_level";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "image_level") return TrainMode::kImageLevel;
  if (s == "instance_level") return TrainMode::kInstanceLevel;
  throw ConfigError("unknown training mode '" + s + "'");
}

// One training scene: image, per-instance masks aligned to it, and the class
// label of each instance (used only by the linear probe).
struct ToySample {
  FloatImage image;
  std::vector<KeyedMask> masks;
  std::vector<int> labels;
};

struct EncoderConfig {
  std::size_t widths[4] = {8, 16, 16, 32};
  std::size_t strides[4] = {1, 2, 1, 2};
  std::size_t projection_hidden = 32;
  std::size_t projection_out = 16;
};

struct EncoderCache {
  std::vector<Grid<double>> activations;  // input, then each block's ReLU output
};

// Four conv3x3+ReLU blocks; the returned grid is the feature map before any
// global pooling.
class ToyEncoder {
 public:
  ToyEncoder(const EncoderConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      blocks_.emplace_back(in, cfg.widths[i], cfg.strides[i], rng);
      in = cfg.widths[i];
    }
    feature_dim_ = in;
  }

  std::size_t feature_dim() const noexcept { return feature_dim_; }

  Grid<double> forward(const FloatImage& image, EncoderCache* cache = nullptr) const {
    Grid<double> x = image;
    for (double& v : x.storage()) v -= 0.5;
    if (cache) {
      cache->activations.clear();
      cache->activations.push_back(x);
    }
    for (const auto& block : blocks_) {
      x = block.forward(x);
      nn::relu_inplace(x);
      if (cache) cache->activations.push_back(x);
    }
    return x;
  }

  void backward(const EncoderCache& cache, Grid<double> grad) {
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      nn::relu_backward(cache.activations[i + 1], grad);
      grad = blocks_[i].backward(cache.activations[i], grad);
    }
  }

  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out;
    for (auto& b : blocks_)
      for (auto* p : b.params()) out.push_back(p);
    return out;
  }

 private:
  std::vector<nn::Conv3x3> blocks_;
  std::size_t feature_dim_ = 0;
};

// Two-layer MLP applied after pooling.
class ProjectionHead {
 public:
  ProjectionHead(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed)
      : ProjectionHead(in, hidden, out, Rng(seed)) {}

  struct Cache {
    Vec input;
    Vec hidden;
  };

  Vec forward(std::span<const double> x, Cache* cache = nullptr) const {
    Vec h = first_.forward(x);
    for (double& v : h) v = v > 0.0 ? v : 0.0;
    Vec y = second_.forward(h);
    if (cache) {
      cache->input.assign(x.begin(), x.end());
      cache->hidden = std::move(h);
    }
    return y;
  }

  Vec backward(const Cache& cache, std::span<const double> dy) {
    Vec dh = second_.backward(cache.hidden, dy);
    for (std::size_t i = 0; i < dh.size(); ++i)
      if (cache.hidden[i] <= 0.0) dh[i] = 0.0;
    return first_.backward(cache.input, dh);
  }

  std::vector<nn::Param*> params() {
    auto a = first_.params();
    auto b = second_.params();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

 private:
  ProjectionHead(std::size_t in, std::size_t hidden, std::size_t out, Rng rng)
      : first_(in, hidden, rng), second_(hidden, out, rng) {}
  nn::Linear first_;
  nn::Linear second_;
};

inline void zero_grads(const std::vector<nn::Param*>& params) {
  for (auto* p : params) p->zero_grad();
}

// EMA of every parameter tensor of `key` towards `query`.
inline void ema_update(const std::vector<nn::Param*>& key, const std::vector<nn::Param*>& query,
                       double momentum) {
  require<ShapeError>(key.size() == query.size(), "encoder pair has mismatched parameter lists");
  for (std::size_t i = 0; i < key.size(); ++i) ema_update(key[i]->value, query[i]->value, momentum);
}

struct ProbeConfig {
  std::size_t iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-3;
};

struct ToyTrainConfig {
  TrainMode mode = TrainMode::kInstanceLevel;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double temperature = 0.2;
  double learning_rate = 2e-3;
  NegativeSet negatives = NegativeSet::kCrossAndSameView;
  // bank_capacity > 0 selects the momentum-encoder variant: view B goes
  // through an EMA key encoder and key features are queued as negatives.
  std::size_t bank_capacity = 0;
  double momentum = 0.99;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  EncoderConfig encoder;
  ProbeConfig probe;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  std::size_t anchors = 0;
  std::size_t skipped_scenes = 0;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

struct ToyTrainResult {
  ToyEncoder encoder;
  std::vector<EpochMetrics> epochs;
  ProbeResult probe;
};

// Features of every held-out instance: image resized to the view size,
// encoded, and pooled with its mask resized to the feature grid.
inline void probe_features(const ToyEncoder& encoder, std::span<const ToySample> samples,
                           const AugmentConfig& aug, std::vector<Vec>& feats,
                           std::vector<int>& labels, std::vector<std::size_t>& scene_of) {
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& sample = samples[s];
    const Grid<double> grid = encoder.forward(resize_bilinear(sample.image, aug.out_h, aug.out_w));
    for (std::size_t i = 0; i < sample.masks.size(); ++i) {
      const Map w = resize_bilinear(sample.masks[i].values, grid.height(), grid.width());
      double total = 0.0;
      for (const double v : w.storage()) total += v;
      if (total <= 0.0) continue;
      feats.push_back(attentive_pool(grid, w));
      labels.push_back(sample.labels.at(i));
      scene_of.push_back(s);
    }
  }
}

// Multinomial logistic regression on standardised features, trained by
// full-batch gradient descent on even-indexed scenes and scored on odd ones.
inline ProbeResult linear_probe(const ToyEncoder& encoder, std::span<const ToySample> samples,
                                const AugmentConfig& aug, const ProbeConfig& cfg) {
  std::vector<Vec> feats;
  std::vector<int> labels;
  std::vector<std::size_t> scene_of;
  probe_features(encoder, samples, aug, feats, labels, scene_of);
  require<ParameterError>(!feats.empty(), "linear probe has no held-out instances");

  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < feats.size(); ++i) (scene_of[i] % 2 == 0 ? train : test).push_back(i);
  require<ParameterError>(!train.empty() && !test.empty(), "linear probe needs >= 2 held-out scenes");

  const std::size_t dim = feats.front().size();
  const std::size_t classes =
      static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  Vec mean(dim, 0.0), stddev(dim, 0.0);
  for (const std::size_t i : train)
    for (std::size_t k = 0; k < dim; ++k) mean[k] += feats[i][k] / static_cast<double>(train.size());
  for (const std::size_t i : train)
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = feats[i][k] - mean[k];
      stddev[k] += d * d / static_cast<double>(train.size());
    }
  for (double& s : stddev) s = std::sqrt(s) + 1e-6;
  for (auto& f : feats)
    for (std::size_t k = 0; k < dim; ++k) f[k] = (f[k] - mean[k]) / stddev[k];

  std::vector<double> weights(classes * (dim + 1), 0.0);
  std::vector<double> grad(weights.size());
  std::vector<double> logits(classes);
  auto score = [&](const Vec& f) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double* w = weights.data() + c * (dim + 1);
      double s = w[dim];
      for (std::size_t k = 0; k < dim; ++k) s += w[k] * f[k];
      logits[c] = s;
    }
  };
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const std::size_t i : train) {
      score(feats[i]);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (double& l : logits) total += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < classes; ++c) {
        const double d = logits[c] / total - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0);
        double* g = grad.data() + c * (dim + 1);
        for (std::size_t k = 0; k < dim; ++k) g[k] += d * feats[i][k];
        g[dim] += d;
      }
    }
    const double inv = 1.0 / static_cast<double>(train.size());
    for (std::size_t j = 0; j < weights.size(); ++j)
      weights[j] -= cfg.learning_rate * (grad[j] * inv + cfg.l2 * weights[j]);
  }
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    std::size_t hit = 0;
    for (const std::size_t i : idx) {
      score(feats[i]);
      const auto pred = std::max_element(logits.begin(), logits.end()) - logits.begin();
      hit += pred == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(idx.size());
  };
  return {accuracy(train), accuracy(test), train.size(), test.size()};
}

namespace detail {

struct RowSource {
  std::size_t view;  // index into the batch's encoded views
  Map weights;       // pooling weights at feature resolution
  ProjectionHead::Cache head;
};

struct EncodedView {
  EncoderCache cache;
  Grid<double> features;
};

inline Map uniform_weights(std::size_t h, std::size_t w) { return Map(h, w, 1, 1.0); }

}  // namespace detail

// Trains the toy encoder contrastively on `train`, then scores it with a
// frozen-feature linear probe on `heldout`. Single-threaded by contract.
inline ToyTrainResult toy_train(std::span<const ToySample> train, std::span<const ToySample> heldout,
                                const ToyTrainConfig& cfg,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  require<ParameterError>(!train.empty(), "toy_train needs a non-empty dataset");
  require<ParameterError>(cfg.batch_size >= 1, "batch size must be >= 1");

  ToyEncoder encoder(cfg.encoder, derive_seed({cfg.seed, 1}));
  ProjectionHead head(encoder.feature_dim(), cfg.encoder.projection_hidden,
                      cfg.encoder.projection_out, derive_seed({cfg.seed, 2}));
  const bool momentum_variant = cfg.bank_capacity > 0;
  std::optional<ToyEncoder> key_encoder;
  std::optional<ProjectionHead> key_head;
  std::optional<MemoryBank> bank;
  if (momentum_variant) {
    key_encoder = encoder;
    key_head = head;
    bank.emplace(cfg.bank_capacity);
  }

  std::vector<nn::Param*> params = encoder.params();
  for (auto* p : head.params()) params.push_back(p);
  nn::Adam optimizer(cfg.learning_rate);

  LossOptions loss_opt;
  loss_opt.temperature = cfg.temperature;
  loss_opt.negatives = cfg.negatives;
  loss_opt.symmetric = !momentum_variant;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffler(derive_seed({cfg.seed, 3}));
  std::vector<EpochMetrics> history;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffler.shuffle(order.begin(), order.end());
    EpochMetrics metrics;
    metrics.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<detail::EncodedView> views;
      std::vector<detail::RowSource> sources_a, sources_b;
      std::vector<Vec> rows_a, rows_b;
      std::vector<int> tags;

      for (std::size_t pos = start; pos < stop; ++pos) {
        const std::size_t idx = order[pos];
        const ToySample& sample = train[idx];
        ViewPair pair;
        try {
          pair = make_view_pair(sample.image, sample.masks, cfg.augment,
                                derive_seed({cfg.seed, epoch, idx, 4}));
        } catch (const ViewSamplingError&) {
          ++metrics.skipped_scenes;
          continue;
        }
        const std::size_t va = views.size();
        views.push_back({});
        views[va].features = encoder.forward(pair.a.image, &views[va].cache);
        std::size_t vb = 0;
        Grid<double> key_features;
        if (momentum_variant) {
          key_features = key_encoder->forward(pair.b.image);
        } else {
          vb = views.size();
          views.push_back({});
          views[vb].features = encoder.forward(pair.b.image, &views[vb].cache);
        }
        const Grid<double>& fa = views[va].features;
        const Grid<double>& fb = momentum_variant ? key_features : views[vb].features;

        auto add_row = [&](Map wa, Map wb, int tag) {
          detail::RowSource sa{va, std::move(wa), {}};
          rows_a.push_back(head.forward(attentive_pool(fa, sa.weights), &sa.head));
          detail::RowSource sb{vb, std::move(wb), {}};
          if (momentum_variant) {
            rows_b.push_back(key_head->forward(attentive_pool(fb, sb.weights)));
          } else {
            rows_b.push_back(head.forward(attentive_pool(fb, sb.weights), &sb.head));
          }
          sources_a.push_back(std::move(sa));
          sources_b.push_back(std::move(sb));
          tags.push_back(tag);
        };

        if (cfg.mode == TrainMode::kImageLevel) {
          add_row(detail::uniform_weights(fa.height(), fa.width()),
                  detail::uniform_weights(fb.height(), fb.width()), static_cast<int>(idx));
        } else {
          for (const int id : pair.shared_instances) {
            const auto it = std::find_if(pair.a.masks.begin(), pair.a.masks.end(),
                                         [&](const KeyedMask& m) { return m.instance_id == id; });
            const std::size_t k = static_cast<std::size_t>(it - pair.a.masks.begin());
            Map wa = resize_bilinear(pair.a.masks[k].values, fa.height(), fa.width());
            Map wb = resize_bilinear(pair.b.masks[k].values, fb.height(), fb.width());
            const double sa = std::accumulate(wa.storage().begin(), wa.storage().end(), 0.0);
            const double sb = std::accumulate(wb.storage().begin(), wb.storage().end(), 0.0);
            if (sa <= 0.0 || sb <= 0.0) continue;
            add_row(std::move(wa), std::move(wb), static_cast<int>(idx * 16 + static_cast<std::size_t>(id)));
          }
        }
      }
      if (rows_a.empty()) continue;

      const std::vector<Vec> bank_vectors = bank ? bank->vectors() : std::vector<Vec>{};
      LossResult lr;
      try {
        lr = batch_instance_loss_with_grad(rows_a, rows_b, bank_vectors, loss_opt);
      } catch (const NormError& e) {
        throw TrainingError(epoch, std::string("degenerate features: ") + e.what());
      }
      if (!std::isfinite(lr.loss)) throw TrainingError(epoch, "non-finite contrastive loss");
      loss_sum += lr.loss;
      metrics.anchors += rows_a.size() * (loss_opt.symmetric ? 2 : 1);
      ++batches;

      zero_grads(params);
      std::vector<Grid<double>> feature_grads;
      for (const auto& v : views)
        feature_grads.emplace_back(v.features.height(), v.features.width(), v.features.depth());
      for (std::size_t r = 0; r < rows_a.size(); ++r) {
        const Vec dpool = head.backward(sources_a[r].head, lr.grad_a[r]);
        attentive_pool_backward(sources_a[r].weights, dpool, feature_grads[sources_a[r].view]);
        if (!momentum_variant) {
          const Vec dpool_b = head.backward(sources_b[r].head, lr.grad_b[r]);
          attentive_pool_backward(sources_b[r].weights, dpool_b, feature_grads[sources_b[r].view]);
        }
      }
      for (std::size_t v = 0; v < views.size(); ++v) encoder.backward(views[v].cache, feature_grads[v]);
      for (const auto* p : params)
        for (const double g : p->grad)
          if (!std::isfinite(g)) throw TrainingError(epoch, "non-finite gradient");
      optimizer.step(params);

      if (momentum_variant) {
        ema_update(key_encoder->params(), encoder.params(), cfg.momentum);
        ema_update(key_head->params(), head.params(), cfg.momentum);
        std::vector<Vec> keys;
        for (const auto& row : rows_b) keys.push_back(l2_normalized(row));
        bank->push(keys, tags);
      }
    }
    metrics.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (on_epoch) on_epoch(metrics);
    history.push_back(metrics);
  }

  ProbeResult probe;
  if (!heldout.empty()) probe = linear_probe(encoder, heldout, cfg.augment, cfg.probe);
  return {std::move(encoder), std::move(history), probe};
}

}  // namespace freeatm::contrastive
