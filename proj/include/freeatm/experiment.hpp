#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "freeatm/errors.hpp"
#include "freeatm/masking.hpp"
#include "freeatm/pipeline.hpp"
#include "freeatm/png_io.hpp"
#include "freeatm/scene.hpp"
#include "freeatm/toy_data.hpp"
#include "freeatm/toy_train.hpp"

namespace freeatm::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Kind { kContrastive, kMaskingSchedule };

inline Kind parse_kind(const std::string& s) {
  if (s == "contrastive") return Kind::kContrastive;
  if (s == "masking_schedule") return Kind::kMaskingSchedule;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

// Toy defaults: same-coloured objects and colour-shuffled views, so that
// telling instances apart takes shape and texture rather than hue.
inline contrastive::ToyTrainConfig default_toy_train() {
  contrastive::ToyTrainConfig t;
  t.epochs = 80;
  t.augment.channel_shuffle_prob = 0.8;
  return t;
}

inline contrastive::ToyDataOptions default_toy_data() {
  contrastive::ToyDataOptions d;
  d.min_instances = 3;
  d.sampler.max_instances = 4;
  d.sampler.shared_color = true;
  return d;
}

struct ExperimentConfig {
  Kind kind = Kind::kContrastive;
  std::string shard_dir;  // empty: scenes come straight from the oracle
  std::uint64_t seed = 0;

  // contrastive
  std::size_t train_scenes = 200;
  std::size_t heldout_scenes = 400;
  contrastive::ToyTrainConfig train = default_toy_train();
  contrastive::ToyDataOptions data = default_toy_data();

  // masking_schedule
  std::size_t schedule_epochs = 10;
  std::vector<double> beta_max_values = {0.0, 0.4, 0.8};
  double mask_ratio = 0.75;
  std::size_t patch_rows = 14;
  std::size_t patch_cols = 14;
};

inline contrastive::NegativeSet parse_negatives(const std::string& s) {
  if (s == "cross_and_same_view") return contrastive::NegativeSet::kCrossAndSameView;
  if (s == "same_view_only") return contrastive::NegativeSet::kSameViewOnly;
  throw ConfigError("unknown negative set '" + s + "'");
}

// Applies the keys present in `j` on top of `base`; unknown keys raise
// ConfigError.
inline ExperimentConfig merge_experiment_config(ExperimentConfig base, const json& j) {
  require<ConfigError>(j.is_object(), "experiment config must be a JSON object");
  static const std::set<std::string> known = {
      "kind",         "shard_dir",      "seed",          "train_scenes",  "heldout_scenes",
      "epochs",       "batch_size",     "temperature",   "learning_rate", "negatives",
      "bank_capacity", "momentum",      "augment",       "noise_level",   "background_variation",
      "min_instances", "max_instances", "shared_color",
      "schedule_epochs", "beta_max_values", "mask_ratio", "patch_rows",   "patch_cols"};
  static const std::set<std::string> augment_keys = {
      "out_h",      "out_w",    "min_scale",  "max_scale",  "min_aspect", "max_aspect",
      "flip_prob",  "brightness", "contrast", "saturation", "channel_shuffle_prob"};
  for (const auto& [key, value] : j.items())
    require<ConfigError>(known.count(key) > 0, "unknown experiment key '" + key + "'");
  try {
    auto take = [](const json& src, const char* key, auto& field) {
      if (src.contains(key)) src.at(key).get_to(field);
    };
    if (j.contains("kind")) base.kind = parse_kind(j.at("kind").get<std::string>());
    take(j, "shard_dir", base.shard_dir);
    take(j, "seed", base.seed);
    take(j, "train_scenes", base.train_scenes);
    take(j, "heldout_scenes", base.heldout_scenes);
    take(j, "epochs", base.train.epochs);
    take(j, "batch_size", base.train.batch_size);
    take(j, "temperature", base.train.temperature);
    take(j, "learning_rate", base.train.learning_rate);
    if (j.contains("negatives")) base.train.negatives = parse_negatives(j.at("negatives").get<std::string>());
    take(j, "bank_capacity", base.train.bank_capacity);
    take(j, "momentum", base.train.momentum);
    if (j.contains("augment")) {
      const json& a = j.at("augment");
      require<ConfigError>(a.is_object(), "augment must be a JSON object");
      for (const auto& [key, value] : a.items())
        require<ConfigError>(augment_keys.count(key) > 0, "unknown augment key '" + key + "'");
      auto& aug = base.train.augment;
      take(a, "out_h", aug.out_h);
      take(a, "out_w", aug.out_w);
      take(a, "min_scale", aug.min_scale);
      take(a, "max_scale", aug.max_scale);
      take(a, "min_aspect", aug.min_aspect);
      take(a, "max_aspect", aug.max_aspect);
      take(a, "flip_prob", aug.flip_prob);
      take(a, "brightness", aug.brightness);
      take(a, "contrast", aug.contrast);
      take(a, "saturation", aug.saturation);
      take(a, "channel_shuffle_prob", aug.channel_shuffle_prob);
    }
    take(j, "noise_level", base.data.noise_level);
    take(j, "background_variation", base.data.sampler.background_variation);
    take(j, "min_instances", base.data.min_instances);
    take(j, "max_instances", base.data.sampler.max_instances);
    take(j, "shared_color", base.data.sampler.shared_color);
    take(j, "schedule_epochs", base.schedule_epochs);
    take(j, "beta_max_values", base.beta_max_values);
    take(j, "mask_ratio", base.mask_ratio);
    take(j, "patch_rows", base.patch_rows);
    take(j, "patch_cols", base.patch_cols);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment value: ") + e.what());
  }
  return base;
}

// Training samples rebuilt from a shard's images, stored masks and nouns.
inline std::vector<contrastive::ToySample> load_shard_samples(const fs::path& shard) {
  std::vector<contrastive::ToySample> out;
  for (const auto& r : pipeline::load_records(shard)) {
    contrastive::ToySample s;
    s.image = to_float_image(png::decode_rgb(png::read_file(shard / r.image_file)));
    for (const auto& inst : r.instances) {
      s.masks.push_back({inst.instance_id, png::decode_mask16(png::read_file(shard / inst.mask_file))});
      const int label = scene::class_index(inst.noun);
      require<ConfigError>(label >= 0, "shard noun '" + inst.noun + "' is not a known class");
      s.labels.push_back(label);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline json epoch_json(const contrastive::EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"loss", m.loss}, {"anchors", m.anchors}, {"skipped_scenes", m.skipped_scenes}};
}

// Both training modes on the same scenes and seed; returns the comparison
// table. With a shard, its first train_scenes records train and the next
// heldout_scenes records feed the probe.
using EpochCallback = std::function<void(contrastive::TrainMode, const contrastive::EpochMetrics&)>;

inline json run_contrastive(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {}) {
  std::vector<contrastive::ToySample> train, heldout;
  if (!cfg.shard_dir.empty()) {
    auto all = load_shard_samples(cfg.shard_dir);
    require<ConfigError>(all.size() > cfg.train_scenes + 1,
                         "shard has " + std::to_string(all.size()) +
                             " records; need more than train_scenes + 1");
    const std::size_t stop = std::min(all.size(), cfg.train_scenes + cfg.heldout_scenes);
    train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.train_scenes));
    heldout.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.train_scenes),
                   all.begin() + static_cast<std::ptrdiff_t>(stop));
  } else {
    train = contrastive::oracle_toy_samples(cfg.train_scenes, derive_seed({cfg.seed, 0x7a}), cfg.data);
    heldout =
        contrastive::oracle_toy_samples(cfg.heldout_scenes, derive_seed({cfg.seed, 0x7b}), cfg.data);
  }

  json rows = json::array();
  double accuracy[2] = {0.0, 0.0};
  for (const auto mode : {contrastive::TrainMode::kImageLevel, contrastive::TrainMode::kInstanceLevel}) {
    contrastive::ToyTrainConfig tc = cfg.train;
    tc.mode = mode;
    tc.seed = cfg.seed;
    json epochs = json::array();
    std::optional<contrastive::ToyTrainResult> result;
    try {
      result.emplace(contrastive::toy_train(train, heldout, tc,
                                      [&](const contrastive::EpochMetrics& m) {
                                        epochs.push_back(epoch_json(m));
                                        if (on_epoch) on_epoch(mode, m);
                                      }));
    } catch (const TrainingError& e) {
      throw TrainingError(e.epoch(), contrastive::to_string(mode) + " run diverged");
    }
    accuracy[mode == contrastive::TrainMode::kInstanceLevel ? 1 : 0] = result->probe.test_accuracy;
    rows.push_back({{"mode", contrastive::to_string(mode)},
                    {"epochs", epochs},
                    {"probe",
                     {{"train_accuracy", result->probe.train_accuracy},
                      {"test_accuracy", result->probe.test_accuracy},
                      {"train_instances", result->probe.train_count},
                      {"test_instances", result->probe.test_count}}}});
  }
  return {{"kind", "contrastive"},
          {"seed", cfg.seed},
          {"train_scenes", train.size()},
          {"heldout_scenes", heldout.size()},
          {"epochs", cfg.train.epochs},
          {"results", rows},
          {"margin_points", 100.0 * (accuracy[1] - accuracy[0])}};
}

// Linear interpolation quantile of an unsorted sample; empty → null.
inline json quantile_json(std::vector<double> v) {
  if (v.empty()) return nullptr;
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {{"min", v.front()}, {"q25", q(0.25)}, {"median", q(0.5)}, {"q75", q(0.75)}, {"max", v.back()}};
}

// Per-epoch mask plans under linear beta ramps. Epoch e plans the mask of
// scene e (cycling through the shard when one is given).
inline json run_masking_schedule(const ExperimentConfig& cfg) {
  require<ConfigError>(cfg.schedule_epochs >= 1, "schedule_epochs must be >= 1");
  std::vector<std::vector<Map>> scenes;
  if (!cfg.shard_dir.empty()) {
    for (auto& s : load_shard_samples(cfg.shard_dir)) {
      std::vector<Map> maps;
      for (auto& m : s.masks) maps.push_back(std::move(m.values));
      scenes.push_back(std::move(maps));
    }
    require<ConfigError>(!scenes.empty(), "shard has no records");
  } else {
    for (const auto& s : contrastive::oracle_toy_samples(cfg.schedule_epochs + 1,
                                                        derive_seed({cfg.seed, 0x5c}), cfg.data)) {
      std::vector<Map> maps;
      for (const auto& m : s.masks) maps.push_back(m.values);
      scenes.push_back(std::move(maps));
    }
  }

  json schedules = json::array();
  for (const double beta_max : cfg.beta_max_values) {
    const masking::BetaSchedule schedule{beta_max, static_cast<double>(cfg.schedule_epochs)};
    json epochs = json::array();
    for (std::size_t e = 0; e <= cfg.schedule_epochs; ++e) {
      const double beta = masking::beta_at(schedule, static_cast<double>(e));
      const auto scores =
          masking::patch_scores(std::span<const Map>(scenes[e % scenes.size()]), cfg.patch_rows, cfg.patch_cols);
      const auto plan = masking::plan_mask(scores, cfg.mask_ratio, beta, derive_seed({cfg.seed, e}));
      std::vector<double> attn_scores, random_scores;
      for (const auto i : plan.attn_indices) attn_scores.push_back(scores.scores[i]);
      for (const auto i : plan.random_indices) random_scores.push_back(scores.scores[i]);
      epochs.push_back({{"epoch", e},
                        {"beta", beta},
                        {"num_patches", plan.num_patches},
                        {"masked_total", plan.masked_total},
                        {"attn_count", plan.attn_indices.size()},
                        {"random_count", plan.random_indices.size()},
                        {"attn_scores", quantile_json(attn_scores)},
                        {"random_scores", quantile_json(random_scores)}});
    }
    schedules.push_back({{"beta_max", beta_max}, {"epochs", epochs}});
  }
  return {{"kind", "masking_schedule"},
          {"seed", cfg.seed},
          {"mask_ratio", cfg.mask_ratio},
          {"patch_grid", {cfg.patch_rows, cfg.patch_cols}},
          {"schedules", schedules}};
}

inline json run_experiment(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {}) {
  return cfg.kind == Kind::kContrastive ? run_contrastive(cfg, on_epoch) : run_masking_schedule(cfg);
}

// Runs the experiment and writes its metrics as pretty-printed JSON.
inline json run_experiment(const ExperimentConfig& cfg, const fs::path& metrics_file,
                           const EpochCallback& on_epoch = {}) {
  json metrics = run_experiment(cfg, on_epoch);
  std::ofstream out(metrics_file, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(out), "cannot write metrics file " + metrics_file.string());
  out << metrics.dump(2) << '\n';
  return metrics;
}

}  // namespace freeatm::experiment
