#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "freeatm/attention.hpp"
#include "freeatm/backend.hpp"
#include "freeatm/digest.hpp"
#include "freeatm/errors.hpp"
#include "freeatm/geometry.hpp"
#include "freeatm/png_io.hpp"
#include "freeatm/prompt.hpp"
#include "freeatm/rng.hpp"

namespace freeatm::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kShardFormatVersion = 1;

struct PipelineConfig {
  std::string generator = "scene_oracle";
  std::size_t count = 10;
  std::size_t canvas_h = 64;
  std::size_t canvas_w = 64;
  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  double noise_level = 0.3;
  int layers = 3;
  int timesteps = 4;
  double threshold = 0.5;
  std::size_t block_rows = 3;
  std::size_t block_cols = 3;
  std::vector<std::string> templates = {"base", "class_somewhere", "class_with_other_somewhere",
                                        "class_with_other_doing_somewhere"};
  std::string vocab_dir;  // empty: built-in vocabulary
  std::string output_dir;
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;

  void validate() const {
    require<ConfigError>(generator == "scene_oracle" || generator == "diffusion_hook",
                         "unknown generator '" + generator + "'");
    require<ConfigError>(count >= 1, "count must be >= 1");
    require<ConfigError>(canvas_h >= 8 && canvas_w >= 8 && canvas_h <= 4096 && canvas_w <= 4096,
                         "canvas sides must lie in [8, 4096]");
    require<ConfigError>(min_instances >= 1 && min_instances <= max_instances &&
                             max_instances <= scene::kMaxInstances,
                         "instance range must lie within [1, 8]");
    require<ConfigError>(noise_level >= 0.0 && noise_level < 1.0, "noise_level must be in [0,1)");
    require<ConfigError>(layers >= 1 && timesteps >= 1, "layers and timesteps must be >= 1");
    require<ConfigError>(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0,1]");
    require<ConfigError>(block_rows >= 1 && block_cols >= 1, "block grid must be at least 1x1");
    require<ConfigError>(!templates.empty(), "template set is empty");
    for (const auto& t : templates) {
      try {
        prompt::find_template(t);
      } catch (const ParameterError& e) {
        throw ConfigError(e.what());
      }
    }
    require<ConfigError>(!output_dir.empty(), "output_dir is required");
    require<ConfigError>(parallelism >= 1 && parallelism <= 256, "parallelism must be in [1, 256]");
  }

  geometry::BlockGrid block_grid() const { return {block_rows, block_cols, canvas_h, canvas_w}; }
};

// Fields that determine shard bytes. Output location and worker count are
// left out so that they cannot change a manifest.
inline json content_json(const PipelineConfig& c) {
  return {{"generator", c.generator},       {"count", c.count},
          {"canvas_h", c.canvas_h},         {"canvas_w", c.canvas_w},
          {"min_instances", c.min_instances}, {"max_instances", c.max_instances},
          {"noise_level", c.noise_level},   {"layers", c.layers},
          {"timesteps", c.timesteps},       {"threshold", c.threshold},
          {"block_rows", c.block_rows},     {"block_cols", c.block_cols},
          {"templates", c.templates},       {"vocab_dir", c.vocab_dir},
          {"seed", c.seed}};
}

inline json to_json(const PipelineConfig& c) {
  json j = content_json(c);
  j["output_dir"] = c.output_dir;
  j["parallelism"] = c.parallelism;
  return j;
}

// Applies the keys present in `j` on top of `base`. Unknown keys and
// ill-typed values raise ConfigError; the result is not validated.
inline PipelineConfig merge_config(PipelineConfig base, const json& j) {
  require<ConfigError>(j.is_object(), "pipeline config must be a JSON object");
  static const std::set<std::string> known = {
      "generator", "count",     "canvas_h",   "canvas_w",   "min_instances", "max_instances",
      "noise_level", "layers",  "timesteps",  "threshold",  "block_rows",    "block_cols",
      "templates", "vocab_dir", "output_dir", "seed",       "parallelism"};
  for (const auto& [key, value] : j.items())
    require<ConfigError>(known.count(key) > 0, "unknown config key '" + key + "'");
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    take("generator", base.generator);
    take("count", base.count);
    take("canvas_h", base.canvas_h);
    take("canvas_w", base.canvas_w);
    take("min_instances", base.min_instances);
    take("max_instances", base.max_instances);
    take("noise_level", base.noise_level);
    take("layers", base.layers);
    take("timesteps", base.timesteps);
    take("threshold", base.threshold);
    take("block_rows", base.block_rows);
    take("block_cols", base.block_cols);
    take("templates", base.templates);
    take("vocab_dir", base.vocab_dir);
    take("output_dir", base.output_dir);
    take("seed", base.seed);
    take("parallelism", base.parallelism);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return base;
}

inline PipelineConfig load_config_file(const fs::path& path, PipelineConfig base = {}) {
  std::ifstream in(path);
  require<ConfigError>(static_cast<bool>(in), "cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return merge_config(std::move(base), j);
}

struct InstanceRecord {
  int instance_id = 0;
  std::string noun;
  std::string mask_file;
  std::optional<geometry::BoundingBox> bbox;
  std::optional<int> block;

  friend bool operator==(const InstanceRecord&, const InstanceRecord&) = default;
};

struct ShardRecord {
  std::size_t index = 0;
  std::string image_file;
  std::string prompt;
  std::string augmented_prompt;
  std::string vlp_text;
  std::vector<InstanceRecord> instances;
  std::uint64_t seed = 0;
  std::string generator_name;
  std::string generator_version;

  friend bool operator==(const ShardRecord&, const ShardRecord&) = default;
};

inline json to_json(const ShardRecord& r) {
  json instances = json::array();
  for (const auto& inst : r.instances) {
    json bbox = nullptr;
    if (inst.bbox)
      bbox = {{"x0", inst.bbox->x0}, {"y0", inst.bbox->y0}, {"x1", inst.bbox->x1}, {"y1", inst.bbox->y1}};
    instances.push_back({{"instance_id", inst.instance_id},
                         {"noun", inst.noun},
                         {"mask_file", inst.mask_file},
                         {"bbox", bbox},
                         {"block", inst.block ? json(*inst.block) : json(nullptr)}});
  }
  return {{"index", r.index},
          {"image_file", r.image_file},
          {"prompt", r.prompt},
          {"augmented_prompt", r.augmented_prompt},
          {"vlp_text", r.vlp_text},
          {"instances", instances},
          {"seed", r.seed},
          {"generator", {{"name", r.generator_name}, {"version", r.generator_version}}}};
}

// Throws IoError on a malformed record.
inline ShardRecord record_from_json(const json& j) {
  try {
    ShardRecord r;
    r.index = j.at("index").get<std::size_t>();
    r.image_file = j.at("image_file").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.augmented_prompt = j.at("augmented_prompt").get<std::string>();
    r.vlp_text = j.at("vlp_text").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.generator_name = j.at("generator").at("name").get<std::string>();
    r.generator_version = j.at("generator").at("version").get<std::string>();
    for (const auto& ji : j.at("instances")) {
      InstanceRecord inst;
      inst.instance_id = ji.at("instance_id").get<int>();
      inst.noun = ji.at("noun").get<std::string>();
      inst.mask_file = ji.at("mask_file").get<std::string>();
      if (!ji.at("bbox").is_null()) {
        const auto& b = ji.at("bbox");
        inst.bbox = geometry::BoundingBox{b.at("x0").get<std::size_t>(), b.at("y0").get<std::size_t>(),
                                          b.at("x1").get<std::size_t>(), b.at("y1").get<std::size_t>()};
      }
      if (!ji.at("block").is_null()) inst.block = ji.at("block").get<int>();
      r.instances.push_back(std::move(inst));
    }
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed shard record: ") + e.what());
  }
}

inline std::string record_stem(std::size_t index) {
  std::ostringstream s;
  s.fill('0');
  s.width(6);
  s << index;
  return s.str();
}

// Per-record seed: FNV-1a 64 over the global seed bytes followed by the
// record index bytes.
inline std::uint64_t record_seed(std::uint64_t global_seed, std::size_t index) {
  return derive_seed({global_seed, static_cast<std::uint64_t>(index)});
}

inline prompt::Vocabulary load_vocabulary(const std::string& dir) {
  if (dir.empty()) return prompt::default_vocabulary();
  prompt::Vocabulary v;
  const fs::path root(dir);
  v.other_classes = prompt::load_vocabulary_file(root / "others.txt");
  v.places = prompt::load_vocabulary_file(root / "places.txt");
  v.actions = prompt::load_vocabulary_file(root / "actions.txt");
  const auto plurals = prompt::load_vocabulary_file(root / "plurals.txt");
  v.lexicon.plurals.insert(plurals.begin(), plurals.end());
  return v;
}

inline OracleBackendOptions oracle_options(const PipelineConfig& c) {
  OracleBackendOptions o;
  o.sampler.min_instances = c.min_instances;
  o.sampler.max_instances = c.max_instances;
  o.noise_level = c.noise_level;
  o.layers = c.layers;
  o.timesteps = c.timesteps;
  return o;
}

// Everything a record contributes to the shard, before it touches disk.
struct RecordArtifacts {
  ShardRecord record;
  png::Bytes image_png;
  std::vector<png::Bytes> mask_pngs;
  std::string line;  // records.jsonl line without the newline
  std::string digest;
};

inline std::string record_digest(const std::string& line, const png::Bytes& image,
                                 const std::vector<png::Bytes>& masks) {
  Sha256 h;
  h.update(line).update(image);
  for (const auto& m : masks) h.update(m);
  return h.hex();
}

// Masks are stored at 16 bits, so bbox and block are derived from the
// quantised values a reader will see.
inline Map quantize16(const Map& m) {
  Map out = m;
  for (double& v : out.storage()) v = std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0;
  return out;
}

inline RecordArtifacts build_record(const PipelineConfig& config, const GeneratorBackend& backend,
                                    const prompt::Vocabulary& vocab, std::size_t index) {
  const std::uint64_t seed = record_seed(config.seed, index);
  GeneratedSample sample = backend.generate({seed, config.canvas_h, config.canvas_w});
  require<BackendError>(sample.image.height() == config.canvas_h &&
                            sample.image.width() == config.canvas_w && sample.image.depth() == 3,
                        "backend returned an image of shape " + sample.image.shape_string());
  const auto masks = attention::extract_instance_masks(sample.stack, sample.alignment,
                                                       config.canvas_h, config.canvas_w);

  RecordArtifacts out;
  ShardRecord& r = out.record;
  const std::string stem = record_stem(index);
  r.index = index;
  r.seed = seed;
  r.image_file = "images/" + stem + ".png";
  r.prompt = sample.alignment.prompt;
  r.generator_name = backend.name();
  r.generator_version = backend.version();
  const geometry::BlockGrid grid = config.block_grid();
  std::vector<prompt::PositionPrompt> positions;
  for (const auto& m : masks) {
    const Map stored = quantize16(m.values);
    InstanceRecord inst;
    inst.instance_id = m.instance_id;
    inst.noun = m.noun;
    inst.mask_file = "masks/" + stem + "_" + std::to_string(m.instance_id) + ".png";
    inst.bbox = geometry::bbox(geometry::binarize(stored, config.threshold));
    if (inst.bbox) {
      inst.block = geometry::block_index(*inst.bbox, grid);
      positions.push_back(prompt::position_prompt(inst.noun, *inst.block));
    }
    r.instances.push_back(inst);
    out.mask_pngs.push_back(png::encode_mask16(stored));
  }
  Rng pick(derive_seed({seed, 0x7e3}));
  const std::string& tmpl = config.templates[pick.below(config.templates.size())];
  r.augmented_prompt = prompt::augment_prompt(r.instances.front().noun, vocab, tmpl,
                                              derive_seed({seed, 0x7e4}));
  r.vlp_text = prompt::compose_vlp_text(r.prompt, positions);
  out.image_png = png::encode_rgb(sample.image);
  out.line = to_json(r).dump();
  out.digest = record_digest(out.line, out.image_png, out.mask_pngs);
  return out;
}

struct GenerationReport {
  std::size_t written = 0;
  std::vector<std::pair<std::size_t, std::string>> skipped;  // (index, reason)
  std::string manifest_digest;

  bool ok() const noexcept { return skipped.empty(); }
};

inline std::string combined_digest(const std::vector<std::string>& record_digests) {
  Sha256 h;
  for (const auto& d : record_digests) h.update(d).update("\n");
  return h.hex();
}

// Writes <output_dir>/{images,masks}/*.png, records.jsonl and manifest.json.
// Records are built by `parallelism` workers and assembled in index order, so
// the worker count never changes a byte of output. Failed records are skipped
// and listed in the report.
inline GenerationReport generate_dataset(const PipelineConfig& config,
                                         const GeneratorBackend* backend_override = nullptr) {
  config.validate();
  const prompt::Vocabulary vocab = load_vocabulary(config.vocab_dir);
  std::unique_ptr<GeneratorBackend> owned;
  const GeneratorBackend* backend = backend_override;
  if (!backend) {
    owned = make_backend(config.generator, oracle_options(config));
    backend = owned.get();
  }
  const fs::path root(config.output_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  require<IoError>(fs::is_directory(root / "images") && fs::is_directory(root / "masks"),
                   "cannot create shard directories under " + root.string());

  struct Slot {
    std::optional<std::string> line;
    std::string digest;
    std::string error;
  };
  std::vector<Slot> slots(config.count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.count; i = next++) {
      try {
        RecordArtifacts a = build_record(config, *backend, vocab, i);
        png::write_file(root / a.record.image_file, a.image_png);
        for (std::size_t k = 0; k < a.record.instances.size(); ++k)
          png::write_file(root / a.record.instances[k].mask_file, a.mask_pngs[k]);
        slots[i].line = std::move(a.line);
        slots[i].digest = std::move(a.digest);
      } catch (const std::exception& e) {
        slots[i].error = e.what();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = std::min(config.parallelism, config.count);
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
  }

  GenerationReport report;
  json manifest_records = json::array();
  std::vector<std::string> digests;
  std::ofstream lines(root / "records.jsonl", std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(lines), "cannot write records.jsonl");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i].line) {
      report.skipped.emplace_back(i, slots[i].error);
      continue;
    }
    lines << *slots[i].line << '\n';
    manifest_records.push_back({{"index", i}, {"digest", slots[i].digest}});
    digests.push_back(slots[i].digest);
    ++report.written;
  }
  lines.close();

  json skipped = json::array();
  for (const auto& [i, why] : report.skipped) skipped.push_back({{"index", i}, {"error", why}});
  report.manifest_digest = combined_digest(digests);
  const json manifest = {{"format_version", kShardFormatVersion},
                         {"generator", {{"name", backend->name()}, {"version", backend->version()}}},
                         {"config", content_json(config)},
                         {"records", manifest_records},
                         {"skipped", skipped},
                         {"digest", report.manifest_digest}};
  std::ofstream mf(root / "manifest.json", std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(mf), "cannot write manifest.json");
  mf << manifest.dump(2) << '\n';
  return report;
}

struct Violation {
  std::optional<std::size_t> record;  // record index, when the problem belongs to one
  std::string message;
};

struct ValidationReport {
  std::size_t records_checked = 0;
  std::vector<Violation> violations;

  bool clean() const noexcept { return violations.empty(); }

  std::string to_string() const {
    std::ostringstream s;
    for (const auto& v : violations) {
      if (v.record) s << "record " << *v.record << ": ";
      s << v.message << '\n';
    }
    return s.str();
  }
};

// A relative path that stays inside the shard directory.
inline bool contained_path(const std::string& rel) {
  const fs::path p(rel);
  if (rel.empty() || p.is_absolute()) return false;
  for (const auto& part : p)
    if (part == "..") return false;
  return true;
}

struct ShardContents {
  json manifest;
  std::vector<ShardRecord> records;
  std::vector<std::string> lines;
};

namespace detail {

// First problem found in one record, or nullopt when it is consistent.
inline std::optional<std::string> check_record(const fs::path& root, const ShardRecord& r,
                                               const std::string& line, const json& manifest,
                                               const std::map<std::size_t, std::string>& digests) {
  const json& cfg = manifest.at("config");
  const std::size_t h = cfg.at("canvas_h").get<std::size_t>();
  const std::size_t w = cfg.at("canvas_w").get<std::size_t>();
  const double threshold = cfg.at("threshold").get<double>();
  const geometry::BlockGrid grid{cfg.at("block_rows").get<std::size_t>(),
                                 cfg.at("block_cols").get<std::size_t>(), h, w};

  if (r.instances.empty()) return "record has no instances";
  if (!contained_path(r.image_file)) return "image path escapes the shard: " + r.image_file;
  png::Bytes image_bytes;
  try {
    image_bytes = png::read_file(root / r.image_file);
    const RgbImage image = png::decode_rgb(image_bytes);
    if (image.height() != h || image.width() != w)
      return "image " + r.image_file + " has shape " + image.shape_string();
  } catch (const Error& e) {
    return "image " + r.image_file + ": " + e.what();
  }

  std::set<int> ids;
  std::vector<std::string> nouns;
  std::vector<prompt::PositionPrompt> expected_positions;
  std::vector<png::Bytes> mask_bytes;
  for (const auto& inst : r.instances) {
    const std::string who = "instance " + std::to_string(inst.instance_id);
    if (!ids.insert(inst.instance_id).second) return "duplicate " + who;
    if (inst.noun.empty()) return who + " has an empty noun";
    nouns.push_back(inst.noun);
    if (!contained_path(inst.mask_file)) return who + " mask path escapes the shard";
    Map mask;
    try {
      mask_bytes.push_back(png::read_file(root / inst.mask_file));
      mask = png::decode_mask16(mask_bytes.back());
    } catch (const Error& e) {
      return who + " mask " + inst.mask_file + ": " + e.what();
    }
    if (mask.height() != h || mask.width() != w)
      return who + " mask has shape " + mask.shape_string();
    const auto [lo, hi] = std::minmax_element(mask.storage().begin(), mask.storage().end());
    if (*lo != 0.0 || (*hi != 1.0 && *hi != 0.0))
      return who + " mask is not min-max normalised";
    const auto box = geometry::bbox(geometry::binarize(mask, threshold));
    if (box != inst.bbox) return who + " bbox does not match its mask";
    const std::optional<int> block =
        box ? std::optional<int>(geometry::block_index(*box, grid)) : std::nullopt;
    if (block != inst.block) return who + " block does not match its bbox";
    if (block) expected_positions.push_back(prompt::position_prompt(inst.noun, *block));
  }

  if (r.prompt != prompt::scene_prompt(nouns)) return "prompt does not list the record's nouns";
  if (r.augmented_prompt.find(r.instances.front().noun) == std::string::npos)
    return "augmented prompt does not mention '" + r.instances.front().noun + "'";
  const auto parsed = prompt::parse_vlp_text(r.vlp_text);
  if (parsed.caption != r.prompt || parsed.prompts != expected_positions)
    return "vlp_text does not match the caption and position prompts";

  const auto it = digests.find(r.index);
  if (it == digests.end()) return "record is missing from the manifest";
  if (it->second != record_digest(line, image_bytes, mask_bytes))
    return "content digest does not match the manifest";
  return std::nullopt;
}

}  // namespace detail

// Checks every record invariant and the manifest. At most one violation is
// reported per record; unreadable files become violations, never exceptions.
inline ValidationReport validate_shard(const fs::path& root) {
  ValidationReport report;
  auto fail = [&](std::optional<std::size_t> rec, std::string msg) {
    report.violations.push_back({rec, std::move(msg)});
  };
  if (!fs::is_directory(root)) {
    fail(std::nullopt, "shard directory " + root.string() + " does not exist");
    return report;
  }
  const bool has_records = fs::exists(root / "records.jsonl");
  const bool has_manifest = fs::exists(root / "manifest.json");
  if (!has_records && !has_manifest) {
    fail(std::nullopt, "empty shard");
    return report;
  }
  if (!has_manifest) {
    fail(std::nullopt, "manifest.json is missing");
    return report;
  }
  json manifest;
  std::map<std::size_t, std::string> digests;
  try {
    std::ifstream in(root / "manifest.json");
    manifest = json::parse(in);
    for (const auto& e : manifest.at("records"))
      digests[e.at("index").get<std::size_t>()] = e.at("digest").get<std::string>();
    manifest.at("config").at("canvas_h").get<std::size_t>();
    manifest.at("digest").get<std::string>();
  } catch (const json::exception& e) {
    fail(std::nullopt, std::string("manifest.json is malformed: ") + e.what());
    return report;
  }
  if (!has_records) {
    fail(std::nullopt, "records.jsonl is missing");
    return report;
  }

  std::ifstream in(root / "records.jsonl");
  std::string line;
  std::size_t line_no = 0;
  std::set<std::size_t> seen;
  std::vector<std::string> ordered_digests;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ShardRecord r;
    try {
      r = record_from_json(json::parse(line));
    } catch (const std::exception& e) {
      fail(std::nullopt, "records.jsonl line " + std::to_string(line_no) + ": " + e.what());
      continue;
    }
    ++report.records_checked;
    if (!seen.insert(r.index).second) {
      fail(r.index, "duplicate record index");
      continue;
    }
    try {
      if (auto problem = detail::check_record(root, r, line, manifest, digests))
        fail(r.index, *problem);
    } catch (const std::exception& e) {
      fail(r.index, e.what());
    }
    if (auto it = digests.find(r.index); it != digests.end()) ordered_digests.push_back(it->second);
  }
  if (report.records_checked == 0 && digests.empty()) {
    fail(std::nullopt, "empty shard");
    return report;
  }
  for (const auto& [index, digest] : digests)
    if (!seen.count(index)) fail(index, "listed in the manifest but absent from records.jsonl");
  if (report.clean() && manifest.at("digest").get<std::string>() != combined_digest(ordered_digests))
    fail(std::nullopt, "manifest digest does not match its record digests");
  return report;
}

// Reads records.jsonl; throws IoError when the shard cannot be read.
inline std::vector<ShardRecord> load_records(const fs::path& root) {
  std::ifstream in(root / "records.jsonl");
  require<IoError>(static_cast<bool>(in), "cannot read " + (root / "records.jsonl").string());
  std::vector<ShardRecord> records;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) records.push_back(record_from_json(json::parse(line)));
  return records;
}

}  // namespace freeatm::pipeline
