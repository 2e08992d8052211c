// freeatm: dataset factory and experiment launcher.
//
// Exit codes: 0 success, 1 validation failure, 2 config error, 3 backend error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "freeatm/experiment.hpp"
#include "freeatm/masking.hpp"
#include "freeatm/overlay.hpp"
#include "freeatm/pipeline.hpp"
#include "freeatm/png_io.hpp"
#include "freeatm/prompt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace freeatm;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;

fs::path default_output_root() {
  if (const char* env = std::getenv("FREEATM_OUTPUT_ROOT"); env && *env) return env;
  return "freeatm_out";
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require<ConfigError>(static_cast<bool>(in), "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + " is not valid JSON: " + e.what());
  }
}

// Flags the user actually passed, as a JSON object of config overrides.
struct Overrides {
  std::vector<std::function<void(json&)>> readers;

  template <typename T>
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto holder = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *holder, help);
    readers.push_back([opt, key, holder](json& out) {
      if (opt->count() > 0) out[key] = *holder;
    });
  }

  // Only flags given on the command line, keyed by config name.
  json values() const {
    json out = json::object();
    for (const auto& read : readers) read(out);
    return out;
  }
};

int run_gen(const std::optional<std::string>& config_file, const json& overrides) {
  pipeline::PipelineConfig cfg;
  cfg.output_dir = (default_output_root() / "shard").string();
  if (config_file) cfg = pipeline::merge_config(cfg, read_json_file(*config_file));
  cfg = pipeline::merge_config(cfg, overrides);
  cfg.validate();
  const auto report = pipeline::generate_dataset(cfg);
  std::cout << "wrote " << report.written << " records to " << cfg.output_dir << "\n"
            << "manifest digest " << report.manifest_digest << "\n";
  for (const auto& [index, why] : report.skipped)
    std::cerr << "record " << index << " skipped: " << why << "\n";
  return report.ok() ? 0 : kExitBackend;
}

int run_validate(const std::string& dir) {
  const auto report = pipeline::validate_shard(dir);
  if (report.clean()) {
    std::cout << "ok: " << report.records_checked << " records, no violations\n";
    return 0;
  }
  std::cout << report.violations.size() << " violation(s)\n" << report.to_string();
  return kExitValidation;
}

int run_overlay(const std::string& dir, const std::string& out) {
  const auto report = pipeline::render_overlays(dir, out);
  if (report.refused) {
    std::cout << "refusing to render an invalid shard\n" << report.validation.to_string();
    return kExitValidation;
  }
  std::cout << "wrote " << report.written.size() << " overlays to " << out << "\n";
  return 0;
}

struct PlanArgs {
  std::vector<std::string> masks;
  std::string shard;
  std::size_t record = 0;
  std::size_t rows = 14;
  std::size_t cols = 14;
  double ratio = 0.75;
  std::optional<double> beta;
  double epoch = 0;
  double total_epochs = 100;
  double beta_max = 0.8;
  std::uint64_t seed = 0;
};

int run_plan(const PlanArgs& a) {
  std::vector<Map> maps;
  if (!a.shard.empty()) {
    const auto records = pipeline::load_records(a.shard);
    require<ConfigError>(a.record < records.size(), "record index out of range");
    for (const auto& inst : records[a.record].instances)
      maps.push_back(png::decode_mask16(png::read_file(fs::path(a.shard) / inst.mask_file)));
  }
  for (const auto& path : a.masks) maps.push_back(png::decode_mask16(png::read_file(path)));
  require<ConfigError>(!maps.empty(), "plan-masks needs --mask files or --shard");
  const double beta =
      a.beta ? *a.beta : masking::beta_at({a.beta_max, a.total_epochs}, a.epoch);
  const auto scores = masking::patch_scores(std::span<const Map>(maps), a.rows, a.cols);
  std::cout << masking::to_json(masking::plan_mask(scores, a.ratio, beta, a.seed)).dump() << "\n";
  return 0;
}

struct PromptArgs {
  std::string class_name;
  std::string template_id = "class_somewhere";
  std::uint64_t seed = 0;
  std::size_t count = 1;
  std::string vocab_dir;
  std::string noun;
  int block = -1;
  std::string parse;
};

int run_prompts(const PromptArgs& a) {
  if (!a.parse.empty()) {
    const auto parsed = prompt::parse_vlp_text(a.parse);
    json prompts = json::array();
    for (const auto& p : parsed.prompts) prompts.push_back({{"noun", p.noun}, {"block", p.block}});
    std::cout << json{{"caption", parsed.caption}, {"prompts", prompts}}.dump() << "\n";
    return 0;
  }
  if (!a.noun.empty()) {
    std::cout << prompt::position_prompt(a.noun, a.block).rendered << "\n";
    return 0;
  }
  require<ConfigError>(!a.class_name.empty(), "prompts needs --class, --noun or --parse");
  const auto vocab = pipeline::load_vocabulary(a.vocab_dir);
  for (std::size_t i = 0; i < a.count; ++i)
    std::cout << prompt::augment_prompt(a.class_name, vocab, a.template_id, derive_seed({a.seed, i}))
              << "\n";
  return 0;
}

int run_train(const std::optional<std::string>& config_file, const json& overrides,
              const std::string& out, bool stream) {
  experiment::ExperimentConfig cfg;
  if (config_file) cfg = experiment::merge_experiment_config(cfg, read_json_file(*config_file));
  cfg = experiment::merge_experiment_config(cfg, overrides);
  const fs::path metrics = out.empty() ? default_output_root() / "metrics.json" : fs::path(out);
  if (metrics.has_parent_path()) fs::create_directories(metrics.parent_path());
  experiment::EpochCallback on_epoch;
  if (stream) {
    on_epoch = [](contrastive::TrainMode mode, const contrastive::EpochMetrics& m) {
      json line = experiment::epoch_json(m);
      line["mode"] = contrastive::to_string(mode);
      std::cout << line.dump() << std::endl;
    };
  }
  const json result = experiment::run_experiment(cfg, metrics, on_epoch);
  if (cfg.kind == experiment::Kind::kContrastive) {
    for (const auto& row : result.at("results"))
      std::cerr << row.at("mode").get<std::string>() << " probe accuracy "
                << row.at("probe").at("test_accuracy").get<double>() << "\n";
  }
  std::cerr << "metrics written to " << metrics.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-mask dataset factory and toy experiments"};
  app.require_subcommand(1);

  std::optional<std::string> gen_config;
  Overrides gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a dataset shard");
  gen_cmd->add_option("--config", gen_config, "JSON config file; flags override it");
  gen.add<std::string>(gen_cmd, "--generator", "generator", "scene_oracle | diffusion_hook");
  gen.add<std::size_t>(gen_cmd, "--count", "count", "Number of records");
  gen.add<std::size_t>(gen_cmd, "--canvas-h", "canvas_h", "Image height");
  gen.add<std::size_t>(gen_cmd, "--canvas-w", "canvas_w", "Image width");
  gen.add<std::size_t>(gen_cmd, "--min-instances", "min_instances", "Fewest objects per scene");
  gen.add<std::size_t>(gen_cmd, "--max-instances", "max_instances", "Most objects per scene");
  gen.add<double>(gen_cmd, "--noise-level", "noise_level", "Simulated attention noise in [0,1)");
  gen.add<int>(gen_cmd, "--layers", "layers", "Attention layers per scene");
  gen.add<int>(gen_cmd, "--timesteps", "timesteps", "Denoising steps per scene");
  gen.add<double>(gen_cmd, "--threshold", "threshold", "Binarisation threshold");
  gen.add<std::size_t>(gen_cmd, "--block-rows", "block_rows", "Block grid rows");
  gen.add<std::size_t>(gen_cmd, "--block-cols", "block_cols", "Block grid columns");
  gen.add<std::vector<std::string>>(gen_cmd, "--templates", "templates", "Augmentation template ids");
  gen.add<std::string>(gen_cmd, "--vocab-dir", "vocab_dir", "Directory of vocabulary files");
  gen.add<std::string>(gen_cmd, "-o,--output-dir", "output_dir", "Shard directory");
  gen.add<std::uint64_t>(gen_cmd, "--seed", "seed", "Global seed");
  gen.add<std::size_t>(gen_cmd, "-j,--parallelism", "parallelism", "Worker threads");

  std::string validate_dir;
  auto* validate_cmd = app.add_subcommand("validate", "Check a shard's invariants");
  validate_cmd->add_option("dir", validate_dir, "Shard directory")->required();

  std::string overlay_dir, overlay_out;
  auto* overlay_cmd = app.add_subcommand("overlay", "Render annotated copies of a shard");
  overlay_cmd->add_option("dir", overlay_dir, "Shard directory")->required();
  overlay_cmd->add_option("out", overlay_out, "Output directory")->required();

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan-masks", "Plan an attention-guided patch mask");
  plan_cmd->add_option("--mask", plan.masks, "16-bit mask PNG (repeatable)");
  plan_cmd->add_option("--shard", plan.shard, "Take the masks of one shard record");
  plan_cmd->add_option("--record", plan.record, "Record index within --shard");
  plan_cmd->add_option("--rows", plan.rows, "Patch grid rows");
  plan_cmd->add_option("--cols", plan.cols, "Patch grid columns");
  plan_cmd->add_option("--ratio", plan.ratio, "Masking ratio");
  plan_cmd->add_option("--beta", plan.beta, "Attention share; overrides the schedule");
  plan_cmd->add_option("--epoch", plan.epoch, "Epoch on the beta schedule");
  plan_cmd->add_option("--total-epochs", plan.total_epochs, "Schedule length");
  plan_cmd->add_option("--beta-max", plan.beta_max, "Schedule ceiling");
  plan_cmd->add_option("--seed", plan.seed, "Seed for the random share");

  PromptArgs prompts;
  auto* prompts_cmd = app.add_subcommand("prompts", "Render augmented or position prompts");
  prompts_cmd->add_option("--class", prompts.class_name, "Class name to augment");
  prompts_cmd->add_option("--template", prompts.template_id, "Template id");
  prompts_cmd->add_option("--seed", prompts.seed, "Seed");
  prompts_cmd->add_option("-n,--count", prompts.count, "Number of prompts");
  prompts_cmd->add_option("--vocab-dir", prompts.vocab_dir, "Directory of vocabulary files");
  prompts_cmd->add_option("--noun", prompts.noun, "Render a position prompt for this noun");
  prompts_cmd->add_option("--block", prompts.block, "Block index for --noun");
  prompts_cmd->add_option("--parse", prompts.parse, "Split composed text into caption and prompts");

  std::optional<std::string> train_config;
  std::string train_out;
  bool train_stream = false;
  Overrides train;
  auto* train_cmd = app.add_subcommand("train-toy", "Run a toy experiment");
  train_cmd->add_option("--config", train_config, "JSON experiment config; flags override it");
  train.add<std::string>(train_cmd, "--kind", "kind", "contrastive | masking_schedule");
  train.add<std::string>(train_cmd, "--shard", "shard_dir", "Read scenes from this shard");
  train.add<std::uint64_t>(train_cmd, "--seed", "seed", "Seed");
  train.add<std::size_t>(train_cmd, "--epochs", "epochs", "Training epochs");
  train.add<std::size_t>(train_cmd, "--train-scenes", "train_scenes", "Training scenes");
  train.add<std::size_t>(train_cmd, "--heldout-scenes", "heldout_scenes", "Probe scenes");
  train.add<std::size_t>(train_cmd, "--batch-size", "batch_size", "Scenes per batch");
  train.add<double>(train_cmd, "--temperature", "temperature", "Loss temperature");
  train.add<std::size_t>(train_cmd, "--bank-capacity", "bank_capacity", ">0 enables the momentum variant");
  train.add<double>(train_cmd, "--momentum", "momentum", "Key-encoder EMA momentum");
  train.add<std::size_t>(train_cmd, "--schedule-epochs", "schedule_epochs", "Masking schedule length");
  train_cmd->add_option("-o,--out", train_out, "Metrics file");
  train_cmd->add_flag("--stream", train_stream, "Print one JSON object per epoch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen_cmd) return run_gen(gen_config, gen.values());
    if (*validate_cmd) return run_validate(validate_dir);
    if (*overlay_cmd) return run_overlay(overlay_dir, overlay_out);
    if (*plan_cmd) return run_plan(plan);
    if (*prompts_cmd) return run_prompts(prompts);
    if (*train_cmd) return run_train(train_config, train.values(), train_out, train_stream);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBackend;
  }
  return 0;
}
