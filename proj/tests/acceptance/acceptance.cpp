// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <regex>
#include <string>
#include <vector>

#include "freeatm/attention.hpp"
#include "freeatm/contrastive.hpp"
#include "freeatm/experiment.hpp"
#include "freeatm/geometry.hpp"
#include "freeatm/masking.hpp"
#include "freeatm/pipeline.hpp"
#include "freeatm/prompt.hpp"
#include "freeatm/rng.hpp"
#include "freeatm/scene.hpp"

using namespace freeatm;
namespace fs = std::filesystem;
using contrastive::Vec;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& why) {
    if (!ok && pass) detail = why;
    pass = pass && ok;
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- oracles

double naive_softmax_entry(const Grid<double>& q, const Grid<double>& k, std::size_t y, std::size_t x,
                           std::size_t l, int d) {
  std::vector<double> logits(k.height());
  for (std::size_t j = 0; j < k.height(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.depth(); ++c) s += q(y, x, c) * k(j, c);
    logits[j] = s / std::sqrt(static_cast<double>(d));
  }
  double mx = logits[0];
  for (const double v : logits) mx = std::max(mx, v);
  double total = 0.0;
  for (const double v : logits) total += std::exp(v - mx);
  return std::exp(logits[l] - mx) / total;
}

// Half-pixel bilinear sample with edge clamping.
double bilinear_at(const Map& m, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(m.height() - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(m.width() - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, m.height() - 1);
  const std::size_t x1 = std::min(x0 + 1, m.width() - 1);
  const double fy = sy - static_cast<double>(y0);
  const double fx = sx - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * m(y0, x0) + fx * m(y0, x1)) + fy * ((1 - fx) * m(y1, x0) + fx * m(y1, x1));
}

Map resize_then_mean(const std::vector<Map>& maps, std::size_t h, std::size_t w) {
  Map out(h, w);
  for (const auto& m : maps)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(m.height()) / h - 0.5;
        const double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(m.width()) / w - 0.5;
        out(y, x) += bilinear_at(m, sy, sx) / static_cast<double>(maps.size());
      }
  return out;
}

std::vector<double> brute_weighted_mean(const Grid<double>& z, const Map& a) {
  std::vector<double> num(z.depth(), 0.0);
  double den = 0.0;
  for (std::size_t y = 0; y < z.height(); ++y)
    for (std::size_t x = 0; x < z.width(); ++x) {
      den += a(y, x);
      for (std::size_t c = 0; c < z.depth(); ++c) num[c] += a(y, x) * z(y, x, c);
    }
  for (double& v : num) v /= den;
  return num;
}

std::optional<geometry::BoundingBox> brute_bbox(const BinaryMask& m) {
  bool any = false;
  std::size_t x0 = m.width(), y0 = m.height(), x1 = 0, y1 = 0;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m(y, x)) {
        any = true;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
      }
  if (!any) return std::nullopt;
  return geometry::BoundingBox{x0, y0, x1, y1};
}

int block_by_floats(double cx, double cy, double w, double h, int rows, int cols) {
  const int col = std::min(static_cast<int>(std::floor(cx / (w / cols))), cols - 1);
  const int row = std::min(static_cast<int>(std::floor(cy / (h / rows))), rows - 1);
  return row * cols + col;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// -------------------------------------------------------------- criteria

Outcome attention_math() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst_sum = 0.0, worst_oracle = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4), c = 1 + rng.below(8), L = 1 + rng.below(10);
    const int d = 1 + static_cast<int>(rng.below(16));
    Grid<double> q(h, w, c), k(L, c);
    for (double& v : q.storage()) v = rng.uniform(-3.0, 3.0);
    for (double& v : k.storage()) v = rng.uniform(-3.0, 3.0);
    const auto out = attention::cross_attention(q, k, d);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
          s += out(y, x, l);
          worst_oracle = std::max(worst_oracle, std::abs(out(y, x, l) - naive_softmax_entry(q, k, y, x, l, d)));
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
  }
  const double secs = seconds_since(t0);
  o.check(worst_sum <= 1e-6, "row sum off by " + std::to_string(worst_sum));
  o.check(worst_oracle <= 1e-6, "oracle mismatch " + std::to_string(worst_oracle));
  o.check(secs < 30.0, "took " + std::to_string(secs) + " s");
  if (o.pass) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "1000 cases, max |rowsum-1| %.1e, max oracle diff %.1e, %.2f s",
                  worst_sum, worst_oracle, secs);
    o.detail = buf;
  }
  return o;
}

Outcome aggregation_oracle() {
  Outcome o;
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Map> maps;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
      Map m(2 + rng.below(14), 2 + rng.below(14));
      for (double& v : m.storage()) v = rng.uniform();
      maps.push_back(std::move(m));
    }
    const std::size_t th = 1 + rng.below(40), tw = 1 + rng.below(40);
    const Map got = attention::aggregate_maps(maps, th, tw);
    const Map want = resize_then_mean(maps, th, tw);
    for (std::size_t i = 0; i < got.size(); ++i)
      worst = std::max(worst, std::abs(got.storage()[i] - want.storage()[i]));
  }
  o.check(worst <= 1e-6, "max diff " + std::to_string(worst));
  if (o.pass) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "100 stacks, max diff %.1e", worst);
    o.detail = buf;
  }
  return o;
}

Outcome pooling_exactness() {
  Outcome o;
  Rng rng(303);
  double worst = 0.0, worst_uniform = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), c = 1 + rng.below(6);
    Grid<double> z(h, w, c);
    for (double& v : z.storage()) v = rng.normal();
    Map a(h, w);
    for (double& v : a.storage()) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    a(rng.below(h), rng.below(w)) = 0.5 + rng.uniform();
    const Vec got = contrastive::attentive_pool(z, a);
    const auto want = brute_weighted_mean(z, a);
    for (std::size_t i = 0; i < c; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));

    const Vec flat = contrastive::attentive_pool(z, Map(h, w, 1, 0.37));
    for (std::size_t i = 0; i < c; ++i) {
      double mean = 0.0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) mean += z(y, x, i);
      mean /= static_cast<double>(h * w);
      worst_uniform = std::max(worst_uniform, std::abs(flat[i] - mean));
    }
  }
  o.check(worst <= 1e-9, "weighted mean diff " + std::to_string(worst));
  o.check(worst_uniform <= 1e-9, "uniform mean diff " + std::to_string(worst_uniform));
  if (o.pass) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "1000 cases, max diff %.1e, uniform %.1e", worst, worst_uniform);
    o.detail = buf;
  }
  return o;
}

Outcome loss_closed_forms() {
  Outcome o;
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    const double pos = rng.uniform(-1.0, 1.0), neg = rng.uniform(-1.0, 1.0);
    const double tau = rng.uniform(0.05, 2.0);
    o.check(contrastive::instance_nce_loss(pos, {}, tau) == 0.0, "no-negative loss is not 0");
    const double z = (neg - pos) / tau;
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    const std::vector<double> one{neg};
    o.check(std::abs(contrastive::instance_nce_loss(pos, one, tau) - softplus) <= 1e-9,
            "one-negative case misses softplus");
    const std::size_t k = 1 + rng.below(50);
    const std::vector<double> equal(k, pos);
    o.check(std::abs(contrastive::instance_nce_loss(pos, equal, tau) - std::log(k + 1.0)) <= 1e-9,
            "k-equal case misses log(k+1)");
  }
  if (o.pass) o.detail = "200 draws per closed form";
  return o;
}

Outcome gradient_check() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(505);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.below(4), dim = 2 + rng.below(5), bank_n = rng.below(3);
    std::vector<Vec> a(m, Vec(dim)), b(m, Vec(dim)), bank(bank_n, Vec(dim));
    for (auto* set : {&a, &b, &bank})
      for (auto& v : *set)
        for (double& x : v) x = rng.normal();
    contrastive::LossOptions opt;
    opt.temperature = rng.uniform(0.2, 1.0);
    opt.negatives = trial % 2 ? contrastive::NegativeSet::kSameViewOnly
                              : contrastive::NegativeSet::kCrossAndSameView;
    const auto res = contrastive::batch_instance_loss_with_grad(a, b, bank, opt);
    auto probe = [&](std::vector<Vec>& side, const std::vector<Vec>& analytic) {
      for (std::size_t r = 0; r < side.size(); ++r)
        for (std::size_t i = 0; i < dim; ++i) {
          const double keep = side[r][i];
          side[r][i] = keep + 1e-4;
          const double up = contrastive::batch_instance_loss(a, b, bank, opt);
          side[r][i] = keep - 1e-4;
          const double down = contrastive::batch_instance_loss(a, b, bank, opt);
          side[r][i] = keep;
          const double fd = (up - down) / 2e-4;
          const double rel = std::abs(analytic[r][i] - fd) / std::max(1e-6, std::max(std::abs(fd), std::abs(analytic[r][i])));
          // Entries whose derivative is tiny in absolute terms are compared absolutely.
          worst = std::max(worst, std::abs(analytic[r][i] - fd) < 1e-7 ? 0.0 : rel);
        }
    };
    probe(a, res.grad_a);
    probe(b, res.grad_b);
  }
  const double secs = seconds_since(t0);
  o.check(worst < 1e-3, "relative error " + std::to_string(worst));
  o.check(secs < 60.0, "took " + std::to_string(secs) + " s");
  if (o.pass) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "50 cases, max relative error %.1e, %.2f s", worst, secs);
    o.detail = buf;
  }
  return o;
}

Outcome schedule_exactness() {
  Outcome o;
  const masking::BetaSchedule s{0.8, 100};
  o.check(masking::beta_at(s, 0) == 0.0, "beta(0) != 0");
  o.check(std::abs(masking::beta_at(s, 100) - 0.8) <= 1e-12, "beta(100) != 0.8");
  o.check(std::abs(masking::beta_at(s, 50) - 0.4) <= 1e-12, "beta(50) != 0.4");
  Rng rng(606);
  std::vector<double> scores(196);
  for (double& v : scores) v = rng.uniform();
  for (int e = 0; e <= 100; ++e) {
    const double beta = masking::beta_at(s, e);
    const auto plan = masking::plan_mask(scores, 0.75, beta, static_cast<std::uint64_t>(e));
    o.check(plan.masked_total == 147, "epoch " + std::to_string(e) + " masked_total " +
                                          std::to_string(plan.masked_total));
    const auto want = static_cast<std::size_t>(std::floor(beta * 147 + 1e-9));
    o.check(plan.attn_indices.size() == want,
            "epoch " + std::to_string(e) + " attention count " + std::to_string(plan.attn_indices.size()));
    o.check(plan.attn_indices.size() + plan.random_indices.size() == 147, "epoch " + std::to_string(e) + " split");
  }
  if (o.pass) o.detail = "101 epochs, 147 masked, attention share floor(beta*147)";
  return o;
}

Outcome top_k_oracle() {
  Outcome o;
  Rng rng(707);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> scores(196);
    std::iota(scores.begin(), scores.end(), 0.0);
    rng.shuffle(scores.begin(), scores.end());
    for (double& v : scores) v += rng.uniform() * 0.5;
    std::vector<std::size_t> order(196);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return scores[i] > scores[j]; });
    std::vector<std::size_t> want(order.begin(), order.begin() + 147);
    std::sort(want.begin(), want.end());
    const auto plan = masking::plan_mask(scores, 0.75, 1.0, static_cast<std::uint64_t>(trial));
    o.check(plan.attn_indices == want, "beta=1 selection differs from full sort");
  }
  // Six masked, three by attention: both 0.9s, then the lowest-index 0.5.
  const std::vector<double> tied{0.5, 0.9, 0.5, 0.5, 0.1, 0.9, 0.5, 0.0};
  o.check(masking::plan_mask(tied, 0.75, 0.5, 0).attn_indices == std::vector<std::size_t>{0, 1, 5},
          "tie-break on mixed scores");
  const std::vector<double> flat(10, 0.25);
  o.check(masking::plan_mask(flat, 0.5, 0.8, 0).attn_indices == std::vector<std::size_t>{0, 1, 2, 3},
          "tie-break on flat scores");
  if (o.pass) o.detail = "100 full-sort comparisons, 2 tie cases";
  return o;
}

Outcome geometry_checks() {
  Outcome o;
  Rng rng(808);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(24), w = 1 + rng.below(24);
    const double density = rng.uniform() * rng.uniform();
    BinaryMask m(h, w);
    for (auto& v : m.storage()) v = rng.uniform() < density ? 1 : 0;
    o.check(geometry::bbox(m) == brute_bbox(m), "bbox differs on trial " + std::to_string(trial));
  }
  const geometry::BlockGrid g{3, 3, 90, 90};
  std::size_t checked = 0;
  for (std::size_t x0 = 0; x0 < 90; ++x0)
    for (std::size_t x1 = x0 + 1; x1 <= 90; ++x1) {
      const int col = geometry::block_index({x0, 0, x1, 1}, g);
      o.check(col == block_by_floats((x0 + x1) / 2.0, 0.5, 90, 90, 3, 3), "block column differs");
      ++checked;
    }
  for (std::size_t sx = 1; sx < 180; ++sx)
    for (std::size_t sy = 1; sy < 180; ++sy) {
      const std::size_t x0 = (sx - 1) / 2, y0 = (sy - 1) / 2;
      const int got = geometry::block_index({x0, y0, sx - x0, sy - y0}, g);
      o.check(got == block_by_floats(sx / 2.0, sy / 2.0, 90, 90, 3, 3),
              "block differs at centre (" + std::to_string(sx / 2.0) + ", " + std::to_string(sy / 2.0) + ")");
      ++checked;
    }
  if (o.pass) o.detail = "1000 bbox cases, " + std::to_string(checked) + " block centres";
  return o;
}

Outcome position_prompts() {
  Outcome o;
  const std::regex pattern(R"(^The (.+) is in block ([0-9]+)\.$)");
  Rng rng(909);
  const std::vector<std::string> nouns{"dog", "cat", "traffic light", "hot air balloon", "teddy bear", "kite"};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<prompt::PositionPrompt> ps;
    const std::size_t n = rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string noun = nouns[rng.below(nouns.size())];
      const int block = static_cast<int>(rng.below(16));
      ps.push_back(prompt::position_prompt(noun, block));
      std::smatch mt;
      const std::string& r = ps.back().rendered;
      o.check(r == "The " + noun + " is in block " + std::to_string(block) + ".", "template mismatch: " + r);
      o.check(std::regex_match(r, mt, pattern) && mt[1] == noun && mt[2] == std::to_string(block),
              "regex mismatch: " + r);
    }
    const std::string caption = trial % 7 == 0 ? "" : "a photo of a dog and a kite";
    const auto back = prompt::parse_vlp_text(prompt::compose_vlp_text(caption, ps));
    o.check(back.caption == caption && back.prompts == ps, "compose/parse round trip failed");
  }
  if (o.pass) o.detail = "500 composed texts round-trip";
  return o;
}

Outcome oracle_recovery() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst_noisy = 1.0, worst_clean = 1.0;
  std::size_t instances = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto sc = scene::generate_scene(scene::sample_scene_spec(derive_seed({1010, s})));
    const auto noisy = scene::simulate_attention(sc, 0.3, 3, 4, s);
    const auto masks = attention::extract_instance_masks(noisy, sc.alignment, sc.image.height(), sc.image.width());
    for (std::size_t i = 0; i < masks.size(); ++i) {
      worst_noisy = std::min(worst_noisy, geometry::iou(geometry::binarize(masks[i].values), sc.truth_masks[i]));
      ++instances;
    }
    const auto clean = scene::simulate_attention(sc, 0.0, 3, 4, s);
    const std::size_t h = clean.entries.front().map.height(), w = clean.entries.front().map.width();
    const auto exact = attention::extract_instance_masks(clean, sc.alignment, h, w);
    const auto truth = scene::truth_at(sc, h, w);
    for (std::size_t i = 0; i < exact.size(); ++i)
      worst_clean = std::min(worst_clean, geometry::iou(geometry::binarize(exact[i].values), truth[i]));
  }
  const double secs = seconds_since(t0);
  o.check(worst_noisy >= 0.5, "noise 0.3 minimum IoU " + std::to_string(worst_noisy));
  o.check(worst_clean == 1.0, "noise 0 minimum IoU " + std::to_string(worst_clean));
  o.check(secs < 120.0, "took " + std::to_string(secs) + " s");
  if (o.pass) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "100 scenes, %zu instances, min IoU %.3f at noise 0.3, %.3f at noise 0, %.1f s",
                  instances, worst_noisy, worst_clean, secs);
    o.detail = buf;
  }
  return o;
}

// Pinned from the first verified run of the default configuration at seed 0.
constexpr double kPinnedImageLevel = 0.5186;
constexpr double kPinnedInstanceLevel = 0.5914;

Outcome toy_experiment() {
  Outcome o;
  const auto t0 = Clock::now();
  experiment::ExperimentConfig cfg;
  cfg.seed = 0;
  const auto out = experiment::run_experiment(cfg);
  const double secs = seconds_since(t0);
  const auto& rows = out.at("results");
  const double img = rows[0]["probe"]["test_accuracy"].get<double>();
  const double inst = rows[1]["probe"]["test_accuracy"].get<double>();
  const double margin = 100.0 * (inst - img);
  for (const auto& r : rows) {
    const auto& ep = r["epochs"];
    o.check(ep.size() >= 10 && ep[9]["loss"].get<double>() < ep[0]["loss"].get<double>(),
            r["mode"].get<std::string>() + " loss did not fall from epoch 1 to 10");
  }
  o.check(margin >= 5.0, "margin " + std::to_string(margin) + " points");
  o.check(std::abs(img - kPinnedImageLevel) <= 0.005 && std::abs(inst - kPinnedInstanceLevel) <= 0.005,
          "accuracies moved from the pinned run");
  o.check(secs < 600.0, "took " + std::to_string(secs) + " s");
  char buf[200];
  std::snprintf(buf, sizeof buf, "image_level %.4f, instance_level %.4f, margin %+.2f points, %.0f s%s%s", img,
                inst, margin, secs, o.pass ? "" : ": ", o.pass ? "" : o.detail.c_str());
  o.detail = buf;
  return o;
}

Outcome pipeline_determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "freeatm_acceptance_shards";
  fs::remove_all(root);
  auto run = [&](const std::string& name, std::size_t workers) {
    pipeline::PipelineConfig c;
    c.count = 50;
    c.seed = 1212;
    c.parallelism = workers;
    c.output_dir = (root / name).string();
    return pipeline::generate_dataset(c);
  };
  const auto a = run("a", 1), b = run("b", 1), c = run("c", 8);
  o.check(a.ok() && b.ok() && c.ok(), "generation skipped records");
  const std::string ma = slurp(root / "a" / "manifest.json");
  o.check(ma == slurp(root / "b" / "manifest.json"), "repeat runs differ");
  o.check(ma == slurp(root / "c" / "manifest.json"), "parallelism 1 and 8 differ");
  for (const char* name : {"a", "c"}) {
    const auto v = pipeline::validate_shard(root / name);
    o.check(v.clean() && v.records_checked == 50, std::string("shard ") + name + " not clean: " + v.to_string());
  }
  if (o.pass) o.detail = "50 records, manifest digest " + a.manifest_digest.substr(0, 16) + "...";
  fs::remove_all(root);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"attention math", attention_math},
      {"aggregation oracle", aggregation_oracle},
      {"attentive pooling", pooling_exactness},
      {"loss closed forms", loss_closed_forms},
      {"loss gradient check", gradient_check},
      {"masking schedule", schedule_exactness},
      {"top-k oracle", top_k_oracle},
      {"geometry", geometry_checks},
      {"position prompts", position_prompts},
      {"oracle recovery", oracle_recovery},
      {"toy experiment", toy_experiment},
      {"pipeline determinism", pipeline_determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %2zu %-22s %s  %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
