// mkga: command-line driver for data generation, training, evaluation,
// paired comparison, gradient checks and ablation sweeps.
//
// Exit codes: 0 success, 1 validation/config/usage error, 2 numerical failure.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mkga/mkga.hpp"

namespace fs = std::filesystem;
using namespace mkga;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string variant;
};

void add_common(CLI::App* cmd, Common& c, bool with_variant = true) {
  cmd->add_option("--config", c.config, "Run config file (key = value lines)");
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--out", c.out, "Output directory (overrides out_dir)");
  if (with_variant) cmd->add_option("--variant", c.variant, "Ablation variant applied on top of the config");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.variant.empty()) cfg = apply_variant(cfg, c.variant);
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << text;
  if (!os) throw ValidationError("write failed for " + path.string());
}

Json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read " + path);
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

std::string cell(double v) {
  if (!std::isfinite(v)) return "nan";
  return fmt::format("{:.4f}", v);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  const auto splits = make_splits(cfg);
  const std::vector<std::pair<std::string, const std::vector<Sample>*>> parts = {
      {"train", &splits.train}, {"val", &splits.val}, {"test_in", &splits.test_in}, {"test_shifted", &splits.test_shifted}};
  Json manifest{{"format", "MKGD"}, {"version", kDatasetVersion}, {"seed", cfg.seed}, {"image_size", cfg.image_size}};
  for (const auto& [name, set] : parts) {
    const auto file = name + ".bin";
    write_dataset((dir / file).string(), *set);
    std::size_t high = 0, labeled = 0;
    for (const auto& s : *set) {
      high += s.malignancy == 1;
      labeled += s.position != kAbsent;
    }
    manifest["splits"][name] = {{"file", file}, {"count", set->size()}, {"domain", to_string(set->front().domain)},
                                {"high_risk", high}, {"position_labeled", labeled}};
    spdlog::info("wrote {} ({} samples)", (dir / file).string(), set->size());
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int cmd_train(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.cfg", serialize_config(cfg));
  spdlog::info("training {} (seed {}) into {}", to_string(cfg.backbone), cfg.seed, dir.string());
  const auto splits = make_splits(cfg);
  auto res = train(cfg, splits, [](const EpochLog& e) {
    spdlog::info("epoch {:2d}  train {:.4f} (seg {:.4f} mal {:.4f} pos {:.4f})  val loss {:.4f}  val dice {:.4f}{}", e.epoch,
                 e.train_total, e.train_seg, e.train_mal, e.train_pos, e.val_loss, e.val_dice, e.improved ? "  *" : "");
    spdlog::debug("  grad cosines seg/mal {:.3f} seg/pos {:.3f} mal/pos {:.3f}", e.grad_cosines[0], e.grad_cosines[1],
                  e.grad_cosines[2]);
  });
  save_checkpoint(*res.model, (dir / "model.ckpt").string());
  Json log = Json::array();
  for (const auto& e : res.log) log.push_back(to_json(e));
  write_text(dir / "training.json",
             Json{{"epochs_run", res.log.size()}, {"best_epoch", res.best_epoch}, {"early_stopped", res.early_stopped}, {"log", log}}.dump(2) + "\n");
  spdlog::info("best epoch {}; wrote {}", res.best_epoch, (dir / "model.ckpt").string());
  return 0;
}

int cmd_eval(const Common& c, std::string checkpoint) {
  const auto cfg = resolve(c);
  const fs::path dir = cfg.out_dir;
  if (checkpoint.empty()) checkpoint = (dir / "model.ckpt").string();
  auto model = checkpoint_load<float>(checkpoint, Backbone{cfg.backbone}, cfg.adapter, cfg.image_size);
  const auto splits = make_splits(cfg);
  std::vector<Evaluation> evals;
  evals.push_back(evaluate(*model, std::span<const Sample>(splits.test_in), "test_in", cfg.loss));
  evals.push_back(evaluate(*model, std::span<const Sample>(splits.test_shifted), "test_shifted", cfg.loss));
  for (const auto& ev : evals) {
    const auto& m = ev.metrics;
    if (!std::isfinite(m.loss)) throw NumericalError("non-finite loss on split " + m.split);
    spdlog::info("{:13s} n={} dice {} iou {} mal acc {} f1 {} auc {} pos acc {}", m.split, m.n, cell(m.dice), cell(m.iou),
                 cell(m.mal_accuracy), cell(m.mal_f1), cell(m.mal_auc), cell(m.pos_accuracy));
  }
  write_text(dir / "report.json", make_report(cfg, *model, nullptr, evals).dump(2) + "\n");
  spdlog::info("wrote {}", (dir / "report.json").string());
  return 0;
}

int cmd_compare(const std::string& a_path, const std::string& b_path, const std::string& out) {
  const auto a = records_from_report(read_json(a_path));
  const auto b = records_from_report(read_json(b_path));
  Json result = Json::object();
  for (const auto& [split, ra] : a) {
    const auto it = b.find(split);
    if (it == b.end()) throw ValidationError("split '" + split + "' missing from " + b_path);
    const auto stats = compare_runs(ra, it->second);
    std::cout << split << "\n";
    std::cout << fmt::format("  {:24s} {:>12s} {:>12s} {:>12s}  {}\n", "test", "statistic", "p_raw", "p_adjusted", "significant");
    Json rows = Json::array();
    for (const auto& s : stats) {
      std::cout << fmt::format("  {:24s} {:>12s} {:>12.4g} {:>12.4g}  {}\n", s.test_name, cell(s.statistic), s.p_raw, s.p_adjusted,
                               s.significant ? "yes" : "no");
      rows.push_back(to_json(s));
    }
    result[split] = rows;
  }
  if (!out.empty()) write_text(fs::path(out) / "comparison.json", result.dump(2) + "\n");
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto checks = run_gradcheck_suite(seed);
  bool ok = true;
  std::cout << fmt::format("{:22s} {:>12s} {:>10s} {:>8s} {:>7s}  {}\n", "block", "max_rel_err", "tolerance", "coords", "kinks", "status");
  for (const auto& c : checks) {
    ok = ok && c.passed();
    std::cout << fmt::format("{:22s} {:>12.3e} {:>10.0e} {:>8d} {:>7d}  {}\n", c.name, c.result.max_rel_error, c.tolerance,
                             c.result.coordinates, c.result.kinks_skipped, c.passed() ? "ok" : "FAIL");
  }
  if (!ok) {
    spdlog::error("gradient check failed");
    return 2;
  }
  return 0;
}

int cmd_ablate(const Common& c, std::size_t seeds) {
  if (seeds == 0) throw UsageError("--seeds must be at least 1");
  const auto base = resolve(Common{c.config, c.seed, c.out, ""});
  const fs::path dir = base.out_dir;
  struct Row {
    double dice = 0, iou = 0, mal_acc = 0, mal_auc = 0;
  };
  std::map<std::pair<std::string, std::string>, Row> table;
  Json raw = Json::array();
  for (const auto& variant : ablation_variants()) {
    for (std::size_t s = 0; s < seeds; ++s) {
      auto cfg = apply_variant(base, variant);
      cfg.seed = base.seed + s;
      spdlog::info("ablate {} seed {}", variant, cfg.seed);
      const auto splits = make_splits(cfg);
      auto res = train(cfg, splits);
      for (const auto* split : {&splits.test_in, &splits.test_shifted}) {
        const std::string name = split == &splits.test_in ? "test_in" : "test_shifted";
        const auto ev = evaluate(*res.model, std::span<const Sample>(*split), name, cfg.loss);
        const auto& m = ev.metrics;
        if (!std::isfinite(m.dice) || !std::isfinite(m.mal_auc)) throw NumericalError("non-finite metric for " + variant + " on " + name);
        auto& row = table[{variant, name}];
        const double w = 1.0 / static_cast<double>(seeds);
        row.dice += w * m.dice;
        row.iou += w * m.iou;
        row.mal_acc += w * m.mal_accuracy;
        row.mal_auc += w * m.mal_auc;
        raw.push_back({{"variant", variant}, {"seed", cfg.seed}, {"split", name}, {"metrics", to_json(m)}});
      }
    }
  }
  std::cout << fmt::format("{:10s} {:13s} {:>8s} {:>8s} {:>8s} {:>8s}\n", "variant", "split", "dice", "iou", "mal_acc", "mal_auc");
  for (const auto& variant : ablation_variants())
    for (const char* split : {"test_in", "test_shifted"}) {
      const auto& r = table.at({variant, split});
      std::cout << fmt::format("{:10s} {:13s} {:>8s} {:>8s} {:>8s} {:>8s}\n", variant, split, cell(r.dice), cell(r.iou), cell(r.mal_acc),
                               cell(r.mal_auc));
    }
  write_text(dir / "ablation.json", Json{{"seeds", seeds}, {"runs", raw}}.dump(2) + "\n");
  return 0;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("mkga");
  logger->set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("MKGA_LOG_LEVEL")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept a real match.
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
    else spdlog::warn("ignoring unknown MKGA_LOG_LEVEL '{}'", env);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Multi-kernel gated adapter experiments"};
  app.require_subcommand(1);

  Common gen, tr, ev, ab;
  std::string checkpoint, report_a, report_b, compare_out;
  std::uint64_t gc_seed = 0;
  std::size_t seeds = 1;

  auto* c_gen = app.add_subcommand("gen-data", "Write the seed-derived dataset splits");
  add_common(c_gen, gen);
  auto* c_train = app.add_subcommand("train", "Train a model; writes model.ckpt and training.json");
  add_common(c_train, tr);
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint; writes report.json");
  add_common(c_eval, ev);
  c_eval->add_option("--checkpoint", checkpoint, "Checkpoint path (default: <out>/model.ckpt)");
  auto* c_cmp = app.add_subcommand("compare", "Paired tests between two reports");
  c_cmp->add_option("report_a", report_a, "First report.json")->required();
  c_cmp->add_option("report_b", report_b, "Second report.json")->required();
  c_cmp->add_option("--out", compare_out, "Directory for comparison.json");
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  c_gc->add_option("--seed", gc_seed, "Suite seed");
  auto* c_ab = app.add_subcommand("ablate", "Sweep the ablation variants");
  add_common(c_ab, ab, false);
  c_ab->add_option("--seeds", seeds, "Seeds per variant")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_eval->parsed()) return cmd_eval(ev, checkpoint);
    if (c_cmp->parsed()) return cmd_compare(report_a, report_b, compare_out);
    if (c_gc->parsed()) return cmd_gradcheck(gc_seed);
    if (c_ab->parsed()) return cmd_ablate(ab, seeds);
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}
