#pragma once

// Training loop, split evaluation, paired run comparison and the JSON
// MetricsReport.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "mkga/config.hpp"
#include "mkga/data.hpp"
#include "mkga/losses.hpp"
#include "mkga/network.hpp"
#include "mkga/optim.hpp"
#include "mkga/stats.hpp"

namespace mkga {

using Json = nlohmann::ordered_json;

struct Splits {
  std::vector<Sample> train, val, test_in, test_shifted;
};

/// Seed-derived datasets for a run. Each split draws from its own stream, so
/// changing one split size leaves the others untouched.
inline Splits make_splits(const RunConfig& cfg) {
  GeneratorOptions g;
  g.image_size = cfg.image_size;
  return {generate_dataset(cfg.n_train, Domain::kIn, derive_seed(cfg.seed, 11), g),
          generate_dataset(cfg.n_val, Domain::kIn, derive_seed(cfg.seed, 12), g),
          generate_dataset(cfg.n_test_in, Domain::kIn, derive_seed(cfg.seed, 13), g),
          generate_dataset(cfg.n_test_shifted, Domain::kShifted, derive_seed(cfg.seed, 14), g)};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  std::string sample_id;
  double dice = 0.0;
  double iou = 0.0;
  int mal_label = kAbsent;
  int mal_pred = 0;
  double mal_score = 0.0;  // P(high risk)
  int pos_label = kAbsent;
  int pos_pred = 0;
  std::array<double, 3> pos_probs{};

  bool operator==(const EvalRecord&) const = default;
};

struct SplitMetrics {
  std::string split;
  std::size_t n = 0;
  double loss = 0.0;
  double dice = 0.0;
  double iou = 0.0;
  double mal_accuracy = 0.0;
  double mal_f1 = 0.0;
  double mal_auc = std::numeric_limits<double>::quiet_NaN();
  std::size_t pos_labeled = 0;
  double pos_accuracy = std::numeric_limits<double>::quiet_NaN();
  double pos_macro_f1 = std::numeric_limits<double>::quiet_NaN();
};

struct Evaluation {
  std::vector<EvalRecord> records;
  SplitMetrics metrics;
};

template <typename T>
Evaluation evaluate(const Model<T>& model, std::span<const Sample> samples, const std::string& split,
                    const LossWeights& weights = {}, std::size_t batch_size = 32) {
  if (samples.empty()) throw ValidationError("evaluate: split '" + split + "' is empty");
  NoGradGuard no_grad;
  Evaluation ev;
  ev.metrics.split = split;
  ev.metrics.n = samples.size();
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t stop = std::min(samples.size(), start + batch_size);
    const auto chunk = samples.subspan(start, stop - start);
    auto [images, targets] = make_batch<T>(chunk);
    const auto out = model.forward(images);
    loss_sum += static_cast<double>(total_loss(out, targets, weights).total.item()) * static_cast<double>(chunk.size());
    const std::size_t hw = chunk.front().size * chunk.front().size;
    const auto& seg = out.seg_logits.storage();
    const auto& mal = out.mal_logits.storage();
    const auto& pos = out.pos_logits.storage();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const Sample& s = chunk[i];
      EvalRecord r;
      r.sample_id = s.sample_id;
      std::vector<std::uint8_t> pred(hw);
      for (std::size_t k = 0; k < hw; ++k) pred[k] = seg[(2 * i + 1) * hw + k] > seg[2 * i * hw + k] ? 1 : 0;
      const auto ov = dice_iou(pred, s.mask);
      r.dice = ov.dice;
      r.iou = ov.iou;
      r.mal_label = s.malignancy;
      const double m0 = mal[2 * i], m1 = mal[2 * i + 1];
      r.mal_score = 1.0 / (1.0 + std::exp(m0 - m1));
      r.mal_pred = m1 > m0 ? 1 : 0;
      r.pos_label = s.position;
      const double mx = std::max({static_cast<double>(pos[3 * i]), static_cast<double>(pos[3 * i + 1]), static_cast<double>(pos[3 * i + 2])});
      double z = 0.0;
      for (int c = 0; c < 3; ++c) z += r.pos_probs[c] = std::exp(pos[3 * i + c] - mx);
      for (int c = 0; c < 3; ++c) r.pos_probs[c] /= z;
      r.pos_pred = static_cast<int>(std::max_element(r.pos_probs.begin(), r.pos_probs.end()) - r.pos_probs.begin());
      ev.records.push_back(std::move(r));
    }
  }
  auto& m = ev.metrics;
  m.loss = loss_sum / static_cast<double>(samples.size());
  std::vector<int> mal_pred, mal_true, pos_pred, pos_true;
  std::vector<double> mal_score;
  for (const auto& r : ev.records) {
    m.dice += r.dice;
    m.iou += r.iou;
    mal_pred.push_back(r.mal_pred);
    mal_true.push_back(r.mal_label);
    mal_score.push_back(r.mal_score);
    if (r.pos_label != kAbsent) {
      pos_pred.push_back(r.pos_pred);
      pos_true.push_back(r.pos_label);
    }
  }
  m.dice /= static_cast<double>(samples.size());
  m.iou /= static_cast<double>(samples.size());
  const auto mc = accuracy_f1(mal_pred, mal_true, 1);
  m.mal_accuracy = mc.accuracy;
  m.mal_f1 = mc.f1;
  const bool both = std::count(mal_true.begin(), mal_true.end(), 1) > 0 && std::count(mal_true.begin(), mal_true.end(), 0) > 0;
  if (both) m.mal_auc = auc(mal_score, mal_true);
  m.pos_labeled = pos_true.size();
  if (!pos_true.empty()) {
    const auto pc = accuracy_macro_f1(pos_pred, pos_true, 3);
    m.pos_accuracy = pc.accuracy;
    m.pos_macro_f1 = pc.f1;
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_total = 0.0;
  double train_seg = 0.0;
  double train_mal = 0.0;
  double train_pos = 0.0;
  double val_loss = 0.0;
  double val_dice = 0.0;
  /// Mean pairwise task-gradient cosines: seg/mal, seg/pos, mal/pos.
  std::array<double, 3> grad_cosines{};
  bool improved = false;
};

struct TrainResult {
  std::unique_ptr<Model<float>> model;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

namespace detail {

// Per-task gradients of the weighted task losses over `params`.
inline TaskGradients task_gradients(const LossBreakdown<float>& l, const LossWeights& w, const std::vector<Parameter<float>*>& params) {
  TaskGradients tg;
  auto one = [&](const char* name, const Tensor<float>& loss, double weight) {
    for (auto* p : params) p->tensor.zero_grad();
    scale(loss, static_cast<float>(weight)).backward();
    tg.tasks.push_back(name);
    tg.grads.push_back(flatten_grads(params));
  };
  one("seg", l.seg, 1.0);
  if (l.mal_present) one("mal", l.mal, w.lambda_mal);
  if (l.pos_present) one("pos", l.pos, w.lambda_pos);
  return tg;
}

}  // namespace detail

/// Trains the configured model on `splits.train`, early-stopping on the
/// validation loss, and returns the best-epoch weights.
inline TrainResult train(const RunConfig& cfg, const Splits& splits, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  TrainResult res;
  res.model = build_model<float>(Backbone{cfg.backbone}, cfg.adapter, derive_seed(cfg.seed, 1), cfg.image_size);
  auto params = trainable_parameters(*res.model);
  AdamW<float> opt(params, cfg.optim);
  EarlyStopper stopper(cfg.patience);
  Rng data_rng(derive_seed(cfg.seed, 2));
  Rng surgery_rng(derive_seed(cfg.seed, 3));

  std::vector<std::vector<float>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : res.model->parameters()) best.push_back(p->tensor.storage());
  };
  snapshot();

  std::vector<std::size_t> order(splits.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    data_rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    std::array<double, 3> cos_sum{};
    std::size_t cos_count = 0, batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(augment(splits.train[order[i]], data_rng, cfg.augment));
      auto [images, targets] = make_batch<float>(batch);
      const auto out = res.model->forward(images);
      const auto loss = total_loss(out, targets, cfg.loss);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
      }
      log.train_total += total;
      log.train_seg += loss.seg.item();
      log.train_mal += loss.mal.item();
      log.train_pos += loss.pos.item();

      const bool probe = cfg.use_pcgrad || start == 0;
      if (probe) {
        auto tg = detail::task_gradients(loss, cfg.loss, params);
        if (tg.grads.size() == 3) {
          const auto c = pairwise_cosines(tg);
          for (int k = 0; k < 3; ++k) cos_sum[k] += c[k];
          ++cos_count;
        }
        if (cfg.use_pcgrad && tg.grads.size() >= 2) {
          assign_grads(params, std::span<const double>(pcgrad(tg, surgery_rng)));
        } else {
          opt.zero_grad();
          loss.total.backward();
        }
      } else {
        opt.zero_grad();
        loss.total.backward();
      }
      opt.step();
      ++batches;
    }
    log.train_total /= static_cast<double>(batches);
    log.train_seg /= static_cast<double>(batches);
    log.train_mal /= static_cast<double>(batches);
    log.train_pos /= static_cast<double>(batches);
    for (int k = 0; k < 3; ++k) log.grad_cosines[k] = cos_count ? cos_sum[k] / static_cast<double>(cos_count) : 0.0;

    const auto val = evaluate(*res.model, splits.val, "val", cfg.loss);
    if (!std::isfinite(val.metrics.loss)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    log.val_loss = val.metrics.loss;
    log.val_dice = val.metrics.dice;
    const bool stop = stopper.update(log.val_loss);
    log.improved = stopper.best_epoch() == epoch;
    if (log.improved) snapshot();
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (stop) {
      res.early_stopped = true;
      break;
    }
  }
  res.best_epoch = stopper.best_epoch();
  auto all = res.model->parameters();
  for (std::size_t i = 0; i < all.size(); ++i) all[i]->tensor.storage() = best[i];
  return res;
}

// ---------------------------------------------------------------------------
// Paired comparison

/// Wilcoxon on per-sample Dice, McNemar on malignancy correctness, DeLong on
/// malignancy AUC and on flattened one-vs-rest position AUC (labeled samples
/// only), all BH-adjusted jointly.
inline std::vector<StatResult> compare_runs(std::span<const EvalRecord> a, std::span<const EvalRecord> b) {
  std::vector<std::string> problems;
  if (a.size() != b.size()) problems.push_back("record counts differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  for (std::size_t i = 0; i < std::min(a.size(), b.size()) && problems.size() < 10; ++i)
    if (a[i].sample_id != b[i].sample_id) problems.push_back("index " + std::to_string(i) + ": " + a[i].sample_id + " vs " + b[i].sample_id);
  if (!problems.empty()) {
    std::string msg = "compare_runs: records are not paired:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ValidationError(msg);
  }
  if (a.empty()) throw ValidationError("compare_runs: no records");

  std::vector<StatResult> out;
  std::vector<double> dice_a, dice_b;
  std::vector<std::uint8_t> ok_a, ok_b;
  std::vector<double> score_a, score_b;
  std::vector<int> mal;
  std::vector<double> pa, pb;
  std::vector<int> pos;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dice_a.push_back(a[i].dice);
    dice_b.push_back(b[i].dice);
    if (a[i].mal_label != kAbsent) {
      ok_a.push_back(a[i].mal_pred == a[i].mal_label);
      ok_b.push_back(b[i].mal_pred == b[i].mal_label);
      score_a.push_back(a[i].mal_score);
      score_b.push_back(b[i].mal_score);
      mal.push_back(a[i].mal_label);
    }
    if (a[i].pos_label != kAbsent) {
      pa.insert(pa.end(), a[i].pos_probs.begin(), a[i].pos_probs.end());
      pb.insert(pb.end(), b[i].pos_probs.begin(), b[i].pos_probs.end());
      pos.push_back(a[i].pos_label);
    }
  }
  auto named = [](StatResult r, const char* name) {
    r.test_name = name;
    return r;
  };
  out.push_back(named(wilcoxon_signed_rank(dice_a, dice_b), "wilcoxon_dice"));
  if (!mal.empty()) out.push_back(named(mcnemar(ok_a, ok_b), "mcnemar_malignancy"));
  const bool two_classes = std::count(mal.begin(), mal.end(), 1) > 0 && std::count(mal.begin(), mal.end(), 0) > 0;
  if (two_classes) out.push_back(named(delong(score_a, score_b, mal).stat, "delong_malignancy_auc"));
  if (!pos.empty()) out.push_back(named(delong_flattened(pa, pb, pos, 3).stat, "delong_position_auc"));
  apply_fdr(out);
  return out;
}

// ---------------------------------------------------------------------------
// MetricsReport

inline Json to_json(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const SplitMetrics& m) {
  return Json{{"n", m.n},
              {"loss", to_json(m.loss)},
              {"dice", to_json(m.dice)},
              {"iou", to_json(m.iou)},
              {"malignancy_accuracy", to_json(m.mal_accuracy)},
              {"malignancy_f1", to_json(m.mal_f1)},
              {"malignancy_auc", to_json(m.mal_auc)},
              {"position_labeled", m.pos_labeled},
              {"position_accuracy", to_json(m.pos_accuracy)},
              {"position_macro_f1", to_json(m.pos_macro_f1)}};
}

inline Json to_json(const EvalRecord& r) {
  return Json{{"id", r.sample_id},       {"dice", r.dice},           {"iou", r.iou},
              {"mal_label", r.mal_label}, {"mal_pred", r.mal_pred},   {"mal_score", r.mal_score},
              {"pos_label", r.pos_label}, {"pos_pred", r.pos_pred},   {"pos_probs", r.pos_probs}};
}

inline EvalRecord record_from_json(const Json& j) {
  EvalRecord r;
  r.sample_id = j.at("id").get<std::string>();
  r.dice = j.at("dice").get<double>();
  r.iou = j.at("iou").get<double>();
  r.mal_label = j.at("mal_label").get<int>();
  r.mal_pred = j.at("mal_pred").get<int>();
  r.mal_score = j.at("mal_score").get<double>();
  r.pos_label = j.at("pos_label").get<int>();
  r.pos_pred = j.at("pos_pred").get<int>();
  r.pos_probs = j.at("pos_probs").get<std::array<double, 3>>();
  return r;
}

inline Json to_json(const StatResult& s) {
  return Json{{"test", s.test_name}, {"statistic", to_json(s.statistic)}, {"p_raw", s.p_raw}, {"p_adjusted", s.p_adjusted}, {"significant", s.significant}};
}

inline Json to_json(const EpochLog& e) {
  return Json{{"epoch", e.epoch},
              {"train_total", e.train_total},
              {"train_seg", e.train_seg},
              {"train_mal", e.train_mal},
              {"train_pos", e.train_pos},
              {"val_loss", e.val_loss},
              {"val_dice", e.val_dice},
              {"cos_seg_mal", e.grad_cosines[0]},
              {"cos_seg_pos", e.grad_cosines[1]},
              {"cos_mal_pos", e.grad_cosines[2]},
              {"improved", e.improved}};
}

inline constexpr const char* kReportSchema = "mkga-metrics/1";

/// Fixed-schema report. Contains no timings or paths that vary between
/// identical runs.
inline Json make_report(const RunConfig& cfg, Model<float>& model, const TrainResult* training,
                        const std::vector<Evaluation>& evals) {
  Json config = Json::object();
  for (const auto& [k, v] : detail::config_keys())
    if (k != "out_dir") config[k] = v.get(cfg);
  std::size_t trainable = 0;
  for (auto* p : model.parameters())
    if (p->trainable) trainable += p->tensor.numel();
  Json report{{"schema", kReportSchema},
              {"config", config},
              {"parameters", {{"total", model.parameter_count()}, {"trainable", trainable}}}};
  Json train_j = nullptr;
  if (training) {
    Json log = Json::array();
    for (const auto& e : training->log) log.push_back(to_json(e));
    train_j = Json{{"epochs_run", training->log.size()}, {"best_epoch", training->best_epoch}, {"early_stopped", training->early_stopped}, {"log", log}};
  }
  report["training"] = train_j;
  Json splits = Json::object(), records = Json::object();
  for (const auto& ev : evals) {
    splits[ev.metrics.split] = to_json(ev.metrics);
    Json rs = Json::array();
    for (const auto& r : ev.records) rs.push_back(to_json(r));
    records[ev.metrics.split] = rs;
  }
  report["splits"] = splits;
  report["records"] = records;
  return report;
}

/// Per-split records from a report produced by make_report.
inline std::map<std::string, std::vector<EvalRecord>> records_from_report(const Json& report) {
  if (!report.contains("schema") || report["schema"] != kReportSchema) throw ValidationError("not a metrics report (schema mismatch)");
  std::map<std::string, std::vector<EvalRecord>> out;
  for (const auto& [split, rs] : report.at("records").items())
    for (const auto& r : rs) out[split].push_back(record_from_json(r));
  return out;
}

}  // namespace mkga
