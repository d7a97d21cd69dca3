/*
 * Copyright 2026 The FPI Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "fpi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "fpi/error.hpp"
#include "fpi/scorer.hpp"
#include "fpi/testbench.hpp"
#include "fpi/volume.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

template <typename S>
RankedScores rank_impl(std::span<const S> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DataError("metric input: " + std::to_string(scores.size()) + " scores but " +
                    std::to_string(labels.size()) + " labels");
  }
  struct Item {
    S score;
    std::uint8_t label;
  };
  std::vector<Item> items(scores.size());
  for (std::size_t n = 0; n < scores.size(); ++n) {
    if (!std::isfinite(static_cast<double>(scores[n]))) throw DataError("non-finite score");
    items[n] = {scores[n], static_cast<std::uint8_t>(labels[n] != 0)};
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score > b.score; });
  RankedScores r;
  for (std::size_t n = 0; n < items.size(); ++n) {
    if (n == 0 || items[n].score != items[n - 1].score) {
      r.score.push_back(static_cast<double>(items[n].score));
      r.pos.push_back(0);
      r.neg.push_back(0);
    }
    if (items[n].label) {
      ++r.pos.back();
      ++r.total_pos;
    } else {
      ++r.neg.back();
      ++r.total_neg;
    }
  }
  return r;
}

double dice_of(std::uint64_t tp, std::uint64_t fp, std::uint64_t total_pos) {
  const double fn = static_cast<double>(total_pos - tp);
  const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) + fn;
  return denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

}  // namespace

RankedScores rank_scores(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  return rank_impl(scores, labels);
}
RankedScores rank_scores(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  return rank_impl(scores, labels);
}

double average_precision(const RankedScores& r) {
  if (r.total_pos == 0) throw DataError("average precision needs at least one positive");
  double ap = 0.0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t g = 0; g < r.groups(); ++g) {
    tp += r.pos[g];
    fp += r.neg[g];
    if (r.pos[g] == 0) continue;
    const double recall_step = static_cast<double>(r.pos[g]) / static_cast<double>(r.total_pos);
    ap += recall_step * static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  return ap;
}

double auroc(const RankedScores& r) {
  if (r.total_pos == 0 || r.total_neg == 0) {
    throw DataError("AUROC needs both positive and negative samples");
  }
  // Twice the Mann-Whitney count, exact in integers.
  std::uint64_t twice = 0;
  std::uint64_t neg_below = r.total_neg;
  for (std::size_t g = 0; g < r.groups(); ++g) {
    neg_below -= r.neg[g];
    twice += r.pos[g] * (2 * neg_below + r.neg[g]);
  }
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(r.total_pos) * static_cast<double>(r.total_neg));
}

DiceResult dice_ceiling(const RankedScores& r, std::uint64_t exact_limit) {
  if (r.total_pos == 0) throw DataError("DICE needs at least one positive");
  const std::size_t groups = r.groups();
  std::vector<std::uint64_t> cum_pos(groups), cum_neg(groups);
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    tp += r.pos[g];
    fp += r.neg[g];
    cum_pos[g] = tp;
    cum_neg[g] = fp;
  }
  DiceResult best{-1.0, 0.0};
  auto consider = [&](double threshold) {
    // Groups are descending: count those with score >= threshold.
    const auto it = std::partition_point(r.score.begin(), r.score.end(),
                                         [&](double s) { return s >= threshold; });
    const auto n = static_cast<std::size_t>(it - r.score.begin());
    const double d = n == 0 ? 0.0 : dice_of(cum_pos[n - 1], cum_neg[n - 1], r.total_pos);
    if (d > best.dice) best = {d, threshold};
  };
  if (r.total() < exact_limit) {
    // Ascending order so equal DICE values keep the lowest threshold.
    for (std::size_t g = groups; g-- > 0;) {
      const double d = dice_of(cum_pos[g], cum_neg[g], r.total_pos);
      if (d > best.dice) best = {d, r.score[g]};
    }
    return best;
  }
  // Quantile grid: the score of ascending rank ceil(q n) - 1.
  const std::uint64_t n = r.total();
  std::vector<std::uint64_t> cum_all(groups);
  for (std::size_t g = 0; g < groups; ++g) cum_all[g] = cum_pos[g] + cum_neg[g];
  for (int step = 1; step <= 1000; ++step) {
    const auto asc_rank = static_cast<std::uint64_t>(
        std::ceil(static_cast<double>(step) / 1000.0 * static_cast<double>(n))) - 1;
    const std::uint64_t desc_index = n - 1 - asc_rank;
    const auto g = static_cast<std::size_t>(
        std::upper_bound(cum_all.begin(), cum_all.end(), desc_index) - cum_all.begin());
    consider(r.score[std::min(g, groups - 1)]);
  }
  consider(0.5);
  return best;
}

std::vector<CurvePoint> curve(const RankedScores& r, std::size_t max_points) {
  std::vector<CurvePoint> all;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t g = 0; g < r.groups(); ++g) {
    tp += r.pos[g];
    fp += r.neg[g];
    CurvePoint p;
    p.threshold = r.score[g];
    p.tpr = r.total_pos ? static_cast<double>(tp) / static_cast<double>(r.total_pos) : 0.0;
    p.fpr = r.total_neg ? static_cast<double>(fp) / static_cast<double>(r.total_neg) : 0.0;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    all.push_back(p);
  }
  if (all.size() <= max_points || max_points < 2) return all;
  std::vector<CurvePoint> thin;
  const double stride = static_cast<double>(all.size() - 1) / static_cast<double>(max_points - 1);
  for (std::size_t k = 0; k < max_points; ++k) {
    thin.push_back(all[static_cast<std::size_t>(std::llround(static_cast<double>(k) * stride))]);
  }
  return thin;
}

namespace {

json metric_value(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json to_json(const SubjectMetrics& m) {
  return {{"ap", metric_value(m.ap)},
          {"auroc", metric_value(m.auroc)},
          {"positives", m.positives},
          {"negatives", m.negatives}};
}

json to_json(const PixelMetrics& m) {
  return {{"ap", metric_value(m.ap)},
          {"auroc", metric_value(m.auroc)},
          {"dice", metric_value(m.dice)},
          {"dice_threshold", metric_value(m.dice_threshold)},
          {"auroc_body", metric_value(m.auroc_body)},
          {"positives", m.positives},
          {"negatives", m.negatives}};
}

constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

// Metrics that need a missing class are reported as undefined.
SubjectMetrics subject_metrics(std::span<const EvalCase* const> cases) {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (const EvalCase* c : cases) {
    scores.push_back(c->subject_score);
    labels.push_back(static_cast<std::uint8_t>(c->subject_label != 0));
  }
  const RankedScores r = rank_scores(std::span<const double>(scores), labels);
  SubjectMetrics m;
  m.positives = r.total_pos;
  m.negatives = r.total_neg;
  m.ap = r.total_pos ? average_precision(r) : kUndefined;
  m.auroc = r.total_pos && r.total_neg ? auroc(r) : kUndefined;
  return m;
}

PixelMetrics pixel_metrics(std::span<const EvalCase* const> cases) {
  std::size_t total = 0, body_total = 0;
  for (const EvalCase* c : cases) {
    total += c->voxel_scores.size();
    body_total += static_cast<std::size_t>(std::count_if(c->body.begin(), c->body.end(),
                                                         [](std::uint8_t b) { return b != 0; }));
  }
  std::vector<float> scores, body_scores;
  std::vector<std::uint8_t> labels, body_labels;
  scores.reserve(total);
  labels.reserve(total);
  body_scores.reserve(body_total);
  body_labels.reserve(body_total);
  for (const EvalCase* c : cases) {
    scores.insert(scores.end(), c->voxel_scores.begin(), c->voxel_scores.end());
    labels.insert(labels.end(), c->mask.begin(), c->mask.end());
    for (std::size_t v = 0; v < c->body.size(); ++v) {
      if (!c->body[v]) continue;
      body_scores.push_back(c->voxel_scores[v]);
      body_labels.push_back(c->mask[v]);
    }
  }
  PixelMetrics m;
  {
    const RankedScores r = rank_scores(std::span<const float>(scores), labels);
    scores = {};
    labels = {};
    m.positives = r.total_pos;
    m.negatives = r.total_neg;
    m.ap = r.total_pos ? average_precision(r) : kUndefined;
    m.auroc = r.total_pos && r.total_neg ? auroc(r) : kUndefined;
    if (r.total_pos) {
      const DiceResult d = dice_ceiling(r);
      m.dice = d.dice;
      m.dice_threshold = d.threshold;
    } else {
      m.dice = m.dice_threshold = kUndefined;
    }
  }
  const RankedScores rb = rank_scores(std::span<const float>(body_scores), body_labels);
  m.auroc_body = rb.total_pos && rb.total_neg ? auroc(rb) : kUndefined;
  return m;
}

void check_case(const EvalCase& c) {
  if (c.voxel_scores.size() != c.mask.size()) {
    throw DataError("case '" + c.id + "': " + std::to_string(c.voxel_scores.size()) +
                    " scores but mask has " + std::to_string(c.mask.size()) + " voxels");
  }
  if (!c.body.empty() && c.body.size() != c.mask.size()) {
    throw DataError("case '" + c.id + "': body mask size mismatch");
  }
  if (c.subject_label != 0 && c.subject_label != 1) {
    throw DataError("case '" + c.id + "': subject label must be 0 or 1");
  }
}

void write_curves(const RankedScores& r, const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  const auto pts = curve(r);
  std::ofstream roc(dir / ("roc_" + name + ".csv"));
  std::ofstream pr(dir / ("pr_" + name + ".csv"));
  if (!roc || !pr) throw DataError("cannot write curves into " + dir.string());
  roc << std::setprecision(9) << "threshold,fpr,tpr\n";
  pr << std::setprecision(9) << "threshold,recall,precision\n";
  for (const auto& p : pts) {
    roc << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
    pr << p.threshold << ',' << p.tpr << ',' << p.precision << '\n';
  }
}

std::vector<const EvalCase*> kind_cases(std::span<const EvalCase> cases, const std::string& kind) {
  std::vector<const EvalCase*> out;
  for (const EvalCase& c : cases) {
    if (c.kind == kind || c.subject_label == 0) out.push_back(&c);
  }
  return out;
}

}  // namespace

json to_json(const EvalReport& report) {
  json kinds = json::object();
  for (const auto& [kind, k] : report.per_kind) {
    kinds[kind] = {{"anomalous_cases", k.anomalous_cases},
                   {"subject", to_json(k.subject)},
                   {"pixel", to_json(k.pixel)}};
  }
  return {{"subject", to_json(report.subject)},
          {"pixel", to_json(report.pixel)},
          {"per_kind", kinds},
          {"counts",
           {{"cases", report.cases},
            {"anomalous_cases", report.anomalous_cases},
            {"normal_cases", report.normal_cases},
            {"voxels", report.voxels}}}};
}

EvalReport evaluate(std::span<const EvalCase> cases) {
  if (cases.empty()) throw DataError("nothing to evaluate");
  EvalReport report;
  std::vector<const EvalCase*> all;
  std::vector<std::string> kinds;
  for (const EvalCase& c : cases) {
    check_case(c);
    all.push_back(&c);
    ++report.cases;
    report.voxels += c.mask.size();
    if (c.subject_label == 0) {
      ++report.normal_cases;
    } else {
      ++report.anomalous_cases;
      if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end()) kinds.push_back(c.kind);
    }
  }
  report.subject = subject_metrics(all);
  report.pixel = pixel_metrics(all);
  for (const std::string& kind : kinds) {
    const auto subset = kind_cases(cases, kind);
    KindReport k;
    for (const EvalCase* c : subset) k.anomalous_cases += c->subject_label != 0 ? 1 : 0;
    k.subject = subject_metrics(subset);
    k.pixel = pixel_metrics(subset);
    report.per_kind[kind] = k;
  }
  return report;
}

EvalReport evaluate_saved(const fs::path& testset_dir, const fs::path& scores_dir,
                          const fs::path& curve_dir) {
  const auto entries = load_testset_index(testset_dir);
  if (entries.empty()) throw DataError("testset " + testset_dir.string() + " has no cases");
  std::vector<EvalCase> cases;
  cases.reserve(entries.size());
  for (const TestsetEntry& e : entries) {
    const ScoreRecord rec = load_score_record(scores_dir, e.id);
    const Volume volume = load_volume(e.volume);
    const Volume mask = load_volume(e.mask);
    const Volume score = load_volume(rec.score_map);
    if (score.shape != volume.shape || mask.shape != volume.shape) {
      throw DataError("case '" + e.id + "': score map, mask and volume shapes differ");
    }
    EvalCase c;
    c.id = e.id;
    c.kind = e.kind == "normal" ? "normal" : std::string(generator_class(parse_anomaly_kind(e.kind)));
    c.subject_label = e.subject_label;
    c.subject_score = rec.subject_score;
    c.voxel_scores = score.voxels;
    c.mask.resize(mask.size());
    c.body.resize(mask.size());
    for (std::size_t v = 0; v < mask.size(); ++v) {
      c.mask[v] = mask.voxels[v] > 0.5f ? 1 : 0;
      // Body: any non-background voxel, plus the altered sphere itself.
      c.body[v] = volume.voxels[v] > 0.0f || c.mask[v] ? 1 : 0;
    }
    cases.push_back(std::move(c));
  }
  EvalReport report = evaluate(cases);
  if (!curve_dir.empty()) {
    auto pooled = [](std::span<const EvalCase* const> subset) {
      std::vector<float> s;
      std::vector<std::uint8_t> l;
      for (const EvalCase* c : subset) {
        s.insert(s.end(), c->voxel_scores.begin(), c->voxel_scores.end());
        l.insert(l.end(), c->mask.begin(), c->mask.end());
      }
      return rank_scores(std::span<const float>(s), l);
    };
    std::vector<const EvalCase*> all;
    for (const EvalCase& c : cases) all.push_back(&c);
    write_curves(pooled(all), curve_dir, "all");
    for (const auto& entry : report.per_kind) {
      write_curves(pooled(kind_cases(cases, entry.first)), curve_dir, entry.first);
    }
  }
  return report;
}

}  // namespace fpi
