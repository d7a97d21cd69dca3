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

// Ranking metrics (AP, AUROC), the best-threshold DICE, and the evaluation
// of scored test sets at subject and pixel level.

#ifndef FPI_METRICS_HPP_
#define FPI_METRICS_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace fpi {

// Distinct scores in descending order with the number of positives and
// negatives sharing each.
struct RankedScores {
  std::vector<double> score;
  std::vector<std::uint64_t> pos;
  std::vector<std::uint64_t> neg;
  std::uint64_t total_pos = 0;
  std::uint64_t total_neg = 0;

  std::size_t groups() const { return score.size(); }
  std::uint64_t total() const { return total_pos + total_neg; }
};

// Labels are 0 or 1 (anything non-zero counts as 1). Throws DataError on a
// length mismatch or a non-finite score.
RankedScores rank_scores(std::span<const float> scores, std::span<const std::uint8_t> labels);
RankedScores rank_scores(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Sum over tie groups (descending) of (R_k - R_{k-1}) P_k.
// Throws DataError without positives.
double average_precision(const RankedScores& ranked);
// P(pos > neg) + P(tie) / 2. Throws DataError unless both classes occur.
double auroc(const RankedScores& ranked);

struct DiceResult {
  double dice = 0.0;
  double threshold = 0.0;  // pixels with score >= threshold are positive
};

inline constexpr std::uint64_t kExactDiceLimit = 1'000'000;

// Maximum of 2TP / (2TP + FP + FN) over candidate thresholds: every
// distinct score when there are fewer than `exact_limit` scores, otherwise
// the scores at quantiles 0.001, 0.002, ..., 1 plus 0.5. Throws DataError
// without positives.
DiceResult dice_ceiling(const RankedScores& ranked, std::uint64_t exact_limit = kExactDiceLimit);

template <typename S>
double average_precision(std::span<const S> scores, std::span<const std::uint8_t> labels) {
  return average_precision(rank_scores(scores, labels));
}
template <typename S>
double auroc(std::span<const S> scores, std::span<const std::uint8_t> labels) {
  return auroc(rank_scores(scores, labels));
}
template <typename S>
DiceResult dice_ceiling(std::span<const S> scores, std::span<const std::uint8_t> labels,
                        std::uint64_t exact_limit = kExactDiceLimit) {
  return dice_ceiling(rank_scores(scores, labels), exact_limit);
}

// Curve points at every tie-group boundary, thinned to at most max_points.
struct CurvePoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;  // recall
  double precision = 1.0;
};
std::vector<CurvePoint> curve(const RankedScores& ranked, std::size_t max_points = 1000);

// One evaluated subject: voxel scores, ground-truth mask and body mask all
// of the same length.
struct EvalCase {
  std::string id;
  std::string kind;  // generator class, or "normal"
  int subject_label = 0;
  double subject_score = 0.0;
  std::vector<float> voxel_scores;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> body;
};

struct SubjectMetrics {
  double ap = 0.0;
  double auroc = 0.0;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
};

struct PixelMetrics {
  double ap = 0.0;
  double auroc = 0.0;
  double dice = 0.0;
  double dice_threshold = 0.0;
  double auroc_body = 0.0;  // restricted to body voxels
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
};

struct KindReport {
  std::uint64_t anomalous_cases = 0;  // cases of this kind (normals excluded)
  SubjectMetrics subject;
  PixelMetrics pixel;
};

struct EvalReport {
  SubjectMetrics subject;
  PixelMetrics pixel;
  // Each kind is scored on its own cases together with every normal case.
  std::map<std::string, KindReport> per_kind;
  std::uint64_t cases = 0;
  std::uint64_t anomalous_cases = 0;
  std::uint64_t normal_cases = 0;
  std::uint64_t voxels = 0;
};

nlohmann::json to_json(const EvalReport& report);

// Throws DataError on inconsistent case data.
EvalReport evaluate(std::span<const EvalCase> cases);

// Loads a saved test set and score directory and evaluates them. Per-kind
// ROC/PR tables are written to curve_dir when it is non-empty. Throws
// DataError naming a case without a score record.
EvalReport evaluate_saved(const std::filesystem::path& testset_dir,
                          const std::filesystem::path& scores_dir,
                          const std::filesystem::path& curve_dir = {});

}  // namespace fpi

#endif  // FPI_METRICS_HPP_
