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

// Anomaly scores from a trained network: the estimated interpolation factor
// per pixel, aggregated to slices and subjects.

#ifndef FPI_SCORER_HPP_
#define FPI_SCORER_HPP_

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpi/volume.hpp"
#include "fpi/wrnet.hpp"

namespace fpi {

enum class Aggregator { kMean, kMax };

std::string_view to_string(Aggregator agg);
Aggregator parse_aggregator(std::string_view text);

struct ScoreMap {
  int height = 0;
  int width = 0;
  std::vector<float> scores;  // row-major, each in [0, 1]
  std::string model_id;
  std::string case_id;
  int slice_index = 0;
};

struct SubjectScore {
  double subject = 0.0;
  std::vector<double> slices;
};

struct ScoringOptions {
  Aggregator slice = Aggregator::kMean;
  Aggregator subject = Aggregator::kMax;
  int batch_size = 16;
  int threads = 1;
  std::string model_id;
};

// Sum over classes of alpha_c * p_c with alpha_c in {0, .25, .5, .75, 1}.
double expected_alpha(std::span<const double> probs);

// Per-pixel scores of image b of a network output: the sigmoid channel, or
// the expected alpha of the softmax channels.
std::vector<float> scores_from_output(const Tensor<float>& probs, int image, Head head);

// Throws DataError if the slice does not match the model's input size.
ScoreMap pixel_scores(const WideResNet<float>& net, const ModelParams<float>& params,
                      const SliceImage& slice, std::string_view model_id = {});

// Throws UsageError on an empty map.
double slice_score(const ScoreMap& map, Aggregator agg = Aggregator::kMean);
// Throws UsageError on an empty vector.
double subject_score(std::span<const double> slice_scores, Aggregator agg = Aggregator::kMax);

struct VolumeScore {
  Volume map;  // same shape as the input, id "<case>_score"
  SubjectScore subject;
};

// Scores every axis-0 slice of a normalized volume.
VolumeScore score_volume(const WideResNet<float>& net, const ModelParams<float>& params,
                         const Volume& volume, const ScoringOptions& options = {});

// Per-subject record written next to the score map.
struct ScoreRecord {
  std::string case_id;
  std::string model_id;
  Aggregator slice = Aggregator::kMean;
  Aggregator subject = Aggregator::kMax;
  std::vector<double> slice_scores;
  double subject_score = 0.0;
  std::filesystem::path score_map;  // <case>_score.raw
};

// Writes <case>_score.raw/.json and <case>_record.json into `dir`.
ScoreRecord save_volume_score(const VolumeScore& score, const std::string& case_id,
                              const ScoringOptions& options, const std::filesystem::path& dir);

// Throws DataError naming the case if its record is missing or malformed.
ScoreRecord load_score_record(const std::filesystem::path& dir, const std::string& case_id);

}  // namespace fpi

#endif  // FPI_SCORER_HPP_
