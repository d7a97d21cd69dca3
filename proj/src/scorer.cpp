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

#include "fpi/scorer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <future>

#include "fpi/error.hpp"
#include "fpi/fpi_synth.hpp"
#include "json.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(Aggregator agg) { return agg == Aggregator::kMax ? "max" : "mean"; }

Aggregator parse_aggregator(std::string_view text) {
  if (text == "mean") return Aggregator::kMean;
  if (text == "max") return Aggregator::kMax;
  throw UsageError("unknown aggregator '" + std::string(text) + "' (expected mean or max)");
}

double expected_alpha(std::span<const double> probs) {
  if (probs.size() != kDiscreteAlphas.size()) {
    throw UsageError("expected_alpha needs one probability per class");
  }
  double s = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) s += kDiscreteAlphas[c] * probs[c];
  return s;
}

std::vector<float> scores_from_output(const Tensor<float>& probs, int image, Head head) {
  const std::size_t plane = probs.plane();
  const float* p = probs.image(image);
  std::vector<float> out(plane);
  if (head == Head::kSigmoid) {
    std::copy(p, p + plane, out.begin());
  } else {
    std::array<double, kNumClasses> pc{};
    for (std::size_t px = 0; px < plane; ++px) {
      for (std::size_t c = 0; c < pc.size(); ++c) pc[c] = p[c * plane + px];
      out[px] = static_cast<float>(expected_alpha(pc));
    }
  }
  for (float& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

ScoreMap pixel_scores(const WideResNet<float>& net, const ModelParams<float>& params,
                      const SliceImage& slice, std::string_view model_id) {
  const int size = net.config().input_size;
  if (slice.height != size || slice.width != size) {
    throw DataError("slice is " + std::to_string(slice.height) + "x" +
                    std::to_string(slice.width) + " but the model expects " +
                    std::to_string(size) + "x" + std::to_string(size));
  }
  Tensor<float> x(1, 1, size, size);
  std::copy(slice.pixels.begin(), slice.pixels.end(), x.data.begin());
  const Tensor<float> probs = net.forward(params, x);
  ScoreMap m;
  m.height = size;
  m.width = size;
  m.scores = scores_from_output(probs, 0, net.config().head);
  m.model_id = std::string(model_id);
  m.case_id = slice.source.volume_id;
  m.slice_index = slice.source.index;
  return m;
}

double slice_score(const ScoreMap& map, Aggregator agg) {
  if (map.scores.empty()) throw UsageError("empty score map");
  if (agg == Aggregator::kMax) {
    return *std::max_element(map.scores.begin(), map.scores.end());
  }
  double s = 0.0;
  for (float v : map.scores) s += v;
  return s / static_cast<double>(map.scores.size());
}

double subject_score(std::span<const double> slice_scores, Aggregator agg) {
  if (slice_scores.empty()) throw UsageError("no slice scores");
  if (agg == Aggregator::kMax) return *std::max_element(slice_scores.begin(), slice_scores.end());
  double s = 0.0;
  for (double v : slice_scores) s += v;
  return s / static_cast<double>(slice_scores.size());
}

VolumeScore score_volume(const WideResNet<float>& net, const ModelParams<float>& params,
                         const Volume& volume, const ScoringOptions& options) {
  const int size = net.config().input_size;
  if (volume.height() != size || volume.width() != size) {
    throw DataError("volume '" + volume.id + "' has " + std::to_string(volume.height()) + "x" +
                    std::to_string(volume.width()) + " slices but the model expects " +
                    std::to_string(size) + "x" + std::to_string(size));
  }
  if (volume.depth() < 1) throw DataError("volume '" + volume.id + "' is empty");
  if (options.batch_size < 1) throw UsageError("batch size must be at least 1");
  VolumeScore out;
  out.map = Volume(volume.id + "_score", volume.shape);
  out.map.spacing = volume.spacing;
  out.subject.slices.assign(static_cast<std::size_t>(volume.depth()), 0.0);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  const int bs = options.batch_size;
  const int batches = (volume.depth() + bs - 1) / bs;

  // Each batch writes a disjoint range of slices.
  auto run_batch = [&](int b) {
    const int k0 = b * bs;
    const int n = std::min(bs, volume.depth() - k0);
    Tensor<float> x(n, 1, size, size);
    std::copy_n(volume.voxels.begin() + static_cast<std::ptrdiff_t>(k0 * plane), n * plane,
                x.data.begin());
    const Tensor<float> probs = net.forward(params, x);
    for (int s = 0; s < n; ++s) {
      ScoreMap m;
      m.height = size;
      m.width = size;
      m.scores = scores_from_output(probs, s, net.config().head);
      std::copy(m.scores.begin(), m.scores.end(),
                out.map.voxels.begin() + static_cast<std::ptrdiff_t>((k0 + s) * plane));
      out.subject.slices[static_cast<std::size_t>(k0 + s)] = slice_score(m, options.slice);
    }
  };
  if (options.threads <= 1) {
    for (int b = 0; b < batches; ++b) run_batch(b);
  } else {
    for (int first = 0; first < batches; first += options.threads) {
      std::vector<std::future<void>> jobs;
      for (int b = first; b < std::min(batches, first + options.threads); ++b) {
        jobs.push_back(std::async(std::launch::async, run_batch, b));
      }
      for (auto& j : jobs) j.get();
    }
  }
  out.subject.subject = subject_score(out.subject.slices, options.subject);
  return out;
}

ScoreRecord save_volume_score(const VolumeScore& score, const std::string& case_id,
                              const ScoringOptions& options, const fs::path& dir) {
  fs::create_directories(dir);
  ScoreRecord r;
  r.case_id = case_id;
  r.model_id = options.model_id;
  r.slice = options.slice;
  r.subject = options.subject;
  r.slice_scores = score.subject.slices;
  r.subject_score = score.subject.subject;
  r.score_map = dir / (case_id + "_score.raw");
  Volume map = score.map;
  map.id = case_id + "_score";
  save_volume(map, dir / (case_id + "_score"));
  const json j{{"case_id", r.case_id},
               {"model_id", r.model_id},
               {"slice_aggregator", std::string(to_string(r.slice))},
               {"subject_aggregator", std::string(to_string(r.subject))},
               {"slice_scores", r.slice_scores},
               {"subject_score", r.subject_score},
               {"score_map", case_id + "_score.raw"}};
  const fs::path path = dir / (case_id + "_record.json");
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw DataError("failed writing " + path.string());
  return r;
}

ScoreRecord load_score_record(const fs::path& dir, const std::string& case_id) {
  const fs::path path = dir / (case_id + "_record.json");
  std::ifstream f(path);
  if (!f) throw DataError("missing score record for case '" + case_id + "' (" + path.string() + ")");
  ScoreRecord r;
  try {
    const json j = json::parse(f);
    r.case_id = j.at("case_id").get<std::string>();
    r.model_id = j.value("model_id", std::string());
    r.slice = parse_aggregator(j.at("slice_aggregator").get<std::string>());
    r.subject = parse_aggregator(j.at("subject_aggregator").get<std::string>());
    r.slice_scores = j.at("slice_scores").get<std::vector<double>>();
    r.subject_score = j.at("subject_score").get<double>();
    r.score_map = dir / j.at("score_map").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("malformed score record for case '" + case_id + "': " + e.what());
  }
  if (r.case_id != case_id) {
    throw DataError("score record " + path.string() + " names case '" + r.case_id + "'");
  }
  return r;
}

}  // namespace fpi
