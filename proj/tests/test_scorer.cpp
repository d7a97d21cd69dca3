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

#include <algorithm>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "fpi/dataset.hpp"
#include "fpi/error.hpp"
#include "fpi/scorer.hpp"
#include "test_util.hpp"

using namespace fpi;

TEST_CASE("expected alpha of softmax probabilities") {
  CHECK(expected_alpha(std::vector<double>{1, 0, 0, 0, 0}) == 0.0);
  CHECK(expected_alpha(std::vector<double>{0, 0, 0, 0, 1}) == 1.0);
  CHECK(expected_alpha(std::vector<double>{0.2, 0.2, 0.2, 0.2, 0.2}) == doctest::Approx(0.5));
  CHECK_THROWS(expected_alpha(std::vector<double>{0.5, 0.5}));
  // Affine in the probabilities.
  const std::vector<double> p{0.1, 0.3, 0.2, 0.25, 0.15}, q{0.4, 0.1, 0.1, 0.1, 0.3};
  std::vector<double> mix(5);
  for (int c = 0; c < 5; ++c) mix[c] = 0.3 * p[c] + 0.7 * q[c];
  CHECK(expected_alpha(mix) == doctest::Approx(0.3 * expected_alpha(p) + 0.7 * expected_alpha(q)));
}

TEST_CASE("slice aggregation") {
  ScoreMap m;
  m.height = 10;
  m.width = 10;
  m.scores.assign(100, 0.0f);
  CHECK(slice_score(m) == 0.0);
  m.scores[37] = 1.0f;
  CHECK(slice_score(m) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(slice_score(m, Aggregator::kMax) == 1.0);

  SeededRng r(2);
  for (float& s : m.scores) s = static_cast<float>(r.uniform());
  double naive = 0;
  for (int j = 0; j < 10; ++j)
    for (int i = 0; i < 10; ++i) naive += m.scores[static_cast<std::size_t>(j * 10 + i)];
  CHECK(std::abs(slice_score(m) - naive / 100) < 1e-9);
  CHECK_THROWS_AS(slice_score(ScoreMap{}), UsageError);
}

TEST_CASE("subject aggregation") {
  CHECK(subject_score(std::vector<double>(7, 0.3)) == 0.3);
  std::vector<double> v{0.1, 0.1, 0.8, 0.1};
  CHECK(subject_score(v) == 0.8);
  std::reverse(v.begin(), v.end());
  CHECK(subject_score(v) == 0.8);
  std::rotate(v.begin(), v.begin() + 1, v.end());
  CHECK(subject_score(v) == 0.8);
  CHECK(subject_score(v, Aggregator::kMean) == doctest::Approx(0.275));
  CHECK_THROWS_AS(subject_score(std::vector<double>{}), UsageError);
  CHECK(parse_aggregator("max") == Aggregator::kMax);
  CHECK_THROWS_AS(parse_aggregator("median"), UsageError);
}

TEST_CASE("raising a pixel never lowers slice or subject scores") {
  SeededRng r(3);
  for (int trial = 0; trial < 200; ++trial) {
    ScoreMap m;
    m.height = m.width = 4;
    for (int k = 0; k < 16; ++k) m.scores.push_back(static_cast<float>(r.uniform()));
    ScoreMap up = m;
    const auto k = r.uniform_int(16);
    up.scores[k] = std::min(1.0f, up.scores[k] + static_cast<float>(r.uniform()));
    const std::vector<double> before{0.2, slice_score(m), 0.4};
    const std::vector<double> after{0.2, slice_score(up), 0.4};
    CHECK(after[1] >= before[1]);
    CHECK(subject_score(after) >= subject_score(before));
  }
  // Direct monotonicity for both aggregators.
  for (Aggregator agg : {Aggregator::kMean, Aggregator::kMax}) {
    ScoreMap m;
    m.height = m.width = 3;
    m.scores = {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f, 0.05f};
    for (std::size_t k = 0; k < 9; ++k) {
      ScoreMap up = m;
      up.scores[k] = std::min(1.0f, up.scores[k] + 0.15f);
      CHECK(slice_score(up, agg) >= slice_score(m, agg));
    }
  }
}

TEST_CASE("volume scoring matches slice-by-slice scoring") {
  for (Head head : {Head::kSigmoid, Head::kSoftmax}) {
    const WideResNet<float> net(ModelConfig::desk(32, head));
    const ModelParams<float> p = net.init(SeededRng(4));
    const Volume v = normalize(generate_phantom(SeededRng(5), {20, 32, 32}, "case7"));
    ScoringOptions opts;
    opts.batch_size = 6;
    const VolumeScore vs = score_volume(net, p, v, opts);
    CHECK(vs.map.shape == v.shape);
    CHECK(vs.map.id == "case7_score");
    REQUIRE(vs.subject.slices.size() == 20);
    double best = 0;
    for (int k = 0; k < 20; ++k) {
      const ScoreMap m = pixel_scores(net, p, extract_slice(v, 0, k));
      REQUIRE(m.scores.size() == 32 * 32);
      for (std::size_t n = 0; n < m.scores.size(); ++n) {
        REQUIRE(m.scores[n] >= 0.0f);
        REQUIRE(m.scores[n] <= 1.0f);
        REQUIRE(std::abs(m.scores[n] - vs.map.voxels[k * 1024 + n]) < 1e-6f);
      }
      CHECK(std::abs(slice_score(m) - vs.subject.slices[k]) < 1e-6);
      best = std::max(best, vs.subject.slices[k]);
    }
    CHECK(vs.subject.subject == best);

    opts.threads = 3;
    const VolumeScore again = score_volume(net, p, v, opts);
    CHECK(std::memcmp(again.map.voxels.data(), vs.map.voxels.data(), v.size() * 4) == 0);
    CHECK_THROWS_AS(pixel_scores(net, p, SliceImage(16, 16)), DataError);
  }
}

TEST_CASE("score records round trip and name missing cases") {
  const WideResNet<float> net(ModelConfig::desk(16, Head::kSigmoid));
  const ModelParams<float> p = net.init(SeededRng(4));
  const Volume v = normalize(generate_phantom(SeededRng(5), {16, 16, 16}, "c1"));
  ScoringOptions opts;
  opts.model_id = "m";
  const VolumeScore vs = score_volume(net, p, v, opts);
  TempDir dir;
  save_volume_score(vs, "c1", opts, dir.path);
  const ScoreRecord rec = load_score_record(dir.path, "c1");
  CHECK(rec.case_id == "c1");
  CHECK(rec.model_id == "m");
  CHECK(rec.slice_scores == vs.subject.slices);
  CHECK(rec.subject_score == vs.subject.subject);
  CHECK(load_volume(rec.score_map).voxels == vs.map.voxels);
  try {
    load_score_record(dir.path, "c2");
    FAIL("expected a missing-record error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("c2") != std::string::npos);
  }
}
