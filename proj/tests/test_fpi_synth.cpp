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
#include <set>
#include <tuple>

#include "doctest.h"
#include "fpi/error.hpp"
#include "fpi/fpi_synth.hpp"
#include "properties.hpp"
#include "test_util.hpp"

using namespace fpi;

TEST_CASE("patch size and centre ranges at d=256") {
  SeededRng rng(21);
  double lo = 1e9, hi = -1e9, sum = 0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const PatchSpec p = sample_patch_spec(rng, 256);
    lo = std::min(lo, p.size);
    hi = std::max(hi, p.size);
    sum += p.size;
    REQUIRE(p.center_j >= 25.6);
    REQUIRE(p.center_j <= 230.4);
    REQUIRE(p.center_i >= 25.6);
    REQUIRE(p.center_i <= 230.4);
    REQUIRE(p.bounds.area() > 0);
  }
  CHECK(lo >= 25.6);
  CHECK(hi <= 102.4);
  // E[h_s] = 0.25 d = 64.
  CHECK(std::abs(sum / n - 64.0) < 1.0);
  CHECK_THROWS_AS(sample_patch_spec(rng, 15), UsageError);
}

TEST_CASE("patch clipped at the low edge") {
  const PatchSpec p = make_patch_spec(26, 26, 100, 256, 256);
  CHECK(p.bounds.j0 == 0);
  CHECK(p.bounds.i0 == 0);
  CHECK(p.bounds.j1 == 76);
  CHECK(p.bounds.area() < 100L * 100L);
}

TEST_CASE("alpha draws per mode") {
  SeededRng rng(4);
  std::set<double> discrete, binary;
  double sum = 0;
  for (int k = 0; k < 100000; ++k) {
    discrete.insert(sample_alpha(rng, AlphaMode::kDiscrete));
    binary.insert(sample_alpha(rng, AlphaMode::kBinary));
    const double a = sample_alpha(rng, AlphaMode::kContinuous);
    REQUIRE(a >= 0.0);
    REQUIRE(a < 1.0);
    sum += a;
  }
  CHECK(discrete == std::set<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK(binary == std::set<double>{0.0, 1.0});
  CHECK(std::abs(sum / 100000 - 0.5) < 0.01);
  CHECK(parse_alpha_mode("continuous-round-up") == AlphaMode::kContinuousRoundUp);
  CHECK_THROWS_AS(parse_alpha_mode("ternary"), UsageError);
}

namespace {

SliceImage filled(int d, float v, const char* id) {
  SliceImage s(d, d, v);
  s.source.volume_id = id;
  return s;
}

}  // namespace

TEST_CASE("interpolate worked examples") {
  const PatchSpec patch = make_patch_spec(8, 8, 8, 16, 16);
  const SliceImage a = filled(16, 0.2f, "a");
  const SliceImage b = filled(16, 0.6f, "b");

  const FpiSample mid = interpolate(a, b, patch, 0.5, AlphaMode::kContinuous);
  CHECK(mid.input.at(8, 8) == doctest::Approx(0.4f));
  CHECK(mid.label[8 * 16 + 8] == 0.5f);
  CHECK(mid.input.at(0, 0) == 0.2f);
  CHECK(mid.label[0] == 0.0f);
  CHECK(mid.source_a == "a");
  CHECK(mid.source_b == "b");

  const FpiSample zero = interpolate(a, b, patch, 0.0, AlphaMode::kContinuous);
  CHECK(zero.input.pixels == a.pixels);
  CHECK(std::all_of(zero.label.begin(), zero.label.end(), [](float x) { return x == 0.0f; }));

  const FpiSample one = interpolate(a, b, patch, 1.0, AlphaMode::kContinuous);
  for (int j = 0; j < 16; ++j) {
    for (int i = 0; i < 16; ++i) {
      const bool in = patch.bounds.contains(j, i);
      CHECK(one.input.at(j, i) == (in ? 0.6f : 0.2f));
      CHECK(one.label[static_cast<std::size_t>(j * 16 + i)] == (in ? 1.0f : 0.0f));
    }
  }

  const SliceImage same = filled(16, 0.3f, "c");
  const FpiSample eq = interpolate(same, same, patch, 0.7, AlphaMode::kContinuous);
  CHECK(eq.label[8 * 16 + 8] == 0.0f);
}

TEST_CASE("interpolate modes and errors") {
  const PatchSpec patch = make_patch_spec(8, 8, 8, 16, 16);
  const SliceImage a = filled(16, 0.2f, "a");
  const SliceImage b = filled(16, 0.6f, "b");
  const FpiSample up = interpolate(a, b, patch, 0.3, AlphaMode::kContinuousRoundUp);
  CHECK(up.label[8 * 16 + 8] == 1.0f);
  CHECK(up.alpha == 0.3);
  const FpiSample disc = interpolate(a, b, patch, 0.75, AlphaMode::kDiscrete);
  CHECK(disc.label_class[8 * 16 + 8] == 3);
  CHECK(disc.label_class[0] == 0);
  CHECK_THROWS_AS(interpolate(a, b, patch, 0.3, AlphaMode::kDiscrete), UsageError);
  CHECK_THROWS_AS(interpolate(a, b, patch, 0.5, AlphaMode::kBinary), UsageError);
  CHECK_THROWS_AS(interpolate(a, b, patch, 1.5, AlphaMode::kContinuous), UsageError);
  CHECK_THROWS_AS(interpolate(a, filled(8, 0.1f, "x"), patch, 0.5, AlphaMode::kContinuous),
                  DataError);
}

TEST_CASE("blend is monotone in alpha where B > A") {
  const PatchSpec patch = make_patch_spec(8, 8, 16, 16, 16);
  SeededRng rng(8);
  const SliceImage a = props::random_slice(rng, 16, 16, "a");
  const SliceImage b = props::random_slice(rng, 16, 16, "b");
  std::vector<float> prev(a.pixels);
  for (int step = 1; step <= 20; ++step) {
    const FpiSample s = interpolate(a, b, patch, step / 20.0, AlphaMode::kContinuous);
    for (std::size_t n = 0; n < a.size(); ++n) {
      // Float rounding can flatten steps smaller than one ulp; require growth
      // wherever the gap is resolvable.
      if (b.pixels[n] - a.pixels[n] > 1e-3f) CHECK(s.input.pixels[n] > prev[n]);
    }
    prev = s.input.pixels;
  }
}

TEST_CASE("algebra invariants over 500 seeded instances") {
  const props::Outcome out = props::fpi_algebra_suite(500, 99);
  INFO(out.summary());
  CHECK(out.ok());
}

TEST_CASE("training batches") {
  std::vector<SlicePair> pairs;
  SeededRng rng(12);
  for (int k = 0; k < 3; ++k) {
    pairs.push_back({props::random_slice(rng, 32, 32, "a"), props::random_slice(rng, 32, 32, "b")});
  }
  const SeededRng batch_rng(77);
  const auto batch = make_training_batch(pairs, batch_rng, AlphaMode::kContinuous, 8);
  REQUIRE(batch.size() == 8);
  std::set<std::tuple<double, double, double>> specs;
  for (const FpiSample& s : batch) specs.insert({s.patch.center_j, s.patch.center_i, s.patch.size});
  CHECK(specs.size() == 8);

  const auto again = make_training_batch(pairs, batch_rng, AlphaMode::kContinuous, 8);
  for (std::size_t n = 0; n < 8; ++n) {
    CHECK(again[n].input.pixels == batch[n].input.pixels);
    CHECK(again[n].label == batch[n].label);
  }

  const auto bin = make_training_batch(pairs, batch_rng, AlphaMode::kBinary, 16);
  for (const FpiSample& s : bin) {
    for (float l : s.label) CHECK((l == 0.0f || l == 1.0f));
  }
  CHECK_THROWS_AS(make_training_batch({}, batch_rng, AlphaMode::kContinuous, 4), DataError);
  CHECK_THROWS_AS(make_training_batch(pairs, batch_rng, AlphaMode::kContinuous, 0), UsageError);
}

TEST_CASE("export_samples writes volumes and an index") {
  std::vector<SlicePair> pairs;
  SeededRng rng(1);
  pairs.push_back({props::random_slice(rng, 16, 16, "a"), props::random_slice(rng, 16, 16, "b")});
  const auto batch = make_training_batch(pairs, SeededRng(2), AlphaMode::kDiscrete, 3);
  TempDir dir;
  export_samples(batch, dir.path);
  CHECK(std::filesystem::exists(dir.path / "index.json"));
  const Volume in = load_volume(dir.path / "input_00001");
  CHECK(in.shape == Shape3{1, 16, 16});
  CHECK(in.voxels == batch[1].input.pixels);
  CHECK(std::filesystem::exists(dir.path / "label_00002.raw"));
}
