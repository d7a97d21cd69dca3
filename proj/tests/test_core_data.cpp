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
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "fpi/dataset.hpp"
#include "fpi/error.hpp"
#include "fpi/rng.hpp"
#include "fpi/volume.hpp"
#include "test_util.hpp"

using namespace fpi;

TEST_CASE("splitmix64 and xoshiro256** match reference values") {
  // Reference values from an independent big-integer implementation.
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xE220A8397B1DCDAFULL);
  SeededRng r(42);
  CHECK(r.next_u64() == 0x15780B2E0C2EC716ULL);
  CHECK(r.next_u64() == 0x6104D9866D113A7EULL);
  CHECK(r.next_u64() == 0xAE17533239E499A1ULL);
  CHECK(r.next_u64() == 0xECB8AD4703B360A1ULL);
  CHECK(r.uniform() == 0.9918039142821028);
  SeededRng c = SeededRng(42).child(3);
  CHECK(c.seed() == 0x602B665033F3B406ULL);
  CHECK(c.next_u64() == 0xCC38554B43D5E7B1ULL);
  CHECK(SeededRng::kAlgorithm == "xoshiro256**/splitmix64");
}

TEST_CASE("child streams depend only on seed and index") {
  SeededRng a(9), b(9);
  for (int n = 0; n < 5; ++n) a.next_u64();
  CHECK(a.child(4).seed() == b.child(4).seed());
  CHECK(a.child(4).seed() != a.child(5).seed());
}

TEST_CASE("uniform_int is unbiased and in range") {
  SeededRng r(5);
  std::array<int, 7> counts{};
  const int n = 70000;
  for (int k = 0; k < n; ++k) {
    const auto v = r.uniform_int(7);
    REQUIRE(v < 7);
    ++counts[v];
  }
  const double expect = n / 7.0, sigma = std::sqrt(n * (1.0 / 7) * (6.0 / 7));
  for (int c : counts) CHECK(std::abs(c - expect) < 4 * sigma);
}

TEST_CASE("normal draws have unit moments") {
  SeededRng r(11);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int k = 0; k < n; ++k) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("load_volume of an all-zero 8^3 file") {
  TempDir dir;
  Volume v("zeros", {8, 8, 8});
  save_volume(v, dir.path / "zeros");
  const Volume back = load_volume(dir.path / "zeros.raw");
  CHECK(back.size() == 512);
  CHECK(std::all_of(back.voxels.begin(), back.voxels.end(), [](float x) { return x == 0.0f; }));
  CHECK(back.shape == Shape3{8, 8, 8});
  CHECK(back.id == "zeros");
}

TEST_CASE("sidecar declaring 16^3 over a 512-float payload is rejected") {
  TempDir dir;
  save_volume(Volume("v", {8, 8, 8}), dir.path / "v");
  std::ofstream(dir.path / "v.json")
      << R"({"id":"v","shape":[16,16,16],"dtype":"float32","spacing":[1,1,1]})";
  CHECK_THROWS_AS(load_volume(dir.path / "v"), DataError);
}

TEST_CASE("missing sidecar and non-finite payload are data errors") {
  TempDir dir;
  save_volume(Volume("v", {8, 8, 8}), dir.path / "v");
  std::filesystem::remove(dir.path / "v.json");
  CHECK_THROWS_AS(load_volume(dir.path / "v"), DataError);

  Volume bad("nan", {8, 8, 8});
  save_volume(bad, dir.path / "nan");
  {
    std::fstream f(dir.path / "nan.raw", std::ios::in | std::ios::out | std::ios::binary);
    const float q = std::numeric_limits<float>::quiet_NaN();
    f.seekp(40);
    f.write(reinterpret_cast<const char*>(&q), sizeof(q));
  }
  CHECK_THROWS_AS(load_volume(dir.path / "nan"), DataError);
}

TEST_CASE("save/load round trip is byte identical") {
  TempDir dir;
  Volume v("rt", {32, 32, 32});
  SeededRng r(3);
  for (float& x : v.voxels) x = static_cast<float>(r.normal() * 100.0);
  v.spacing = {0.5, 1.25, 2.0};
  save_volume(v, dir.path / "rt");
  const Volume back = load_volume(dir.path / "rt");
  REQUIRE(back.voxels.size() == v.voxels.size());
  CHECK(std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * 4) == 0);
  CHECK(back.spacing == v.spacing);
  // The payload is little-endian float32 in C order.
  const auto bytes = read_bytes(dir.path / "rt.raw");
  REQUIRE(bytes.size() == v.size() * 4);
  std::uint32_t first = 0;
  for (int b = 3; b >= 0; --b) first = (first << 8) | static_cast<unsigned char>(bytes[b]);
  float f0;
  std::memcpy(&f0, &first, 4);
  CHECK(f0 == v.voxels[0]);
}

TEST_CASE("normalize examples") {
  Volume v("n", {1, 1, 3});
  v.voxels = {2.0f, 4.0f, 6.0f};
  const Volume n = normalize(v);
  CHECK(n.voxels == std::vector<float>{0.0f, 0.5f, 1.0f});
  Volume c("c", {8, 8, 8}, 7.0f);
  const Volume z = normalize(c);
  CHECK(std::all_of(z.voxels.begin(), z.voxels.end(), [](float x) { return x == 0.0f; }));
}

TEST_CASE("normalize is idempotent and bounded over 100 seeded volumes") {
  for (int s = 0; s < 100; ++s) {
    SeededRng r(static_cast<std::uint64_t>(s));
    Volume v("v", {8, 8, 8});
    const double scale = std::exp(r.uniform(-5, 5));
    for (float& x : v.voxels) x = static_cast<float>(r.normal() * scale + r.uniform(-50, 50));
    const Volume a = normalize(v);
    const Volume b = normalize(a);
    CHECK(a.voxels == b.voxels);
    CHECK(*std::min_element(a.voxels.begin(), a.voxels.end()) == 0.0f);
    CHECK(*std::max_element(a.voxels.begin(), a.voxels.end()) == 1.0f);
  }
}

TEST_CASE("extract_slice") {
  Volume v("s", {8, 8, 8});
  std::iota(v.voxels.begin(), v.voxels.end(), 0.0f);
  const SliceImage s = extract_slice(v, 0, 0);
  CHECK(s.height == 8);
  CHECK(s.width == 8);
  CHECK(std::equal(s.pixels.begin(), s.pixels.end(), v.voxels.begin()));
  CHECK(s.source.volume_id == "s");
  CHECK_THROWS_AS(extract_slice(v, 0, 8), Error);
  CHECK_THROWS_AS(extract_slice(v, 3, 0), Error);

  // Reassembling every axis-0 slice gives back the volume.
  Volume re("re", v.shape);
  for (int k = 0; k < 8; ++k) {
    const SliceImage sl = extract_slice(v, 0, k);
    std::copy(sl.pixels.begin(), sl.pixels.end(), re.voxels.begin() + k * 64);
  }
  CHECK(re.voxels == v.voxels);

  // Other axes index the remaining two dimensions in order.
  const SliceImage s1 = extract_slice(v, 1, 3);
  CHECK(s1.at(2, 5) == v.at(2, 3, 5));
  const SliceImage s2 = extract_slice(v, 2, 6);
  CHECK(s2.at(4, 1) == v.at(4, 1, 6));
}

namespace {

std::vector<Volume> depth_volumes(int n, int depth) {
  std::vector<Volume> vs;
  for (int k = 0; k < n; ++k) {
    Volume v("v" + std::to_string(k), {depth, 16, 16});
    for (int d = 0; d < depth; ++d)
      for (int p = 0; p < 256; ++p) v.voxels[static_cast<std::size_t>(d * 256 + p)] = k * 100.0f + d;
    vs.push_back(v);
  }
  return vs;
}

}  // namespace

TEST_CASE("pair_slices: two volumes of depth 4 give (A[k], B[k])") {
  const auto vs = depth_volumes(2, 4);
  const auto pairs = pair_slices(vs, 1);
  REQUIRE(pairs.size() == 4);
  std::set<int> ks;
  for (const SlicePair& p : pairs) {
    CHECK(p.a.source.index == p.b.source.index);
    CHECK(p.a.source.volume_id != p.b.source.volume_id);
    // Pixel values encode (volume, depth).
    const float a_off = p.a.source.volume_id == "v1" ? 100.0f : 0.0f;
    const float b_off = p.b.source.volume_id == "v1" ? 100.0f : 0.0f;
    CHECK(p.a.pixels[0] == a_off + p.a.source.index);
    CHECK(p.b.pixels[0] == b_off + p.a.source.index);
    ks.insert(p.a.source.index);
  }
  CHECK(ks.size() == 4);
  const auto again = pair_slices(vs, 1);
  for (std::size_t n = 0; n < pairs.size(); ++n) {
    CHECK(again[n].a.pixels == pairs[n].a.pixels);
    CHECK(again[n].b.pixels == pairs[n].b.pixels);
  }
}

TEST_CASE("pair_slices needs two volumes and never self-pairs") {
  CHECK_THROWS_AS(pair_slices(depth_volumes(1, 4), 0), DataError);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (const auto& [a, b] : pair_volumes(7, seed)) CHECK(a != b);
  }
  CHECK(pair_volumes(100, 1) != pair_volumes(100, 2));
}

namespace {

// Sum over ordered pairs of C(n_p, 2), n_p = epochs in which pair p occurs.
template <typename PairFn>
double repeat_statistic(int volumes, int epochs, PairFn&& pairs_for_epoch) {
  std::map<std::pair<std::size_t, std::size_t>, int> seen;
  for (int e = 0; e < epochs; ++e) {
    for (const auto& p : pairs_for_epoch(e)) ++seen[p];
  }
  double c = 0;
  for (const auto& [p, n] : seen) c += n * (n - 1) / 2.0;
  (void)volumes;
  return c;
}

}  // namespace

TEST_CASE("pairing repeats across 50 epochs match a uniform shuffle") {
  constexpr int kVolumes = 100, kEpochs = 50;
  // Reference distribution from an independent shuffler.
  std::mt19937_64 ref(12345);
  std::vector<double> ref_stats;
  for (int rep = 0; rep < 300; ++rep) {
    ref_stats.push_back(repeat_statistic(kVolumes, kEpochs, [&](int) {
      std::vector<std::size_t> order(kVolumes);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), ref);
      std::vector<std::pair<std::size_t, std::size_t>> ps;
      for (int n = 0; n + 1 < kVolumes; n += 2) ps.emplace_back(order[n], order[n + 1]);
      return ps;
    }));
  }
  const double mean = std::accumulate(ref_stats.begin(), ref_stats.end(), 0.0) / ref_stats.size();
  double var = 0;
  for (double s : ref_stats) var += (s - mean) * (s - mean);
  const double sigma = std::sqrt(var / (ref_stats.size() - 1));
  // Analytic expectation: 9900 ordered pairs * C(50, 2) * (1/198)^2.
  CHECK(mean == doctest::Approx(9900.0 * 1225.0 / (198.0 * 198.0)).epsilon(0.03));
  const double ours = repeat_statistic(kVolumes, kEpochs, [&](int e) {
    return pair_volumes(kVolumes, SeededRng(77).child(static_cast<std::uint64_t>(e)).seed());
  });
  CHECK(std::abs(ours - mean) <= 3 * sigma);
}

TEST_CASE("manifest: default fractions, disjoint splits, JSON round trip") {
  std::vector<ManifestEntry> items;
  for (int n = 0; n < 100; ++n) {
    items.push_back({"id" + std::to_string(n), "id" + std::to_string(n) + ".raw", Split::kTrain});
  }
  const DatasetManifest m = make_manifest(items, {}, 4);
  CHECK(m.select(Split::kTrain).size() == 60);
  CHECK(m.select(Split::kTestNormal).size() == 10);
  CHECK(m.select(Split::kTestAnomalySource).size() == 30);
  m.validate();
  const DatasetManifest m2 = make_manifest(items, {}, 4);
  for (std::size_t n = 0; n < m.entries.size(); ++n) {
    CHECK(m.entries[n].id == m2.entries[n].id);
    CHECK(m.entries[n].split == m2.entries[n].split);
  }

  TempDir dir;
  save_manifest(m, dir.path / "manifest.json");
  const DatasetManifest back = load_manifest(dir.path / "manifest.json");
  REQUIRE(back.entries.size() == 100);
  for (std::size_t n = 0; n < 100; ++n) {
    CHECK(back.entries[n].id == m.entries[n].id);
    CHECK(back.entries[n].split == m.entries[n].split);
  }
  CHECK(back.resolve(back.entries[0]) == dir.path / back.entries[0].path);

  DatasetManifest dup = m;
  dup.entries[1].id = dup.entries[0].id;
  CHECK_THROWS_AS(dup.validate(), DataError);
  CHECK(parse_split("test-normal") == Split::kTestNormal);
  CHECK_THROWS_AS(parse_split("validation"), Error);
}

TEST_CASE("phantoms: deterministic, bounded, distinct, background fraction") {
  const Volume a = generate_phantom(SeededRng(1), {64, 64, 64});
  const Volume a2 = generate_phantom(SeededRng(1), {64, 64, 64});
  CHECK(std::memcmp(a.voxels.data(), a2.voxels.data(), a.size() * 4) == 0);
  CHECK_THROWS_AS(generate_phantom(SeededRng(1), {15, 64, 64}), Error);

  for (int s = 0; s < 100; ++s) {
    const Volume v = generate_phantom(SeededRng(static_cast<std::uint64_t>(s)), {32, 32, 32});
    std::size_t background = 0;
    for (float x : v.voxels) {
      REQUIRE(x >= 0.0f);
      REQUIRE(x <= 1.0f);
      background += x < 0.05f;
    }
    const double frac = static_cast<double>(background) / v.size();
    CHECK(frac >= 0.30);
    CHECK(frac <= 0.70);
  }

  const Volume b = generate_phantom(SeededRng(2), {64, 64, 64});
  double diff = 0;
  std::size_t body = 0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    if (a.voxels[n] > 0.05f || b.voxels[n] > 0.05f) {
      diff += std::abs(a.voxels[n] - b.voxels[n]);
      ++body;
    }
  }
  CHECK(diff / body > 0.0);
}
