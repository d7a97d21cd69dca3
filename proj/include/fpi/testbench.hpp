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

// Synthetic outlier test set: a sphere inside each anomaly-source volume is
// altered by one of five generators and the sphere becomes the ground truth.

#ifndef FPI_TESTBENCH_HPP_
#define FPI_TESTBENCH_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpi/rng.hpp"
#include "fpi/volume.hpp"

namespace fpi {

enum class AnomalyKind { kUniformAdd, kNoiseAdd, kSource, kSink, kUniformShift, kReflection };

std::string_view to_string(AnomalyKind kind);
AnomalyKind parse_anomaly_kind(std::string_view text);

// Generator class used for reporting: sink and source share one class.
std::string_view generator_class(AnomalyKind kind);
inline constexpr std::array<std::string_view, 5> kGeneratorClasses{
    "uniform-add", "noise-add", "sink-source", "uniform-shift", "reflection"};

struct SphereAnomalySpec {
  std::array<double, 3> center{};  // h_c in voxel coordinates (k, j, i)
  double diameter = 0.0;           // h_s in voxels
  AnomalyKind kind = AnomalyKind::kUniformAdd;
  double intensity = 0.0;          // n of the uniform addition
  std::uint64_t noise_seed = 0;    // stream of the per-voxel n_i
  std::array<double, 3> shift{};   // (c, b, a) offsets along (k, j, i)
  int reflection_axis = 1;         // reflected axis, j by default

  double radius() const { return diameter / 2.0; }
};

struct TestbenchConfig {
  double diameter_min_frac = 0.1;
  double diameter_max_frac = 0.3;
  double margin = 2.0;  // minimum voxels between sphere and any face
  double shift_min_frac = 0.02;
  double shift_max_frac = 0.05;
};

// A single altered (or normal, passed-through) subject.
struct TestCase {
  std::string id;
  Volume volume;
  std::vector<std::uint8_t> mask;  // 1 inside the sphere; all zero for normals
  int subject_label = 1;
  bool has_spec = true;
  SphereAnomalySpec spec;
};

// Diameter ~ U(min_frac d, max_frac d) with d the volume width; centre
// uniform over positions keeping the sphere `margin` voxels inside every
// face; kind uniform over the five generator classes (sink and source each
// take half of theirs). Kind parameters are drawn here as well.
SphereAnomalySpec sample_sphere(SeededRng& rng, Shape3 shape, const TestbenchConfig& config = {});

// Voxels with ||I - h_c||_2 <= h_s / 2.
std::vector<std::uint8_t> sphere_mask(Shape3 shape, const SphereAnomalySpec& spec);

TestCase apply_uniform_addition(const Volume& v, const SphereAnomalySpec& spec);
TestCase apply_noise_addition(const Volume& v, const SphereAnomalySpec& spec);
TestCase apply_sink_source(const Volume& v, const SphereAnomalySpec& spec);
TestCase apply_uniform_shift(const Volume& v, const SphereAnomalySpec& spec);
TestCase apply_reflection(const Volume& v, const SphereAnomalySpec& spec);
// Dispatches on spec.kind.
TestCase apply_anomaly(const Volume& v, const SphereAnomalySpec& spec);

// Trilinear sample at a real-valued (k, j, i) position, clamped to the
// volume bounds.
double sample_trilinear(const Volume& v, double k, double j, double i);

struct Testset {
  std::vector<TestCase> cases;  // anomalous cases first, then normals
};

// One sphere per anomaly-source volume (case n uses rng.child(n)); normal
// volumes pass through with subject label 0 and an empty mask.
Testset build_testset(std::span<const Volume> anomaly_sources, std::span<const Volume> normals,
                      const SeededRng& rng, const TestbenchConfig& config = {});

// Layout: <id>.raw/.json, <id>_mask.raw/.json and index.json.
void save_testset(const Testset& testset, const std::filesystem::path& dir);

struct TestsetEntry {
  std::string id;
  std::filesystem::path volume;
  std::filesystem::path mask;
  std::string kind;  // "normal" for normal subjects
  int subject_label = 0;
};

std::vector<TestsetEntry> load_testset_index(const std::filesystem::path& dir);

}  // namespace fpi

#endif  // FPI_TESTBENCH_HPP_
