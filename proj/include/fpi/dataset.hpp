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

#ifndef FPI_DATASET_HPP_
#define FPI_DATASET_HPP_

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpi/rng.hpp"
#include "fpi/volume.hpp"

namespace fpi {

enum class Split { kTrain, kTestNormal, kTestAnomalySource };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct SplitFractions {
  double train = 0.6;
  double test_normal = 0.1;
  double test_anomaly_source = 0.3;
};

struct ManifestEntry {
  std::string id;
  // Relative paths are resolved against the manifest's directory.
  std::filesystem::path path;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  SplitFractions fractions;
  // Directory the manifest was loaded from; empty for in-memory manifests.
  std::filesystem::path base_dir;

  std::vector<const ManifestEntry*> select(Split split) const;
  std::filesystem::path resolve(const ManifestEntry& entry) const;
  // Throws DataError on duplicate ids or paths (splits must be disjoint).
  void validate() const;
};

// Shuffles (id, path) items with the seed and assigns splits by rounding the
// fractions: round(n*train) train, round(n*test_normal) normal, rest anomaly.
DatasetManifest make_manifest(std::vector<ManifestEntry> items, SplitFractions fractions,
                              std::uint64_t seed);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Loads and min-max normalizes every volume of a split.
std::vector<Volume> load_split(const DatasetManifest& manifest, Split split);

struct SlicePair {
  SliceImage a;
  SliceImage b;
};

// Pairs the training volumes for one epoch. Volumes are shuffled with the
// epoch seed and paired consecutively (an odd leftover is paired with the
// first volume of the permutation); each volume pair contributes
// (A[k], B[k]) for every axis-0 index k both volumes share. The resulting
// slice pairs are shuffled again with the same seed.
std::vector<SlicePair> pair_slices(std::span<const Volume> volumes,
                                   std::uint64_t epoch_seed);

// The volume-level pairing pair_slices uses, as indices into `volumes`.
std::vector<std::pair<std::size_t, std::size_t>> pair_volumes(std::size_t count,
                                                              std::uint64_t epoch_seed);

// Procedural anatomy-like volume: dark background, a large bright ellipsoid
// body and 2-4 interior ellipsoids jittered per subject in position (<=5% of
// d), size (<=10%) and intensity (<=10%). Values lie in [0, 1] and the
// background is exactly zero.
Volume generate_phantom(SeededRng rng, Shape3 shape, std::string id = "phantom");

}  // namespace fpi

#endif  // FPI_DATASET_HPP_
