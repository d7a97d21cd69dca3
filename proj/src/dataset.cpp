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

#include "fpi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "fpi/error.hpp"
#include "json.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kTestNormal:
      return "test-normal";
    case Split::kTestAnomalySource:
      return "test-anomaly-source";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "test-normal") return Split::kTestNormal;
  if (text == "test-anomaly-source") return Split::kTestAnomalySource;
  throw DataError("unknown split tag '" + std::string(text) + "'");
}

std::vector<const ManifestEntry*> DatasetManifest::select(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const {
  if (entry.path.is_absolute() || base_dir.empty()) return entry.path;
  return base_dir / entry.path;
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  std::set<std::string> paths;
  for (const auto& e : entries) {
    if (!ids.insert(e.id).second) throw DataError("duplicate manifest id " + e.id);
    if (!paths.insert(e.path.lexically_normal().string()).second) {
      throw DataError("manifest path listed twice: " + e.path.string());
    }
  }
  const double sum = fractions.train + fractions.test_normal + fractions.test_anomaly_source;
  if (fractions.train < 0 || fractions.test_normal < 0 ||
      fractions.test_anomaly_source < 0 || std::abs(sum - 1.0) > 1e-9) {
    throw DataError("split fractions must be non-negative and sum to 1");
  }
}

DatasetManifest make_manifest(std::vector<ManifestEntry> items, SplitFractions fractions,
                              std::uint64_t seed) {
  SeededRng rng(seed);
  rng.shuffle(std::span(items));
  const auto n = static_cast<double>(items.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * fractions.train));
  const auto n_normal = std::min(items.size() - std::min(items.size(), n_train),
                                 static_cast<std::size_t>(std::llround(n * fractions.test_normal)));
  for (std::size_t idx = 0; idx < items.size(); ++idx) {
    if (idx < n_train) {
      items[idx].split = Split::kTrain;
    } else if (idx < n_train + n_normal) {
      items[idx].split = Split::kTestNormal;
    } else {
      items[idx].split = Split::kTestAnomalySource;
    }
  }
  DatasetManifest manifest{std::move(items), fractions, {}};
  manifest.validate();
  return manifest;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest manifest;
  try {
    const json doc = json::parse(in);
    if (doc.contains("fractions")) {
      const auto& f = doc.at("fractions");
      manifest.fractions = {f.at("train").get<double>(), f.at("test-normal").get<double>(),
                            f.at("test-anomaly-source").get<double>()};
    }
    for (const auto& e : doc.at("entries")) {
      manifest.entries.push_back({e.at("id").get<std::string>(),
                                  fs::path(e.at("path").get<std::string>()),
                                  parse_split(e.at("split").get<std::string>())});
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  manifest.base_dir = path.parent_path();
  manifest.validate();
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  manifest.validate();
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"id", e.id}, {"path", e.path.generic_string()},
                       {"split", std::string(to_string(e.split))}});
  }
  const json doc = {
      {"version", 1},
      {"fractions",
       {{"train", manifest.fractions.train},
        {"test-normal", manifest.fractions.test_normal},
        {"test-anomaly-source", manifest.fractions.test_anomaly_source}}},
      {"entries", entries}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << doc.dump(2) << '\n';
}

std::vector<Volume> load_split(const DatasetManifest& manifest, Split split) {
  std::vector<Volume> volumes;
  for (const ManifestEntry* e : manifest.select(split)) {
    Volume v = normalize(load_volume(manifest.resolve(*e)));
    v.id = e->id;
    volumes.push_back(std::move(v));
  }
  return volumes;
}

std::vector<std::pair<std::size_t, std::size_t>> pair_volumes(std::size_t count,
                                                              std::uint64_t epoch_seed) {
  if (count < 2) throw DataError("slice pairing needs at least two training volumes");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SeededRng rng(epoch_seed);
  rng.shuffle(std::span(order));
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t n = 0; n + 1 < count; n += 2) pairs.emplace_back(order[n], order[n + 1]);
  if (count % 2 == 1) pairs.emplace_back(order[count - 1], order[0]);
  return pairs;
}

std::vector<SlicePair> pair_slices(std::span<const Volume> volumes, std::uint64_t epoch_seed) {
  std::vector<SlicePair> out;
  for (const auto& [ia, ib] : pair_volumes(volumes.size(), epoch_seed)) {
    const Volume& a = volumes[ia];
    const Volume& b = volumes[ib];
    const int depth = std::min(a.depth(), b.depth());
    for (int k = 0; k < depth; ++k) {
      SliceImage sa = extract_slice(a, 0, k);
      SliceImage sb = extract_slice(b, 0, k);
      if (sa.height != sb.height || sa.width != sb.width) {
        throw DataError("slice size mismatch pairing " + a.id + " with " + b.id);
      }
      out.push_back({std::move(sa), std::move(sb)});
    }
  }
  SeededRng(epoch_seed).child(1).shuffle(std::span(out));
  return out;
}

namespace {

struct Blob {
  double cz, cy, cx;  // normalized [-1, 1] coordinates
  double rz, ry, rx;
  double intensity;
};

// Nominal interior layout; deliberately asymmetric along the height axis.
constexpr Blob kTemplate[] = {
    {0.00, -0.38, -0.30, 0.40, 0.26, 0.24, 0.90},
    {0.10, 0.32, 0.25, 0.34, 0.22, 0.30, 0.15},
    {-0.30, 0.05, 0.48, 0.24, 0.20, 0.18, 0.70},
    {0.35, -0.05, -0.50, 0.22, 0.18, 0.16, 0.30},
};

// Soft inside-indicator of an ellipsoid: 1 inside, 0 beyond a ramp of about
// `ramp` voxels, exactly zero far outside.
double inside(double z, double y, double x, const Blob& b, double voxel) {
  const double dz = (z - b.cz) / b.rz, dy = (y - b.cy) / b.ry, dx = (x - b.cx) / b.rx;
  const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
  const double dist = (r - 1.0) * std::min({b.rz, b.ry, b.rx}) / voxel;
  return std::clamp(0.5 - dist / 1.5, 0.0, 1.0);
}

}  // namespace

Volume generate_phantom(SeededRng rng, Shape3 shape, std::string id) {
  for (int n : shape) {
    if (n < 16) throw UsageError("phantom shape must be at least 16 per axis");
  }
  const double d = shape[2];
  // 5% of d in normalized units (the volume spans 2 units).
  const double pos_jitter = 0.05 * 2.0;
  auto jitter = [&rng](double limit) { return rng.uniform(-limit, limit); };

  Blob body{jitter(0.03), jitter(0.03), jitter(0.03), 0.88, 0.92, 0.92, 0.45};
  const double body_scale = 1.0 + jitter(0.05);
  body.rz *= body_scale * (1.0 + jitter(0.02));
  body.ry *= body_scale * (1.0 + jitter(0.02));
  body.rx *= body_scale * (1.0 + jitter(0.02));
  body.intensity *= 1.0 + jitter(0.1);

  const int count = 2 + static_cast<int>(rng.uniform_int(3));
  std::vector<Blob> blobs;
  for (int n = 0; n < count; ++n) {
    Blob b = kTemplate[n];
    b.cz += jitter(pos_jitter);
    b.cy += jitter(pos_jitter);
    b.cx += jitter(pos_jitter);
    b.rz *= 1.0 + jitter(0.1);
    b.ry *= 1.0 + jitter(0.1);
    b.rx *= 1.0 + jitter(0.1);
    b.intensity *= 1.0 + jitter(0.1);
    blobs.push_back(b);
  }

  // Low-frequency texture inside the body.
  std::array<std::array<double, 4>, 3> waves{};
  for (auto& w : waves) {
    w = {rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0),
         rng.uniform(0.0, 6.283185307179586)};
  }

  Volume volume(std::move(id), shape);
  const double voxel = 2.0 / d;
  for (int k = 0; k < shape[0]; ++k) {
    const double z = (k + 0.5) / shape[0] * 2.0 - 1.0;
    for (int j = 0; j < shape[1]; ++j) {
      const double y = (j + 0.5) / shape[1] * 2.0 - 1.0;
      for (int i = 0; i < shape[2]; ++i) {
        const double x = (i + 0.5) / shape[2] * 2.0 - 1.0;
        const double body_weight = inside(z, y, x, body, voxel);
        if (body_weight <= 0.0) continue;
        double texture = 0.0;
        for (const auto& w : waves) texture += std::sin(w[0] * z + w[1] * y + w[2] * x + w[3]);
        double value = body.intensity * (1.0 + 0.06 * texture);
        for (const Blob& b : blobs) {
          const double t = inside(z, y, x, b, voxel);
          value = (1.0 - t) * value + t * b.intensity;
        }
        volume.at(k, j, i) = static_cast<float>(std::clamp(body_weight * value, 0.0, 1.0));
      }
    }
  }
  return volume;
}

}  // namespace fpi
