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

#include "fpi/testbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "fpi/error.hpp"
#include "json.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(AnomalyKind kind) {
  switch (kind) {
    case AnomalyKind::kUniformAdd:
      return "uniform-add";
    case AnomalyKind::kNoiseAdd:
      return "noise-add";
    case AnomalyKind::kSource:
      return "source";
    case AnomalyKind::kSink:
      return "sink";
    case AnomalyKind::kUniformShift:
      return "uniform-shift";
    case AnomalyKind::kReflection:
      return "reflection";
  }
  return "uniform-add";
}

AnomalyKind parse_anomaly_kind(std::string_view text) {
  for (AnomalyKind k : {AnomalyKind::kUniformAdd, AnomalyKind::kNoiseAdd, AnomalyKind::kSource,
                        AnomalyKind::kSink, AnomalyKind::kUniformShift, AnomalyKind::kReflection}) {
    if (text == to_string(k)) return k;
  }
  throw DataError("unknown anomaly kind '" + std::string(text) + "'");
}

std::string_view generator_class(AnomalyKind kind) {
  if (kind == AnomalyKind::kSink || kind == AnomalyKind::kSource) return "sink-source";
  return to_string(kind);
}

SphereAnomalySpec sample_sphere(SeededRng& rng, Shape3 shape, const TestbenchConfig& config) {
  const double d = shape[2];
  SphereAnomalySpec spec;
  spec.diameter = rng.uniform(config.diameter_min_frac * d, config.diameter_max_frac * d);
  const double r = spec.radius();
  for (int axis = 0; axis < 3; ++axis) {
    const double lo = r + config.margin;
    const double hi = shape[static_cast<std::size_t>(axis)] - 1.0 - r - config.margin;
    if (hi < lo) {
      throw DataError("sphere of diameter " + std::to_string(spec.diameter) +
                      " does not fit volume axis " + std::to_string(axis));
    }
    spec.center[static_cast<std::size_t>(axis)] = rng.uniform(lo, hi);
  }
  switch (rng.uniform_int(5)) {
    case 0:
      spec.kind = AnomalyKind::kUniformAdd;
      break;
    case 1:
      spec.kind = AnomalyKind::kNoiseAdd;
      break;
    case 2:
      spec.kind = rng.coin() ? AnomalyKind::kSource : AnomalyKind::kSink;
      break;
    case 3:
      spec.kind = AnomalyKind::kUniformShift;
      break;
    default:
      spec.kind = AnomalyKind::kReflection;
      break;
  }
  spec.intensity = rng.normal();
  spec.noise_seed = rng.next_u64();
  for (double& s : spec.shift) {
    const double magnitude = rng.uniform(config.shift_min_frac * d, config.shift_max_frac * d);
    s = rng.coin() ? magnitude : -magnitude;
  }
  spec.reflection_axis = 1;
  return spec;
}

namespace {

// Calls fn(k, j, i, offset) for every voxel of the sphere, in memory order.
template <typename Fn>
void for_each_in_sphere(Shape3 shape, const SphereAnomalySpec& spec, Fn&& fn) {
  const double r = spec.radius();
  const double r2 = r * r;
  std::array<int, 3> lo{}, hi{};
  for (std::size_t a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::floor(spec.center[a] - r)));
    hi[a] = std::min(shape[a] - 1, static_cast<int>(std::ceil(spec.center[a] + r)));
  }
  for (int k = lo[0]; k <= hi[0]; ++k) {
    const double dk = k - spec.center[0];
    for (int j = lo[1]; j <= hi[1]; ++j) {
      const double dj = j - spec.center[1];
      for (int i = lo[2]; i <= hi[2]; ++i) {
        const double di = i - spec.center[2];
        if (dk * dk + dj * dj + di * di <= r2) {
          fn(k, j, i, (static_cast<std::size_t>(k) * shape[1] + j) * shape[2] + i);
        }
      }
    }
  }
}

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

TestCase start_case(const Volume& v, const SphereAnomalySpec& spec) {
  TestCase tc;
  tc.id = v.id;
  tc.volume = v;
  tc.mask = sphere_mask(v.shape, spec);
  tc.subject_label = 1;
  tc.spec = spec;
  return tc;
}

void expect_kind(const SphereAnomalySpec& spec, std::initializer_list<AnomalyKind> kinds,
                 const char* generator) {
  if (std::find(kinds.begin(), kinds.end(), spec.kind) == kinds.end()) {
    throw UsageError(std::string(generator) + ": spec kind is " + std::string(to_string(spec.kind)));
  }
}

}  // namespace

std::vector<std::uint8_t> sphere_mask(Shape3 shape, const SphereAnomalySpec& spec) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(shape[0]) * shape[1] * shape[2], 0);
  for_each_in_sphere(shape, spec, [&](int, int, int, std::size_t n) { mask[n] = 1; });
  return mask;
}

double sample_trilinear(const Volume& v, double k, double j, double i) {
  const std::array<double, 3> pos{std::clamp(k, 0.0, v.shape[0] - 1.0),
                                  std::clamp(j, 0.0, v.shape[1] - 1.0),
                                  std::clamp(i, 0.0, v.shape[2] - 1.0)};
  std::array<int, 3> base{};
  std::array<double, 3> frac{};
  for (std::size_t a = 0; a < 3; ++a) {
    base[a] = std::min(static_cast<int>(std::floor(pos[a])), v.shape[a] - 1);
    frac[a] = pos[a] - base[a];
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::array<int, 3> idx{};
    for (std::size_t a = 0; a < 3; ++a) {
      const bool upper = (corner >> a) & 1;
      w *= upper ? frac[a] : 1.0 - frac[a];
      idx[a] = std::min(base[a] + (upper ? 1 : 0), v.shape[a] - 1);
    }
    if (w != 0.0) acc += w * v.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

TestCase apply_uniform_addition(const Volume& v, const SphereAnomalySpec& spec) {
  expect_kind(spec, {AnomalyKind::kUniformAdd}, "uniform addition");
  TestCase tc = start_case(v, spec);
  for_each_in_sphere(v.shape, spec, [&](int, int, int, std::size_t n) {
    tc.volume.voxels[n] = clip01(static_cast<double>(v.voxels[n]) + spec.intensity);
  });
  return tc;
}

TestCase apply_noise_addition(const Volume& v, const SphereAnomalySpec& spec) {
  expect_kind(spec, {AnomalyKind::kNoiseAdd}, "noise addition");
  TestCase tc = start_case(v, spec);
  SeededRng noise(spec.noise_seed);
  for_each_in_sphere(v.shape, spec, [&](int, int, int, std::size_t n) {
    tc.volume.voxels[n] = clip01(static_cast<double>(v.voxels[n]) + noise.normal());
  });
  return tc;
}

TestCase apply_sink_source(const Volume& v, const SphereAnomalySpec& spec) {
  expect_kind(spec, {AnomalyKind::kSink, AnomalyKind::kSource}, "sink/source deformation");
  TestCase tc = start_case(v, spec);
  const double r = spec.radius();
  const bool source = spec.kind == AnomalyKind::kSource;
  for_each_in_sphere(v.shape, spec, [&](int k, int j, int i, std::size_t n) {
    const std::array<double, 3> rel{k - spec.center[0], j - spec.center[1], i - spec.center[2]};
    const double dist = std::sqrt(rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]);
    const double s = (dist / r) * (dist / r);
    std::array<double, 3> src{};
    for (std::size_t a = 0; a < 3; ++a) {
      const double here = a == 0 ? k : (a == 1 ? j : i);
      src[a] = source ? spec.center[a] + s * rel[a] : here + (1.0 - s) * rel[a];
    }
    tc.volume.voxels[n] = clip01(sample_trilinear(v, src[0], src[1], src[2]));
  });
  return tc;
}

TestCase apply_uniform_shift(const Volume& v, const SphereAnomalySpec& spec) {
  expect_kind(spec, {AnomalyKind::kUniformShift}, "uniform shift");
  TestCase tc = start_case(v, spec);
  auto source_index = [&](int pos, std::size_t axis) {
    const long shifted = std::lround(pos + spec.shift[axis]);
    return static_cast<int>(std::clamp<long>(shifted, 0, v.shape[axis] - 1));
  };
  for_each_in_sphere(v.shape, spec, [&](int k, int j, int i, std::size_t n) {
    tc.volume.voxels[n] = v.at(source_index(k, 0), source_index(j, 1), source_index(i, 2));
  });
  return tc;
}

TestCase apply_reflection(const Volume& v, const SphereAnomalySpec& spec) {
  expect_kind(spec, {AnomalyKind::kReflection}, "reflection");
  if (spec.reflection_axis < 0 || spec.reflection_axis > 2) {
    throw UsageError("reflection axis must be 0, 1 or 2");
  }
  TestCase tc = start_case(v, spec);
  const auto axis = static_cast<std::size_t>(spec.reflection_axis);
  for_each_in_sphere(v.shape, spec, [&](int k, int j, int i, std::size_t n) {
    std::array<int, 3> src{k, j, i};
    src[axis] = v.shape[axis] - 1 - src[axis];
    tc.volume.voxels[n] = v.at(src[0], src[1], src[2]);
  });
  return tc;
}

TestCase apply_anomaly(const Volume& v, const SphereAnomalySpec& spec) {
  switch (spec.kind) {
    case AnomalyKind::kUniformAdd:
      return apply_uniform_addition(v, spec);
    case AnomalyKind::kNoiseAdd:
      return apply_noise_addition(v, spec);
    case AnomalyKind::kSource:
    case AnomalyKind::kSink:
      return apply_sink_source(v, spec);
    case AnomalyKind::kUniformShift:
      return apply_uniform_shift(v, spec);
    case AnomalyKind::kReflection:
      return apply_reflection(v, spec);
  }
  throw UsageError("unknown anomaly kind");
}

Testset build_testset(std::span<const Volume> anomaly_sources, std::span<const Volume> normals,
                      const SeededRng& rng, const TestbenchConfig& config) {
  if (anomaly_sources.empty()) throw DataError("testset: anomaly-source split is empty");
  if (normals.empty()) throw DataError("testset: normal split is empty");
  Testset out;
  for (std::size_t n = 0; n < anomaly_sources.size(); ++n) {
    SeededRng case_rng = rng.child(n);
    const Volume& v = anomaly_sources[n];
    out.cases.push_back(apply_anomaly(v, sample_sphere(case_rng, v.shape, config)));
  }
  for (const Volume& v : normals) {
    TestCase tc;
    tc.id = v.id;
    tc.volume = v;
    tc.mask.assign(v.size(), 0);
    tc.subject_label = 0;
    tc.has_spec = false;
    out.cases.push_back(std::move(tc));
  }
  return out;
}

namespace {

json spec_to_json(const SphereAnomalySpec& s) {
  return {{"center", s.center},         {"diameter", s.diameter},
          {"kind", to_string(s.kind)},  {"intensity", s.intensity},
          {"noise_seed", s.noise_seed}, {"shift", s.shift},
          {"reflection_axis", s.reflection_axis}};
}

}  // namespace

void save_testset(const Testset& testset, const fs::path& dir) {
  fs::create_directories(dir);
  json cases = json::array();
  std::map<std::string, int> counts;
  for (const TestCase& tc : testset.cases) {
    const std::string mask_id = tc.id + "_mask";
    save_volume(tc.volume, dir / tc.id);
    Volume mask(mask_id, tc.volume.shape);
    mask.spacing = tc.volume.spacing;
    std::transform(tc.mask.begin(), tc.mask.end(), mask.voxels.begin(),
                   [](std::uint8_t m) { return m ? 1.0f : 0.0f; });
    save_volume(mask, dir / mask_id);
    const std::string kind = tc.has_spec ? std::string(to_string(tc.spec.kind)) : "normal";
    ++counts[kind];
    json entry = {{"id", tc.id},
                  {"volume", tc.id + ".raw"},
                  {"mask", mask_id + ".raw"},
                  {"kind", kind},
                  {"subject_label", tc.subject_label}};
    if (tc.has_spec) entry["spec"] = spec_to_json(tc.spec);
    cases.push_back(std::move(entry));
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw DataError("cannot write " + (dir / "index.json").string());
  out << json{{"version", 1}, {"cases", cases}, {"counts", counts}}.dump(2) << '\n';
}

std::vector<TestsetEntry> load_testset_index(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  std::ifstream in(index_path);
  if (!in) throw DataError("missing testset index " + index_path.string());
  std::vector<TestsetEntry> entries;
  try {
    const json doc = json::parse(in);
    for (const auto& c : doc.at("cases")) {
      entries.push_back({c.at("id").get<std::string>(), dir / c.at("volume").get<std::string>(),
                         dir / c.at("mask").get<std::string>(), c.at("kind").get<std::string>(),
                         c.at("subject_label").get<int>()});
    }
  } catch (const json::exception& e) {
    throw DataError("malformed testset index " + index_path.string() + ": " + e.what());
  }
  return entries;
}

}  // namespace fpi
