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

#include "fpi/fpi_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fpi/error.hpp"
#include "json.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

PatchSpec make_patch_spec(double center_j, double center_i, double size, int height,
                          int width) {
  PatchSpec p{center_j, center_i, size, {}};
  const double half = size / 2.0;
  auto edge = [](double v, int hi) {
    return static_cast<int>(std::clamp<long>(std::lround(v), 0, hi));
  };
  p.bounds.j0 = edge(center_j - half, height);
  p.bounds.j1 = edge(center_j + half, height);
  p.bounds.i0 = edge(center_i - half, width);
  p.bounds.i1 = edge(center_i + half, width);
  if (p.bounds.j1 <= p.bounds.j0) {
    if (p.bounds.j0 >= height) --p.bounds.j0;
    p.bounds.j1 = p.bounds.j0 + 1;
  }
  if (p.bounds.i1 <= p.bounds.i0) {
    if (p.bounds.i0 >= width) --p.bounds.i0;
    p.bounds.i1 = p.bounds.i0 + 1;
  }
  return p;
}

PatchSpec sample_patch_spec(SeededRng& rng, int height, int width) {
  if (height < 16 || width < 16) throw UsageError("patch sampling needs images of at least 16 px");
  const double d = width;
  const double size = rng.uniform(0.1 * d, 0.4 * d);
  const double cj = rng.uniform(0.1 * height, 0.9 * height);
  const double ci = rng.uniform(0.1 * d, 0.9 * d);
  return make_patch_spec(cj, ci, size, height, width);
}

PatchSpec sample_patch_spec(SeededRng& rng, int d) { return sample_patch_spec(rng, d, d); }

std::string_view to_string(AlphaMode mode) {
  switch (mode) {
    case AlphaMode::kContinuous:
      return "continuous";
    case AlphaMode::kDiscrete:
      return "discrete";
    case AlphaMode::kBinary:
      return "binary";
    case AlphaMode::kContinuousRoundUp:
      return "continuous-round-up";
  }
  return "continuous";
}

AlphaMode parse_alpha_mode(std::string_view text) {
  for (AlphaMode m : {AlphaMode::kContinuous, AlphaMode::kDiscrete, AlphaMode::kBinary,
                      AlphaMode::kContinuousRoundUp}) {
    if (text == to_string(m)) return m;
  }
  throw UsageError("unknown alpha mode '" + std::string(text) +
                   "' (expected continuous, discrete, binary or continuous-round-up)");
}

double sample_alpha(SeededRng& rng, AlphaMode mode) {
  switch (mode) {
    case AlphaMode::kDiscrete:
      return kDiscreteAlphas[rng.uniform_int(kDiscreteAlphas.size())];
    case AlphaMode::kBinary:
      return rng.coin() ? 1.0 : 0.0;
    case AlphaMode::kContinuous:
    case AlphaMode::kContinuousRoundUp:
      break;
  }
  return rng.uniform();
}

namespace {

int discrete_class(double alpha) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (alpha == kDiscreteAlphas[static_cast<std::size_t>(c)]) return c;
  }
  throw UsageError("discrete mode requires alpha in {0, 0.25, 0.5, 0.75, 1}, got " +
                   std::to_string(alpha));
}

}  // namespace

FpiSample interpolate(const SliceImage& a, const SliceImage& b, const PatchSpec& patch,
                      double alpha, AlphaMode mode) {
  if (a.height != b.height || a.width != b.width) {
    throw DataError("interpolate: slice shapes differ");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw UsageError("interpolate: alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (mode == AlphaMode::kBinary && alpha != 0.0 && alpha != 1.0) {
    throw UsageError("binary mode requires alpha in {0, 1}");
  }
  const int label_class = mode == AlphaMode::kDiscrete ? discrete_class(alpha) : 0;
  const double label_value =
      mode == AlphaMode::kContinuousRoundUp ? (alpha > 0.0 ? 1.0 : 0.0) : alpha;

  FpiSample s;
  s.input = a;
  s.alpha = alpha;
  s.mode = mode;
  s.patch = patch;
  s.source_a = a.source.volume_id;
  s.source_b = b.source.volume_id;
  s.label.assign(a.size(), 0.0f);
  if (mode == AlphaMode::kDiscrete) s.label_class.assign(a.size(), 0);

  const PixelRect& r = patch.bounds;
  for (int j = std::max(0, r.j0); j < std::min(a.height, r.j1); ++j) {
    for (int i = std::max(0, r.i0); i < std::min(a.width, r.i1); ++i) {
      const std::size_t n = static_cast<std::size_t>(j) * a.width + i;
      const float av = a.pixels[n];
      const float bv = b.pixels[n];
      const auto blended = static_cast<float>((1.0 - alpha) * av + alpha * bv);
      s.input.pixels[n] = blended;
      if (av != bv && blended != av) {
        s.label[n] = static_cast<float>(label_value);
        if (mode == AlphaMode::kDiscrete) s.label_class[n] = static_cast<std::uint8_t>(label_class);
      }
    }
  }
  return s;
}

std::vector<FpiSample> make_training_batch(std::span<const SlicePair> pairs,
                                           const SeededRng& rng, AlphaMode mode,
                                           int batch_size) {
  if (pairs.empty()) throw DataError("make_training_batch: no slice pairs");
  if (batch_size < 1) throw UsageError("batch size must be at least 1");
  std::vector<FpiSample> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int s = 0; s < batch_size; ++s) {
    const SlicePair& pair = pairs[static_cast<std::size_t>(s) % pairs.size()];
    SeededRng draw = rng.child(static_cast<std::uint64_t>(s));
    const PatchSpec patch = sample_patch_spec(draw, pair.a.height, pair.a.width);
    const double alpha = sample_alpha(draw, mode);
    batch.push_back(interpolate(pair.a, pair.b, patch, alpha, mode));
  }
  return batch;
}

void export_samples(std::span<const FpiSample> samples, const fs::path& dir) {
  fs::create_directories(dir);
  json index = json::array();
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const FpiSample& s = samples[n];
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%05zu", n);
    const std::string input_name = std::string("input_") + stem;
    const std::string label_name = std::string("label_") + stem;

    Volume input(input_name, {1, s.input.height, s.input.width});
    input.voxels = s.input.pixels;
    Volume label(label_name, {1, s.input.height, s.input.width});
    label.voxels = s.label;
    save_volume(input, dir / input_name);
    save_volume(label, dir / label_name);

    const PixelRect& r = s.patch.bounds;
    index.push_back({{"id", stem},
                     {"input", input_name + ".raw"},
                     {"label", label_name + ".raw"},
                     {"mode", std::string(to_string(s.mode))},
                     {"alpha", s.alpha},
                     {"patch",
                      {{"center", {s.patch.center_j, s.patch.center_i}},
                       {"size", s.patch.size},
                       {"bounds", {r.j0, r.i0, r.j1, r.i1}}}},
                     {"sources", {s.source_a, s.source_b}},
                     {"slice_index", s.input.source.index}});
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw DataError("cannot write " + (dir / "index.json").string());
  out << json{{"version", 1}, {"samples", index}}.dump(2) << '\n';
}

}  // namespace fpi
