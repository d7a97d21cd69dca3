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

// Foreign patch interpolation: training samples built by blending a square
// patch of one slice with the same region of a slice from another subject,
// labelled per pixel with the interpolation factor.

#ifndef FPI_FPI_SYNTH_HPP_
#define FPI_FPI_SYNTH_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpi/dataset.hpp"
#include "fpi/rng.hpp"
#include "fpi/volume.hpp"

namespace fpi {

// Half-open pixel rectangle [j0, j1) x [i0, i1).
struct PixelRect {
  int j0 = 0, i0 = 0, j1 = 0, i1 = 0;
  bool contains(int j, int i) const { return j >= j0 && j < j1 && i >= i0 && i < i1; }
  long area() const { return static_cast<long>(j1 - j0) * (i1 - i0); }
};

struct PatchSpec {
  double center_j = 0.0;  // h_c, pixels
  double center_i = 0.0;
  double size = 0.0;      // h_s, pixels
  PixelRect bounds;
};

// Square patch of side `size` centred at (center_j, center_i); the edges are
// rounded to integers and clipped to the image.
PatchSpec make_patch_spec(double center_j, double center_i, double size, int height,
                          int width);

// h_s ~ U(0.1d, 0.4d), each centre coordinate ~ U(0.1d, 0.9d).
PatchSpec sample_patch_spec(SeededRng& rng, int d);
PatchSpec sample_patch_spec(SeededRng& rng, int height, int width);

enum class AlphaMode { kContinuous, kDiscrete, kBinary, kContinuousRoundUp };

inline constexpr std::array<double, 5> kDiscreteAlphas{0.0, 0.25, 0.5, 0.75, 1.0};
inline constexpr int kNumClasses = static_cast<int>(kDiscreteAlphas.size());

std::string_view to_string(AlphaMode mode);
AlphaMode parse_alpha_mode(std::string_view text);

// Discrete mode trains a 5-way softmax head, every other mode a sigmoid.
inline bool uses_softmax(AlphaMode mode) { return mode == AlphaMode::kDiscrete; }

double sample_alpha(SeededRng& rng, AlphaMode mode);

struct FpiSample {
  SliceImage input;  // A'
  // Per-pixel training target as an interpolation factor. Round-up mode
  // stores 1 wherever the drawn alpha was positive.
  std::vector<float> label;
  // Discrete mode only: index into kDiscreteAlphas per pixel.
  std::vector<std::uint8_t> label_class;
  double alpha = 0.0;
  AlphaMode mode = AlphaMode::kContinuous;
  PatchSpec patch;
  std::string source_a;
  std::string source_b;
};

// A'_i = (1 - alpha) A_i + alpha B_i inside the patch, A'_i = A_i outside.
// The label is alpha where the pixel lies in the patch, A_i != B_i and the
// blended pixel differs from A_i; zero everywhere else.
FpiSample interpolate(const SliceImage& a, const SliceImage& b, const PatchSpec& patch,
                      double alpha, AlphaMode mode);

// One independent (patch, alpha) draw per sample; sample s uses
// pairs[s % pairs.size()] and the child stream rng.child(s).
std::vector<FpiSample> make_training_batch(std::span<const SlicePair> pairs,
                                           const SeededRng& rng, AlphaMode mode,
                                           int batch_size);

// Writes input_NNNNN / label_NNNNN volumes (depth 1) and index.json.
void export_samples(std::span<const FpiSample> samples, const std::filesystem::path& dir);

}  // namespace fpi

#endif  // FPI_FPI_SYNTH_HPP_
