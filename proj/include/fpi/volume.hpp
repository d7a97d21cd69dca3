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

#ifndef FPI_VOLUME_HPP_
#define FPI_VOLUME_HPP_

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fpi {

// (depth, height, width) in voxels; voxel (k, j, i) lives at
// (k * height + j) * width + i.
using Shape3 = std::array<int, 3>;

struct Volume {
  std::string id;
  Shape3 shape{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm, metadata only
  std::vector<float> voxels;

  Volume() = default;
  Volume(std::string id, Shape3 shape, float fill = 0.0f);

  int depth() const { return shape[0]; }
  int height() const { return shape[1]; }
  // Image width d.
  int width() const { return shape[2]; }
  std::size_t size() const { return voxels.size(); }

  std::size_t offset(int k, int j, int i) const {
    return (static_cast<std::size_t>(k) * shape[1] + j) * shape[2] + i;
  }
  float& at(int k, int j, int i) { return voxels[offset(k, j, i)]; }
  float at(int k, int j, int i) const { return voxels[offset(k, j, i)]; }
  bool contains(int k, int j, int i) const {
    return k >= 0 && j >= 0 && i >= 0 && k < shape[0] && j < shape[1] &&
           i < shape[2];
  }
};

struct SliceSource {
  std::string volume_id;
  int axis = 0;
  int index = 0;
};

struct SliceImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  SliceSource source;

  SliceImage() = default;
  SliceImage(int height, int width, float fill = 0.0f);

  std::size_t size() const { return pixels.size(); }
  float& at(int j, int i) { return pixels[static_cast<std::size_t>(j) * width + i]; }
  float at(int j, int i) const {
    return pixels[static_cast<std::size_t>(j) * width + i];
  }
};

// Files: `<stem>.raw` holds little-endian float32 voxels in C order and
// `<stem>.json` is the sidecar {"id", "shape", "dtype", "spacing"}.
// Either file path (or the bare stem) may be passed.
std::filesystem::path raw_path(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& volume, const std::filesystem::path& path);

// Min-max rescale to [0, 1]; a constant volume maps to all zeros.
Volume normalize(const Volume& volume);

SliceImage extract_slice(const Volume& volume, int axis, int index);

// Throws DataError on the first non-finite value.
void check_finite(std::span<const float> values, const std::string& what);

}  // namespace fpi

#endif  // FPI_VOLUME_HPP_
