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

#include "fpi/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fpi/error.hpp"
#include "json.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::uint32_t byteswap32(std::uint32_t x) {
  return ((x & 0xFFu) << 24) | ((x & 0xFF00u) << 8) | ((x >> 8) & 0xFF00u) |
         (x >> 24);
}

fs::path stem_of(const fs::path& path) {
  const auto ext = path.extension();
  if (ext == ".raw" || ext == ".json") return fs::path(path).replace_extension();
  return path;
}

void check_shape(const Shape3& shape) {
  for (int n : shape) {
    if (n <= 0) throw DataError("volume shape components must be positive");
  }
}

}  // namespace

Volume::Volume(std::string id_, Shape3 shape_, float fill)
    : id(std::move(id_)), shape(shape_) {
  check_shape(shape);
  voxels.assign(static_cast<std::size_t>(shape[0]) * shape[1] * shape[2], fill);
}

SliceImage::SliceImage(int h, int w, float fill) : height(h), width(w) {
  pixels.assign(static_cast<std::size_t>(h) * w, fill);
}

fs::path raw_path(const fs::path& path) {
  return fs::path(stem_of(path)).concat(".raw");
}

fs::path sidecar_path(const fs::path& path) {
  return fs::path(stem_of(path)).concat(".json");
}

void check_finite(std::span<const float> values, const std::string& what) {
  for (std::size_t n = 0; n < values.size(); ++n) {
    if (!std::isfinite(values[n])) {
      throw DataError(what + ": non-finite value at element " + std::to_string(n));
    }
  }
}

Volume load_volume(const fs::path& path) {
  const fs::path meta_path = sidecar_path(path);
  const fs::path data_path = raw_path(path);
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("missing sidecar " + meta_path.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw DataError("malformed sidecar " + meta_path.string() + ": " + e.what());
  }

  Volume volume;
  try {
    if (meta.value("dtype", std::string("float32")) != "float32") {
      throw DataError("unsupported dtype in " + meta_path.string());
    }
    volume.id = meta.at("id").get<std::string>();
    const auto shape = meta.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw DataError("sidecar shape must have 3 entries");
    volume.shape = {shape[0], shape[1], shape[2]};
    if (meta.contains("spacing")) {
      const auto spacing = meta.at("spacing").get<std::vector<double>>();
      if (spacing.size() != 3) throw DataError("sidecar spacing must have 3 entries");
      volume.spacing = {spacing[0], spacing[1], spacing[2]};
    }
  } catch (const json::exception& e) {
    throw DataError("bad sidecar " + meta_path.string() + ": " + e.what());
  }
  check_shape(volume.shape);

  std::ifstream in(data_path, std::ios::binary);
  if (!in) throw DataError("missing payload " + data_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  const std::size_t count =
      static_cast<std::size_t>(volume.shape[0]) * volume.shape[1] * volume.shape[2];
  if (bytes.size() != count * sizeof(float)) {
    throw DataError("shape mismatch: sidecar declares " + std::to_string(count) +
                    " voxels but payload " + data_path.string() + " holds " +
                    std::to_string(bytes.size()) + " bytes");
  }
  volume.voxels.resize(count);
  std::memcpy(volume.voxels.data(), bytes.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : volume.voxels) {
      v = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(v)));
    }
  }
  check_finite(volume.voxels, data_path.string());
  return volume;
}

void save_volume(const Volume& volume, const fs::path& path) {
  check_shape(volume.shape);
  if (volume.voxels.size() !=
      static_cast<std::size_t>(volume.shape[0]) * volume.shape[1] * volume.shape[2]) {
    throw DataError("volume " + volume.id + ": voxel count disagrees with shape");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());

  json meta = {{"id", volume.id},
               {"shape", volume.shape},
               {"dtype", "float32"},
               {"spacing", volume.spacing}};
  std::ofstream meta_out(sidecar_path(path));
  if (!meta_out) throw DataError("cannot write " + sidecar_path(path).string());
  meta_out << meta.dump(2) << '\n';

  std::ofstream out(raw_path(path), std::ios::binary);
  if (!out) throw DataError("cannot write " + raw_path(path).string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(volume.voxels.data()),
              static_cast<std::streamsize>(volume.voxels.size() * sizeof(float)));
  } else {
    for (float v : volume.voxels) {
      const std::uint32_t le = byteswap32(std::bit_cast<std::uint32_t>(v));
      out.write(reinterpret_cast<const char*>(&le), sizeof(le));
    }
  }
  if (!out) throw DataError("write failed for " + raw_path(path).string());
}

Volume normalize(const Volume& volume) {
  check_finite(volume.voxels, "normalize(" + volume.id + ")");
  Volume out = volume;
  if (volume.voxels.empty()) return out;
  const auto [lo_it, hi_it] =
      std::minmax_element(volume.voxels.begin(), volume.voxels.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  const double range = hi - lo;
  for (float& v : out.voxels) {
    v = static_cast<float>(std::clamp((static_cast<double>(v) - lo) / range, 0.0, 1.0));
  }
  return out;
}

SliceImage extract_slice(const Volume& volume, int axis, int index) {
  if (axis < 0 || axis > 2) throw UsageError("slice axis must be 0, 1 or 2");
  if (index < 0 || index >= volume.shape[axis]) {
    throw DataError("slice index " + std::to_string(index) + " out of range for axis " +
                    std::to_string(axis) + " of extent " +
                    std::to_string(volume.shape[axis]));
  }
  const int D = volume.depth(), H = volume.height(), W = volume.width();
  SliceImage slice;
  switch (axis) {
    case 0:
      slice = SliceImage(H, W);
      std::copy_n(volume.voxels.begin() + static_cast<std::ptrdiff_t>(volume.offset(index, 0, 0)),
                  static_cast<std::ptrdiff_t>(H) * W, slice.pixels.begin());
      break;
    case 1:
      slice = SliceImage(D, W);
      for (int k = 0; k < D; ++k)
        for (int i = 0; i < W; ++i) slice.at(k, i) = volume.at(k, index, i);
      break;
    default:
      slice = SliceImage(D, H);
      for (int k = 0; k < D; ++k)
        for (int j = 0; j < H; ++j) slice.at(k, j) = volume.at(k, j, index);
      break;
  }
  slice.source = {volume.id, axis, index};
  return slice;
}

}  // namespace fpi
