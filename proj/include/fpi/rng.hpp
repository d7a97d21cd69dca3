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

#ifndef FPI_RNG_HPP_
#define FPI_RNG_HPP_

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

namespace fpi {

// One step of the splitmix64 sequence; also used as a 64-bit mixer.
std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t mix64(std::uint64_t x);

// Portable seeded generator (xoshiro256**, state filled by splitmix64).
//
// All distributions are implemented here rather than through <random>
// because the standard distributions are not specified bit-for-bit and differ
// between standard library implementations. Identical seeds therefore give
// identical sequences on every platform.
//
// Child streams: child(i) seeds a new generator with
//   mix64(seed ^ mix64(i + 0x9E3779B97F4A7C15)),
// which depends only on (seed, i), never on how many numbers the parent has
// already produced. Parallel work indexed by item is order independent.
class SeededRng {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256**/splitmix64";

  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  SeededRng child(std::uint64_t index) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer on [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller; one uniform pair per call.
  double normal();
  bool coin();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

}  // namespace fpi

#endif  // FPI_RNG_HPP_
