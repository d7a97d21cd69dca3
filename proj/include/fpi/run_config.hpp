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

// Settings of one command-line run, read from a strict JSON document:
//
// {
//   "seed": 0, "threads": 1,
//   "model": {"preset": "standard" | "desk", "input_size": 256, ...},
//   "train": {"epochs": 50, "mode": "continuous", "swa": {...}, ...},
//   "testbench": {"diameter_min_frac": 0.1, ...},
//   "scoring": {"slice": "mean", "subject": "max", "batch_size": 16},
//   "paths": {"manifest": "", "out": "", "checkpoint": "", "testset": "",
//             "scores": "", "volumes": ""}
// }
//
// Every key is optional; unknown keys are errors. The model head follows
// the training mode. The single top-level seed drives all randomness.

#ifndef FPI_RUN_CONFIG_HPP_
#define FPI_RUN_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <string>

#include "fpi/scorer.hpp"
#include "fpi/testbench.hpp"
#include "fpi/trainer.hpp"
#include "fpi/wrnet.hpp"
#include "json.hpp"

namespace fpi {

struct RunPaths {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::filesystem::path checkpoint;
  std::filesystem::path testset;
  std::filesystem::path scores;
  std::filesystem::path volumes;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  ModelConfig model;
  TrainConfig train;
  TestbenchConfig testbench;
  ScoringOptions scoring;
  RunPaths paths;
};

// Throws UsageError on unknown keys, bad types or invalid values.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
// Throws UsageError if the file cannot be read or parsed.
nlohmann::json read_json_file(const std::filesystem::path& path);

// Seed of the model initialization stream for a run seed.
std::uint64_t init_seed(std::uint64_t run_seed);

}  // namespace fpi

#endif  // FPI_RUN_CONFIG_HPP_
