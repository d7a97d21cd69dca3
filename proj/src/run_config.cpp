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

#include "fpi/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <string_view>

#include "fpi/error.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void require_object(const json& j, std::string_view what) {
  if (!j.is_object()) throw UsageError(std::string(what) + " must be a JSON object");
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                std::string_view what) {
  require_object(j, what);
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw UsageError("unknown " + std::string(what) + " key '" + key + "'");
    }
  }
}

ModelConfig parse_model(const json& j, Head head) {
  check_keys(j,
             {"preset", "input_size", "head", "width_factor", "stage_widths", "blocks_per_stage",
              "bn_momentum", "bn_epsilon"},
             "model");
  const std::string preset = j.value("preset", std::string("standard"));
  const int size = j.value("input_size", 256);
  ModelConfig base;
  if (preset == "standard") {
    base = ModelConfig::standard(size, head);
  } else if (preset == "desk") {
    base = ModelConfig::desk(size, head);
  } else {
    throw UsageError("unknown model preset '" + preset + "' (expected standard or desk)");
  }
  json merged = to_json(base);
  json rest = j;
  rest.erase("preset");
  merged.merge_patch(rest);
  ModelConfig c = model_config_from_json(merged);
  if (c.head != head) {
    throw UsageError("model head does not match the training mode");
  }
  return c;
}

TestbenchConfig parse_testbench(const json& j) {
  check_keys(j, {"diameter_min_frac", "diameter_max_frac", "margin", "shift_min_frac",
                 "shift_max_frac"},
             "testbench");
  TestbenchConfig c;
  c.diameter_min_frac = j.value("diameter_min_frac", c.diameter_min_frac);
  c.diameter_max_frac = j.value("diameter_max_frac", c.diameter_max_frac);
  c.margin = j.value("margin", c.margin);
  c.shift_min_frac = j.value("shift_min_frac", c.shift_min_frac);
  c.shift_max_frac = j.value("shift_max_frac", c.shift_max_frac);
  if (!(c.diameter_min_frac > 0 && c.diameter_min_frac <= c.diameter_max_frac) ||
      !(c.shift_min_frac >= 0 && c.shift_min_frac <= c.shift_max_frac) || c.margin < 0) {
    throw UsageError("inconsistent testbench ranges");
  }
  return c;
}

ScoringOptions parse_scoring(const json& j) {
  check_keys(j, {"slice", "subject", "batch_size"}, "scoring");
  ScoringOptions s;
  s.slice = parse_aggregator(j.value("slice", std::string("mean")));
  s.subject = parse_aggregator(j.value("subject", std::string("max")));
  s.batch_size = j.value("batch_size", s.batch_size);
  if (s.batch_size < 1) throw UsageError("scoring batch size must be at least 1");
  return s;
}

RunPaths parse_paths(const json& j) {
  check_keys(j, {"manifest", "out", "checkpoint", "testset", "scores", "volumes"}, "paths");
  RunPaths p;
  p.manifest = j.value("manifest", std::string());
  p.out = j.value("out", std::string());
  p.checkpoint = j.value("checkpoint", std::string());
  p.testset = j.value("testset", std::string());
  p.scores = j.value("scores", std::string());
  p.volumes = j.value("volumes", std::string());
  return p;
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  check_keys(j, {"seed", "threads", "model", "train", "testbench", "scoring", "paths"}, "config");
  RunConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
    c.threads = j.value("threads", 1);
    if (c.threads < 1) throw UsageError("threads must be at least 1");
    const json train = j.value("train", json::object());
    require_object(train, "train");
    if (train.contains("seed")) {
      throw UsageError("'train.seed' is not accepted; use the top-level seed");
    }
    c.train = train_config_from_json(train);
    c.train.seed = c.seed;
    c.train.threads = c.threads;
    const Head head = uses_softmax(c.train.mode) ? Head::kSoftmax : Head::kSigmoid;
    c.model = parse_model(j.value("model", json::object()), head);
    c.testbench = parse_testbench(j.value("testbench", json::object()));
    c.scoring = parse_scoring(j.value("scoring", json::object()));
    c.scoring.threads = c.threads;
    c.paths = parse_paths(j.value("paths", json::object()));
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad config: ") + e.what());
  }
  return c;
}

json to_json(const RunConfig& c) {
  json train = to_json(c.train);
  train.erase("seed");
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"model", to_json(c.model)},
          {"train", train},
          {"testbench",
           {{"diameter_min_frac", c.testbench.diameter_min_frac},
            {"diameter_max_frac", c.testbench.diameter_max_frac},
            {"margin", c.testbench.margin},
            {"shift_min_frac", c.testbench.shift_min_frac},
            {"shift_max_frac", c.testbench.shift_max_frac}}},
          {"scoring",
           {{"slice", std::string(to_string(c.scoring.slice))},
            {"subject", std::string(to_string(c.scoring.subject))},
            {"batch_size", c.scoring.batch_size}}},
          {"paths",
           {{"manifest", c.paths.manifest.string()},
            {"out", c.paths.out.string()},
            {"checkpoint", c.paths.checkpoint.string()},
            {"testset", c.paths.testset.string()},
            {"scores", c.paths.scores.string()},
            {"volumes", c.paths.volumes.string()}}}};
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("cannot parse " + path.string() + ": " + e.what());
  }
}

std::uint64_t init_seed(std::uint64_t run_seed) {
  // Streams 0-2 of the run seed belong to the trainer.
  return SeededRng(run_seed).child(16).seed();
}

}  // namespace fpi
