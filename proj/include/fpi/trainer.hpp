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

// Training loops: Adam over freshly synthesized batches, and a weight
// averaging phase run with plain gradient descent.

#ifndef FPI_TRAINER_HPP_
#define FPI_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fpi/dataset.hpp"
#include "fpi/fpi_synth.hpp"
#include "fpi/volume.hpp"
#include "fpi/wrnet.hpp"
#include "json.hpp"

namespace fpi {

struct SwaConfig {
  int epochs = 10;
  double lr_high = 1e-3;
  double lr_low = 1e-4;
  // Only "linear" (decay from lr_high to lr_low within every epoch).
  std::string cycle = "linear";
};

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 1e-3;
  int batch_size = 16;
  AlphaMode mode = AlphaMode::kContinuous;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  SwaConfig swa;
  // >1 synthesizes the next batch on a second thread. Results do not depend
  // on this setting.
  int threads = 1;

  // Throws UsageError.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Adam state. Moments are kept in double regardless of the parameter type.
struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
OptimState make_optim_state(const ModelParams<T>& params, const TrainConfig& config);

// One bias-corrected Adam update of every trainable tensor.
template <typename T>
void adam_step(ModelParams<T>& params, const Gradients<T>& grads, OptimState& state, double lr);

// params -= lr * grads on trainable tensors.
template <typename T>
void sgd_step(ModelParams<T>& params, const Gradients<T>& grads, double lr);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::size_t samples = 0;
};

// The deterministic part of an epoch record: {epoch, mean_loss, lr}.
nlohmann::json to_json(const EpochRecord& record);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Slice pairs and batch draws for one epoch, shared by both loops. Batch b
// holds samples [b * batch_size, ...) of the epoch's shuffled pairs, the
// last batch possibly short.
struct EpochPlan {
  std::vector<SlicePair> pairs;
  SeededRng batch_rng{0};
  int batch_size = 16;

  std::size_t batch_count() const;
  std::vector<FpiSample> batch(std::size_t index, AlphaMode mode) const;
};

// Epoch e (0-based) of the stream `stream` draws from SeededRng(seed)
// .child(stream).child(e): child 0 seeds the pairing, child 1 the batches.
EpochPlan plan_epoch(std::span<const Volume> volumes, std::uint64_t seed, std::uint64_t stream,
                     int epoch, int batch_size);

// Stacks samples into an N x 1 x H x W tensor and the matching targets.
void batch_tensors(std::span<const FpiSample> samples, Tensor<float>& input,
                   LossTargets& targets);

// Trains `params` in place for config.epochs epochs. Throws NumericError
// naming the epoch and batch on a non-finite loss.
std::vector<EpochRecord> train(const WideResNet<float>& net, ModelParams<float>& params,
                               std::span<const Volume> volumes, const TrainConfig& config,
                               const EpochCallback& on_epoch = {});

struct SwaResult {
  ModelParams<float> averaged;
  std::vector<ModelParams<float>> snapshots;
  std::vector<double> lr_trace;  // one entry per optimization step
  std::vector<EpochRecord> epochs;
};

// Learning rate of step `step` out of `steps` in an epoch: linear from high
// at the first step to low at the last.
double swa_learning_rate(const SwaConfig& config, std::size_t step, std::size_t steps);

// Elementwise mean of the snapshots, accumulated in double.
ModelParams<float> average_params(std::span<const ModelParams<float>> snapshots);

// Re-estimates every running statistic over one pass of the training data
// as the mean of its batch statistics.
void refresh_statistics(const WideResNet<float>& net, ModelParams<float>& params,
                        std::span<const Volume> volumes, const TrainConfig& config);

// Runs config.swa.epochs epochs of gradient descent from `start`, keeps a
// snapshot at the end of every epoch (the learning-rate minimum), averages
// the snapshots and refreshes the normalization statistics.
SwaResult swa_finetune(const WideResNet<float>& net, const ModelParams<float>& start,
                       std::span<const Volume> volumes, const TrainConfig& config,
                       const EpochCallback& on_epoch = {});

}  // namespace fpi

#endif  // FPI_TRAINER_HPP_
