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

#include "fpi/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <optional>

#include "fpi/error.hpp"

namespace fpi {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kTrainStream = 0;
constexpr std::uint64_t kSwaStream = 1;
constexpr std::uint64_t kRefreshStream = 2;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw UsageError("epochs must be non-negative");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw UsageError("learning rate must be finite and non-negative");
  }
  if (batch_size < 1) throw UsageError("batch size must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw UsageError("moment decay rates must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
  if (swa.epochs < 1) throw UsageError("swa epochs must be at least 1");
  if (!(swa.lr_low > 0.0 && swa.lr_low < swa.lr_high)) {
    throw UsageError("swa learning-rate range needs 0 < low < high");
  }
  if (swa.cycle != "linear") throw UsageError("unknown swa cycle '" + swa.cycle + "'");
  if (threads < 1) throw UsageError("threads must be at least 1");
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"mode", std::string(to_string(c.mode))},
          {"seed", c.seed},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"swa",
           {{"epochs", c.swa.epochs},
            {"lr_high", c.swa.lr_high},
            {"lr_low", c.swa.lr_low},
            {"cycle", c.swa.cycle}}}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("training config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "mode") c.mode = parse_alpha_mode(value.get<std::string>());
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "epsilon") c.epsilon = value.get<double>();
      else if (key == "swa") {
        for (const auto& [k, v] : value.items()) {
          if (k == "epochs") c.swa.epochs = v.get<int>();
          else if (k == "lr_high") c.swa.lr_high = v.get<double>();
          else if (k == "lr_low") c.swa.lr_low = v.get<double>();
          else if (k == "cycle") c.swa.cycle = v.get<std::string>();
          else throw UsageError("unknown swa key '" + k + "'");
        }
      } else {
        throw UsageError("unknown training key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
OptimState make_optim_state(const ModelParams<T>& params, const TrainConfig& config) {
  OptimState s;
  s.beta1 = config.beta1;
  s.beta2 = config.beta2;
  s.epsilon = config.epsilon;
  s.m.resize(params.tensors.size());
  s.v.resize(params.tensors.size());
  for (std::size_t n = 0; n < params.tensors.size(); ++n) {
    if (!params.tensors[n].trainable) continue;
    s.m[n].assign(params.tensors[n].values.size(), 0.0);
    s.v[n].assign(params.tensors[n].values.size(), 0.0);
  }
  return s;
}

template <typename T>
void adam_step(ModelParams<T>& params, const Gradients<T>& grads, OptimState& state, double lr) {
  if (grads.size() != params.tensors.size() || state.m.size() != params.tensors.size()) {
    throw UsageError("optimizer state does not match the parameters");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t n = 0; n < params.tensors.size(); ++n) {
    auto& p = params.tensors[n];
    if (!p.trainable) continue;
    auto& m = state.m[n];
    auto& v = state.v[n];
    const auto& g = grads[n];
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.values[i] = static_cast<T>(static_cast<double>(p.values[i]) -
                                   lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

template <typename T>
void sgd_step(ModelParams<T>& params, const Gradients<T>& grads, double lr) {
  for (std::size_t n = 0; n < params.tensors.size(); ++n) {
    auto& p = params.tensors[n];
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      p.values[i] = static_cast<T>(static_cast<double>(p.values[i]) -
                                   lr * static_cast<double>(grads[n][i]));
    }
  }
}

template OptimState make_optim_state<float>(const ModelParams<float>&, const TrainConfig&);
template OptimState make_optim_state<double>(const ModelParams<double>&, const TrainConfig&);
template void adam_step<float>(ModelParams<float>&, const Gradients<float>&, OptimState&, double);
template void adam_step<double>(ModelParams<double>&, const Gradients<double>&, OptimState&,
                                double);
template void sgd_step<float>(ModelParams<float>&, const Gradients<float>&, double);
template void sgd_step<double>(ModelParams<double>&, const Gradients<double>&, double);

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"mean_loss", r.mean_loss}, {"lr", r.lr}};
}

std::size_t EpochPlan::batch_count() const {
  const auto bs = static_cast<std::size_t>(batch_size);
  return (pairs.size() + bs - 1) / bs;
}

std::vector<FpiSample> EpochPlan::batch(std::size_t index, AlphaMode mode) const {
  const auto bs = static_cast<std::size_t>(batch_size);
  const std::size_t first = index * bs;
  const std::size_t count = std::min(bs, pairs.size() - first);
  return make_training_batch(std::span(pairs).subspan(first, count), batch_rng.child(index),
                             mode, static_cast<int>(count));
}

EpochPlan plan_epoch(std::span<const Volume> volumes, std::uint64_t seed, std::uint64_t stream,
                     int epoch, int batch_size) {
  const SeededRng rng = SeededRng(seed).child(stream).child(static_cast<std::uint64_t>(epoch));
  EpochPlan plan;
  plan.pairs = pair_slices(volumes, rng.child(0).seed());
  plan.batch_rng = rng.child(1);
  plan.batch_size = batch_size;
  if (plan.pairs.empty()) throw DataError("training data yields no slice pairs");
  return plan;
}

void batch_tensors(std::span<const FpiSample> samples, Tensor<float>& input,
                   LossTargets& targets) {
  if (samples.empty()) throw UsageError("empty batch");
  const int h = samples[0].input.height, w = samples[0].input.width;
  input = Tensor<float>(static_cast<int>(samples.size()), 1, h, w);
  targets.alpha.clear();
  targets.classes.clear();
  const bool classes = !samples[0].label_class.empty();
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const FpiSample& smp = samples[s];
    if (smp.input.height != h || smp.input.width != w) {
      throw DataError("batch mixes slice sizes");
    }
    std::copy(smp.input.pixels.begin(), smp.input.pixels.end(),
              input.image(static_cast<int>(s)));
    targets.alpha.insert(targets.alpha.end(), smp.label.begin(), smp.label.end());
    if (classes) {
      targets.classes.insert(targets.classes.end(), smp.label_class.begin(),
                             smp.label_class.end());
    }
  }
}

namespace {

// Iterates an epoch's batches, synthesizing batch b + 1 on another thread
// while batch b is optimized when threads > 1.
template <typename Step>
double run_epoch(const EpochPlan& plan, AlphaMode mode, int threads, Step&& step) {
  const std::size_t batches = plan.batch_count();
  double loss_sum = 0.0;
  std::size_t seen = 0;
  std::optional<std::future<std::vector<FpiSample>>> next;
  std::vector<FpiSample> current = plan.batch(0, mode);
  Tensor<float> input;
  LossTargets targets;
  for (std::size_t b = 0; b < batches; ++b) {
    if (b > 0) current = next ? next->get() : plan.batch(b, mode);
    next.reset();
    if (threads > 1 && b + 1 < batches) {
      next = std::async(std::launch::async, [&plan, b, mode] { return plan.batch(b + 1, mode); });
    }
    batch_tensors(current, input, targets);
    double loss = 0.0;
    try {
      loss = step(b, batches, input, targets);
    } catch (const NumericError& e) {
      if (next) next->wait();
      throw NumericError(std::string(e.what()) + " at batch " + std::to_string(b));
    }
    loss_sum += loss * static_cast<double>(current.size());
    seen += current.size();
  }
  return loss_sum / static_cast<double>(seen);
}

void check_volumes(std::span<const Volume> volumes) {
  if (volumes.empty()) throw DataError("training split is empty");
}

}  // namespace

std::vector<EpochRecord> train(const WideResNet<float>& net, ModelParams<float>& params,
                               std::span<const Volume> volumes, const TrainConfig& config,
                               const EpochCallback& on_epoch) {
  config.validate();
  check_volumes(volumes);
  if (uses_softmax(config.mode) != (net.config().head == Head::kSoftmax)) {
    throw UsageError("alpha mode '" + std::string(to_string(config.mode)) +
                     "' does not match the model head");
  }
  OptimState state = make_optim_state(params, config);
  Gradients<float> grads;
  std::vector<EpochRecord> log;
  for (int e = 0; e < config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const EpochPlan plan = plan_epoch(volumes, config.seed, kTrainStream, e, config.batch_size);
    double mean = 0.0;
    try {
      mean = run_epoch(plan, config.mode, config.threads,
                       [&](std::size_t, std::size_t, const Tensor<float>& x,
                           const LossTargets& t) {
                         const double loss = net.loss_and_gradients(params, x, t, grads);
                         adam_step(params, grads, state, config.learning_rate);
                         return loss;
                       });
    } catch (const NumericError& e2) {
      throw NumericError(std::string(e2.what()) + " in epoch " + std::to_string(e + 1));
    }
    EpochRecord r{e + 1, mean, config.learning_rate, seconds_since(t0), plan.pairs.size()};
    log.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  return log;
}

double swa_learning_rate(const SwaConfig& config, std::size_t step, std::size_t steps) {
  if (steps <= 1) return config.lr_low;
  const double t = static_cast<double>(step) / static_cast<double>(steps - 1);
  return std::lerp(config.lr_high, config.lr_low, t);  // exact at both ends
}

ModelParams<float> average_params(std::span<const ModelParams<float>> snapshots) {
  if (snapshots.empty()) throw UsageError("no snapshots to average");
  ModelParams<float> out = snapshots[0];
  for (std::size_t n = 0; n < out.tensors.size(); ++n) {
    std::vector<double> acc(out.tensors[n].values.size(), 0.0);
    for (const auto& s : snapshots) {
      if (s.tensors.size() != out.tensors.size() ||
          s.tensors[n].values.size() != acc.size()) {
        throw DataError("snapshots have different layouts");
      }
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.tensors[n].values[i];
    }
    const auto count = static_cast<double>(snapshots.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
      out.tensors[n].values[i] = static_cast<float>(acc[i] / count);
    }
  }
  return out;
}

void refresh_statistics(const WideResNet<float>& net, ModelParams<float>& params,
                        std::span<const Volume> volumes, const TrainConfig& config) {
  check_volumes(volumes);
  const EpochPlan plan = plan_epoch(volumes, config.seed, kRefreshStream, 0, config.batch_size);
  int step = 0;
  run_epoch(plan, config.mode, config.threads,
            [&](std::size_t, std::size_t, const Tensor<float>& x, const LossTargets&) {
              net.refresh_statistics(params, x, step++);
              return 0.0;
            });
}

SwaResult swa_finetune(const WideResNet<float>& net, const ModelParams<float>& start,
                       std::span<const Volume> volumes, const TrainConfig& config,
                       const EpochCallback& on_epoch) {
  config.validate();
  check_volumes(volumes);
  SwaResult result;
  ModelParams<float> params = start;
  Gradients<float> grads;
  for (int e = 0; e < config.swa.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const EpochPlan plan = plan_epoch(volumes, config.seed, kSwaStream, e, config.batch_size);
    double last_lr = config.swa.lr_high;
    double mean = 0.0;
    try {
      mean = run_epoch(plan, config.mode, config.threads,
                       [&](std::size_t b, std::size_t batches, const Tensor<float>& x,
                           const LossTargets& t) {
                         const double loss = net.loss_and_gradients(params, x, t, grads);
                         last_lr = swa_learning_rate(config.swa, b, batches);
                         result.lr_trace.push_back(last_lr);
                         sgd_step(params, grads, last_lr);
                         return loss;
                       });
    } catch (const NumericError& e2) {
      throw NumericError(std::string(e2.what()) + " in swa epoch " + std::to_string(e + 1));
    }
    result.snapshots.push_back(params);
    EpochRecord r{e + 1, mean, last_lr, seconds_since(t0), plan.pairs.size()};
    result.epochs.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  result.averaged = average_params(result.snapshots);
  refresh_statistics(net, result.averaged, volumes, config);
  return result;
}

}  // namespace fpi
