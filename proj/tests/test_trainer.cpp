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

#include <cmath>
#include <cstring>

#include "doctest.h"
#include "fpi/error.hpp"
#include "fpi/trainer.hpp"
#include "test_util.hpp"

using namespace fpi;

namespace {

std::vector<Volume> phantoms(int count, Shape3 shape, std::uint64_t seed) {
  std::vector<Volume> vs;
  for (int n = 0; n < count; ++n) {
    vs.push_back(generate_phantom(SeededRng(seed).child(static_cast<std::uint64_t>(n)), shape,
                                  "p" + std::to_string(n)));
  }
  return vs;
}

ModelParams<double> scalar_params(double value) {
  ModelParams<double> p;
  p.tensors.push_back({"theta", {1}, {value}, true});
  return p;
}

bool same_trainable(const ModelParams<float>& a, const ModelParams<float>& b) {
  for (std::size_t k = 0; k < a.tensors.size(); ++k) {
    if (a.tensors[k].trainable && a.tensors[k].values != b.tensors[k].values) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("Adam matches a scalar reference to 1e-12") {
  TrainConfig cfg;
  ModelParams<double> p = scalar_params(0.0);
  OptimState st = make_optim_state(p, cfg);
  // Reference on f(x) = (x - 3)^2.
  double x = 0.0, m = 0.0, v = 0.0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2.0 * (x - 3.0);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);

    const Gradients<double> grads{{2.0 * (p.tensors[0].values[0] - 3.0)}};
    adam_step(p, grads, st, lr);
    REQUIRE(std::abs(st.m[0][0] - m) <= 1e-12);
    REQUIRE(std::abs(st.v[0][0] - v) <= 1e-12);
    REQUIRE(std::abs(p.tensors[0].values[0] - x) <= 1e-12);
  }
  CHECK(st.step == 200);
  CHECK(std::abs(x - 3.0) < 0.1);
}

TEST_CASE("zero gradient and zero learning rate leave parameters unchanged") {
  TrainConfig cfg;
  ModelParams<double> p = scalar_params(1.5);
  OptimState st = make_optim_state(p, cfg);
  for (int k = 0; k < 10; ++k) adam_step(p, Gradients<double>{{0.0}}, st, 1e-3);
  CHECK(p.tensors[0].values[0] == 1.5);
  sgd_step(p, Gradients<double>{{4.0}}, 0.0);
  CHECK(p.tensors[0].values[0] == 1.5);
  sgd_step(p, Gradients<double>{{4.0}}, 0.25);
  CHECK(p.tensors[0].values[0] == 0.5);
}

TEST_CASE("configuration JSON is strict") {
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.mode = AlphaMode::kDiscrete;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(back.epochs == 7);
  CHECK(back.mode == AlphaMode::kDiscrete);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epoch", 3}}), UsageError);
  TrainConfig bad;
  bad.swa.lr_low = 1e-2;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = TrainConfig{};
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("epoch plans differ between epochs and cover all slices") {
  const auto vols = phantoms(6, {16, 16, 16}, 1);
  const EpochPlan e0 = plan_epoch(vols, 5, 0, 0, 8);
  const EpochPlan e1 = plan_epoch(vols, 5, 0, 1, 8);
  CHECK(e0.pairs.size() == 3 * 16);
  CHECK(e0.batch_count() == 6);
  bool differs = false;
  for (std::size_t n = 0; n < e0.pairs.size(); ++n) {
    differs |= e0.pairs[n].a.source.volume_id != e1.pairs[n].a.source.volume_id ||
               e0.pairs[n].a.source.index != e1.pairs[n].a.source.index;
  }
  CHECK(differs);
  const auto b = e0.batch(5, AlphaMode::kContinuous);
  CHECK(b.size() == 8);
  const EpochPlan shortp = plan_epoch(vols, 5, 0, 0, 10);
  CHECK(shortp.batch_count() == 5);
  CHECK(shortp.batch(4, AlphaMode::kContinuous).size() == 8);

  Tensor<float> x;
  LossTargets t;
  batch_tensors(b, x, t);
  CHECK(x.n == 8);
  CHECK(x.h == 16);
  CHECK(t.alpha.size() == 8 * 256);
}

TEST_CASE("one batch at lr 0 leaves trainable parameters unchanged") {
  const auto vols = phantoms(2, {16, 32, 32}, 2);
  const WideResNet<float> net(ModelConfig::desk(32, Head::kSigmoid));
  ModelParams<float> p = net.init(SeededRng(3));
  const ModelParams<float> before = p;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.0;
  const auto log = train(net, p, vols, cfg);
  REQUIRE(log.size() == 1);
  CHECK(log[0].samples == 16);
  CHECK(same_trainable(before, p));
}

TEST_CASE("training is deterministic and the probe loss decreases") {
  const auto vols = phantoms(6, {32, 32, 32}, 4);
  const WideResNet<float> net(ModelConfig::desk(32, Head::kSigmoid));
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 9;

  // Fixed probe batch drawn from a stream the trainer never uses.
  const EpochPlan probe_plan = plan_epoch(vols, 1234, 7, 0, 32);
  Tensor<float> px;
  LossTargets pt;
  batch_tensors(probe_plan.batch(0, AlphaMode::kContinuous), px, pt);

  ModelParams<float> p = net.init(SeededRng(10));
  std::vector<double> probe{net.training_loss(p, px, pt)};
  ModelParams<float> snapshot;
  TrainConfig five = cfg;
  five.epochs = 5;
  train(net, p, vols, five, [&](const EpochRecord& r) {
    probe.push_back(net.training_loss(p, px, pt));
    if (r.epoch == 1) snapshot = p;
  });
  REQUIRE(probe.size() == 6);
  for (std::size_t n = 1; n < probe.size(); ++n) {
    INFO("epoch " << n << ": " << probe[n - 1] << " -> " << probe[n]);
    CHECK(probe[n] < probe[n - 1]);
  }

  ModelParams<float> q = net.init(SeededRng(10));
  train(net, q, vols, cfg);
  TempDir dir;
  save_checkpoint(snapshot, dir.path / "a.ckpt");
  save_checkpoint(q, dir.path / "b.ckpt");
  CHECK(read_bytes(dir.path / "a.ckpt") == read_bytes(dir.path / "b.ckpt"));

  // Prefetching on a second thread does not change the result.
  ModelParams<float> r = net.init(SeededRng(10));
  TrainConfig threaded = cfg;
  threaded.threads = 2;
  train(net, r, vols, threaded);
  save_checkpoint(r, dir.path / "c.ckpt");
  CHECK(read_bytes(dir.path / "a.ckpt") == read_bytes(dir.path / "c.ckpt"));
}

TEST_CASE("mode and head must agree") {
  const auto vols = phantoms(2, {16, 16, 16}, 2);
  const WideResNet<float> net(ModelConfig::desk(16, Head::kSigmoid));
  ModelParams<float> p = net.init(SeededRng(3));
  TrainConfig cfg;
  cfg.mode = AlphaMode::kDiscrete;
  CHECK_THROWS_AS(train(net, p, vols, cfg), UsageError);
}

TEST_CASE("SWA learning-rate schedule") {
  SwaConfig s;
  CHECK(swa_learning_rate(s, 0, 11) == 1e-3);
  CHECK(swa_learning_rate(s, 10, 11) == 1e-4);
  CHECK(swa_learning_rate(s, 5, 11) == doctest::Approx(5.5e-4));
  CHECK(swa_learning_rate(s, 0, 1) == 1e-4);
}

TEST_CASE("snapshot averaging") {
  const WideResNet<float> net(ModelConfig::desk(16, Head::kSigmoid));
  const ModelParams<float> a = net.init(SeededRng(1));
  std::vector<ModelParams<float>> same(10, a);
  const ModelParams<float> avg = average_params(same);
  for (std::size_t k = 0; k < a.tensors.size(); ++k) CHECK(avg.tensors[k].values == a.tensors[k].values);

  std::vector<ModelParams<float>> mixed{a, net.init(SeededRng(2)), net.init(SeededRng(3))};
  const ModelParams<float> m = average_params(mixed);
  for (std::size_t k = 0; k < a.tensors.size(); ++k)
    for (std::size_t e = 0; e < a.tensors[k].values.size(); ++e) {
      const double naive = (static_cast<double>(mixed[0].tensors[k].values[e]) +
                            mixed[1].tensors[k].values[e] + mixed[2].tensors[k].values[e]) / 3.0;
      REQUIRE(std::abs(m.tensors[k].values[e] - naive) <= 1e-7);
    }
  CHECK_THROWS_AS(average_params({}), UsageError);
}

TEST_CASE("SWA fine-tuning contract") {
  const auto vols = phantoms(4, {16, 16, 16}, 6);
  const WideResNet<float> net(ModelConfig::desk(16, Head::kSoftmax));
  const ModelParams<float> start = net.init(SeededRng(7));
  TrainConfig cfg;
  cfg.mode = AlphaMode::kDiscrete;
  cfg.batch_size = 8;
  cfg.seed = 3;
  const SwaResult res = swa_finetune(net, start, vols, cfg);
  REQUIRE(res.snapshots.size() == 10);
  CHECK(res.epochs.size() == 10);
  // 32 slice pairs per epoch in batches of 8: four steps, the last at 1e-4.
  REQUIRE(res.lr_trace.size() == 40);
  int minima = 0;
  for (std::size_t n = 0; n < res.lr_trace.size(); ++n) {
    const bool last = (n + 1) % 4 == 0;
    CHECK((res.lr_trace[n] == 1e-4) == last);
    minima += res.lr_trace[n] == 1e-4;
    if (n % 4 == 0) CHECK(res.lr_trace[n] == 1e-3);
  }
  CHECK(minima == 10);
  const ModelParams<float> mean = average_params(res.snapshots);
  for (std::size_t k = 0; k < mean.tensors.size(); ++k) {
    if (!mean.tensors[k].trainable) continue;
    for (std::size_t e = 0; e < mean.tensors[k].values.size(); ++e) {
      REQUIRE(std::abs(res.averaged.tensors[k].values[e] - mean.tensors[k].values[e]) <= 1e-7);
    }
  }
  CHECK_FALSE(same_trainable(res.snapshots[0], res.snapshots[9]));
}
