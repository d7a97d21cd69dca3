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

// Central finite-difference check of the analytic gradients on a reduced
// network in double precision.

#ifndef FPI_TEST_GRADCHECK_HPP_
#define FPI_TEST_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "fpi/rng.hpp"
#include "fpi/wrnet.hpp"

namespace props {

struct GradCheck {
  double max_rel = 0.0;       // worst group
  std::string worst_group;
  std::size_t groups = 0;
  std::size_t components = 0;
  std::size_t reduced_steps = 0;  // components checked with a step below h
  std::size_t skipped = 0;        // kink within h / 1000 of the point
};

inline fpi::ModelConfig reduced_config(fpi::Head head) {
  fpi::ModelConfig c;
  c.input_size = 8;
  c.head = head;
  c.width_factor = 1;
  c.stage_widths = {2, 3};
  c.blocks_per_stage = {1, 1};
  return c;
}

// Per trainable tensor: ||g_analytic - g_fd||_2 / max(||g_analytic||_2,
// ||g_fd||_2), with g_fd from central differences of step h. Batch
// statistics are used on both sides. A difference whose two evaluations
// switch any ReLU unit relative to the unperturbed point straddles a kink;
// its step is divided by 10 (at most three times) until it does not.
inline GradCheck gradient_check(fpi::Head head, std::uint64_t seed, double h = 1e-3) {
  const fpi::ModelConfig cfg = reduced_config(head);
  const fpi::WideResNet<double> net(cfg);
  fpi::SeededRng rng(seed);
  fpi::ModelParams<double> params = net.init(rng.child(0));
  // Move scales, offsets and biases off their trivial initial values.
  fpi::SeededRng jitter = rng.child(1);
  for (auto& t : params.tensors) {
    if (!t.trainable || t.shape.size() == 4) continue;
    for (double& v : t.values) v += 0.3 * jitter.normal();
  }
  const int batch = 2;
  fpi::Tensor<double> x(batch, 1, 8, 8);
  fpi::SeededRng data = rng.child(2);
  for (double& v : x.data) v = data.uniform();
  fpi::LossTargets targets;
  const std::size_t pixels = static_cast<std::size_t>(batch) * 64;
  if (head == fpi::Head::kSigmoid) {
    for (std::size_t n = 0; n < pixels; ++n) targets.alpha.push_back(static_cast<float>(data.uniform()));
  } else {
    for (std::size_t n = 0; n < pixels; ++n) {
      targets.classes.push_back(static_cast<std::uint8_t>(data.uniform_int(5)));
    }
  }

  fpi::ModelParams<double> work = params;
  fpi::Gradients<double> grads;
  net.loss_and_gradients(work, x, targets, grads, 1.0, fpi::NormMode::kTrain);

  std::vector<std::uint8_t> on_base, on_up, on_down;
  net.training_loss(params, x, targets, &on_base);

  GradCheck out;
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    if (!params.tensors[k].trainable) continue;
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t e = 0; e < params.tensors[k].values.size(); ++e) {
      std::optional<double> fd;
      for (int shrink = 0; shrink <= 3 && !fd; ++shrink) {
        const double step = h * std::pow(10.0, -shrink);
        fpi::ModelParams<double> probe = params;
        probe.tensors[k].values[e] = params.tensors[k].values[e] + step;
        const double up = net.training_loss(probe, x, targets, &on_up);
        probe.tensors[k].values[e] = params.tensors[k].values[e] - step;
        const double down = net.training_loss(probe, x, targets, &on_down);
        if (on_up != on_base || on_down != on_base) continue;
        fd = (up - down) / (2 * step);
        out.reduced_steps += shrink > 0;
      }
      if (!fd) {
        ++out.skipped;
        continue;
      }
      const double an = grads[k][e];
      diff2 += (an - *fd) * (an - *fd);
      a2 += an * an;
      n2 += *fd * *fd;
      ++out.components;
    }
    const double denom = std::sqrt(std::max(a2, n2));
    const double rel = denom > 0 ? std::sqrt(diff2) / denom : 0.0;
    ++out.groups;
    if (rel >= out.max_rel) {
      out.max_rel = rel;
      out.worst_group = params.tensors[k].name;
    }
  }
  return out;
}

}  // namespace props

#endif  // FPI_TEST_GRADCHECK_HPP_
