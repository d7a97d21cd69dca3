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

// Wide residual encoder-decoder producing a per-pixel estimate of the
// interpolation factor, with its two losses and hand-written backprop.
//
// Layout for stage widths w_0..w_{S-1} (each times the width factor):
//   encoder: stem conv3x3(1 -> w_0); per stage s, blocks_per_stage[s]
//            pre-activation residual blocks (BN-ReLU-conv3x3-BN-ReLU-conv3x3),
//            the first of each stage s > 0 with stride 2;
//   decoder: the same stages in reverse, each stage s < S-1 entered through a
//            nearest-neighbour 2x upsample;
//   head:    BN-ReLU-conv1x1 (+bias) -> sigmoid (1 channel) or softmax (5).
// A block whose channel count or resolution changes carries a 1x1 projection
// shortcut applied to its pre-activated input.
//
// Depth counts the encoder's weighted layers plus the output projection:
// 2 + 2 * sum(blocks_per_stage), i.e. 14 for three stages of two blocks.

#ifndef FPI_WRNET_HPP_
#define FPI_WRNET_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fpi/rng.hpp"
#include "json.hpp"

namespace fpi {

enum class Head { kSigmoid, kSoftmax };

struct ModelConfig {
  int input_size = 256;
  Head head = Head::kSigmoid;
  int width_factor = 4;
  std::vector<int> stage_widths{16, 32, 64};
  std::vector<int> blocks_per_stage{2, 2, 2};
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  int stages() const { return static_cast<int>(stage_widths.size()); }
  int channels(int stage) const;
  int output_channels() const { return head == Head::kSoftmax ? 5 : 1; }
  int depth() const;
  // Throws UsageError on inconsistent settings.
  void validate() const;

  // Depth 14 at 256x256; 512x512 appends a stage holding one extra block
  // (depth 16).
  static ModelConfig standard(int input_size, Head head);
  // Same topology with narrow stages for CPU-scale runs.
  static ModelConfig desk(int input_size, Head head);
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Dense NCHW tensor.
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t size() const { return data.size(); }
  T* image(int idx) { return data.data() + static_cast<std::size_t>(idx) * c * plane(); }
  const T* image(int idx) const {
    return data.data() + static_cast<std::size_t>(idx) * c * plane();
  }
  T& at(int ni, int ci, int y, int x) {
    return data[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
  }
  T at(int ni, int ci, int y, int x) const {
    return data[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
  }
};

template <typename T>
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> values;
  // Running normalization statistics are buffers, not trainable weights.
  bool trainable = true;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<ParamTensor<T>> tensors;

  std::size_t trainable_count() const;
  std::size_t total_count() const;
  const ParamTensor<T>& find(const std::string& name) const;
  ParamTensor<T>& find(const std::string& name);
};

// Gradient buffers aligned with ModelParams::tensors (empty for buffers).
template <typename T>
using Gradients = std::vector<std::vector<T>>;

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params);

// Per-pixel training target: soft alpha values for the sigmoid head, class
// indices for the softmax head. Sized batch * height * width.
struct LossTargets {
  std::vector<float> alpha;
  std::vector<std::uint8_t> classes;
};

enum class NormMode {
  kInference,  // running statistics
  kTrain,      // batch statistics; running averages updated with momentum
  kRefresh,    // batch statistics; running averages become a cumulative mean
};

inline constexpr double kLogClamp = 1e-7;

// Mean over pixels of -a log p - (1 - a) log(1 - p), logs clamped at 1e-7.
template <typename T>
double loss_bce(const Tensor<T>& probs, std::span<const float> alpha);
// Mean over pixels of -log p_true, clamped at 1e-7.
template <typename T>
double loss_cce(const Tensor<T>& probs, std::span<const std::uint8_t> classes);

template <typename T>
class WideResNet {
 public:
  explicit WideResNet(ModelConfig config);
  ~WideResNet();
  WideResNet(WideResNet&&) noexcept;
  WideResNet& operator=(WideResNet&&) noexcept;

  const ModelConfig& config() const { return config_; }

  // Fan-in scaled normal kernels (std sqrt(2 / fan_in)), unit scales, zero
  // offsets and biases; running statistics (0, 1).
  ModelParams<T> init(SeededRng rng) const;

  // Probabilities (sigmoid: 1 channel; softmax: 5) using running statistics.
  // Throws NumericError on non-finite output.
  Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& input) const;

  // Forward with the requested normalization mode followed by backprop of
  // the head's loss. Returns the loss; `grads` receives loss_scale * dL/dθ.
  // kTrain and kRefresh update running statistics in `params`.
  double loss_and_gradients(ModelParams<T>& params, const Tensor<T>& input,
                            const LossTargets& targets, Gradients<T>& grads,
                            double loss_scale = 1.0, NormMode mode = NormMode::kTrain,
                            int refresh_step = 0) const;

  // Forward pass in refresh mode: running statistics become the cumulative
  // mean over refresh steps 0..refresh_step of the batch statistics.
  void refresh_statistics(ModelParams<T>& params, const Tensor<T>& input,
                          int refresh_step) const;

  // Loss only, with batch statistics and without touching running stats.
  // `relu_on`, when given, receives one flag per ReLU unit (input > 0) so
  // callers can tell when a perturbation crosses a kink.
  double training_loss(const ModelParams<T>& params, const Tensor<T>& input,
                       const LossTargets& targets,
                       std::vector<std::uint8_t>* relu_on = nullptr) const;

 private:
  struct Plan;
  ModelConfig config_;
  std::unique_ptr<Plan> plan_;
};

// Checkpoint: "FPICKPT1" magic, uint64 little-endian header length, a JSON
// header {format_version, config, tensors: [{name, shape, offset, count,
// trainable}]}, then every tensor as little-endian float32 in header order.
void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace fpi

#endif  // FPI_WRNET_HPP_
