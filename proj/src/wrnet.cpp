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

#include "fpi/wrnet.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "fpi/error.hpp"

namespace fpi {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// ModelConfig

int ModelConfig::channels(int stage) const {
  return stage_widths.at(static_cast<std::size_t>(stage)) * width_factor;
}

int ModelConfig::depth() const {
  return 2 + 2 * std::accumulate(blocks_per_stage.begin(), blocks_per_stage.end(), 0);
}

void ModelConfig::validate() const {
  if (stage_widths.empty()) throw UsageError("model needs at least one stage");
  if (stage_widths.size() != blocks_per_stage.size()) {
    throw UsageError("stage_widths and blocks_per_stage must have the same length");
  }
  if (width_factor < 1) throw UsageError("width factor must be at least 1");
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    if (stage_widths[s] < 1 || blocks_per_stage[s] < 1) {
      throw UsageError("stage widths and block counts must be positive");
    }
  }
  const int factor = 1 << (stages() - 1);
  if (input_size < factor || input_size % factor != 0) {
    throw UsageError("input size " + std::to_string(input_size) + " is not divisible by " +
                     std::to_string(factor) + " (2^(stages-1))");
  }
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0) || !(bn_epsilon > 0.0)) {
    throw UsageError("invalid normalization momentum or epsilon");
  }
}

ModelConfig ModelConfig::standard(int input_size, Head head) {
  ModelConfig c;
  c.input_size = input_size;
  c.head = head;
  if (input_size >= 512) {
    c.stage_widths.push_back(64);
    c.blocks_per_stage.push_back(1);
  }
  return c;
}

ModelConfig ModelConfig::desk(int input_size, Head head) {
  ModelConfig c;
  c.input_size = input_size;
  c.head = head;
  c.width_factor = 1;
  c.stage_widths = {4, 8, 16};
  return c;
}

json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},
          {"head", c.head == Head::kSoftmax ? "softmax" : "sigmoid"},
          {"width_factor", c.width_factor},
          {"stage_widths", c.stage_widths},
          {"blocks_per_stage", c.blocks_per_stage},
          {"bn_momentum", c.bn_momentum},
          {"bn_epsilon", c.bn_epsilon}};
}

ModelConfig model_config_from_json(const json& j) {
  static const std::vector<std::string> kKeys{"input_size",   "head",
                                              "width_factor", "stage_widths",
                                              "blocks_per_stage", "bn_momentum",
                                              "bn_epsilon"};
  if (!j.is_object()) throw UsageError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw UsageError("unknown model config key '" + key + "'");
    }
  }
  ModelConfig c;
  try {
    c.input_size = j.value("input_size", c.input_size);
    const std::string head = j.value("head", std::string("sigmoid"));
    if (head == "sigmoid") {
      c.head = Head::kSigmoid;
    } else if (head == "softmax") {
      c.head = Head::kSoftmax;
    } else {
      throw UsageError("model head must be 'sigmoid' or 'softmax'");
    }
    c.width_factor = j.value("width_factor", c.width_factor);
    c.stage_widths = j.value("stage_widths", c.stage_widths);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.bn_epsilon = j.value("bn_epsilon", c.bn_epsilon);
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// ModelParams

template <typename T>
std::size_t ModelParams<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.trainable ? t.values.size() : 0;
  return n;
}

template <typename T>
std::size_t ModelParams<T>::total_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

template <typename T>
const ParamTensor<T>& ModelParams<T>::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw DataError("no parameter tensor named " + name);
}

template <typename T>
ParamTensor<T>& ModelParams<T>::find(const std::string& name) {
  return const_cast<ParamTensor<T>&>(std::as_const(*this).find(name));
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
  ModelParams<To> out;
  out.config = params.config;
  for (const auto& t : params.tensors) {
    ParamTensor<To> c{t.name, t.shape, {}, t.trainable};
    c.values.assign(t.values.begin(), t.values.end());
    out.tensors.push_back(std::move(c));
  }
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&);

// ---------------------------------------------------------------------------
// Losses

template <typename T>
double loss_bce(const Tensor<T>& probs, std::span<const float> alpha) {
  if (probs.c != 1) throw UsageError("loss_bce expects a single-channel sigmoid prediction");
  if (alpha.size() != probs.size()) throw DataError("loss_bce: label size mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < alpha.size(); ++n) {
    const double a = alpha[n];
    if (!(a >= 0.0 && a <= 1.0)) throw DataError("loss_bce: label outside [0, 1]");
    const double p = probs.data[n];
    total -= a * std::log(std::max(p, kLogClamp)) + (1.0 - a) * std::log(std::max(1.0 - p, kLogClamp));
  }
  return alpha.empty() ? 0.0 : total / static_cast<double>(alpha.size());
}

template <typename T>
double loss_cce(const Tensor<T>& probs, std::span<const std::uint8_t> classes) {
  if (probs.c < 2) throw UsageError("loss_cce expects a multi-channel softmax prediction");
  const std::size_t plane = probs.plane();
  if (classes.size() != static_cast<std::size_t>(probs.n) * plane) {
    throw DataError("loss_cce: label size mismatch");
  }
  double total = 0.0;
  for (int b = 0; b < probs.n; ++b) {
    const T* img = probs.image(b);
    for (std::size_t px = 0; px < plane; ++px) {
      const int cls = classes[static_cast<std::size_t>(b) * plane + px];
      if (cls >= probs.c) throw DataError("loss_cce: invalid class index " + std::to_string(cls));
      total -= std::log(std::max(static_cast<double>(img[cls * plane + px]), kLogClamp));
    }
  }
  return classes.empty() ? 0.0 : total / static_cast<double>(classes.size());
}

template double loss_bce<float>(const Tensor<float>&, std::span<const float>);
template double loss_bce<double>(const Tensor<double>&, std::span<const float>);
template double loss_cce<float>(const Tensor<float>&, std::span<const std::uint8_t>);
template double loss_cce<double>(const Tensor<double>&, std::span<const std::uint8_t>);

// ---------------------------------------------------------------------------
// Layers

namespace {

struct ConvRef {
  int weight = -1;
  int bias = -1;
  int in_ch = 0, out_ch = 0, kernel = 3, stride = 1;
};

struct BnRef {
  int gamma = -1, beta = -1, mean = -1, var = -1;
};

struct BlockRef {
  bool upsample = false;
  BnRef bn1;
  ConvRef conv1;
  BnRef bn2;
  ConvRef conv2;
  ConvRef shortcut;  // weight < 0: identity
};

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int out_extent(int in, int kernel, int stride) {
  const int pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename T>
void im2col(const T* x, int channels, int h, int w, int kernel, int stride, int ho, int wo,
            T* col) {
  const int pad = kernel / 2;
  for (int c = 0; c < channels; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * kernel + ky) * kernel + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(wo, w + pad - kx);
            std::fill(dst, dst + lo, T(0));
            if (hi > lo) std::copy(src + lo + kx - pad, src + hi + kx - pad, dst + lo);
            std::fill(dst + std::max(lo, hi), dst + wo, T(0));
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int h, int w, int kernel, int stride, int ho, int wo,
            T* dx) {
  const int pad = kernel / 2;
  for (int c = 0; c < channels; ++c) {
    T* plane = dx + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * kernel + ky) * kernel + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
bool direct_1x1(const ConvRef& conv) {
  return conv.kernel == 1 && conv.stride == 1;
}

// 3x3 stride-1 zero-padded convolutions run directly on the planes; the
// channel counts here are too small for im2col + GEMM to pay off.
template <typename T>
bool direct_3x3(const ConvRef& conv) {
  return conv.kernel == 3 && conv.stride == 1;
}

// Copies one image into a zero border of width 1.
template <typename T>
void pad_image(const T* x, int channels, int h, int w, std::vector<T>& pad) {
  const int pw = w + 2;
  const std::size_t pplane = static_cast<std::size_t>(h + 2) * pw;
  pad.assign(pplane * channels, T(0));
  for (int c = 0; c < channels; ++c)
    for (int r = 0; r < h; ++r)
      std::copy_n(x + (static_cast<std::size_t>(c) * h + r) * w, w,
                  pad.data() + c * pplane + static_cast<std::size_t>(r + 1) * pw + 1);
}

// y[co] = sum_ci w[co, ci] (*) x[ci] for one padded image; y is overwritten.
template <typename T>
void conv3x3_image(const T* pad, int in_ch, int h, int w, const T* weight, int out_ch,
                   T* y) {
  const int pw = w + 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t pplane = static_cast<std::size_t>(h + 2) * pw;
  std::fill(y, y + plane * out_ch, T(0));
  for (int co = 0; co < out_ch; ++co) {
    for (int ci = 0; ci < in_ch; ++ci) {
      const T* k = weight + (static_cast<std::size_t>(co) * in_ch + ci) * 9;
      const T* xp = pad + pplane * ci;
      for (int r = 0; r < h; ++r) {
        T* __restrict out = y + plane * co + static_cast<std::size_t>(r) * w;
        const T* __restrict i0 = xp + static_cast<std::size_t>(r) * pw;
        const T* __restrict i1 = i0 + pw;
        const T* __restrict i2 = i1 + pw;
        for (int c = 0; c < w; ++c) {
          out[c] += k[0] * i0[c] + k[1] * i0[c + 1] + k[2] * i0[c + 2] + k[3] * i1[c] +
                    k[4] * i1[c + 1] + k[5] * i1[c + 2] + k[6] * i2[c] + k[7] * i2[c + 1] +
                    k[8] * i2[c + 2];
        }
      }
    }
  }
}

// dw[co, ci] += sum over pixels of dy[co] * shifted x[ci], for one padded
// image. `lanes` holds per-column partial sums.
template <typename T>
void conv3x3_weight_grad(const T* pad, int in_ch, int h, int w, const T* dy, int out_ch,
                         T* dw, std::vector<T>& lanes) {
  const int pw = w + 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t pplane = static_cast<std::size_t>(h + 2) * pw;
  lanes.resize(static_cast<std::size_t>(9) * w);
  for (int co = 0; co < out_ch; ++co) {
    for (int ci = 0; ci < in_ch; ++ci) {
      std::fill(lanes.begin(), lanes.end(), T(0));
      const T* xp = pad + pplane * ci;
      for (int r = 0; r < h; ++r) {
        const T* __restrict g = dy + plane * co + static_cast<std::size_t>(r) * w;
        for (int ky = 0; ky < 3; ++ky) {
          const T* __restrict in = xp + static_cast<std::size_t>(r + ky) * pw;
          T* __restrict l0 = lanes.data() + static_cast<std::size_t>(ky * 3) * w;
          T* __restrict l1 = l0 + w;
          T* __restrict l2 = l1 + w;
          for (int c = 0; c < w; ++c) {
            l0[c] += g[c] * in[c];
            l1[c] += g[c] * in[c + 1];
            l2[c] += g[c] * in[c + 2];
          }
        }
      }
      T* d = dw + (static_cast<std::size_t>(co) * in_ch + ci) * 9;
      for (int t = 0; t < 9; ++t) {
        T acc = 0;
        for (int c = 0; c < w; ++c) acc += lanes[static_cast<std::size_t>(t) * w + c];
        d[t] += acc;
      }
    }
  }
}

// Buffers shared by the convolutions of one forward/backward pass. When
// `keep` is set the unfolded input of each strided convolution is retained
// for the weight gradient.
// Eigen reductions peel an alignment-dependent prefix, so their rounding
// varies with the allocation address. These use fixed lanes instead.
template <typename T>
double lane_sum(const T* p, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(p[i + l]);
  for (; i < n; ++i) acc[i % 8] += static_cast<double>(p[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double lane_centered_square_sum(const T* p, std::size_t n, T mu) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) {
      const double d = static_cast<double>(p[i + l] - mu);
      acc[l] += d * d;
    }
  for (; i < n; ++i) {
    const double d = static_cast<double>(p[i] - mu);
    acc[i % 8] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double lane_dot(const T* a, const T* b, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
  for (; i < n; ++i) acc[i % 8] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
struct ConvWorkspace {
  bool keep = false;
  std::vector<std::vector<T>> cols;  // indexed by weight tensor
  std::vector<T> scratch;
  std::vector<T> flipped;
  std::vector<T> pad;
  std::vector<T> lanes;
};

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const ModelParams<T>& params, const ConvRef& conv,
                       ConvWorkspace<T>& ws) {
  const int ho = out_extent(x.h, conv.kernel, conv.stride);
  const int wo = out_extent(x.w, conv.kernel, conv.stride);
  const int k = conv.in_ch * conv.kernel * conv.kernel;
  const int p = ho * wo;
  const std::size_t per_image = static_cast<std::size_t>(k) * p;
  Tensor<T> y(x.n, conv.out_ch, ho, wo);
  const auto& w_values = params.tensors[static_cast<std::size_t>(conv.weight)].values;
  Eigen::Map<const MatRM<T>> weight(w_values.data(), conv.out_ch, k);
  const bool direct = direct_1x1<T>(conv);
  const bool plain3 = direct_3x3<T>(conv);
  std::vector<T>* col_store = nullptr;
  if (!direct && !plain3) {
    if (ws.keep) {
      if (ws.cols.size() <= static_cast<std::size_t>(conv.weight)) {
        ws.cols.resize(static_cast<std::size_t>(conv.weight) + 1);
      }
      col_store = &ws.cols[static_cast<std::size_t>(conv.weight)];
      col_store->resize(per_image * static_cast<std::size_t>(x.n));
    } else {
      col_store = &ws.scratch;
      col_store->resize(per_image);
    }
  }
  for (int b = 0; b < x.n; ++b) {
    Eigen::Map<MatRM<T>> out(y.image(b), conv.out_ch, p);
    if (plain3) {
      pad_image(x.image(b), x.c, x.h, x.w, ws.pad);
      conv3x3_image(ws.pad.data(), x.c, x.h, x.w, w_values.data(), conv.out_ch, y.image(b));
    } else {
      const T* col_data = x.image(b);
      if (!direct) {
        T* dst = col_store->data() + (ws.keep ? per_image * static_cast<std::size_t>(b) : 0);
        im2col(x.image(b), x.c, x.h, x.w, conv.kernel, conv.stride, ho, wo, dst);
        col_data = dst;
      }
      Eigen::Map<const MatRM<T>> col(col_data, k, p);
      out.noalias() = weight * col;
    }
    if (conv.bias >= 0) {
      const auto& bias = params.tensors[static_cast<std::size_t>(conv.bias)].values;
      for (int c = 0; c < conv.out_ch; ++c) out.row(c).array() += bias[static_cast<std::size_t>(c)];
    }
  }
  return y;
}

// Accumulates weight/bias gradients; writes (not accumulates) dx if given.
// Requires the workspace of the matching forward pass.
template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& dy, const ModelParams<T>& params,
                   const ConvRef& conv, Gradients<T>& grads, Tensor<T>* dx,
                   ConvWorkspace<T>& ws) {
  const int ho = dy.h, wo = dy.w;
  const int k = conv.in_ch * conv.kernel * conv.kernel;
  const int p = ho * wo;
  const std::size_t per_image = static_cast<std::size_t>(k) * p;
  const auto& w_values = params.tensors[static_cast<std::size_t>(conv.weight)].values;
  Eigen::Map<const MatRM<T>> weight(w_values.data(), conv.out_ch, k);
  auto& dw_values = grads[static_cast<std::size_t>(conv.weight)];
  Eigen::Map<MatRM<T>> dweight(dw_values.data(), conv.out_ch, k);
  const bool direct = direct_1x1<T>(conv);
  const bool plain3 = direct_3x3<T>(conv);
  if (dx != nullptr) *dx = Tensor<T>(x.n, x.c, x.h, x.w);
  if (dx != nullptr && plain3) {
    // Input gradient = convolution of dy with the flipped, transposed kernel.
    ws.flipped.resize(static_cast<std::size_t>(conv.in_ch) * conv.out_ch * 9);
    for (int co = 0; co < conv.out_ch; ++co)
      for (int ci = 0; ci < conv.in_ch; ++ci)
        for (int t = 0; t < 9; ++t) {
          ws.flipped[(static_cast<std::size_t>(ci) * conv.out_ch + co) * 9 + (8 - t)] =
              w_values[(static_cast<std::size_t>(co) * conv.in_ch + ci) * 9 + t];
        }
  }
  for (int b = 0; b < x.n; ++b) {
    Eigen::Map<const MatRM<T>> g(dy.image(b), conv.out_ch, p);
    if (conv.bias >= 0) {
      auto& dbias = grads[static_cast<std::size_t>(conv.bias)];
      for (int c = 0; c < conv.out_ch; ++c) dbias[static_cast<std::size_t>(c)] += static_cast<T>(lane_sum(dy.image(b) + static_cast<std::size_t>(c) * p, static_cast<std::size_t>(p)));
    }
    if (plain3) {
      pad_image(x.image(b), x.c, x.h, x.w, ws.pad);
      conv3x3_weight_grad(ws.pad.data(), x.c, x.h, x.w, dy.image(b), conv.out_ch,
                          dw_values.data(), ws.lanes);
      if (dx != nullptr) {
        pad_image(dy.image(b), conv.out_ch, x.h, x.w, ws.pad);
        conv3x3_image(ws.pad.data(), conv.out_ch, x.h, x.w, ws.flipped.data(), x.c,
                      dx->image(b));
      }
      continue;
    }
    const T* col_data = direct ? x.image(b)
                               : ws.cols[static_cast<std::size_t>(conv.weight)].data() +
                                     per_image * static_cast<std::size_t>(b);
    Eigen::Map<const MatRM<T>> col(col_data, k, p);
    dweight.noalias() += g * col.transpose();
    if (dx == nullptr) continue;
    Eigen::Map<MatRM<T>> out(dx->image(b), x.c, static_cast<Eigen::Index>(x.plane()));
    if (direct) {
      out.noalias() = weight.transpose() * g;
    } else {
      ws.scratch.resize(per_image);
      Eigen::Map<MatRM<T>> dcol(ws.scratch.data(), k, p);
      dcol.noalias() = weight.transpose() * g;
      col2im(ws.scratch.data(), x.c, x.h, x.w, conv.kernel, conv.stride, ho, wo, dx->image(b));
    }
  }
}

template <typename T>
struct BnCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> plane_map(T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}
template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> plane_map(const T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}

// Internal normalization behaviour; kFrozenBatch uses batch statistics
// without writing running averages.
enum class NormUse { kRunning, kBatchUpdate, kBatchRefresh, kFrozenBatch };

// y = relu(gamma * xhat + beta).
template <typename T>
Tensor<T> bn_relu_forward(const Tensor<T>& x, ModelParams<T>& params, const BnRef& bn,
                          const ModelConfig& config, NormUse use, int refresh_step,
                          BnCache<T>* cache) {
  const auto& gamma = params.tensors[static_cast<std::size_t>(bn.gamma)].values;
  const auto& beta = params.tensors[static_cast<std::size_t>(bn.beta)].values;
  auto& run_mean = params.tensors[static_cast<std::size_t>(bn.mean)].values;
  auto& run_var = params.tensors[static_cast<std::size_t>(bn.var)].values;
  const std::size_t plane = x.plane();
  const double count = static_cast<double>(x.n) * static_cast<double>(plane);
  Tensor<T> y(x.n, x.c, x.h, x.w);
  if (cache != nullptr) {
    cache->xhat = Tensor<T>(x.n, x.c, x.h, x.w);
    cache->inv_std.assign(static_cast<std::size_t>(x.c), T(0));
  }
  for (int c = 0; c < x.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double mean, var;
    if (use == NormUse::kRunning) {
      mean = run_mean[ci];
      var = run_var[ci];
    } else {
      double sum = 0.0;
      for (int b = 0; b < x.n; ++b) sum += lane_sum(x.image(b) + ci * plane, plane);
      mean = sum / count;
      double sq = 0.0;
      const T mu_t = static_cast<T>(mean);
      for (int b = 0; b < x.n; ++b) {
        sq += lane_centered_square_sum(x.image(b) + ci * plane, plane, mu_t);
      }
      var = sq / count;
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      if (use == NormUse::kBatchUpdate) {
        const double m = config.bn_momentum;
        run_mean[ci] = static_cast<T>((1 - m) * run_mean[ci] + m * mean);
        run_var[ci] = static_cast<T>((1 - m) * run_var[ci] + m * unbiased);
      } else if (use == NormUse::kBatchRefresh) {
        const double w = 1.0 / (refresh_step + 1.0);
        run_mean[ci] = static_cast<T>((1 - w) * run_mean[ci] + w * mean);
        run_var[ci] = static_cast<T>((1 - w) * run_var[ci] + w * unbiased);
      }
    }
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + config.bn_epsilon));
    const T g = gamma[ci], bt = beta[ci], mu = static_cast<T>(mean);
    if (cache != nullptr) cache->inv_std[ci] = inv_std;
    for (int b = 0; b < x.n; ++b) {
      auto src = plane_map(x.image(b) + ci * plane, plane);
      auto dst = plane_map(y.image(b) + ci * plane, plane);
      if (cache != nullptr) {
        auto xh = plane_map(cache->xhat.image(b) + ci * plane, plane);
        xh = (src - mu) * inv_std;
        dst = (xh * g + bt).max(T(0));
      } else {
        dst = ((src - mu) * (inv_std * g) + bt).max(T(0));
      }
    }
  }
  return y;
}

// `da` is the gradient w.r.t. the post-ReLU output `a`; returns dx.
template <typename T>
Tensor<T> bn_relu_backward(const Tensor<T>& a, const Tensor<T>& da, const BnCache<T>& cache,
                           const ModelParams<T>& params, const BnRef& bn, Gradients<T>& grads) {
  const auto& gamma = params.tensors[static_cast<std::size_t>(bn.gamma)].values;
  auto& dgamma = grads[static_cast<std::size_t>(bn.gamma)];
  auto& dbeta = grads[static_cast<std::size_t>(bn.beta)];
  const std::size_t plane = a.plane();
  const double count = static_cast<double>(a.n) * static_cast<double>(plane);
  Tensor<T> dx(a.n, a.c, a.h, a.w);
  for (int c = 0; c < a.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int b = 0; b < a.n; ++b) {
      auto av = plane_map(a.image(b) + ci * plane, plane);
      auto g = plane_map(da.image(b) + ci * plane, plane);
      auto dy = plane_map(dx.image(b) + ci * plane, plane);
      // Masked upstream gradient, staged in dx.
      dy = (av > T(0)).select(g, T(0));
      sum_dy += lane_sum(dx.image(b) + ci * plane, plane);
      sum_dy_xhat += lane_dot(dx.image(b) + ci * plane, cache.xhat.image(b) + ci * plane, plane);
    }
    dgamma[ci] += static_cast<T>(sum_dy_xhat);
    dbeta[ci] += static_cast<T>(sum_dy);
    const T scale = static_cast<T>(gamma[ci] * cache.inv_std[ci] / count);
    const T mean_dy = static_cast<T>(sum_dy);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat);
    const T m = static_cast<T>(count);
    for (int b = 0; b < a.n; ++b) {
      auto xh = plane_map(cache.xhat.image(b) + ci * plane, plane);
      auto out = plane_map(dx.image(b) + ci * plane, plane);
      out = scale * (m * out - mean_dy - xh * mean_dy_xhat);
    }
  }
  return dx;
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
  for (int b = 0; b < x.n; ++b)
    for (int c = 0; c < x.c; ++c)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) y.at(b, c, yy, xx) = x.at(b, c, yy / 2, xx / 2);
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int b = 0; b < dy.n; ++b)
    for (int c = 0; c < dy.c; ++c)
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx) dx.at(b, c, yy / 2, xx / 2) += dy.at(b, c, yy, xx);
  return dx;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  for (std::size_t n = 0; n < a.data.size(); ++n) a.data[n] += b.data[n];
}

template <typename T>
struct BlockCache {
  Tensor<T> x;  // input after any upsampling
  BnCache<T> bn1;
  Tensor<T> a1;
  Tensor<T> h1;
  BnCache<T> bn2;
  Tensor<T> a2;
};

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  bool trainable = true;
  enum Init { kKernel, kOne, kZero } init = kKernel;
  int fan_in = 1;
};

}  // namespace

template <typename T>
struct WideResNet<T>::Plan {
  std::vector<ParamSpec> specs;
  ConvRef stem;
  std::vector<BlockRef> blocks;
  BnRef head_bn;
  ConvRef head_conv;

  int add(ParamSpec spec) {
    specs.push_back(std::move(spec));
    return static_cast<int>(specs.size()) - 1;
  }

  ConvRef conv(const std::string& name, int in_ch, int out_ch, int kernel, int stride, bool bias) {
    ConvRef c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.kernel = kernel;
    c.stride = stride;
    const int fan_in = in_ch * kernel * kernel;
    c.weight = add({name + ".weight", {out_ch, in_ch, kernel, kernel}, true, ParamSpec::kKernel, fan_in});
    if (bias) c.bias = add({name + ".bias", {out_ch}, true, ParamSpec::kZero, 1});
    return c;
  }

  BnRef bn(const std::string& name, int ch) {
    BnRef r;
    r.gamma = add({name + ".gamma", {ch}, true, ParamSpec::kOne, 1});
    r.beta = add({name + ".beta", {ch}, true, ParamSpec::kZero, 1});
    r.mean = add({name + ".running_mean", {ch}, false, ParamSpec::kZero, 1});
    r.var = add({name + ".running_var", {ch}, false, ParamSpec::kOne, 1});
    return r;
  }

  void block(const std::string& name, int in_ch, int out_ch, int stride, bool upsample) {
    BlockRef b;
    b.upsample = upsample;
    b.bn1 = bn(name + ".bn1", in_ch);
    b.conv1 = conv(name + ".conv1", in_ch, out_ch, 3, stride, false);
    b.bn2 = bn(name + ".bn2", out_ch);
    b.conv2 = conv(name + ".conv2", out_ch, out_ch, 3, 1, false);
    if (in_ch != out_ch || stride != 1) {
      b.shortcut = conv(name + ".shortcut", in_ch, out_ch, 1, stride, false);
    }
    blocks.push_back(b);
  }

  explicit Plan(const ModelConfig& cfg) {
    stem = conv("stem.conv", 1, cfg.channels(0), 3, 1, false);
    int ch = cfg.channels(0);
    for (int s = 0; s < cfg.stages(); ++s) {
      for (int b = 0; b < cfg.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        block("enc" + std::to_string(s) + ".block" + std::to_string(b), ch, cfg.channels(s),
              stride, false);
        ch = cfg.channels(s);
      }
    }
    for (int s = cfg.stages() - 1; s >= 0; --s) {
      for (int b = 0; b < cfg.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
        const bool up = b == 0 && s < cfg.stages() - 1;
        block("dec" + std::to_string(s) + ".block" + std::to_string(b), ch, cfg.channels(s), 1, up);
        ch = cfg.channels(s);
      }
    }
    head_bn = bn("head.bn", ch);
    head_conv = conv("head.conv", ch, cfg.output_channels(), 1, 1, true);
  }
};

template <typename T>
WideResNet<T>::WideResNet(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  plan_ = std::make_unique<Plan>(config_);
}

template <typename T>
WideResNet<T>::~WideResNet() = default;
template <typename T>
WideResNet<T>::WideResNet(WideResNet&&) noexcept = default;
template <typename T>
WideResNet<T>& WideResNet<T>::operator=(WideResNet&&) noexcept = default;

template <typename T>
ModelParams<T> WideResNet<T>::init(SeededRng rng) const {
  ModelParams<T> params;
  params.config = config_;
  for (std::size_t idx = 0; idx < plan_->specs.size(); ++idx) {
    const ParamSpec& spec = plan_->specs[idx];
    std::size_t count = 1;
    for (int d : spec.shape) count *= static_cast<std::size_t>(d);
    ParamTensor<T> t{spec.name, spec.shape, std::vector<T>(count, T(0)), spec.trainable};
    if (spec.init == ParamSpec::kOne) {
      std::fill(t.values.begin(), t.values.end(), T(1));
    } else if (spec.init == ParamSpec::kKernel) {
      SeededRng draw = rng.child(idx);
      const double std_dev = std::sqrt(2.0 / spec.fan_in);
      for (T& v : t.values) v = static_cast<T>(std_dev * draw.normal());
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

namespace {

template <typename T>
void check_params(const ModelParams<T>& params, std::size_t expected) {
  if (params.tensors.size() != expected) {
    throw DataError("parameter set does not match the model configuration");
  }
}

template <typename T>
void check_input(const Tensor<T>& input, const ModelConfig& cfg) {
  if (input.c != 1 || input.h != cfg.input_size || input.w != cfg.input_size || input.n < 1) {
    throw DataError("model expects input of shape [N, 1, " + std::to_string(cfg.input_size) +
                    ", " + std::to_string(cfg.input_size) + "], got [" + std::to_string(input.n) +
                    ", " + std::to_string(input.c) + ", " + std::to_string(input.h) + ", " +
                    std::to_string(input.w) + "]");
  }
}

template <typename T>
Tensor<T> activate(const Tensor<T>& logits, Head head) {
  Tensor<T> probs(logits.n, logits.c, logits.h, logits.w);
  if (head == Head::kSigmoid) {
    for (std::size_t n = 0; n < logits.data.size(); ++n) {
      const T p = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[n]))));
      // Saturated logits must still give a probability strictly inside (0, 1).
      probs.data[n] = std::clamp(p, std::numeric_limits<T>::denorm_min(),
                                 T(1) - std::numeric_limits<T>::epsilon() / 2);
    }
    return probs;
  }
  const std::size_t plane = logits.plane();
  for (int b = 0; b < logits.n; ++b) {
    const T* z = logits.image(b);
    T* p = probs.image(b);
    for (std::size_t px = 0; px < plane; ++px) {
      double mx = z[px];
      for (int c = 1; c < logits.c; ++c) mx = std::max(mx, static_cast<double>(z[c * plane + px]));
      double sum = 0.0;
      for (int c = 0; c < logits.c; ++c) sum += std::exp(z[c * plane + px] - mx);
      for (int c = 0; c < logits.c; ++c) {
        p[c * plane + px] = static_cast<T>(std::exp(z[c * plane + px] - mx) / sum);
      }
    }
  }
  return probs;
}

template <typename T>
void check_output(const Tensor<T>& probs) {
  for (T v : probs.data) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite model activation");
  }
}

NormUse norm_use(NormMode mode) {
  switch (mode) {
    case NormMode::kInference:
      return NormUse::kRunning;
    case NormMode::kTrain:
      return NormUse::kBatchUpdate;
    case NormMode::kRefresh:
      return NormUse::kBatchRefresh;
  }
  return NormUse::kRunning;
}

// Shared forward/backward driver.
template <typename T, typename PlanT>
struct Runner {
  const ModelConfig& cfg;
  const PlanT& plan;
  ModelParams<T>& params;
  NormUse use;
  int refresh_step;
  bool keep;  // cache activations for backward
  ConvWorkspace<T> ws;

  Runner(const ModelConfig& c, const PlanT& p, ModelParams<T>& prm, NormUse u, int step, bool k)
      : cfg(c), plan(p), params(prm), use(u), refresh_step(step), keep(k) {
    ws.keep = k;
  }

  Tensor<T> stem_in;
  std::vector<BlockCache<T>> caches;
  Tensor<T> head_in;
  BnCache<T> head_bn;
  Tensor<T> head_act;

  Tensor<T> block_forward(const BlockRef& blk, Tensor<T> x, BlockCache<T>* cache) {
    if (blk.upsample) x = upsample2x(x);
    BnCache<T> bn1, bn2;
    Tensor<T> a1 = bn_relu_forward(x, params, blk.bn1, cfg, use, refresh_step, keep ? &bn1 : nullptr);
    Tensor<T> h1 = conv_forward(a1, params, blk.conv1, ws);
    Tensor<T> a2 = bn_relu_forward(h1, params, blk.bn2, cfg, use, refresh_step, keep ? &bn2 : nullptr);
    Tensor<T> y = conv_forward(a2, params, blk.conv2, ws);
    if (blk.shortcut.weight >= 0) {
      add_inplace(y, conv_forward(a1, params, blk.shortcut, ws));
    } else {
      add_inplace(y, x);
    }
    if (cache != nullptr) {
      cache->x = std::move(x);
      cache->bn1 = std::move(bn1);
      cache->a1 = std::move(a1);
      cache->h1 = std::move(h1);
      cache->bn2 = std::move(bn2);
      cache->a2 = std::move(a2);
    }
    return y;
  }

  Tensor<T> logits(const Tensor<T>& input) {
    if (keep) stem_in = input;
    Tensor<T> x = conv_forward(input, params, plan.stem, ws);
    if (keep) caches.resize(plan.blocks.size());
    for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
      x = block_forward(plan.blocks[b], std::move(x), keep ? &caches[b] : nullptr);
    }
    Tensor<T> act = bn_relu_forward(x, params, plan.head_bn, cfg, use, refresh_step,
                                    keep ? &head_bn : nullptr);
    Tensor<T> z = conv_forward(act, params, plan.head_conv, ws);
    if (keep) {
      head_in = std::move(x);
      head_act = std::move(act);
    }
    return z;
  }

  Tensor<T> block_backward(const BlockRef& blk, BlockCache<T>& cache, const Tensor<T>& dy,
                           Gradients<T>& grads) {
    Tensor<T> da2;
    conv_backward(cache.a2, dy, params, blk.conv2, grads, &da2, ws);
    Tensor<T> dh1 = bn_relu_backward(cache.a2, da2, cache.bn2, params, blk.bn2, grads);
    Tensor<T> da1;
    conv_backward(cache.a1, dh1, params, blk.conv1, grads, &da1, ws);
    Tensor<T> dx;
    if (blk.shortcut.weight >= 0) {
      Tensor<T> da1_sc;
      conv_backward(cache.a1, dy, params, blk.shortcut, grads, &da1_sc, ws);
      add_inplace(da1, da1_sc);
      dx = bn_relu_backward(cache.a1, da1, cache.bn1, params, blk.bn1, grads);
    } else {
      dx = bn_relu_backward(cache.a1, da1, cache.bn1, params, blk.bn1, grads);
      add_inplace(dx, dy);
    }
    if (blk.upsample) dx = upsample2x_backward(dx);
    return dx;
  }

  void backward(const Tensor<T>& dlogits, Gradients<T>& grads) {
    Tensor<T> dact;
    conv_backward(head_act, dlogits, params, plan.head_conv, grads, &dact, ws);
    Tensor<T> dx = bn_relu_backward(head_act, dact, head_bn, params, plan.head_bn, grads);
    for (std::size_t b = plan.blocks.size(); b-- > 0;) {
      dx = block_backward(plan.blocks[b], caches[b], dx, grads);
    }
    conv_backward(stem_in, dx, params, plan.stem, grads, static_cast<Tensor<T>*>(nullptr), ws);
  }
};

// Loss and dL/dlogits (already multiplied by loss_scale).
template <typename T>
double head_loss(const Tensor<T>& probs, const LossTargets& targets, Head head,
                 double loss_scale, Tensor<T>* dlogits) {
  const std::size_t pixels = static_cast<std::size_t>(probs.n) * probs.plane();
  if (dlogits != nullptr) *dlogits = Tensor<T>(probs.n, probs.c, probs.h, probs.w);
  const double inv = loss_scale / static_cast<double>(pixels);
  if (head == Head::kSigmoid) {
    if (targets.alpha.size() != pixels) throw DataError("alpha targets do not match the batch");
    const double loss = loss_bce(probs, targets.alpha);
    if (dlogits != nullptr) {
      for (std::size_t n = 0; n < pixels; ++n) {
        dlogits->data[n] = static_cast<T>((static_cast<double>(probs.data[n]) - targets.alpha[n]) * inv);
      }
    }
    return loss;
  }
  if (targets.classes.size() != pixels) throw DataError("class targets do not match the batch");
  const double loss = loss_cce(probs, targets.classes);
  if (dlogits != nullptr) {
    const std::size_t plane = probs.plane();
    for (int b = 0; b < probs.n; ++b) {
      const T* p = probs.image(b);
      T* g = dlogits->image(b);
      for (std::size_t px = 0; px < plane; ++px) {
        const int cls = targets.classes[static_cast<std::size_t>(b) * plane + px];
        for (int c = 0; c < probs.c; ++c) {
          const double target = c == cls ? 1.0 : 0.0;
          g[c * plane + px] = static_cast<T>((p[c * plane + px] - target) * inv);
        }
      }
    }
  }
  return loss;
}

}  // namespace

template <typename T>
Tensor<T> WideResNet<T>::forward(const ModelParams<T>& params, const Tensor<T>& input) const {
  check_params(params, plan_->specs.size());
  check_input(input, config_);
  // Running-statistics mode never writes to params.
  auto& mutable_params = const_cast<ModelParams<T>&>(params);
  Runner<T, Plan> run{config_, *plan_, mutable_params, NormUse::kRunning, 0, false};
  Tensor<T> probs = activate(run.logits(input), config_.head);
  check_output(probs);
  return probs;
}

template <typename T>
double WideResNet<T>::loss_and_gradients(ModelParams<T>& params, const Tensor<T>& input,
                                         const LossTargets& targets, Gradients<T>& grads,
                                         double loss_scale, NormMode mode,
                                         int refresh_step) const {
  check_params(params, plan_->specs.size());
  check_input(input, config_);
  NormUse use = norm_use(mode);
  Runner<T, Plan> run{config_, *plan_, params, use, refresh_step, true};
  Tensor<T> probs = activate(run.logits(input), config_.head);
  check_output(probs);
  Tensor<T> dlogits;
  const double loss = head_loss(probs, targets, config_.head, loss_scale, &dlogits);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");

  grads.resize(params.tensors.size());
  for (std::size_t n = 0; n < params.tensors.size(); ++n) {
    if (params.tensors[n].trainable) {
      grads[n].assign(params.tensors[n].values.size(), T(0));
    } else {
      grads[n].clear();
    }
  }
  run.backward(dlogits, grads);
  for (const auto& g : grads) {
    for (T v : g) {
      if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient");
    }
  }
  return loss;
}

template <typename T>
void WideResNet<T>::refresh_statistics(ModelParams<T>& params, const Tensor<T>& input,
                                       int refresh_step) const {
  check_params(params, plan_->specs.size());
  check_input(input, config_);
  Runner<T, Plan> run{config_, *plan_, params, NormUse::kBatchRefresh, refresh_step, false};
  check_output(activate(run.logits(input), config_.head));
}

template <typename T>
double WideResNet<T>::training_loss(const ModelParams<T>& params, const Tensor<T>& input,
                                    const LossTargets& targets,
                                    std::vector<std::uint8_t>* relu_on) const {
  check_params(params, plan_->specs.size());
  check_input(input, config_);
  auto& mutable_params = const_cast<ModelParams<T>&>(params);
  Runner<T, Plan> run{config_, *plan_, mutable_params, NormUse::kFrozenBatch, 0,
                      relu_on != nullptr};
  Tensor<T> probs = activate(run.logits(input), config_.head);
  if (relu_on != nullptr) {
    relu_on->clear();
    auto append = [&](const Tensor<T>& a) {
      for (T v : a.data) relu_on->push_back(v > T(0));
    };
    for (const auto& c : run.caches) {
      append(c.a1);
      append(c.a2);
    }
    append(run.head_act);
  }
  return head_loss(probs, targets, config_.head, 1.0, static_cast<Tensor<T>*>(nullptr));
}

template class WideResNet<float>;
template class WideResNet<double>;

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'P', 'I', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

void write_le64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int n = 0; n < 8; ++n) bytes[n] = static_cast<unsigned char>(v >> (8 * n));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_le64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw DataError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int n = 0; n < 8; ++n) v |= static_cast<std::uint64_t>(bytes[n]) << (8 * n);
  return v;
}

void write_f32(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                            static_cast<unsigned char>(bits >> 16),
                            static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

}  // namespace

void save_checkpoint(const ModelParams<float>& params, const fs::path& path) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : params.tensors) {
    tensors.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"count", t.values.size()},
                       {"trainable", t.trainable}});
    offset += t.values.size();
  }
  const json header = {{"format_version", kFormatVersion},
                       {"config", to_json(params.config)},
                       {"tensors", tensors}};
  const std::string text = header.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_le64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : params.tensors) write_f32(out, t.values);
  if (!out) throw DataError("write failed for checkpoint " + path.string());
}

ModelParams<float> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError(path.string() + " is not a model checkpoint");
  }
  const std::uint64_t header_len = read_le64(in);
  if (header_len > (1u << 26)) throw DataError("checkpoint header too large");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("truncated checkpoint header");

  ModelParams<float> params;
  std::vector<std::uint64_t> counts;
  try {
    const json header = json::parse(text);
    if (header.at("format_version").get<int>() != kFormatVersion) {
      throw DataError("unsupported checkpoint format version");
    }
    params.config = model_config_from_json(header.at("config"));
    for (const auto& t : header.at("tensors")) {
      params.tensors.push_back({t.at("name").get<std::string>(),
                                t.at("shape").get<std::vector<int>>(), {},
                                t.at("trainable").get<bool>()});
      counts.push_back(t.at("count").get<std::uint64_t>());
    }
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  for (std::size_t n = 0; n < params.tensors.size(); ++n) {
    auto& t = params.tensors[n];
    std::uint64_t expect = 1;
    for (int d : t.shape) expect *= static_cast<std::uint64_t>(d);
    if (expect != counts[n]) throw DataError("checkpoint tensor " + t.name + " has inconsistent shape");
    t.values.resize(counts[n]);
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(counts[n] * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint payload in " + path.string());
    if constexpr (std::endian::native == std::endian::big) {
      for (float& v : t.values) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
        v = std::bit_cast<float>(bits);
      }
    }
    for (float v : t.values) {
      if (!std::isfinite(v)) throw DataError("checkpoint tensor " + t.name + " holds non-finite values");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint " + path.string() + " has trailing bytes");
  }
  // Validate against the layout the config implies.
  const ModelParams<float> reference = WideResNet<float>(params.config).init(SeededRng(0));
  if (reference.tensors.size() != params.tensors.size()) {
    throw DataError("checkpoint tensors do not match its model configuration");
  }
  for (std::size_t n = 0; n < params.tensors.size(); ++n) {
    if (reference.tensors[n].name != params.tensors[n].name ||
        reference.tensors[n].shape != params.tensors[n].shape) {
      throw DataError("checkpoint tensor " + params.tensors[n].name +
                      " does not match its model configuration");
    }
  }
  return params;
}

}  // namespace fpi
