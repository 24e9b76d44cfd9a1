/* Copyright 2026 The ctlid Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
// Small feedforward encoder with manual backpropagation and plain SGD.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctlid/codec.hpp"
#include "ctlid/common.hpp"

namespace ctlid {

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

// Rectifier on hidden layers, identity on the output layer.
struct Encoder {
  std::vector<std::size_t> dims;
  std::vector<Layer> layers;
  bool frozen_first_layer = false;

  std::size_t input_dim() const { return dims.front(); }
  std::size_t output_dim() const { return dims.back(); }
};

using ParamGrads = std::vector<Layer>;

inline Encoder InitEncoder(const std::vector<std::size_t>& dims, std::uint64_t seed,
                           bool frozen_first_layer = false) {
  if (dims.size() < 2) Fail(ErrorKind::kValidation, "encoder needs at least two dims");
  for (auto d : dims) {
    if (d == 0) Fail(ErrorKind::kValidation, "encoder dims must be positive");
  }
  Encoder enc;
  enc.dims = dims;
  enc.frozen_first_layer = frozen_first_layer;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(dims[l]);
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    // He-uniform: variance 2 / fan_in.
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Layer layer{Matrix(out, in), Vector::Zero(out)};
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
    enc.layers.push_back(std::move(layer));
  }
  return enc;
}

// Single linear layer with weight I and bias 0.
inline Encoder IdentityEncoder(std::size_t dim) {
  Encoder enc;
  enc.dims = {dim, dim};
  const auto d = static_cast<Eigen::Index>(dim);
  enc.layers.push_back({Matrix::Identity(d, d), Vector::Zero(d)});
  return enc;
}

namespace detail {

// Post-activation outputs of every layer; acts[0] is the input.
inline std::vector<Matrix> ForwardTrace(const Encoder& enc, const Matrix& batch) {
  if (static_cast<std::size_t>(batch.cols()) != enc.input_dim()) {
    Fail(ErrorKind::kDimension, "batch dim " + std::to_string(batch.cols()) +
                                    " != encoder input dim " + std::to_string(enc.input_dim()));
  }
  std::vector<Matrix> acts;
  acts.reserve(enc.layers.size() + 1);
  acts.push_back(batch);
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const auto& layer = enc.layers[l];
    Matrix h = acts.back() * layer.weight.transpose();
    h.rowwise() += layer.bias.transpose();
    if (l + 1 < enc.layers.size()) h = h.cwiseMax(0.0);
    acts.push_back(std::move(h));
  }
  return acts;
}

}  // namespace detail

inline Matrix Encode(const Encoder& enc, const Matrix& batch) {
  return std::move(detail::ForwardTrace(enc, batch).back());
}

inline Matrix Encode(const Encoder& enc, const DescriptorMatrix& batch) {
  return Encode(enc, batch.ToMatrix());
}

// Gradient of sum(grad_output .* Encode(batch)) w.r.t. every parameter.
// A frozen first layer gets zero gradient. The rectifier's subgradient at 0
// is 0.
inline ParamGrads EncoderBackward(const Encoder& enc, const Matrix& batch,
                                  const Matrix& grad_output) {
  const auto acts = detail::ForwardTrace(enc, batch);
  if (grad_output.rows() != acts.back().rows() || grad_output.cols() != acts.back().cols()) {
    Fail(ErrorKind::kDimension, "grad_output shape does not match encoder output");
  }
  ParamGrads grads(enc.layers.size());
  Matrix delta = grad_output;
  for (std::size_t l = enc.layers.size(); l-- > 0;) {
    const auto& layer = enc.layers[l];
    if (l + 1 < enc.layers.size()) {
      delta = delta.cwiseProduct((acts[l + 1].array() > 0.0).cast<double>().matrix());
    }
    if (l == 0 && enc.frozen_first_layer) {
      grads[l] = {Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                  Vector::Zero(layer.bias.size())};
      break;
    }
    grads[l].weight = delta.transpose() * acts[l];
    grads[l].bias = delta.colwise().sum().transpose();
    if (l > 0) delta = delta * layer.weight;
  }
  return grads;
}

inline ParamGrads ZeroGrads(const Encoder& enc) {
  ParamGrads g;
  for (const auto& layer : enc.layers) {
    g.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                 Vector::Zero(layer.bias.size())});
  }
  return g;
}

inline void AddGrads(ParamGrads& acc, const ParamGrads& g, double scale = 1.0) {
  for (std::size_t l = 0; l < acc.size(); ++l) {
    acc[l].weight += scale * g[l].weight;
    acc[l].bias += scale * g[l].bias;
  }
}

inline void SgdStep(Encoder& enc, const ParamGrads& grads, double lr) {
  if (grads.size() != enc.layers.size()) Fail(ErrorKind::kDimension, "grad layer count mismatch");
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (grads[l].weight.rows() != enc.layers[l].weight.rows() ||
        grads[l].weight.cols() != enc.layers[l].weight.cols() ||
        grads[l].bias.size() != enc.layers[l].bias.size()) {
      Fail(ErrorKind::kDimension, "grad shape mismatch at layer " + std::to_string(l));
    }
    if (!grads[l].weight.allFinite() || !grads[l].bias.allFinite()) {
      Fail(ErrorKind::kNumeric, "non-finite gradient at layer " + std::to_string(l));
    }
  }
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (l == 0 && enc.frozen_first_layer) continue;
    enc.layers[l].weight -= lr * grads[l].weight;
    enc.layers[l].bias -= lr * grads[l].bias;
  }
}

// Piecewise-constant learning rate: (epochs, rate) stages in order.
struct LrSchedule {
  std::vector<std::pair<std::size_t, double>> stages;

  std::size_t total_epochs() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.first;
    return n;
  }
};

inline void ValidateSchedule(const LrSchedule& schedule) {
  if (schedule.stages.empty()) Fail(ErrorKind::kValidation, "empty learning-rate schedule");
  for (const auto& [epochs, rate] : schedule.stages) {
    if (epochs == 0) Fail(ErrorKind::kValidation, "schedule stage with zero epochs");
    if (!std::isfinite(rate) || rate <= 0) Fail(ErrorKind::kValidation, "learning rate must be positive");
  }
}

inline double LrAt(const LrSchedule& schedule, std::size_t epoch) {
  std::size_t end = 0;
  for (const auto& [epochs, rate] : schedule.stages) {
    end += epochs;
    if (epoch < end) return rate;
  }
  Fail(ErrorKind::kValidation, "epoch " + std::to_string(epoch) + " beyond schedule");
}

// ---------------------------------------------------------------------------
// Checkpoint: "CTLE", u32 version, u32 n_dims, u32 flags (bit0 = frozen first
// layer), u32 epochs_completed, u32 dims[n_dims], then per layer the weight
// (row-major) and bias as little-endian f64.

inline constexpr std::array<char, 4> kCheckpointMagic = {'C', 'T', 'L', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Encoder encoder;
  std::size_t epochs_completed = 0;
};

inline std::vector<char> SerializeCheckpoint(const Checkpoint& ckpt) {
  const auto& enc = ckpt.encoder;
  std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::PutLE<std::uint32_t>(out, kCheckpointVersion);
  detail::PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(enc.dims.size()));
  detail::PutLE<std::uint32_t>(out, enc.frozen_first_layer ? 1u : 0u);
  detail::PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.epochs_completed));
  for (auto d : enc.dims) detail::PutLE<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (const auto& layer : enc.layers) {
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) detail::PutLE<double>(out, layer.weight.data()[i]);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) detail::PutLE<double>(out, layer.bias[i]);
  }
  return out;
}

inline Checkpoint ParseCheckpoint(const std::vector<char>& bytes) {
  auto need = [&](std::size_t n) {
    if (bytes.size() < n) Fail(ErrorKind::kFormat, "truncated checkpoint");
  };
  need(20);
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    Fail(ErrorKind::kFormat, "bad checkpoint magic");
  }
  if (detail::GetLE<std::uint32_t>(bytes.data() + 4) != kCheckpointVersion) {
    Fail(ErrorKind::kFormat, "unsupported checkpoint version");
  }
  const auto n_dims = detail::GetLE<std::uint32_t>(bytes.data() + 8);
  const auto flags = detail::GetLE<std::uint32_t>(bytes.data() + 12);
  Checkpoint ckpt;
  ckpt.epochs_completed = detail::GetLE<std::uint32_t>(bytes.data() + 16);
  if (n_dims < 2) Fail(ErrorKind::kFormat, "checkpoint needs at least two dims");
  need(20 + 4 * std::size_t{n_dims});
  std::size_t pos = 20;
  auto& enc = ckpt.encoder;
  enc.frozen_first_layer = flags & 1u;
  for (std::uint32_t i = 0; i < n_dims; ++i, pos += 4) {
    enc.dims.push_back(detail::GetLE<std::uint32_t>(bytes.data() + pos));
    if (enc.dims.back() == 0) Fail(ErrorKind::kFormat, "zero layer dim in checkpoint");
  }
  for (std::size_t l = 0; l + 1 < enc.dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(enc.dims[l]);
    const auto out = static_cast<Eigen::Index>(enc.dims[l + 1]);
    Layer layer{Matrix(out, in), Vector(out)};
    need(pos + 8 * static_cast<std::size_t>(out * in + out));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i, pos += 8) {
      layer.weight.data()[i] = detail::GetLE<double>(bytes.data() + pos);
    }
    for (Eigen::Index i = 0; i < out; ++i, pos += 8) layer.bias[i] = detail::GetLE<double>(bytes.data() + pos);
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      Fail(ErrorKind::kNumeric, "non-finite checkpoint parameter");
    }
    enc.layers.push_back(std::move(layer));
  }
  if (pos != bytes.size()) Fail(ErrorKind::kFormat, "trailing bytes in checkpoint");
  return ckpt;
}

inline void WriteCheckpoint(const Checkpoint& ckpt, const fs::path& path) {
  detail::WriteAll(path, SerializeCheckpoint(ckpt));
}

inline Checkpoint ReadCheckpoint(const fs::path& path) {
  return ParseCheckpoint(detail::ReadAll(path));
}

}  // namespace ctlid
