/*
 * Copyright (c) 2026, the m2former authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/signal.hpp"
#include "m2f/tensor.hpp"

namespace m2f {

/// Shared-weight per-microphone embedding: magnitude and phase features are
/// projected separately, concatenated, and projected again to the embedding
/// dim. Every microphone channel runs through the same weights.
struct ChannelEmbedConfig {
  std::size_t f_bins = 0;  // F: input features are [mag F | phase 2F]
  std::size_t d_mag = 0;
  std::size_t d_pha = 0;
  std::size_t d_out = 0;
  Parameter w_mag, b_mag;  // F x d_mag, d_mag
  Parameter w_pha, b_pha;  // 2F x d_pha, d_pha
  Parameter w_emb, b_emb;  // (d_mag + d_pha) x d_out, d_out

  static ChannelEmbedConfig init(std::size_t f_bins, std::size_t d_mag, std::size_t d_pha,
                                 std::size_t d_out, Rng& rng, const std::string& prefix) {
    ChannelEmbedConfig cfg;
    cfg.f_bins = f_bins;
    cfg.d_mag = d_mag;
    cfg.d_pha = d_pha;
    cfg.d_out = d_out;
    cfg.w_mag = Parameter(prefix + ".w_mag", fan_in_uniform({f_bins, d_mag}, f_bins, rng));
    cfg.b_mag = Parameter(prefix + ".b_mag", Tensor::zeros({d_mag}));
    cfg.w_pha = Parameter(prefix + ".w_pha", fan_in_uniform({2 * f_bins, d_pha}, 2 * f_bins, rng));
    cfg.b_pha = Parameter(prefix + ".b_pha", Tensor::zeros({d_pha}));
    cfg.w_emb = Parameter(prefix + ".w_emb",
                          fan_in_uniform({d_mag + d_pha, d_out}, d_mag + d_pha, rng));
    cfg.b_emb = Parameter(prefix + ".b_emb", Tensor::zeros({d_out}));
    return cfg;
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w_mag);
    out.push_back(&b_mag);
    out.push_back(&w_pha);
    out.push_back(&b_pha);
    out.push_back(&w_emb);
    out.push_back(&b_emb);
  }
};

inline FeatureStack channel_embed(const FeatureStack& x, const ChannelEmbedConfig& cfg) {
  if (x.features() != 3 * cfg.f_bins) {
    throw std::invalid_argument("channel_embed: expected " + std::to_string(3 * cfg.f_bins) +
                                " features, got " + std::to_string(x.features()));
  }
  std::vector<Tensor> planes;
  planes.reserve(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    Tensor plane = slice_plane(x.data, c);  // [T x 3F]
    Tensor mag = slice_cols(plane, 0, cfg.f_bins);
    Tensor pha = slice_cols(plane, cfg.f_bins, 3 * cfg.f_bins);
    Tensor pm = add_rowwise(matmul(mag, cfg.w_mag.value), cfg.b_mag.value);
    Tensor pp = add_rowwise(matmul(pha, cfg.w_pha.value), cfg.b_pha.value);
    Tensor emb = add_rowwise(matmul(concat_cols({pm, pp}), cfg.w_emb.value), cfg.b_emb.value);
    planes.push_back(std::move(emb));
  }
  FeatureStack out;
  out.data = stack_planes(planes);
  out.axis_meaning = AxisMeaning::microphones;
  out.frame_rate = x.frame_rate;
  return out;
}

/// Decoupling-and-downsampling conv stack. Microphones are the conv input
/// channels over the (frames x embedding) plane; every layer is a 3x3
/// zero-padded conv followed by ReLU. The first two layers carry strides
/// [2,2] and [2,1] (frames quarter, features halve once), the rest [1,1].
/// A final per-position linear projection maps the halved feature axis
/// back to the model dim and carries no activation.
struct CnnddConfig {
  std::size_t in_mics = 0;
  std::size_t d_in = 0;     // embedding dim entering the stack
  std::size_t d_model = 0;  // dim after post projection
  std::vector<std::size_t> layer_channels = {6, 6, 10, 10, 20, 20, 40, 40};
  std::vector<Parameter> kernels;  // per layer: [out_ch x in_ch x 3 x 3]
  std::vector<Parameter> biases;   // per layer: [out_ch]
  Parameter proj_w, proj_b;        // d_half x d_model, d_model

  static constexpr std::size_t min_frames = 4;

  std::size_t out_channels() const { return layer_channels.back(); }
  std::size_t d_half() const { return (d_in + 1) / 2; }

  static std::pair<std::size_t, std::size_t> stride_for_layer(std::size_t l) {
    if (l == 0) return {2, 2};
    if (l == 1) return {2, 1};
    return {1, 1};
  }

  static CnnddConfig init(std::size_t in_mics, std::size_t d_in, std::size_t d_model,
                          std::vector<std::size_t> layer_channels, Rng& rng,
                          const std::string& prefix) {
    if (layer_channels.size() < 2) {
      throw std::invalid_argument("CnnddConfig: need at least 2 conv layers for the stride "
                                  "schedule");
    }
    CnnddConfig cfg;
    cfg.in_mics = in_mics;
    cfg.d_in = d_in;
    cfg.d_model = d_model;
    cfg.layer_channels = std::move(layer_channels);
    std::size_t prev = in_mics;
    for (std::size_t l = 0; l < cfg.layer_channels.size(); ++l) {
      const std::size_t ch = cfg.layer_channels[l];
      cfg.kernels.emplace_back(prefix + ".conv" + std::to_string(l) + ".k",
                               fan_in_uniform({ch, prev, 3, 3}, prev * 9, rng));
      cfg.biases.emplace_back(prefix + ".conv" + std::to_string(l) + ".b", Tensor::zeros({ch}));
      prev = ch;
    }
    cfg.proj_w = Parameter(prefix + ".proj.w",
                           fan_in_uniform({cfg.d_half(), d_model}, cfg.d_half(), rng));
    cfg.proj_b = Parameter(prefix + ".proj.b", Tensor::zeros({d_model}));
    return cfg;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter& p : kernels) out.push_back(&p);
    for (Parameter& p : biases) out.push_back(&p);
    out.push_back(&proj_w);
    out.push_back(&proj_b);
  }
};

inline FeatureStack cnndd_forward(const FeatureStack& x, const CnnddConfig& cfg) {
  if (x.axis_meaning != AxisMeaning::microphones) {
    throw std::invalid_argument("cnndd_forward: input channels are already decoupled");
  }
  if (x.channels() != cfg.in_mics) {
    throw std::invalid_argument("cnndd_forward: expected " + std::to_string(cfg.in_mics) +
                                " microphones, got " + std::to_string(x.channels()));
  }
  if (x.frames() < CnnddConfig::min_frames) {
    throw std::invalid_argument("cnndd_forward: " + std::to_string(x.frames()) +
                                " frames is below the stride schedule minimum of " +
                                std::to_string(CnnddConfig::min_frames));
  }
  if (x.features() != cfg.d_in) {
    throw std::invalid_argument("cnndd_forward: expected feature dim " + std::to_string(cfg.d_in) +
                                ", got " + std::to_string(x.features()));
  }
  Tensor h = x.data;
  for (std::size_t l = 0; l < cfg.layer_channels.size(); ++l) {
    h = conv2d(h, cfg.kernels[l].value, CnnddConfig::stride_for_layer(l), {1, 1});
    h = relu(add_channel_bias(h, cfg.biases[l].value));
  }
  const std::size_t c_out = h.dim(0);
  std::vector<Tensor> planes;
  planes.reserve(c_out);
  for (std::size_t c = 0; c < c_out; ++c) {
    Tensor plane = slice_plane(h, c);  // [T' x d_half]
    planes.push_back(add_rowwise(matmul(plane, cfg.proj_w.value), cfg.proj_b.value));
  }
  FeatureStack out;
  out.data = stack_planes(planes);
  out.axis_meaning = AxisMeaning::decoupled;
  out.frame_rate = x.frame_rate / 4.0;
  return out;
}

/// Sinusoidal positional table: pe[t, 2i] = sin(t / 10000^{2i/d}),
/// pe[t, 2i+1] = cos(same). Identical across channels.
inline Tensor positional_table(std::size_t frames, std::size_t d) {
  std::vector<double> pe(frames * d);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t pair = j / 2 * 2;
      const double rate = std::pow(10000.0, static_cast<double>(pair) / static_cast<double>(d));
      const double arg = static_cast<double>(t) / rate;
      pe[t * d + j] = (j % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
  return Tensor::from_data({frames, d}, std::move(pe));
}

inline FeatureStack add_positional(const FeatureStack& x) {
  const Tensor pe = positional_table(x.frames(), x.features());
  std::vector<Tensor> planes;
  planes.reserve(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    planes.push_back(add(slice_plane(x.data, c), pe));
  }
  FeatureStack out;
  out.data = stack_planes(planes);
  out.axis_meaning = x.axis_meaning;
  out.frame_rate = x.frame_rate;
  return out;
}

}  // namespace m2f
