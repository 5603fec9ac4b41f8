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
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/tensor.hpp"

namespace m2f {

struct LayerNormParams {
  Parameter gain, bias;

  static LayerNormParams init(std::size_t d, const std::string& prefix) {
    LayerNormParams p;
    p.gain = Parameter(prefix + ".gain", Tensor::full({d}, 1.0));
    p.bias = Parameter(prefix + ".bias", Tensor::zeros({d}));
    return p;
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain.value, bias.value); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

struct FfnParams {
  Parameter w1, b1, w2, b2;

  static FfnParams init(std::size_t d, std::size_t hidden, Rng& rng, const std::string& prefix) {
    FfnParams p;
    p.w1 = Parameter(prefix + ".w1", fan_in_uniform({d, hidden}, d, rng));
    p.b1 = Parameter(prefix + ".b1", Tensor::zeros({hidden}));
    p.w2 = Parameter(prefix + ".w2", fan_in_uniform({hidden, d}, hidden, rng));
    p.b2 = Parameter(prefix + ".b2", Tensor::zeros({d}));
    return p;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = relu(add_rowwise(matmul(x, w1.value), b1.value));
    return add_rowwise(matmul(h, w2.value), b2.value);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
};

/// Q/K/V/output projections with biases for one multi-head attention layer.
struct AttentionParams {
  std::size_t d_model = 0;
  std::size_t heads = 0;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams init(std::size_t d_model, std::size_t heads, Rng& rng,
                              const std::string& prefix) {
    if (heads == 0 || d_model % heads != 0) {
      throw std::invalid_argument("AttentionParams: d_model " + std::to_string(d_model) +
                                  " not divisible by heads " + std::to_string(heads));
    }
    AttentionParams p;
    p.d_model = d_model;
    p.heads = heads;
    p.wq = Parameter(prefix + ".wq", fan_in_uniform({d_model, d_model}, d_model, rng));
    p.bq = Parameter(prefix + ".bq", Tensor::zeros({d_model}));
    p.wk = Parameter(prefix + ".wk", fan_in_uniform({d_model, d_model}, d_model, rng));
    p.bk = Parameter(prefix + ".bk", Tensor::zeros({d_model}));
    p.wv = Parameter(prefix + ".wv", fan_in_uniform({d_model, d_model}, d_model, rng));
    p.bv = Parameter(prefix + ".bv", Tensor::zeros({d_model}));
    p.wo = Parameter(prefix + ".wo", fan_in_uniform({d_model, d_model}, d_model, rng));
    p.bo = Parameter(prefix + ".bo", Tensor::zeros({d_model}));
    return p;
  }

  std::size_t d_k() const { return d_model / heads; }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) out.push_back(p);
  }
};

/// Strictly-upper-triangular additive mask (0 on and below the diagonal,
/// a large negative constant above) so softmax assigns ~0 weight to future
/// positions.
inline Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
  return Tensor::from_data({t, t}, std::move(m));
}

/// Scaled dot-product multi-head attention. Queries come from `q_in`
/// [Tq x d], keys and values from `kv_in` [Tk x d]; self-attention passes
/// the same tensor twice. `causal` requires Tq == Tk.
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                                   const AttentionParams& p, bool causal = false) {
  if (q_in.ndim() != 2 || q_in.dim(1) != p.d_model || kv_in.ndim() != 2 ||
      kv_in.dim(1) != p.d_model) {
    throw std::invalid_argument("multi_head_attention: inputs must be [T x " +
                                std::to_string(p.d_model) + "]");
  }
  const std::size_t tq = q_in.dim(0), tk = kv_in.dim(0), dk = p.d_k();
  if (causal && tq != tk) {
    throw std::invalid_argument("multi_head_attention: causal mask needs square attention");
  }
  Tensor q = add_rowwise(matmul(q_in, p.wq.value), p.bq.value);
  Tensor k = add_rowwise(matmul(kv_in, p.wk.value), p.bk.value);
  Tensor v = add_rowwise(matmul(kv_in, p.wv.value), p.bv.value);
  Tensor mask;
  if (causal) mask = causal_mask(tq);
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
    if (causal) scores = add(scores, mask);
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  return add_rowwise(matmul(concat_cols(heads), p.wo.value), p.bo.value);
}

}  // namespace m2f
