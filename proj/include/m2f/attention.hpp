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
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/layers.hpp"
#include "m2f/signal.hpp"
#include "m2f/tensor.hpp"

namespace m2f {

/// Row-stochastic inter-channel similarity. Row c holds the mixing weights
/// z_c* used to synthesize channel c's keys/values, and doubles as the
/// affinity input for clustering.
struct SimilarityMatrix {
  Tensor z;  // [C' x C'], rows sum to 1, entries in (0, 1)

  std::size_t channels() const { return z.dim(0); }
};

/// Symmetric boolean gate over channel pairs, diagonal always allowed.
/// Cross-channel mixing between (i, j) happens only when allowed.
class ChannelMask {
 public:
  ChannelMask() : ChannelMask(0) {}
  explicit ChannelMask(std::size_t channels)
      : channels_(channels), allowed_(channels * channels, 0) {
    for (std::size_t i = 0; i < channels; ++i) allowed_[i * channels + i] = 1;
  }

  static ChannelMask all_allowed(std::size_t channels) {
    ChannelMask m(channels);
    std::fill(m.allowed_.begin(), m.allowed_.end(), std::uint8_t{1});
    return m;
  }

  std::size_t channels() const { return channels_; }
  bool at(std::size_t i, std::size_t j) const { return allowed_[i * channels_ + j] != 0; }

  /// Symmetric set; the diagonal cannot be cleared.
  void set(std::size_t i, std::size_t j, bool allowed) {
    if (i == j && !allowed) {
      throw std::invalid_argument("ChannelMask: diagonal entries are always allowed");
    }
    allowed_[i * channels_ + j] = allowed ? 1 : 0;
    allowed_[j * channels_ + i] = allowed ? 1 : 0;
  }

  Tensor as_tensor() const {
    std::vector<double> m(allowed_.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = allowed_[i] ? 1.0 : 0.0;
    return Tensor::from_data({channels_, channels_}, std::move(m));
  }

 private:
  std::size_t channels_;
  std::vector<std::uint8_t> allowed_;
};

/// Output of the clustering-and-filtering layer: per-channel cluster labels,
/// per-label mean IFSD scores, and the kept labels ordered by descending
/// score (ties broken by lower label id).
struct ChannelAssignment {
  std::vector<int> labels;               // cluster id per decoupled channel
  std::vector<double> label_scores;      // indexed by label id
  std::vector<int> kept;                 // |kept| == n_speakers, score-ordered
  int n_speakers = 0;
};

/// One encoder block: pre-norm self-attention over frames within each
/// channel, its feed-forward sublayer, then the cross-channel attention
/// sublayer with its own feed-forward. Weights are shared across channels.
struct M2ABlockParams {
  std::size_t d_model = 0;
  std::size_t heads = 0;
  AttentionParams intra, cross;
  FfnParams ffn_intra, ffn_cross;
  LayerNormParams ln_intra_attn, ln_intra_ffn, ln_cross_attn, ln_cross_ffn;
  bool use_p = false;    // MCT variant: mix with learnable P instead of Z
  Parameter p_logits;    // [C' x C'], row-softmaxed at use time

  static M2ABlockParams init(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden,
                             Rng& rng, const std::string& prefix) {
    M2ABlockParams b;
    b.d_model = d_model;
    b.heads = heads;
    b.intra = AttentionParams::init(d_model, heads, rng, prefix + ".intra");
    b.cross = AttentionParams::init(d_model, heads, rng, prefix + ".cross");
    b.ffn_intra = FfnParams::init(d_model, ffn_hidden, rng, prefix + ".ffn_intra");
    b.ffn_cross = FfnParams::init(d_model, ffn_hidden, rng, prefix + ".ffn_cross");
    b.ln_intra_attn = LayerNormParams::init(d_model, prefix + ".ln_intra_attn");
    b.ln_intra_ffn = LayerNormParams::init(d_model, prefix + ".ln_intra_ffn");
    b.ln_cross_attn = LayerNormParams::init(d_model, prefix + ".ln_cross_attn");
    b.ln_cross_ffn = LayerNormParams::init(d_model, prefix + ".ln_cross_ffn");
    return b;
  }

  /// Zero logits start MCT at uniform mixing.
  static M2ABlockParams init_mct(std::size_t d_model, std::size_t heads, std::size_t ffn_hidden,
                                 std::size_t channels, Rng& rng, const std::string& prefix) {
    M2ABlockParams b = init(d_model, heads, ffn_hidden, rng, prefix);
    b.use_p = true;
    b.p_logits = Parameter(prefix + ".p_logits", Tensor::zeros({channels, channels}));
    return b;
  }

  void collect(std::vector<Parameter*>& out) {
    intra.collect(out);
    cross.collect(out);
    ffn_intra.collect(out);
    ffn_cross.collect(out);
    ln_intra_attn.collect(out);
    ln_intra_ffn.collect(out);
    ln_cross_attn.collect(out);
    ln_cross_ffn.collect(out);
    if (use_p) out.push_back(&p_logits);
  }
};

namespace detail {

inline void require_decoupled(const FeatureStack& x, const char* op) {
  if (x.axis_meaning != AxisMeaning::decoupled) {
    throw std::invalid_argument(std::string(op) + ": expects decoupled channels");
  }
}

inline void require_d_model(const FeatureStack& x, std::size_t d_model, const char* op) {
  if (x.features() != d_model) {
    throw std::invalid_argument(std::string(op) + ": feature dim " +
                                std::to_string(x.features()) + " != d_model " +
                                std::to_string(d_model));
  }
}

inline FeatureStack like(const FeatureStack& x, Tensor data) {
  FeatureStack out;
  out.data = std::move(data);
  out.axis_meaning = x.axis_meaning;
  out.frame_rate = x.frame_rate;
  return out;
}

}  // namespace detail

/// Per-channel pre-norm self-attention over frames plus its feed-forward
/// sublayer, identical weights for every channel.
inline FeatureStack intra_attention(const FeatureStack& x, const M2ABlockParams& p) {
  detail::require_decoupled(x, "intra_attention");
  detail::require_d_model(x, p.d_model, "intra_attention");
  std::vector<Tensor> planes;
  planes.reserve(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    Tensor h = slice_plane(x.data, c);
    Tensor n = p.ln_intra_attn(h);
    Tensor a = add(h, multi_head_attention(n, n, p.intra));
    Tensor out = add(a, p.ffn_intra(p.ln_intra_ffn(a)));
    planes.push_back(std::move(out));
  }
  return detail::like(x, stack_planes(planes));
}

/// Z = row_softmax((1/T') sum_t X_t X_t^T / sqrt(d_k)) over the raw input
/// features of the calling cross-channel sublayer. Stays on the tape; only
/// the clustering path detaches it.
///
/// With a mask, the softmax is taken over each row's allowed entries only
/// (disallowed pairs get a large negative bias). This equals zeroing and
/// renormalizing the full softmax in exact arithmetic, but stays stable
/// when out-of-cluster similarities dominate a row.
inline SimilarityMatrix similarity_matrix(const FeatureStack& x, std::size_t d_k,
                                          const ChannelMask* mask = nullptr) {
  detail::require_decoupled(x, "similarity_matrix");
  if (x.channels() < 2) {
    throw std::invalid_argument("similarity_matrix: need at least 2 channels");
  }
  if (d_k == 0) throw std::invalid_argument("similarity_matrix: d_k must be positive");
  const std::size_t c = x.channels(), t = x.frames(), d = x.features();
  Tensor flat = reshape(x.data, {c, t * d});
  Tensor gram = matmul(flat, transpose(flat));
  Tensor scaled = scale(gram, 1.0 / (static_cast<double>(t) * std::sqrt(static_cast<double>(d_k))));
  if (mask != nullptr) {
    if (mask->channels() != c) {
      throw std::invalid_argument("similarity_matrix: mask channel count mismatch");
    }
    std::vector<double> bias(c * c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (!mask->at(i, j)) bias[i * c + j] = -1e9;
      }
    }
    scaled = add(scaled, Tensor::from_data({c, c}, std::move(bias)));
  }
  return SimilarityMatrix{softmax(scaled, 1)};
}

namespace detail {

/// X-hat planes: row-stochastic mixture of channel planes by `weights`
/// ([C' x C'], already masked/renormalized when applicable).
inline Tensor mix_channels(const FeatureStack& x, const Tensor& weights) {
  const std::size_t c = x.channels(), t = x.frames(), d = x.features();
  Tensor flat = reshape(x.data, {c, t * d});
  return reshape(matmul(weights, flat), {c, t, d});
}

/// Shared body of the two cross-channel variants: queries from the unmixed
/// channel, keys/values from its mixture, pre-norm residual, then FFN.
inline FeatureStack cross_body(const FeatureStack& x, const Tensor& mix_weights,
                               const M2ABlockParams& p) {
  Tensor mixed = mix_channels(x, mix_weights);
  std::vector<Tensor> planes;
  planes.reserve(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    Tensor h = slice_plane(x.data, c);
    Tensor hat = slice_plane(mixed, c);
    Tensor a = add(h, multi_head_attention(p.ln_cross_attn(h), p.ln_cross_attn(hat), p.cross));
    Tensor out = add(a, p.ffn_cross(p.ln_cross_ffn(a)));
    planes.push_back(std::move(out));
  }
  return like(x, stack_planes(planes));
}

}  // namespace detail

/// Similarity-gated cross-channel attention: keys/values for channel c come
/// from the Z-weighted channel mixture (mask entries zeroed and rows
/// renormalized when a cluster mask is given).
inline FeatureStack cross_attention(const FeatureStack& x, const SimilarityMatrix& z,
                                    const M2ABlockParams& p, const ChannelMask* mask = nullptr) {
  detail::require_decoupled(x, "cross_attention");
  detail::require_d_model(x, p.d_model, "cross_attention");
  if (z.channels() != x.channels() || z.z.dim(1) != x.channels()) {
    throw std::invalid_argument("cross_attention: similarity is " +
                                std::to_string(z.channels()) + " channels, input has " +
                                std::to_string(x.channels()));
  }
  Tensor weights = z.z;
  if (mask != nullptr) {
    if (mask->channels() != x.channels()) {
      throw std::invalid_argument("cross_attention: mask channel count mismatch");
    }
    weights = normalize_rows(mul(weights, mask->as_tensor()));
  }
  return detail::cross_body(x, weights, p);
}

/// Fixed-channel-count baseline: mixing weights are a learnable logit
/// matrix (row-softmaxed at use time) instead of the input similarity.
inline FeatureStack mct_cross_attention(const FeatureStack& x, const M2ABlockParams& p) {
  detail::require_decoupled(x, "mct_cross_attention");
  detail::require_d_model(x, p.d_model, "mct_cross_attention");
  if (!p.use_p) {
    throw std::invalid_argument("mct_cross_attention: block has no learnable P");
  }
  if (p.p_logits.value.dim(0) != x.channels()) {
    throw std::invalid_argument("mct_cross_attention: P is sized for " +
                                std::to_string(p.p_logits.value.dim(0)) +
                                " channels, input has " + std::to_string(x.channels()));
  }
  return detail::cross_body(x, softmax(p.p_logits.value, 1), p);
}

/// Mean of the channels sharing each kept label, one [T' x d] tensor per
/// speaker, ordered like assignment.kept (descending IFSD).
inline std::vector<Tensor> speaker_average(const FeatureStack& x,
                                           const ChannelAssignment& assignment) {
  detail::require_decoupled(x, "speaker_average");
  if (assignment.labels.size() != x.channels()) {
    throw std::invalid_argument("speaker_average: assignment covers " +
                                std::to_string(assignment.labels.size()) +
                                " channels, input has " + std::to_string(x.channels()));
  }
  std::vector<Tensor> outputs;
  outputs.reserve(assignment.kept.size());
  for (int label : assignment.kept) {
    Tensor acc;
    std::size_t count = 0;
    for (std::size_t c = 0; c < x.channels(); ++c) {
      if (assignment.labels[c] != label) continue;
      Tensor plane = slice_plane(x.data, c);
      acc = (count == 0) ? plane : add(acc, plane);
      ++count;
    }
    if (count == 0) {
      throw std::logic_error("speaker_average: kept label " + std::to_string(label) +
                             " has no channels");
    }
    outputs.push_back(scale(acc, 1.0 / static_cast<double>(count)));
  }
  return outputs;
}

}  // namespace m2f
