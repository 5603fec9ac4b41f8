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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/frontend.hpp"
#include "m2f/layers.hpp"
#include "m2f/tensor.hpp"

namespace m2f {

/// Token ids over the dataset alphabet; blank (0) never appears here.
struct TokenSequence {
  std::vector<int> tokens;

  std::size_t length() const { return tokens.size(); }
};

struct LossConfig {
  double lambda = 0.3;    // CTC weight in the combined loss
  double smoothing = 0.1; // label smoothing for the attention term

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw std::invalid_argument("LossConfig: lambda must be in [0, 1]");
    }
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
      throw std::invalid_argument("LossConfig: smoothing must be in [0, 1)");
    }
  }
};

/// One pre-norm decoder block: causal self-attention, cross-attention to
/// the encoder sequence, feed-forward.
struct DecoderBlockParams {
  AttentionParams self_attn, cross;
  FfnParams ffn;
  LayerNormParams ln_self, ln_cross, ln_ffn;

  static DecoderBlockParams init(std::size_t d_model, std::size_t heads, std::size_t d_ff,
                                 Rng& rng, const std::string& prefix) {
    DecoderBlockParams p;
    p.self_attn = AttentionParams::init(d_model, heads, rng, prefix + ".self");
    p.cross = AttentionParams::init(d_model, heads, rng, prefix + ".cross");
    p.ffn = FfnParams::init(d_model, d_ff, rng, prefix + ".ffn");
    p.ln_self = LayerNormParams::init(d_model, prefix + ".ln_self");
    p.ln_cross = LayerNormParams::init(d_model, prefix + ".ln_cross");
    p.ln_ffn = LayerNormParams::init(d_model, prefix + ".ln_ffn");
    return p;
  }

  void collect(std::vector<Parameter*>& out) {
    self_attn.collect(out);
    cross.collect(out);
    ffn.collect(out);
    ln_self.collect(out);
    ln_cross.collect(out);
    ln_ffn.collect(out);
  }
};

/// Decoder classes are laid out as: 0 = start token, 1..vocab = real token
/// ids, vocab+1 = end token. CTC classes: 0 = blank, 1..vocab = token ids.
struct DecoderParams {
  std::size_t d_model = 0;
  std::size_t heads = 0;
  std::size_t vocab = 0;
  Parameter embed;         // [(vocab+2) x d_model]
  std::vector<DecoderBlockParams> blocks;
  LayerNormParams ln_final;
  Parameter out_w, out_b;  // d_model -> vocab+2
  Parameter ctc_w, ctc_b;  // d_model -> vocab+1

  static DecoderParams init(std::size_t d_model, std::size_t heads, std::size_t n_blocks,
                            std::size_t vocab, std::size_t d_ff, Rng& rng,
                            const std::string& prefix) {
    if (n_blocks == 0) throw std::invalid_argument("DecoderParams: need at least one block");
    if (vocab == 0) throw std::invalid_argument("DecoderParams: empty vocabulary");
    DecoderParams p;
    p.d_model = d_model;
    p.heads = heads;
    p.vocab = vocab;
    p.embed = Parameter(prefix + ".embed",
                        fan_in_uniform({vocab + 2, d_model}, d_model, rng));
    for (std::size_t b = 0; b < n_blocks; ++b) {
      p.blocks.push_back(DecoderBlockParams::init(d_model, heads, d_ff, rng,
                                                  prefix + ".block" + std::to_string(b)));
    }
    p.ln_final = LayerNormParams::init(d_model, prefix + ".ln_final");
    p.out_w = Parameter(prefix + ".out.w", fan_in_uniform({d_model, vocab + 2}, d_model, rng));
    p.out_b = Parameter(prefix + ".out.b", Tensor::zeros({vocab + 2}));
    p.ctc_w = Parameter(prefix + ".ctc.w", fan_in_uniform({d_model, vocab + 1}, d_model, rng));
    p.ctc_b = Parameter(prefix + ".ctc.b", Tensor::zeros({vocab + 1}));
    return p;
  }

  int start_class() const { return 0; }
  int end_class() const { return static_cast<int>(vocab) + 1; }
  std::size_t decoder_classes() const { return vocab + 2; }
  std::size_t ctc_classes() const { return vocab + 1; }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&embed);
    for (DecoderBlockParams& b : blocks) b.collect(out);
    ln_final.collect(out);
    for (Parameter* p : {&out_w, &out_b, &ctc_w, &ctc_b}) out.push_back(p);
  }
};

namespace detail {

inline void check_token_range(const TokenSequence& target, std::size_t vocab,
                              const char* who) {
  for (int t : target.tokens) {
    if (t < 1 || t > static_cast<int>(vocab)) {
      throw std::invalid_argument(std::string(who) + ": token id " + std::to_string(t) +
                                  " outside [1, " + std::to_string(vocab) + "]");
    }
  }
}

}  // namespace detail

/// Shared linear map from encoder features to CTC logits [T' x (vocab+1)].
inline Tensor ctc_projection(const Tensor& enc, const DecoderParams& p) {
  if (enc.ndim() != 2 || enc.dim(1) != p.d_model) {
    throw std::invalid_argument("ctc_projection: encoder features must be [T' x " +
                                std::to_string(p.d_model) + "]");
  }
  return add_rowwise(matmul(enc, p.ctc_w.value), p.ctc_b.value);
}

/// Teacher-forced decoder pass. The target is prefixed with the start
/// token internally, so row i of the logits predicts target position i
/// (and the final row predicts the end token). Output is
/// [(L+1) x (vocab+2)].
inline Tensor decoder_forward(const Tensor& enc, const TokenSequence& targets,
                              const DecoderParams& p) {
  if (enc.ndim() != 2 || enc.dim(1) != p.d_model) {
    throw std::invalid_argument("decoder_forward: encoder features must be [T' x " +
                                std::to_string(p.d_model) + "]");
  }
  if (enc.dim(0) == 0) {
    throw std::invalid_argument("decoder_forward: empty encoder sequence");
  }
  detail::check_token_range(targets, p.vocab, "decoder_forward");

  std::vector<int> ids;
  ids.reserve(targets.length() + 1);
  ids.push_back(p.start_class());
  ids.insert(ids.end(), targets.tokens.begin(), targets.tokens.end());

  Tensor h = add(scale(gather_rows(p.embed.value, ids),
                       std::sqrt(static_cast<double>(p.d_model))),
                 positional_table(ids.size(), p.d_model));
  for (const DecoderBlockParams& b : p.blocks) {
    Tensor sn = b.ln_self(h);
    h = add(h, multi_head_attention(sn, sn, b.self_attn, /*causal=*/true));
    h = add(h, multi_head_attention(b.ln_cross(h), enc, b.cross));
    h = add(h, b.ffn(b.ln_ffn(h)));
  }
  return add_rowwise(matmul(p.ln_final(h), p.out_w.value), p.out_b.value);
}

/// CTC loss by the forward algorithm in log space. Only reachable lattice
/// states are materialized and only valid predecessors are combined, so no
/// infinities ever enter the computation graph.
inline Tensor ctc_loss(const Tensor& enc_logits, const TokenSequence& target) {
  if (enc_logits.ndim() != 2 || enc_logits.dim(1) < 2) {
    throw std::invalid_argument("ctc_loss: logits must be [T' x (vocab+1)]");
  }
  if (target.tokens.empty()) throw std::invalid_argument("ctc_loss: empty target");
  const std::size_t t_len = enc_logits.dim(0);
  const std::size_t vocab = enc_logits.dim(1) - 1;
  detail::check_token_range(target, vocab, "ctc_loss");

  const std::size_t l = target.length();
  std::size_t required = l;
  for (std::size_t i = 1; i < l; ++i) {
    if (target.tokens[i] == target.tokens[i - 1]) ++required;
  }
  if (t_len < required) {
    throw std::invalid_argument("ctc_loss: target needs at least " + std::to_string(required) +
                                " frames, got " + std::to_string(t_len));
  }

  const std::size_t m = 2 * l + 1;  // blank-interleaved lattice states
  auto state_label = [&](std::size_t s) {
    return (s % 2 == 1) ? static_cast<std::size_t>(target.tokens[s / 2]) : std::size_t{0};
  };
  Tensor lp = log_softmax(enc_logits, 1);

  // alpha[s] holds the log mass of state s at the current frame; a state
  // is absent (present[s] == 0) when no valid alignment prefix reaches it
  // or it can no longer finish in the remaining frames.
  std::vector<Tensor> alpha(m), next(m);
  std::vector<char> present(m, 0), next_present(m, 0);
  auto window = [&](std::size_t t, std::size_t& lo, std::size_t& hi) {
    const std::size_t deficit = 2 * (t_len - t);
    lo = (m > deficit) ? m - deficit : 0;
    hi = std::min(2 * t + 1, m - 1);
  };
  std::size_t lo = 0, hi = 0;
  window(0, lo, hi);
  for (std::size_t s = lo; s <= hi; ++s) {
    alpha[s] = pick(lp, 0, state_label(s));
    present[s] = 1;
  }

  for (std::size_t t = 1; t < t_len; ++t) {
    window(t, lo, hi);
    std::fill(next_present.begin(), next_present.end(), char{0});
    for (std::size_t s = lo; s <= hi; ++s) {
      Tensor acc;
      bool have = false;
      auto take = [&](std::size_t q) {
        if (!present[q]) return;
        acc = have ? logaddexp(acc, alpha[q]) : alpha[q];
        have = true;
      };
      take(s);
      if (s >= 1) take(s - 1);
      if (s >= 2 && s % 2 == 1 && state_label(s) != state_label(s - 2)) take(s - 2);
      if (have) {
        next[s] = add(acc, pick(lp, t, state_label(s)));
        next_present[s] = 1;
      }
    }
    std::swap(alpha, next);
    std::swap(present, next_present);
  }

  const bool end_blank = present[m - 1];
  const bool end_label = m >= 2 && present[m - 2];
  if (!end_blank && !end_label) {
    throw std::logic_error("ctc_loss: no alignment reached a final state");
  }
  Tensor total = end_blank && end_label ? logaddexp(alpha[m - 1], alpha[m - 2])
                                        : (end_blank ? alpha[m - 1] : alpha[m - 2]);
  return scale(total, -1.0);
}

/// Label-smoothed cross-entropy of decoder logits against the target
/// followed by the end token (the last class). Mean over positions.
inline Tensor attention_loss(const Tensor& logits, const TokenSequence& target,
                             double smoothing) {
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw std::invalid_argument("attention_loss: smoothing must be in [0, 1)");
  }
  if (logits.ndim() != 2 || logits.dim(1) < 3) {
    throw std::invalid_argument("attention_loss: logits must be [L+1 x (vocab+2)]");
  }
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (rows != target.length() + 1) {
    throw std::invalid_argument("attention_loss: " + std::to_string(rows) +
                                " logit rows for target length " +
                                std::to_string(target.length()));
  }
  detail::check_token_range(target, classes - 2, "attention_loss");

  std::vector<int> wanted(target.tokens);
  wanted.push_back(static_cast<int>(classes) - 1);  // end token
  std::vector<double> q(rows * classes, smoothing / static_cast<double>(classes));
  for (std::size_t i = 0; i < rows; ++i) {
    q[i * classes + static_cast<std::size_t>(wanted[i])] += 1.0 - smoothing;
  }
  Tensor dist = Tensor::from_data({rows, classes}, std::move(q));
  return scale(sum(mul(dist, log_softmax(logits, 1))), -1.0 / static_cast<double>(rows));
}

struct PitResult {
  std::vector<std::size_t> permutation;            // output index -> reference index
  std::vector<std::vector<double>> per_pair_ctc;   // [output][reference]
  Tensor total_loss;
  double ctc_sum = 0.0;  // unweighted CTC total under the chosen permutation
  double att_sum = 0.0;  // unweighted attention total under the chosen permutation
};

/// Joint PIT loss: the permutation is chosen by the CTC sums alone (ties
/// to the lexicographically smallest permutation), then held fixed while
/// the combined lambda * ctc + (1 - lambda) * attention loss is assembled
/// on the tape. The decoder runs once per assigned pair.
inline PitResult pit_loss(const std::vector<Tensor>& enc_outputs,
                          const std::vector<TokenSequence>& refs, const DecoderParams& p,
                          const LossConfig& cfg) {
  cfg.validate();
  const std::size_t n = enc_outputs.size();
  if (n == 0 || n != refs.size()) {
    throw std::invalid_argument("pit_loss: " + std::to_string(n) + " outputs vs " +
                                std::to_string(refs.size()) + " references");
  }
  if (n > 4) throw std::invalid_argument("pit_loss: factorial search capped at 4 speakers");

  std::vector<std::vector<double>> pair_ctc(n, std::vector<double>(n));
  {
    NoGradGuard ng;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor logits = ctc_projection(enc_outputs[i], p);
      for (std::size_t j = 0; j < n; ++j) {
        pair_ctc[i][j] = ctc_loss(logits, refs[j]).scalar_value();
      }
    }
  }

  std::vector<std::size_t> perm(n), best(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  best = perm;
  double best_sum = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += pair_ctc[i][perm[i]];
    if (s < best_sum) {
      best_sum = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  Tensor total = Tensor::scalar(0.0);
  double ctc_sum = 0.0, att_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const TokenSequence& ref = refs[best[i]];
    Tensor lc = ctc_loss(ctc_projection(enc_outputs[i], p), ref);
    Tensor la = attention_loss(decoder_forward(enc_outputs[i], ref, p), ref, cfg.smoothing);
    ctc_sum += lc.scalar_value();
    att_sum += la.scalar_value();
    total = add(total, add(scale(lc, cfg.lambda), scale(la, 1.0 - cfg.lambda)));
  }
  return PitResult{std::move(best), std::move(pair_ctc), std::move(total), ctc_sum, att_sum};
}

/// Autoregressive argmax decoding until the end token or max_len. The
/// start class is never emitted; ties go to the lowest class index.
inline TokenSequence greedy_decode(const Tensor& enc, const DecoderParams& p,
                                   std::size_t max_len) {
  NoGradGuard ng;
  TokenSequence out;
  for (std::size_t step = 0; step < max_len; ++step) {
    Tensor logits = decoder_forward(enc, out, p);
    const std::size_t last = logits.dim(0) - 1;
    const std::size_t classes = logits.dim(1);
    std::size_t best_c = 1;
    double best_v = logits.at(last, 1);
    for (std::size_t c = 2; c < classes; ++c) {
      if (logits.at(last, c) > best_v) {
        best_v = logits.at(last, c);
        best_c = c;
      }
    }
    if (best_c == static_cast<std::size_t>(p.end_class())) break;
    out.tokens.push_back(static_cast<int>(best_c));
  }
  return out;
}

}  // namespace m2f
