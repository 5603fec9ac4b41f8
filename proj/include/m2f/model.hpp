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

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "m2f/attention.hpp"
#include "m2f/cf.hpp"
#include "m2f/config.hpp"
#include "m2f/dataset.hpp"
#include "m2f/decoder.hpp"
#include "m2f/frontend.hpp"
#include "m2f/signal.hpp"
#include "m2f/tensor.hpp"

namespace m2f {

/// Clustering options implied by a config. Disabling the score-based filter
/// collapses the pipeline to "cluster straight into n groups, keep all".
inline CfOptions cf_options_for(const ExperimentConfig& cfg, std::optional<int> n_speakers) {
  CfOptions o;
  o.ifsd_cfg.alpha = cfg.ifsd_alpha;
  o.ifsd_cfg.tau = cfg.ifsd_tau;
  o.n_speakers = n_speakers;
  o.d_k = cfg.d_model / cfg.heads;
  o.k_max = cfg.k_max;
  o.noise_cluster_in_estimate = cfg.noise_cluster_in_estimate;
  o.cluster_seed = cfg.cluster_seed;
  if (!cfg.ifsd_enabled) {
    o.filter = false;
    if (n_speakers.has_value()) o.k = *n_speakers;
  }
  return o;
}

/// The full encoder-decoder parameter set. The config that shaped it rides
/// along so checkpoints are self-describing.
struct ModelParams {
  ExperimentConfig cfg;
  ChannelEmbedConfig embed;
  CnnddConfig cnndd;
  std::vector<M2ABlockParams> blocks;  // n_m1 first-stage then n_m2 second-stage
  bool has_smooth = false;             // n_m2 == 0: linear layer stands in for stage 2
  Parameter smooth_w, smooth_b;
  LayerNormParams ln_out;
  DecoderParams decoder;

  static ModelParams init(const ExperimentConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams m;
    m.cfg = cfg;
    m.embed = ChannelEmbedConfig::init(cfg.f_bins(), cfg.d_mag, cfg.d_pha, cfg.d_emb, rng,
                                       "embed");
    m.cnndd = CnnddConfig::init(cfg.mics, cfg.d_emb, cfg.d_model, cfg.cnndd_channels, rng,
                                "cnndd");
    const std::size_t channels = m.cnndd.out_channels();
    for (std::size_t b = 0; b < cfg.n_m1 + cfg.n_m2; ++b) {
      const std::string prefix = "enc" + std::to_string(b);
      m.blocks.push_back(cfg.variant == CrossVariant::mct
                             ? M2ABlockParams::init_mct(cfg.d_model, cfg.heads, cfg.d_ff,
                                                        channels, rng, prefix)
                             : M2ABlockParams::init(cfg.d_model, cfg.heads, cfg.d_ff, rng,
                                                    prefix));
    }
    if (cfg.n_m2 == 0) {
      m.has_smooth = true;
      m.smooth_w = Parameter("smooth.w",
                             fan_in_uniform({cfg.d_model, cfg.d_model}, cfg.d_model, rng));
      m.smooth_b = Parameter("smooth.b", Tensor::zeros({cfg.d_model}));
    }
    m.ln_out = LayerNormParams::init(cfg.d_model, "ln_out");
    m.decoder = DecoderParams::init(cfg.d_model, cfg.heads, cfg.n_d, cfg.vocab, cfg.d_ff, rng,
                                    "dec");
    return m;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    embed.collect(out);
    cnndd.collect(out);
    for (M2ABlockParams& b : blocks) b.collect(out);
    if (has_smooth) {
      out.push_back(&smooth_w);
      out.push_back(&smooth_b);
    }
    ln_out.collect(out);
    decoder.collect(out);
    return out;
  }
};

struct EncodeResult {
  std::vector<Tensor> streams;  // one [T' x d_model] per kept speaker, score-ordered
  CfResult cf;                  // the assignment and mask actually used
};

inline FeatureStack features_for(const ExperimentConfig& cfg,
                                 const MultiChannelRecording& rec) {
  return stft_features(rec, cfg.frame_ms, cfg.shift_ms, cfg.fft_size);
}

namespace detail {

inline FeatureStack run_block(const FeatureStack& x, const M2ABlockParams& b,
                              CrossVariant variant, std::size_t d_k,
                              const ChannelMask* mask) {
  FeatureStack h = intra_attention(x, b);
  switch (variant) {
    case CrossVariant::m2a: {
      // Mask-aware softmax: in-cluster mixing weights never underflow even
      // when out-of-cluster similarities dominate the row.
      const SimilarityMatrix z = similarity_matrix(h, d_k, mask);
      return cross_attention(h, z, b, mask);
    }
    case CrossVariant::mct:
      return mct_cross_attention(h, b);
    case CrossVariant::none:
      return h;
  }
  throw std::logic_error("unknown cross variant");
}

}  // namespace detail

/// Full encoder: embed, decouple, positional, first-stage blocks, clustering
/// and filtering, masked second-stage blocks, per-speaker averaging.
///
/// Clustering runs between the stages only for the similarity-gated variant
/// with cf_enabled; MCT's fixed-size P (and a disabled CF) defer it to the
/// end of the stack, where it only arranges the speaker averaging.
///
/// `frozen` substitutes a precomputed assignment/mask for the clustering
/// call; the data path is unchanged (the discrete cluster decisions are held
/// fixed, which finite-difference checks require).
inline EncodeResult encode(const ModelParams& m, const FeatureStack& mic_feats,
                           std::optional<int> n_speakers,
                           const CfResult* frozen = nullptr) {
  const ExperimentConfig& cfg = m.cfg;
  const std::size_t d_k = cfg.d_model / cfg.heads;

  FeatureStack h = channel_embed(mic_feats, m.embed);
  h = cnndd_forward(h, m.cnndd);
  h = add_positional(h);

  const CfOptions cf_opt = cf_options_for(cfg, n_speakers);
  const bool cf_between = cfg.cf_enabled && cfg.variant == CrossVariant::m2a && cfg.n_m2 > 0;

  for (std::size_t b = 0; b < cfg.n_m1; ++b) {
    h = detail::run_block(h, m.blocks[b], cfg.variant, d_k, nullptr);
  }

  std::optional<CfResult> cf;
  if (cf_between) {
    cf = frozen != nullptr ? *frozen : cf_layer(h, cf_opt);
    for (std::size_t b = cfg.n_m1; b < cfg.n_m1 + cfg.n_m2; ++b) {
      h = detail::run_block(h, m.blocks[b], cfg.variant, d_k, &cf->mask);
    }
  } else {
    for (std::size_t b = cfg.n_m1; b < cfg.n_m1 + cfg.n_m2; ++b) {
      h = detail::run_block(h, m.blocks[b], cfg.variant, d_k, nullptr);
    }
    cf = frozen != nullptr ? *frozen : cf_layer(h, cf_opt);
  }

  if (m.has_smooth) {
    std::vector<Tensor> planes;
    planes.reserve(h.channels());
    for (std::size_t c = 0; c < h.channels(); ++c) {
      planes.push_back(add_rowwise(matmul(slice_plane(h.data, c), m.smooth_w.value),
                                   m.smooth_b.value));
    }
    h = detail::like(h, stack_planes(planes));
  }

  EncodeResult out;
  out.cf = *cf;
  for (Tensor& avg : speaker_average(h, cf->assignment)) {
    out.streams.push_back(m.ln_out(avg));
  }
  return out;
}

/// Training objective for one utterance: encode with the reference speaker
/// count, then the permutation-invariant joint loss.
inline PitResult forward_loss(const ModelParams& m, const FeatureStack& mic_feats,
                              const std::vector<TokenSequence>& refs, const LossConfig& lc) {
  if (refs.empty()) throw std::invalid_argument("forward_loss: no reference transcripts");
  EncodeResult enc = encode(m, mic_feats, static_cast<int>(refs.size()));
  return pit_loss(enc.streams, refs, m.decoder, lc);
}

// Checkpoint file layout (single file, mixed text header + raw payloads):
//   m2former checkpoint v1\n
//   step <n>\n
//   rng <hex> <hex> <hex> <hex>\n
//   config <byte count>\n
//   <config text, exactly that many bytes>
//   params <count>\n
//   then per parameter, in ModelParams::parameters() order:
//   param <name> <numel>\n followed by numel little-endian f64 values.

namespace detail {

inline void write_le_f64(std::ostream& out, const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t le = to_little_endian(std::bit_cast<std::uint64_t>(data[i]));
    out.write(reinterpret_cast<const char*>(&le), sizeof(le));
  }
}

inline void read_le_f64(std::istream& in, double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t le = 0;
    in.read(reinterpret_cast<char*>(&le), sizeof(le));
    data[i] = std::bit_cast<double>(to_little_endian(le));
  }
}

inline std::string expect_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error(std::string("checkpoint truncated before ") + what);
  }
  return line;
}

}  // namespace detail

struct Checkpoint {
  ModelParams model;
  std::size_t step = 0;
  std::array<std::uint64_t, 4> rng_state{};
};

inline void save_checkpoint(const std::filesystem::path& path, ModelParams& model,
                            std::size_t step, const std::array<std::uint64_t, 4>& rng_state) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << "m2former checkpoint v1\n";
    out << "step " << step << "\n";
    std::ostringstream rng_line;
    rng_line << std::hex;
    for (std::uint64_t w : rng_state) rng_line << " " << w;
    out << "rng" << rng_line.str() << "\n";
    const std::string cfg_text = to_text(model.cfg);
    out << "config " << cfg_text.size() << "\n" << cfg_text;
    std::vector<Parameter*> params = model.parameters();
    out << "params " << params.size() << "\n";
    for (Parameter* p : params) {
      const std::vector<double>& v = p->value.values();
      out << "param " << p->name << " " << v.size() << "\n";
      detail::write_le_f64(out, v.data(), v.size());
    }
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());

  if (detail::expect_line(in, "magic") != "m2former checkpoint v1") {
    throw std::runtime_error(path.string() + " is not an m2former v1 checkpoint");
  }
  Checkpoint ck;
  {
    std::istringstream l(detail::expect_line(in, "step"));
    std::string word;
    if (!(l >> word >> ck.step) || word != "step") {
      throw std::runtime_error("checkpoint: malformed step line");
    }
  }
  {
    std::istringstream l(detail::expect_line(in, "rng"));
    std::string word;
    l >> word >> std::hex;
    for (std::uint64_t& w : ck.rng_state) l >> w;
    if (!l || word != "rng") throw std::runtime_error("checkpoint: malformed rng line");
  }
  std::size_t cfg_bytes = 0;
  {
    std::istringstream l(detail::expect_line(in, "config"));
    std::string word;
    if (!(l >> word >> cfg_bytes) || word != "config") {
      throw std::runtime_error("checkpoint: malformed config line");
    }
  }
  std::string cfg_text(cfg_bytes, '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_bytes));
  if (!in) throw std::runtime_error("checkpoint truncated inside config block");
  const ExperimentConfig cfg = config_from_text(cfg_text);

  Rng init_rng(0);  // placeholder draws, every value is overwritten below
  ck.model = ModelParams::init(cfg, init_rng);
  std::vector<Parameter*> params = ck.model.parameters();

  std::size_t count = 0;
  {
    std::istringstream l(detail::expect_line(in, "params"));
    std::string word;
    if (!(l >> word >> count) || word != "params") {
      throw std::runtime_error("checkpoint: malformed params line");
    }
  }
  if (count != params.size()) {
    throw std::runtime_error("config/checkpoint mismatch: file has " + std::to_string(count) +
                             " parameters, config builds " + std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    std::istringstream l(detail::expect_line(in, "a param header"));
    std::string word, name;
    std::size_t numel = 0;
    if (!(l >> word >> name >> numel) || word != "param") {
      throw std::runtime_error("checkpoint: malformed param header");
    }
    std::vector<double>& v = p->value.values_mut();
    if (name != p->name || numel != v.size()) {
      throw std::runtime_error("config/checkpoint mismatch: expected " + p->name + "[" +
                               std::to_string(v.size()) + "], file has " + name + "[" +
                               std::to_string(numel) + "]");
    }
    detail::read_le_f64(in, v.data(), numel);
    if (!in) throw std::runtime_error("checkpoint truncated inside " + name);
  }
  return ck;
}

}  // namespace m2f
