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
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/rng.hpp"
#include "m2f/tensor.hpp"

namespace m2f {

/// Synthetic vocabulary. Each real token id (1..vocab) owns a fixed
/// two-tone waveform signature of equal duration and unit RMS; id 0 is the
/// blank and never has a waveform. Tone frequencies are spaced on a 256-bin
/// grid of the sample rate so tokens are spectrally separable.
class TokenAlphabet {
 public:
  static constexpr int blank_id = 0;

  TokenAlphabet(std::size_t vocab, double sample_rate, double token_ms)
      : vocab_(vocab), sample_rate_(sample_rate), token_ms_(token_ms) {
    if (vocab_ < 1 || vocab_ > 12) {
      throw std::invalid_argument("TokenAlphabet: vocab must be in [1, 12], got " +
                                  std::to_string(vocab_));
    }
    const auto n = static_cast<std::size_t>(std::llround(token_ms / 1000.0 * sample_rate));
    if (n < 16) throw std::invalid_argument("TokenAlphabet: token duration too short");
    const double ramp_s = std::min<double>(0.005 * sample_rate, static_cast<double>(n) / 4.0);
    signatures_.resize(vocab_);
    for (std::size_t k = 1; k <= vocab_; ++k) {
      const double f1 = sample_rate * static_cast<double>(16 + 4 * k) / 256.0;
      const double f2 = sample_rate * static_cast<double>(64 + 4 * k) / 256.0;
      std::vector<double> sig(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        double env = 1.0;
        if (static_cast<double>(i) < ramp_s) {
          env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp_s);
        } else if (static_cast<double>(n - 1 - i) < ramp_s) {
          env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n - 1 - i) / ramp_s);
        }
        sig[i] = env * (std::sin(2.0 * std::numbers::pi * f1 * t) +
                        0.8 * std::sin(2.0 * std::numbers::pi * f2 * t));
      }
      double power = 0.0;
      for (double v : sig) power += v * v;
      const double rms = std::sqrt(power / static_cast<double>(n));
      for (double& v : sig) v /= rms;
      signatures_[k - 1] = std::move(sig);
    }
  }

  std::size_t vocab() const { return vocab_; }
  double sample_rate() const { return sample_rate_; }
  double token_ms() const { return token_ms_; }
  std::size_t signature_samples() const { return signatures_.front().size(); }

  const std::vector<double>& signature(int id) const {
    if (id <= blank_id || static_cast<std::size_t>(id) > vocab_) {
      throw std::invalid_argument("TokenAlphabet: no waveform for token id " + std::to_string(id));
    }
    return signatures_[static_cast<std::size_t>(id) - 1];
  }

  /// Concatenated signatures of a token sequence.
  std::vector<double> render(const std::vector<int>& ids) const {
    std::vector<double> out;
    out.reserve(ids.size() * signature_samples());
    for (int id : ids) {
      const auto& sig = signature(id);
      out.insert(out.end(), sig.begin(), sig.end());
    }
    return out;
  }

 private:
  std::size_t vocab_;
  double sample_rate_;
  double token_ms_;
  std::vector<std::vector<double>> signatures_;
};

/// Propagation of one source to every microphone: whole-sample delays from
/// the seeded geometry and per-microphone gains.
struct SourceMeta {
  std::vector<int> delay_samples;
  std::vector<double> gain;
};

struct MultiChannelRecording {
  std::vector<std::vector<double>> samples;  // C channels of equal length
  double sample_rate = 0.0;
  std::vector<std::vector<int>> transcripts;  // one token-id sequence per speaker
  std::vector<SourceMeta> source_meta;
  double noise_std = 0.0;  // per-sample white noise sigma actually applied
  double snr_db = 0.0;

  std::size_t channels() const { return samples.size(); }
  std::size_t length() const { return samples.empty() ? 0 : samples.front().size(); }
  std::size_t speakers() const { return transcripts.size(); }
};

enum class AxisMeaning { microphones, decoupled };

/// (channels x frames x features) activations. The channel axis means
/// physical microphones until the decoupling stack rewrites it.
struct FeatureStack {
  Tensor data;
  AxisMeaning axis_meaning = AxisMeaning::microphones;
  double frame_rate = 0.0;

  std::size_t channels() const { return data.dim(0); }
  std::size_t frames() const { return data.dim(1); }
  std::size_t features() const { return data.dim(2); }
};

struct MixtureConfig {
  std::size_t speakers = 2;
  std::size_t mics = 4;
  std::uint64_t seed = 0;
  double snr_db = 10.0;
  bool add_noise = true;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 5;
  double gain_lo = 0.5;
  double gain_hi = 1.0;
};

namespace detail {

constexpr double kSpeedOfSound = 343.0;  // m/s

/// Seeded room geometry: a 1 m diameter circular microphone array at the
/// center of a 5 m x 4 m room, speakers placed uniformly at least 0.8 m
/// from the array center. Only the resulting integer-sample delays and the
/// per-(source, mic) gains survive into the recording.
inline void draw_geometry(const MixtureConfig& cfg, double sample_rate, Rng& rng,
                          std::vector<SourceMeta>& meta) {
  const double cx = 2.5, cy = 2.0, mic_radius = 0.5;
  std::vector<std::pair<double, double>> mics(cfg.mics);
  for (std::size_t c = 0; c < cfg.mics; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                         static_cast<double>(cfg.mics);
    mics[c] = {cx + mic_radius * std::cos(angle), cy + mic_radius * std::sin(angle)};
  }
  meta.assign(cfg.speakers, SourceMeta{});
  for (std::size_t s = 0; s < cfg.speakers; ++s) {
    double sx = 0.0, sy = 0.0;
    do {
      sx = rng.uniform(0.2, 4.8);
      sy = rng.uniform(0.2, 3.8);
    } while (std::hypot(sx - cx, sy - cy) < 0.8);
    meta[s].delay_samples.resize(cfg.mics);
    meta[s].gain.resize(cfg.mics);
    for (std::size_t c = 0; c < cfg.mics; ++c) {
      const double dist = std::hypot(sx - mics[c].first, sy - mics[c].second);
      meta[s].delay_samples[c] =
          static_cast<int>(std::llround(dist / kSpeedOfSound * sample_rate));
      meta[s].gain[c] = rng.uniform(cfg.gain_lo, cfg.gain_hi);
    }
  }
}

}  // namespace detail

/// Deterministic synthetic mixture: every speaker utters a random token
/// sequence, each microphone receives every source delayed and scaled per
/// the seeded geometry, and white Gaussian noise is added at snr_db
/// relative to the mean clean mixture power.
inline MultiChannelRecording synth_mixture(const MixtureConfig& cfg,
                                           const TokenAlphabet& alphabet) {
  if (cfg.speakers < 1) throw std::invalid_argument("synth_mixture: need at least 1 speaker");
  if (cfg.mics < 2) throw std::invalid_argument("synth_mixture: need at least 2 microphones");
  if (cfg.min_tokens < 1 || cfg.max_tokens < cfg.min_tokens) {
    throw std::invalid_argument("synth_mixture: bad token count range");
  }
  const double fs = alphabet.sample_rate();

  MultiChannelRecording rec;
  rec.sample_rate = fs;
  rec.snr_db = cfg.snr_db;

  Rng geo = Rng::derive(cfg.seed, "geometry");
  detail::draw_geometry(cfg, fs, geo, rec.source_meta);

  Rng tok = Rng::derive(cfg.seed, "tokens");
  std::vector<std::vector<double>> sources(cfg.speakers);
  for (std::size_t s = 0; s < cfg.speakers; ++s) {
    const std::size_t len =
        cfg.min_tokens + tok.next_index(cfg.max_tokens - cfg.min_tokens + 1);
    std::vector<int> ids(len);
    for (int& id : ids) id = 1 + static_cast<int>(tok.next_index(alphabet.vocab()));
    sources[s] = alphabet.render(ids);
    rec.transcripts.push_back(std::move(ids));
  }

  std::size_t n = 0;
  for (std::size_t s = 0; s < cfg.speakers; ++s)
    for (std::size_t c = 0; c < cfg.mics; ++c)
      n = std::max(n, sources[s].size() +
                          static_cast<std::size_t>(rec.source_meta[s].delay_samples[c]));
  n += static_cast<std::size_t>(std::llround(0.01 * fs));  // trailing margin

  rec.samples.assign(cfg.mics, std::vector<double>(n, 0.0));
  for (std::size_t c = 0; c < cfg.mics; ++c)
    for (std::size_t s = 0; s < cfg.speakers; ++s) {
      const auto d = static_cast<std::size_t>(rec.source_meta[s].delay_samples[c]);
      const double g = rec.source_meta[s].gain[c];
      for (std::size_t i = 0; i < sources[s].size(); ++i) rec.samples[c][d + i] += g * sources[s][i];
    }

  double power = 0.0;
  for (const auto& ch : rec.samples)
    for (double v : ch) power += v * v;
  power /= static_cast<double>(cfg.mics * n);
  if (!(power > 0.0)) {
    throw std::runtime_error("synth_mixture: clean mixture has zero power, SNR undefined");
  }

  if (cfg.add_noise) {
    rec.noise_std = std::sqrt(power / std::pow(10.0, cfg.snr_db / 10.0));
    Rng noise = Rng::derive(cfg.seed, "noise");
    for (auto& ch : rec.samples)
      for (double& v : ch) v += rec.noise_std * noise.normal();
  }
  return rec;
}

/// Per-channel short-time Fourier features: for each frame, F magnitude
/// bins followed by F (cos, sin) phase pairs, 3F values total with
/// F = fft_size/2 + 1. Hann analysis window, zero padding to fft_size.
/// Zero-magnitude bins take phase (1, 0) by convention.
inline FeatureStack stft_features(const MultiChannelRecording& rec, double frame_ms,
                                  double shift_ms, std::size_t fft_size) {
  const double fs = rec.sample_rate;
  const auto frame = static_cast<std::size_t>(std::llround(frame_ms / 1000.0 * fs));
  const auto shift = static_cast<std::size_t>(std::llround(shift_ms / 1000.0 * fs));
  if (frame < 2 || shift < 1) throw std::invalid_argument("stft_features: degenerate frame/shift");
  if (frame > fft_size) {
    throw std::invalid_argument("stft_features: frame of " + std::to_string(frame) +
                                " samples exceeds fft_size " + std::to_string(fft_size));
  }
  const std::size_t n = rec.length();
  if (n < frame) {
    throw std::invalid_argument("stft_features: recording of " + std::to_string(n) +
                                " samples is shorter than one " + std::to_string(frame) +
                                "-sample frame");
  }
  const std::size_t t_frames = 1 + (n - frame) / shift;
  const std::size_t f_bins = fft_size / 2 + 1;
  const std::size_t c = rec.channels();

  std::vector<double> window(frame);
  for (std::size_t i = 0; i < frame; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(frame - 1));
  }
  // DFT basis tables, bin-major.
  std::vector<double> cos_tab(f_bins * frame), sin_tab(f_bins * frame);
  for (std::size_t k = 0; k < f_bins; ++k)
    for (std::size_t i = 0; i < frame; ++i) {
      const double arg = 2.0 * std::numbers::pi * static_cast<double>(k) *
                         static_cast<double>(i) / static_cast<double>(fft_size);
      cos_tab[k * frame + i] = std::cos(arg);
      sin_tab[k * frame + i] = std::sin(arg);
    }

  std::vector<double> data(c * t_frames * 3 * f_bins);
  std::vector<double> buf(frame);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const auto& wav = rec.samples[ch];
    for (std::size_t t = 0; t < t_frames; ++t) {
      for (std::size_t i = 0; i < frame; ++i) buf[i] = wav[t * shift + i] * window[i];
      double* out = data.data() + (ch * t_frames + t) * 3 * f_bins;
      for (std::size_t k = 0; k < f_bins; ++k) {
        double re = 0.0, im = 0.0;
        const double* ct = cos_tab.data() + k * frame;
        const double* st = sin_tab.data() + k * frame;
        for (std::size_t i = 0; i < frame; ++i) {
          re += buf[i] * ct[i];
          im -= buf[i] * st[i];
        }
        const double mag = std::hypot(re, im);
        out[k] = mag;
        if (mag > 0.0) {
          out[f_bins + 2 * k] = re / mag;
          out[f_bins + 2 * k + 1] = im / mag;
        } else {
          out[f_bins + 2 * k] = 1.0;
          out[f_bins + 2 * k + 1] = 0.0;
        }
      }
    }
  }
  FeatureStack fsck;
  fsck.data = Tensor::from_data({c, t_frames, 3 * f_bins}, std::move(data));
  fsck.axis_meaning = AxisMeaning::microphones;
  fsck.frame_rate = fs / static_cast<double>(shift);
  return fsck;
}

}  // namespace m2f
