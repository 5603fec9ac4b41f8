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

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2f {

enum class CrossVariant { m2a, mct, none };

inline std::string to_string(CrossVariant v) {
  switch (v) {
    case CrossVariant::m2a: return "m2a";
    case CrossVariant::mct: return "mct";
    case CrossVariant::none: return "none";
  }
  throw std::logic_error("unknown cross variant");
}

inline CrossVariant cross_variant_from(const std::string& s) {
  if (s == "m2a") return CrossVariant::m2a;
  if (s == "mct") return CrossVariant::mct;
  if (s == "none") return CrossVariant::none;
  throw std::invalid_argument("unknown cross-attention variant '" + s + "'");
}

/// Every training/evaluation knob, mirrored one-to-one by the flat
/// `key = value` config file format (see to_text for the key list).
struct ExperimentConfig {
  // data
  std::size_t speakers = 2;
  std::size_t mics = 4;
  std::size_t train_utts = 200;
  std::size_t eval_utts = 50;
  double snr_db = 10.0;
  std::uint64_t data_seed = 1000;
  std::size_t vocab = 8;
  double token_ms = 80.0;
  double sample_rate = 8000.0;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 5;

  // features
  double frame_ms = 8.0;
  double shift_ms = 4.0;
  std::size_t fft_size = 64;

  // model
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t n_m1 = 2;
  std::size_t n_m2 = 2;
  std::size_t n_d = 2;
  std::size_t d_ff = 128;
  std::size_t d_emb = 32;
  std::size_t d_mag = 24;
  std::size_t d_pha = 8;
  std::vector<std::size_t> cnndd_channels{4, 4, 8, 8};
  CrossVariant variant = CrossVariant::m2a;
  bool cf_enabled = true;
  bool ifsd_enabled = true;
  bool known_speaker_count = true;
  // Unknown-count convention: when true the estimated cluster count is read
  // as speakers + one noise cluster (n = k - 1); when false, n = k. The
  // desk-scale mixtures train into per-speaker blocks with no separate
  // noise block, so k itself is the speaker count here.
  bool noise_cluster_in_estimate = false;
  double ifsd_alpha = 5.3;
  std::size_t ifsd_tau = 3;
  std::size_t k_max = 6;
  std::uint64_t cluster_seed = 12345;

  // loss
  double lambda = 0.3;
  double smoothing = 0.1;

  // optimizer
  std::size_t steps = 2000;
  std::size_t batch = 2;
  double peak_lr = 2e-3;
  std::size_t warmup = 400;
  double clip_norm = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::uint64_t train_seed = 1;

  // evaluation
  std::size_t max_decode_len = 8;

  std::size_t f_bins() const { return fft_size / 2 + 1; }

  /// The paper-scale configuration: 256-dim, 3+3 encoder blocks, 6 decoder
  /// blocks, the 8-layer decoupling stack ending at 40 channels.
  void apply_paper_scale() {
    d_model = 256;
    heads = 4;
    n_m1 = 3;
    n_m2 = 3;
    n_d = 6;
    d_ff = 1024;
    d_emb = 80;
    d_mag = 56;
    d_pha = 24;
    cnndd_channels = {6, 6, 10, 10, 20, 20, 40, 40};
    ifsd_tau = 10;
  }

  void validate() const {
    if (speakers < 1 || speakers > 4) {
      throw std::invalid_argument("config: speakers must be in [1, 4]");
    }
    if (n_m1 + n_m2 == 0) {
      throw std::invalid_argument("config: need at least one encoder block (n_m1 + n_m2 > 0)");
    }
    // variant=mct never clusters between blocks: MCT's learnable P fixes the
    // channel count, so the encoder places clustering-and-filtering at the
    // end of the stack regardless of n_m1/n_m2 (enforced by the model, not
    // rejected here).
    if (vocab < 1 || vocab > 12) {
      throw std::invalid_argument("config: vocab must be in [1, 12]");
    }
    if (d_model % heads != 0) {
      throw std::invalid_argument("config: d_model must be divisible by heads");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw std::invalid_argument("config: lambda must be in [0, 1]");
    }
    if (batch == 0) throw std::invalid_argument("config: batch must be positive");
    if (warmup == 0) throw std::invalid_argument("config: warmup must be positive");
    if (cnndd_channels.size() < 2) {
      throw std::invalid_argument("config: cnndd_channels needs at least 2 layers");
    }
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    out.push_back(std::stoull(part));
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated size list");
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true/false, got '" + s + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

/// Serializes every key in a fixed order so equal configs produce
/// byte-identical text (checkpoints embed this block verbatim).
inline std::string to_text(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "data.speakers = " << c.speakers << "\n";
  o << "data.mics = " << c.mics << "\n";
  o << "data.train_utts = " << c.train_utts << "\n";
  o << "data.eval_utts = " << c.eval_utts << "\n";
  o << "data.snr_db = " << detail::fmt_double(c.snr_db) << "\n";
  o << "data.seed = " << c.data_seed << "\n";
  o << "data.vocab = " << c.vocab << "\n";
  o << "data.token_ms = " << detail::fmt_double(c.token_ms) << "\n";
  o << "data.sample_rate = " << detail::fmt_double(c.sample_rate) << "\n";
  o << "data.min_tokens = " << c.min_tokens << "\n";
  o << "data.max_tokens = " << c.max_tokens << "\n";
  o << "feat.frame_ms = " << detail::fmt_double(c.frame_ms) << "\n";
  o << "feat.shift_ms = " << detail::fmt_double(c.shift_ms) << "\n";
  o << "feat.fft_size = " << c.fft_size << "\n";
  o << "model.d_model = " << c.d_model << "\n";
  o << "model.heads = " << c.heads << "\n";
  o << "model.n_m1 = " << c.n_m1 << "\n";
  o << "model.n_m2 = " << c.n_m2 << "\n";
  o << "model.n_d = " << c.n_d << "\n";
  o << "model.d_ff = " << c.d_ff << "\n";
  o << "model.d_emb = " << c.d_emb << "\n";
  o << "model.d_mag = " << c.d_mag << "\n";
  o << "model.d_pha = " << c.d_pha << "\n";
  o << "model.cnndd_channels = " << detail::fmt_sizes(c.cnndd_channels) << "\n";
  o << "model.variant = " << to_string(c.variant) << "\n";
  o << "model.cf_enabled = " << (c.cf_enabled ? "true" : "false") << "\n";
  o << "model.ifsd_enabled = " << (c.ifsd_enabled ? "true" : "false") << "\n";
  o << "model.known_speaker_count = " << (c.known_speaker_count ? "true" : "false") << "\n";
  o << "model.noise_cluster_in_estimate = "
    << (c.noise_cluster_in_estimate ? "true" : "false") << "\n";
  o << "model.ifsd_alpha = " << detail::fmt_double(c.ifsd_alpha) << "\n";
  o << "model.ifsd_tau = " << c.ifsd_tau << "\n";
  o << "model.k_max = " << c.k_max << "\n";
  o << "model.cluster_seed = " << c.cluster_seed << "\n";
  o << "loss.lambda = " << detail::fmt_double(c.lambda) << "\n";
  o << "loss.smoothing = " << detail::fmt_double(c.smoothing) << "\n";
  o << "optim.steps = " << c.steps << "\n";
  o << "optim.batch = " << c.batch << "\n";
  o << "optim.peak_lr = " << detail::fmt_double(c.peak_lr) << "\n";
  o << "optim.warmup = " << c.warmup << "\n";
  o << "optim.clip_norm = " << detail::fmt_double(c.clip_norm) << "\n";
  o << "optim.beta1 = " << detail::fmt_double(c.beta1) << "\n";
  o << "optim.beta2 = " << detail::fmt_double(c.beta2) << "\n";
  o << "optim.adam_eps = " << detail::fmt_double(c.adam_eps) << "\n";
  o << "optim.seed = " << c.train_seed << "\n";
  o << "eval.max_decode_len = " << c.max_decode_len << "\n";
  return o.str();
}

/// Parses the flat `key = value` format. Lines starting with # and blank
/// lines are skipped; unknown keys are an error (they are always typos).
inline ExperimentConfig config_from_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + t + "'");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    bool known = true;
    try {
      if (key == "data.speakers") c.speakers = std::stoull(val);
      else if (key == "data.mics") c.mics = std::stoull(val);
      else if (key == "data.train_utts") c.train_utts = std::stoull(val);
      else if (key == "data.eval_utts") c.eval_utts = std::stoull(val);
      else if (key == "data.snr_db") c.snr_db = std::stod(val);
      else if (key == "data.seed") c.data_seed = std::stoull(val);
      else if (key == "data.vocab") c.vocab = std::stoull(val);
      else if (key == "data.token_ms") c.token_ms = std::stod(val);
      else if (key == "data.sample_rate") c.sample_rate = std::stod(val);
      else if (key == "data.min_tokens") c.min_tokens = std::stoull(val);
      else if (key == "data.max_tokens") c.max_tokens = std::stoull(val);
      else if (key == "feat.frame_ms") c.frame_ms = std::stod(val);
      else if (key == "feat.shift_ms") c.shift_ms = std::stod(val);
      else if (key == "feat.fft_size") c.fft_size = std::stoull(val);
      else if (key == "model.d_model") c.d_model = std::stoull(val);
      else if (key == "model.heads") c.heads = std::stoull(val);
      else if (key == "model.n_m1") c.n_m1 = std::stoull(val);
      else if (key == "model.n_m2") c.n_m2 = std::stoull(val);
      else if (key == "model.n_d") c.n_d = std::stoull(val);
      else if (key == "model.d_ff") c.d_ff = std::stoull(val);
      else if (key == "model.d_emb") c.d_emb = std::stoull(val);
      else if (key == "model.d_mag") c.d_mag = std::stoull(val);
      else if (key == "model.d_pha") c.d_pha = std::stoull(val);
      else if (key == "model.cnndd_channels") c.cnndd_channels = detail::parse_sizes(val);
      else if (key == "model.variant") c.variant = cross_variant_from(val);
      else if (key == "model.cf_enabled") c.cf_enabled = detail::parse_bool(val);
      else if (key == "model.ifsd_enabled") c.ifsd_enabled = detail::parse_bool(val);
      else if (key == "model.known_speaker_count")
        c.known_speaker_count = detail::parse_bool(val);
      else if (key == "model.noise_cluster_in_estimate")
        c.noise_cluster_in_estimate = detail::parse_bool(val);
      else if (key == "model.ifsd_alpha") c.ifsd_alpha = std::stod(val);
      else if (key == "model.ifsd_tau") c.ifsd_tau = std::stoull(val);
      else if (key == "model.k_max") c.k_max = std::stoull(val);
      else if (key == "model.cluster_seed") c.cluster_seed = std::stoull(val);
      else if (key == "loss.lambda") c.lambda = std::stod(val);
      else if (key == "loss.smoothing") c.smoothing = std::stod(val);
      else if (key == "optim.steps") c.steps = std::stoull(val);
      else if (key == "optim.batch") c.batch = std::stoull(val);
      else if (key == "optim.peak_lr") c.peak_lr = std::stod(val);
      else if (key == "optim.warmup") c.warmup = std::stoull(val);
      else if (key == "optim.clip_norm") c.clip_norm = std::stod(val);
      else if (key == "optim.beta1") c.beta1 = std::stod(val);
      else if (key == "optim.beta2") c.beta2 = std::stod(val);
      else if (key == "optim.adam_eps") c.adam_eps = std::stod(val);
      else if (key == "optim.seed") c.train_seed = std::stoull(val);
      else if (key == "eval.max_decode_len") c.max_decode_len = std::stoull(val);
      else
        known = false;
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad value '" +
                                  val + "' for " + key + " (" + e.what() + ")");
    }
    if (!known) throw std::invalid_argument("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

inline ExperimentConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_text(buf.str());
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_text(a) == to_text(b);
}

}  // namespace m2f
