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

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2f/signal.hpp"

namespace m2f {

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return out;
  }
}

inline void write_f64(const std::filesystem::path& path, const std::vector<double>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (double v : samples) {
    const std::uint64_t le = to_little_endian(std::bit_cast<std::uint64_t>(v));
    out.write(reinterpret_cast<const char*>(&le), sizeof(le));
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline std::vector<double> read_f64(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(double) != 0) {
    throw std::runtime_error(path.string() + " is not a whole number of f64 samples");
  }
  in.seekg(0);
  std::vector<double> samples(bytes / sizeof(double));
  for (double& v : samples) {
    std::uint64_t le = 0;
    in.read(reinterpret_cast<char*>(&le), sizeof(le));
    v = std::bit_cast<double>(to_little_endian(le));
  }
  if (!in) throw std::runtime_error("short read from " + path.string());
  return samples;
}

}  // namespace detail

/// One split on disk: the generation parameters (enough to rebuild the
/// alphabet and verify ground truth) plus the loaded recordings, in
/// manifest order.
struct Dataset {
  double sample_rate = 8000.0;
  std::size_t vocab = 8;
  double token_ms = 80.0;
  std::size_t speakers = 2;
  std::size_t mics = 4;
  double snr_db = 10.0;
  std::uint64_t seed = 0;
  std::vector<MultiChannelRecording> utterances;

  TokenAlphabet alphabet() const { return TokenAlphabet(vocab, sample_rate, token_ms); }
};

struct DatasetGenConfig {
  std::size_t utts = 10;
  MixtureConfig mixture;
  std::size_t vocab = 8;
  double token_ms = 80.0;
  double sample_rate = 8000.0;
};

/// Pure function of (config, seed): utterance i uses the substream
/// derive(seed, "utt<i>").
inline Dataset generate_dataset(const DatasetGenConfig& cfg) {
  TokenAlphabet alphabet(cfg.vocab, cfg.sample_rate, cfg.token_ms);
  Dataset ds;
  ds.sample_rate = cfg.sample_rate;
  ds.vocab = cfg.vocab;
  ds.token_ms = cfg.token_ms;
  ds.speakers = cfg.mixture.speakers;
  ds.mics = cfg.mixture.mics;
  ds.snr_db = cfg.mixture.snr_db;
  ds.seed = cfg.mixture.seed;
  ds.utterances.reserve(cfg.utts);
  for (std::size_t i = 0; i < cfg.utts; ++i) {
    MixtureConfig one = cfg.mixture;
    one.seed = Rng::derive(cfg.mixture.seed, "utt" + std::to_string(i)).next_u64();
    ds.utterances.push_back(synth_mixture(one, alphabet));
  }
  return ds;
}

/// Lays the split out as `utt<id>_ch<c>.f64` raw little-endian doubles plus
/// `manifest.json` carrying transcripts and full source metadata.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["sample_rate"] = ds.sample_rate;
  manifest["vocab"] = ds.vocab;
  manifest["token_ms"] = ds.token_ms;
  manifest["speakers"] = ds.speakers;
  manifest["mics"] = ds.mics;
  manifest["snr_db"] = ds.snr_db;
  manifest["seed"] = ds.seed;
  manifest["utterances"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.utterances.size(); ++i) {
    const MultiChannelRecording& rec = ds.utterances[i];
    nlohmann::json u;
    u["id"] = i;
    u["sample_rate"] = rec.sample_rate;
    u["snr_db"] = rec.snr_db;
    u["noise_std"] = rec.noise_std;
    u["transcripts"] = rec.transcripts;
    u["channels"] = nlohmann::json::array();
    for (std::size_t c = 0; c < rec.channels(); ++c) {
      const std::string name = "utt" + std::to_string(i) + "_ch" + std::to_string(c) + ".f64";
      detail::write_f64(dir / name, rec.samples[c]);
      u["channels"].push_back(name);
    }
    u["source_meta"] = nlohmann::json::array();
    for (const SourceMeta& sm : rec.source_meta) {
      u["source_meta"].push_back({{"delay_samples", sm.delay_samples}, {"gain", sm.gain}});
    }
    manifest["utterances"].push_back(std::move(u));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  Dataset ds;
  ds.sample_rate = manifest.at("sample_rate").get<double>();
  ds.vocab = manifest.at("vocab").get<std::size_t>();
  ds.token_ms = manifest.at("token_ms").get<double>();
  ds.speakers = manifest.at("speakers").get<std::size_t>();
  ds.mics = manifest.at("mics").get<std::size_t>();
  ds.snr_db = manifest.at("snr_db").get<double>();
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  for (const auto& u : manifest.at("utterances")) {
    MultiChannelRecording rec;
    rec.sample_rate = u.at("sample_rate").get<double>();
    rec.snr_db = u.at("snr_db").get<double>();
    rec.noise_std = u.at("noise_std").get<double>();
    rec.transcripts = u.at("transcripts").get<std::vector<std::vector<int>>>();
    for (const auto& name : u.at("channels")) {
      rec.samples.push_back(detail::read_f64(dir / name.get<std::string>()));
    }
    for (const auto& sm : u.at("source_meta")) {
      SourceMeta meta;
      meta.delay_samples = sm.at("delay_samples").get<std::vector<int>>();
      meta.gain = sm.at("gain").get<std::vector<double>>();
      rec.source_meta.push_back(std::move(meta));
    }
    ds.utterances.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace m2f
