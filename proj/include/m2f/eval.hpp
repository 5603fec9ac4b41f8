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
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2f/config.hpp"
#include "m2f/dataset.hpp"
#include "m2f/model.hpp"

namespace m2f {

/// Levenshtein distance with unit insert/delete/substitute costs.
inline std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1,
                         diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

struct UtteranceScore {
  std::size_t utt = 0;
  std::vector<std::size_t> permutation;  // hypothesis slot -> reference slot (padded)
  std::vector<std::size_t> distances;    // per hypothesis slot, under that permutation
  std::size_t ref_tokens = 0;            // total reference length (real speakers only)
  int estimated_speakers = 0;
  int reference_speakers = 0;
};

struct EvalReport {
  double token_error_rate = 0.0;      // attention-greedy decode (primary)
  double ctc_token_error_rate = 0.0;  // CTC-greedy decode (secondary)
  bool known_count = true;
  double speaker_count_accuracy = 0.0;  // meaningful only when !known_count
  std::vector<UtteranceScore> per_utterance;
};

namespace detail {

/// Minimum-cost assignment of hypotheses to references over all
/// permutations, after padding both sides with empty sequences so every
/// slot is matched (an unmatched hypothesis costs its full length, an
/// unmatched reference its own).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> score_permutation(
    const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  const std::size_t m = std::max(hyps.size(), refs.size());
  static const std::vector<int> empty;
  std::vector<std::vector<std::size_t>> cost(m, std::vector<std::size_t>(m));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      cost[i][j] = edit_distance(i < hyps.size() ? hyps[i] : empty,
                                 j < refs.size() ? refs[j] : empty);
    }
  }
  std::vector<std::size_t> perm(m), best(m);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  best = perm;
  std::size_t best_sum = static_cast<std::size_t>(-1);
  do {
    std::size_t s = 0;
    for (std::size_t i = 0; i < m; ++i) s += cost[i][perm[i]];
    if (s < best_sum) {
      best_sum = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::vector<std::size_t> dist(m);
  for (std::size_t i = 0; i < m; ++i) dist[i] = cost[i][best[i]];
  return {std::move(best), std::move(dist)};
}

/// Frame-wise argmax over the CTC head, then blank/repeat collapse.
inline std::vector<int> ctc_greedy(const Tensor& stream, const DecoderParams& p) {
  const Tensor logits = ctc_projection(stream, p);
  std::vector<int> out;
  int prev = 0;
  for (std::size_t t = 0; t < logits.dim(0); ++t) {
    std::size_t best = 0;
    double v = logits.at(t, 0);
    for (std::size_t c = 1; c < logits.dim(1); ++c) {
      if (logits.at(t, c) > v) {
        v = logits.at(t, c);
        best = c;
      }
    }
    const int b = static_cast<int>(best);
    if (b != 0 && b != prev) out.push_back(b);
    prev = b;
  }
  return out;
}

}  // namespace detail

/// Scores utterances [first, first + count) of the dataset. Hypotheses come
/// from greedy decoding of every kept speaker stream; scoring assigns them
/// to references by the minimum total edit distance over permutations.
/// The CTC head's frame-wise greedy decode is scored the same way and
/// reported as a secondary error rate.
inline EvalReport evaluate(const ModelParams& model, const Dataset& ds, std::size_t first,
                           std::size_t count, bool known_count) {
  if (first + count > ds.utterances.size()) {
    throw std::invalid_argument("evaluate: range [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") exceeds dataset size " +
                                std::to_string(ds.utterances.size()));
  }
  const ExperimentConfig& cfg = model.cfg;
  EvalReport report;
  report.known_count = known_count;
  std::size_t total_dist = 0, total_ref = 0, count_hits = 0, total_ctc_dist = 0;

  for (std::size_t u = first; u < first + count; ++u) {
    const MultiChannelRecording& rec = ds.utterances[u];
    NoGradGuard ng;  // inference only, keep every op off the tape
    const FeatureStack feats = features_for(cfg, rec);
    const std::optional<int> n =
        known_count ? std::optional<int>(static_cast<int>(rec.speakers())) : std::nullopt;
    const EncodeResult enc = encode(model, feats, n);

    std::vector<std::vector<int>> hyps, ctc_hyps;
    hyps.reserve(enc.streams.size());
    ctc_hyps.reserve(enc.streams.size());
    for (const Tensor& stream : enc.streams) {
      hyps.push_back(greedy_decode(stream, model.decoder, cfg.max_decode_len).tokens);
      ctc_hyps.push_back(detail::ctc_greedy(stream, model.decoder));
    }
    auto [perm, dist] = detail::score_permutation(hyps, rec.transcripts);
    auto [ctc_perm, ctc_dist] = detail::score_permutation(ctc_hyps, rec.transcripts);
    for (std::size_t d : ctc_dist) total_ctc_dist += d;

    UtteranceScore score;
    score.utt = u;
    score.permutation = std::move(perm);
    score.distances = std::move(dist);
    for (const std::vector<int>& r : rec.transcripts) score.ref_tokens += r.size();
    score.estimated_speakers = enc.cf.assignment.n_speakers;
    score.reference_speakers = static_cast<int>(rec.speakers());
    if (score.estimated_speakers == score.reference_speakers) ++count_hits;

    for (std::size_t d : score.distances) total_dist += d;
    total_ref += score.ref_tokens;
    report.per_utterance.push_back(std::move(score));
  }

  if (total_ref == 0) throw std::logic_error("evaluate: no reference tokens in the split");
  report.token_error_rate = static_cast<double>(total_dist) / static_cast<double>(total_ref);
  report.ctc_token_error_rate =
      static_cast<double>(total_ctc_dist) / static_cast<double>(total_ref);
  report.speaker_count_accuracy =
      count == 0 ? 0.0 : static_cast<double>(count_hits) / static_cast<double>(count);
  return report;
}

/// Scores the held-out tail (the last eval_utts utterances).
inline EvalReport evaluate_heldout(const ModelParams& model, const Dataset& ds,
                                   bool known_count) {
  const std::size_t n = model.cfg.eval_utts;
  if (ds.utterances.size() < n) {
    throw std::invalid_argument("evaluate: dataset has " +
                                std::to_string(ds.utterances.size()) +
                                " utterances, config wants a held-out tail of " +
                                std::to_string(n));
  }
  return evaluate(model, ds, ds.utterances.size() - n, n, known_count);
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["token_error_rate"] = r.token_error_rate;
  j["ctc_token_error_rate"] = r.ctc_token_error_rate;
  j["known_count"] = r.known_count;
  if (!r.known_count) j["speaker_count_accuracy"] = r.speaker_count_accuracy;
  j["utterances"] = nlohmann::json::array();
  for (const UtteranceScore& s : r.per_utterance) {
    nlohmann::json u;
    u["utt"] = s.utt;
    u["permutation"] = s.permutation;
    u["distances"] = s.distances;
    u["ref_tokens"] = s.ref_tokens;
    u["estimated_speakers"] = s.estimated_speakers;
    u["reference_speakers"] = s.reference_speakers;
    j["utterances"].push_back(std::move(u));
  }
  return j;
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << report_to_json(r).dump(2) << "\n";
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace m2f
