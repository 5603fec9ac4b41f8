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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/config.hpp"
#include "m2f/dataset.hpp"
#include "m2f/model.hpp"
#include "m2f/rng.hpp"

namespace m2f {

/// Inverse-square-root schedule with linear warmup; step is 1-based and the
/// peak is reached exactly at the warmup step.
inline double warmup_inv_sqrt_lr(double peak_lr, std::size_t warmup, std::size_t step) {
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

/// Adam with bias correction; one slot pair per parameter, flat over entries.
struct AdamState {
  std::vector<std::vector<double>> m1, m2;
  std::size_t t = 0;

  explicit AdamState(const std::vector<Parameter*>& params) {
    m1.reserve(params.size());
    m2.reserve(params.size());
    for (const Parameter* p : params) {
      m1.emplace_back(p->value.size(), 0.0);
      m2.emplace_back(p->value.size(), 0.0);
    }
  }
};

/// Scales every gradient by clip/norm when the global L2 norm exceeds clip.
/// Returns the pre-clip norm.
inline double clip_global_norm(const std::vector<Parameter*>& params, double clip) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    const double s = clip / norm;
    for (Parameter* p : params) {
      for (double& g : p->value.grad_mut()) g *= s;
    }
  }
  return norm;
}

inline void adam_step(const std::vector<Parameter*>& params, AdamState& st, double lr,
                      double beta1, double beta2, double eps) {
  ++st.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::vector<double>& g = params[p]->value.grad();
    std::vector<double>& w = params[p]->value.values_mut();
    std::vector<double>& m1 = st.m1[p];
    std::vector<double>& m2 = st.m2[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
      m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
    }
  }
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;  // combined PIT objective, mean over the batch
  double ctc = 0.0;   // unweighted CTC sum, mean over the batch
  double att = 0.0;   // unweighted attention sum, mean over the batch
};

struct TrainOutcome {
  std::filesystem::path checkpoint_path;
  std::vector<StepRecord> curve;
};

namespace detail {

inline void write_loss_csv(const std::filesystem::path& path,
                           const std::vector<StepRecord>& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "step,loss,ctc,att\n";
  char buf[160];
  for (const StepRecord& r : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss, r.ctc, r.att);
    out << buf;
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace detail

/// Full training run: the first train_utts utterances of the dataset, Adam
/// with warmup then inverse-square-root decay, global-norm clipping, one
/// loss.csv row per step, checkpoint written atomically at the end.
inline TrainOutcome train(const ExperimentConfig& cfg, const Dataset& ds,
                          const std::filesystem::path& out_dir) {
  cfg.validate();
  if (ds.utterances.size() < cfg.train_utts) {
    throw std::invalid_argument("train: dataset has " + std::to_string(ds.utterances.size()) +
                                " utterances, config wants " + std::to_string(cfg.train_utts));
  }
  if (ds.vocab != cfg.vocab || ds.mics != cfg.mics || ds.speakers != cfg.speakers) {
    throw std::invalid_argument("train: dataset vocab/mics/speakers disagree with config");
  }
  std::filesystem::create_directories(out_dir);

  Rng init_rng = Rng::derive(cfg.train_seed, "init");
  ModelParams model = ModelParams::init(cfg, init_rng);
  std::vector<Parameter*> params = model.parameters();
  AdamState adam(params);
  const LossConfig loss_cfg{cfg.lambda, cfg.smoothing};

  // Features never change, so pay the STFT cost once per utterance.
  std::vector<FeatureStack> feats;
  std::vector<std::vector<TokenSequence>> refs;
  feats.reserve(cfg.train_utts);
  refs.reserve(cfg.train_utts);
  for (std::size_t u = 0; u < cfg.train_utts; ++u) {
    const MultiChannelRecording& rec = ds.utterances[u];
    feats.push_back(features_for(cfg, rec));
    std::vector<TokenSequence> r;
    for (const std::vector<int>& t : rec.transcripts) r.push_back(TokenSequence{t});
    refs.push_back(std::move(r));
  }

  Rng order_rng = Rng::derive(cfg.train_seed, "order");
  std::vector<std::size_t> order(cfg.train_utts);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();  // forces a shuffle before the first batch

  TrainOutcome out;
  out.curve.reserve(cfg.steps);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (Parameter* p : params) p->value.zero_grad();

    Tensor batch_loss = Tensor::scalar(0.0);
    double ctc_sum = 0.0, att_sum = 0.0;
    try {
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        if (cursor == order.size()) {
          for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.next_index(i)]);
          }
          cursor = 0;
        }
        const std::size_t u = order[cursor++];
        PitResult pit = forward_loss(model, feats[u], refs[u], loss_cfg);
        ctc_sum += pit.ctc_sum;
        att_sum += pit.att_sum;
        batch_loss = add(batch_loss, pit.total_loss);
      }
      batch_loss = scale(batch_loss, 1.0 / static_cast<double>(cfg.batch));
      backward(batch_loss);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                               e.what());
    }

    clip_global_norm(params, cfg.clip_norm);
    adam_step(params, adam, warmup_inv_sqrt_lr(cfg.peak_lr, cfg.warmup, step), cfg.beta1,
              cfg.beta2, cfg.adam_eps);

    out.curve.push_back(StepRecord{step, batch_loss.scalar_value(),
                                   ctc_sum / static_cast<double>(cfg.batch),
                                   att_sum / static_cast<double>(cfg.batch)});
  }

  detail::write_loss_csv(out_dir / "loss.csv", out.curve);
  out.checkpoint_path = out_dir / "checkpoint.m2f";
  save_checkpoint(out.checkpoint_path, model, cfg.steps, order_rng.state());
  return out;
}

inline TrainOutcome train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                          const std::filesystem::path& out_dir) {
  return train(cfg, load_dataset(data_dir), out_dir);
}

}  // namespace m2f
