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
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "m2f/attention.hpp"
#include "m2f/rng.hpp"
#include "m2f/signal.hpp"
#include "m2f/tensor.hpp"

namespace m2f {

/// Inter-frame similarity difference weights. alpha penalizes lag-tau
/// self-similarity (stationary noise keeps it high; speech loses it).
struct IfsdConfig {
  double alpha = 5.3;
  std::size_t tau = 10;

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("IfsdConfig: alpha must be positive");
    if (tau < 2) throw std::invalid_argument("IfsdConfig: tau must be at least 2");
  }
};

namespace detail {

/// Symmetrized affinity with zeroed diagonal, then L_sym = I - D^{-1/2} A D^{-1/2}.
inline Eigen::MatrixXd normalized_laplacian(const SimilarityMatrix& z) {
  const auto n = static_cast<Eigen::Index>(z.channels());
  if (z.z.ndim() != 2 || z.z.dim(1) != z.channels()) {
    throw std::invalid_argument("normalized_laplacian: similarity must be square");
  }
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double v = (i == j) ? 0.0
                                : 0.5 * (z.z.at(static_cast<std::size_t>(i),
                                                static_cast<std::size_t>(j)) +
                                         z.z.at(static_cast<std::size_t>(j),
                                                static_cast<std::size_t>(i)));
      if (!std::isfinite(v)) {
        throw std::invalid_argument("spectral clustering: similarity (" + std::to_string(i) +
                                    ", " + std::to_string(j) + ") is non-finite");
      }
      a(i, j) = v;
    }
  Eigen::VectorXd deg = a.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(deg(i) > 0.0)) {
      throw std::invalid_argument("spectral clustering: channel " + std::to_string(i) +
                                  " has zero affinity degree");
    }
  }
  Eigen::VectorXd dinv_sqrt = deg.array().rsqrt();
  Eigen::MatrixXd l = -((dinv_sqrt * dinv_sqrt.transpose()).array() * a.array()).matrix();
  l.diagonal().array() += 1.0;
  return l;
}

/// Deterministic seeded k-means with k-means++ init: iteration cap 100,
/// center-shift tolerance 1e-8, nearest-center ties to the lowest index,
/// empty clusters reseeded at the point farthest from its center.
inline std::vector<int> kmeans(const std::vector<double>& pts, std::size_t n, std::size_t dim,
                               std::size_t k, Rng& rng) {
  auto dist2 = [&](const double* a, const double* b) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) acc += (a[j] - b[j]) * (a[j] - b[j]);
    return acc;
  };
  std::vector<double> centers(k * dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  const std::size_t first = rng.next_index(n);
  std::copy_n(pts.begin() + first * dim, dim, centers.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], dist2(pts.data() + i * dim, centers.data() + (c - 1) * dim));
      total += d2[i];
    }
    std::size_t chosen;
    if (total > 0.0) {
      const double r = rng.next_double() * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = rng.next_index(n);
    }
    std::copy_n(pts.begin() + chosen * dim, dim, centers.begin() + c * dim);
  }

  std::vector<int> labels(n, 0);
  std::vector<double> next(k * dim);
  std::vector<std::size_t> counts(k);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = dist2(pts.data() + i * dim, centers.data() + c * dim);
        if (d < best) {
          best = d;
          best_c = static_cast<int>(c);
        }
      }
      labels[i] = best_c;
    }
    std::fill(next.begin(), next.end(), 0.0);
    std::fill(counts.begin(), counts.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) next[c * dim + j] += pts[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < dim; ++j)
          next[c * dim + j] /= static_cast<double>(counts[c]);
      } else {
        // Reseed at the point farthest from its assigned center.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = dist2(pts.data() + i * dim,
                                 centers.data() + static_cast<std::size_t>(labels[i]) * dim);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        std::copy_n(pts.begin() + far * dim, dim, next.begin() + c * dim);
      }
    }
    double shift = 0.0;
    for (std::size_t j = 0; j < k * dim; ++j)
      shift = std::max(shift, (next[j] - centers[j]) * (next[j] - centers[j]));
    centers.swap(next);
    if (shift < 1e-8) break;
  }
  // Final assignment against the converged centers.
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_c = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = dist2(pts.data() + i * dim, centers.data() + c * dim);
      if (d < best) {
        best = d;
        best_c = static_cast<int>(c);
      }
    }
    labels[i] = best_c;
  }
  return labels;
}

inline std::vector<int> canonicalize_labels(std::vector<int> labels) {
  std::vector<int> remap(labels.size(), -1);
  int next = 0;
  for (int& l : labels) {
    if (remap[static_cast<std::size_t>(l)] < 0) remap[static_cast<std::size_t>(l)] = next++;
    l = remap[static_cast<std::size_t>(l)];
  }
  return labels;
}

}  // namespace detail

inline std::vector<double> laplacian_eigenvalues(const SimilarityMatrix& z) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::normalized_laplacian(z),
                                                    Eigen::EigenvaluesOnly);
  const Eigen::VectorXd& ev = es.eigenvalues();
  return std::vector<double>(ev.data(), ev.data() + ev.size());
}

/// Spectral clustering of channels: k smallest eigenvectors of the
/// normalized Laplacian, row-normalized, then seeded k-means. Labels come
/// back canonicalized by first occurrence (channel 0 always has label 0).
inline std::vector<int> spectral_cluster(const SimilarityMatrix& z, std::size_t k,
                                         std::uint64_t seed = 12345) {
  const std::size_t n = z.channels();
  if (k < 1 || k > n) {
    throw std::invalid_argument("spectral_cluster: k = " + std::to_string(k) +
                                " outside [1, " + std::to_string(n) + "]");
  }
  if (k == 1) return std::vector<int>(n, 0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::normalized_laplacian(z));
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("spectral_cluster: eigendecomposition failed");
  }
  std::vector<double> pts(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = es.eigenvectors()(static_cast<Eigen::Index>(i),
                                         static_cast<Eigen::Index>(j));
      pts[i * k + j] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm > 1e-12) {
      for (std::size_t j = 0; j < k; ++j) pts[i * k + j] /= norm;
    }
  }
  Rng rng = Rng::derive(seed, "kmeans");
  return detail::canonicalize_labels(detail::kmeans(pts, n, k, k, rng));
}

/// Mean over t of x_t . x_{t+1} - alpha * x_t . x_{t+tau} on L2-normalized
/// frames, t = 1..T-tau. Zero-norm frames contribute zero dot products.
inline double ifsd(const Tensor& x, const IfsdConfig& cfg) {
  cfg.validate();
  if (x.ndim() != 2) throw std::invalid_argument("ifsd: expected [T x d] features");
  const std::size_t t_len = x.dim(0), d = x.dim(1);
  if (t_len <= cfg.tau) {
    throw std::invalid_argument("ifsd: " + std::to_string(t_len) +
                                " frames but tau = " + std::to_string(cfg.tau) +
                                " requires more");
  }
  std::vector<double> hat(x.values());
  for (std::size_t t = 0; t < t_len; ++t) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += hat[t * d + j] * hat[t * d + j];
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (std::size_t j = 0; j < d; ++j) hat[t * d + j] /= norm;
    }
  }
  auto dot = [&](std::size_t a, std::size_t b) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += hat[a * d + j] * hat[b * d + j];
    return acc;
  };
  double total = 0.0;
  const std::size_t terms = t_len - cfg.tau;
  for (std::size_t t = 0; t < terms; ++t) {
    total += dot(t, t + 1) - cfg.alpha * dot(t, t + cfg.tau);
  }
  return total / static_cast<double>(terms);
}

/// Keeps the n_speakers labels with the highest mean IFSD (ties to the
/// lower label id); everything else is marked discarded.
inline ChannelAssignment filter_labels(const std::vector<int>& labels,
                                       const std::vector<double>& per_channel_ifsd,
                                       int n_speakers) {
  if (labels.size() != per_channel_ifsd.size()) {
    throw std::invalid_argument("filter_labels: labels and scores disagree in length");
  }
  if (n_speakers < 1) throw std::invalid_argument("filter_labels: need n_speakers >= 1");
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("filter_labels: negative label");
    max_label = std::max(max_label, l);
  }
  const std::size_t n_labels = static_cast<std::size_t>(max_label) + 1;
  std::vector<double> sums(n_labels, 0.0);
  std::vector<std::size_t> counts(n_labels, 0);
  for (std::size_t c = 0; c < labels.size(); ++c) {
    sums[static_cast<std::size_t>(labels[c])] += per_channel_ifsd[c];
    ++counts[static_cast<std::size_t>(labels[c])];
  }
  std::vector<int> present;
  std::vector<double> scores(n_labels, -std::numeric_limits<double>::infinity());
  for (std::size_t l = 0; l < n_labels; ++l) {
    if (counts[l] > 0) {
      present.push_back(static_cast<int>(l));
      scores[l] = sums[l] / static_cast<double>(counts[l]);
    }
  }
  if (present.size() < static_cast<std::size_t>(n_speakers)) {
    throw std::invalid_argument("filter_labels: only " + std::to_string(present.size()) +
                                " distinct labels for " + std::to_string(n_speakers) +
                                " speakers");
  }
  std::sort(present.begin(), present.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  ChannelAssignment asg;
  asg.labels = labels;
  asg.label_scores = std::move(scores);
  asg.kept.assign(present.begin(), present.begin() + n_speakers);
  asg.n_speakers = n_speakers;
  return asg;
}

/// Largest-gap position in the ascending Laplacian spectrum, searched over
/// k = 1..k_max (ties to the smallest k).
inline int eigengap_count(const SimilarityMatrix& z, std::size_t k_max) {
  const std::size_t n = z.channels();
  if (k_max < 2 || k_max > n) {
    throw std::invalid_argument("eigengap_count: k_max = " + std::to_string(k_max) +
                                " outside [2, " + std::to_string(n) + "]");
  }
  const std::vector<double> ev = laplacian_eigenvalues(z);
  const std::size_t upper = std::min(k_max, n - 1);
  int best_k = 1;
  double best_gap = -1.0;
  for (std::size_t k = 1; k <= upper; ++k) {
    const double gap = ev[k] - ev[k - 1];
    if (gap > best_gap) {
      best_gap = gap;
      best_k = static_cast<int>(k);
    }
  }
  return best_k;
}

struct CfOptions {
  IfsdConfig ifsd_cfg;
  std::optional<int> n_speakers;  // known speaker count; nullopt = estimate
  std::optional<int> k;           // cluster count override
  std::size_t d_k = 16;           // similarity scale, d_model / heads
  std::size_t k_max = 6;          // eigengap search bound
  bool noise_cluster_in_estimate = true;  // unknown count: speakers = k - 1
  bool filter = true;  // false keeps every label (filtering disabled)
  std::uint64_t cluster_seed = 12345;
};

struct CfResult {
  ChannelAssignment assignment;
  ChannelMask mask;
};

/// Clustering-and-filtering layer. Entirely gradient-free: similarity,
/// clustering, and IFSD run off the tape, features are untouched, and
/// only the assignment plus the attention mask come back.
inline CfResult cf_layer(const FeatureStack& x, const CfOptions& opt) {
  if (x.axis_meaning != AxisMeaning::decoupled) {
    throw std::invalid_argument("cf_layer: expects decoupled channels");
  }
  NoGradGuard ng;
  const SimilarityMatrix z = similarity_matrix(x, opt.d_k);

  int n_speakers;
  int k_use;
  if (opt.n_speakers.has_value()) {
    n_speakers = *opt.n_speakers;
    if (n_speakers < 1) throw std::invalid_argument("cf_layer: n_speakers must be >= 1");
    k_use = opt.k.value_or(opt.filter ? n_speakers + 1 : n_speakers);
  } else {
    const int k_est = eigengap_count(z, std::min(opt.k_max, x.channels()));
    n_speakers = (opt.filter && opt.noise_cluster_in_estimate) ? std::max(1, k_est - 1) : k_est;
    k_use = opt.k.value_or(k_est);
  }

  std::vector<int> labels = spectral_cluster(z, static_cast<std::size_t>(k_use),
                                             opt.cluster_seed);

  std::vector<double> per_channel(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    per_channel[c] = ifsd(slice_plane(x.data, c), opt.ifsd_cfg);
  }

  ChannelAssignment asg;
  if (opt.filter) {
    asg = filter_labels(labels, per_channel, n_speakers);
  } else {
    const int distinct = 1 + *std::max_element(labels.begin(), labels.end());
    asg = filter_labels(labels, per_channel, distinct);
  }

  ChannelMask mask(x.channels());
  std::vector<bool> label_kept(asg.label_scores.size(), false);
  for (int l : asg.kept) label_kept[static_cast<std::size_t>(l)] = true;
  for (std::size_t i = 0; i < x.channels(); ++i)
    for (std::size_t j = i + 1; j < x.channels(); ++j) {
      if (labels[i] == labels[j] && label_kept[static_cast<std::size_t>(labels[i])]) {
        mask.set(i, j, true);
      }
    }
  return CfResult{std::move(asg), std::move(mask)};
}

}  // namespace m2f
