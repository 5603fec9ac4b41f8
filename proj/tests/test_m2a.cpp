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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "m2f/attention.hpp"
#include "m2f/gradcheck.hpp"

using namespace m2f;

namespace {

FeatureStack decoupled_stack(std::size_t c, std::size_t t, std::size_t d, Rng& rng) {
  FeatureStack fs;
  fs.data = Tensor::uniform({c, t, d}, rng, -1.0, 1.0);
  fs.axis_meaning = AxisMeaning::decoupled;
  fs.frame_rate = 25.0;
  return fs;
}

FeatureStack permuted(const FeatureStack& x, const std::vector<std::size_t>& pi) {
  std::vector<Tensor> planes;
  planes.reserve(pi.size());
  for (std::size_t c : pi) planes.push_back(slice_plane(x.data, c));
  FeatureStack out;
  out.data = stack_planes(planes);
  out.axis_meaning = x.axis_meaning;
  out.frame_rate = x.frame_rate;
  return out;
}

void set_values(Parameter& p, const std::vector<double>& v) {
  p.value = Tensor::from_data(p.value.shape(), v).set_requires_grad(true);
}

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

}  // namespace

TEST_CASE("intra_attention with one frame matches the hand computation") {
  Rng rng(1);
  M2ABlockParams p = M2ABlockParams::init(2, 1, 2, rng, "blk");
  set_values(p.intra.wq, {1, 0, 0, 1});
  set_values(p.intra.wk, {1, 0, 0, 1});
  set_values(p.intra.wv, {2, 0, 0, 3});
  set_values(p.intra.bv, {0.1, 0.2});
  set_values(p.intra.wo, {1, 0, 0, 1});
  set_values(p.ffn_intra.w1, {1, 0, 0, 1});
  set_values(p.ffn_intra.w2, {0.5, 0, 0, 0.5});

  FeatureStack x;
  x.data = Tensor::from_data({1, 1, 2}, {1.0, -1.0});
  x.axis_meaning = AxisMeaning::decoupled;
  FeatureStack y = intra_attention(x, p);

  // LN([1,-1]) = [s, -s] with s = 1/sqrt(1 + 1e-5); single frame gives
  // attention weight 1, so the attention output is V = [2s+0.1, -3s+0.2].
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  const double a0 = 1.0 + 2.0 * s + 0.1;
  const double a1 = -1.0 - 3.0 * s + 0.2;
  // FFN sublayer: LN(a), relu keeps only the positive coordinate, times 0.5.
  const double mu = (a0 + a1) / 2.0;
  const double var = ((a0 - mu) * (a0 - mu) + (a1 - mu) * (a1 - mu)) / 2.0;
  const double n0 = (a0 - mu) / std::sqrt(var + 1e-5);
  const double n1 = (a1 - mu) / std::sqrt(var + 1e-5);
  const double out0 = a0 + 0.5 * std::max(n0, 0.0);
  const double out1 = a1 + 0.5 * std::max(n1, 0.0);
  REQUIRE(y.data.at(0, 0, 0) == Catch::Approx(out0).margin(1e-12));
  REQUIRE(y.data.at(0, 0, 1) == Catch::Approx(out1).margin(1e-12));
}

TEST_CASE("intra_attention commutes with channel permutation") {
  Rng rng(2);
  M2ABlockParams p = M2ABlockParams::init(4, 2, 6, rng, "blk");
  FeatureStack x = decoupled_stack(3, 5, 4, rng);
  FeatureStack y = intra_attention(x, p);
  FeatureStack yp = intra_attention(permuted(x, {2, 0, 1}), p);
  FeatureStack y_perm = permuted(y, {2, 0, 1});
  for (std::size_t i = 0; i < y.data.size(); ++i)
    REQUIRE(yp.data.values()[i] == y_perm.data.values()[i]);
}

TEST_CASE("intra_attention rejects wrong model dim and mic-axis input") {
  Rng rng(3);
  M2ABlockParams p = M2ABlockParams::init(4, 2, 6, rng, "blk");
  FeatureStack bad = decoupled_stack(2, 3, 6, rng);
  REQUIRE_THROWS_AS(intra_attention(bad, p), std::invalid_argument);
  FeatureStack mics = decoupled_stack(2, 3, 4, rng);
  mics.axis_meaning = AxisMeaning::microphones;
  REQUIRE_THROWS_AS(intra_attention(mics, p), std::invalid_argument);
}

TEST_CASE("similarity of identical channels is uniform") {
  Rng rng(4);
  Tensor one = Tensor::uniform({4, 3}, rng, -1.0, 1.0);
  FeatureStack x;
  x.data = stack_planes({one, one, one});
  x.axis_meaning = AxisMeaning::decoupled;
  SimilarityMatrix z = similarity_matrix(x, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(z.z.at(i, j) == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("2x2 similarity matches the closed-form softmax") {
  // Frames chosen so the Gram logits are [[2, 1], [1, 2]] at T=1, d_k=1.
  FeatureStack x;
  x.data = Tensor::from_data({2, 1, 2},
                             {std::sqrt(2.0), 0.0, 1.0 / std::sqrt(2.0), std::sqrt(1.5)});
  x.axis_meaning = AxisMeaning::decoupled;
  SimilarityMatrix z = similarity_matrix(x, 1);
  REQUIRE(z.z.at(0, 0) == Catch::Approx(sigmoid(1.0)).margin(1e-12));
  REQUIRE(z.z.at(0, 1) == Catch::Approx(sigmoid(-1.0)).margin(1e-12));
  REQUIRE(z.z.at(1, 0) == Catch::Approx(sigmoid(-1.0)).margin(1e-12));
  REQUIRE(z.z.at(1, 1) == Catch::Approx(sigmoid(1.0)).margin(1e-12));
}

TEST_CASE("similarity rows sum to one and are deterministic") {
  Rng rng(5);
  FeatureStack x = decoupled_stack(6, 4, 8, rng);
  SimilarityMatrix z = similarity_matrix(x, 2);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      REQUIRE(z.z.at(i, j) > 0.0);
      REQUIRE(z.z.at(i, j) < 1.0);
      total += z.z.at(i, j);
    }
    REQUIRE(std::abs(total - 1.0) < 1e-10);
  }
  SimilarityMatrix z2 = similarity_matrix(x, 2);
  REQUIRE(z.z.values() == z2.z.values());
}

TEST_CASE("cross_attention hand computation at C'=2, T'=1, d=2, one head") {
  Rng rng(6);
  M2ABlockParams p = M2ABlockParams::init(2, 1, 2, rng, "blk");
  // Identity projections, zero biases, zero second FFN matrix: the block
  // reduces to out_c = x_c + LN(xhat_c).
  for (Parameter* w : {&p.cross.wq, &p.cross.wk, &p.cross.wv, &p.cross.wo})
    set_values(*w, {1, 0, 0, 1});
  set_values(p.ffn_cross.w1, {1, 0, 0, 1});
  set_values(p.ffn_cross.w2, {0, 0, 0, 0});

  FeatureStack x;
  x.data = Tensor::from_data({2, 1, 2}, {1.0, 3.0, 5.0, 1.0});
  x.axis_meaning = AxisMeaning::decoupled;
  SimilarityMatrix z{Tensor::from_data({2, 2}, {0.7, 0.3, 0.4, 0.6})};
  FeatureStack y = cross_attention(x, z, p);

  // xhat_0 = 0.7*[1,3] + 0.3*[5,1] = [2.2, 2.4];  LN -> [-0.1, 0.1]/sigma
  const double s0 = std::sqrt(0.01 + 1e-5);
  REQUIRE(y.data.at(0, 0, 0) == Catch::Approx(1.0 - 0.1 / s0).margin(1e-12));
  REQUIRE(y.data.at(0, 0, 1) == Catch::Approx(3.0 + 0.1 / s0).margin(1e-12));
  // xhat_1 = 0.4*[1,3] + 0.6*[5,1] = [3.4, 1.8];  LN -> [0.8, -0.8]/sigma
  const double s1 = std::sqrt(0.64 + 1e-5);
  REQUIRE(y.data.at(1, 0, 0) == Catch::Approx(5.0 + 0.8 / s1).margin(1e-12));
  REQUIRE(y.data.at(1, 0, 1) == Catch::Approx(1.0 - 0.8 / s1).margin(1e-12));
}

TEST_CASE("cross_attention on identical channels equals the self-attention path") {
  Rng rng(7);
  M2ABlockParams p = M2ABlockParams::init(4, 2, 6, rng, "blk");
  Tensor one = Tensor::uniform({5, 4}, rng, -1.0, 1.0);
  FeatureStack x;
  x.data = stack_planes({one, one, one});
  x.axis_meaning = AxisMeaning::decoupled;
  SimilarityMatrix z = similarity_matrix(x, 2);
  FeatureStack y = cross_attention(x, z, p);

  SimilarityMatrix ident{Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})};
  FeatureStack self = cross_attention(x, ident, p);
  for (std::size_t i = 0; i < y.data.size(); ++i)
    REQUIRE(std::abs(y.data.values()[i] - self.data.values()[i]) < 1e-10);
}

TEST_CASE("cross_attention with uniform similarity equals mixing with the channel mean") {
  Rng rng(8);
  const std::size_t c = 4, t = 3, d = 4;
  M2ABlockParams p = M2ABlockParams::init(d, 2, 6, rng, "blk");
  FeatureStack x = decoupled_stack(c, t, d, rng);
  SimilarityMatrix uniform{Tensor::full({c, c}, 1.0 / static_cast<double>(c))};
  FeatureStack y = cross_attention(x, uniform, p);

  Tensor mean = scale(add(add(slice_plane(x.data, 0), slice_plane(x.data, 1)),
                          add(slice_plane(x.data, 2), slice_plane(x.data, 3))),
                      0.25);
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor h = slice_plane(x.data, ch);
    Tensor a = add(h, multi_head_attention(p.ln_cross_attn(h), p.ln_cross_attn(mean), p.cross));
    Tensor ref = add(a, p.ffn_cross(p.ln_cross_ffn(a)));
    for (std::size_t i = 0; i < ref.size(); ++i)
      REQUIRE(std::abs(y.data.at(ch, i / d, i % d) - ref.values()[i]) < 1e-10);
  }
}

TEST_CASE("cross_attention is equivariant under consistent permutation") {
  Rng rng(9);
  M2ABlockParams p = M2ABlockParams::init(4, 2, 6, rng, "blk");
  FeatureStack x = decoupled_stack(4, 3, 4, rng);
  SimilarityMatrix z = similarity_matrix(x, 2);
  FeatureStack y = cross_attention(x, z, p);

  const std::vector<std::size_t> pi = {3, 1, 0, 2};
  FeatureStack xp = permuted(x, pi);
  SimilarityMatrix zp = similarity_matrix(xp, 2);
  FeatureStack yp = cross_attention(xp, zp, p);
  FeatureStack y_perm = permuted(y, pi);
  for (std::size_t i = 0; i < y.data.size(); ++i)
    REQUIRE(std::abs(yp.data.values()[i] - y_perm.data.values()[i]) < 1e-10);
}

TEST_CASE("masked cross_attention isolates clusters completely") {
  Rng rng(10);
  M2ABlockParams p = M2ABlockParams::init(4, 2, 6, rng, "blk");
  FeatureStack x = decoupled_stack(4, 3, 4, rng);
  ChannelMask mask(4);
  mask.set(0, 1, true);
  mask.set(2, 3, true);

  SimilarityMatrix z = similarity_matrix(x, 2);
  FeatureStack y = cross_attention(x, z, p, &mask);

  // Perturb the second cluster's channels arbitrarily.
  FeatureStack x2;
  x2.data = stack_planes({slice_plane(x.data, 0), slice_plane(x.data, 1),
                          Tensor::uniform({3, 4}, rng, -5.0, 5.0),
                          Tensor::uniform({3, 4}, rng, -5.0, 5.0)});
  x2.axis_meaning = AxisMeaning::decoupled;
  SimilarityMatrix z2 = similarity_matrix(x2, 2);
  FeatureStack y2 = cross_attention(x2, z2, p, &mask);

  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < 4; ++j)
        REQUIRE(std::abs(y.data.at(ch, t, j) - y2.data.at(ch, t, j)) < 1e-12);
}

TEST_CASE("mct with equal logits mixes to the channel mean") {
  Rng rng(11);
  const std::size_t c = 3, d = 4;
  M2ABlockParams p = M2ABlockParams::init_mct(d, 2, 6, c, rng, "blk");
  FeatureStack x = decoupled_stack(c, 2, d, rng);
  FeatureStack y = mct_cross_attention(x, p);
  SimilarityMatrix uniform{Tensor::full({c, c}, 1.0 / 3.0)};
  FeatureStack ref = cross_attention(x, uniform, p);
  for (std::size_t i = 0; i < y.data.size(); ++i)
    REQUIRE(std::abs(y.data.values()[i] - ref.data.values()[i]) < 1e-12);
}

TEST_CASE("mct with saturated diagonal logits reduces to per-channel self-attention") {
  Rng rng(12);
  const std::size_t c = 3, d = 4;
  M2ABlockParams p = M2ABlockParams::init_mct(d, 2, 6, c, rng, "blk");
  std::vector<double> logits(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) logits[i * c + i] = 60.0;
  set_values(p.p_logits, logits);
  FeatureStack x = decoupled_stack(c, 2, d, rng);
  FeatureStack y = mct_cross_attention(x, p);
  SimilarityMatrix ident{Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})};
  FeatureStack ref = cross_attention(x, ident, p);
  for (std::size_t i = 0; i < y.data.size(); ++i)
    REQUIRE(std::abs(y.data.values()[i] - ref.data.values()[i]) < 1e-6);
}

TEST_CASE("mct rejects a channel count different from P and lacks equivariance") {
  Rng rng(13);
  M2ABlockParams p = M2ABlockParams::init_mct(4, 2, 6, 3, rng, "blk");
  FeatureStack wrong = decoupled_stack(4, 2, 4, rng);
  REQUIRE_THROWS_AS(mct_cross_attention(wrong, p), std::invalid_argument);

  Rng prng(14);
  Tensor random_p = Tensor::uniform({3, 3}, prng, -1.0, 1.0);
  set_values(p.p_logits, random_p.values());
  FeatureStack x = decoupled_stack(3, 2, 4, prng);
  FeatureStack y = mct_cross_attention(x, p);
  FeatureStack yp = mct_cross_attention(permuted(x, {1, 2, 0}), p);
  FeatureStack y_perm = permuted(y, {1, 2, 0});
  double diff = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i)
    diff = std::max(diff, std::abs(yp.data.values()[i] - y_perm.data.values()[i]));
  REQUIRE(diff > 1e-6);
}

TEST_CASE("speaker_average means channels by kept label in score order") {
  Rng rng(15);
  Tensor a = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
  Tensor b = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
  Tensor c = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
  FeatureStack x;
  x.data = stack_planes({a, b, a, c});  // labels: 0, 1, 0, 2
  x.axis_meaning = AxisMeaning::decoupled;

  ChannelAssignment asg;
  asg.labels = {0, 1, 0, 2};
  asg.label_scores = {-1.0, -0.5, -6.0};
  asg.kept = {1, 0};  // descending score, noise label 2 discarded
  asg.n_speakers = 2;

  std::vector<Tensor> speakers = speaker_average(x, asg);
  REQUIRE(speakers.size() == 2);
  // Label 1 has the single channel b; label 0 averages two copies of a.
  for (std::size_t i = 0; i < b.size(); ++i) {
    REQUIRE(speakers[0].values()[i] == Catch::Approx(b.values()[i]).margin(1e-15));
    REQUIRE(speakers[1].values()[i] == Catch::Approx(a.values()[i]).margin(1e-12));
  }

  // Two distinct channels under one label average elementwise.
  ChannelAssignment both;
  both.labels = {0, 0, 1, 1};
  both.label_scores = {-1.0, -2.0};
  both.kept = {0, 1};
  both.n_speakers = 2;
  std::vector<Tensor> avg = speaker_average(x, both);
  for (std::size_t i = 0; i < a.size(); ++i)
    REQUIRE(avg[0].values()[i] ==
            Catch::Approx((a.values()[i] + b.values()[i]) / 2.0).margin(1e-12));

  ChannelAssignment orphan;
  orphan.labels = {0, 0, 0, 0};
  orphan.label_scores = {-1.0, -2.0};
  orphan.kept = {0, 1};
  orphan.n_speakers = 2;
  REQUIRE_THROWS_AS(speaker_average(x, orphan), std::logic_error);
}

TEST_CASE("channel mask construction keeps diagonal and symmetry") {
  ChannelMask m(3);
  REQUIRE(m.at(0, 0));
  REQUIRE_FALSE(m.at(0, 1));
  m.set(0, 2, true);
  REQUIRE(m.at(2, 0));
  REQUIRE_THROWS_AS(m.set(1, 1, false), std::invalid_argument);
}

TEST_CASE("two-block encoder gradients match finite differences") {
  Rng rng(16);
  const std::size_t d = 4, h = 2, ffn = 4;
  std::vector<M2ABlockParams> blocks;
  blocks.push_back(M2ABlockParams::init(d, h, ffn, rng, "blk0"));
  blocks.push_back(M2ABlockParams::init(d, h, ffn, rng, "blk1"));
  std::vector<Parameter*> ptrs;
  for (auto& b : blocks) b.collect(ptrs);
  std::vector<Parameter> params;
  for (Parameter* p : ptrs) params.push_back(*p);

  FeatureStack x = decoupled_stack(3, 3, d, rng);
  auto f = [&]() {
    FeatureStack h1 = x;
    for (const auto& b : blocks) {
      h1 = intra_attention(h1, b);
      SimilarityMatrix z = similarity_matrix(h1, d / 2);
      h1 = cross_attention(h1, z, b);
    }
    return sum(mul(h1.data, h1.data));
  };
  GradCheckReport report = grad_check(f, params, 1e-5, 1e-4);
  INFO("worst " << report.worst.param << "[" << report.worst.index
                << "] rel=" << report.max_rel_err);
  REQUIRE(report.passed);
  REQUIRE(report.entries_checked > 500);
}

TEST_CASE("mct gradients including P match finite differences") {
  Rng rng(17);
  M2ABlockParams p = M2ABlockParams::init_mct(4, 2, 4, 3, rng, "blk");
  Rng prng(18);
  p.p_logits.value = Tensor::uniform({3, 3}, prng, -0.5, 0.5).set_requires_grad(true);
  std::vector<Parameter*> ptrs;
  p.collect(ptrs);
  std::vector<Parameter> params;
  for (Parameter* q : ptrs) params.push_back(*q);
  FeatureStack x = decoupled_stack(3, 3, 4, rng);
  auto f = [&]() {
    FeatureStack h1 = intra_attention(x, p);
    h1 = mct_cross_attention(h1, p);
    return sum(mul(h1.data, h1.data));
  };
  GradCheckReport report = grad_check(f, params, 1e-5, 1e-4);
  INFO("worst " << report.worst.param << " rel=" << report.max_rel_err);
  REQUIRE(report.passed);
}
