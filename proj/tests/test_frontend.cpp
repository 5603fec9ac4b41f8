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

#include "m2f/frontend.hpp"
#include "m2f/gradcheck.hpp"

using namespace m2f;

namespace {

FeatureStack make_stack(std::size_t c, std::size_t t, std::size_t d, AxisMeaning meaning,
                        Rng& rng) {
  FeatureStack fs;
  fs.data = Tensor::uniform({c, t, d}, rng, -1.0, 1.0);
  fs.axis_meaning = meaning;
  fs.frame_rate = 100.0;
  return fs;
}

}  // namespace

TEST_CASE("channel_embed maps zeros to zero with zero biases") {
  Rng rng(1);
  ChannelEmbedConfig cfg = ChannelEmbedConfig::init(4, 3, 3, 5, rng, "emb");
  FeatureStack x;
  x.data = Tensor::zeros({2, 6, 12});
  x.axis_meaning = AxisMeaning::microphones;
  FeatureStack y = channel_embed(x, cfg);
  REQUIRE(y.data.shape() == Shape{2, 6, 5});
  for (double v : y.data.values()) REQUIRE(v == 0.0);
}

TEST_CASE("channel_embed output shape is C x T x D") {
  Rng rng(2);
  ChannelEmbedConfig cfg = ChannelEmbedConfig::init(129, 16, 16, 32, rng, "emb");
  FeatureStack x = make_stack(6, 100, 3 * 129, AxisMeaning::microphones, rng);
  FeatureStack y = channel_embed(x, cfg);
  REQUIRE(y.data.shape() == Shape{6, 100, 32});
  REQUIRE(y.axis_meaning == AxisMeaning::microphones);
}

TEST_CASE("channel_embed hand-sized case matches explicit matrix arithmetic") {
  // F=2, so features are [m0 m1 | c0 s0 c1 s1]; d_mag = d_pha = 2, D = 3.
  Rng rng(3);
  ChannelEmbedConfig cfg = ChannelEmbedConfig::init(2, 2, 2, 3, rng, "emb");
  cfg.w_mag.value = Tensor::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  cfg.b_mag.value = Tensor::from_data({2}, {0.5, -0.5}).set_requires_grad(true);
  cfg.w_pha.value =
      Tensor::from_data({4, 2}, {1, 0, 0, 1, -1, 0, 0, -1}).set_requires_grad(true);
  cfg.b_pha.value = Tensor::from_data({2}, {0.0, 1.0}).set_requires_grad(true);
  cfg.w_emb.value =
      Tensor::from_data({4, 3}, {1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0, 1}).set_requires_grad(true);
  cfg.b_emb.value = Tensor::from_data({3}, {0.1, 0.2, 0.3}).set_requires_grad(true);

  FeatureStack x;
  x.data = Tensor::from_data({1, 1, 6}, {2.0, 3.0, 0.6, 0.8, 1.0, 0.0});
  x.axis_meaning = AxisMeaning::microphones;
  FeatureStack y = channel_embed(x, cfg);

  // mag = [2,3] -> [2*1+3*3, 2*2+3*4] + [0.5,-0.5] = [11.5, 15.5]
  // pha = [0.6,0.8,1,0] -> [0.6-1, 0.8-0] + [0,1] = [-0.4, 1.8]
  // cat = [11.5, 15.5, -0.4, 1.8] -> W_emb columns:
  //   col0: 11.5*1 + 15.5*0 + (-0.4)*1 + 1.8*0 = 11.1; +0.1 = 11.2
  //   col1: 15.5 + (-0.4) = 15.1; +0.2 = 15.3
  //   col2: 11.5 + 15.5 + 1.8 = 28.8; +0.3 = 29.1
  REQUIRE(y.data.at(0, 0, 0) == Catch::Approx(11.2).margin(1e-12));
  REQUIRE(y.data.at(0, 0, 1) == Catch::Approx(15.3).margin(1e-12));
  REQUIRE(y.data.at(0, 0, 2) == Catch::Approx(29.1).margin(1e-12));
}

TEST_CASE("channel_embed rejects wrong feature width") {
  Rng rng(4);
  ChannelEmbedConfig cfg = ChannelEmbedConfig::init(4, 3, 3, 5, rng, "emb");
  FeatureStack x = make_stack(2, 3, 11, AxisMeaning::microphones, rng);
  REQUIRE_THROWS_AS(channel_embed(x, cfg), std::invalid_argument);
}

TEST_CASE("channel_embed is equivariant to microphone permutation") {
  Rng rng(5);
  ChannelEmbedConfig cfg = ChannelEmbedConfig::init(4, 3, 3, 5, rng, "emb");
  FeatureStack x = make_stack(3, 4, 12, AxisMeaning::microphones, rng);
  FeatureStack y = channel_embed(x, cfg);

  // Permute channels 0<->2 on the input.
  FeatureStack xp;
  xp.data = stack_planes({slice_plane(x.data, 2), slice_plane(x.data, 1), slice_plane(x.data, 0)});
  xp.axis_meaning = AxisMeaning::microphones;
  FeatureStack yp = channel_embed(xp, cfg);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 5; ++j) {
      REQUIRE(yp.data.at(0, t, j) == y.data.at(2, t, j));
      REQUIRE(yp.data.at(1, t, j) == y.data.at(1, t, j));
      REQUIRE(yp.data.at(2, t, j) == y.data.at(0, t, j));
    }
}

TEST_CASE("cnndd output shape follows the stride schedule") {
  Rng rng(6);
  // Paper-shaped case scaled down in T/D for runtime: the channel plan is
  // the real one; frames 100 -> 25, features 16 -> 8.
  CnnddConfig cfg =
      CnnddConfig::init(6, 16, 24, {6, 6, 10, 10, 20, 20, 40, 40}, rng, "cnndd");
  FeatureStack x = make_stack(6, 100, 16, AxisMeaning::microphones, rng);
  FeatureStack y = cnndd_forward(x, cfg);
  REQUIRE(y.data.shape() == Shape{40, 25, 24});
  REQUIRE(y.axis_meaning == AxisMeaning::decoupled);
  REQUIRE(y.frame_rate == Catch::Approx(25.0));
}

TEST_CASE("cnndd frame count is ceil(T/4) for all T >= 4") {
  Rng rng(7);
  CnnddConfig cfg = CnnddConfig::init(2, 6, 5, {3, 4}, rng, "cnndd");
  for (std::size_t t = 4; t <= 21; ++t) {
    FeatureStack x = make_stack(2, t, 6, AxisMeaning::microphones, rng);
    FeatureStack y = cnndd_forward(x, cfg);
    REQUIRE(y.data.dim(0) == 4);
    REQUIRE(y.data.dim(1) == (t + 3) / 4);
    REQUIRE(y.data.dim(2) == 5);
  }
}

TEST_CASE("cnndd zero input with zero parameters maps to zero") {
  Rng rng(8);
  CnnddConfig cfg = CnnddConfig::init(2, 6, 5, {3, 4}, rng, "cnndd");
  for (Parameter& k : cfg.kernels)
    for (double& v : k.value.values_mut()) v = 0.0;
  for (double& v : cfg.proj_w.value.values_mut()) v = 0.0;
  FeatureStack x;
  x.data = Tensor::zeros({2, 8, 6});
  x.axis_meaning = AxisMeaning::microphones;
  FeatureStack y = cnndd_forward(x, cfg);
  for (double v : y.data.values()) REQUIRE(v == 0.0);
}

TEST_CASE("cnndd rejects too-short inputs naming the minimum") {
  Rng rng(9);
  CnnddConfig cfg = CnnddConfig::init(2, 6, 5, {3, 4}, rng, "cnndd");
  FeatureStack x = make_stack(2, 3, 6, AxisMeaning::microphones, rng);
  REQUIRE_THROWS_WITH(cnndd_forward(x, cfg), Catch::Matchers::ContainsSubstring("4"));
  FeatureStack dec = make_stack(2, 8, 6, AxisMeaning::decoupled, rng);
  REQUIRE_THROWS_AS(cnndd_forward(dec, cfg), std::invalid_argument);
}

TEST_CASE("cnndd is not microphone-permutation equivariant") {
  Rng rng(10);
  CnnddConfig cfg = CnnddConfig::init(2, 6, 5, {3, 4}, rng, "cnndd");
  FeatureStack x = make_stack(2, 8, 6, AxisMeaning::microphones, rng);
  FeatureStack y = cnndd_forward(x, cfg);
  FeatureStack xp;
  xp.data = stack_planes({slice_plane(x.data, 1), slice_plane(x.data, 0)});
  xp.axis_meaning = AxisMeaning::microphones;
  FeatureStack yp = cnndd_forward(xp, cfg);
  double diff = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i)
    diff = std::max(diff, std::abs(y.data.values()[i] - yp.data.values()[i]));
  REQUIRE(diff > 1e-6);
}

TEST_CASE("cnndd gradients match finite differences") {
  Rng rng(11);
  CnnddConfig cfg = CnnddConfig::init(2, 6, 4, {3, 3}, rng, "cnndd");
  std::vector<Parameter*> ptrs;
  cfg.collect(ptrs);
  std::vector<Parameter> params;
  for (Parameter* p : ptrs) params.push_back(*p);  // shared tensors, same nodes
  FeatureStack x = make_stack(2, 6, 6, AxisMeaning::microphones, rng);
  auto f = [&]() {
    FeatureStack y = cnndd_forward(x, cfg);
    return sum(mul(y.data, y.data));
  };
  GradCheckReport report = grad_check(f, params, 1e-5, 1e-4);
  INFO("worst " << report.worst.param << " rel=" << report.max_rel_err);
  REQUIRE(report.passed);
}

TEST_CASE("positional encoding matches its definition") {
  Tensor pe = positional_table(5, 6);
  for (std::size_t j = 0; j < 6; ++j) {
    const double expect = (j % 2 == 0) ? 0.0 : 1.0;
    REQUIRE(pe.at(0, j) == Catch::Approx(expect).margin(1e-15));
  }
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 3; ++i) {
      const double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) / 6.0);
      REQUIRE(pe.at(t, 2 * i) ==
              Catch::Approx(std::sin(static_cast<double>(t) / rate)).margin(1e-12));
      REQUIRE(pe.at(t, 2 * i + 1) ==
              Catch::Approx(std::cos(static_cast<double>(t) / rate)).margin(1e-12));
    }
}

TEST_CASE("add_positional treats all channels identically") {
  Rng rng(12);
  FeatureStack x = make_stack(3, 4, 6, AxisMeaning::decoupled, rng);
  FeatureStack y = add_positional(x);
  REQUIRE(y.data.shape() == x.data.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t j = 0; j < 6; ++j) {
        const double delta = y.data.at(c, t, j) - x.data.at(c, t, j);
        const double delta0 = y.data.at(0, t, j) - x.data.at(0, t, j);
        REQUIRE(delta == Catch::Approx(delta0).margin(1e-15));
      }
}
