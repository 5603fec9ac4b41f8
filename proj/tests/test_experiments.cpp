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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m2f/ablation.hpp"
#include "m2f/config.hpp"
#include "m2f/eval.hpp"
#include "m2f/model.hpp"
#include "m2f/train.hpp"

using namespace m2f;

namespace {

/// Short utterances and a small model keep every training test in seconds.
ExperimentConfig micro_cfg() {
  ExperimentConfig c;
  c.speakers = 2;
  c.mics = 2;
  c.train_utts = 6;
  c.eval_utts = 2;
  c.data_seed = 4242;
  c.vocab = 4;
  c.min_tokens = 1;
  c.max_tokens = 2;
  c.d_model = 16;
  c.heads = 2;
  c.n_m1 = 1;
  c.n_m2 = 1;
  c.n_d = 1;
  c.d_ff = 32;
  c.d_emb = 12;
  c.d_mag = 8;
  c.d_pha = 4;
  c.cnndd_channels = {4, 6};
  c.ifsd_tau = 3;
  c.steps = 2;
  c.batch = 2;
  c.warmup = 4;
  c.validate();
  return c;
}

Dataset micro_dataset(const ExperimentConfig& cfg, std::size_t utts) {
  DatasetGenConfig gen;
  gen.utts = utts;
  gen.vocab = cfg.vocab;
  gen.token_ms = cfg.token_ms;
  gen.sample_rate = cfg.sample_rate;
  gen.mixture.speakers = cfg.speakers;
  gen.mixture.mics = cfg.mics;
  gen.mixture.seed = cfg.data_seed;
  gen.mixture.snr_db = cfg.snr_db;
  gen.mixture.min_tokens = cfg.min_tokens;
  gen.mixture.max_tokens = cfg.max_tokens;
  return generate_dataset(gen);
}

std::filesystem::path fresh_dir(const std::string& tag) {
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / ("m2f_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += (c == '\n');
  return n;
}

}  // namespace

TEST_CASE("config text round trip preserves every key") {
  ExperimentConfig c = micro_cfg();
  c.snr_db = 7.25;
  c.peak_lr = 3.5e-4;
  c.variant = CrossVariant::mct;
  c.ifsd_enabled = false;
  c.cnndd_channels = {3, 5, 7};
  const std::string text = to_text(c);
  const ExperimentConfig back = config_from_text(text);
  CHECK(to_text(back) == text);
  CHECK(back == c);
}

TEST_CASE("config parser skips comments and blank lines, trims spaces") {
  const ExperimentConfig c = config_from_text(
      "# leading comment\n"
      "\n"
      "  model.d_model =  32 \n"
      "model.heads = 4\n"
      "# trailing comment\n");
  CHECK(c.d_model == 32);
  CHECK(c.heads == 4);
  CHECK(c.vocab == 8);  // untouched default
}

TEST_CASE("config parser rejects unknown keys and malformed lines") {
  CHECK_THROWS_WITH(config_from_text("model.dmodel = 32\n"),
                    Catch::Matchers::ContainsSubstring("unknown config key"));
  CHECK_THROWS_WITH(config_from_text("model.d_model 32\n"),
                    Catch::Matchers::ContainsSubstring("expected 'key = value'"));
  CHECK_THROWS_WITH(config_from_text("model.d_model = thirty\n"),
                    Catch::Matchers::ContainsSubstring("bad value"));
  CHECK_THROWS_WITH(config_from_text("model.cf_enabled = maybe\n"),
                    Catch::Matchers::ContainsSubstring("true/false"));
}

TEST_CASE("config validation rejects inconsistent settings") {
  ExperimentConfig c = micro_cfg();
  c.n_m1 = 0;
  c.n_m2 = 0;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("at least one encoder"));
  c = micro_cfg();
  c.d_model = 30;  // not divisible by heads = 2? 30 is; use heads 4
  c.heads = 4;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("divisible"));
  c = micro_cfg();
  c.lambda = 1.5;
  CHECK_THROWS(c.validate());
  c = micro_cfg();
  c.cnndd_channels = {8};
  CHECK_THROWS(c.validate());
  c = micro_cfg();
  c.vocab = 13;
  CHECK_THROWS(c.validate());
}

TEST_CASE("paper-scale preset sets the full-size layout") {
  ExperimentConfig c;
  c.apply_paper_scale();
  c.validate();
  CHECK(c.d_model == 256);
  CHECK(c.heads == 4);
  CHECK(c.n_m1 == 3);
  CHECK(c.n_m2 == 3);
  CHECK(c.n_d == 6);
  CHECK(c.d_ff == 1024);
  CHECK(c.cnndd_channels == std::vector<std::size_t>{6, 6, 10, 10, 20, 20, 40, 40});
  CHECK(c.ifsd_tau == 10);
}

TEST_CASE("ablation axes each edit exactly one ingredient") {
  const ExperimentConfig base = micro_cfg();

  SECTION("cnndd collapses to a 2-layer stack at the original width") {
    const ExperimentConfig c = apply_axis(base, AblationAxis::cnndd);
    ExperimentConfig want = base;
    want.cnndd_channels = {6, 6};
    CHECK(c == want);
  }
  SECTION("m2a1 removes the first stage") {
    const ExperimentConfig c = apply_axis(base, AblationAxis::m2a1);
    ExperimentConfig want = base;
    want.n_m1 = 0;
    CHECK(c == want);
  }
  SECTION("m2a2 removes the second stage") {
    const ExperimentConfig c = apply_axis(base, AblationAxis::m2a2);
    ExperimentConfig want = base;
    want.n_m2 = 0;
    CHECK(c == want);
  }
  SECTION("ifsd disables the score filter") {
    const ExperimentConfig c = apply_axis(base, AblationAxis::ifsd);
    ExperimentConfig want = base;
    want.ifsd_enabled = false;
    CHECK(c == want);
  }
  SECTION("mct swaps the cross-attention variant") {
    const ExperimentConfig c = apply_axis(base, AblationAxis::mct);
    ExperimentConfig want = base;
    want.variant = CrossVariant::mct;
    CHECK(c == want);
  }
}

TEST_CASE("disabling the score filter means cluster count n and no discard") {
  const ExperimentConfig base = micro_cfg();
  const ExperimentConfig ablated = apply_axis(base, AblationAxis::ifsd);

  const CfOptions on = cf_options_for(base, 2);
  const CfOptions off = cf_options_for(ablated, 2);

  // The complete model clusters into n + 1 groups (derived inside cf_layer
  // from n_speakers) and filters; the ablated one pins k = 2 and keeps all.
  CHECK(on.filter);
  CHECK_FALSE(on.k.has_value());
  CHECK_FALSE(off.filter);
  REQUIRE(off.k.has_value());
  CHECK(*off.k == 2);

  // Nothing else moves.
  CHECK(on.ifsd_cfg.alpha == off.ifsd_cfg.alpha);
  CHECK(on.ifsd_cfg.tau == off.ifsd_cfg.tau);
  CHECK(on.d_k == off.d_k);
  CHECK(on.k_max == off.k_max);
  CHECK(on.cluster_seed == off.cluster_seed);
  CHECK(on.n_speakers == off.n_speakers);
}

TEST_CASE("axis parsing accepts the documented names only") {
  const std::vector<AblationAxis> axes = parse_axes("cnndd,m2a1,m2a2,ifsd,mct");
  REQUIRE(axes.size() == 5);
  CHECK(axes[0] == AblationAxis::cnndd);
  CHECK(axes[4] == AblationAxis::mct);
  CHECK(parse_axes("").empty());
  CHECK_THROWS_WITH(parse_axes("m2a3"),
                    Catch::Matchers::ContainsSubstring("unknown ablation axis"));
}

TEST_CASE("learning rate schedule warms up linearly then decays as 1/sqrt") {
  const double peak = 1e-3;
  const std::size_t warmup = 400;
  CHECK_THAT(warmup_inv_sqrt_lr(peak, warmup, 400), Catch::Matchers::WithinRel(peak, 1e-12));
  CHECK_THAT(warmup_inv_sqrt_lr(peak, warmup, 100),
             Catch::Matchers::WithinRel(peak * 0.25, 1e-12));
  CHECK_THAT(warmup_inv_sqrt_lr(peak, warmup, 1600),
             Catch::Matchers::WithinRel(peak * 0.5, 1e-12));
  // The schedule never exceeds the peak.
  for (std::size_t s : {1, 50, 399, 401, 1000, 10000}) {
    CHECK(warmup_inv_sqrt_lr(peak, warmup, s) <= peak * (1 + 1e-12));
  }
}

TEST_CASE("adam matches the closed-form first steps") {
  Parameter p("w", Tensor::from_data({2}, {1.0, -2.0}));
  std::vector<Parameter*> params{&p};
  AdamState st(params);
  const double lr = 0.1, b1 = 0.9, b2 = 0.99, eps = 1e-8;

  p.value.zero_grad();
  p.value.grad_mut() = {0.5, -1.0};
  adam_step(params, st, lr, b1, b2, eps);
  // Bias correction makes the first update lr * g / (|g| + eps') with the
  // corrected moments equal to g and g^2 exactly.
  const double u0 = lr * 0.5 / (std::sqrt(0.25) + eps);
  const double u1 = lr * (-1.0) / (std::sqrt(1.0) + eps);
  CHECK_THAT(p.value.at(0), Catch::Matchers::WithinAbs(1.0 - u0, 1e-12));
  CHECK_THAT(p.value.at(1), Catch::Matchers::WithinAbs(-2.0 - u1, 1e-12));

  // Second step, same gradient: moments stay equal to g and g^2 after
  // correction, so the update repeats.
  p.value.zero_grad();
  p.value.grad_mut() = {0.5, -1.0};
  adam_step(params, st, lr, b1, b2, eps);
  CHECK_THAT(p.value.at(0), Catch::Matchers::WithinAbs(1.0 - 2 * u0, 1e-10));
  CHECK_THAT(p.value.at(1), Catch::Matchers::WithinAbs(-2.0 - 2 * u1, 1e-10));
}

TEST_CASE("global norm clipping rescales exactly to the threshold") {
  Parameter a("a", Tensor::from_data({2}, {0.0, 0.0}));
  Parameter b("b", Tensor::from_data({1}, {0.0}));
  std::vector<Parameter*> params{&a, &b};
  a.value.zero_grad();
  b.value.zero_grad();
  a.value.grad_mut() = {3.0, 4.0};
  b.value.grad_mut() = {12.0};  // norm = 13

  SECTION("above the threshold") {
    const double norm = clip_global_norm(params, 5.0);
    CHECK_THAT(norm, Catch::Matchers::WithinRel(13.0, 1e-12));
    CHECK_THAT(a.value.grad()[0], Catch::Matchers::WithinRel(3.0 * 5 / 13, 1e-12));
    CHECK_THAT(b.value.grad()[0], Catch::Matchers::WithinRel(12.0 * 5 / 13, 1e-12));
    double sq = 0;
    for (const Parameter* p : params)
      for (double g : p->value.grad()) sq += g * g;
    CHECK_THAT(std::sqrt(sq), Catch::Matchers::WithinRel(5.0, 1e-12));
  }
  SECTION("below the threshold: untouched") {
    clip_global_norm(params, 50.0);
    CHECK(a.value.grad()[0] == 3.0);
    CHECK(a.value.grad()[1] == 4.0);
    CHECK(b.value.grad()[0] == 12.0);
  }
}

TEST_CASE("model assembly matches the config") {
  ExperimentConfig cfg = micro_cfg();
  Rng rng(7);
  ModelParams m = ModelParams::init(cfg, rng);
  CHECK(m.blocks.size() == cfg.n_m1 + cfg.n_m2);
  CHECK_FALSE(m.has_smooth);
  CHECK(m.cnndd.out_channels() == 6);
  CHECK(m.decoder.vocab == cfg.vocab);

  // Removing the second stage swaps in the linear smoothing layer.
  cfg.n_m2 = 0;
  Rng rng2(7);
  ModelParams m2 = ModelParams::init(cfg, rng2);
  CHECK(m2.has_smooth);
  CHECK(m2.blocks.size() == cfg.n_m1);
  CHECK(m2.smooth_w.value.dim(0) == cfg.d_model);

  // MCT blocks carry the learnable mixing matrix sized to C'.
  cfg = micro_cfg();
  cfg.variant = CrossVariant::mct;
  Rng rng3(7);
  ModelParams m3 = ModelParams::init(cfg, rng3);
  for (const M2ABlockParams& b : m3.blocks) {
    CHECK(b.use_p);
    CHECK(b.p_logits.value.dim(0) == 6);
  }

  // Parameter names are unique (checkpoints key on them).
  std::vector<Parameter*> params = m.parameters();
  std::vector<std::string> names;
  for (Parameter* p : params) names.push_back(p->name);
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
}

TEST_CASE("encoder produces one stream per speaker for every variant") {
  const ExperimentConfig base = micro_cfg();
  const Dataset ds = micro_dataset(base, 2);
  const FeatureStack feats = features_for(base, ds.utterances[0]);

  for (CrossVariant v : {CrossVariant::m2a, CrossVariant::mct, CrossVariant::none}) {
    ExperimentConfig cfg = base;
    cfg.variant = v;
    Rng rng(11);
    ModelParams m = ModelParams::init(cfg, rng);
    const EncodeResult enc = encode(m, feats, 2);
    REQUIRE(enc.streams.size() == 2);
    for (const Tensor& s : enc.streams) {
      CHECK(s.ndim() == 2);
      CHECK(s.dim(1) == cfg.d_model);
      CHECK(s.dim(0) == enc.streams[0].dim(0));
    }
    CHECK(enc.cf.assignment.n_speakers == 2);
  }
}

TEST_CASE("freezing the clustering reproduces the unfrozen forward") {
  const ExperimentConfig cfg = micro_cfg();
  const Dataset ds = micro_dataset(cfg, 2);
  const FeatureStack feats = features_for(cfg, ds.utterances[0]);
  Rng rng(13);
  ModelParams m = ModelParams::init(cfg, rng);

  const EncodeResult live = encode(m, feats, 2);
  const EncodeResult frozen = encode(m, feats, 2, &live.cf);
  REQUIRE(frozen.streams.size() == live.streams.size());
  for (std::size_t s = 0; s < live.streams.size(); ++s) {
    const auto& a = live.streams[s].values();
    const auto& b = frozen.streams[s].values();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("zero training steps leave the initialization untouched") {
  ExperimentConfig cfg = micro_cfg();
  cfg.steps = 0;
  const Dataset ds = micro_dataset(cfg, cfg.train_utts);
  const auto dir = fresh_dir("zerostep");

  const TrainOutcome out = train(cfg, ds, dir);
  CHECK(out.curve.empty());

  Rng init_rng = Rng::derive(cfg.train_seed, "init");
  ModelParams fresh = ModelParams::init(cfg, init_rng);
  ModelParams loaded = load_checkpoint(out.checkpoint_path).model;

  std::vector<Parameter*> a = fresh.parameters();
  std::vector<Parameter*> b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t p = 0; p < a.size(); ++p) {
    CHECK(a[p]->name == b[p]->name);
    CHECK(a[p]->value.values() == b[p]->value.values());
  }

  // loss.csv exists with only the header row.
  const std::string csv = slurp(dir / "loss.csv");
  CHECK(csv == "step,loss,ctc,att\n");
}

TEST_CASE("identical config and seed give bit-identical checkpoints") {
  const ExperimentConfig cfg = micro_cfg();
  const Dataset ds = micro_dataset(cfg, cfg.train_utts);
  const auto dir1 = fresh_dir("det1");
  const auto dir2 = fresh_dir("det2");

  const TrainOutcome o1 = train(cfg, ds, dir1);
  const TrainOutcome o2 = train(cfg, ds, dir2);

  CHECK(slurp(o1.checkpoint_path) == slurp(o2.checkpoint_path));
  CHECK(slurp(dir1 / "loss.csv") == slurp(dir2 / "loss.csv"));

  ModelParams m1 = load_checkpoint(o1.checkpoint_path).model;
  ModelParams m2 = load_checkpoint(o2.checkpoint_path).model;
  const EvalReport r1 = evaluate_heldout(m1, ds, true);
  const EvalReport r2 = evaluate_heldout(m2, ds, true);
  CHECK(report_to_json(r1).dump() == report_to_json(r2).dump());
}

TEST_CASE("checkpoint round trip restores parameters, step, and rng bit-for-bit") {
  const ExperimentConfig cfg = micro_cfg();
  Rng rng(31);
  ModelParams m = ModelParams::init(cfg, rng);
  Rng stream(99);
  stream.next_u64();
  const auto state = stream.state();

  const auto dir = fresh_dir("roundtrip");
  save_checkpoint(dir / "ck.m2f", m, 17, state);
  const Checkpoint ck = load_checkpoint(dir / "ck.m2f");

  CHECK(ck.step == 17);
  CHECK(ck.rng_state == state);
  CHECK(to_text(ck.model.cfg) == to_text(cfg));

  ModelParams loaded = ck.model;
  std::vector<Parameter*> a = m.parameters();
  std::vector<Parameter*> b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t p = 0; p < a.size(); ++p) {
    CHECK(a[p]->name == b[p]->name);
    CHECK(a[p]->value.values() == b[p]->value.values());
  }

  // Same forward pass after the round trip.
  const Dataset ds = micro_dataset(cfg, 2);
  const FeatureStack feats = features_for(cfg, ds.utterances[0]);
  NoGradGuard ng;
  const EncodeResult e1 = encode(m, feats, 2);
  const EncodeResult e2 = encode(loaded, feats, 2);
  REQUIRE(e1.streams.size() == e2.streams.size());
  for (std::size_t s = 0; s < e1.streams.size(); ++s) {
    CHECK(e1.streams[s].values() == e2.streams[s].values());
  }
}

TEST_CASE("checkpoint loader rejects truncated files") {
  const ExperimentConfig cfg = micro_cfg();
  Rng rng(31);
  ModelParams m = ModelParams::init(cfg, rng);
  const auto dir = fresh_dir("truncated");
  save_checkpoint(dir / "ck.m2f", m, 1, Rng(1).state());

  const std::string whole = slurp(dir / "ck.m2f");
  std::ofstream out(dir / "cut.m2f", std::ios::binary | std::ios::trunc);
  out.write(whole.data(), static_cast<std::streamsize>(whole.size() / 2));
  out.close();
  CHECK_THROWS_WITH(load_checkpoint(dir / "cut.m2f"),
                    Catch::Matchers::ContainsSubstring("truncated"));

  std::ofstream junk(dir / "junk.m2f", std::ios::binary | std::ios::trunc);
  junk << "not a checkpoint\n";
  junk.close();
  CHECK_THROWS_WITH(load_checkpoint(dir / "junk.m2f"),
                    Catch::Matchers::ContainsSubstring("not an m2former v1 checkpoint"));
}

TEST_CASE("training rejects datasets that disagree with the config") {
  ExperimentConfig cfg = micro_cfg();
  const Dataset ds = micro_dataset(cfg, cfg.train_utts);
  const auto dir = fresh_dir("mismatch");

  ExperimentConfig more = cfg;
  more.train_utts = 100;
  CHECK_THROWS_WITH(train(more, ds, dir), Catch::Matchers::ContainsSubstring("utterances"));

  ExperimentConfig wrong_vocab = cfg;
  wrong_vocab.vocab = 5;
  CHECK_THROWS_WITH(train(wrong_vocab, ds, dir),
                    Catch::Matchers::ContainsSubstring("disagree"));
}

TEST_CASE("loss csv carries one row per optimizer step") {
  ExperimentConfig cfg = micro_cfg();
  cfg.steps = 4;
  const Dataset ds = micro_dataset(cfg, cfg.train_utts);
  const auto dir = fresh_dir("losscsv");
  const TrainOutcome out = train(cfg, ds, dir);

  REQUIRE(out.curve.size() == 4);
  const std::string csv = slurp(dir / "loss.csv");
  CHECK(count_lines(csv) == 5);  // header + one per step
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,loss,ctc,att");
  std::size_t expect_step = 1;
  while (std::getline(in, line)) {
    std::size_t step = 0;
    double loss = 0, ctc = 0, att = 0;
    REQUIRE(std::sscanf(line.c_str(), "%zu,%lg,%lg,%lg", &step, &loss, &ctc, &att) == 4);
    CHECK(step == expect_step);
    CHECK(std::isfinite(loss));
    CHECK(loss == out.curve[expect_step - 1].loss);
    ++expect_step;
  }
}

TEST_CASE("training reduces the loss on a micro run") {
  ExperimentConfig cfg = micro_cfg();
  cfg.train_utts = 12;
  cfg.eval_utts = 2;
  cfg.steps = 120;
  cfg.warmup = 30;
  cfg.peak_lr = 2e-3;
  const Dataset ds = micro_dataset(cfg, cfg.train_utts);
  const auto dir = fresh_dir("learn");
  const TrainOutcome out = train(cfg, ds, dir);

  auto window_mean = [&](std::size_t lo, std::size_t hi) {
    double s = 0;
    for (std::size_t i = lo; i < hi; ++i) s += out.curve[i].loss;
    return s / static_cast<double>(hi - lo);
  };
  const double early = window_mean(0, 10);
  const double late = window_mean(out.curve.size() - 10, out.curve.size());
  INFO("early " << early << " late " << late);
  CHECK(late < early);
}

TEST_CASE("edit distance ground truths") {
  CHECK(edit_distance({}, {}) == 0);
  CHECK(edit_distance({1, 2, 3}, {1, 2, 3}) == 0);
  CHECK(edit_distance({1, 2, 3}, {}) == 3);
  CHECK(edit_distance({}, {1, 2}) == 2);
  CHECK(edit_distance({1, 2, 3}, {1, 3}) == 1);            // delete
  CHECK(edit_distance({1, 3}, {1, 2, 3}) == 1);            // insert
  CHECK(edit_distance({1, 2, 3}, {1, 4, 3}) == 1);         // substitute
  CHECK(edit_distance({3, 2, 1}, {1, 2, 3}) == 2);
  CHECK(edit_distance({1, 1, 1, 1}, {2, 2}) == 4);
}

TEST_CASE("permutation scoring pads and minimizes over assignments") {
  using V = std::vector<std::vector<int>>;

  SECTION("identical sets score zero under the crossing assignment") {
    const V hyps{{1, 2}, {3, 4, 5}};
    const V refs{{3, 4, 5}, {1, 2}};
    auto [perm, dist] = m2f::detail::score_permutation(hyps, refs);
    CHECK(perm == std::vector<std::size_t>{1, 0});
    CHECK(dist == std::vector<std::size_t>{0, 0});
  }
  SECTION("all-empty hypotheses cost every reference token: TER 1") {
    const V hyps{{}, {}};
    const V refs{{1, 2, 3}, {4, 5}};
    auto [perm, dist] = m2f::detail::score_permutation(hyps, refs);
    std::size_t total = dist[0] + dist[1];
    CHECK(total == 5);
  }
  SECTION("reference order never changes the total") {
    const V hyps{{1, 2, 2}, {4}};
    const V refs_a{{1, 2}, {4, 5}};
    const V refs_b{{4, 5}, {1, 2}};
    auto [pa, da] = m2f::detail::score_permutation(hyps, refs_a);
    auto [pb, db] = m2f::detail::score_permutation(hyps, refs_b);
    std::size_t ta = 0, tb = 0;
    for (std::size_t d : da) ta += d;
    for (std::size_t d : db) tb += d;
    CHECK(ta == tb);
  }
  SECTION("extra hypothesis pays its own length against a padded reference") {
    const V hyps{{1, 2}, {3, 3, 3}};
    const V refs{{1, 2}};
    auto [perm, dist] = m2f::detail::score_permutation(hyps, refs);
    CHECK(dist[0] == 0);
    CHECK(dist[1] == 3);
  }
  SECTION("missing hypothesis pays the reference length") {
    const V hyps{{1, 2}};
    const V refs{{1, 2}, {7, 7, 7, 7}};
    auto [perm, dist] = m2f::detail::score_permutation(hyps, refs);
    std::size_t total = 0;
    for (std::size_t d : dist) total += d;
    CHECK(total == 4);
  }
}

TEST_CASE("evaluation is deterministic and well-formed") {
  ExperimentConfig cfg = micro_cfg();
  cfg.steps = 2;
  const Dataset ds = micro_dataset(cfg, cfg.train_utts + cfg.eval_utts);
  const auto dir = fresh_dir("evaldet");
  const TrainOutcome out = train(cfg, ds, dir);
  ModelParams m = load_checkpoint(out.checkpoint_path).model;

  const EvalReport r1 = evaluate_heldout(m, ds, true);
  const EvalReport r2 = evaluate_heldout(m, ds, true);
  CHECK(report_to_json(r1).dump() == report_to_json(r2).dump());

  REQUIRE(r1.per_utterance.size() == cfg.eval_utts);
  CHECK(r1.per_utterance.front().utt == ds.utterances.size() - cfg.eval_utts);
  CHECK(r1.token_error_rate >= 0.0);
  CHECK(r1.ctc_token_error_rate >= 0.0);
  for (const UtteranceScore& s : r1.per_utterance) {
    CHECK(s.reference_speakers == 2);
    CHECK(s.ref_tokens > 0);
  }

  // Unknown-count evaluation also fills the estimation accuracy.
  const EvalReport ru = evaluate_heldout(m, ds, false);
  CHECK_FALSE(ru.known_count);
  CHECK(ru.speaker_count_accuracy >= 0.0);
  CHECK(ru.speaker_count_accuracy <= 1.0);

  write_report(dir / "report.json", r1);
  const std::string text = slurp(dir / "report.json");
  CHECK(text.find("token_error_rate") != std::string::npos);
  CHECK(text.find("ctc_token_error_rate") != std::string::npos);
}

TEST_CASE("ablation with no axes equals a plain train-and-evaluate") {
  ExperimentConfig cfg = micro_cfg();
  cfg.steps = 2;
  const Dataset ds = micro_dataset(cfg, cfg.train_utts + cfg.eval_utts);

  const auto abl_dir = fresh_dir("ablempty");
  const AblationOutcome out = run_ablation(cfg, {}, ds, abl_dir);
  REQUIRE(out.cells.size() == 1);
  CHECK(out.cells[0].name == "complete");

  const auto ref_dir = fresh_dir("ablref");
  const TrainOutcome trained = train(cfg, ds, ref_dir);
  ModelParams m = load_checkpoint(trained.checkpoint_path).model;
  const EvalReport report = evaluate_heldout(m, ds, true);
  CHECK(out.cells[0].ter == report.token_error_rate);

  const std::string csv = slurp(abl_dir / "ablation.csv");
  CHECK(count_lines(csv) == 2);
  CHECK(csv.rfind("cell,ter\n", 0) == 0);
}

TEST_CASE("ablation runs every requested cell with the shared dataset") {
  ExperimentConfig cfg = micro_cfg();
  cfg.steps = 1;
  const Dataset ds = micro_dataset(cfg, cfg.train_utts + cfg.eval_utts);
  const auto dir = fresh_dir("ablcells");

  const AblationOutcome out =
      run_ablation(cfg, {AblationAxis::ifsd, AblationAxis::mct}, ds, dir);
  REQUIRE(out.cells.size() == 3);
  CHECK(out.cells[0].name == "complete");
  CHECK(out.cells[1].name == "-ifsd");
  CHECK(out.cells[2].name == "mct");
  for (const AblationCell& c : out.cells) {
    CHECK(std::filesystem::exists(dir / c.name / "checkpoint.m2f"));
    CHECK(std::filesystem::exists(dir / c.name / "report.json"));
    CHECK(c.ter >= 0.0);
  }
}
