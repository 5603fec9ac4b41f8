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

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "m2f/ablation.hpp"
#include "m2f/config.hpp"
#include "m2f/dataset.hpp"
#include "m2f/eval.hpp"
#include "m2f/model.hpp"
#include "m2f/train.hpp"

namespace {

int run_gen_data(const m2f::DatasetGenConfig& gen, const std::string& out_dir) {
  const m2f::Dataset ds = m2f::generate_dataset(gen);
  m2f::write_dataset(out_dir, ds);
  std::printf("wrote %zu utterances (%zu speakers, %zu mics, %.1f dB SNR) to %s\n",
              ds.utterances.size(), ds.speakers, ds.mics, ds.snr_db, out_dir.c_str());
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool paper_scale) {
  m2f::ExperimentConfig cfg = m2f::config_from_file(config_path);
  if (paper_scale) {
    cfg.apply_paper_scale();
    cfg.validate();
  }
  const m2f::TrainOutcome out = m2f::train(cfg, std::filesystem::path(data_dir), out_dir);
  std::printf("trained %zu steps; checkpoint at %s\n", cfg.steps,
              out.checkpoint_path.string().c_str());
  if (!out.curve.empty()) {
    std::printf("final step loss %.6f (ctc %.6f, att %.6f)\n", out.curve.back().loss,
                out.curve.back().ctc, out.curve.back().att);
  }
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir, bool unknown_count,
             const std::string& report_path) {
  const m2f::Checkpoint ck = m2f::load_checkpoint(ckpt_path);
  const m2f::Dataset ds = m2f::load_dataset(data_dir);
  const m2f::EvalReport report = m2f::evaluate_heldout(ck.model, ds, !unknown_count);
  m2f::write_report(report_path, report);
  std::printf("token error rate %.4f over %zu utterances\n", report.token_error_rate,
              report.per_utterance.size());
  std::printf("ctc-greedy token error rate %.4f (secondary)\n", report.ctc_token_error_rate);
  if (unknown_count) {
    std::printf("speaker count accuracy %.4f\n", report.speaker_count_accuracy);
  }
  std::printf("report written to %s\n", report_path.c_str());
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& out_dir, const std::string& axes_csv) {
  const m2f::ExperimentConfig base = m2f::config_from_file(config_path);
  const std::vector<m2f::AblationAxis> axes = m2f::parse_axes(axes_csv);
  const m2f::Dataset ds = m2f::load_dataset(data_dir);
  const m2f::AblationOutcome out = m2f::run_ablation(base, axes, ds, out_dir);
  for (const m2f::AblationCell& c : out.cells) {
    std::printf("%-10s ter %.4f\n", c.name.c_str(), c.ter);
  }
  std::printf("table written to %s\n", (std::filesystem::path(out_dir) / "ablation.csv")
                                           .string()
                                           .c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2former: multi-channel multi-speaker transformer ASR, desk scale"};
  app.require_subcommand(1);

  m2f::DatasetGenConfig gen;
  std::string gen_out;
  bool no_noise = false;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic mixture dataset");
  gen_cmd->add_option("--out", gen_out, "output directory")->required();
  gen_cmd->add_option("--utts", gen.utts, "number of utterances");
  gen_cmd->add_option("--speakers", gen.mixture.speakers, "speakers per mixture");
  gen_cmd->add_option("--mics", gen.mixture.mics, "microphones");
  gen_cmd->add_option("--snr-db", gen.mixture.snr_db, "signal-to-noise ratio in dB");
  gen_cmd->add_option("--seed", gen.mixture.seed, "generation seed");
  gen_cmd->add_option("--vocab", gen.vocab, "vocabulary size (1..12)");
  gen_cmd->add_option("--token-ms", gen.token_ms, "token duration in ms");
  gen_cmd->add_option("--sample-rate", gen.sample_rate, "sample rate in Hz");
  gen_cmd->add_option("--min-tokens", gen.mixture.min_tokens, "minimum tokens per speaker");
  gen_cmd->add_option("--max-tokens", gen.mixture.max_tokens, "maximum tokens per speaker");
  gen_cmd->add_flag("--no-noise", no_noise, "disable additive noise");

  std::string train_config, train_data, train_out;
  bool paper_scale = false;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config");
  train_cmd->add_option("--config", train_config, "config file")->required();
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_flag("--paper-scale", paper_scale, "use the full-size model layout");

  std::string eval_ckpt, eval_data, eval_report = "report.json";
  bool unknown_count = false;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on the held-out tail");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
  eval_cmd->add_option("--report", eval_report, "where to write report.json");
  eval_cmd->add_flag("--unknown-count", unknown_count,
                     "estimate the speaker count instead of using the reference");

  std::string abl_config, abl_data, abl_out, abl_axes;
  CLI::App* abl_cmd = app.add_subcommand("ablate", "train and score an ablation matrix");
  abl_cmd->add_option("--config", abl_config, "base config file")->required();
  abl_cmd->add_option("--data", abl_data, "dataset directory")->required();
  abl_cmd->add_option("--out", abl_out, "output directory")->required();
  abl_cmd->add_option("--axes", abl_axes,
                      "comma-separated subset of cnndd,m2a1,m2a2,ifsd,mct");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) {
      gen.mixture.add_noise = !no_noise;
      return run_gen_data(gen, gen_out);
    }
    if (train_cmd->parsed()) return run_train(train_config, train_data, train_out, paper_scale);
    if (eval_cmd->parsed()) return run_eval(eval_ckpt, eval_data, unknown_count, eval_report);
    if (abl_cmd->parsed()) return run_ablate(abl_config, abl_data, abl_out, abl_axes);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
