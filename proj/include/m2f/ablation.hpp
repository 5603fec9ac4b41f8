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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m2f/config.hpp"
#include "m2f/dataset.hpp"
#include "m2f/eval.hpp"
#include "m2f/train.hpp"

namespace m2f {

/// One removable module each. Every axis is a single-config edit so cells
/// differ from the complete model in exactly one ingredient.
enum class AblationAxis { cnndd, m2a1, m2a2, ifsd, mct };

inline std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::cnndd: return "cnndd";
    case AblationAxis::m2a1: return "m2a1";
    case AblationAxis::m2a2: return "m2a2";
    case AblationAxis::ifsd: return "ifsd";
    case AblationAxis::mct: return "mct";
  }
  throw std::logic_error("unknown ablation axis");
}

inline AblationAxis ablation_axis_from(const std::string& s) {
  if (s == "cnndd") return AblationAxis::cnndd;
  if (s == "m2a1") return AblationAxis::m2a1;
  if (s == "m2a2") return AblationAxis::m2a2;
  if (s == "ifsd") return AblationAxis::ifsd;
  if (s == "mct") return AblationAxis::mct;
  throw std::invalid_argument("unknown ablation axis '" + s +
                              "' (want cnndd, m2a1, m2a2, ifsd, or mct)");
}

inline std::vector<AblationAxis> parse_axes(const std::string& csv) {
  std::vector<AblationAxis> axes;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) axes.push_back(ablation_axis_from(part));
  }
  return axes;
}

/// Removing the decoupling stack keeps a minimal 2-layer convolution (the
/// stride schedule needs two layers) at the complete model's output width,
/// so everything downstream keeps its shape. Removing the second attention
/// stage swaps in the linear smoothing layer (n_m2 = 0 does that in init).
inline ExperimentConfig apply_axis(ExperimentConfig cfg, AblationAxis axis) {
  switch (axis) {
    case AblationAxis::cnndd:
      cfg.cnndd_channels = {cfg.cnndd_channels.back(), cfg.cnndd_channels.back()};
      break;
    case AblationAxis::m2a1:
      cfg.n_m1 = 0;
      break;
    case AblationAxis::m2a2:
      cfg.n_m2 = 0;
      break;
    case AblationAxis::ifsd:
      cfg.ifsd_enabled = false;
      break;
    case AblationAxis::mct:
      cfg.variant = CrossVariant::mct;
      break;
  }
  cfg.validate();
  return cfg;
}

inline std::string cell_name(AblationAxis axis) {
  return axis == AblationAxis::mct ? std::string("mct") : "-" + to_string(axis);
}

struct AblationCell {
  std::string name;
  ExperimentConfig cfg;
  double ter = 0.0;
};

struct AblationOutcome {
  std::vector<AblationCell> cells;  // "complete" first, then one per axis
};

namespace detail {

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationCell>& cells) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "cell,ter\n";
  char buf[96];
  for (const AblationCell& c : cells) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g\n", c.name.c_str(), c.ter);
    out << buf;
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace detail

/// Trains and scores the complete model plus one cell per axis, all on the
/// same dataset (shared data seed). Each cell gets its own subdirectory of
/// out_dir; the summary lands in out_dir/ablation.csv.
inline AblationOutcome run_ablation(const ExperimentConfig& base,
                                    const std::vector<AblationAxis>& axes, const Dataset& ds,
                                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  cells.emplace_back("complete", base);
  for (AblationAxis axis : axes) cells.emplace_back(cell_name(axis), apply_axis(base, axis));

  AblationOutcome out;
  for (auto& [name, cfg] : cells) {
    const std::filesystem::path cell_dir = out_dir / name;
    TrainOutcome trained = train(cfg, ds, cell_dir);
    ModelParams model = load_checkpoint(trained.checkpoint_path).model;
    const EvalReport report = evaluate_heldout(model, ds, /*known_count=*/true);
    write_report(cell_dir / "report.json", report);
    out.cells.push_back(AblationCell{name, cfg, report.token_error_rate});
  }
  detail::write_ablation_csv(out_dir / "ablation.csv", out.cells);
  return out;
}

}  // namespace m2f
