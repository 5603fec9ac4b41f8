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

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "m2f/tensor.hpp"

namespace m2f {

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::size_t entries_checked = 0;
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failures;
  bool passed = true;
};

/// Compares reverse-mode gradients against central finite differences
/// (f(x+h) - f(x-h)) / 2h on the selected parameter entries. `f` must
/// rebuild its graph from the parameters' current values on every call.
///
/// Relative error uses a 1e-3 denominator floor so that entries whose true
/// gradient is ~0 are judged on absolute error, where finite differences
/// only carry ~1e-10 of roundoff at step 1e-5.
///
/// `max_entries_per_param` subsamples large tensors (stride chosen to cover
/// the whole buffer); 0 means every entry.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Parameter> params,
                                  double step = 1e-5, double rtol = 1e-4,
                                  std::size_t max_entries_per_param = 0) {
  for (Parameter& p : params) p.value.zero_grad();
  Tensor loss = f();
  backward(loss);

  GradCheckReport report;
  report.worst.rel_err = -1.0;
  for (Parameter& p : params) {
    const std::vector<double> analytic = p.value.grad();
    std::vector<double>& buf = p.value.values_mut();
    const std::size_t n = buf.size();
    std::size_t stride = 1;
    if (max_entries_per_param > 0 && n > max_entries_per_param) {
      stride = (n + max_entries_per_param - 1) / max_entries_per_param;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = buf[i];
      double fp, fm;
      {
        NoGradGuard ng;
        buf[i] = saved + step;
        fp = f().scalar_value();
        buf[i] = saved - step;
        fm = f().scalar_value();
        buf[i] = saved;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.worst.rel_err) {
        report.worst = {p.name, i, analytic[i], numeric, rel};
      }
      if (rel > report.max_rel_err) report.max_rel_err = rel;
      if (rel > rtol) {
        report.failures.push_back({p.name, i, analytic[i], numeric, rel});
        report.passed = false;
      }
    }
  }
  return report;
}

}  // namespace m2f
