#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "milforge/rng.hpp"
#include "milforge/tensor.hpp"

namespace milforge {

// One checked tensor: value is perturbed in place for central differences,
// grad must be filled by grad_fn with dL/dvalue at the current values.
struct GradCheckTarget {
  std::string name;
  Tensor<double>* value;
  Tensor<double>* grad;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  std::size_t worst_index = 0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
  std::string note;
};

// Central-difference validation at 64-bit precision.
//   loss_fn : evaluates the block at the targets' current values
//   grad_fn : zeroes the targets' grads and fills them analytically
// Inputs with more elements than max_probes are spot-checked on a seeded
// random subset. Relative error uses max(1, |analytic|, |numeric|) as the
// denominator so near-zero gradients are compared absolutely.
inline GradCheckReport gradcheck(const std::function<double()>& loss_fn,
                                 const std::function<void()>& grad_fn,
                                 const std::vector<GradCheckTarget>& targets,
                                 double tolerance = 1e-4, double step = 1e-5,
                                 std::size_t max_probes = 24, std::uint64_t seed = 17) {
  GradCheckReport report;
  report.tolerance = tolerance;

  grad_fn();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(targets.size());
  for (const auto& t : targets) analytic.push_back(t.grad->data);

  bool all_finite = true;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    const auto& target = targets[ti];
    GradCheckEntry entry;
    entry.name = target.name;

    const std::size_t n = target.value->numel();
    std::vector<std::size_t> probes;
    if (n <= max_probes) {
      probes.resize(n);
      for (std::size_t i = 0; i < n; ++i) probes[i] = i;
    } else {
      Rng rng(Rng::mix(seed, ti));
      std::set<std::size_t> picked;
      while (picked.size() < max_probes) picked.insert(static_cast<std::size_t>(rng.below(n)));
      probes.assign(picked.begin(), picked.end());
    }

    for (std::size_t idx : probes) {
      double& slot = target.value->data[idx];
      const double saved = slot;
      slot = saved + step;
      const double lp = loss_fn();
      slot = saved - step;
      const double lm = loss_fn();
      slot = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[ti][idx];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        entry.finite = false;
        all_finite = false;
        entry.worst_index = idx;
        report.note = "non-finite gradient in '" + target.name + "' at flat index " + std::to_string(idx);
        break;
      }
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = idx;
      }
      ++entry.probes;
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  report.pass = all_finite && report.max_rel_err <= tolerance;
  return report;
}

}  // namespace milforge
