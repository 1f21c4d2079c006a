#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "milforge/tensor.hpp"

namespace milforge {

// Adaptive top-p schedule: p starts at 0.05 and grows by 0.01 whenever the
// monitored bag metric stalls for three consecutive epochs, capped at 0.20.
struct ThresholdSchedule {
  double p = 0.05;
  double p_max = 0.20;
  double step = 0.01;
  int patience = 3;
  int stagnation = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  bool has_best = false;
};

// Strict improvement resets the stagnation counter; the third stagnant epoch
// bumps p and resets the counter.
void schedule_step(ThresholdSchedule& sched, double epoch_bag_metric);

// Normalized ranks: the r-th smallest score (ties broken by lower index =
// lower rank) gets fraction r/K.
std::vector<double> rank_fractions(const std::vector<double>& scores);

// Indices of the top max(floor(p*K), 1) instances of the true-class score
// column, i.e. those whose rank fraction exceeds 1-p up to the
// minimum-selection rule. Returned in ascending index order.
std::vector<std::size_t> select_top_p(const std::vector<double>& true_class_scores, double p);

// Selection size for a bag of K instances at threshold p.
std::size_t select_count(std::size_t k, double p);

// Mean binary cross-entropy of sigmoid probabilities (P x C) against one-hot
// instance labels, probabilities clamped to [1e-7, 1-1e-7]. Pure evaluation
// twin of the tape-side loss.
double instance_loss(const Tensor<float>& probs, const std::vector<std::size_t>& labels);

}  // namespace milforge
