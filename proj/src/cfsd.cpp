#include "milforge/cfsd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "milforge/common.hpp"

namespace milforge {

void schedule_step(ThresholdSchedule& sched, double epoch_bag_metric) {
  if (!std::isfinite(epoch_bag_metric))
    throw NumericalError("schedule_step: non-finite bag metric");
  if (!sched.has_best || epoch_bag_metric > sched.best_metric) {
    sched.best_metric = epoch_bag_metric;
    sched.has_best = true;
    sched.stagnation = 0;
    return;
  }
  if (++sched.stagnation >= sched.patience) {
    sched.p = std::min(sched.p + sched.step, sched.p_max);
    sched.stagnation = 0;
  }
}

std::vector<double> rank_fractions(const std::vector<double>& scores) {
  const std::size_t k = scores.size();
  if (k == 0) throw DimensionError("rank_fractions: empty score vector");
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  // Stable ascending sort: tied scores keep index order, so the lower index
  // gets the lower rank.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> fractions(k);
  for (std::size_t r = 0; r < k; ++r)
    fractions[order[r]] = double(r + 1) / double(k);
  return fractions;
}

std::size_t select_count(std::size_t k, double p) {
  // floor(p*K) with a one-ulp guard so lattice values of p (0.05 + n*0.01)
  // do not round below the intended integer; minimum one instance per bag.
  const auto want = static_cast<std::size_t>(std::floor(p * double(k) + 1e-9));
  return std::max<std::size_t>(want, 1);
}

std::vector<std::size_t> select_top_p(const std::vector<double>& true_class_scores, double p) {
  const std::size_t k = true_class_scores.size();
  if (k == 0) throw DimensionError("select_top_p: empty score vector");
  const std::size_t count = std::min(select_count(k, p), k);
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return true_class_scores[a] < true_class_scores[b];
  });
  std::vector<std::size_t> selected(order.end() - static_cast<std::ptrdiff_t>(count), order.end());
  std::sort(selected.begin(), selected.end());
  return selected;
}

double instance_loss(const Tensor<float>& probs, const std::vector<std::size_t>& labels) {
  if (probs.ndim() != 2 || probs.rows() != labels.size())
    throw DimensionError("instance_loss: probs " + probs.shape_str() + " vs " +
                         std::to_string(labels.size()) + " labels");
  constexpr double kClamp = 1e-7;
  const std::size_t m = probs.rows(), n = probs.cols();
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double p = double(probs.at(i, j));
      p = std::clamp(p, kClamp, 1.0 - kClamp);
      loss -= (labels[i] == j) ? std::log(p) : std::log(1.0 - p);
    }
  }
  return loss / double(m * n);
}

}  // namespace milforge
