#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "milforge/data.hpp"
#include "milforge/model.hpp"

namespace milforge {

// Mann-Whitney AUC with average ranks for ties:
//   AUC = (R+ - n+(n+1)/2) / (n+ * n-).
// Throws MetricError when only one class is present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Unweighted mean over classes of 2PR/(P+R). A class absent from both
// predictions and truth contributes 0 (with a warning).
double f1_macro(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes,
                std::vector<double>* per_class = nullptr, std::vector<std::string>* warnings = nullptr);

struct EvalReport {
  double bag_auc = std::numeric_limits<double>::quiet_NaN();
  double bag_f1 = std::numeric_limits<double>::quiet_NaN();
  double inst_auc = std::numeric_limits<double>::quiet_NaN();
  double inst_f1 = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> bag_auc_per_class, bag_f1_per_class;
  std::vector<double> inst_auc_per_class, inst_f1_per_class;
  std::size_t n_bags = 0;
  std::size_t n_instances = 0;
  bool has_instance = false;
  std::vector<std::string> warnings;

  // Flat key/value block, one "key value" line each.
  std::string text() const;
  static std::string csv_header();
  std::string csv_row(const std::string& run, int fold, const std::string& split) const;
};

enum class EvalLevel { bag, instance };

// One forward pass per bag; bag scores are softmax(logits), instance scores
// are sigmoid of the pre-softmax gated scores pooled across all bags.
EvalReport evaluate_full(MilModel<float>& model, const std::vector<Bag>& bags,
                         const std::vector<std::size_t>& indices);

// Spec-level entry point: the instance level requires instance_truth.
EvalReport evaluate(MilModel<float>& model, const std::vector<Bag>& bags,
                    const std::vector<std::size_t>& indices, EvalLevel level);

}  // namespace milforge
