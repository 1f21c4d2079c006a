#include "milforge/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace milforge {

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw DimensionError("roc_auc: size mismatch or empty input");
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += (l != 0);
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("roc_auc: undefined for single-class input");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tie runs, 1-based.
  double rank_pos_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (double(i + 1) + double(j + 1));
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]] != 0) rank_pos_sum += avg_rank;
    i = j + 1;
  }
  return (rank_pos_sum - double(n_pos) * double(n_pos + 1) / 2.0) / (double(n_pos) * double(n_neg));
}

double f1_macro(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes,
                std::vector<double>* per_class, std::vector<std::string>* warnings) {
  if (predicted.size() != truth.size())
    throw DimensionError("f1_macro: size mismatch");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if (p == t)
      tp[p]++;
    else {
      if (p >= 0 && p < num_classes) fp[p]++;
      if (t >= 0 && t < num_classes) fn[t]++;
    }
  }
  double total = 0.0;
  if (per_class) per_class->assign(num_classes, 0.0);
  for (int c = 0; c < num_classes; ++c) {
    double f1 = 0.0;
    if (tp[c] + fp[c] + fn[c] == 0) {
      if (warnings)
        warnings->push_back("f1: class " + std::to_string(c) +
                            " absent from both predictions and truth; contributes 0");
    } else {
      const double prec = tp[c] + fp[c] ? double(tp[c]) / double(tp[c] + fp[c]) : 0.0;
      const double rec = tp[c] + fn[c] ? double(tp[c]) / double(tp[c] + fn[c]) : 0.0;
      f1 = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    if (per_class) (*per_class)[c] = f1;
    total += f1;
  }
  return total / double(num_classes);
}

namespace {

// Macro one-vs-rest AUC; classes missing a positive or negative example are
// skipped (NaN in the per-class breakdown).
double macro_auc(const std::vector<std::vector<double>>& class_scores, const std::vector<int>& truth,
                 int num_classes, std::vector<double>& per_class, std::vector<std::string>& warnings) {
  per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double total = 0.0;
  int defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int> bin(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) bin[i] = truth[i] == c ? 1 : 0;
    try {
      per_class[c] = roc_auc(class_scores[c], bin);
      total += per_class[c];
      ++defined;
    } catch (const MetricError&) {
      warnings.push_back("auc: class " + std::to_string(c) + " has a single-class split; skipped");
    }
  }
  if (defined == 0) throw MetricError("macro auc: no class had both positives and negatives");
  return total / double(defined);
}

std::vector<double> softmax_vec(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (out[i] = std::exp(logits[i] - mx));
  for (auto& v : out) v /= s;
  return out;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

EvalReport evaluate_full(MilModel<float>& model, const std::vector<Bag>& bags,
                         const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ConfigError("evaluate: empty split");
  const int C = int(model.config.num_classes);
  EvalReport rep;
  rep.n_bags = indices.size();

  std::vector<std::vector<double>> bag_scores(C);
  std::vector<int> bag_truth, bag_pred;
  std::vector<std::vector<double>> inst_scores(C);
  std::vector<int> inst_truth, inst_pred;
  bool all_have_truth = true;

  for (std::size_t idx : indices) {
    const Bag& bag = bags[idx];
    Tape<float> tape;
    const Tensor<float>* coords = bag.coords ? &*bag.coords : nullptr;
    auto f = model.forward(tape, bag.features, coords);

    const auto& lv = tape.value(f.logits);
    std::vector<double> logits(lv.data.begin(), lv.data.end());
    const auto probs = softmax_vec(logits);
    for (int c = 0; c < C; ++c) bag_scores[c].push_back(probs[c]);
    bag_truth.push_back(int(bag.label));
    bag_pred.push_back(int(std::max_element(probs.begin(), probs.end()) - probs.begin()));

    if (f.has_scores && bag.instance_truth) {
      const auto& sv = tape.value(f.scores);
      for (std::size_t k = 0; k < bag.k(); ++k) {
        double best = -std::numeric_limits<double>::infinity();
        int best_c = 0;
        for (int c = 0; c < C; ++c) {
          const double p = sigmoid(double(sv.at(k, std::size_t(c))));
          inst_scores[c].push_back(p);
          if (p > best) {
            best = p;
            best_c = c;
          }
        }
        inst_truth.push_back(int((*bag.instance_truth)[k]));
        inst_pred.push_back(best_c);
      }
    } else {
      all_have_truth = false;
    }
  }

  rep.bag_auc = macro_auc(bag_scores, bag_truth, C, rep.bag_auc_per_class, rep.warnings);
  rep.bag_f1 = f1_macro(bag_pred, bag_truth, C, &rep.bag_f1_per_class, &rep.warnings);

  if (all_have_truth && !inst_truth.empty()) {
    try {
      rep.inst_auc = macro_auc(inst_scores, inst_truth, C, rep.inst_auc_per_class, rep.warnings);
      rep.inst_f1 = f1_macro(inst_pred, inst_truth, C, &rep.inst_f1_per_class, &rep.warnings);
      rep.has_instance = true;
      rep.n_instances = inst_truth.size();
    } catch (const MetricError& e) {
      rep.warnings.push_back(std::string("instance metrics undefined: ") + e.what());
    }
  }
  return rep;
}

EvalReport evaluate(MilModel<float>& model, const std::vector<Bag>& bags,
                    const std::vector<std::size_t>& indices, EvalLevel level) {
  if (level == EvalLevel::instance) {
    for (std::size_t idx : indices)
      if (!bags[idx].instance_truth)
        throw ConfigError("evaluate: instance level requires instance_truth on every bag");
    if (model.config.kind == ModelKind::maxpool || model.config.kind == ModelKind::meanpool)
      throw ConfigError("evaluate: instance level requires an attention-based model");
  }
  return evaluate_full(model, bags, indices);
}

std::string EvalReport::text() const {
  std::ostringstream os;
  os << "n_bags " << n_bags << "\n";
  os << "bag_auc " << bag_auc << "\n";
  os << "bag_f1 " << bag_f1 << "\n";
  for (std::size_t c = 0; c < bag_auc_per_class.size(); ++c)
    os << "bag_auc_class" << c << " " << bag_auc_per_class[c] << "\n";
  for (std::size_t c = 0; c < bag_f1_per_class.size(); ++c)
    os << "bag_f1_class" << c << " " << bag_f1_per_class[c] << "\n";
  if (has_instance) {
    os << "n_instances " << n_instances << "\n";
    os << "inst_auc " << inst_auc << "\n";
    os << "inst_f1 " << inst_f1 << "\n";
    for (std::size_t c = 0; c < inst_auc_per_class.size(); ++c)
      os << "inst_auc_class" << c << " " << inst_auc_per_class[c] << "\n";
    for (std::size_t c = 0; c < inst_f1_per_class.size(); ++c)
      os << "inst_f1_class" << c << " " << inst_f1_per_class[c] << "\n";
  }
  for (const auto& w : warnings) os << "warning " << w << "\n";
  return os.str();
}

std::string EvalReport::csv_header() {
  return "run,fold,split,n_bags,n_instances,bag_auc,bag_f1,inst_auc,inst_f1";
}

std::string EvalReport::csv_row(const std::string& run, int fold, const std::string& split) const {
  std::ostringstream os;
  os << run << "," << fold << "," << split << "," << n_bags << "," << n_instances << "," << bag_auc
     << "," << bag_f1 << "," << inst_auc << "," << inst_f1;
  return os.str();
}

}  // namespace milforge
