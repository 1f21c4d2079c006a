#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "milforge/cfsd.hpp"
#include "milforge/data.hpp"
#include "milforge/metrics.hpp"
#include "milforge/model.hpp"

namespace milforge {

enum class CfsdMode { off, parallel, finetune };
CfsdMode parse_cfsd_mode(const std::string& s);
const char* to_string(CfsdMode m);

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 1e-2;
  int accumulation = 32;       // bags per optimizer step, batch size 1
  int max_epochs = 150;
  int patience = 15;           // early stop on the validation bag macro AUC
  CfsdMode cfsd = CfsdMode::off;
  int warmup = 5;              // epochs before CFSD activates (parallel mode)
  std::uint64_t seed = 0;

  void validate() const;
};

// Decoupled weight decay:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
class AdamW {
 public:
  AdamW(std::vector<Param<float>*> params, double weight_decay);
  // Throws NumericalError naming the parameter on a non-finite gradient.
  void step(double lr);
  long step_count() const { return t_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  std::vector<Param<float>*> params_;
  std::vector<Moments> moments_;
  double wd_;
  long t_ = 0;
};

// lr_t = lr_max * (1 + cos(pi * epoch / max_epochs)) / 2, eta_min = 0.
double cosine_lr(int epoch, int max_epochs, double lr_max);

// Strict-improvement early stopping: update() returns true once the metric
// has not improved for `patience` consecutive epochs.
struct EarlyStop {
  int patience;
  double best = -std::numeric_limits<double>::infinity();
  int bad = 0;

  bool update(double metric) {
    if (metric > best) {
      best = metric;
      bad = 0;
      return false;
    }
    return ++bad >= patience;
  }
  bool improved() const { return bad == 0; }
};

struct EpochReport {
  int epoch = 0;  // 1-based, continuous across fine-tuning phases
  double lr = 0, bag_loss = 0, inst_loss = 0;
  double val_bag_auc = 0, val_bag_f1 = 0, val_inst_auc = 0, val_inst_f1 = 0;
  double p_threshold = 0;
};

extern const char* const kHistoryHeader;
std::string history_row(const EpochReport& r);

struct PhaseResult {
  std::string name;
  std::vector<EpochReport> history;
  int best_epoch = 0;
  double best_val_auc = 0;
};

struct FoldResult {
  std::vector<PhaseResult> phases;
  EvalReport final_eval;  // best checkpoint on the validation split
  std::vector<EpochReport> history() const {
    std::vector<EpochReport> all;
    for (const auto& ph : phases) all.insert(all.end(), ph.history.begin(), ph.history.end());
    return all;
  }
};

// Trains one fold in place: parallel mode is a single phase with CFSD active
// after the warmup; finetune trains bag-only to early stop, reloads the best
// checkpoint, and resumes with CFSD on and fresh optimizer / threshold
// schedule / early-stop state. The model ends at the best checkpoint of the
// last phase.
FoldResult fit_fold(MilModel<float>& model, const std::vector<Bag>& bags,
                    const std::vector<std::size_t>& train_idx,
                    const std::vector<std::size_t>& val_idx, const TrainConfig& cfg,
                    std::ostream* log = nullptr);

// Train/validation index pairs from a manifest fold assignment. With
// holdout=true, fold 0 trains and fold 1 evaluates in a single plan.
struct FoldPlan {
  std::vector<std::size_t> train, val;
};
std::vector<FoldPlan> fold_plans(const DatasetManifest& manifest, bool holdout);

}  // namespace milforge
