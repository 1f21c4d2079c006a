#include "milforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "milforge/rng.hpp"

namespace milforge {

CfsdMode parse_cfsd_mode(const std::string& s) {
  if (s == "off") return CfsdMode::off;
  if (s == "parallel") return CfsdMode::parallel;
  if (s == "finetune") return CfsdMode::finetune;
  throw ConfigError("unknown cfsd mode '" + s + "' (off|parallel|finetune)");
}

const char* to_string(CfsdMode m) {
  switch (m) {
    case CfsdMode::off: return "off";
    case CfsdMode::parallel: return "parallel";
    case CfsdMode::finetune: return "finetune";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (accumulation < 1) throw ConfigError("train: accumulation must be >= 1");
  if (patience >= max_epochs) throw ConfigError("train: patience must be < max_epochs");
  if (lr <= 0) throw ConfigError("train: lr must be positive");
  if (warmup < 0) throw ConfigError("train: warmup must be >= 0");
}

AdamW::AdamW(std::vector<Param<float>*> params, double weight_decay)
    : params_(std::move(params)), wd_(weight_decay) {
  moments_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    moments_[i].m.assign(params_[i]->value.numel(), 0.0f);
    moments_[i].v.assign(params_[i]->value.numel(), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, double(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, double(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Param<float>& p = *params_[pi];
    if (!p.grad.all_finite())
      throw NumericalError("adamw: non-finite gradient in parameter '" + p.name + "'");
    auto& m = moments_[pi].m;
    auto& v = moments_[pi].v;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = double(p.grad.data[i]);
      m[i] = float(kBeta1 * double(m[i]) + (1.0 - kBeta1) * g);
      v[i] = float(kBeta2 * double(v[i]) + (1.0 - kBeta2) * g * g);
      const double m_hat = double(m[i]) / bc1;
      const double v_hat = double(v[i]) / bc2;
      const double theta = double(p.value.data[i]);
      p.value.data[i] = float(theta - lr * (m_hat / (std::sqrt(v_hat) + kEps)) - lr * wd_ * theta);
    }
  }
}

double cosine_lr(int epoch, int max_epochs, double lr_max) {
  if (epoch < 0 || epoch > max_epochs) throw ConfigError("cosine_lr: epoch out of range");
  return lr_max * (1.0 + std::cos(M_PI * double(epoch) / double(max_epochs))) / 2.0;
}

const char* const kHistoryHeader =
    "epoch,lr,bag_loss,inst_loss,val_bag_auc,val_bag_f1,val_inst_auc,val_inst_f1,p_threshold";

std::string history_row(const EpochReport& r) {
  std::ostringstream os;
  os << r.epoch << "," << r.lr << "," << r.bag_loss << "," << r.inst_loss << "," << r.val_bag_auc
     << "," << r.val_bag_f1 << "," << r.val_inst_auc << "," << r.val_inst_f1 << "," << r.p_threshold;
  return os.str();
}

namespace {

struct EpochLosses {
  double bag = 0, inst = 0;
};

// One pass over the training split: per-bag tapes, gradients averaged over
// each accumulation group, one optimizer step per group.
EpochLosses train_epoch(MilModel<float>& model, const std::vector<Bag>& bags,
                        const std::vector<std::size_t>& train_idx, const TrainConfig& cfg,
                        AdamW& opt, double lr_t, bool cfsd_active, double p, int global_epoch) {
  std::vector<std::size_t> order = train_idx;
  Rng shuffle_rng(Rng::mix(cfg.seed, 0x5eedu ^ std::uint64_t(global_epoch)));
  shuffle_rng.shuffle(order);

  auto params = model.params();
  model.zero_grads();
  int group = 0;
  EpochLosses sums;
  std::size_t n_inst_bags = 0;

  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const Bag& bag = bags[order[pos]];
    Tape<float> tape;
    const Tensor<float>* coords = bag.coords ? &*bag.coords : nullptr;
    auto f = model.forward(tape, bag.features, coords);
    auto loss = ops::cross_entropy_logits(tape, f.logits, bag.label);
    sums.bag += double(tape.value(loss).data[0]);

    if (cfsd_active && f.has_scores) {
      const auto& sv = tape.value(f.scores);
      std::vector<double> col(bag.k());
      for (std::size_t k = 0; k < bag.k(); ++k) col[k] = double(sv.at(k, bag.label));
      auto selected = select_top_p(col, p);
      auto sel_scores = ops::take_rows(tape, f.scores, selected);
      auto probs = blocks::instance_probs(tape, sel_scores);
      auto inst = ops::bce_with_onehot(tape, probs,
                                       std::vector<std::size_t>(selected.size(), bag.label));
      sums.inst += double(tape.value(inst).data[0]);
      ++n_inst_bags;
      loss = ops::add(tape, loss, inst);
    }

    if (!std::isfinite(double(tape.value(loss).data[0])))
      throw NumericalError("train: non-finite loss at bag " + std::to_string(bag.id));
    tape.backward(loss);

    ++group;
    if (group == cfg.accumulation || pos + 1 == order.size()) {
      const float inv = 1.0f / float(group);
      for (Param<float>* prm : params)
        kernels::active<float>().scale(prm->grad.ptr(), inv, prm->grad.ptr(), prm->grad.numel());
      opt.step(lr_t);
      model.zero_grads();
      group = 0;
    }
  }
  sums.bag /= double(order.size());
  sums.inst = n_inst_bags ? sums.inst / double(n_inst_bags) : 0.0;
  return sums;
}

struct PhaseSpec {
  std::string name;
  bool cfsd_enabled = false;
  int warmup = 0;  // epochs before the instance loss joins (parallel mode)
};

PhaseResult run_phase(MilModel<float>& model, const std::vector<Bag>& bags,
                      const std::vector<std::size_t>& train_idx,
                      const std::vector<std::size_t>& val_idx, const TrainConfig& cfg,
                      const PhaseSpec& spec, int epoch_offset, std::ostream* log) {
  PhaseResult result;
  result.name = spec.name;
  AdamW opt(model.params(), cfg.weight_decay);
  ThresholdSchedule sched;
  std::vector<Tensor<float>> best_snapshot = model.snapshot();
  EarlyStop stopper{cfg.patience};

  if (log) *log << "phase " << spec.name << " begin\n";
  for (int e = 1; e <= cfg.max_epochs; ++e) {
    const bool active = spec.cfsd_enabled && e > spec.warmup;
    const double lr_t = cosine_lr(e - 1, cfg.max_epochs, cfg.lr);
    const int global_epoch = epoch_offset + e;
    const auto losses =
        train_epoch(model, bags, train_idx, cfg, opt, lr_t, active, sched.p, global_epoch);

    const EvalReport ev = evaluate_full(model, bags, val_idx);

    EpochReport row;
    row.epoch = global_epoch;
    row.lr = lr_t;
    row.bag_loss = losses.bag;
    row.inst_loss = losses.inst;
    row.val_bag_auc = ev.bag_auc;
    row.val_bag_f1 = ev.bag_f1;
    row.val_inst_auc = ev.inst_auc;
    row.val_inst_f1 = ev.inst_f1;
    row.p_threshold = spec.cfsd_enabled ? sched.p : 0.0;
    result.history.push_back(row);
    if (log) *log << history_row(row) << std::endl;

    if (active) schedule_step(sched, ev.bag_auc);

    const bool stop = stopper.update(ev.bag_auc);
    if (stopper.improved()) {
      best_snapshot = model.snapshot();
      result.best_epoch = global_epoch;
    }
    if (stop) break;
  }
  model.restore(best_snapshot);
  result.best_val_auc = stopper.best;
  if (log)
    *log << "phase " << spec.name << " end best_epoch=" << result.best_epoch
         << " best_val_bag_auc=" << result.best_val_auc << "\n";
  return result;
}

}  // namespace

FoldResult fit_fold(MilModel<float>& model, const std::vector<Bag>& bags,
                    const std::vector<std::size_t>& train_idx,
                    const std::vector<std::size_t>& val_idx, const TrainConfig& cfg,
                    std::ostream* log) {
  cfg.validate();
  if (train_idx.empty() || val_idx.empty()) throw ConfigError("fit: empty fold");
  if (cfg.cfsd != CfsdMode::off &&
      (model.config.kind == ModelKind::maxpool || model.config.kind == ModelKind::meanpool))
    throw ConfigError("fit: CFSD requires an attention-based model");

  FoldResult result;
  switch (cfg.cfsd) {
    case CfsdMode::off:
      result.phases.push_back(
          run_phase(model, bags, train_idx, val_idx, cfg, {"bag", false, 0}, 0, log));
      break;
    case CfsdMode::parallel:
      result.phases.push_back(
          run_phase(model, bags, train_idx, val_idx, cfg, {"parallel", true, cfg.warmup}, 0, log));
      break;
    case CfsdMode::finetune: {
      auto phase_a =
          run_phase(model, bags, train_idx, val_idx, cfg, {"bag", false, 0}, 0, log);
      const int offset = int(phase_a.history.size());
      result.phases.push_back(std::move(phase_a));
      // Phase B resumes from the best phase-A checkpoint (already restored)
      // with fresh optimizer state, threshold schedule and early-stop counter.
      result.phases.push_back(
          run_phase(model, bags, train_idx, val_idx, cfg, {"finetune", true, 0}, offset, log));
      break;
    }
  }
  result.final_eval = evaluate_full(model, bags, val_idx);
  return result;
}

std::vector<FoldPlan> fold_plans(const DatasetManifest& manifest, bool holdout) {
  if (manifest.folds.empty()) throw ConfigError("fold_plans: manifest has no split assignment");
  const std::uint32_t n_folds = *std::max_element(manifest.folds.begin(), manifest.folds.end()) + 1;
  std::vector<FoldPlan> plans;
  if (holdout) {
    if (n_folds != 2) throw ConfigError("fold_plans: holdout manifest must have exactly folds {0,1}");
    FoldPlan plan;  // fold 0 trains, fold 1 evaluates
    for (std::size_t i = 0; i < manifest.folds.size(); ++i)
      (manifest.folds[i] == 0 ? plan.train : plan.val).push_back(i);
    plans.push_back(std::move(plan));
    return plans;
  }
  for (std::uint32_t f = 0; f < n_folds; ++f) {
    FoldPlan plan;
    for (std::size_t i = 0; i < manifest.folds.size(); ++i)
      (manifest.folds[i] == f ? plan.val : plan.train).push_back(i);
    plans.push_back(std::move(plan));
  }
  return plans;
}

}  // namespace milforge
