#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "milforge/rng.hpp"
#include "milforge/train.hpp"

using namespace milforge;

namespace {

// Tiny separable binary task: positive bags carry one instance with
// feature[0] lifted to 5.
std::vector<Bag> toy_bags(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Bag> bags(n);
  for (std::size_t i = 0; i < n; ++i) {
    bags[i].id = std::uint32_t(i);
    bags[i].label = std::uint32_t(i % 2);
    bags[i].features = Tensor<float>::zeros({4, 8});
    for (auto& v : bags[i].features.data) v = float(rng.normal() * 0.3);
    std::vector<std::uint16_t> truth(4, 0);
    if (bags[i].label == 1) {
      const std::size_t hot = rng.below(4);
      bags[i].features.at(hot, 0) = 5.0f;
      truth[hot] = 1;
    }
    bags[i].instance_truth = truth;
  }
  return bags;
}

MilModel<float> toy_model(std::uint64_t seed, ModelKind kind = ModelKind::clamsb) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.num_classes = 2;
  cfg.feature_dim = 8;
  return MilModel<float>::make(cfg, seed);
}

}  // namespace

TEST_CASE("adamw: spec examples") {
  // Zero gradients with wd = 0 leave parameters unchanged.
  Param<float> p{"p", Tensor<float>::vector({1.0f, -2.0f, 3.0f})};
  AdamW opt({&p}, 0.0);
  const auto before = p.value.data;
  opt.step(0.1);
  CHECK(p.value.data == before);

  // Single scalar, g=1, first step: delta = -lr / (1 + eps) ~ -lr.
  Param<float> q{"q", Tensor<float>::vector({0.0f})};
  q.grad.data[0] = 1.0f;
  AdamW opt2({&q}, 0.0);
  opt2.step(0.01);
  CHECK(double(q.value.data[0]) == doctest::Approx(-0.01).epsilon(1e-6));

  // wd > 0 with zero gradient shrinks by (1 - lr*wd).
  Param<float> r{"r", Tensor<float>::vector({2.0f})};
  AdamW opt3({&r}, 0.5);
  opt3.step(0.1);
  CHECK(double(r.value.data[0]) == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-6));

  // Non-finite gradient aborts naming the parameter.
  Param<float> s{"gamma", Tensor<float>::vector({1.0f})};
  s.grad.data[0] = std::numeric_limits<float>::quiet_NaN();
  AdamW opt4({&s}, 0.0);
  try {
    opt4.step(0.1);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("gamma") != std::string::npos);
  }
}

TEST_CASE("cosine_lr examples") {
  CHECK(cosine_lr(0, 150, 2e-4) == doctest::Approx(2e-4));
  CHECK(cosine_lr(150, 150, 2e-4) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine_lr(75, 150, 2e-4) == doctest::Approx(1e-4));
  CHECK_THROWS_AS(cosine_lr(-1, 10, 1e-3), ConfigError);
}

TEST_CASE("early stop: metric peaking at epoch 10 stops at epoch 25") {
  EarlyStop stop{15};
  int stopped_at = 0;
  for (int e = 1; e <= 150; ++e) {
    const double metric = e <= 10 ? 0.5 + 0.01 * e : 0.55;
    if (stop.update(metric)) {
      stopped_at = e;
      break;
    }
  }
  CHECK(stopped_at == 25);
  CHECK(stop.best == doctest::Approx(0.6));
}

TEST_CASE("gradient accumulation equals a step on the mean of per-bag gradients") {
  auto bags = toy_bags(8, 3);
  std::vector<std::size_t> idx(bags.size());
  std::iota(idx.begin(), idx.end(), 0);

  auto model_a = toy_model(5);
  auto model_b = toy_model(5);

  auto one_bag_backward = [](MilModel<float>& m, const Bag& bag) {
    Tape<float> tape;
    auto f = m.forward(tape, bag.features, nullptr);
    tape.backward(ops::cross_entropy_logits(tape, f.logits, bag.label));
  };

  // A: accumulate all 8 bags, scale by 1/8, step.
  model_a.zero_grads();
  for (const auto& bag : bags) one_bag_backward(model_a, bag);
  for (auto* p : model_a.params())
    kernels::active<float>().scale(p->grad.ptr(), 1.0f / 8.0f, p->grad.ptr(), p->grad.numel());
  AdamW opt_a(model_a.params(), 1e-2);
  opt_a.step(1e-3);

  // B: per-bag gradients divided by 8 first, then summed.
  auto params_b = model_b.params();
  std::vector<Tensor<float>> mean_grads;
  for (auto* p : params_b) mean_grads.push_back(Tensor<float>::zeros(p->value.shape));
  for (const auto& bag : bags) {
    model_b.zero_grads();
    one_bag_backward(model_b, bag);
    for (std::size_t pi = 0; pi < params_b.size(); ++pi)
      kernels::active<float>().axpy(1.0f / 8.0f, params_b[pi]->grad.ptr(), mean_grads[pi].ptr(),
                                    mean_grads[pi].numel());
  }
  for (std::size_t pi = 0; pi < params_b.size(); ++pi) params_b[pi]->grad = mean_grads[pi];
  AdamW opt_b(params_b, 1e-2);
  opt_b.step(1e-3);

  auto params_a = model_a.params();
  for (std::size_t pi = 0; pi < params_a.size(); ++pi) {
    for (std::size_t i = 0; i < params_a[pi]->value.numel(); ++i) {
      const double a = params_a[pi]->value.data[i];
      const double b = params_b[pi]->value.data[i];
      CHECK(std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}) <= 1e-6);
    }
  }
}

TEST_CASE("smoke fit: loss decreases, cfsd=off reports zero instance loss") {
  auto bags = toy_bags(16, 7);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < 8; ++i) train_idx.push_back(i);
  for (std::size_t i = 8; i < 16; ++i) val_idx.push_back(i);

  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.max_epochs = 30;
  cfg.patience = 29;
  cfg.accumulation = 4;
  cfg.cfsd = CfsdMode::off;
  cfg.seed = 11;

  auto model = toy_model(13);
  auto result = fit_fold(model, bags, train_idx, val_idx, cfg);
  REQUIRE(result.phases.size() == 1);
  const auto& hist = result.phases[0].history;
  REQUIRE(hist.size() >= 2);
  CHECK(hist.back().bag_loss < hist.front().bag_loss);
  for (const auto& row : hist) {
    CHECK(row.inst_loss == 0.0);
    CHECK(row.p_threshold == 0.0);
  }
}

TEST_CASE("seeded determinism: same config, data, seed give bitwise-equal parameters") {
  auto bags = toy_bags(12, 17);
  std::vector<std::size_t> train_idx{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<std::size_t> val_idx{8, 9, 10, 11};
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.max_epochs = 6;
  cfg.patience = 5;
  cfg.accumulation = 3;
  cfg.cfsd = CfsdMode::parallel;
  cfg.warmup = 2;
  cfg.seed = 19;

  auto m1 = toy_model(23);
  auto m2 = toy_model(23);
  auto r1 = fit_fold(m1, bags, train_idx, val_idx, cfg);
  auto r2 = fit_fold(m2, bags, train_idx, val_idx, cfg);

  auto s1 = m1.snapshot();
  auto s2 = m2.snapshot();
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i].data == s2[i].data);
  REQUIRE(r1.history().size() == r2.history().size());
  for (std::size_t i = 0; i < r1.history().size(); ++i) {
    CHECK(r1.history()[i].bag_loss == r2.history()[i].bag_loss);
    CHECK(r1.history()[i].val_bag_auc == r2.history()[i].val_bag_auc);
  }
}

TEST_CASE("parallel cfsd activates after warmup; schedule threshold is logged") {
  auto bags = toy_bags(12, 29);
  std::vector<std::size_t> train_idx{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<std::size_t> val_idx{8, 9, 10, 11};
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.max_epochs = 8;
  cfg.patience = 7;
  cfg.accumulation = 4;
  cfg.cfsd = CfsdMode::parallel;
  cfg.warmup = 3;
  cfg.seed = 31;

  auto model = toy_model(37);
  auto result = fit_fold(model, bags, train_idx, val_idx, cfg);
  const auto& hist = result.phases[0].history;
  REQUIRE(hist.size() >= 5);
  for (std::size_t e = 0; e < hist.size(); ++e) {
    if (e < 3)
      CHECK(hist[e].inst_loss == 0.0);  // warmup epochs
    else
      CHECK(hist[e].inst_loss > 0.0);
    CHECK(hist[e].p_threshold >= 0.05);
  }
}

TEST_CASE("finetune mode: two phases, fresh schedule, best tracks the history maximum") {
  auto bags = toy_bags(20, 41);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < 12; ++i) train_idx.push_back(i);
  for (std::size_t i = 12; i < 20; ++i) val_idx.push_back(i);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.max_epochs = 10;
  cfg.patience = 4;
  cfg.accumulation = 4;
  cfg.cfsd = CfsdMode::finetune;
  cfg.seed = 43;

  std::ostringstream log;
  auto model = toy_model(47);
  auto result = fit_fold(model, bags, train_idx, val_idx, cfg, &log);
  REQUIRE(result.phases.size() == 2);
  CHECK(result.phases[0].name == "bag");
  CHECK(result.phases[1].name == "finetune");
  CHECK(log.str().find("phase bag begin") != std::string::npos);
  CHECK(log.str().find("phase finetune begin") != std::string::npos);

  for (const auto& phase : result.phases) {
    double best = -1.0;
    for (const auto& row : phase.history) best = std::max(best, row.val_bag_auc);
    CHECK(phase.best_val_auc == doctest::Approx(best));
    // Early stop honors patience: never more than `patience` epochs past best.
    CHECK(phase.history.back().epoch - phase.best_epoch <= cfg.patience);
  }
  // Phase B history continues the epoch numbering.
  CHECK(result.phases[1].history.front().epoch ==
        result.phases[0].history.back().epoch + 1);
  // Phase B logs a live threshold from its first epoch.
  CHECK(result.phases[1].history.front().inst_loss > 0.0);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.accumulation = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.accumulation = 1;
  cfg.patience = 200;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.patience = 15;
  cfg.lr = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  auto bags = toy_bags(4, 1);
  TrainConfig ok;
  ok.max_epochs = 2;
  ok.patience = 1;
  ok.cfsd = CfsdMode::parallel;
  auto pool = toy_model(1, ModelKind::maxpool);
  CHECK_THROWS_AS(fit_fold(pool, bags, {0, 1}, {2, 3}, ok), ConfigError);
}
