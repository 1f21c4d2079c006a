#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "milforge/data.hpp"
#include "milforge/metrics.hpp"
#include "milforge/rng.hpp"

using namespace milforge;

namespace {

// All-pairs brute force: correctly ordered positive-negative pairs count 1,
// ties count 1/2.
double auc_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double hits = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 0) continue;
    ++n_pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j])
        hits += 1.0;
      else if (scores[i] == scores[j])
        hits += 0.5;
    }
  }
  for (int l : labels) n_neg += (l == 0);
  return hits / (double(n_pos) * double(n_neg));
}

}  // namespace

TEST_CASE("roc_auc examples") {
  CHECK(roc_auc({0.9, 0.1}, {1, 0}) == 1.0);
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
  CHECK(roc_auc({0.8, 0.6, 0.4, 0.2}, {1, 0, 1, 0}) == 0.75);
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), MetricError);
}

TEST_CASE("roc_auc equals the all-pairs brute force exactly, with ties") {
  Rng rng(5);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    // Quantized scores so ties actually occur.
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = double(rng.uniform_int(0, 20)) / 20.0;
      labels[i] = int(rng.below(2));
    }
    bool has_pos = false, has_neg = false;
    for (int l : labels) (l ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) {
      labels[0] = 1;
      labels[n - 1] = 0;
    }
    CHECK(roc_auc(scores, labels) == auc_oracle(scores, labels));
  }
}

TEST_CASE("roc_auc is invariant under strictly increasing transforms") {
  Rng rng(9);
  std::vector<double> scores(50);
  std::vector<int> labels(50);
  for (std::size_t i = 0; i < 50; ++i) {
    scores[i] = rng.uniform(-2.0, 2.0);
    labels[i] = int(rng.below(2));
  }
  labels[0] = 1;
  labels[1] = 0;
  const double base = roc_auc(scores, labels);
  std::vector<double> warped = scores;
  for (auto& s : warped) s = std::exp(3.0 * s) + 7.0;
  CHECK(roc_auc(warped, labels) == base);
}

TEST_CASE("f1_macro examples") {
  CHECK(f1_macro({0, 1, 2, 0}, {0, 1, 2, 0}, 3) == 1.0);

  // All predictions one class over balanced binary truth: (2/3 + 0)/2 = 1/3.
  std::vector<int> pred(10, 0);
  std::vector<int> truth;
  for (int i = 0; i < 10; ++i) truth.push_back(i < 5 ? 0 : 1);
  CHECK(f1_macro(pred, truth, 2) == doctest::Approx(1.0 / 3.0));

  // A class absent from both sides contributes 0, not NaN.
  std::vector<std::string> warnings;
  std::vector<double> per_class;
  const double v = f1_macro({0, 1}, {0, 1}, 3, &per_class, &warnings);
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(2.0 / 3.0));
  CHECK(per_class[2] == 0.0);
  CHECK(!warnings.empty());
}

TEST_CASE("macro values equal unweighted means of their per-class values") {
  auto [images, labels] = make_digit_corpus(400, 3);
  auto bags = synth_mnist_bags(images, labels, 60, {5, 10}, 4);
  ModelConfig cfg;
  cfg.kind = ModelKind::clamsb;
  cfg.num_classes = 4;
  cfg.feature_dim = 784;
  auto model = MilModel<float>::make(cfg, 5);
  std::vector<std::size_t> idx(bags.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rep = evaluate(model, bags, idx, EvalLevel::instance);

  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    int n = 0;
    for (double x : v)
      if (std::isfinite(x)) {
        s += x;
        ++n;
      }
    return s / double(n);
  };
  CHECK(std::abs(rep.bag_auc - mean_of(rep.bag_auc_per_class)) <= 1e-9);
  CHECK(std::abs(rep.inst_auc - mean_of(rep.inst_auc_per_class)) <= 1e-9);
  const double f1_mean =
      std::accumulate(rep.bag_f1_per_class.begin(), rep.bag_f1_per_class.end(), 0.0) /
      double(rep.bag_f1_per_class.size());
  CHECK(std::abs(rep.bag_f1 - f1_mean) <= 1e-9);
}

TEST_CASE("evaluate: untrained model sits in the chance band at instance level") {
  auto [images, labels] = make_digit_corpus(1500, 6);
  auto bags = synth_mnist_bags(images, labels, 250, {10, 20}, 7);
  ModelConfig cfg;
  cfg.kind = ModelKind::clamsb;
  cfg.num_classes = 4;
  cfg.feature_dim = 784;
  auto model = MilModel<float>::make(cfg, 11);
  std::vector<std::size_t> idx(bags.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rep = evaluate(model, bags, idx, EvalLevel::instance);
  CHECK(rep.inst_auc >= 0.4);
  CHECK(rep.inst_auc <= 0.6);

  // Same checkpoint, same report.
  auto rep2 = evaluate(model, bags, idx, EvalLevel::instance);
  CHECK(rep.bag_auc == rep2.bag_auc);
  CHECK(rep.inst_auc == rep2.inst_auc);
  CHECK(rep.bag_f1 == rep2.bag_f1);
}

TEST_CASE("evaluate: one bag per class with one instance, perfect model") {
  // Build a 2-class dataset of 2 singleton bags and force a perfect head.
  std::vector<Bag> bags(2);
  for (int i = 0; i < 2; ++i) {
    bags[i].id = std::uint32_t(i);
    bags[i].label = std::uint32_t(i);
    bags[i].features = Tensor<float>::zeros({1, 4});
    bags[i].features.at(0, std::size_t(i)) = 1.0f;
    bags[i].instance_truth = std::vector<std::uint16_t>{std::uint16_t(i)};
  }
  ModelConfig cfg;
  cfg.kind = ModelKind::clamsb;
  cfg.num_classes = 2;
  cfg.feature_dim = 4;
  auto model = MilModel<float>::make(cfg, 13);

  // Wire the embedder to copy the two indicator inputs and the attention
  // branches to mirror them, so bag logits and instance scores separate.
  std::fill(model.attn.embed_w.value.data.begin(), model.attn.embed_w.value.data.end(), 0.0f);
  std::fill(model.attn.embed_b.value.data.begin(), model.attn.embed_b.value.data.end(), 0.0f);
  model.attn.embed_w.value.at(0, 0) = 8.0f;
  model.attn.embed_w.value.at(1, 1) = 8.0f;
  std::fill(model.attn.gate_u.value.data.begin(), model.attn.gate_u.value.data.end(), 0.0f);
  std::fill(model.attn.gate_v.value.data.begin(), model.attn.gate_v.value.data.end(), 0.0f);
  model.attn.gate_u.value.at(0, 0) = 4.0f;
  model.attn.gate_v.value.at(0, 0) = 4.0f;
  model.attn.gate_u.value.at(1, 1) = 4.0f;
  model.attn.gate_v.value.at(1, 1) = 4.0f;
  std::fill(model.attn.branches.value.data.begin(), model.attn.branches.value.data.end(), 0.0f);
  model.attn.branches.value.at(0, 0) = 6.0f;
  model.attn.branches.value.at(1, 1) = 6.0f;
  std::fill(model.head_w.value.data.begin(), model.head_w.value.data.end(), 0.0f);
  model.head_w.value.at(0, 0) = 6.0f;
  model.head_w.value.at(1, 1) = 6.0f;
  std::fill(model.head_b.value.data.begin(), model.head_b.value.data.end(), 0.0f);

  auto rep = evaluate(model, bags, {0, 1}, EvalLevel::instance);
  CHECK(rep.bag_auc == 1.0);
  CHECK(rep.bag_f1 == 1.0);
  CHECK(rep.inst_auc == 1.0);
  CHECK(rep.inst_f1 == 1.0);
}

TEST_CASE("evaluate: instance level requires truth and an attention model") {
  std::vector<Bag> bags(3);
  for (int i = 0; i < 3; ++i) {
    bags[std::size_t(i)].label = std::uint32_t(i % 2);
    bags[std::size_t(i)].features = Tensor<float>::zeros({2, 4});
  }
  ModelConfig cfg;
  cfg.kind = ModelKind::maxpool;
  cfg.num_classes = 2;
  cfg.feature_dim = 4;
  auto model = MilModel<float>::make(cfg, 17);
  CHECK_THROWS_AS(evaluate(model, bags, {0, 1, 2}, EvalLevel::instance), ConfigError);
}
