#include "milforge/gradcheck_suite.hpp"

#include <functional>
#include <iomanip>
#include <ostream>
#include <vector>

#include "milforge/cfsd.hpp"
#include "milforge/gradcheck.hpp"
#include "milforge/model.hpp"
#include "milforge/tape.hpp"

namespace milforge {

namespace {

using Id = Tape<double>::Id;

Tensor<double> rand_t(std::vector<std::size_t> shape, Rng& rng, double span = 1.0) {
  auto t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-span, span);
  return t;
}

// Loose container for non-model inputs that should be gradchecked too.
struct Slot {
  std::string name;
  Tensor<double> value;
  Tensor<double> grad;
  Slot(std::string n, Tensor<double> v) : name(std::move(n)) {
    grad = Tensor<double>::zeros(v.shape);
    value = std::move(v);
  }
};

Id project(Tape<double>& t, Id x, const Tensor<double>& r) {
  auto p = ops::mul(t, x, t.leaf(r, "proj"));
  return ops::sum_rows(t, ops::reshape(t, p, {std::size_t(1), t.value(p).numel()}));
}

struct BlockResult {
  std::string name;
  GradCheckReport report;
};

BlockResult check_block(const std::string& name, const std::function<Id(Tape<double>&)>& build,
                        std::vector<Slot>& slots, std::vector<Param<double>*> params, double tol) {
  auto loss_fn = [&] {
    Tape<double> t;
    return t.value(build(t)).data[0];
  };
  auto grad_fn = [&] {
    for (auto* p : params) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    for (auto& s : slots) std::fill(s.grad.data.begin(), s.grad.data.end(), 0.0);
    Tape<double> t;
    t.backward(build(t));
  };
  std::vector<GradCheckTarget> targets;
  for (auto& s : slots) targets.push_back({s.name, &s.value, &s.grad});
  for (auto* p : params) targets.push_back({p->name, &p->value, &p->grad});
  return {name, gradcheck(loss_fn, grad_fn, targets, tol)};
}

// The build closures below bind slots/params into a fresh tape per call, so
// finite-difference perturbations of the stored tensors flow through.

}  // namespace

bool run_gradcheck_suite(std::ostream& out, bool inject_fault, unsigned long long seed) {
  Rng rng(Rng::mix(seed, 0x9cade));
  std::vector<BlockResult> results;

  const std::size_t K = 5, D = 16, C = 3;

  // ---- linear embedder ----
  {
    ModelConfig cfg{ModelKind::clamsb, std::uint32_t(C), std::uint32_t(D), PeMode::none, 100.0f, 8};
    auto model = MilModel<double>::make(cfg, seed);
    std::vector<Slot> slots;
    slots.emplace_back("H", rand_t({K, D}, rng));
    const auto proj = rand_t({K, kEmbedDim}, rng);
    auto build = [&](Tape<double>& t) {
      auto net = model.attn.bind(t);
      auto H = t.param(slots[0].value, &slots[0].grad, "H");
      return project(t, blocks::fc_embed(t, H, net), proj);
    };
    results.push_back(check_block("linear_embed", build, slots,
                                  {&model.attn.embed_w, &model.attn.embed_b}, 1e-6));
  }

  // ---- gated attention (scores + column softmax) ----
  {
    ModelConfig cfg{ModelKind::clamsb, std::uint32_t(C), std::uint32_t(D), PeMode::none, 100.0f, 8};
    auto model = MilModel<double>::make(cfg, Rng::mix(seed, 1));
    std::vector<Slot> slots;
    slots.emplace_back("h", rand_t({K, kEmbedDim}, rng));
    const auto proj_s = rand_t({K, C}, rng);
    const auto proj_a = rand_t({K, C}, rng);
    auto build = [&](Tape<double>& t) {
      auto net = model.attn.bind(t);
      auto h = t.param(slots[0].value, &slots[0].grad, "h");
      auto sc = blocks::gated_scores(t, h, net, C);
      return ops::add(t, project(t, sc.s, proj_s), project(t, sc.alpha, proj_a));
    };
    results.push_back(check_block("gated_attention", build, slots,
                                  {&model.attn.gate_u, &model.attn.gate_v, &model.attn.branches},
                                  1e-4));
  }

  // ---- attention pooling ----
  {
    std::vector<Slot> slots;
    slots.emplace_back("h", rand_t({K, 8}, rng));
    slots.emplace_back("scores", rand_t({K, C}, rng));
    const auto proj = rand_t({C, 8}, rng);
    auto build = [&](Tape<double>& t) {
      auto h = t.param(slots[0].value, &slots[0].grad, "h");
      auto s = t.param(slots[1].value, &slots[1].grad, "scores");
      auto alpha = ops::softmax_cols(t, s);
      return project(t, blocks::attention_pool(t, h, alpha), proj);
    };
    results.push_back(check_block("attention_pool", build, slots, {}, 1e-4));
  }

  // ---- softmax at uniform (zero) input ----
  {
    std::vector<Slot> slots;
    slots.emplace_back("x", Tensor<double>::zeros({2, 6}));
    const auto proj = rand_t({2, 6}, rng);
    auto build = [&](Tape<double>& t) {
      auto x = t.param(slots[0].value, &slots[0].grad, "x");
      return project(t, ops::softmax_rows(t, x), proj);
    };
    results.push_back(check_block("softmax_uniform", build, slots, {}, 1e-4));
  }

  // ---- 2DPE-augmented transformer ----
  {
    ModelConfig cfg{ModelKind::pathmil, std::uint32_t(C), std::uint32_t(D), PeMode::twod, 100.0f, 8};
    auto model = MilModel<double>::make(cfg, Rng::mix(seed, 2));
    auto& st = *model.stack;
    std::vector<Slot> slots;
    slots.emplace_back("h", rand_t({K, kEmbedDim}, rng));
    Tensor<double> coords = Tensor<double>::zeros({K, 2});
    for (auto& v : coords.data) v = rng.uniform();
    const auto proj = rand_t({1, kEmbedDim}, rng);
    auto build = [&](Tape<double>& t) {
      auto h = t.param(slots[0].value, &slots[0].grad, "h");
      auto cls = t.param(st.cls.value, &st.cls.grad, "cls");
      auto x = ops::concat_rows(t, ops::reshape(t, cls, {std::size_t(1), kEmbedDim}), h);
      auto l0 = blocks::bind_layer(t, st.layer[0]);
      auto l1 = blocks::bind_layer(t, st.layer[1]);
      x = blocks::residual_attention(t, x, l0, 8);
      x = blocks::two_d_pos_enc(t, x, coords, 100.0);
      x = blocks::residual_attention(t, x, l1, 8);
      auto fg = t.param(st.final_gain.value, &st.final_gain.grad);
      auto fb = t.param(st.final_bias.value, &st.final_bias.grad);
      auto hpp = ops::take_row(t, ops::layer_norm(t, x, fg, fb), 0);
      return project(t, hpp, proj);
    };
    std::vector<Param<double>*> params{&st.cls, &st.final_gain, &st.final_bias};
    for (auto& l : st.layer)
      for (Param<double>* p : {&l.norm_gain, &l.norm_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo})
        params.push_back(p);
    results.push_back(check_block("transformer_2dpe", build, slots, params, 1e-4));
  }

  // ---- full PathMIL with bag and instance losses ----
  {
    ModelConfig cfg{ModelKind::pathmil, std::uint32_t(C), std::uint32_t(D), PeMode::twod, 100.0f, 8};
    auto model = MilModel<double>::make(cfg, Rng::mix(seed, 3));
    std::vector<Slot> slots;
    slots.emplace_back("H", rand_t({K, D}, rng));
    Tensor<double> coords = Tensor<double>::zeros({K, 2});
    for (auto& v : coords.data) v = rng.uniform();
    const std::size_t label = 1;

    // Selection is frozen at the base point so the checked function stays
    // differentiable across the finite-difference probes.
    std::vector<std::size_t> selected;
    {
      Tape<double> t;
      auto f = model.forward(t, slots[0].value, &coords);
      const auto& sv = t.value(f.scores);
      std::vector<double> col(K);
      for (std::size_t k = 0; k < K; ++k) col[k] = sv.at(k, label);
      selected = select_top_p(col, 0.20);
    }

    auto build = [&, label](Tape<double>& t) {
      // Rebind the forward pass against the slot copy of H.
      auto f = model.forward(t, slots[0].value, &coords);
      auto bag_loss = ops::cross_entropy_logits(t, f.logits, label);
      auto sel = ops::take_rows(t, f.scores, selected);
      auto probs = blocks::instance_probs(t, sel);
      auto inst = ops::bce_with_onehot(t, probs, std::vector<std::size_t>(selected.size(), label));
      return ops::add(t, bag_loss, inst);
    };
    // H is consumed as a leaf inside forward(); check parameters only.
    std::vector<Slot> no_slots;
    results.push_back(check_block("pathmil_full_losses", build, no_slots, model.params(), 1e-4));
  }

  if (inject_fault) {
    std::vector<Slot> slots;
    slots.emplace_back("x", rand_t({std::size_t(4)}, rng));
    auto build = [&](Tape<double>& t) {
      auto x = t.param(slots[0].value, &slots[0].grad, "x");
      // tanh with a sign-flipped backward formula.
      const auto& xv = t.value(x);
      Tensor<double> y = Tensor<double>::zeros(xv.shape);
      for (std::size_t i = 0; i < xv.numel(); ++i) y.data[i] = std::tanh(xv.data[i]);
      const auto self = t.next_id();
      auto bad = t.push(std::move(y),
                        [self, x](Tape<double>& tp) {
                          const auto& dc = tp.grad(self);
                          const auto& yv = tp.value(self);
                          auto& dx = tp.grad(x);
                          for (std::size_t i = 0; i < dc.numel(); ++i)
                            dx.data[i] -= dc.data[i] * (1.0 - yv.data[i] * yv.data[i]);
                        },
                        "tanh_sign_flipped");
      auto flat = ops::reshape(t, bad, {std::size_t(1), std::size_t(4)});
      return ops::sum_rows(t, flat);
    };
    results.push_back(check_block("fault_injection_sign_flip", build, slots, {}, 1e-4));
  }

  bool all_pass = true;
  for (const auto& r : results) {
    const bool ok = r.report.pass;
    all_pass &= ok;
    out << (ok ? "PASS" : "FAIL") << "  " << std::left << std::setw(26) << r.name
        << " max_rel_err=" << std::scientific << std::setprecision(3) << r.report.max_rel_err
        << std::defaultfloat << "  tol=" << r.report.tolerance;
    if (!r.report.note.empty()) out << "  (" << r.report.note << ")";
    out << "\n";
    if (!ok) {
      for (const auto& e : r.report.entries)
        if (!e.finite || e.max_rel_err > r.report.tolerance)
          out << "      worst: " << e.name << " rel_err=" << std::scientific << e.max_rel_err
              << std::defaultfloat << (e.finite ? "" : " [non-finite]") << "\n";
    }
  }
  out << (all_pass ? "PASS" : "FAIL") << "  gradcheck suite overall\n";
  return all_pass;
}

}  // namespace milforge
